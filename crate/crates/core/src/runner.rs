//! Experiment orchestration: trains single-task baselines and the
//! configured multi-task method on the same synthetic data, scores both,
//! compares them with the relative-improvement metric, audits the final
//! weights' spectra, and renders everything to CSV/JSON/SVG.
//!
//! Numeric results are a pure function of `(config, seed)`: file payloads
//! from two identical runs are byte-identical. Wall-clock timings are kept
//! out of the numeric payloads (they live in `diagnostics.csv` only).

use crate::analysis::{
    alpha_spread, audit_part, delta_p, MetricTable, MetricValue, PartAudit, PartSelector,
    PlThresholds, TaskMetrics, DEFAULT_MIN_TAIL,
};
use crate::baselines::{Method, MtoState};
use crate::benchmarks::{generate, split, Dataset, TaskKind};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{BatchBase, ModelBase};
use crate::objective::{train_step, OptimizerState, TrainSettings};
use crate::plot;
use crate::scalar::Real;
use crate::tape::TapeBase;
use crate::tensor::TensorBase;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable naming the directory all run outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "MTLAB_OUT";

/// The output root: `$MTLAB_OUT`, or `./mtlab-out` when unset.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("mtlab-out"))
}

/// One trained model's averaged losses for one epoch. `task_losses` is
/// indexed by dataset task; models that train only one task leave the
/// other slots empty.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow<F> {
    pub model: String,
    pub epoch: usize,
    pub learning_rate: F,
    pub total: F,
    pub tsr: F,
    pub csa: F,
    pub task_losses: Vec<Option<F>>,
}

/// A spectral-audit attempt: either a fitted part or the reason none of
/// its tensors could be fitted.
#[derive(Debug, Clone)]
pub struct AuditOutcome<F> {
    pub audit: Option<PartAudit<F>>,
    pub error: Option<String>,
}

impl<F: Real> AuditOutcome<F> {
    fn from(result: Result<PartAudit<F>>) -> Self {
        match result {
            Ok(audit) => AuditOutcome { audit: Some(audit), error: None },
            Err(e) => AuditOutcome { audit: None, error: Some(e.to_string()) },
        }
    }

    pub fn mean_alpha(&self) -> Option<F> {
        self.audit.as_ref().map(|a| a.mean_alpha)
    }
}

/// Spectral audits of the encoder and every task head.
#[derive(Debug, Clone)]
pub struct AuditReport<F> {
    pub backbone: AuditOutcome<F>,
    pub heads: Vec<AuditOutcome<F>>,
    /// Max − min over the per-head mean exponents; absent when any head
    /// could not be audited.
    pub head_spread: Option<F>,
}

/// Everything a run produces. Numeric fields are deterministic in
/// `(config, seed)`; `timings` is wall-clock and excluded from the CSV and
/// JSON numeric payloads.
#[derive(Debug, Clone)]
pub struct ExperimentReport<F> {
    pub config: RunConfig,
    pub method_name: String,
    pub rows: Vec<EpochRow<F>>,
    /// Seconds per row of `rows`.
    pub timings: Vec<f64>,
    /// Test metrics of the untrained multi-task model.
    pub initial: MetricTable<F>,
    pub final_method: MetricTable<F>,
    pub final_stl: MetricTable<F>,
    pub delta_p_task: F,
    pub delta_p_metric: F,
    pub audit: AuditReport<F>,
    pub warnings: Vec<String>,
    pub method_model: ModelBase<F>,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(6364136223846793005).wrapping_add(stream)
}

fn shuffle_in_place(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn select_batch<F: Real>(
    data: &Dataset<F>,
    positions: &[usize],
    task_slots: &[usize],
) -> Result<BatchBase<F>> {
    let full = data.batch(positions)?;
    if task_slots.len() == full.targets.len()
        && task_slots.iter().enumerate().all(|(i, &s)| i == s)
    {
        return Ok(full);
    }
    let targets = task_slots.iter().map(|&s| full.targets[s].clone()).collect();
    BatchBase::new(full.inputs, targets, full.sample_ids)
}

fn train_one<F: Real>(
    name: &str,
    model: &mut ModelBase<F>,
    mto: &mut MtoState<F>,
    mut settings: TrainSettings<F>,
    config: &RunConfig,
    data: &Dataset<F>,
    task_slots: &[usize],
    shuffle_seed: u64,
    rows: &mut Vec<EpochRow<F>>,
    timings: &mut Vec<f64>,
    warnings: &mut BTreeSet<String>,
) -> Result<()> {
    let n = data.len();
    let num_dataset_tasks = data.task_kinds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut opt = OptimizerState::new();
    let two = F::from_f64_lit(2.0);
    for epoch in 1..=config.train.epochs {
        let started = Instant::now();
        if config.train.halve_lr_at != 0 && epoch == config.train.halve_lr_at {
            settings.optimizer.learning_rate = settings.optimizer.learning_rate / two;
        }
        shuffle_in_place(&mut order, &mut rng);
        let mut total = F::zero();
        let mut tsr = F::zero();
        let mut csa = F::zero();
        let mut task_sums = vec![F::zero(); task_slots.len()];
        for chunk in order.chunks(config.train.batch_size) {
            let batch = select_batch(data, chunk, task_slots)?;
            let report = train_step(model, &batch, mto, &mut opt, &settings, &mut rng)?;
            let b = &report.breakdown;
            if !b.total.is_finite() || b.task_losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::non_finite(format!(
                    "model {name}, epoch {epoch}: total {:?}, task losses {:?}; \
                     aborting before the divergence spreads",
                    b.total.to_f64_lossy(),
                    b.task_losses.iter().map(|l| l.to_f64_lossy()).collect::<Vec<_>>()
                )));
            }
            let weight = F::from_f64_lit(chunk.len() as f64);
            total = total + b.total * weight;
            tsr = tsr + b.tsr * weight;
            csa = csa + b.csa * weight;
            for (sum, &loss) in task_sums.iter_mut().zip(&b.task_losses) {
                *sum = *sum + loss * weight;
            }
            for w in report.warnings {
                warnings.insert(format!("{name}: {w}"));
            }
        }
        let inv_n = F::one() / F::from_f64_lit(n as f64);
        let epoch_tasks: Vec<F> = task_sums.iter().map(|&s| s * inv_n).collect();
        mto.loss_history.push(epoch_tasks.clone());
        let mut task_losses = vec![None; num_dataset_tasks];
        for (&slot, &loss) in task_slots.iter().zip(&epoch_tasks) {
            task_losses[slot] = Some(loss);
        }
        rows.push(EpochRow {
            model: name.to_string(),
            epoch,
            learning_rate: settings.optimizer.learning_rate,
            total: total * inv_n,
            tsr: tsr * inv_n,
            csa: csa * inv_n,
            task_losses,
        });
        timings.push(started.elapsed().as_secs_f64());
    }
    Ok(())
}

/// Scores a model on `data`, reading only the task slots it owns.
/// Regression tasks report `mse` (lower is better); classification tasks
/// report `accuracy` (higher) and `xent` (lower).
pub fn evaluate<F: Real>(
    model: &ModelBase<F>,
    data: &Dataset<F>,
    task_slots: &[usize],
    batch_size: usize,
) -> Result<MetricTable<F>> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation split"));
    }
    #[derive(Clone)]
    struct Acc {
        sse: f64,
        values: f64,
        hits: f64,
        xent: f64,
        samples: f64,
    }
    let mut accs = vec![
        Acc { sse: 0.0, values: 0.0, hits: 0.0, xent: 0.0, samples: 0.0 };
        task_slots.len()
    ];
    let positions: Vec<usize> = (0..data.len()).collect();
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = select_batch(data, chunk, task_slots)?;
        let mut tape: TapeBase<F> = TapeBase::new();
        let pass = model.forward(&batch, &mut tape)?;
        for (i, &slot) in task_slots.iter().enumerate() {
            let pred = tape.value(pass.predictions[i]);
            let target = &batch.targets[i];
            let acc = &mut accs[i];
            match data.task_kinds[slot] {
                TaskKind::Regression { dim } => {
                    for (p, y) in pred.data().iter().zip(target.data()) {
                        let d = p.to_f64_lossy() - y.to_f64_lossy();
                        acc.sse += d * d;
                    }
                    acc.values += (chunk.len() * dim) as f64;
                }
                TaskKind::Classification { classes } => {
                    for (row, y) in target.data().iter().enumerate() {
                        let logits = &pred.data()[row * classes..(row + 1) * classes];
                        let mut best = 0usize;
                        let mut max = logits[0];
                        for (k, &l) in logits.iter().enumerate() {
                            if l > max {
                                max = l;
                                best = k;
                            }
                        }
                        let label = y.to_f64_lossy() as usize;
                        if best == label {
                            acc.hits += 1.0;
                        }
                        let max64 = max.to_f64_lossy();
                        let lse = logits
                            .iter()
                            .map(|&l| (l.to_f64_lossy() - max64).exp())
                            .sum::<f64>()
                            .ln()
                            + max64;
                        acc.xent += lse - logits[label].to_f64_lossy();
                        acc.samples += 1.0;
                    }
                }
            }
        }
    }
    let mut tasks = Vec::with_capacity(task_slots.len());
    for (i, &slot) in task_slots.iter().enumerate() {
        let acc = &accs[i];
        let metrics = match data.task_kinds[slot] {
            TaskKind::Regression { .. } => vec![MetricValue {
                name: "mse".to_string(),
                value: F::from_f64_lit(acc.sse / acc.values),
                higher_is_better: false,
            }],
            TaskKind::Classification { .. } => vec![
                MetricValue {
                    name: "accuracy".to_string(),
                    value: F::from_f64_lit(acc.hits / acc.samples),
                    higher_is_better: true,
                },
                MetricValue {
                    name: "xent".to_string(),
                    value: F::from_f64_lit(acc.xent / acc.samples),
                    higher_is_better: false,
                },
            ],
        };
        tasks.push(TaskMetrics { task: format!("task{slot}"), metrics });
    }
    Ok(MetricTable { tasks })
}

/// Fits the spectral exponents of a model's encoder and heads.
pub fn audit_model<F: Real>(model: &ModelBase<F>) -> AuditReport<F> {
    let pairs: Vec<(String, TensorBase<F>)> = checkpoint::model_tensors(model)
        .into_iter()
        .map(|p| (p.name, p.value))
        .collect();
    let thresholds = PlThresholds::default();
    let backbone = AuditOutcome::from(audit_part(
        &pairs,
        PartSelector::Backbone,
        DEFAULT_MIN_TAIL,
        &thresholds,
    ));
    let heads: Vec<AuditOutcome<F>> = (0..model.num_tasks())
        .map(|t| {
            AuditOutcome::from(audit_part(
                &pairs,
                PartSelector::Head(t),
                DEFAULT_MIN_TAIL,
                &thresholds,
            ))
        })
        .collect();
    let means: Vec<F> = heads.iter().filter_map(|h| h.mean_alpha()).collect();
    let head_spread = if means.len() == heads.len() && !means.is_empty() {
        alpha_spread(&means).ok()
    } else {
        None
    };
    AuditReport { backbone, heads, head_spread }
}

/// Trains the single-task baselines and the configured method, then
/// scores, compares and audits them. Pure compute: writes nothing.
pub fn run<F: Real>(config: &RunConfig) -> Result<ExperimentReport<F>> {
    config.validate()?;
    let method = config.method()?;
    let data: Dataset<F> = generate(&config.synthetic_spec()?)?;
    let fractions = (
        config.dataset.split[0],
        config.dataset.split[1],
        config.dataset.split[2],
    );
    let (train, _val, test) = split(&data, fractions, config.split_seed())?;
    if train.is_empty() {
        return Err(Error::invalid("run", "train split is empty; adjust dataset.split"));
    }
    if test.is_empty() {
        return Err(Error::invalid("run", "test split is empty; adjust dataset.split"));
    }
    let num_tasks = config.dataset.num_tasks;
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut warnings = BTreeSet::new();

    let mut stl_rows: Vec<TaskMetrics<F>> = Vec::with_capacity(num_tasks);
    for task in 0..num_tasks {
        let slots = [task];
        let spec = config.model_spec(&[data.task_kinds[task]])?;
        let mut model: ModelBase<F> = ModelBase::init(spec, config.seed)?;
        let mut mto: MtoState<F> = MtoState::new(Method::Ew, 1)?;
        let mut settings: TrainSettings<F> = config.train_settings()?;
        settings.regularizer.lambda_tsr = F::zero();
        settings.regularizer.lambda_csa = F::zero();
        train_one(
            &format!("stl-task{task}"),
            &mut model,
            &mut mto,
            settings,
            config,
            &train,
            &slots,
            stream_seed(config.seed, 2 + task as u64),
            &mut rows,
            &mut timings,
            &mut warnings,
        )?;
        let table = evaluate(&model, &test, &slots, config.train.batch_size)?;
        stl_rows.extend(table.tasks);
    }
    let final_stl = MetricTable { tasks: stl_rows };

    let all_slots: Vec<usize> = (0..num_tasks).collect();
    let spec = config.model_spec(&data.task_kinds)?;
    let mut model: ModelBase<F> = ModelBase::init(spec, config.seed)?;
    let initial = evaluate(&model, &test, &all_slots, config.train.batch_size)?;
    let mut mto: MtoState<F> = config.mto_state(num_tasks)?;
    let settings: TrainSettings<F> = config.train_settings()?;
    train_one(
        method.name(),
        &mut model,
        &mut mto,
        settings,
        config,
        &train,
        &all_slots,
        stream_seed(config.seed, 1),
        &mut rows,
        &mut timings,
        &mut warnings,
    )?;
    let final_method = evaluate(&model, &test, &all_slots, config.train.batch_size)?;
    let (delta_p_task, delta_p_metric) = delta_p(&final_method, &final_stl)?;
    let audit = audit_model(&model);

    Ok(ExperimentReport {
        config: config.clone(),
        method_name: method.name().to_string(),
        rows,
        timings,
        initial,
        final_method,
        final_stl,
        delta_p_task,
        delta_p_metric,
        audit,
        warnings: warnings.into_iter().collect(),
        method_model: model,
    })
}

fn csv_cell<F: Real>(x: F) -> String {
    format!("{}", x.to_f64_lossy())
}

/// The per-epoch loss table. One row per (model, epoch): the single-task
/// baselines first, then the method, so the row count is
/// `epochs x (num_tasks + 1)` trained models.
pub fn metrics_csv<F: Real>(report: &ExperimentReport<F>) -> String {
    let t = report.config.dataset.num_tasks;
    let mut out = String::from("model,epoch,learning_rate,total_loss,tsr_loss,csa_loss");
    for i in 0..t {
        out.push_str(&format!(",loss_task{i}"));
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            row.model,
            row.epoch,
            csv_cell(row.learning_rate),
            csv_cell(row.total),
            csv_cell(row.tsr),
            csv_cell(row.csa)
        ));
        for cell in &row.task_losses {
            match cell {
                Some(v) => out.push_str(&format!(",{}", csv_cell(*v))),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Wall-clock per epoch row; the only artifact that is not deterministic.
pub fn diagnostics_csv<F: Real>(report: &ExperimentReport<F>) -> String {
    let mut out = String::from("model,epoch,seconds\n");
    for (row, secs) in report.rows.iter().zip(&report.timings) {
        out.push_str(&format!("{},{},{:.6}\n", row.model, row.epoch, secs));
    }
    out
}

fn json_f<F: Real>(x: F) -> Value {
    serde_json::Number::from_f64(x.to_f64_lossy())
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

fn table_json<F: Real>(table: &MetricTable<F>) -> Value {
    Value::Array(
        table
            .tasks
            .iter()
            .map(|t| {
                json!({
                    "task": t.task,
                    "metrics": t.metrics.iter().map(|m| json!({
                        "name": m.name,
                        "value": json_f(m.value),
                        "higher_is_better": m.higher_is_better,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect(),
    )
}

fn audit_outcome_json<F: Real>(outcome: &AuditOutcome<F>) -> Value {
    match &outcome.audit {
        Some(audit) => json!({
            "mean_alpha": json_f(audit.mean_alpha),
            "layers": audit.layers.iter().map(|l| json!({
                "name": l.name,
                "alpha": json_f(l.fit.alpha),
                "xmin": json_f(l.fit.xmin),
                "ks": json_f(l.fit.ks),
                "n_tail": l.fit.n_tail,
                "label": l.fit.label.as_str(),
            })).collect::<Vec<_>>(),
            "skipped": audit.skipped.iter().map(|(name, why)| json!({
                "name": name, "reason": why,
            })).collect::<Vec<_>>(),
        }),
        None => json!({ "error": outcome.error }),
    }
}

fn audit_json<F: Real>(audit: &AuditReport<F>) -> Value {
    json!({
        "backbone": audit_outcome_json(&audit.backbone),
        "heads": audit.heads.iter().map(audit_outcome_json).collect::<Vec<_>>(),
        "head_alpha_spread": audit.head_spread.map(json_f).unwrap_or(Value::Null),
    })
}

/// The run summary as JSON: config echo, per-epoch rows, initial and final
/// metric tables, the improvement summary, the spectral audit, and
/// warnings. Deterministic for a given (config, seed); timings are
/// deliberately absent.
pub fn report_json<F: Real>(report: &ExperimentReport<F>) -> Result<String> {
    let config = serde_json::to_value(&report.config).map_err(|e| {
        Error::invalid("report_json", format!("config serialization failed: {e}"))
    })?;
    let value = json!({
        "method": report.method_name,
        "config": config,
        "rows": report.rows.iter().map(|r| json!({
            "model": r.model,
            "epoch": r.epoch,
            "learning_rate": json_f(r.learning_rate),
            "total_loss": json_f(r.total),
            "tsr_loss": json_f(r.tsr),
            "csa_loss": json_f(r.csa),
            "task_losses": r.task_losses.iter()
                .map(|c| c.map(json_f).unwrap_or(Value::Null))
                .collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "initial": table_json(&report.initial),
        "final": {
            "method": table_json(&report.final_method),
            "stl": table_json(&report.final_stl),
        },
        "delta_p": {
            "task": json_f(report.delta_p_task),
            "metric": json_f(report.delta_p_metric),
        },
        "audit": audit_json(&report.audit),
        "warnings": report.warnings,
    });
    serde_json::to_string_pretty(&value)
        .map_err(|e| Error::invalid("report_json", e.to_string()))
}

/// Loss curves (one series per trained model) for the run.
pub fn loss_curves_svg<F: Real>(report: &ExperimentReport<F>) -> String {
    let mut order: Vec<&str> = Vec::new();
    for row in &report.rows {
        if !order.contains(&row.model.as_str()) {
            order.push(&row.model);
        }
    }
    let series: Vec<plot::Series> = order
        .iter()
        .map(|name| plot::Series {
            name: name.to_string(),
            points: report
                .rows
                .iter()
                .filter(|r| r.model == *name)
                .map(|r| (r.epoch as f64, r.total.to_f64_lossy()))
                .collect(),
        })
        .collect();
    plot::line_chart("training loss", "epoch", "total loss", &series)
}

/// Paths written by [`write_artifacts`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub diagnostics: PathBuf,
    pub report: PathBuf,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub curves: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `metrics.csv`, `diagnostics.csv`, `report.json`, `config.toml`,
/// the final checkpoint, and (if enabled) `curves.svg` under
/// `root/<output.dir>`.
pub fn write_artifacts<F: Real>(report: &ExperimentReport<F>, root: &Path) -> Result<RunPaths> {
    let dir = root.join(&report.config.output.dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let metrics = dir.join("metrics.csv");
    write_file(&metrics, &metrics_csv(report))?;
    let diagnostics = dir.join("diagnostics.csv");
    write_file(&diagnostics, &diagnostics_csv(report))?;
    let report_path = dir.join("report.json");
    write_file(&report_path, &report_json(report)?)?;
    let config_path = dir.join("config.toml");
    write_file(&config_path, &report.config.to_toml()?)?;
    let checkpoint_path = dir.join("model.mtck");
    checkpoint::save_model(&report.method_model, &checkpoint_path)?;
    let curves = if report.config.output.svg {
        let path = dir.join("curves.svg");
        write_file(&path, &loss_curves_svg(report))?;
        Some(path)
    } else {
        None
    };
    Ok(RunPaths {
        dir,
        metrics,
        diagnostics,
        report: report_path,
        config: config_path,
        checkpoint: checkpoint_path,
        curves,
    })
}

/// Mean and population standard deviation.
pub fn mean_std<F: Real>(values: &[F]) -> Result<(F, F)> {
    if values.is_empty() {
        return Err(Error::invalid("mean_std", "no values"));
    }
    let n = F::from_f64_lit(values.len() as f64);
    let mut mean = F::zero();
    for &v in values {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in values {
        var = var + (v - mean) * (v - mean);
    }
    var = var / n;
    Ok((mean, var.sqrt()))
}

/// One seed's improvement summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome<F> {
    pub seed: u64,
    pub delta_p_task: F,
    pub delta_p_metric: F,
}

/// Aggregation over `seed + 0 .. seed + n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatReport<F> {
    pub outcomes: Vec<SeedOutcome<F>>,
    pub mean_task: F,
    pub std_task: F,
    pub mean_metric: F,
    pub std_metric: F,
}

/// Runs the config under `n` consecutive seeds and aggregates the
/// improvement metrics (mean, population std).
pub fn repeat<F: Real>(config: &RunConfig, n: usize) -> Result<RepeatReport<F>> {
    if n == 0 {
        return Err(Error::invalid("repeat", "at least one seed required"));
    }
    let mut outcomes = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = config.clone();
        c.seed = config.seed.wrapping_add(i as u64);
        c.dataset.seed = Some(c.data_seed());
        let report: ExperimentReport<F> = run(&c)?;
        outcomes.push(SeedOutcome {
            seed: c.seed,
            delta_p_task: report.delta_p_task,
            delta_p_metric: report.delta_p_metric,
        });
    }
    let tasks: Vec<F> = outcomes.iter().map(|o| o.delta_p_task).collect();
    let metrics: Vec<F> = outcomes.iter().map(|o| o.delta_p_metric).collect();
    let (mean_task, std_task) = mean_std(&tasks)?;
    let (mean_metric, std_metric) = mean_std(&metrics)?;
    Ok(RepeatReport { outcomes, mean_task, std_task, mean_metric, std_metric })
}

pub fn repeat_json<F: Real>(report: &RepeatReport<F>) -> String {
    let value = json!({
        "seeds": report.outcomes.iter().map(|o| json!({
            "seed": o.seed,
            "delta_p_task": json_f(o.delta_p_task),
            "delta_p_metric": json_f(o.delta_p_metric),
        })).collect::<Vec<_>>(),
        "delta_p_task": { "mean": json_f(report.mean_task), "std": json_f(report.std_task) },
        "delta_p_metric": { "mean": json_f(report.mean_metric), "std": json_f(report.std_metric) },
    });
    serde_json::to_string_pretty(&value).expect("repeat report serializes")
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridParameter {
    LambdaTsr,
    LambdaCsa,
    LearningRate,
}

impl GridParameter {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lambda_tsr" => Ok(GridParameter::LambdaTsr),
            "lambda_csa" => Ok(GridParameter::LambdaCsa),
            "learning_rate" => Ok(GridParameter::LearningRate),
            other => Err(Error::invalid(
                "grid",
                format!(
                    "unknown parameter '{other}'; expected lambda_tsr, lambda_csa or learning_rate"
                ),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridParameter::LambdaTsr => "lambda_tsr",
            GridParameter::LambdaCsa => "lambda_csa",
            GridParameter::LearningRate => "learning_rate",
        }
    }

    /// The stock grid: `{0.7, 0.9, 1.1, 1.3, 1.5}` for either coefficient
    /// (the other stays at its configured 0.9), `1e-4` to `5e-4` in steps
    /// of `5e-5` (9 points) for the learning rate.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            GridParameter::LambdaTsr | GridParameter::LambdaCsa => {
                vec![0.7, 0.9, 1.1, 1.3, 1.5]
            }
            GridParameter::LearningRate => (0..9).map(|i| 1e-4 + i as f64 * 5e-5).collect(),
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) {
        match self {
            GridParameter::LambdaTsr => config.regularizer.lambda_tsr = value,
            GridParameter::LambdaCsa => config.regularizer.lambda_csa = value,
            GridParameter::LearningRate => config.train.learning_rate = value,
        }
    }
}

/// A sweep description, loadable from TOML:
///
/// ```toml
/// parameter = "lambda_tsr"       # lambda_tsr | lambda_csa | learning_rate
/// values = [0.7, 0.9, 1.1]       # optional; omitted -> the stock grid
/// seeds = 1                      # optional; runs per grid point
/// ```
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub parameter: String,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub seeds: usize,
}

fn one() -> usize {
    1
}

impl GridSpec {
    pub fn parse_toml(text: &str) -> Result<GridSpec> {
        let spec: GridSpec = toml::from_str(text).map_err(|e| Error::Config {
            path: "<grid>".to_string(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<GridSpec> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let spec: GridSpec = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<GridParameter> {
        let parameter = GridParameter::parse(&self.parameter)?;
        if let Some(values) = &self.values {
            if values.is_empty() {
                return Err(Error::invalid("grid", "values must be non-empty"));
            }
        }
        if self.seeds == 0 {
            return Err(Error::invalid("grid", "seeds must be at least 1"));
        }
        Ok(parameter)
    }

    pub fn resolved_values(&self) -> Result<Vec<f64>> {
        let parameter = self.validate()?;
        Ok(self
            .values
            .clone()
            .unwrap_or_else(|| parameter.default_values()))
    }
}

/// One grid point's aggregated outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint<F> {
    pub value: f64,
    pub outcomes: Vec<SeedOutcome<F>>,
    pub mean_task: F,
    pub std_task: F,
    pub mean_metric: F,
    pub std_metric: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport<F> {
    pub parameter: String,
    pub points: Vec<SweepPoint<F>>,
}

/// One run per grid value per seed; a single-point single-seed grid is
/// exactly [`run`] on the modified config.
pub fn sweep<F: Real>(config: &RunConfig, grid: &GridSpec) -> Result<SweepReport<F>> {
    let parameter = grid.validate()?;
    let values = grid.resolved_values()?;
    let mut points = Vec::with_capacity(values.len());
    for &value in &values {
        let mut point_config = config.clone();
        parameter.apply(&mut point_config, value);
        point_config.validate()?;
        let agg: RepeatReport<F> = repeat(&point_config, grid.seeds)?;
        points.push(SweepPoint {
            value,
            outcomes: agg.outcomes,
            mean_task: agg.mean_task,
            std_task: agg.std_task,
            mean_metric: agg.mean_metric,
            std_metric: agg.std_metric,
        });
    }
    Ok(SweepReport { parameter: parameter.name().to_string(), points })
}

pub fn sweep_csv<F: Real>(report: &SweepReport<F>) -> String {
    let mut out = String::from("parameter,value,seed,delta_p_task,delta_p_metric\n");
    for point in &report.points {
        for o in &point.outcomes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                report.parameter,
                point.value,
                o.seed,
                csv_cell(o.delta_p_task),
                csv_cell(o.delta_p_metric)
            ));
        }
    }
    out
}

pub fn sweep_json<F: Real>(report: &SweepReport<F>) -> String {
    let value = json!({
        "parameter": report.parameter,
        "points": report.points.iter().map(|p| json!({
            "value": p.value,
            "delta_p_task": { "mean": json_f(p.mean_task), "std": json_f(p.std_task) },
            "delta_p_metric": { "mean": json_f(p.mean_metric), "std": json_f(p.std_metric) },
            "seeds": p.outcomes.iter().map(|o| json!({
                "seed": o.seed,
                "delta_p_task": json_f(o.delta_p_task),
                "delta_p_metric": json_f(o.delta_p_metric),
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    serde_json::to_string_pretty(&value).expect("sweep report serializes")
}

/// Improvement versus the swept value, one point per grid entry.
pub fn sweep_svg<F: Real>(report: &SweepReport<F>) -> String {
    let series = vec![plot::Series {
        name: "delta_p_task".to_string(),
        points: report
            .points
            .iter()
            .map(|p| (p.value, p.mean_task.to_f64_lossy()))
            .collect(),
    }];
    plot::line_chart("improvement vs setting", &report.parameter, "delta_p_task", &series)
}

/// Spectral audit of a checkpoint file, without its originating config:
/// part membership comes from tensor names (`shared.*`, `task{t}.*`).
#[derive(Debug, Clone)]
pub struct AnalyzeReport<F> {
    pub backbone: Option<AuditOutcome<F>>,
    pub heads: Vec<(usize, AuditOutcome<F>)>,
    pub head_spread: Option<F>,
}

pub fn analyze_checkpoint<F: Real>(path: &Path) -> Result<AnalyzeReport<F>> {
    let tensors = checkpoint::load_tensors::<F>(path)?;
    let pairs: Vec<(String, TensorBase<F>)> =
        tensors.into_iter().map(|p| (p.name, p.value)).collect();
    let thresholds = PlThresholds::default();
    let has_backbone = pairs.iter().any(|(n, _)| n.starts_with("shared."));
    let backbone = has_backbone.then(|| {
        AuditOutcome::from(audit_part(
            &pairs,
            PartSelector::Backbone,
            DEFAULT_MIN_TAIL,
            &thresholds,
        ))
    });
    let mut head_ids = BTreeSet::new();
    for (name, _) in &pairs {
        if let Some(rest) = name.strip_prefix("task") {
            if let Some(dot) = rest.find('.') {
                if let Ok(t) = rest[..dot].parse::<usize>() {
                    head_ids.insert(t);
                }
            }
        }
    }
    let heads: Vec<(usize, AuditOutcome<F>)> = head_ids
        .into_iter()
        .map(|t| {
            (
                t,
                AuditOutcome::from(audit_part(
                    &pairs,
                    PartSelector::Head(t),
                    DEFAULT_MIN_TAIL,
                    &thresholds,
                )),
            )
        })
        .collect();
    if backbone.is_none() && heads.is_empty() {
        return Err(Error::invalid(
            "analyze",
            "checkpoint has no shared.* or task{t}.* tensors to audit",
        ));
    }
    let means: Vec<F> = heads.iter().filter_map(|(_, h)| h.mean_alpha()).collect();
    let head_spread = if !heads.is_empty() && means.len() == heads.len() {
        alpha_spread(&means).ok()
    } else {
        None
    };
    Ok(AnalyzeReport { backbone, heads, head_spread })
}

pub fn analyze_json<F: Real>(report: &AnalyzeReport<F>) -> String {
    let value = json!({
        "backbone": report.backbone.as_ref().map(audit_outcome_json::<F>).unwrap_or(Value::Null),
        "heads": report.heads.iter().map(|(t, h)| json!({
            "task": t,
            "audit": audit_outcome_json(h),
        })).collect::<Vec<_>>(),
        "head_alpha_spread": report.head_spread.map(json_f).unwrap_or(Value::Null),
    });
    serde_json::to_string_pretty(&value).expect("analyze report serializes")
}
