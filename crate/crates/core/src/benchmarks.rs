//! Synthetic multi-task benchmarks with a controllable degree of
//! inter-task relatedness.
//!
//! Two scenarios. *Task shift* draws shared input fields and gives each
//! task a linear scoring functional: task 0 regresses the shared
//! functional directly, and every later task uses a mixture
//! `rho * shared + sqrt(1 - rho^2) * independent`, alternating between
//! regression and sign classification. At `rho = 1` every functional
//! coincides; at `rho = 0` they are orthogonal. *Domain shift* treats each
//! task as a domain: samples are assigned round-robin to domains, inputs
//! receive a per-domain affine shift, and every domain labels a sample by
//! the shared functional read in its own coordinates, so labels agree
//! exactly when the shift vanishes and decorrelate gradually as it grows
//! (the relatedness knob is reused: shift magnitude scales with
//! `1 - rho`).
//!
//! Generation is a pure function of the spec, so a seed pins the dataset
//! bit-for-bit.

use crate::error::{Error, Result};
use crate::model::{BatchBase, LossKind, TaskDescriptor};
use crate::scalar::Real;
use crate::tensor::TensorBase;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which synthetic scenario to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    TaskShift,
    DomainShift,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::TaskShift => "task-shift",
            Scenario::DomainShift => "domain-shift",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "task-shift" => Ok(Scenario::TaskShift),
            "domain-shift" => Ok(Scenario::DomainShift),
            other => Err(Error::invalid(
                "scenario",
                format!("unknown scenario '{other}'; expected task-shift or domain-shift"),
            )),
        }
    }
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub num_tasks: usize,
    pub num_samples: usize,
    /// Input shape per sample: channels, height, width.
    pub input: (usize, usize, usize),
    /// Inter-task relatedness in `[0, 1]`: 1 aligns every task's target
    /// structure, 0 decouples it.
    pub correlation: f64,
    /// Noise scale applied to target scores before use.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            scenario: Scenario::TaskShift,
            num_tasks: 3,
            num_samples: 512,
            input: (1, 8, 8),
            correlation: 0.8,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::invalid("synthetic", "at least two tasks required"));
        }
        if self.num_samples == 0 {
            return Err(Error::invalid("synthetic", "at least one sample required"));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("synthetic", "input dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::invalid(
                "synthetic",
                format!("correlation {} outside [0, 1]", self.correlation),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::invalid("synthetic", "noise must be non-negative"));
        }
        Ok(())
    }
}

/// What one task predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression { dim: usize },
    Classification { classes: usize },
}

impl TaskKind {
    /// Output units the task's head needs.
    pub fn head_out(&self) -> usize {
        match *self {
            TaskKind::Regression { dim } => dim,
            TaskKind::Classification { classes } => classes,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self {
            TaskKind::Regression { .. } => LossKind::SquaredError,
            TaskKind::Classification { .. } => LossKind::CrossEntropy,
        }
    }

    pub fn descriptor(&self) -> TaskDescriptor {
        TaskDescriptor {
            loss: self.loss(),
            log_transform: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Regression { .. } => "regression",
            TaskKind::Classification { .. } => "classification",
        }
    }
}

/// A generated dataset: inputs `N x C x H x W`, one target tensor per task
/// (`N x dim` for regression, `N` class ids for classification), and
/// stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub spec: SyntheticSpec,
    pub task_kinds: Vec<TaskKind>,
    pub inputs: TensorBase<F>,
    pub targets: Vec<TensorBase<F>>,
    pub sample_ids: Vec<usize>,
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn descriptors(&self) -> Vec<TaskDescriptor> {
        self.task_kinds.iter().map(|k| k.descriptor()).collect()
    }

    /// Extracts the samples at `positions` (indices into this dataset) as
    /// a batch, keeping their original sample ids.
    pub fn batch(&self, positions: &[usize]) -> Result<BatchBase<F>> {
        if positions.is_empty() {
            return Err(Error::invalid("dataset::batch", "empty batch requested"));
        }
        let n = self.len();
        let (c, h, w) = self.spec.input;
        let row = c * h * w;
        let mut input_data = Vec::with_capacity(positions.len() * row);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= n {
                return Err(Error::invalid(
                    "dataset::batch",
                    format!("position {} out of range ({} samples)", p, n),
                ));
            }
            input_data.extend_from_slice(&self.inputs.data()[p * row..(p + 1) * row]);
            ids.push(self.sample_ids[p]);
        }
        let inputs = TensorBase::new(vec![positions.len(), c, h, w], input_data)?;
        let mut targets = Vec::with_capacity(self.targets.len());
        for (kind, full) in self.task_kinds.iter().zip(&self.targets) {
            match *kind {
                TaskKind::Regression { dim } => {
                    let mut data = Vec::with_capacity(positions.len() * dim);
                    for &p in positions {
                        data.extend_from_slice(&full.data()[p * dim..(p + 1) * dim]);
                    }
                    targets.push(TensorBase::new(vec![positions.len(), dim], data)?);
                }
                TaskKind::Classification { .. } => {
                    let data: Vec<F> = positions.iter().map(|&p| full.data()[p]).collect();
                    targets.push(TensorBase::new(vec![positions.len()], data)?);
                }
            }
        }
        BatchBase::new(inputs, targets, ids)
    }

    /// The subset at `positions`, keeping original sample ids.
    pub fn subset(&self, positions: &[usize]) -> Result<Dataset<F>> {
        let n = self.len();
        let (c, h, w) = self.spec.input;
        let row = c * h * w;
        let mut input_data = Vec::with_capacity(positions.len() * row);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= n {
                return Err(Error::invalid(
                    "dataset::subset",
                    format!("position {} out of range ({} samples)", p, n),
                ));
            }
            input_data.extend_from_slice(&self.inputs.data()[p * row..(p + 1) * row]);
            ids.push(self.sample_ids[p]);
        }
        let inputs = TensorBase::new(vec![positions.len(), c, h, w], input_data)?;
        let mut targets = Vec::with_capacity(self.targets.len());
        for (kind, full) in self.task_kinds.iter().zip(&self.targets) {
            match *kind {
                TaskKind::Regression { dim } => {
                    let mut data = Vec::with_capacity(positions.len() * dim);
                    for &p in positions {
                        data.extend_from_slice(&full.data()[p * dim..(p + 1) * dim]);
                    }
                    targets.push(TensorBase::new(vec![positions.len(), dim], data)?);
                }
                TaskKind::Classification { .. } => {
                    let data: Vec<F> = positions.iter().map(|&p| full.data()[p]).collect();
                    targets.push(TensorBase::new(vec![positions.len()], data)?);
                }
            }
        }
        Ok(Dataset {
            spec: SyntheticSpec {
                num_samples: positions.len(),
                ..self.spec.clone()
            },
            task_kinds: self.task_kinds.clone(),
            inputs,
            targets,
            sample_ids: ids,
        })
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn orthogonal_unit(rng: &mut ChaCha8Rng, to: &[f64]) -> Vec<f64> {
    loop {
        let mut v = unit_vector(rng, to.len());
        let d: f64 = v.iter().zip(to).map(|(a, b)| a * b).sum();
        for (x, &u) in v.iter_mut().zip(to) {
            *x -= d * u;
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates the task-shift dataset: shared random input fields with the
/// shared functional's pattern planted into each sample, regression and
/// sign-classification targets alternating across tasks.
pub fn gen_task_shift<F: Real>(spec: &SyntheticSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    if spec.scenario != Scenario::TaskShift {
        return Err(Error::invalid("gen_task_shift", "spec is not task-shift"));
    }
    let (c, h, w) = spec.input;
    let d = c * h * w;
    let t = spec.num_tasks;
    let n = spec.num_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared = unit_vector(&mut rng, d);
    let mut functionals = Vec::with_capacity(t);
    functionals.push(shared.clone());
    for _ in 1..t {
        let ortho = orthogonal_unit(&mut rng, &shared);
        let rho = spec.correlation;
        let mix: Vec<f64> = shared
            .iter()
            .zip(&ortho)
            .map(|(&u, &o)| rho * u + (1.0 - rho * rho).sqrt() * o)
            .collect();
        functionals.push(mix);
    }
    let task_kinds: Vec<TaskKind> = (0..t)
        .map(|i| {
            if i % 2 == 0 {
                TaskKind::Regression { dim: 1 }
            } else {
                TaskKind::Classification { classes: 2 }
            }
        })
        .collect();
    let mut input_data = Vec::with_capacity(n * d);
    let mut scores = vec![Vec::with_capacity(n); t];
    for _ in 0..n {
        let planted = rng.random::<f64>() * 2.0 - 1.0;
        let pixels: Vec<f64> = (0..d)
            .map(|j| rng.random::<f64>() * 2.0 - 1.0 + planted * shared[j])
            .collect();
        for (ti, f) in functionals.iter().enumerate() {
            let noise = if spec.noise > 0.0 {
                (rng.random::<f64>() * 2.0 - 1.0) * spec.noise
            } else {
                0.0
            };
            scores[ti].push(dot_f64(&pixels, f) + noise);
        }
        input_data.extend(pixels.into_iter().map(F::from_f64_lit));
    }
    let inputs = TensorBase::new(vec![n, c, h, w], input_data)?;
    let mut targets = Vec::with_capacity(t);
    for (kind, score) in task_kinds.iter().zip(&scores) {
        match kind {
            TaskKind::Regression { .. } => {
                targets.push(TensorBase::new(
                    vec![n, 1],
                    score.iter().map(|&s| F::from_f64_lit(s)).collect(),
                )?);
            }
            TaskKind::Classification { .. } => {
                targets.push(TensorBase::new(
                    vec![n],
                    score
                        .iter()
                        .map(|&s| if s > 0.0 { F::one() } else { F::zero() })
                        .collect(),
                )?);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        task_kinds,
        inputs,
        targets,
        sample_ids: (0..n).collect(),
    })
}

/// Generates the domain-shift dataset: every task is a domain holding a
/// sign-classification problem over the shared functional; samples cycle
/// through domains, inputs get the owning domain's affine shift, and each
/// domain labels samples in its own (inverse-shifted) coordinates. Shift
/// magnitude scales with `1 - correlation`.
pub fn gen_domain_shift<F: Real>(spec: &SyntheticSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    if spec.scenario != Scenario::DomainShift {
        return Err(Error::invalid("gen_domain_shift", "spec is not domain-shift"));
    }
    let (c, h, w) = spec.input;
    let d = c * h * w;
    let t = spec.num_tasks;
    let n = spec.num_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared = unit_vector(&mut rng, d);
    let offset_pattern = unit_vector(&mut rng, d);
    let strength = 1.0 - spec.correlation;
    let scales: Vec<f64> = (0..t)
        .map(|_| (1.0 + strength * 0.25 * (rng.random::<f64>() * 2.0 - 1.0)).max(0.5))
        .collect();
    let offsets: Vec<f64> = (0..t)
        .map(|_| strength * 0.5 * (rng.random::<f64>() * 2.0 - 1.0))
        .collect();
    let pattern_score = dot_f64(&shared, &offset_pattern);
    let mut input_data = Vec::with_capacity(n * d);
    let mut labels = vec![Vec::with_capacity(n); t];
    for i in 0..n {
        let domain = i % t;
        let base: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let base_score = dot_f64(&base, &shared);
        for (ti, label_row) in labels.iter_mut().enumerate() {
            let noise = if spec.noise > 0.0 {
                (rng.random::<f64>() * 2.0 - 1.0) * spec.noise
            } else {
                0.0
            };
            // The domain-ti reading of this domain-`domain` input:
            // (scale_d * s + (offset_d - offset_ti) * <u, m>) / scale_ti.
            let score = (scales[domain] * base_score
                + (offsets[domain] - offsets[ti]) * pattern_score)
                / scales[ti]
                + noise;
            label_row.push(if score > 0.0 { F::one() } else { F::zero() });
        }
        for (j, &b) in base.iter().enumerate() {
            input_data.push(F::from_f64_lit(
                scales[domain] * b + offsets[domain] * offset_pattern[j],
            ));
        }
    }
    let inputs = TensorBase::new(vec![n, c, h, w], input_data)?;
    let task_kinds: Vec<TaskKind> = (0..t).map(|_| TaskKind::Classification { classes: 2 }).collect();
    let targets: Result<Vec<TensorBase<F>>> = labels
        .into_iter()
        .map(|l| TensorBase::new(vec![n], l))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        task_kinds,
        inputs,
        targets: targets?,
        sample_ids: (0..n).collect(),
    })
}

/// Generates whichever scenario the spec names.
pub fn generate<F: Real>(spec: &SyntheticSpec) -> Result<Dataset<F>> {
    match spec.scenario {
        Scenario::TaskShift => gen_task_shift(spec),
        Scenario::DomainShift => gen_domain_shift(spec),
    }
}

/// Splits a dataset into train/validation/test by a seeded shuffle
/// followed by contiguous cuts at the rounded cumulative boundaries.
/// Fractions must be non-negative and sum to 1 (within 1e-9).
pub fn split<F: Real>(
    dataset: &Dataset<F>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>, Dataset<F>)> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::invalid("split", "fractions must be non-negative"));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "split",
            format!("fractions sum to {}, expected 1", a + b + c),
        ));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let cut1 = (a * n as f64 + 0.5).floor() as usize;
    let cut2 = ((a + b) * n as f64 + 0.5).floor() as usize;
    let cut1 = cut1.min(n);
    let cut2 = cut2.clamp(cut1, n);
    let train = dataset.subset(&order[..cut1])?;
    let val = dataset.subset(&order[cut1..cut2])?;
    let test = dataset.subset(&order[cut2..])?;
    Ok((train, val, test))
}

/// Serializes a dataset in the columnar text format: a header naming
/// scenario, generation parameters, task layout and sample count, then one
/// `id | input values | task-0 values | ...` record per sample. Floats are
/// printed in shortest round-trip form, so loading reproduces the dataset
/// bit-for-bit.
pub fn dump<F: Real>(dataset: &Dataset<F>) -> String {
    let mut out = String::new();
    let spec = &dataset.spec;
    out.push_str("mtlab-dataset v1\n");
    out.push_str(&format!("scenario {}\n", spec.scenario.name()));
    out.push_str(&format!("correlation {}\n", spec.correlation));
    out.push_str(&format!("noise {}\n", spec.noise));
    out.push_str(&format!("seed {}\n", spec.seed));
    out.push_str(&format!(
        "input {} {} {}\n",
        spec.input.0, spec.input.1, spec.input.2
    ));
    out.push_str(&format!("tasks {}\n", dataset.task_kinds.len()));
    for (i, kind) in dataset.task_kinds.iter().enumerate() {
        match kind {
            TaskKind::Regression { dim } => {
                out.push_str(&format!("task {} regression {}\n", i, dim));
            }
            TaskKind::Classification { classes } => {
                out.push_str(&format!("task {} classification {}\n", i, classes));
            }
        }
    }
    out.push_str(&format!("samples {}\n", dataset.len()));
    let (c, h, w) = spec.input;
    let row = c * h * w;
    for (p, &id) in dataset.sample_ids.iter().enumerate() {
        out.push_str(&format!("{}", id));
        out.push_str(" |");
        for &x in &dataset.inputs.data()[p * row..(p + 1) * row] {
            out.push_str(&format!(" {}", x.to_f64_lossy()));
        }
        for (kind, target) in dataset.task_kinds.iter().zip(&dataset.targets) {
            out.push_str(" |");
            match *kind {
                TaskKind::Regression { dim } => {
                    for &y in &target.data()[p * dim..(p + 1) * dim] {
                        out.push_str(&format!(" {}", y.to_f64_lossy()));
                    }
                }
                TaskKind::Classification { .. } => {
                    out.push_str(&format!(" {}", target.data()[p].to_f64_lossy()));
                }
            }
        }
        out.push('\n');
    }
    out
}

fn parse_kv<'a>(line: &'a str, key: &str, context: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| {
            Error::invalid(
                "dataset::load",
                format!("{context}: expected '{key} ...', got '{line}'"),
            )
        })
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid("dataset::load", format!("unreadable {what}: '{s}'")))
}

/// Parses the [`dump`] format back into a dataset.
pub fn load<F: Real>(text: &str) -> Result<Dataset<F>> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or("");
    if magic != "mtlab-dataset v1" {
        return Err(Error::invalid(
            "dataset::load",
            format!("unrecognized header '{magic}'"),
        ));
    }
    let mut next = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::invalid("dataset::load", format!("missing '{key}' line")))?;
        Ok(parse_kv(line, key, "header")?.to_string())
    };
    let scenario = Scenario::parse(&next("scenario")?)?;
    let correlation: f64 = parse_num(&next("correlation")?, "correlation")?;
    let noise: f64 = parse_num(&next("noise")?, "noise")?;
    let seed: u64 = parse_num(&next("seed")?, "seed")?;
    let input_line = next("input")?;
    let dims: Vec<&str> = input_line.split_whitespace().collect();
    if dims.len() != 3 {
        return Err(Error::invalid("dataset::load", "input line needs three dimensions"));
    }
    let input = (
        parse_num(dims[0], "input channels")?,
        parse_num(dims[1], "input height")?,
        parse_num(dims[2], "input width")?,
    );
    let num_tasks: usize = parse_num(&next("tasks")?, "task count")?;
    let mut task_kinds = Vec::with_capacity(num_tasks);
    for i in 0..num_tasks {
        let line = next("task")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != i.to_string() {
            return Err(Error::invalid(
                "dataset::load",
                format!("malformed task line 'task {line}'"),
            ));
        }
        let size: usize = parse_num(parts[2], "task size")?;
        match parts[1] {
            "regression" => task_kinds.push(TaskKind::Regression { dim: size }),
            "classification" => task_kinds.push(TaskKind::Classification { classes: size }),
            other => {
                return Err(Error::invalid(
                    "dataset::load",
                    format!("unknown task kind '{other}'"),
                ))
            }
        }
    }
    let num_samples: usize = parse_num(&next("samples")?, "sample count")?;
    let (c, h, w) = input;
    let row = c * h * w;
    let mut input_data = Vec::with_capacity(num_samples * row);
    let mut target_data: Vec<Vec<F>> = task_kinds.iter().map(|_| Vec::new()).collect();
    let mut sample_ids = Vec::with_capacity(num_samples);
    for record in 0..num_samples {
        let line = lines.next().ok_or_else(|| {
            Error::invalid(
                "dataset::load",
                format!("missing record {record} of {num_samples}"),
            )
        })?;
        let mut fields = line.split('|');
        let id: usize = parse_num(fields.next().unwrap_or(""), "sample id")?;
        sample_ids.push(id);
        let xs = fields
            .next()
            .ok_or_else(|| Error::invalid("dataset::load", "record missing input block"))?;
        let before = input_data.len();
        for tok in xs.split_whitespace() {
            input_data.push(F::from_f64_lit(parse_num::<f64>(tok, "input value")?));
        }
        if input_data.len() - before != row {
            return Err(Error::invalid(
                "dataset::load",
                format!(
                    "record {record} has {} input values, expected {row}",
                    input_data.len() - before
                ),
            ));
        }
        for (t, kind) in task_kinds.iter().enumerate() {
            let block = fields.next().ok_or_else(|| {
                Error::invalid(
                    "dataset::load",
                    format!("record {record} missing task {t} block"),
                )
            })?;
            let values: Vec<F> = block
                .split_whitespace()
                .map(|tok| parse_num::<f64>(tok, "target value").map(F::from_f64_lit))
                .collect::<Result<_>>()?;
            let expect = match *kind {
                TaskKind::Regression { dim } => dim,
                TaskKind::Classification { .. } => 1,
            };
            if values.len() != expect {
                return Err(Error::invalid(
                    "dataset::load",
                    format!(
                        "record {record} task {t} has {} values, expected {expect}",
                        values.len()
                    ),
                ));
            }
            target_data[t].extend(values);
        }
    }
    let inputs = TensorBase::new(vec![num_samples, c, h, w], input_data)?;
    let mut targets = Vec::with_capacity(num_tasks);
    for (kind, data) in task_kinds.iter().zip(target_data) {
        match *kind {
            TaskKind::Regression { dim } => {
                targets.push(TensorBase::new(vec![num_samples, dim], data)?)
            }
            TaskKind::Classification { .. } => {
                targets.push(TensorBase::new(vec![num_samples], data)?)
            }
        }
    }
    Ok(Dataset {
        spec: SyntheticSpec {
            scenario,
            num_tasks,
            num_samples,
            input,
            correlation,
            noise,
            seed,
        },
        task_kinds,
        inputs,
        targets,
        sample_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    fn task_shift_spec(rho: f64, noise: f64, tasks: usize, samples: usize) -> SyntheticSpec {
        SyntheticSpec {
            scenario: Scenario::TaskShift,
            num_tasks: tasks,
            num_samples: samples,
            correlation: rho,
            noise,
            seed: 1234,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = task_shift_spec(0.5, 0.1, 3, 64);
        let a: Dataset<f64> = gen_task_shift(&spec).unwrap();
        let b: Dataset<f64> = gen_task_shift(&spec).unwrap();
        assert_eq!(a, b);
        let spec = SyntheticSpec {
            scenario: Scenario::DomainShift,
            ..task_shift_spec(0.5, 0.1, 3, 64)
        };
        let a: Dataset<f64> = gen_domain_shift(&spec).unwrap();
        let b: Dataset<f64> = gen_domain_shift(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_relatedness_without_noise_duplicates_regression_targets() {
        // Tasks 0 and 2 are both regression; at rho = 1 their functionals
        // coincide, so noise-free targets agree bit-for-bit.
        let spec = task_shift_spec(1.0, 0.0, 3, 128);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        assert_eq!(data.task_kinds[0], TaskKind::Regression { dim: 1 });
        assert_eq!(data.task_kinds[2], TaskKind::Regression { dim: 1 });
        assert_eq!(data.targets[0], data.targets[2]);
    }

    #[test]
    fn unrelated_tasks_have_vanishing_score_correlation() {
        let spec = task_shift_spec(0.0, 0.0, 3, 10_000);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        let r = pearson(data.targets[0].data(), data.targets[2].data());
        assert!(r.abs() <= 0.05, "correlation {r}");
    }

    #[test]
    fn score_correlation_is_nondecreasing_in_the_relatedness_knob() {
        let mut last = -1.0;
        for rho in [0.0, 0.5, 1.0] {
            let spec = task_shift_spec(rho, 0.0, 3, 10_000);
            let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
            let r = pearson(data.targets[0].data(), data.targets[2].data());
            assert!(
                r >= last - 0.05,
                "correlation fell from {last} to {r} at rho {rho}"
            );
            last = r;
        }
        assert!(last > 0.999, "rho=1 correlation {last}");
    }

    #[test]
    fn classification_tasks_alternate_and_use_sign_labels() {
        let spec = task_shift_spec(0.8, 0.0, 4, 256);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        assert_eq!(data.task_kinds[1], TaskKind::Classification { classes: 2 });
        assert_eq!(data.task_kinds[3], TaskKind::Classification { classes: 2 });
        for &l in data.targets[1].data() {
            assert!(l == 0.0 || l == 1.0);
        }
    }

    #[test]
    fn zero_domain_shift_makes_domains_identical() {
        let spec = SyntheticSpec {
            scenario: Scenario::DomainShift,
            correlation: 1.0,
            noise: 0.0,
            ..task_shift_spec(1.0, 0.0, 3, 300)
        };
        let data: Dataset<f64> = gen_domain_shift(&spec).unwrap();
        assert_eq!(data.targets[0], data.targets[1]);
        assert_eq!(data.targets[0], data.targets[2]);
    }

    #[test]
    fn domain_labels_stay_balanced() {
        let spec = SyntheticSpec {
            scenario: Scenario::DomainShift,
            correlation: 0.6,
            noise: 0.0,
            num_samples: 10_000,
            num_tasks: 3,
            ..SyntheticSpec::default()
        };
        let data: Dataset<f64> = gen_domain_shift(&spec).unwrap();
        for (t, target) in data.targets.iter().enumerate() {
            let ones: f64 = target.data().iter().sum();
            let frac = ones / data.len() as f64;
            assert!(
                (frac - 0.5).abs() <= 0.02,
                "task {t} class balance {frac}"
            );
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = task_shift_spec(0.5, 0.1, 3, 16);
        assert!(gen_task_shift::<f64>(&SyntheticSpec { num_tasks: 1, ..base.clone() }).is_err());
        assert!(
            gen_task_shift::<f64>(&SyntheticSpec { correlation: 1.5, ..base.clone() }).is_err()
        );
        assert!(gen_task_shift::<f64>(&SyntheticSpec { noise: -0.1, ..base.clone() }).is_err());
        assert!(gen_task_shift::<f64>(&SyntheticSpec { num_samples: 0, ..base.clone() }).is_err());
        assert!(gen_domain_shift::<f64>(&base).is_err());
    }

    #[test]
    fn split_sizes_follow_rounded_boundaries() {
        let spec = task_shift_spec(0.5, 0.1, 2, 10);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        let (train, val, test) = split(&data, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (6, 2, 2));
        let (all, none1, none2) = split(&data, (1.0, 0.0, 0.0), 7).unwrap();
        assert_eq!((all.len(), none1.len(), none2.len()), (10, 0, 0));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        use std::collections::BTreeSet;
        let spec = task_shift_spec(0.3, 0.1, 2, 103);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        let (train, val, test) = split(&data, (0.6, 0.2, 0.2), 99).unwrap();
        let mut union = BTreeSet::new();
        let mut total = 0;
        for part in [&train, &val, &test] {
            for &id in &part.sample_ids {
                union.insert(id);
                total += 1;
            }
        }
        assert_eq!(total, data.len());
        assert_eq!(union.len(), data.len());
        assert_eq!(union, data.sample_ids.iter().copied().collect());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let spec = task_shift_spec(0.5, 0.1, 2, 10);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        assert!(split(&data, (0.5, 0.2, 0.2), 7).is_err());
        assert!(split(&data, (-0.2, 0.6, 0.6), 7).is_err());
    }

    #[test]
    fn dump_load_round_trips_bit_for_bit() {
        for scenario in [Scenario::TaskShift, Scenario::DomainShift] {
            let spec = SyntheticSpec {
                scenario,
                ..task_shift_spec(0.37, 0.05, 3, 24)
            };
            let data: Dataset<f64> = generate(&spec).unwrap();
            let text = dump(&data);
            let back: Dataset<f64> = load(&text).unwrap();
            assert_eq!(data, back);
        }
    }

    #[test]
    fn load_rejects_malformed_text() {
        assert!(load::<f64>("not a dataset").is_err());
        let spec = task_shift_spec(0.5, 0.0, 2, 4);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        let text = dump(&data);
        let truncated: String = text.lines().take(9).collect::<Vec<_>>().join("\n");
        assert!(load::<f64>(&truncated).is_err());
        let corrupted = text.replace("regression", "prophecy");
        assert!(load::<f64>(&corrupted).is_err());
    }

    #[test]
    fn batches_take_requested_rows_with_original_ids() {
        let spec = task_shift_spec(0.5, 0.1, 3, 12);
        let data: Dataset<f64> = gen_task_shift(&spec).unwrap();
        let batch = data.batch(&[3, 7, 1]).unwrap();
        assert_eq!(batch.batch_size(), 3);
        assert_eq!(batch.sample_ids, vec![3, 7, 1]);
        assert_eq!(batch.inputs.shape(), &[3, 1, 8, 8]);
        assert_eq!(batch.targets[0].shape(), &[3, 1]);
        assert_eq!(batch.targets[1].shape(), &[3]);
        let row = 64;
        assert_eq!(
            &batch.inputs.data()[..row],
            &data.inputs.data()[3 * row..4 * row]
        );
        assert!(data.batch(&[99]).is_err());
        assert!(data.batch(&[]).is_err());
    }
}
