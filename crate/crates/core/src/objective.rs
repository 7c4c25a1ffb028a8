//! The joint training objective and the step that optimizes it.
//!
//! The full objective is the sum of (optionally weighted) task losses plus
//! two representation-level regularizers scaled by their coefficients: the
//! saliency-entropy term and the cross-task alignment term. Both act on
//! the per-task saliencies of the shared representation, so when they are
//! active the backward pass differentiates *through* a gradient —
//! a second-order path the tape supports natively. A coefficient of zero
//! skips that regularizer's graph entirely, which keeps the degenerate
//! configuration bit-identical to plain equal weighting.
//!
//! [`train_step`] dispatches on the optimization method: loss-scaling
//! methods take one backward pass over a weighted total; gradient
//! manipulation methods take one backward pass per task over the shared
//! parameters, merge the flattened gradients, and update heads with their
//! own task's gradient.

use crate::alignment::{csa_from_saliencies, csa_loss_node, CsaSettings};
use crate::baselines::{
    cagrad, dwa_weights, gradnorm_step, mgda_minnorm, pcgrad, uw_weights, Method, MtoState,
};
use crate::error::{Error, Result};
use crate::model::{task_losses, BatchBase, ForwardPass, ModelBase};
use crate::saliency::{
    saliency_nodes, saliency_values, tsr_loss, tsr_loss_node, SaliencyBundle, DEFAULT_EPSILON,
};
use crate::scalar::Real;
use crate::tape::{NodeId, TapeBase};
use crate::tensor::TensorBase;
use rand::Rng;

/// Regularizer configuration: coefficients, the entropy smoothing epsilon,
/// the alignment settings, and whether saliencies are treated as constants
/// (cutting the second-order path; meant for ablation).
#[derive(Debug, Clone)]
pub struct RegularizerSettings<F> {
    pub lambda_tsr: F,
    pub lambda_csa: F,
    pub epsilon: F,
    pub csa: CsaSettings<F>,
    pub detach_saliency: bool,
}

impl<F: Real> Default for RegularizerSettings<F> {
    fn default() -> Self {
        RegularizerSettings {
            lambda_tsr: F::from_f64_lit(0.9),
            lambda_csa: F::from_f64_lit(0.9),
            epsilon: F::from_f64_lit(DEFAULT_EPSILON),
            csa: CsaSettings::default(),
            detach_saliency: false,
        }
    }
}

/// The components of one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct LossBreakdown<F> {
    pub task_losses: Vec<F>,
    /// Active loss-scaling weights (all one under equal weighting).
    pub weights: Vec<F>,
    pub tsr: F,
    pub csa: F,
    pub lambda_tsr: F,
    pub lambda_csa: F,
    /// `sum_t w_t L_t + lambda_tsr * tsr + lambda_csa * csa`.
    pub total: F,
}

/// The objective left on a tape: loss nodes, the differentiable total, and
/// the evaluated breakdown.
#[derive(Debug)]
pub struct ObjectiveGraph<F> {
    pub forward: ForwardPass,
    pub task_loss_nodes: Vec<NodeId>,
    pub total_node: NodeId,
    pub breakdown: LossBreakdown<F>,
    pub warnings: Vec<String>,
}

fn weighted_total<F: Real>(
    tape: &mut TapeBase<F>,
    losses: &[NodeId],
    weights: &[F],
) -> Result<NodeId> {
    let mut total = None;
    for (&l, &w) in losses.iter().zip(weights) {
        let term = if w == F::one() { l } else { tape.mul_scalar(l, w)? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("objective", "at least one task required"))
}

fn check_breakdown<F: Real>(b: &LossBreakdown<F>) -> Result<()> {
    let mut expect = F::zero();
    for (&l, &w) in b.task_losses.iter().zip(&b.weights) {
        expect += w * l;
    }
    expect += b.lambda_tsr * b.tsr + b.lambda_csa * b.csa;
    let tol = F::from_f64_lit(1e-9) * F::one().max(b.total.abs());
    if (expect - b.total).abs() > tol {
        return Err(Error::numeric(
            "objective",
            format!(
                "loss breakdown inconsistent: components sum to {expect}, total is {}",
                b.total
            ),
        ));
    }
    Ok(())
}

/// Builds the full objective on `tape`: forward pass, per-task losses, and
/// — for nonzero coefficients — the two saliency regularizers, with the
/// saliencies kept differentiable unless `detach_saliency` is set (in
/// which case the regularizer values are recorded and added as constants,
/// contributing nothing to the gradient).
pub fn rep_mtl_loss<F: Real>(
    tape: &mut TapeBase<F>,
    model: &ModelBase<F>,
    batch: &BatchBase<F>,
    settings: &RegularizerSettings<F>,
) -> Result<ObjectiveGraph<F>> {
    if settings.lambda_tsr < F::zero() || settings.lambda_csa < F::zero() {
        return Err(Error::invalid(
            "objective",
            "regularizer coefficients must be non-negative",
        ));
    }
    let forward = model.forward(batch, tape)?;
    let loss_nodes = task_losses(tape, &forward.predictions, batch, &model.spec.tasks)?;
    let t = loss_nodes.len();
    let weights = vec![F::one(); t];
    let mut total = weighted_total(tape, &loss_nodes, &weights)?;

    let want_tsr = settings.lambda_tsr > F::zero();
    let want_csa = settings.lambda_csa > F::zero();
    let mut tsr_value = F::zero();
    let mut csa_value = F::zero();
    let mut warnings = Vec::new();
    if want_csa && batch.batch_size() < 2 {
        return Err(Error::invalid(
            "objective",
            "the alignment regularizer needs a batch of at least two samples",
        ));
    }
    if want_tsr || want_csa {
        if settings.detach_saliency {
            let sal = saliency_values(tape, forward.representation, &loss_nodes)?;
            if want_tsr {
                let bundle = SaliencyBundle::build(sal.clone(), settings.epsilon)?;
                tsr_value = tsr_loss(&bundle.distribution)?;
                let node = tape.leaf(TensorBase::scalar_value(tsr_value))?;
                let scaled = tape.mul_scalar(node, settings.lambda_tsr)?;
                total = tape.add(total, scaled)?;
            }
            if want_csa {
                let (value, detail) = csa_from_saliencies(&sal, &settings.csa)?;
                csa_value = value;
                warnings.extend(detail.warnings);
                let node = tape.leaf(TensorBase::scalar_value(csa_value))?;
                let scaled = tape.mul_scalar(node, settings.lambda_csa)?;
                total = tape.add(total, scaled)?;
            }
        } else {
            let sal = saliency_nodes(tape, forward.representation, &loss_nodes)?;
            if want_tsr {
                let node = tsr_loss_node(tape, &sal, settings.epsilon)?;
                tsr_value = tape.value(node).item()?;
                let scaled = tape.mul_scalar(node, settings.lambda_tsr)?;
                total = tape.add(total, scaled)?;
            }
            if want_csa {
                let graph = csa_loss_node(tape, &sal, &settings.csa)?;
                csa_value = tape.value(graph.loss).item()?;
                warnings.extend(graph.detail.warnings);
                let scaled = tape.mul_scalar(graph.loss, settings.lambda_csa)?;
                total = tape.add(total, scaled)?;
            }
        }
    }
    let task_values: Result<Vec<F>> = loss_nodes.iter().map(|&l| tape.value(l).item()).collect();
    let breakdown = LossBreakdown {
        task_losses: task_values?,
        weights,
        tsr: tsr_value,
        csa: csa_value,
        lambda_tsr: settings.lambda_tsr,
        lambda_csa: settings.lambda_csa,
        total: tape.value(total).item()?,
    };
    check_breakdown(&breakdown)?;
    Ok(ObjectiveGraph {
        forward,
        task_loss_nodes: loss_nodes,
        total_node: total,
        breakdown,
        warnings,
    })
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moment estimation with decoupled weight decay.
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerSettings<F> {
    pub kind: OptimizerKind,
    pub learning_rate: F,
    pub weight_decay: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Real> Default for OptimizerSettings<F> {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            learning_rate: F::from_f64_lit(1e-4),
            weight_decay: F::from_f64_lit(1e-5),
            beta1: F::from_f64_lit(0.9),
            beta2: F::from_f64_lit(0.999),
            epsilon: F::from_f64_lit(1e-8),
        }
    }
}

/// Per-parameter moment buffers, allocated on the first step.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<F> {
    step: usize,
    m: Vec<TensorBase<F>>,
    v: Vec<TensorBase<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

/// Applies one optimizer step, returning the updated parameter values.
/// `names` label error messages; every gradient must be finite and shaped
/// like its parameter.
pub fn optimizer_step<F: Real>(
    settings: &OptimizerSettings<F>,
    state: &mut OptimizerState<F>,
    names: &[&str],
    params: &[TensorBase<F>],
    grads: &[TensorBase<F>],
) -> Result<Vec<TensorBase<F>>> {
    if params.len() != grads.len() || params.len() != names.len() {
        return Err(Error::invalid(
            "optimizer",
            format!(
                "{} parameters, {} gradients, {} names",
                params.len(),
                grads.len(),
                names.len()
            ),
        ));
    }
    if settings.learning_rate < F::zero() {
        return Err(Error::invalid("optimizer", "learning rate must be non-negative"));
    }
    for ((name, p), g) in names.iter().zip(params).zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("gradient of {} has mismatched shape", name),
            ));
        }
        g.assert_finite(&format!("gradient of {}", name))?;
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params
            .iter()
            .map(|p| TensorBase::zeros(p.shape().to_vec()))
            .collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::invalid(
            "optimizer",
            format!(
                "state tracks {} parameters but {} were given",
                state.m.len(),
                params.len()
            ),
        ));
    }
    state.step += 1;
    let lr = settings.learning_rate;
    let wd = settings.weight_decay;
    let mut out = Vec::with_capacity(params.len());
    match settings.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter().zip(grads) {
                let data: Vec<F> = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &dx)| x - lr * dx - lr * wd * x)
                    .collect();
                out.push(TensorBase::new(p.shape().to_vec(), data)?);
            }
        }
        OptimizerKind::Adam => {
            let b1 = settings.beta1;
            let b2 = settings.beta2;
            let eps = settings.epsilon;
            let t = F::from_count(state.step);
            let bias1 = F::one() - b1.powf(t);
            let bias2 = F::one() - b2.powf(t);
            for (i, (p, g)) in params.iter().zip(grads).enumerate() {
                let mut m_data = state.m[i].data().to_vec();
                let mut v_data = state.v[i].data().to_vec();
                let mut new = Vec::with_capacity(m_data.len());
                for (j, (&x, &dx)) in p.data().iter().zip(g.data()).enumerate() {
                    m_data[j] = b1 * m_data[j] + (F::one() - b1) * dx;
                    v_data[j] = b2 * v_data[j] + (F::one() - b2) * dx * dx;
                    let m_hat = m_data[j] / bias1;
                    let v_hat = v_data[j] / bias2;
                    new.push(x - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * x);
                }
                state.m[i] = TensorBase::new(p.shape().to_vec(), m_data)?;
                state.v[i] = TensorBase::new(p.shape().to_vec(), v_data)?;
                out.push(TensorBase::new(p.shape().to_vec(), new)?);
            }
        }
    }
    Ok(out)
}

/// Everything configuring one training step.
#[derive(Debug, Clone)]
pub struct TrainSettings<F> {
    pub optimizer: OptimizerSettings<F>,
    pub regularizer: RegularizerSettings<F>,
}

impl<F: Real> Default for TrainSettings<F> {
    fn default() -> Self {
        TrainSettings {
            optimizer: OptimizerSettings::default(),
            regularizer: RegularizerSettings::default(),
        }
    }
}

/// What a step reports back for logging.
#[derive(Debug, Clone)]
pub struct StepReport<F> {
    pub breakdown: LossBreakdown<F>,
    /// Per-task gradient norms over the shared parameters; empty for
    /// single-backward methods.
    pub task_grad_norms: Vec<F>,
    /// Norm of the applied update direction over all parameters.
    pub update_norm: F,
    /// Simplex weights chosen by MGDA or CAGrad.
    pub simplex_weights: Option<Vec<F>>,
    pub warnings: Vec<String>,
}

fn flatten<F: Real>(tensors: &[TensorBase<F>]) -> Vec<F> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

fn unflatten<F: Real>(flat: &[F], like: &[TensorBase<F>]) -> Result<Vec<TensorBase<F>>> {
    let mut out = Vec::with_capacity(like.len());
    let mut offset = 0;
    for t in like {
        let n = t.data().len();
        out.push(TensorBase::new(
            t.shape().to_vec(),
            flat[offset..offset + n].to_vec(),
        )?);
        offset += n;
    }
    if offset != flat.len() {
        return Err(Error::shape(
            "train_step",
            "flattened gradient does not match the parameter layout",
        ));
    }
    Ok(out)
}

fn l2<F: Real>(values: &[F]) -> F {
    let mut acc = F::zero();
    for &x in values {
        acc += x * x;
    }
    acc.sqrt()
}

fn grads_norm<F: Real>(tensors: &[TensorBase<F>]) -> F {
    let mut acc = F::zero();
    for t in tensors {
        for &x in t.data() {
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// One optimization step of the selected method on one batch. Updates the
/// model parameters, the method state (loss-scaling weights, learned
/// log-variances, reference losses), and the optimizer moments.
pub fn train_step<F: Real, R: Rng + ?Sized>(
    model: &mut ModelBase<F>,
    batch: &BatchBase<F>,
    mto: &mut MtoState<F>,
    opt: &mut OptimizerState<F>,
    settings: &TrainSettings<F>,
    rng: &mut R,
) -> Result<StepReport<F>> {
    let t = model.num_tasks();
    if mto.num_tasks != t {
        return Err(Error::invalid(
            "train_step",
            format!("method state covers {} tasks, model has {}", mto.num_tasks, t),
        ));
    }
    let mut tape = TapeBase::new();
    match mto.method {
        Method::Ew | Method::Uw | Method::Dwa | Method::RepMtl => {
            scaled_loss_step(model, batch, mto, opt, settings, &mut tape)
        }
        Method::GradNorm => gradnorm_train_step(model, batch, mto, opt, settings, &mut tape),
        Method::PcGrad | Method::Mgda | Method::CaGrad => {
            manipulation_step(model, batch, mto, opt, settings, &mut tape, rng)
        }
    }
}

/// Canonical parameter order: encoder, then each head. Returns borrowed
/// names alongside cloned values.
fn collect_params<F: Real>(model: &ModelBase<F>) -> (Vec<String>, Vec<TensorBase<F>>) {
    let mut names = Vec::new();
    let mut values = Vec::new();
    for p in &model.shared {
        names.push(p.name.clone());
        values.push(p.value.clone());
    }
    for task in &model.per_task {
        for p in task {
            names.push(p.name.clone());
            values.push(p.value.clone());
        }
    }
    (names, values)
}

fn write_back<F: Real>(model: &mut ModelBase<F>, mut updated: Vec<TensorBase<F>>) {
    let mut iter = updated.drain(..);
    for p in &mut model.shared {
        p.value = iter.next().expect("updated value for every shared parameter");
    }
    for task in &mut model.per_task {
        for p in task {
            p.value = iter.next().expect("updated value for every head parameter");
        }
    }
}

fn all_param_nodes(forward: &ForwardPass) -> Vec<NodeId> {
    let mut nodes = forward.shared_nodes.clone();
    for task in &forward.task_nodes {
        nodes.extend(task.iter().copied());
    }
    nodes
}

fn scaled_loss_step<F: Real>(
    model: &mut ModelBase<F>,
    batch: &BatchBase<F>,
    mto: &mut MtoState<F>,
    opt: &mut OptimizerState<F>,
    settings: &TrainSettings<F>,
    tape: &mut TapeBase<F>,
) -> Result<StepReport<F>> {
    let t = model.num_tasks();
    let (graph, uw_grads) = match mto.method {
        Method::RepMtl => (rep_mtl_loss(tape, model, batch, &settings.regularizer)?, None),
        Method::Ew => {
            let zeroed = RegularizerSettings {
                lambda_tsr: F::zero(),
                lambda_csa: F::zero(),
                ..settings.regularizer.clone()
            };
            (rep_mtl_loss(tape, model, batch, &zeroed)?, None)
        }
        Method::Uw | Method::Dwa => {
            let forward = model.forward(batch, tape)?;
            let loss_nodes = task_losses(tape, &forward.predictions, batch, &model.spec.tasks)?;
            let weights = match mto.method {
                Method::Uw => uw_weights(&mto.log_variances),
                _ => dwa_weights(&mto.loss_history, t, mto.dwa_temp)?,
            };
            let total = weighted_total(tape, &loss_nodes, &weights)?;
            let task_values: Result<Vec<F>> =
                loss_nodes.iter().map(|&l| tape.value(l).item()).collect();
            let task_values = task_values?;
            let uw_grads = if mto.method == Method::Uw {
                // d/ds_t of sum [L_t exp(-s_t)/2 + s_t/2], closed form.
                let half = F::from_f64_lit(0.5);
                Some(
                    task_values
                        .iter()
                        .zip(&mto.log_variances)
                        .map(|(&l, &s)| half - l * (-s).exp() * half)
                        .collect::<Vec<F>>(),
                )
            } else {
                None
            };
            let breakdown = LossBreakdown {
                task_losses: task_values,
                weights,
                tsr: F::zero(),
                csa: F::zero(),
                lambda_tsr: F::zero(),
                lambda_csa: F::zero(),
                total: tape.value(total).item()?,
            };
            check_breakdown(&breakdown)?;
            (
                ObjectiveGraph {
                    forward,
                    task_loss_nodes: loss_nodes,
                    total_node: total,
                    breakdown,
                    warnings: Vec::new(),
                },
                uw_grads,
            )
        }
        _ => unreachable!("scaled_loss_step only handles loss-scaling methods"),
    };
    let leaf_nodes = all_param_nodes(&graph.forward);
    let grads = tape.gradient_values(graph.total_node, &leaf_nodes)?;
    let (mut names, mut params) = collect_params(model);
    let mut grad_list = grads;
    if let Some(sg) = &uw_grads {
        names.push("uw.s".to_string());
        params.push(TensorBase::new(vec![t], mto.log_variances.clone())?);
        grad_list.push(TensorBase::new(vec![t], sg.clone())?);
    }
    let name_refs: Vec<&str> = names.iter().map(|n| n.as_str()).collect();
    let update_norm = grads_norm(&grad_list);
    let mut updated = optimizer_step(&settings.optimizer, opt, &name_refs, &params, &grad_list)?;
    if uw_grads.is_some() {
        let s = updated.pop().expect("uw log-variance slot");
        mto.log_variances = s.data().to_vec();
    }
    write_back(model, updated);
    Ok(StepReport {
        breakdown: graph.breakdown,
        task_grad_norms: Vec::new(),
        update_norm,
        simplex_weights: None,
        warnings: graph.warnings,
    })
}

/// Per-task gradients over the shared parameters and the task's own head.
fn per_task_grads<F: Real>(
    tape: &mut TapeBase<F>,
    forward: &ForwardPass,
    loss_nodes: &[NodeId],
) -> Result<Vec<(Vec<TensorBase<F>>, Vec<TensorBase<F>>)>> {
    let mut out = Vec::with_capacity(loss_nodes.len());
    for (t, &loss) in loss_nodes.iter().enumerate() {
        let mut wrt = forward.shared_nodes.clone();
        wrt.extend(forward.task_nodes[t].iter().copied());
        let mut grads = tape.gradient_values(loss, &wrt)?;
        let head = grads.split_off(forward.shared_nodes.len());
        out.push((grads, head));
    }
    Ok(out)
}

fn gradnorm_train_step<F: Real>(
    model: &mut ModelBase<F>,
    batch: &BatchBase<F>,
    mto: &mut MtoState<F>,
    opt: &mut OptimizerState<F>,
    settings: &TrainSettings<F>,
    tape: &mut TapeBase<F>,
) -> Result<StepReport<F>> {
    let forward = model.forward(batch, tape)?;
    let loss_nodes = task_losses(tape, &forward.predictions, batch, &model.spec.tasks)?;
    let task_values: Result<Vec<F>> = loss_nodes.iter().map(|&l| tape.value(l).item()).collect();
    let task_values = task_values?;
    if mto.initial_losses.is_none() {
        mto.initial_losses = Some(task_values.clone());
    }
    let split = per_task_grads(tape, &forward, &loss_nodes)?;
    let weights = mto.gradnorm_weights.clone();
    let norms: Vec<F> = split.iter().map(|(shared, _)| grads_norm(shared)).collect();

    let shared_shaped: Vec<TensorBase<F>> = {
        let mut acc: Option<Vec<TensorBase<F>>> = None;
        for (w, (shared, _)) in weights.iter().zip(&split) {
            let scaled: Vec<TensorBase<F>> = shared
                .iter()
                .map(|g| g.mul_scalar(*w))
                .collect::<Result<_>>()?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => prev
                    .iter()
                    .zip(&scaled)
                    .map(|(a, b)| a.add(b))
                    .collect::<Result<_>>()?,
            });
        }
        acc.expect("at least one task")
    };
    let mut grad_list = shared_shaped;
    for (w, (_, head)) in weights.iter().zip(&split) {
        for g in head {
            grad_list.push(g.mul_scalar(*w)?);
        }
    }
    let initial = mto.initial_losses.clone().expect("recorded above");
    mto.gradnorm_weights = gradnorm_step(
        &weights,
        &norms,
        &task_values,
        &initial,
        mto.gradnorm_alpha,
        mto.gradnorm_lr,
    )?;

    let mut total = F::zero();
    for (&w, &l) in weights.iter().zip(&task_values) {
        total += w * l;
    }
    let breakdown = LossBreakdown {
        task_losses: task_values,
        weights,
        tsr: F::zero(),
        csa: F::zero(),
        lambda_tsr: F::zero(),
        lambda_csa: F::zero(),
        total,
    };
    check_breakdown(&breakdown)?;
    let (names, params) = collect_params(model);
    let name_refs: Vec<&str> = names.iter().map(|n| n.as_str()).collect();
    let update_norm = grads_norm(&grad_list);
    let updated = optimizer_step(&settings.optimizer, opt, &name_refs, &params, &grad_list)?;
    write_back(model, updated);
    Ok(StepReport {
        breakdown,
        task_grad_norms: norms,
        update_norm,
        simplex_weights: None,
        warnings: Vec::new(),
    })
}

fn manipulation_step<F: Real, R: Rng + ?Sized>(
    model: &mut ModelBase<F>,
    batch: &BatchBase<F>,
    mto: &mut MtoState<F>,
    opt: &mut OptimizerState<F>,
    settings: &TrainSettings<F>,
    tape: &mut TapeBase<F>,
    rng: &mut R,
) -> Result<StepReport<F>> {
    let forward = model.forward(batch, tape)?;
    let loss_nodes = task_losses(tape, &forward.predictions, batch, &model.spec.tasks)?;
    let task_values: Result<Vec<F>> = loss_nodes.iter().map(|&l| tape.value(l).item()).collect();
    let task_values = task_values?;
    let split = per_task_grads(tape, &forward, &loss_nodes)?;
    let flats: Vec<Vec<F>> = split.iter().map(|(shared, _)| flatten(shared)).collect();
    let norms: Vec<F> = flats.iter().map(|f| l2(f)).collect();
    let (merged, simplex) = match mto.method {
        Method::PcGrad => (pcgrad(&flats, rng)?, None),
        Method::Mgda => {
            let (gamma, combo) = mgda_minnorm(&flats)?;
            (combo, Some(gamma))
        }
        Method::CaGrad => {
            let (w, combo) = cagrad(&flats, mto.cagrad_c)?;
            (combo, Some(w))
        }
        _ => unreachable!("manipulation_step only handles gradient manipulation"),
    };
    let shared_like: Vec<TensorBase<F>> = split[0].0.clone();
    let mut grad_list = unflatten(&merged, &shared_like)?;
    for (_, head) in &split {
        grad_list.extend(head.iter().cloned());
    }
    let t = task_values.len();
    let breakdown = LossBreakdown {
        task_losses: task_values.clone(),
        weights: vec![F::one(); t],
        tsr: F::zero(),
        csa: F::zero(),
        lambda_tsr: F::zero(),
        lambda_csa: F::zero(),
        total: {
            let mut acc = F::zero();
            for &l in &task_values {
                acc += l;
            }
            acc
        },
    };
    check_breakdown(&breakdown)?;
    let (names, params) = collect_params(model);
    let name_refs: Vec<&str> = names.iter().map(|n| n.as_str()).collect();
    let update_norm = grads_norm(&grad_list);
    let updated = optimizer_step(&settings.optimizer, opt, &name_refs, &params, &grad_list)?;
    write_back(model, updated);
    Ok(StepReport {
        breakdown,
        task_grad_norms: norms,
        update_norm,
        simplex_weights: simplex,
        warnings: Vec::new(),
    })
}
