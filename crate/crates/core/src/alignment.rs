//! Cross-task saliency alignment.
//!
//! For every sample, each task's saliency is summarized as a channel-affinity
//! Gram matrix, and the sample also gets an *anchor*: the outer product of
//! its task- and spatial-averaged saliency. Flattened and L2-normalized,
//! anchors and task affinities become unit vectors, and a contrastive loss
//! pulls each sample's task vectors toward its own anchor while using the
//! other samples' anchors as negatives.
//!
//! The default loss keeps the denominator exactly as the source formulation
//! writes it — negatives only, so the loss can go negative; an
//! `include_positive_in_denominator` flag switches to the standard
//! normalized-temperature form, which is non-negative.
//!
//! As in [`crate::saliency`], every step exists both as a tensor function
//! and as a tape graph builder; the graph builders keep the loss
//! differentiable through the saliencies (second order in the model
//! parameters).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layout::IndexMap;
use crate::scalar::Real;
use crate::tape::{NodeId, TapeBase};
use crate::tensor::{fmt_shape, TensorBase};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.5;

/// How the per-sample anchor reduces over tasks. Both compute the same mean
/// `(1/(T*H*W)) * sum over tasks and positions`; they differ only in
/// floating-point accumulation order (per-task spatial means averaged, vs a
/// single grand sum divided once).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorTaskReduction {
    Mean,
    ConcatThenMean,
}

/// How per-task alignment terms combine into the final loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskReduction {
    Mean,
    Sum,
}

/// Alignment loss configuration.
#[derive(Debug, Clone, Copy)]
pub struct CsaSettings<F> {
    pub tau: F,
    pub include_positive_in_denominator: bool,
    pub task_reduction: TaskReduction,
    pub anchor_reduction: AnchorTaskReduction,
}

impl<F: Real> Default for CsaSettings<F> {
    fn default() -> Self {
        CsaSettings {
            tau: F::from_f64_lit(DEFAULT_TAU),
            include_positive_in_denominator: false,
            task_reduction: TaskReduction::Mean,
            anchor_reduction: AnchorTaskReduction::Mean,
        }
    }
}

/// Samples dropped from the contrastive batch, with human-readable reasons.
#[derive(Debug, Clone, Default)]
pub struct CsaDetail {
    pub excluded: Vec<usize>,
    pub warnings: Vec<String>,
}

fn check_4d(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(
            op,
            format!("expected B x C x H x W, got {}", fmt_shape(shape)),
        ));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Per-sample channel affinity: reshape `S[b]` to `C x (H*W)` rows `R` and
/// form the Gram matrix `R * R^T`, giving `B x C x C`.
pub fn affinity_maps<F: Real>(s: &TensorBase<F>) -> Result<TensorBase<F>> {
    let (b, c, h, w) = check_4d(s.shape(), "affinity_maps")?;
    let hw = h * w;
    let mut data = vec![F::zero(); b * c * c];
    for bi in 0..b {
        let base = bi * c * hw;
        for i in 0..c {
            for j in 0..c {
                let mut acc = F::zero();
                for p in 0..hw {
                    acc += s.data()[base + i * hw + p] * s.data()[base + j * hw + p];
                }
                data[(bi * c + i) * c + j] = acc;
            }
        }
    }
    TensorBase::new(vec![b, c, c], data)
}

/// Per-sample anchors: the saliency field averaged over tasks and spatial
/// positions (`B x C`), plus its outer product (`B x C x C`).
pub fn anchors<F: Real>(
    saliencies: &[TensorBase<F>],
    reduction: AnchorTaskReduction,
) -> Result<(TensorBase<F>, TensorBase<F>)> {
    let Some(first) = saliencies.first() else {
        return Err(Error::invalid("anchors", "at least one task required"));
    };
    let (b, c, h, w) = check_4d(first.shape(), "anchors")?;
    for s in saliencies {
        if s.shape() != first.shape() {
            return Err(Error::shape(
                "anchors",
                format!(
                    "task saliencies differ: {} vs {}",
                    fmt_shape(first.shape()),
                    fmt_shape(s.shape())
                ),
            ));
        }
    }
    let t = saliencies.len();
    let hw = h * w;
    let mut a = vec![F::zero(); b * c];
    for bi in 0..b {
        for ci in 0..c {
            let value = match reduction {
                AnchorTaskReduction::Mean => {
                    let mut task_acc = F::zero();
                    for s in saliencies {
                        let mut spatial = F::zero();
                        for p in 0..hw {
                            spatial += s.data()[(bi * c + ci) * hw + p];
                        }
                        task_acc += spatial / F::from_count(hw);
                    }
                    task_acc / F::from_count(t)
                }
                AnchorTaskReduction::ConcatThenMean => {
                    let mut grand = F::zero();
                    for s in saliencies {
                        for p in 0..hw {
                            grand += s.data()[(bi * c + ci) * hw + p];
                        }
                    }
                    grand / F::from_count(t * hw)
                }
            };
            a[bi * c + ci] = value;
        }
    }
    let mut outer = vec![F::zero(); b * c * c];
    for bi in 0..b {
        for i in 0..c {
            for j in 0..c {
                outer[(bi * c + i) * c + j] = a[bi * c + i] * a[bi * c + j];
            }
        }
    }
    Ok((
        TensorBase::new(vec![b, c], a)?,
        TensorBase::new(vec![b, c, c], outer)?,
    ))
}

/// Flattens each sample's `C x C` matrix row-major and divides by its L2
/// norm. Zero matrices map to zero vectors, flagged in the returned mask.
pub fn normalize_flatten<F: Real>(m: &TensorBase<F>) -> Result<(TensorBase<F>, Vec<bool>)> {
    if m.rank() != 3 {
        return Err(Error::shape(
            "normalize_flatten",
            format!("expected B x C x C, got {}", fmt_shape(m.shape())),
        ));
    }
    let (b, c, c2) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    if c != c2 {
        return Err(Error::shape(
            "normalize_flatten",
            format!("matrices must be square, got {}", fmt_shape(m.shape())),
        ));
    }
    let d = c * c;
    let mut data = vec![F::zero(); b * d];
    let mut zero_flags = vec![false; b];
    for bi in 0..b {
        let row = &m.data()[bi * d..(bi + 1) * d];
        let mut sq = F::zero();
        for &v in row {
            sq += v * v;
        }
        if sq == F::zero() {
            zero_flags[bi] = true;
            continue;
        }
        let norm = sq.sqrt();
        for (j, &v) in row.iter().enumerate() {
            data[bi * d + j] = v / norm;
        }
    }
    Ok((TensorBase::new(vec![b, d], data)?, zero_flags))
}

fn row<'a, F: Real>(m: &'a TensorBase<F>, r: usize, d: usize) -> &'a [F] {
    &m.data()[r * d..(r + 1) * d]
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn is_zero_row<F: Real>(r: &[F]) -> bool {
    r.iter().all(|&x| x == F::zero())
}

/// Contrastive alignment loss over unit vectors: anchors `z_a` (`B x D`)
/// and per-task vectors `z_t` (`T x B x D`). Samples carrying any zero-norm
/// vector are excluded entirely (positives and negatives); fewer than two
/// surviving samples is an error because the denominator needs at least one
/// negative pair.
pub fn csa_loss<F: Real>(
    z_a: &TensorBase<F>,
    z_t: &TensorBase<F>,
    tau: F,
    include_positive_in_denominator: bool,
    task_reduction: TaskReduction,
) -> Result<(F, CsaDetail)> {
    if tau <= F::zero() {
        return Err(Error::invalid("csa_loss", "temperature must be positive"));
    }
    if z_a.rank() != 2 || z_t.rank() != 3 {
        return Err(Error::shape(
            "csa_loss",
            format!(
                "expected B x D anchors and T x B x D task vectors, got {} and {}",
                fmt_shape(z_a.shape()),
                fmt_shape(z_t.shape())
            ),
        ));
    }
    let (b, d) = (z_a.shape()[0], z_a.shape()[1]);
    let (t, b2, d2) = (z_t.shape()[0], z_t.shape()[1], z_t.shape()[2]);
    if b != b2 || d != d2 || t == 0 {
        return Err(Error::shape(
            "csa_loss",
            format!(
                "anchors {} inconsistent with task vectors {}",
                fmt_shape(z_a.shape()),
                fmt_shape(z_t.shape())
            ),
        ));
    }
    if b < 2 {
        return Err(Error::invalid("csa_loss", "no negative pairs: batch must have B >= 2"));
    }
    let mut detail = CsaDetail::default();
    let mut kept = Vec::with_capacity(b);
    for bi in 0..b {
        let mut zero = is_zero_row(row(z_a, bi, d));
        for ti in 0..t {
            zero = zero || is_zero_row(&z_t.data()[(ti * b + bi) * d..(ti * b + bi + 1) * d]);
        }
        if zero {
            detail.excluded.push(bi);
            detail.warnings.push(format!(
                "sample {} excluded from alignment: zero-norm saliency vector",
                bi
            ));
        } else {
            kept.push(bi);
        }
    }
    if kept.is_empty() {
        return Err(Error::numeric("csa_loss", "all samples excluded (zero-norm saliencies)"));
    }
    if kept.len() < 2 {
        return Err(Error::numeric(
            "csa_loss",
            "no negative pairs: fewer than two samples survived zero-norm exclusion",
        ));
    }
    let mut per_task = Vec::with_capacity(t);
    for ti in 0..t {
        let mut acc = F::zero();
        for &bi in &kept {
            let za_b = row(z_a, bi, d);
            let zt_tb = &z_t.data()[(ti * b + bi) * d..(ti * b + bi + 1) * d];
            let pos = dot(za_b, zt_tb) / tau;
            let mut denom = F::zero();
            for &k in &kept {
                if k != bi {
                    denom += (dot(za_b, row(z_a, k, d)) / tau).exp();
                }
            }
            if include_positive_in_denominator {
                denom += pos.exp();
            }
            acc += denom.ln() - pos;
        }
        per_task.push(acc / F::from_count(kept.len()));
    }
    let mut total = F::zero();
    for &v in &per_task {
        total += v;
    }
    if matches!(task_reduction, TaskReduction::Mean) {
        total = total / F::from_count(t);
    }
    if !total.is_finite() {
        return Err(Error::non_finite("csa_loss"));
    }
    Ok((total, detail))
}

/// Full value-level pipeline from per-task saliencies to the alignment
/// loss: affinities, anchors, normalization, exclusion, contrastive loss.
pub fn csa_from_saliencies<F: Real>(
    saliencies: &[TensorBase<F>],
    settings: &CsaSettings<F>,
) -> Result<(F, CsaDetail)> {
    let Some(first) = saliencies.first() else {
        return Err(Error::invalid("csa_loss", "at least one task required"));
    };
    let (b, c, _, _) = check_4d(first.shape(), "csa_loss")?;
    let (_, anchor_outer) = anchors(saliencies, settings.anchor_reduction)?;
    let (z_a, _) = normalize_flatten(&anchor_outer)?;
    let t = saliencies.len();
    let d = c * c;
    let mut z_t_data = vec![F::zero(); t * b * d];
    for (ti, s) in saliencies.iter().enumerate() {
        let m = affinity_maps(s)?;
        let (z, _) = normalize_flatten(&m)?;
        z_t_data[ti * b * d..(ti + 1) * b * d].copy_from_slice(z.data());
    }
    let z_t = TensorBase::new(vec![t, b, d], z_t_data)?;
    csa_loss(
        &z_a,
        &z_t,
        settings.tau,
        settings.include_positive_in_denominator,
        settings.task_reduction,
    )
}

/// CSV dump of the pairwise anchor similarity matrix, for debugging.
pub fn similarity_csv<F: Real>(z_a: &TensorBase<F>) -> Result<String> {
    if z_a.rank() != 2 {
        return Err(Error::shape(
            "similarity_csv",
            format!("expected B x D, got {}", fmt_shape(z_a.shape())),
        ));
    }
    let (b, d) = (z_a.shape()[0], z_a.shape()[1]);
    let mut out = String::from("sample");
    for k in 0..b {
        out.push_str(&format!(",s{}", k));
    }
    out.push('\n');
    for i in 0..b {
        out.push_str(&i.to_string());
        for k in 0..b {
            let sim = dot(row(z_a, i, d), row(z_a, k, d));
            out.push_str(&format!(",{}", sim.to_f64_lossy()));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Graph-level outcome: the loss node plus exclusion bookkeeping.
pub struct CsaGraph {
    pub loss: NodeId,
    pub detail: CsaDetail,
}

/// Slice sample `b` of a `B x C x H x W` node as a `C x (H*W)` matrix node.
fn sample_rows<F: Real>(
    tape: &mut TapeBase<F>,
    s: NodeId,
    b_total: usize,
    c: usize,
    hw: usize,
    b: usize,
) -> Result<NodeId> {
    let map = Arc::new(IndexMap::subrange(
        tape.shape(s).to_vec(),
        b * c * hw,
        vec![c, hw],
    )?);
    let _ = b_total;
    tape.gather(s, map)
}

/// Normalizes a `1 x D` node to unit L2 norm. Caller guarantees a nonzero
/// value (excluded samples never reach here).
fn normalize_node<F: Real>(tape: &mut TapeBase<F>, flat: NodeId) -> Result<NodeId> {
    let sq = tape.mul(flat, flat)?;
    let sum = tape.sum(sq)?;
    let norm = tape.sqrt(sum)?;
    let d = tape.shape(flat).to_vec();
    let map = Arc::new(IndexMap::broadcast_scalar(vec![], d)?);
    let wide = tape.gather(norm, map)?;
    tape.div(flat, wide)
}

/// Builds the alignment loss over per-task saliency *nodes*, keeping the
/// whole construction differentiable. Exclusion decisions are made from the
/// eagerly available node values, mirroring [`csa_from_saliencies`].
pub fn csa_loss_node<F: Real>(
    tape: &mut TapeBase<F>,
    saliencies: &[NodeId],
    settings: &CsaSettings<F>,
) -> Result<CsaGraph> {
    if settings.tau <= F::zero() {
        return Err(Error::invalid("csa_loss", "temperature must be positive"));
    }
    let Some(&first) = saliencies.first() else {
        return Err(Error::invalid("csa_loss", "at least one task required"));
    };
    let shape = tape.shape(first).to_vec();
    let (b, c, h, w) = check_4d(&shape, "csa_loss")?;
    for &s in saliencies {
        if tape.shape(s) != shape.as_slice() {
            return Err(Error::shape(
                "csa_loss",
                format!(
                    "task saliencies differ: {} vs {}",
                    fmt_shape(&shape),
                    fmt_shape(tape.shape(s))
                ),
            ));
        }
    }
    if b < 2 {
        return Err(Error::invalid("csa_loss", "no negative pairs: batch must have B >= 2"));
    }
    let t = saliencies.len();
    let hw = h * w;
    let inv_tau = F::one() / settings.tau;

    // Per-sample anchor vectors (C x 1 nodes).
    let mut anchor_cols = Vec::with_capacity(b);
    for bi in 0..b {
        let mut acc: Option<NodeId> = None;
        for &s in saliencies {
            let rows = sample_rows(tape, s, b, c, hw, bi)?;
            let ones = tape.leaf(TensorBase::ones(vec![hw, 1]))?;
            let sums = tape.matmul(rows, ones)?;
            let summand = match settings.anchor_reduction {
                AnchorTaskReduction::Mean => {
                    tape.mul_scalar(sums, F::one() / F::from_count(hw))?
                }
                AnchorTaskReduction::ConcatThenMean => sums,
            };
            acc = Some(match acc {
                Some(prev) => tape.add(prev, summand)?,
                None => summand,
            });
        }
        let total = acc.expect("at least one task");
        let scaled = match settings.anchor_reduction {
            AnchorTaskReduction::Mean => tape.mul_scalar(total, F::one() / F::from_count(t))?,
            AnchorTaskReduction::ConcatThenMean => {
                tape.mul_scalar(total, F::one() / F::from_count(t * hw))?
            }
        };
        anchor_cols.push(scaled);
    }

    // Flattened anchor outer products and task affinities (1 x C*C nodes).
    let mut anchor_flat = Vec::with_capacity(b);
    for &a in &anchor_cols {
        let at = tape.transpose(a)?;
        let outer = tape.matmul(a, at)?;
        anchor_flat.push(tape.reshape(outer, vec![1, c * c])?);
    }
    let mut task_flat = vec![Vec::with_capacity(b); t];
    for (ti, &s) in saliencies.iter().enumerate() {
        for bi in 0..b {
            let rows = sample_rows(tape, s, b, c, hw, bi)?;
            let rt = tape.transpose(rows)?;
            let gram = tape.matmul(rows, rt)?;
            task_flat[ti].push(tape.reshape(gram, vec![1, c * c])?);
        }
    }

    // Exclusion from eager values, then on-tape normalization of survivors.
    let mut detail = CsaDetail::default();
    let mut kept = Vec::with_capacity(b);
    for bi in 0..b {
        let mut zero = is_zero_row(tape.value(anchor_flat[bi]).data());
        for flat in task_flat.iter() {
            zero = zero || is_zero_row(tape.value(flat[bi]).data());
        }
        if zero {
            detail.excluded.push(bi);
            detail.warnings.push(format!(
                "sample {} excluded from alignment: zero-norm saliency vector",
                bi
            ));
        } else {
            kept.push(bi);
        }
    }
    if kept.is_empty() {
        return Err(Error::numeric("csa_loss", "all samples excluded (zero-norm saliencies)"));
    }
    if kept.len() < 2 {
        return Err(Error::numeric(
            "csa_loss",
            "no negative pairs: fewer than two samples survived zero-norm exclusion",
        ));
    }
    let mut z_a = vec![None; b];
    for &bi in &kept {
        z_a[bi] = Some(normalize_node(tape, anchor_flat[bi])?);
    }
    let mut z_t = vec![vec![None; b]; t];
    for ti in 0..t {
        for &bi in &kept {
            z_t[ti][bi] = Some(normalize_node(tape, task_flat[ti][bi])?);
        }
    }

    let sim = |tape: &mut TapeBase<F>, x: NodeId, y: NodeId| -> Result<NodeId> {
        let prod = tape.mul(x, y)?;
        tape.sum(prod)
    };

    // Negative-pair log-denominators depend only on anchors, shared by tasks.
    let mut neg_logs = vec![None; b];
    let mut neg_sums = vec![None; b];
    for &bi in &kept {
        let za_b = z_a[bi].expect("kept sample normalized");
        let mut acc: Option<NodeId> = None;
        for &k in &kept {
            if k == bi {
                continue;
            }
            let za_k = z_a[k].expect("kept sample normalized");
            let s = sim(tape, za_b, za_k)?;
            let scaled = tape.mul_scalar(s, inv_tau)?;
            let e = tape.exp(scaled)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, e)?,
                None => e,
            });
        }
        let total = acc.expect("at least one negative");
        neg_sums[bi] = Some(total);
        if !settings.include_positive_in_denominator {
            neg_logs[bi] = Some(tape.log(total)?);
        }
    }

    let mut per_task = Vec::with_capacity(t);
    for ti in 0..t {
        let mut acc: Option<NodeId> = None;
        for &bi in &kept {
            let za_b = z_a[bi].expect("kept");
            let zt_tb = z_t[ti][bi].expect("kept");
            let pos = sim(tape, za_b, zt_tb)?;
            let pos_scaled = tape.mul_scalar(pos, inv_tau)?;
            let log_denom = if settings.include_positive_in_denominator {
                let pos_exp = tape.exp(pos_scaled)?;
                let with_pos = tape.add(neg_sums[bi].expect("kept"), pos_exp)?;
                tape.log(with_pos)?
            } else {
                neg_logs[bi].expect("kept")
            };
            let term = tape.sub(log_denom, pos_scaled)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
        }
        let summed = acc.expect("kept nonempty");
        per_task.push(tape.mul_scalar(summed, F::one() / F::from_count(kept.len()))?);
    }
    let mut total = per_task[0];
    for &v in &per_task[1..] {
        total = tape.add(total, v)?;
    }
    let loss = match settings.task_reduction {
        TaskReduction::Mean => tape.mul_scalar(total, F::one() / F::from_count(t))?,
        TaskReduction::Sum => total,
    };
    Ok(CsaGraph { loss, detail })
}
