//! Task saliency and its entropy regulation.
//!
//! The saliency of task `t` at the shared representation is the gradient
//! `S_t = dL_t/dZ`. Per spatial position, the channel-mean magnitudes of the
//! per-task saliencies are normalized into a task distribution, and the mean
//! entropy of that distribution is the regulation loss: pushing entropy *up*
//! discourages any single task from monopolizing a position.
//!
//! Everything exists twice: as plain tensor functions (used for validation
//! and analysis) and as graph builders on the tape (used inside the training
//! objective, where the loss must stay differentiable through the saliency —
//! a second-order construction).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layout::IndexMap;
use crate::scalar::Real;
use crate::tape::{NodeId, TapeBase};
use crate::tensor::{fmt_shape, TensorBase};

/// Default denominator stabilizer for the task distribution.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Tolerance on row sums when validating an externally supplied
/// distribution.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Value-level saliency artifacts for one batch: per-task saliencies, their
/// channel means, and the per-position task distribution.
#[derive(Debug, Clone)]
pub struct SaliencyBundle<F> {
    /// `S_t`, each `B x C x H' x W'`.
    pub per_task: Vec<TensorBase<F>>,
    /// Channel means, each `B x H' x W'`.
    pub channel_means: Vec<TensorBase<F>>,
    /// Row-stochastic `(B*H'*W') x T` matrix.
    pub distribution: TensorBase<F>,
}

impl<F: Real> SaliencyBundle<F> {
    pub fn build(per_task: Vec<TensorBase<F>>, epsilon: F) -> Result<Self> {
        let channel_means = per_task
            .iter()
            .map(channel_aggregate)
            .collect::<Result<Vec<_>>>()?;
        let distribution = task_distribution(&channel_means, epsilon)?;
        Ok(SaliencyBundle {
            per_task,
            channel_means,
            distribution,
        })
    }
}

fn check_saliency_shapes<F: Real>(saliencies: &[&[usize]]) -> Result<(usize, usize, usize, usize)> {
    let Some(first) = saliencies.first() else {
        return Err(Error::invalid("saliency", "at least one task required"));
    };
    if first.len() != 4 {
        return Err(Error::shape(
            "saliency",
            format!("expected B x C x H x W, got {}", fmt_shape(first)),
        ));
    }
    for s in saliencies {
        if s != first {
            return Err(Error::shape(
                "saliency",
                format!("task saliencies differ: {} vs {}", fmt_shape(first), fmt_shape(s)),
            ));
        }
    }
    Ok((first[0], first[1], first[2], first[3]))
}

/// Per-task saliencies `dL_t/dZ` as plain tensors. Each loss must be a
/// scalar downstream of `z`; an unreachable loss is an error, distinct from
/// a reachable loss whose gradient happens to be zero.
pub fn saliency_values<F: Real>(
    tape: &mut TapeBase<F>,
    z: NodeId,
    losses: &[NodeId],
) -> Result<Vec<TensorBase<F>>> {
    let mut out = Vec::with_capacity(losses.len());
    for (t, &loss) in losses.iter().enumerate() {
        check_reachable(tape, z, t, loss)?;
        out.push(tape.gradient_values(loss, &[z])?.remove(0));
    }
    Ok(out)
}

/// Per-task saliencies as live graph nodes, differentiable in their own
/// right (the double-backward path the regularizers need).
pub fn saliency_nodes<F: Real>(
    tape: &mut TapeBase<F>,
    z: NodeId,
    losses: &[NodeId],
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(losses.len());
    for (t, &loss) in losses.iter().enumerate() {
        check_reachable(tape, z, t, loss)?;
        out.push(tape.gradient_nodes(loss, &[z])?[0]);
    }
    Ok(out)
}

fn check_reachable<F: Real>(
    tape: &TapeBase<F>,
    z: NodeId,
    task: usize,
    loss: NodeId,
) -> Result<()> {
    if !tape.depends_on(loss, z) {
        return Err(Error::invalid(
            "task_saliency",
            format!(
                "task {} loss does not depend on the representation node; \
                 saliency would be vacuously zero",
                task
            ),
        ));
    }
    Ok(())
}

/// Signed channel mean: `B x C x H x W -> B x H x W`.
pub fn channel_aggregate<F: Real>(s: &TensorBase<F>) -> Result<TensorBase<F>> {
    let (b, c, h, w) = check_saliency_shapes::<F>(&[s.shape()])?;
    let mut data = vec![F::zero(); b * h * w];
    let inv_c = F::one() / F::from_count(c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for ci in 0..c {
                    acc += s.data()[((bi * c + ci) * h + y) * w + x];
                }
                data[(bi * h + y) * w + x] = acc * inv_c;
            }
        }
    }
    TensorBase::new(vec![b, h, w], data)
}

/// Per-position task distribution
/// `P[i,t] = (|m_t[i]| + eps) / (sum_k |m_k[i]| + T*eps)`, positions
/// enumerated over `(b, h, w)` in row-major order.
pub fn task_distribution<F: Real>(
    channel_means: &[TensorBase<F>],
    epsilon: F,
) -> Result<TensorBase<F>> {
    if channel_means.is_empty() {
        return Err(Error::invalid("task_distribution", "at least one task required"));
    }
    if epsilon < F::zero() {
        return Err(Error::invalid("task_distribution", "epsilon must be non-negative"));
    }
    let first = channel_means[0].shape();
    for m in channel_means {
        if m.shape() != first {
            return Err(Error::shape(
                "task_distribution",
                format!(
                    "channel means differ: {} vs {}",
                    fmt_shape(first),
                    fmt_shape(m.shape())
                ),
            ));
        }
    }
    let t = channel_means.len();
    let n = channel_means[0].numel();
    let mut data = vec![F::zero(); n * t];
    for i in 0..n {
        let mut denom = F::from_count(t) * epsilon;
        for m in channel_means {
            denom += m.data()[i].abs();
        }
        if denom <= F::zero() {
            return Err(Error::numeric(
                "task_distribution",
                format!(
                    "position {} has all-zero saliency across tasks; \
                     use epsilon > 0 to stabilize",
                    i
                ),
            ));
        }
        for (k, m) in channel_means.iter().enumerate() {
            data[i * t + k] = (m.data()[i].abs() + epsilon) / denom;
        }
    }
    TensorBase::new(vec![n, t], data)
}

/// Mean per-position entropy of a row-stochastic matrix, with the
/// convention `0 * log 0 = 0`. Natural logarithm, so the value lies in
/// `[0, ln T]`.
pub fn tsr_loss<F: Real>(p: &TensorBase<F>) -> Result<F> {
    if p.rank() != 2 || p.shape()[1] == 0 || p.shape()[0] == 0 {
        return Err(Error::shape(
            "tsr_loss",
            format!("expected a non-empty N x T matrix, got {}", fmt_shape(p.shape())),
        ));
    }
    let (n, t) = (p.shape()[0], p.shape()[1]);
    let tol = F::from_f64_lit(ROW_SUM_TOLERANCE);
    let mut acc = F::zero();
    for i in 0..n {
        let row = &p.data()[i * t..(i + 1) * t];
        let mut sum = F::zero();
        for &v in row {
            if v < F::zero() {
                return Err(Error::numeric(
                    "tsr_loss",
                    format!("row {} has a negative entry", i),
                ));
            }
            sum += v;
        }
        if (sum - F::one()).abs() > tol {
            return Err(Error::numeric(
                "tsr_loss",
                format!("row {} sums to {} instead of 1", i, sum),
            ));
        }
        for &v in row {
            if v > F::zero() {
                acc += -(v * v.ln());
            }
        }
    }
    Ok(acc / F::from_count(n))
}

/// Renders a distribution matrix as CSV (`position` then one column per
/// task) for debugging.
pub fn distribution_csv<F: Real>(p: &TensorBase<F>) -> Result<String> {
    if p.rank() != 2 {
        return Err(Error::shape(
            "distribution_csv",
            format!("expected N x T, got {}", fmt_shape(p.shape())),
        ));
    }
    let (n, t) = (p.shape()[0], p.shape()[1]);
    let mut out = String::from("position");
    for k in 0..t {
        out.push_str(&format!(",task{}", k));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&i.to_string());
        for k in 0..t {
            out.push_str(&format!(",{}", p.data()[i * t + k].to_f64_lossy()));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Graph-level channel mean of a `B x C x H x W` node, as a `(B*H*W) x 1`
/// column.
fn channel_mean_column<F: Real>(tape: &mut TapeBase<F>, s: NodeId) -> Result<NodeId> {
    let shape = tape.shape(s).to_vec();
    let (b, c, h, w) = check_saliency_shapes::<F>(&[&shape])?;
    let to_last = Arc::new(IndexMap::channels_last(b, c, h, w)?);
    let moved = tape.gather(s, to_last)?;
    let rows = tape.reshape(moved, vec![b * h * w, c])?;
    let ones = tape.leaf(TensorBase::ones(vec![c, 1]))?;
    let sums = tape.matmul(rows, ones)?;
    tape.mul_scalar(sums, F::one() / F::from_count(c))
}

/// Graph-level regulation loss over per-task saliency nodes: builds the
/// task distribution and returns the mean-entropy node. Fails like
/// [`task_distribution`] when `epsilon` is zero and a position has all-zero
/// saliency (checked eagerly against node values).
pub fn tsr_loss_node<F: Real>(
    tape: &mut TapeBase<F>,
    saliencies: &[NodeId],
    epsilon: F,
) -> Result<NodeId> {
    if saliencies.is_empty() {
        return Err(Error::invalid("tsr_loss", "at least one task required"));
    }
    if epsilon < F::zero() {
        return Err(Error::invalid("tsr_loss", "epsilon must be non-negative"));
    }
    let shapes: Vec<Vec<usize>> = saliencies.iter().map(|&s| tape.shape(s).to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let (b, _, h, w) = check_saliency_shapes::<F>(&shape_refs)?;
    let n = b * h * w;
    let t = saliencies.len();
    let mut columns = Vec::with_capacity(t);
    for &s in saliencies {
        let mean = channel_mean_column(tape, s)?;
        let magnitude = tape.abs(mean)?;
        columns.push(tape.add_scalar(magnitude, epsilon)?);
    }
    let mut denom = columns[0];
    for &col in &columns[1..] {
        denom = tape.add(denom, col)?;
    }
    if tape.value(denom).data().iter().any(|&d| d <= F::zero()) {
        return Err(Error::numeric(
            "tsr_loss",
            "a position has all-zero saliency across tasks; use epsilon > 0 to stabilize",
        ));
    }
    let mut acc: Option<NodeId> = None;
    for &col in &columns {
        let p = tape.div(col, denom)?;
        let logp = tape.log(p)?;
        let plogp = tape.mul(p, logp)?;
        let summed = tape.sum(plogp)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, summed)?,
            None => summed,
        });
    }
    let total = tape.neg(acc.expect("at least one task"))?;
    tape.mul_scalar(total, F::one() / F::from_count(n))
}
