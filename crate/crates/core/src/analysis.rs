//! Evaluation metrics and spectral training-quality diagnostics.
//!
//! Two independent tools live here. First, multi-task *relative performance
//! gain*: per-metric relative improvements over a baseline, sign-adjusted so
//! that better is always positive, averaged per task and then over tasks
//! (`delta_p_task`) or flatly over all metrics (`delta_p_metric`), in
//! percent. Second, heavy-tail analysis of weight matrices: the empirical
//! spectral density of the Gram matrix, a truncated power-law fit of its
//! tail by maximum likelihood with the cutoff chosen by
//! Kolmogorov-Smirnov minimization, and a training-quality label derived
//! from the fitted exponent.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{fmt_shape, TensorBase};

/// One evaluation metric: name, value, and orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue<F> {
    pub name: String,
    pub value: F,
    pub higher_is_better: bool,
}

/// All metrics of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics<F> {
    pub task: String,
    pub metrics: Vec<MetricValue<F>>,
}

/// Evaluation results for a set of tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTable<F> {
    pub tasks: Vec<TaskMetrics<F>>,
}

/// Relative gains of `method` over `baseline`, in percent:
/// `(delta_p_task, delta_p_metric)`. Each metric contributes
/// `s * (method - baseline) / baseline` with `s = +1` for higher-is-better
/// metrics and `-1` otherwise; the task-level number averages metrics
/// within each task before averaging tasks, the metric-level number
/// averages all metrics flatly.
pub fn delta_p<F: Real>(method: &MetricTable<F>, baseline: &MetricTable<F>) -> Result<(F, F)> {
    if method.tasks.len() != baseline.tasks.len() || method.tasks.is_empty() {
        return Err(Error::invalid(
            "delta_p",
            format!(
                "table structure mismatch: {} vs {} tasks",
                method.tasks.len(),
                baseline.tasks.len()
            ),
        ));
    }
    let t = method.tasks.len();
    let mut task_sum = F::zero();
    let mut flat_sum = F::zero();
    let mut flat_count = 0usize;
    for (mt, bt) in method.tasks.iter().zip(&baseline.tasks) {
        if mt.task != bt.task || mt.metrics.len() != bt.metrics.len() || mt.metrics.is_empty() {
            return Err(Error::invalid(
                "delta_p",
                format!("task '{}' structure differs from baseline '{}'", mt.task, bt.task),
            ));
        }
        let mut per_task = F::zero();
        for (mm, bm) in mt.metrics.iter().zip(&bt.metrics) {
            if mm.name != bm.name || mm.higher_is_better != bm.higher_is_better {
                return Err(Error::invalid(
                    "delta_p",
                    format!(
                        "metric '{}' of task '{}' differs from baseline metric '{}'",
                        mm.name, mt.task, bm.name
                    ),
                ));
            }
            if bm.value == F::zero() {
                return Err(Error::numeric(
                    "delta_p",
                    format!("baseline metric '{}' of task '{}' is zero", bm.name, bt.task),
                ));
            }
            let raw = (mm.value - bm.value) / bm.value;
            let gain = if mm.higher_is_better { raw } else { -raw };
            per_task += gain;
            flat_sum += gain;
            flat_count += 1;
        }
        task_sum += per_task / F::from_count(mt.metrics.len());
    }
    let hundred = F::from_f64_lit(100.0);
    Ok((
        task_sum / F::from_count(t) * hundred,
        flat_sum / F::from_count(flat_count) * hundred,
    ))
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// ascending. Input asymmetry beyond `1e-9` relative is rejected.
pub fn sym_eigenvalues<F: Real>(m: &TensorBase<F>) -> Result<Vec<F>> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::shape(
            "sym_eigenvalues",
            format!("expected a square matrix, got {}", fmt_shape(m.shape())),
        ));
    }
    let n = m.shape()[0];
    let mut a: Vec<F> = m.data().to_vec();
    let scale = a.iter().fold(F::zero(), |acc, &x| acc.max(x.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i * n + j] - a[j * n + i]).abs() > F::from_f64_lit(1e-9) * scale.max(F::one()) {
                return Err(Error::invalid("sym_eigenvalues", "matrix is not symmetric"));
            }
        }
    }
    // Symmetrize to kill roundoff asymmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (a[i * n + j] + a[j * n + i]) * F::from_f64_lit(0.5);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let tol = F::from_f64_lit(1e-14) * scale.max(F::one());
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = F::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[i * n + j].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (F::from_f64_lit(2.0) * apq);
                let t_val = {
                    let sign = if theta >= F::zero() { F::one() } else { -F::one() };
                    sign / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t_val * t_val + F::one()).sqrt();
                let s = t_val * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<F> = (0..n).map(|i| a[i * n + i]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eigs)
}

/// Empirical spectral density input: eigenvalues of the Gram matrix of `W`
/// taken on its smaller dimension (`W W^T` if `W` is wide-or-square on the
/// first axis, `W^T W` otherwise), ascending, with tiny negative roundoff
/// clamped to zero.
pub fn esd<F: Real>(w: &TensorBase<F>) -> Result<Vec<F>> {
    if w.rank() != 2 {
        return Err(Error::shape(
            "esd",
            format!("expected a 2-D weight matrix, got {}", fmt_shape(w.shape())),
        ));
    }
    let (r, c) = (w.shape()[0], w.shape()[1]);
    if r.min(c) < 2 {
        return Err(Error::invalid(
            "esd",
            format!("degenerate matrix {}: min dimension must be >= 2", fmt_shape(w.shape())),
        ));
    }
    let gram = if r <= c {
        let wt = w.transpose()?;
        w.matmul(&wt)?
    } else {
        let wt = w.transpose()?;
        wt.matmul(w)?
    };
    let mut eigs = sym_eigenvalues(&gram)?;
    let floor = F::from_f64_lit(-1e-10);
    let gram_scale = eigs
        .iter()
        .fold(F::zero(), |acc, &x| acc.max(x.abs()))
        .max(F::one());
    for e in eigs.iter_mut() {
        if *e < F::zero() {
            if *e < floor * gram_scale {
                return Err(Error::numeric(
                    "esd",
                    "Gram matrix produced a significantly negative eigenvalue",
                ));
            }
            *e = F::zero();
        }
    }
    Ok(eigs)
}

/// Training-quality label from a fitted tail exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingLabel {
    UnderTrained,
    WellTrained,
    Intermediate,
    OverOrUnderTrained,
}

impl TrainingLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingLabel::UnderTrained => "under-trained",
            TrainingLabel::WellTrained => "well-trained",
            TrainingLabel::Intermediate => "intermediate",
            TrainingLabel::OverOrUnderTrained => "over-or-under-trained",
        }
    }
}

/// Label thresholds on the exponent: `< under` is under-trained,
/// `[under, well_high]` well-trained, `(well_high, intermediate_high]`
/// intermediate, above that over-or-under-trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlThresholds<F> {
    pub under: F,
    pub well_high: F,
    pub intermediate_high: F,
}

impl<F: Real> Default for PlThresholds<F> {
    fn default() -> Self {
        PlThresholds {
            under: F::from_f64_lit(2.0),
            well_high: F::from_f64_lit(4.0),
            intermediate_high: F::from_f64_lit(6.0),
        }
    }
}

impl<F: Real> PlThresholds<F> {
    pub fn label(&self, alpha: F) -> TrainingLabel {
        if alpha < self.under {
            TrainingLabel::UnderTrained
        } else if alpha <= self.well_high {
            TrainingLabel::WellTrained
        } else if alpha <= self.intermediate_high {
            TrainingLabel::Intermediate
        } else {
            TrainingLabel::OverOrUnderTrained
        }
    }
}

/// Default minimum tail size for the power-law fit.
pub const DEFAULT_MIN_TAIL: usize = 8;

/// A fitted truncated power law over a spectrum's tail.
#[derive(Debug, Clone, PartialEq)]
pub struct PlFit<F> {
    pub alpha: F,
    pub xmin: F,
    pub ks: F,
    pub n_tail: usize,
    pub label: TrainingLabel,
}

/// Fits `p(x) ~ x^{-alpha}` for `x >= xmin` to the positive eigenvalues:
/// for every candidate cutoff leaving at least `min_tail` values, the
/// maximum-likelihood exponent is `1 + n / sum(ln(x_i / xmin))`, and the
/// cutoff minimizing the Kolmogorov-Smirnov distance between the empirical
/// tail and the fitted law wins.
pub fn pl_fit<F: Real>(
    eigenvalues: &[F],
    min_tail: usize,
    thresholds: &PlThresholds<F>,
) -> Result<PlFit<F>> {
    if min_tail < 2 {
        return Err(Error::invalid("pl_fit", "min_tail must be at least 2"));
    }
    let mut positive: Vec<F> = eigenvalues
        .iter()
        .copied()
        .filter(|&x| x > F::zero())
        .collect();
    if positive.len() < min_tail {
        return Err(Error::numeric(
            "pl_fit",
            format!(
                "insufficient tail: {} positive eigenvalues for min tail {}",
                positive.len(),
                min_tail
            ),
        ));
    }
    positive.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let total = positive.len();
    let mut best: Option<PlFit<F>> = None;
    let mut prev_xmin: Option<F> = None;
    for start in 0..=(total - min_tail) {
        let xmin = positive[start];
        if prev_xmin == Some(xmin) {
            continue;
        }
        prev_xmin = Some(xmin);
        let tail = &positive[start..];
        let n = tail.len();
        let mut log_sum = F::zero();
        for &x in tail {
            log_sum += (x / xmin).ln();
        }
        if log_sum <= F::zero() {
            continue; // all tail values equal: no slope information
        }
        let alpha = F::one() + F::from_count(n) / log_sum;
        let exponent = alpha - F::one();
        let mut ks = F::zero();
        for (i, &x) in tail.iter().enumerate() {
            let fitted = F::one() - (xmin / x).powf(exponent);
            let lo = F::from_count(i) / F::from_count(n);
            let hi = F::from_count(i + 1) / F::from_count(n);
            ks = ks.max((fitted - lo).abs()).max((fitted - hi).abs());
        }
        let candidate = PlFit {
            alpha,
            xmin,
            ks,
            n_tail: n,
            label: thresholds.label(alpha),
        };
        let better = match &best {
            None => true,
            Some(b) => ks < b.ks,
        };
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| {
        Error::numeric(
            "pl_fit",
            "degenerate spectrum: no cutoff with tail variation found",
        )
    })
}

/// Which named parameters a spectral audit covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartSelector {
    /// Shared encoder parameters (`shared.*`).
    Backbone,
    /// One task head's parameters (`task{t}.*`).
    Head(usize),
}

impl PartSelector {
    fn matches(&self, name: &str) -> bool {
        match self {
            PartSelector::Backbone => name.starts_with("shared."),
            PartSelector::Head(t) => name.starts_with(&format!("task{}.", t)),
        }
    }
}

/// Power-law fit of one named weight matrix.
#[derive(Debug, Clone)]
pub struct LayerFit<F> {
    pub name: String,
    pub fit: PlFit<F>,
}

/// Spectral audit of one model part.
#[derive(Debug, Clone)]
pub struct PartAudit<F> {
    pub layers: Vec<LayerFit<F>>,
    /// Rank-2 parameters that matched the part but could not be fitted,
    /// with reasons (too small, degenerate spectrum).
    pub skipped: Vec<(String, String)>,
    /// Unweighted mean exponent over fitted layers.
    pub mean_alpha: F,
}

/// Fits every qualifying weight matrix (rank 2, both dimensions >= 2) in
/// the selected part of a named-tensor archive. Layer order follows the
/// archive; an audit with no fittable layer is an error.
pub fn audit_part<F: Real>(
    tensors: &[(String, TensorBase<F>)],
    selector: PartSelector,
    min_tail: usize,
    thresholds: &PlThresholds<F>,
) -> Result<PartAudit<F>> {
    let mut layers = Vec::new();
    let mut skipped = Vec::new();
    let mut matched_any = false;
    for (name, tensor) in tensors {
        if !selector.matches(name) {
            continue;
        }
        matched_any = true;
        if tensor.rank() != 2 || tensor.shape().iter().any(|&d| d < 2) {
            continue; // biases and vectors are not audit subjects
        }
        match esd(tensor).and_then(|eigs| pl_fit(&eigs, min_tail, thresholds)) {
            Ok(fit) => layers.push(LayerFit { name: name.clone(), fit }),
            Err(e) => skipped.push((name.clone(), e.to_string())),
        }
    }
    if !matched_any {
        return Err(Error::invalid("audit", "selected part matches no tensors"));
    }
    if layers.is_empty() {
        return Err(Error::numeric(
            "audit",
            "no qualifying weight matrix in the selected part could be fitted",
        ));
    }
    let mut sum = F::zero();
    for l in &layers {
        sum += l.fit.alpha;
    }
    let mean_alpha = sum / F::from_count(layers.len());
    Ok(PartAudit {
        layers,
        skipped,
        mean_alpha,
    })
}

/// Max-minus-min spread of per-part mean exponents; the imbalance flag
/// reported across task heads.
pub fn alpha_spread<F: Real>(means: &[F]) -> Result<F> {
    let Some(&first) = means.first() else {
        return Err(Error::invalid("alpha_spread", "no parts"));
    };
    let mut lo = first;
    let mut hi = first;
    for &m in means {
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok(hi - lo)
}
