//! Comparator multi-task optimization methods.
//!
//! Two families. *Loss scaling* reweights per-task losses before a single
//! backward pass: equal weighting (EW), learned homoscedastic-uncertainty
//! weighting (UW), and loss-ratio reweighting (DWA); GradNorm learns its
//! weights from gradient magnitudes. *Gradient manipulation* combines the
//! per-task gradients of the shared parameters — flattened to one vector
//! per task — into a single update direction: conflict projection
//! (PCGrad), the minimum-norm convex combination (MGDA), and worst-case
//! improvement with a constrained step (CAGrad).
//!
//! Everything here is a pure function of its inputs plus, where
//! randomness is involved, an explicit RNG, so outcomes are reproducible
//! from the run seed.

use crate::error::{Error, Result};
use crate::scalar::Real;
use rand::seq::SliceRandom;
use rand::Rng;

/// Multi-task optimization method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ew,
    Uw,
    Dwa,
    GradNorm,
    PcGrad,
    Mgda,
    CaGrad,
    RepMtl,
}

impl Method {
    /// Parses a config-file method name.
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "ew" => Ok(Method::Ew),
            "uw" => Ok(Method::Uw),
            "dwa" => Ok(Method::Dwa),
            "gradnorm" => Ok(Method::GradNorm),
            "pcgrad" => Ok(Method::PcGrad),
            "mgda" => Ok(Method::Mgda),
            "cagrad" => Ok(Method::CaGrad),
            "repmtl" => Ok(Method::RepMtl),
            other => Err(Error::invalid(
                "method",
                format!(
                    "unknown method '{}'; expected one of \
                     ew, uw, dwa, gradnorm, pcgrad, mgda, cagrad, repmtl",
                    other
                ),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ew => "ew",
            Method::Uw => "uw",
            Method::Dwa => "dwa",
            Method::GradNorm => "gradnorm",
            Method::PcGrad => "pcgrad",
            Method::Mgda => "mgda",
            Method::CaGrad => "cagrad",
            Method::RepMtl => "repmtl",
        }
    }

    /// True for methods that merge per-task gradients instead of scaling
    /// losses.
    pub fn manipulates_gradients(self) -> bool {
        matches!(self, Method::PcGrad | Method::Mgda | Method::CaGrad)
    }
}

/// Mutable method state carried across training steps.
#[derive(Debug, Clone)]
pub struct MtoState<F> {
    pub method: Method,
    pub num_tasks: usize,
    /// Completed epochs' mean task losses, oldest first (DWA input).
    pub loss_history: Vec<Vec<F>>,
    /// Learnable log-variances `s_t` (UW), updated by the optimizer.
    pub log_variances: Vec<F>,
    /// Learned task weights, kept summing to the task count (GradNorm).
    pub gradnorm_weights: Vec<F>,
    /// First-epoch reference losses (GradNorm).
    pub initial_losses: Option<Vec<F>>,
    pub dwa_temp: F,
    pub gradnorm_alpha: F,
    pub gradnorm_lr: F,
    pub cagrad_c: F,
}

impl<F: Real> MtoState<F> {
    pub fn new(method: Method, num_tasks: usize) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::invalid("mto_state", "at least one task required"));
        }
        Ok(MtoState {
            method,
            num_tasks,
            loss_history: Vec::new(),
            log_variances: vec![F::zero(); num_tasks],
            gradnorm_weights: vec![F::one(); num_tasks],
            initial_losses: None,
            dwa_temp: F::from_f64_lit(2.0),
            gradnorm_alpha: F::from_f64_lit(1.5),
            gradnorm_lr: F::from_f64_lit(0.025),
            cagrad_c: F::from_f64_lit(0.4),
        })
    }
}

fn check_grads<F: Real>(op: &'static str, grads: &[Vec<F>]) -> Result<usize> {
    let Some(first) = grads.first() else {
        return Err(Error::invalid(op, "at least one task gradient required"));
    };
    let dim = first.len();
    for (t, g) in grads.iter().enumerate() {
        if g.len() != dim {
            return Err(Error::shape(
                op,
                format!("task {} gradient has length {}, expected {}", t, g.len(), dim),
            ));
        }
    }
    Ok(dim)
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Equal weighting: the plain sum of task gradients.
pub fn ew_aggregate<F: Real>(grads: &[Vec<F>]) -> Result<Vec<F>> {
    let dim = check_grads("ew_aggregate", grads)?;
    let mut out = vec![F::zero(); dim];
    for g in grads {
        for (o, &x) in out.iter_mut().zip(g) {
            *o += x;
        }
    }
    Ok(out)
}

/// Uncertainty-based loss weights `exp(-s_t) / 2` from the learned
/// log-variances.
pub fn uw_weights<F: Real>(log_variances: &[F]) -> Vec<F> {
    log_variances
        .iter()
        .map(|&s| (-s).exp() / F::from_f64_lit(2.0))
        .collect()
}

/// Uncertainty-weighting objective
/// `sum_t [ L_t * exp(-s_t) / 2 + s_t / 2 ]`; its minimizers balance task
/// losses against the learned log-variances.
pub fn uw_objective<F: Real>(losses: &[F], log_variances: &[F]) -> Result<F> {
    if losses.len() != log_variances.len() {
        return Err(Error::invalid(
            "uw_objective",
            format!("{} losses vs {} log-variances", losses.len(), log_variances.len()),
        ));
    }
    let half = F::from_f64_lit(0.5);
    let mut total = F::zero();
    for (&l, &s) in losses.iter().zip(log_variances) {
        total += l * (-s).exp() * half + s * half;
    }
    Ok(total)
}

/// Loss-ratio task weights: during the first two epochs every weight is 1;
/// afterwards `r_t = L_t(k-1) / L_t(k-2)` and
/// `w_t = T * softmax(r / temperature)_t`, so the weights always sum to the
/// task count.
pub fn dwa_weights<F: Real>(
    history: &[Vec<F>],
    num_tasks: usize,
    temperature: F,
) -> Result<Vec<F>> {
    if temperature <= F::zero() {
        return Err(Error::invalid("dwa_weights", "temperature must be positive"));
    }
    if num_tasks == 0 {
        return Err(Error::invalid("dwa_weights", "at least one task required"));
    }
    for (k, epoch) in history.iter().enumerate() {
        if epoch.len() != num_tasks {
            return Err(Error::invalid(
                "dwa_weights",
                format!("epoch {} has {} losses, expected {}", k, epoch.len(), num_tasks),
            ));
        }
    }
    if history.len() < 2 {
        return Ok(vec![F::one(); num_tasks]);
    }
    let last = &history[history.len() - 1];
    let prev = &history[history.len() - 2];
    let mut scaled = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        if prev[t] == F::zero() || last[t] == F::zero() {
            return Err(Error::numeric(
                "dwa_weights",
                format!("task {} has a zero historical loss; ratios are undefined", t),
            ));
        }
        scaled.push(last[t] / prev[t] / temperature);
    }
    let max = scaled
        .iter()
        .fold(scaled[0], |acc, &x| acc.max(x));
    let exps: Vec<F> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let mut denom = F::zero();
    for &e in &exps {
        denom += e;
    }
    let t_count = F::from_count(num_tasks);
    Ok(exps.iter().map(|&e| t_count * e / denom).collect())
}

/// One GradNorm weight update. Inverse training rates
/// `r_t = (L_t / L_t(0)) / mean_k (L_k / L_k(0))` set per-task targets
/// `mean_k(w_k * n_k) * r_t^alpha` for the weighted gradient norms; the
/// weights take one descent step on `sum_t |w_t * n_t - target_t|` with the
/// targets held constant, then are renormalized to sum to the task count
/// (floored at a tiny positive value so they stay strictly positive).
pub fn gradnorm_step<F: Real>(
    weights: &[F],
    grad_norms: &[F],
    losses: &[F],
    initial_losses: &[F],
    alpha: F,
    lr: F,
) -> Result<Vec<F>> {
    let t = weights.len();
    if grad_norms.len() != t || losses.len() != t || initial_losses.len() != t || t == 0 {
        return Err(Error::invalid(
            "gradnorm_step",
            format!(
                "inconsistent lengths: {} weights, {} norms, {} losses, {} initial",
                t,
                grad_norms.len(),
                losses.len(),
                initial_losses.len()
            ),
        ));
    }
    if alpha < F::zero() {
        return Err(Error::invalid("gradnorm_step", "alpha must be non-negative"));
    }
    for (i, &l0) in initial_losses.iter().enumerate() {
        if l0 == F::zero() {
            return Err(Error::numeric(
                "gradnorm_step",
                format!("task {} initial loss is zero; training rates are undefined", i),
            ));
        }
    }
    let rates: Vec<F> = losses
        .iter()
        .zip(initial_losses)
        .map(|(&l, &l0)| l / l0)
        .collect();
    let mut mean_rate = F::zero();
    for &r in &rates {
        mean_rate += r;
    }
    mean_rate = mean_rate / F::from_count(t);
    if mean_rate == F::zero() {
        return Err(Error::numeric(
            "gradnorm_step",
            "all relative training rates are zero",
        ));
    }
    let mut gbar = F::zero();
    for (&w, &n) in weights.iter().zip(grad_norms) {
        gbar += w * n;
    }
    gbar = gbar / F::from_count(t);
    let mut next = Vec::with_capacity(t);
    for i in 0..t {
        let target = gbar * (rates[i] / mean_rate).powf(alpha);
        let diff = weights[i] * grad_norms[i] - target;
        let grad = sign(diff) * grad_norms[i];
        next.push((weights[i] - lr * grad).max(F::from_f64_lit(1e-12)));
    }
    let mut total = F::zero();
    for &w in &next {
        total += w;
    }
    let scale = F::from_count(t) / total;
    Ok(next.into_iter().map(|w| w * scale).collect())
}

/// Removes the conflicting component of `g` along `onto`: when their dot
/// product is negative, returns `g - (g . onto / |onto|^2) * onto`;
/// otherwise returns `g` unchanged.
pub fn project_away_conflict<F: Real>(g: &[F], onto: &[F]) -> Vec<F> {
    let d = dot(g, onto);
    if d >= F::zero() {
        return g.to_vec();
    }
    let n2 = dot(onto, onto);
    if n2 == F::zero() {
        return g.to_vec();
    }
    let coef = d / n2;
    g.iter().zip(onto).map(|(&x, &o)| x - coef * o).collect()
}

/// Conflict-projecting aggregation: each task's gradient is successively
/// projected away from every other task's gradient it conflicts with, the
/// other tasks visited in an RNG-shuffled order, and the projected
/// gradients are summed. With no conflicting pair this is exactly the
/// equal-weighting sum.
pub fn pcgrad<F: Real, R: Rng + ?Sized>(grads: &[Vec<F>], rng: &mut R) -> Result<Vec<F>> {
    let dim = check_grads("pcgrad", grads)?;
    let t = grads.len();
    let mut out = vec![F::zero(); dim];
    for i in 0..t {
        let mut order: Vec<usize> = (0..t).filter(|&j| j != i).collect();
        order.shuffle(rng);
        let mut gi = grads[i].clone();
        for j in order {
            gi = project_away_conflict(&gi, &grads[j]);
        }
        for (o, &x) in out.iter_mut().zip(&gi) {
            *o += x;
        }
    }
    Ok(out)
}

const MINNORM_MAX_ITERS: usize = 250;
const MINNORM_IMPROVEMENT: f64 = 1e-10;

/// Minimum-norm convex combination of the task gradients: returns the
/// simplex weights `gamma` minimizing `|sum_t gamma_t g_t|` and the
/// combination itself. Solved by Frank-Wolfe with an exact two-point line
/// search, started at the shortest input gradient, capped at 250
/// iterations, stopping when an iteration improves the squared norm by
/// less than 1e-10.
pub fn mgda_minnorm<F: Real>(grads: &[Vec<F>]) -> Result<(Vec<F>, Vec<F>)> {
    check_grads("mgda_minnorm", grads)?;
    let t = grads.len();
    if t == 1 {
        return Ok((vec![F::one()], grads[0].clone()));
    }
    let mut gram = vec![F::zero(); t * t];
    for i in 0..t {
        for j in i..t {
            let d = dot(&grads[i], &grads[j]);
            gram[i * t + j] = d;
            gram[j * t + i] = d;
        }
    }
    let mut start = 0usize;
    for i in 1..t {
        if gram[i * t + i] < gram[start * t + start] {
            start = i;
        }
    }
    let mut gamma = vec![F::zero(); t];
    gamma[start] = F::one();
    let objective = |gamma: &[F]| -> F {
        let mut f = F::zero();
        for i in 0..t {
            for j in 0..t {
                f += gamma[i] * gram[i * t + j] * gamma[j];
            }
        }
        f
    };
    let mut prev = objective(&gamma);
    for _ in 0..MINNORM_MAX_ITERS {
        // (K gamma)_t = g_t . (G gamma)
        let mut kg = vec![F::zero(); t];
        for (i, slot) in kg.iter_mut().enumerate() {
            let mut acc = F::zero();
            for j in 0..t {
                acc += gram[i * t + j] * gamma[j];
            }
            *slot = acc;
        }
        let mut pick = 0usize;
        for i in 1..t {
            if kg[i] < kg[pick] {
                pick = i;
            }
        }
        // Exact minimizer of |(1-s) a + s b|^2 over s in [0, 1] with
        // a = G gamma, b = g_pick, written in Gram-matrix terms.
        let a_dot_b = kg[pick];
        let b_dot_b = gram[pick * t + pick];
        let denom = prev - a_dot_b - a_dot_b + b_dot_b;
        let s = if denom <= F::zero() {
            F::zero()
        } else {
            ((prev - a_dot_b) / denom).max(F::zero()).min(F::one())
        };
        let keep = F::one() - s;
        for g in gamma.iter_mut() {
            *g = *g * keep;
        }
        gamma[pick] += s;
        let cur = objective(&gamma);
        let improved = prev - cur;
        prev = cur;
        if improved < F::from_f64_lit(MINNORM_IMPROVEMENT) {
            break;
        }
    }
    let mut combo = vec![F::zero(); grads[0].len()];
    for (i, g) in grads.iter().enumerate() {
        for (o, &x) in combo.iter_mut().zip(g) {
            *o += gamma[i] * x;
        }
    }
    Ok((gamma, combo))
}

/// Euclidean projection of a point onto the probability simplex
/// (nonnegative entries summing to 1).
pub fn project_to_simplex<F: Real>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::invalid("project_to_simplex", "empty input"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite weights"));
    let mut cumsum = F::zero();
    let mut rho = 0usize;
    let mut cumsum_rho = F::zero();
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let threshold = (cumsum - F::one()) / F::from_count(j + 1);
        if u - threshold > F::zero() {
            rho = j + 1;
            cumsum_rho = cumsum;
        }
    }
    let theta = (cumsum_rho - F::one()) / F::from_count(rho);
    Ok(v.iter().map(|&x| (x - theta).max(F::zero())).collect())
}

const CAGRAD_ITERS: usize = 200;
const CAGRAD_STEP: f64 = 0.05;

/// Conflict-averse aggregation. With `g0` the average gradient and
/// `phi = c^2 |g0|^2`, the inner problem minimizes
/// `F(w) = g_w . g0 + sqrt(phi) * |g_w|` over simplex weights `w`
/// (`g_w = sum_t w_t g_t`), solved by projected gradient descent from the
/// uniform point, 200 iterations of step 0.05. The aggregate is
/// `g0 + (sqrt(phi) / |g_w*|) g_w*`, or plain `g0` when `g_w*` vanishes.
/// Returns `(w*, aggregate)`.
pub fn cagrad<F: Real>(grads: &[Vec<F>], c: F) -> Result<(Vec<F>, Vec<F>)> {
    let dim = check_grads("cagrad", grads)?;
    if c < F::zero() {
        return Err(Error::invalid("cagrad", "c must be non-negative"));
    }
    let t = grads.len();
    let mut g0 = vec![F::zero(); dim];
    for g in grads {
        for (o, &x) in g0.iter_mut().zip(g) {
            *o += x;
        }
    }
    let inv_t = F::one() / F::from_count(t);
    for x in g0.iter_mut() {
        *x = *x * inv_t;
    }
    let sqrt_phi = c * norm(&g0);
    let mut gram = vec![F::zero(); t * t];
    for i in 0..t {
        for j in i..t {
            let d = dot(&grads[i], &grads[j]);
            gram[i * t + j] = d;
            gram[j * t + i] = d;
        }
    }
    let b: Vec<F> = grads.iter().map(|g| dot(g, &g0)).collect();
    let mut w = vec![inv_t; t];
    let step = F::from_f64_lit(CAGRAD_STEP);
    for _ in 0..CAGRAD_ITERS {
        let mut kw = vec![F::zero(); t];
        for (i, slot) in kw.iter_mut().enumerate() {
            let mut acc = F::zero();
            for j in 0..t {
                acc += gram[i * t + j] * w[j];
            }
            *slot = acc;
        }
        let mut wkw = F::zero();
        for i in 0..t {
            wkw += w[i] * kw[i];
        }
        let gw_norm = wkw.max(F::zero()).sqrt();
        let moved: Vec<F> = (0..t)
            .map(|i| {
                let mut grad = b[i];
                if gw_norm > F::zero() {
                    grad += sqrt_phi * kw[i] / gw_norm;
                }
                w[i] - step * grad
            })
            .collect();
        w = project_to_simplex(&moved)?;
    }
    let mut gw = vec![F::zero(); dim];
    for (i, g) in grads.iter().enumerate() {
        for (o, &x) in gw.iter_mut().zip(g) {
            *o += w[i] * x;
        }
    }
    let gw_norm = norm(&gw);
    let out = if gw_norm == F::zero() || sqrt_phi == F::zero() {
        g0
    } else {
        let coef = sqrt_phi / gw_norm;
        g0.iter().zip(&gw).map(|(&a, &x)| a + coef * x).collect()
    };
    Ok((w, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::assert_close;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grads(t: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect()
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Ew,
            Method::Uw,
            Method::Dwa,
            Method::GradNorm,
            Method::PcGrad,
            Method::Mgda,
            Method::CaGrad,
            Method::RepMtl,
        ] {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("nadir").is_err());
    }

    #[test]
    fn ew_single_task_is_identity_and_pairs_sum() {
        let g = vec![vec![3.0, -1.0]];
        assert_eq!(ew_aggregate(&g).unwrap(), vec![3.0, -1.0]);
        let pair = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ew_aggregate(&pair).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn ew_matches_elementwise_loop() {
        let grads = random_grads(4, 17, 11);
        let fast = ew_aggregate(&grads).unwrap();
        for (i, &v) in fast.iter().enumerate() {
            let mut acc = 0.0;
            for g in &grads {
                acc += g[i];
            }
            assert_eq!(v, acc);
        }
        assert!(ew_aggregate(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(ew_aggregate::<f64>(&[]).is_err());
    }

    #[test]
    fn uw_zero_log_variance_gives_half_weights() {
        let w = uw_weights(&[0.0, 0.0, 0.0]);
        assert_eq!(w, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn uw_objective_is_stationary_at_unit_loss_zero_s() {
        let h = 1e-6f64;
        let plus = uw_objective(&[1.0], &[h]).unwrap();
        let minus = uw_objective(&[1.0], &[-h]).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        assert!(fd.abs() < 1e-9, "gradient {fd}");
    }

    #[test]
    fn uw_descent_step_decreases_objective() {
        let losses = [3.0, 0.2];
        let s = [0.0, 0.0];
        let base = uw_objective(&losses, &s).unwrap();
        let h = 1e-6;
        let mut grad = [0.0; 2];
        for t in 0..2 {
            let mut sp = s;
            sp[t] += h;
            let mut sm = s;
            sm[t] -= h;
            grad[t] = (uw_objective(&losses, &sp).unwrap() - uw_objective(&losses, &sm).unwrap())
                / (2.0 * h);
        }
        let eta = 0.1;
        let stepped: Vec<f64> = s.iter().zip(&grad).map(|(&x, &g)| x - eta * g).collect();
        let after = uw_objective(&losses, &stepped).unwrap();
        assert!(after < base, "{after} !< {base}");
    }

    #[test]
    fn dwa_warms_up_with_unit_weights() {
        assert_eq!(dwa_weights::<f64>(&[], 3, 2.0).unwrap(), vec![1.0; 3]);
        assert_eq!(
            dwa_weights(&[vec![1.0, 2.0, 3.0]], 3, 2.0).unwrap(),
            vec![1.0; 3]
        );
    }

    #[test]
    fn dwa_equal_ratios_stay_uniform() {
        let history = vec![vec![4.0, 2.0], vec![2.0, 1.0]]; // both ratios 0.5
        let w = dwa_weights(&history, 2, 2.0).unwrap();
        assert_close(w[0], 1.0, 1e-12, 1e-12);
        assert_close(w[1], 1.0, 1e-12, 1e-12);
    }

    #[test]
    fn dwa_matches_hand_softmax() {
        // ratios (0.5, 1.0), temperature 2 -> 2 * softmax(0.25, 0.5)
        let history = vec![vec![2.0f64, 1.0], vec![1.0, 1.0]];
        let w = dwa_weights(&history, 2, 2.0).unwrap();
        assert!((w[0] - 0.8756).abs() < 5e-5, "w0 = {}", w[0]);
        assert!((w[1] - 1.1244).abs() < 5e-5, "w1 = {}", w[1]);
    }

    #[test]
    fn dwa_weights_sum_to_task_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = 1 + (rng.random::<f64>() * 5.0) as usize;
            let history: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..t).map(|_| rng.random::<f64>() + 0.1).collect())
                .collect();
            let temp = rng.random::<f64>() * 4.0 + 0.5;
            let w = dwa_weights(&history, t, temp).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - t as f64).abs() <= 1e-9, "sum {sum} for {t} tasks");
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn dwa_rejects_zero_history_and_bad_temperature() {
        let history = vec![vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(dwa_weights(&history, 2, 2.0).is_err());
        assert!(dwa_weights(&[vec![1.0], vec![1.0]], 1, 0.0).is_err());
    }

    #[test]
    fn gradnorm_alpha_zero_targets_the_mean_weighted_norm() {
        // Unequal norms and rates, alpha = 0: every target is the mean
        // weighted norm, so the step depends only on each norm's side of it.
        let weights = [1.0, 1.0];
        let norms = [2.0, 1.0];
        let losses = [0.9, 0.3];
        let initial = [1.0, 1.0];
        let lr = 0.01;
        let next = gradnorm_step(&weights, &norms, &losses, &initial, 0.0, lr).unwrap();
        // gbar = 1.5; diffs (0.5, -0.5); grads (2, -1); raw (0.98, 1.01).
        let raw = [0.98, 1.01];
        let scale = 2.0 / (raw[0] + raw[1]);
        assert_close(next[0], raw[0] * scale, 1e-12, 1e-12);
        assert_close(next[1], raw[1] * scale, 1e-12, 1e-12);
    }

    #[test]
    fn gradnorm_balanced_tasks_are_a_fixed_point() {
        let weights = [1.0, 1.0, 1.0];
        let norms = [0.7, 0.7, 0.7];
        let losses = [0.4, 0.4, 0.4];
        let initial = [0.8, 0.8, 0.8];
        let next = gradnorm_step(&weights, &norms, &losses, &initial, 1.5, 0.025).unwrap();
        assert_eq!(next, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradnorm_step_matches_finite_difference_descent() {
        let weights = [1.2f64, 0.8];
        let norms = [2.0f64, 1.0];
        let losses = [0.9f64, 0.5];
        let initial = [1.0f64, 1.0];
        let alpha = 1.5f64;
        let lr = 0.01;
        // Targets from the base weights, then held constant.
        let rates = [0.9f64, 0.5];
        let mean_rate = 0.7f64;
        let gbar = (1.2 * 2.0 + 0.8 * 1.0) / 2.0;
        let targets = [
            gbar * (rates[0] / mean_rate).powf(alpha),
            gbar * (rates[1] / mean_rate).powf(alpha),
        ];
        let objective = |w: &[f64]| -> f64 {
            (w[0] * norms[0] - targets[0]).abs() + (w[1] * norms[1] - targets[1]).abs()
        };
        let h = 1e-7;
        let mut fd = [0.0; 2];
        for t in 0..2 {
            let mut wp = weights;
            wp[t] += h;
            let mut wm = weights;
            wm[t] -= h;
            fd[t] = (objective(&wp) - objective(&wm)) / (2.0 * h);
        }
        let raw = [weights[0] - lr * fd[0], weights[1] - lr * fd[1]];
        let scale = 2.0 / (raw[0] + raw[1]);
        let expected = [raw[0] * scale, raw[1] * scale];
        let next = gradnorm_step(&weights, &norms, &losses, &initial, alpha, lr).unwrap();
        assert_close(next[0], expected[0], 1e-8, 1e-10);
        assert_close(next[1], expected[1], 1e-8, 1e-10);
    }

    #[test]
    fn gradnorm_rejects_zero_initial_loss() {
        let err = gradnorm_step(&[1.0], &[1.0], &[1.0], &[0.0], 1.5, 0.01).unwrap_err();
        assert!(err.to_string().contains("initial loss"), "got: {err}");
    }

    #[test]
    fn pcgrad_hand_projection() {
        let projected = project_away_conflict(&[1.0, 0.0], &[-1.0, 1.0]);
        assert_close(projected[0], 0.5, 1e-12, 1e-12);
        assert_close(projected[1], 0.5, 1e-12, 1e-12);
    }

    #[test]
    fn pcgrad_aggregates_both_projections() {
        let grads = vec![vec![1.0, 0.0], vec![-1.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = pcgrad(&grads, &mut rng).unwrap();
        // task 0 -> (0.5, 0.5); task 1 -> (-1,1) + (1,0) = (0,1)
        assert_close(out[0], 0.5, 1e-12, 1e-12);
        assert_close(out[1], 1.5, 1e-12, 1e-12);
    }

    #[test]
    fn pcgrad_without_conflicts_equals_equal_weighting() {
        let grads = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = pcgrad(&grads, &mut rng).unwrap();
        assert_eq!(out, ew_aggregate(&grads).unwrap());
    }

    #[test]
    fn pcgrad_single_task_and_zero_other_are_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = pcgrad(&[vec![2.0, -3.0]], &mut rng).unwrap();
        assert_eq!(one, vec![2.0, -3.0]);
        let with_zero = vec![vec![1.0, -1.0], vec![0.0, 0.0]];
        let out = pcgrad(&with_zero, &mut rng).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);
    }

    #[test]
    fn pcgrad_is_deterministic_per_seed() {
        let grads = random_grads(4, 6, 21);
        let a = pcgrad(&grads, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = pcgrad(&grads, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mgda_single_and_duplicate_gradients() {
        let (gamma, combo) = mgda_minnorm(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(gamma, vec![1.0]);
        assert_eq!(combo, vec![1.0, 2.0]);
        let (gamma, combo) = mgda_minnorm(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let gsum: f64 = gamma.iter().sum();
        assert!((gsum - 1.0).abs() <= 1e-8);
        assert_close(combo[0], 1.0, 1e-9, 1e-12);
        assert_close(combo[1], 2.0, 1e-9, 1e-12);
    }

    #[test]
    fn mgda_orthogonal_pair_balances() {
        let (gamma, combo) = mgda_minnorm(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_close(gamma[0], 0.5, 1e-9, 1e-12);
        assert_close(gamma[1], 0.5, 1e-9, 1e-12);
        assert_close(combo[0], 0.5, 1e-9, 1e-12);
        assert_close(combo[1], 0.5, 1e-9, 1e-12);
    }

    fn grid_min_norm2(g1: &[f64], g2: &[f64], step: f64) -> f64 {
        let mut best = f64::INFINITY;
        let mut s = 0.0;
        while s <= 1.0 + 1e-12 {
            let mut n2 = 0.0;
            for (a, b) in g1.iter().zip(g2) {
                let v = s * a + (1.0 - s) * b;
                n2 += v * v;
            }
            best = best.min(n2);
            s += step;
        }
        best
    }

    #[test]
    fn mgda_matches_grid_search_on_random_pairs() {
        for seed in 0..10u64 {
            let grads = random_grads(2, 3, 300 + seed);
            let (_, combo) = mgda_minnorm(&grads).unwrap();
            let ours: f64 = combo.iter().map(|x| x * x).sum();
            let grid = grid_min_norm2(&grads[0], &grads[1], 1e-4);
            assert!(
                (ours.sqrt() - grid.sqrt()).abs() <= 1e-3,
                "seed {seed}: {} vs {}",
                ours.sqrt(),
                grid.sqrt()
            );
        }
    }

    #[test]
    fn mgda_never_exceeds_the_shortest_gradient() {
        for seed in 0..50u64 {
            let t = 2 + (seed % 4) as usize;
            let grads = random_grads(t, 5, 900 + seed);
            let (gamma, combo) = mgda_minnorm(&grads).unwrap();
            let min_norm = grads
                .iter()
                .map(|g| norm(g))
                .fold(f64::INFINITY, f64::min);
            assert!(norm(&combo) <= min_norm + 1e-8, "seed {seed}");
            let gsum: f64 = gamma.iter().sum();
            assert!((gsum - 1.0).abs() <= 1e-8);
            assert!(gamma.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn simplex_projection_hand_cases() {
        assert_eq!(project_to_simplex(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let half = project_to_simplex(&[0.3, 0.3]).unwrap();
        assert_close(half[0], 0.5, 1e-12, 1e-12);
        assert_close(half[1], 0.5, 1e-12, 1e-12);
        let already = project_to_simplex(&[0.25, 0.75]).unwrap();
        assert_close(already[0], 0.25, 1e-12, 1e-12);
        assert_close(already[1], 0.75, 1e-12, 1e-12);
        assert!(project_to_simplex::<f64>(&[]).is_err());
    }

    #[test]
    fn simplex_projection_lands_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..200 {
            let n = 1 + (rng.random::<f64>() * 6.0) as usize;
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let p = project_to_simplex(&v).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn cagrad_c_zero_returns_the_average() {
        let grads = random_grads(3, 4, 31);
        let (w, out) = cagrad(&grads, 0.0).unwrap();
        for i in 0..4 {
            let avg = (grads[0][i] + grads[1][i] + grads[2][i]) / 3.0;
            assert_close(out[i], avg, 1e-12, 1e-12);
        }
        let wsum: f64 = w.iter().sum();
        assert!((wsum - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn cagrad_identical_gradients_scale_by_one_plus_c() {
        let g = vec![0.3, -0.7, 1.1];
        let grads = vec![g.clone(), g.clone(), g.clone()];
        let c = 0.4;
        let (_, out) = cagrad(&grads, c).unwrap();
        for (o, &x) in out.iter().zip(&g) {
            assert_close(*o, (1.0 + c) * x, 1e-9, 1e-12);
        }
    }

    fn cagrad_inner_objective(grads: &[Vec<f64>], w: &[f64], c: f64) -> f64 {
        let t = grads.len();
        let dim = grads[0].len();
        let mut g0 = vec![0.0; dim];
        for g in grads {
            for (o, &x) in g0.iter_mut().zip(g) {
                *o += x / t as f64;
            }
        }
        let mut gw = vec![0.0; dim];
        for (i, g) in grads.iter().enumerate() {
            for (o, &x) in gw.iter_mut().zip(g) {
                *o += w[i] * x;
            }
        }
        let phi_sqrt = c * norm(&g0);
        dot(&gw, &g0) + phi_sqrt * norm(&gw)
    }

    #[test]
    fn cagrad_inner_solution_matches_grid_search() {
        for seed in 0..8u64 {
            let grads = random_grads(2, 3, 500 + seed);
            let c = 0.4;
            let (w, _) = cagrad(&grads, c).unwrap();
            let ours = cagrad_inner_objective(&grads, &w, c);
            let mut best = f64::INFINITY;
            let mut s = 0.0;
            while s <= 1.0 + 1e-12 {
                best = best.min(cagrad_inner_objective(&grads, &[s, 1.0 - s], c));
                s += 1e-3;
            }
            assert!(ours <= best + 1e-3, "seed {seed}: {ours} vs grid {best}");
        }
    }

    #[test]
    fn mto_state_defaults_are_per_method_ready() {
        let state = MtoState::<f64>::new(Method::Dwa, 3).unwrap();
        assert_eq!(state.log_variances, vec![0.0; 3]);
        assert_eq!(state.gradnorm_weights, vec![1.0; 3]);
        assert!(state.initial_losses.is_none());
        assert!(MtoState::<f64>::new(Method::Ew, 0).is_err());
    }
}
