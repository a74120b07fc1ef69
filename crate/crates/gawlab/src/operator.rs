//! The generalized-activated weighting operator, its Monte-Carlo
//! importance-sampled estimator, and the machinery that certifies its
//! distance to the max operator.
//!
//! The discrete operator over a landscape with Q-values `Q_i`, weights
//! `mu_i` and activation `g` is
//!
//! ```text
//!     GA(Q) = sum_i g(Q_i) Q_i mu_i / sum_j g(Q_j) mu_j
//! ```
//!
//! It always lies in `[min Q, max Q]`. With a constant activation it is the
//! measure-weighted mean; with `exp(beta * q)` it is the softmax operator and
//! sharpens toward the max as beta grows.
//!
//! # Numerical notes
//!
//! Exponential-family weights are evaluated in log space and rescaled by the
//! largest log weight (the ratio is invariant under rescaling), so arbitrarily
//! large `beta * q` products never overflow. All other families are evaluated
//! directly with compensated (Kahan) accumulation.
//!
//! Polynomial activations are only monotone on positive inputs. Operator
//! entry points translate the Q-values by [`polynomial_shift`] (landscapes)
//! or [`value_bound_shift`] (value iteration and agents, where the Q-range
//! bound `r_max / (1 - gamma)` is known) before weighting, which keeps the
//! base strictly positive without changing which values are averaged.

use crate::activation::{ActivationError, ActivationFamily, ActivationSpec};
use crate::landscape::{LandscapeError, QLandscape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error("weight normalizer underflowed to zero")]
    ZeroNormalizer,
    #[error("activation produced a negative weight {weight} at q = {q}")]
    NegativeWeight { q: f64, weight: f64 },
    #[error("degenerate proposal: {0}")]
    DegenerateProposal(String),
    #[error("beta = {beta} infeasible: ln g(q) < beta * q at q = {at_q}")]
    InfeasibleBeta { beta: f64, at_q: f64 },
    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
}

/// Compensated accumulator (Neumaier variant). Deterministic for a fixed
/// summation order, which every operator entry point uses.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Translation applied before a polynomial activation sees a landscape whose
/// minimum is non-positive: `1 - min_q`, so the smallest base maps to exactly
/// 1. Strictly positive landscapes are evaluated in place. Other families are
/// monotone on all of R and never shifted.
pub fn polynomial_shift(spec: &ActivationSpec, min_q: f64) -> f64 {
    if spec.family == ActivationFamily::Polynomial && min_q <= 0.0 {
        1.0 - min_q
    } else {
        0.0
    }
}

/// Fixed translation for contexts with a known value bound: Q-values are
/// confined to `[-r_max/(1-gamma), r_max/(1-gamma)]`, so shifting by that
/// bound plus one keeps every polynomial base at or above one, independent of
/// the particular batch or iterate.
pub fn value_bound_shift(spec: &ActivationSpec, r_max: f64, gamma: f64) -> f64 {
    if spec.family == ActivationFamily::Polynomial {
        r_max / (1.0 - gamma) + 1.0
    } else {
        0.0
    }
}

/// Core weighted-average kernel: `sum w_i q_i mu_i / sum w_i mu_i` with
/// `w_i = g(q_i + shift)`, evaluated stably and clamped into `[min q, max q]`.
fn activated_average(
    qs: &[f64],
    measure: &[f64],
    spec: &ActivationSpec,
    shift: f64,
) -> Result<f64, OperatorError> {
    debug_assert_eq!(qs.len(), measure.len());
    if qs.is_empty() {
        return Err(LandscapeError::Empty.into());
    }

    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    if spec.family == ActivationFamily::Exponential {
        // Log-domain: rescale by the max log-weight, which cancels in the ratio.
        let mut max_lw = f64::NEG_INFINITY;
        let mut lws = Vec::with_capacity(qs.len());
        for &q in qs {
            let lw = spec.log_eval(q + shift)?;
            max_lw = max_lw.max(lw);
            lws.push(lw);
        }
        if !max_lw.is_finite() {
            return Err(OperatorError::NonFinite { what: "log weight", value: max_lw });
        }
        for ((&q, &mu), lw) in qs.iter().zip(measure).zip(lws) {
            let w = (lw - max_lw).exp();
            num.add(w * q * mu);
            den.add(w * mu);
        }
    } else {
        for (&q, &mu) in qs.iter().zip(measure) {
            let w = spec.eval(q + shift)?;
            if !w.is_finite() {
                return Err(OperatorError::NonFinite { what: "weight", value: w });
            }
            if w < 0.0 {
                return Err(OperatorError::NegativeWeight { q, weight: w });
            }
            num.add(w * q * mu);
            den.add(w * mu);
        }
    }

    let den = den.value();
    if !(den > 0.0) {
        return Err(OperatorError::ZeroNormalizer);
    }
    let raw = num.value() / den;
    let lo = qs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(raw.clamp(lo, hi))
}

/// Activation-weighted average of a landscape's Q-values.
///
/// Polynomial activations are translated per [`polynomial_shift`]; use
/// [`ga_discrete_shifted`] to pin an explicit translation.
pub fn ga_discrete(landscape: &QLandscape, spec: &ActivationSpec) -> Result<f64, OperatorError> {
    spec.validate()?;
    let shift = polynomial_shift(spec, landscape.min_q());
    activated_average(landscape.qs(), landscape.measure(), spec, shift)
}

/// As [`ga_discrete`] with a caller-chosen translation (applied to the
/// weighting input only; the averaged values are unchanged).
pub fn ga_discrete_shifted(
    landscape: &QLandscape,
    spec: &ActivationSpec,
    shift: f64,
) -> Result<f64, OperatorError> {
    spec.validate()?;
    activated_average(landscape.qs(), landscape.measure(), spec, shift)
}

/// Softmax operator: the exponential-family special case with zero bias.
pub fn softmax(landscape: &QLandscape, beta: f64) -> Result<f64, OperatorError> {
    ga_discrete(landscape, &ActivationSpec::exponential(beta, 0.0))
}

/// `(1/beta) * ln sum_i g(Q_i) mu_i`, the log-sum-g operator generalizing
/// log-sum-exp. Used by the gap-bound machinery.
pub fn log_sum_g(
    landscape: &QLandscape,
    spec: &ActivationSpec,
    beta: f64,
) -> Result<f64, OperatorError> {
    spec.validate()?;
    if !(beta > 0.0) {
        return Err(ActivationError::InvalidSpec(format!("log_sum_g requires beta > 0, got {beta}")).into());
    }
    if spec.family == ActivationFamily::Exponential {
        let mut max_lw = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(landscape.len());
        for (&q, &mu) in landscape.qs().iter().zip(landscape.measure()) {
            let lw = spec.log_eval(q)? + mu.ln();
            max_lw = max_lw.max(lw);
            terms.push(lw);
        }
        let mut acc = KahanSum::new();
        for lw in terms {
            acc.add((lw - max_lw).exp());
        }
        let total = acc.value();
        if !(total > 0.0) {
            return Err(OperatorError::ZeroNormalizer);
        }
        Ok((max_lw + total.ln()) / beta)
    } else {
        let mut acc = KahanSum::new();
        for (&q, &mu) in landscape.qs().iter().zip(landscape.measure()) {
            let w = spec.eval(q)?;
            if w < 0.0 {
                return Err(OperatorError::NegativeWeight { q, weight: w });
            }
            acc.add(w * mu);
        }
        let total = acc.value();
        if !(total > 0.0) {
            return Err(OperatorError::ZeroNormalizer);
        }
        Ok(total.ln() / beta)
    }
}

/// Parameters of the max-gap bound: the near-max slack `epsilon` and the
/// exponential-envelope rate `beta` (feasible when `g(q) >= exp(beta * q)`
/// across the relevant Q-range).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub epsilon: f64,
    pub beta: f64,
}

impl BoundParams {
    pub fn new(epsilon: f64, beta: f64) -> Self {
        Self { epsilon, beta }
    }
}

/// Result of [`operator_gap_bound`]: the realized gap `max Q - GA(Q)`, the
/// certified bound, and its two data-dependent ingredients.
#[derive(Debug, Clone, Copy)]
pub struct GapBound {
    /// `max Q - GA(Q)`.
    pub distance: f64,
    /// `epsilon + (action_volume - 1 + ln F) / beta + excess_max`.
    pub bound: f64,
    /// `F`: total measure of entries within `epsilon` of the max (ties included).
    pub near_max_measure: f64,
    /// Largest value of `(1/beta) ln g(q) - q` over the Q-range grid; zero for
    /// the exact exponential envelope, positive otherwise.
    pub excess_max: f64,
}

impl GapBound {
    /// `0 <= distance <= bound`, with a small absolute slack for roundoff.
    pub fn holds(&self) -> bool {
        self.distance >= -1e-9 && self.distance <= self.bound + 1e-9
    }
}

const EXCESS_GRID_POINTS: usize = 10_000;

/// Scan `T(q) = (1/beta) ln g(q + shift) - q` over a uniform grid on
/// `[lo, hi]`, returning (min, max). Feasibility of `beta` is `min >= 0`.
fn excess_scan(
    spec: &ActivationSpec,
    shift: f64,
    lo: f64,
    hi: f64,
    beta: f64,
) -> Result<(f64, f64, f64), OperatorError> {
    let points = if hi > lo { EXCESS_GRID_POINTS } else { 1 };
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    let mut arg_min = lo;
    for i in 0..points {
        let q = lo + step * i as f64;
        let lg = spec.log_eval(q + shift)?;
        if lg.is_nan() {
            return Err(OperatorError::NegativeWeight { q, weight: f64::NAN });
        }
        let t = lg / beta - q;
        if t < t_min {
            t_min = t;
            arg_min = q;
        }
        t_max = t_max.max(t);
    }
    Ok((t_min, t_max, arg_min))
}

/// Distance between the max operator and the activated weighting operator,
/// together with its certified bound
///
/// ```text
///     max Q - GA(Q) <= epsilon + (|A| - 1 + ln F) / beta + T*
/// ```
///
/// where `|A|` is the landscape's action volume, `F` the measure of the
/// near-max set `{q : q >= max Q - epsilon}` and `T*` the largest excess of
/// `(1/beta) ln g` over the identity on the Q-range. Errors with
/// [`OperatorError::InfeasibleBeta`] when `g` fails to dominate the
/// exponential envelope `exp(beta * q)` somewhere on the range.
pub fn operator_gap_bound(
    landscape: &QLandscape,
    spec: &ActivationSpec,
    params: &BoundParams,
) -> Result<GapBound, OperatorError> {
    spec.validate()?;
    if !(params.epsilon > 0.0) || !(params.beta > 0.0) {
        return Err(ActivationError::InvalidSpec(format!(
            "bound params require epsilon > 0 and beta > 0, got epsilon={} beta={}",
            params.epsilon, params.beta
        ))
        .into());
    }
    let min_q = landscape.min_q();
    let max_q = landscape.max_q();
    let shift = polynomial_shift(spec, min_q);

    let (t_min, t_max, arg_min) = excess_scan(spec, shift, min_q, max_q, params.beta)?;
    if t_min < -1e-9 {
        return Err(OperatorError::InfeasibleBeta { beta: params.beta, at_q: arg_min });
    }

    let ga = activated_average(landscape.qs(), landscape.measure(), spec, shift)?;
    let distance = max_q - ga;

    let threshold = max_q - params.epsilon;
    let mut near = KahanSum::new();
    for (&q, &mu) in landscape.qs().iter().zip(landscape.measure()) {
        if q >= threshold {
            near.add(mu);
        }
    }
    let near_max_measure = near.value();
    let bound = params.epsilon
        + (landscape.action_volume() - 1.0 + near_max_measure.ln()) / params.beta
        + t_max;

    Ok(GapBound { distance, bound, near_max_measure, excess_max: t_max })
}

/// Largest `beta` (up to a safety factor) for which `g(q) >= exp(beta * q)`
/// holds across `[lo, hi]`, or `None` when no positive rate works. The
/// returned value is re-verified on the bound's own grid before use.
pub fn feasible_beta(spec: &ActivationSpec, lo: f64, hi: f64) -> Option<f64> {
    let shift = polynomial_shift(spec, lo);
    let points = 1001;
    let step = if hi > lo { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    let mut upper = f64::INFINITY;
    let mut lower: f64 = 0.0;
    for i in 0..points {
        let q = lo + step * i as f64;
        let lg = spec.log_eval(q + shift).ok()?;
        if lg.is_nan() {
            return None;
        }
        if q.abs() < 1e-12 {
            // Need g(0) >= 1.
            if lg < -1e-12 {
                return None;
            }
        } else if q > 0.0 {
            upper = upper.min(lg / q);
        } else {
            lower = lower.max(lg / q);
        }
        if hi <= lo {
            break;
        }
    }
    if !(upper > 0.0) || lower > upper + 1e-12 {
        return None;
    }
    // For the exact exponential envelope the interval collapses to a point.
    let candidate = if upper.is_finite() {
        lower.max(0.0) + 0.9 * (upper - lower.max(0.0))
    } else {
        (lower * 2.0).max(1.0)
    };
    if !(candidate > 0.0) {
        return None;
    }
    // Confirm on the fine grid used by the bound itself.
    match excess_scan(spec, shift, lo, hi, candidate) {
        Ok((t_min, _, _)) if t_min >= -1e-9 => Some(candidate),
        _ => {
            let base = lower.max(0.0);
            let fallback = base + 0.5 * (upper.min(candidate) - base);
            match excess_scan(spec, shift, lo, hi, fallback) {
                Ok((t_min, _, _)) if fallback > 0.0 && t_min >= -1e-9 => Some(fallback),
                _ => None,
            }
        }
    }
}

/// Gaussian proposal for the importance-sampled estimator: `count` noises
/// with standard deviation `std` truncated to `[-clip, clip]`, added to
/// `mean` and clamped into the action box `[low, high]`.
#[derive(Debug, Clone)]
pub struct GaussianProposal {
    pub mean: Vec<f64>,
    pub std: f64,
    pub clip: f64,
    pub count: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl GaussianProposal {
    pub fn validate(&self) -> Result<(), OperatorError> {
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(OperatorError::DegenerateProposal(format!(
                "std must be positive and finite, got {}",
                self.std
            )));
        }
        if !(self.clip > 0.0) {
            return Err(OperatorError::DegenerateProposal(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        if self.count == 0 {
            return Err(OperatorError::DegenerateProposal("count must be >= 1".into()));
        }
        if self.low.len() != self.mean.len() || self.high.len() != self.mean.len() {
            return Err(OperatorError::DegenerateProposal(format!(
                "box dims ({}, {}) do not match action dim {}",
                self.low.len(),
                self.high.len(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Noise block: `count * dim` truncated-Gaussian draws (row-major), shared
/// across a batch when agents compute importance-sampled targets.
pub fn sample_noise_block(
    std: f64,
    clip: f64,
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, OperatorError> {
    let normal = Normal::new(0.0, std)
        .map_err(|e| OperatorError::DegenerateProposal(e.to_string()))?;
    let mut out = Vec::with_capacity(count * dim);
    for _ in 0..count * dim {
        // Truncation by rejection keeps the estimator an unbiased quadrature
        // of the support; with the default clip = 2.5 std the acceptance rate
        // is ~99%.
        let mut accepted = None;
        for _ in 0..10_000 {
            let z: f64 = normal.sample(rng);
            if z.abs() <= clip {
                accepted = Some(z);
                break;
            }
        }
        match accepted {
            Some(z) => out.push(z),
            None => {
                return Err(OperatorError::DegenerateProposal(
                    "clip is too deep in the Gaussian tail to sample".into(),
                ))
            }
        }
    }
    Ok(out)
}

/// Evaluated proposal draw: actions (row-major `count * dim`) and the log
/// density of each draw's effective noise under the truncated Gaussian
/// (up to the truncation constant, which cancels in the weighted ratio).
#[derive(Debug, Clone)]
pub struct ProposalDraw {
    pub actions: Vec<f64>,
    pub log_density: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

/// Combine a shared noise block with a proposal center, clamping into the box
/// and evaluating the per-draw log density at the effective (post-clamp) noise.
pub fn proposal_from_noise(
    proposal: &GaussianProposal,
    noise: &[f64],
) -> Result<ProposalDraw, OperatorError> {
    proposal.validate()?;
    let dim = proposal.dim();
    let count = proposal.count;
    debug_assert_eq!(noise.len(), count * dim);
    let mut actions = Vec::with_capacity(count * dim);
    let mut log_density = Vec::with_capacity(count);
    let inv_var = 1.0 / (proposal.std * proposal.std);
    for n in 0..count {
        let mut lp = 0.0;
        for d in 0..dim {
            let a = (proposal.mean[d] + noise[n * dim + d])
                .clamp(proposal.low[d], proposal.high[d]);
            let eff = a - proposal.mean[d];
            lp += -0.5 * eff * eff * inv_var;
            actions.push(a);
        }
        log_density.push(lp);
    }
    Ok(ProposalDraw { actions, log_density, dim, count })
}

/// Weighted ratio over evaluated samples: `sum g(q_i+shift) q_i / p_i` over
/// `sum g(q_i+shift) / p_i`, with the same stability treatment as the
/// discrete operator. Clamped into the sampled Q-range.
pub fn ga_from_samples(
    qs: &[f64],
    log_density: &[f64],
    spec: &ActivationSpec,
    shift: f64,
) -> Result<f64, OperatorError> {
    debug_assert_eq!(qs.len(), log_density.len());
    if qs.is_empty() {
        return Err(LandscapeError::Empty.into());
    }
    let max_lp = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Inverse-density measure, rescaled so the largest density maps to 1.
    let measure: Vec<f64> = log_density.iter().map(|lp| (max_lp - lp).exp()).collect();
    let mut min_q = f64::INFINITY;
    for &q in qs {
        if !q.is_finite() {
            return Err(OperatorError::NonFinite { what: "sampled q value", value: q });
        }
        min_q = min_q.min(q);
    }
    let shift = if spec.family == ActivationFamily::Polynomial {
        shift.max(polynomial_shift(spec, min_q))
    } else {
        shift
    };
    activated_average(qs, &measure, spec, shift)
}

/// Monte-Carlo importance-sampled estimate of the operator over the
/// proposal's support: draws the noise block from `rng_seed`, evaluates the
/// critic at each clamped action and returns the weighted ratio. The result
/// is a deterministic function of its arguments.
pub fn ga_importance_sampled<F>(
    critic: F,
    proposal: &GaussianProposal,
    spec: &ActivationSpec,
    rng_seed: u64,
) -> Result<f64, OperatorError>
where
    F: Fn(&[f64]) -> f64,
{
    spec.validate()?;
    proposal.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = sample_noise_block(proposal.std, proposal.clip, proposal.count, proposal.dim(), &mut rng)?;
    let draw = proposal_from_noise(proposal, &noise)?;
    let qs: Vec<f64> = (0..draw.count)
        .map(|n| critic(&draw.actions[n * draw.dim..(n + 1) * draw.dim]))
        .collect();
    ga_from_samples(&qs, &draw.log_density, spec, 0.0)
}

/// Uniform random draw inside a box, used for warmup exploration.
pub fn uniform_in_box(low: &[f64], high: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    low.iter()
        .zip(high)
        .map(|(&lo, &hi)| rng.random_range(lo..=hi))
        .collect()
}
