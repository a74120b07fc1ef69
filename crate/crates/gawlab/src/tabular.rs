//! Value iteration on finite MDPs under the activated weighting operator,
//! with a per-iteration convergence gap bound.
//!
//! The backup replaces the max over actions with the activated average:
//!
//! ```text
//!     V_{t+1}(s) = GA_a( r(s,a) + gamma * sum_{s'} P(s'|s,a) V_t(s') )
//! ```
//!
//! The gap to the max-operator fixed point `V*` then satisfies, for every
//! feasible envelope rate beta and slack epsilon,
//!
//! ```text
//!     ||V_t - V*||_inf <= gamma^t ||V_0 - V*||_inf + N(t)
//!     N(t) = T*/(1-gamma) + (beta*eps + |A| - 1) / ((1-gamma) beta)
//!            - sum_{k=1..t} gamma^(t-k) min_s ln F(Q_k, s, eps) / beta
//! ```
//!
//! where `F` counts near-max actions of the iterate `Q_k` and `T*` is the
//! activation's worst excess over the exponential envelope on the global
//! Q-range `[-r_max/(1-gamma), r_max/(1-gamma)]`.
//! [`convergence_bound_report`] evaluates both sides at every iteration.

use crate::activation::{ActivationError, ActivationSpec};
use crate::operator::{self, BoundParams, KahanSum, OperatorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("value iteration failed to converge within {max_iters} iterations (residual {residual})")]
    NonConvergence { max_iters: usize, residual: f64 },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
}

pub const VI_MAX_ITERS: usize = 1_000_000;
pub const VI_TOL: f64 = 1e-10;

/// Finite MDP: dense transition table `P(s'|s,a)`, bounded rewards, discount
/// in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
    pub gamma: f64,
    pub r_max: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self, TabularError> {
        if n_states == 0 || n_actions == 0 {
            return Err(TabularError::InvalidMdp("need at least one state and action".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(TabularError::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(TabularError::InvalidMdp(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TabularError::InvalidMdp(format!("gamma must be in [0, 1), got {gamma}")));
        }
        if !(r_max > 0.0) {
            return Err(TabularError::InvalidMdp(format!("r_max must be positive, got {r_max}")));
        }
        let mdp = Self { n_states, n_actions, transition, reward, gamma, r_max };
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = mdp.transition_row(s, a);
                let mut sum = KahanSum::new();
                for &p in row {
                    if !(0.0..=1.0 + 1e-12).contains(&p) {
                        return Err(TabularError::InvalidMdp(format!(
                            "transition probability {p} out of range at (s={s}, a={a})"
                        )));
                    }
                    sum.add(p);
                }
                if (sum.value() - 1.0).abs() > 1e-12 {
                    return Err(TabularError::InvalidMdp(format!(
                        "transition row (s={s}, a={a}) sums to {}",
                        sum.value()
                    )));
                }
                let r = mdp.reward[s * n_actions + a];
                if !r.is_finite() || r.abs() > r_max {
                    return Err(TabularError::InvalidMdp(format!(
                        "reward {r} at (s={s}, a={a}) exceeds r_max = {r_max}"
                    )));
                }
            }
        }
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    /// `|V|` can never exceed this for any policy.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// One-step action values `Q(s, a) = r(s,a) + gamma * sum_s' P V(s')`
    /// for every state, row-major `[s][a]`.
    pub fn action_values(&self, values: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let mut acc = KahanSum::new();
                for (s2, &p) in self.transition_row(s, a).iter().enumerate() {
                    acc.add(p * values[s2]);
                }
                q[s * self.n_actions + a] = self.reward(s, a) + self.gamma * acc.value();
            }
        }
        q
    }

    /// Random dense MDP with normalized random transition rows and rewards in
    /// `[-r_max, r_max]`. Used by the randomized suites.
    pub fn random(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        r_max: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.random_range(1e-3..1.0f64)).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
            // Force exact row sums so validation's 1e-12 budget is never spent
            // on generator roundoff.
            let correction: f64 = 1.0 - row.iter().sum::<f64>();
            row[0] += correction;
            transition.extend(row);
        }
        let reward: Vec<f64> = (0..n_states * n_actions)
            .map(|_| rng.random_range(-r_max..=r_max))
            .collect();
        Self::new(n_states, n_actions, transition, reward, gamma, r_max)
            .expect("randomly generated MDP must validate")
    }
}

/// Max-operator value iteration to sup-norm residual `tol`.
pub fn optimal_values(mdp: &TabularMdp, tol: f64) -> Result<Vec<f64>, TabularError> {
    if !(tol > 0.0) {
        return Err(TabularError::InvalidMdp(format!("tol must be positive, got {tol}")));
    }
    let mut values = vec![0.0; mdp.n_states()];
    let mut residual = f64::INFINITY;
    for _ in 0..VI_MAX_ITERS {
        let q = mdp.action_values(&values);
        let mut next = vec![f64::NEG_INFINITY; mdp.n_states()];
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                next[s] = next[s].max(q[s * mdp.n_actions() + a]);
            }
        }
        residual = values
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if residual <= tol {
            debug_assert!(values.iter().all(|v| v.abs() <= mdp.value_bound() + tol));
            return Ok(values);
        }
    }
    Err(TabularError::NonConvergence { max_iters: VI_MAX_ITERS, residual })
}

/// Iterates of activated value iteration plus the sup-norm gap to the
/// max-operator fixed point at every step. `values[0]` is the zero start.
#[derive(Debug, Clone)]
pub struct ValueTrace {
    pub values: Vec<Vec<f64>>,
    pub gaps: Vec<f64>,
    pub optimal: Vec<f64>,
}

impl ValueTrace {
    pub fn iterations(&self) -> usize {
        self.values.len() - 1
    }
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Value iteration with the activated backup, recording the gap to
/// [`optimal_values`] at every iteration. Polynomial activations use the
/// fixed translation from [`operator::value_bound_shift`] so the effective
/// weighting is a single function across all iterates.
pub fn value_iterate_ga(
    mdp: &TabularMdp,
    spec: &ActivationSpec,
    iters: usize,
) -> Result<ValueTrace, TabularError> {
    spec.validate()?;
    let optimal = optimal_values(mdp, VI_TOL)?;
    let shift = operator::value_bound_shift(spec, mdp.r_max, mdp.gamma);

    let mut values = vec![0.0; mdp.n_states()];
    let mut trace = ValueTrace {
        values: vec![values.clone()],
        gaps: vec![sup_gap(&values, &optimal)],
        optimal,
    };
    for _ in 0..iters {
        let q = mdp.action_values(&values);
        let mut next = vec![0.0; mdp.n_states()];
        for s in 0..mdp.n_states() {
            let row = &q[s * mdp.n_actions()..(s + 1) * mdp.n_actions()];
            let landscape = crate::QLandscape::from_qs(row).map_err(OperatorError::from)?;
            next[s] = operator::ga_discrete_shifted(&landscape, spec, shift)?;
        }
        values = next;
        trace.gaps.push(sup_gap(&values, &trace.optimal));
        trace.values.push(values.clone());
    }
    Ok(trace)
}

/// Per-iteration evaluation of the convergence gap bound.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// `||V_t - V*||_inf` for t = 1..=iterations.
    pub lhs: Vec<f64>,
    /// Bound at the same iterations.
    pub rhs: Vec<f64>,
    pub ok: bool,
}

/// Default near-max slack: a tenth of the largest per-state spread of the
/// optimal action values, floored away from zero.
pub fn default_epsilon(mdp: &TabularMdp) -> Result<f64, TabularError> {
    let v_star = optimal_values(mdp, VI_TOL)?;
    let q = mdp.action_values(&v_star);
    let mut spread: f64 = 0.0;
    for s in 0..mdp.n_states() {
        let row = &q[s * mdp.n_actions()..(s + 1) * mdp.n_actions()];
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        spread = spread.max(hi - lo);
    }
    Ok((0.1 * spread).max(1e-6))
}

/// Evaluate both sides of the convergence gap bound along a trace produced by
/// [`value_iterate_ga`] on the same MDP and activation.
///
/// The near-max count `F` at step k is taken from the greedy sets of the
/// iterate `Q_k` (the action values that produced `V_k`), under the counting
/// measure. `T*` and the feasibility of `params.beta` are checked on the
/// global Q-range grid.
pub fn convergence_bound_report(
    trace: &ValueTrace,
    mdp: &TabularMdp,
    spec: &ActivationSpec,
    params: &BoundParams,
) -> Result<BoundReport, TabularError> {
    spec.validate()?;
    if !(params.epsilon > 0.0) || !(params.beta > 0.0) {
        return Err(TabularError::InvalidMdp(format!(
            "bound params require epsilon > 0 and beta > 0, got {params:?}"
        )));
    }
    let bound = mdp.value_bound();
    let shift = operator::value_bound_shift(spec, mdp.r_max, mdp.gamma);
    let (t_min, t_star) = excess_range(spec, shift, -bound, bound, params.beta)?;
    if t_min < -1e-9 {
        return Err(OperatorError::InfeasibleBeta { beta: params.beta, at_q: f64::NAN }.into());
    }

    let n_actions = mdp.n_actions() as f64;
    let gamma = mdp.gamma;
    let iters = trace.iterations();

    // min_s ln F(Q_k, s, eps) for each k, where Q_k produced V_k.
    let mut min_ln_f = Vec::with_capacity(iters);
    for k in 1..=iters {
        let q = mdp.action_values(&trace.values[k - 1]);
        let mut state_min = f64::INFINITY;
        for s in 0..mdp.n_states() {
            let row = &q[s * mdp.n_actions()..(s + 1) * mdp.n_actions()];
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let count = row.iter().filter(|&&v| v >= hi - params.epsilon).count();
            state_min = state_min.min((count as f64).ln());
        }
        min_ln_f.push(state_min);
    }

    let constant = t_star / (1.0 - gamma)
        + (params.beta * params.epsilon + n_actions - 1.0) / ((1.0 - gamma) * params.beta);

    let mut lhs = Vec::with_capacity(iters);
    let mut rhs = Vec::with_capacity(iters);
    let mut ok = true;
    for t in 1..=iters {
        let mut discounted = KahanSum::new();
        for k in 1..=t {
            discounted.add(gamma.powi((t - k) as i32) * min_ln_f[k - 1]);
        }
        let r = gamma.powi(t as i32) * trace.gaps[0] + constant - discounted.value() / params.beta;
        let l = trace.gaps[t];
        if l > r + 1e-9 {
            ok = false;
        }
        lhs.push(l);
        rhs.push(r);
    }
    Ok(BoundReport { lhs, rhs, ok })
}

/// (min, max) of `(1/beta) ln g(q + shift) - q` over a 10^4-point grid.
fn excess_range(
    spec: &ActivationSpec,
    shift: f64,
    lo: f64,
    hi: f64,
    beta: f64,
) -> Result<(f64, f64), TabularError> {
    let points = 10_000;
    let step = (hi - lo) / (points - 1) as f64;
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for i in 0..points {
        let q = lo + step * i as f64;
        let lg = spec.log_eval(q + shift)?;
        if lg.is_nan() {
            return Err(OperatorError::NegativeWeight { q, weight: f64::NAN }.into());
        }
        let t = lg / beta - q;
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    Ok((t_min, t_max))
}

/// Feasible envelope rate over the MDP's global Q-range, if one exists.
///
/// For polynomial activations the fixed translation equals `1 - (-bound)`,
/// which is exactly the landscape rule applied at the range's lower end, so
/// [`operator::feasible_beta`] over `[-bound, bound]` probes the same
/// effective function the bound report evaluates.
pub fn feasible_beta_for_mdp(mdp: &TabularMdp, spec: &ActivationSpec) -> Option<f64> {
    let bound = mdp.value_bound();
    operator::feasible_beta(spec, -bound, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn single_state_mdp(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], gamma, reward.abs().max(1.0)).unwrap()
    }

    #[test]
    fn geometric_series_fixed_point() {
        let mdp = single_state_mdp(1.0, 0.5);
        let v = optimal_values(&mdp, 1e-12).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![
                1.0, 0.0, 0.5, 0.5, // s0
                0.3, 0.7, 0.0, 1.0, // s1
            ],
            vec![0.0; 4],
            0.9,
            1.0,
        )
        .unwrap();
        let v = optimal_values(&mdp, 1e-12).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let err = TabularMdp::new(1, 1, vec![0.9], vec![0.0], 0.9, 1.0).unwrap_err();
        assert!(matches!(err, TabularError::InvalidMdp(_)));
        let err = TabularMdp::new(1, 1, vec![1.0], vec![2.0], 0.9, 1.0).unwrap_err();
        assert!(matches!(err, TabularError::InvalidMdp(_)));
    }

    #[test]
    fn constant_activation_matches_mean_backup() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = TabularMdp::random(4, 3, 0.9, 1.0, &mut rng);
        let trace = value_iterate_ga(&mdp, &ActivationSpec::constant(1.0), 30).unwrap();

        // Independent mean-operator iteration.
        let mut values = vec![0.0; mdp.n_states()];
        for _ in 0..30 {
            let q = mdp.action_values(&values);
            values = (0..mdp.n_states())
                .map(|s| {
                    q[s * mdp.n_actions()..(s + 1) * mdp.n_actions()].iter().sum::<f64>()
                        / mdp.n_actions() as f64
                })
                .collect();
        }
        let last = trace.values.last().unwrap();
        for (a, b) in last.iter().zip(&values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sharp_exponential_tracks_max_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Regenerate until the optimal action values are spread enough for the
        // sharp operator to isolate the max.
        let mdp = loop {
            let mdp = TabularMdp::random(5, 3, 0.9, 1.0, &mut rng);
            let v = optimal_values(&mdp, 1e-12).unwrap();
            let q = mdp.action_values(&v);
            let spread = (0..mdp.n_states())
                .map(|s| {
                    let row = &q[s * 3..(s + 1) * 3];
                    row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
                        - row.iter().fold(f64::INFINITY, |m, &x| m.min(x))
                })
                .fold(f64::INFINITY, f64::min);
            if spread >= 0.1 {
                break mdp;
            }
        };
        let trace = value_iterate_ga(&mdp, &ActivationSpec::exponential(1e3, 0.0), 400).unwrap();
        assert!(
            *trace.gaps.last().unwrap() <= 1e-3,
            "final gap {} too large",
            trace.gaps.last().unwrap()
        );
    }

    #[test]
    fn iterates_respect_value_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = TabularMdp::random(6, 4, 0.9, 1.0, &mut rng);
        for spec in [
            ActivationSpec::polynomial(0.05, 2.0, 2.0),
            ActivationSpec::exponential(2.0, 0.0),
            ActivationSpec::constant(1.0),
        ] {
            let trace = value_iterate_ga(&mdp, &spec, 200).unwrap();
            let bound = mdp.value_bound() + 1e-9;
            for v in &trace.values {
                assert!(v.iter().all(|x| x.abs() <= bound));
            }
        }
    }

    #[test]
    fn constant_reward_mdp_bound_is_exact_geometric_decay() {
        // All rewards equal: every Q-row is constant, the activated backup is
        // exact, and the gap contracts by gamma each step.
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            vec![0.7; 4],
            0.9,
            1.0,
        )
        .unwrap();
        let spec = ActivationSpec::exponential(1.0, 0.0);
        let trace = value_iterate_ga(&mdp, &spec, 50).unwrap();
        for t in 1..=50usize {
            let expected = 0.9f64.powi(t as i32) * trace.gaps[0];
            assert!((trace.gaps[t] - expected).abs() < 1e-8);
        }
        let beta = feasible_beta_for_mdp(&mdp, &spec).unwrap();
        let report = convergence_bound_report(
            &trace,
            &mdp,
            &spec,
            &BoundParams::new(default_epsilon(&mdp).unwrap(), beta),
        )
        .unwrap();
        assert!(report.ok);
    }

    #[test]
    fn random_mdp_bound_report_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mdp = TabularMdp::random(5, 4, 0.9, 1.0, &mut rng);
        let spec = ActivationSpec::exponential(10.0, 0.0);
        let trace = value_iterate_ga(&mdp, &spec, 120).unwrap();
        let report =
            convergence_bound_report(&trace, &mdp, &spec, &BoundParams::new(0.1, 10.0)).unwrap();
        assert!(report.ok);
        assert_eq!(report.lhs.len(), 120);
    }

    #[test]
    fn long_run_gap_stabilizes_below_asymptote() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mdp = TabularMdp::random(5, 4, 0.9, 1.0, &mut rng);
        let spec = ActivationSpec::exponential(10.0, 0.0);
        let trace = value_iterate_ga(&mdp, &spec, 400).unwrap();
        // Asymptote of the bound: (T* + eps)/(1-gamma) + (|A|-1)/((1-gamma) beta).
        let eps = 0.1;
        let asymptote =
            eps / (1.0 - mdp.gamma) + (mdp.n_actions() as f64 - 1.0) / ((1.0 - mdp.gamma) * 10.0);
        assert!(*trace.gaps.last().unwrap() <= asymptote);
    }
}
