//! Bias measurement during training and standalone synthetic bias-ordering
//! studies.
//!
//! The training-time probe compares the critic's value estimate at states
//! sampled from the replay buffer against true values obtained by rolling
//! out the current deterministic policy and averaging discounted returns.
//!
//! The synthetic study isolates the operator effect: a fixed true landscape
//! is corrupted with i.i.d. Gaussian noise (the stand-in for approximation
//! error), and three estimators of its max are compared — the max of one
//! noisy copy (the overestimating baseline), the activated average of one
//! noisy copy, and the activated average of the pointwise minimum of two
//! independent noisy copies. Their expected biases order as
//!
//! ```text
//!     bias(GA of min pair) <= bias(GA of single) <= bias(max of single)
//! ```
//!
//! for activations that pass the weighting condition; the study verifies the
//! ordering against paired Monte-Carlo standard errors.

use crate::activation::ActivationSpec;
use crate::agents::{Agent, ReplayBuffer};
use crate::envs::{true_q_rollout, Env};
use crate::operator::{self, KahanSum, OperatorError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One bias measurement: estimate, rollout truth, and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSample {
    pub step: u64,
    pub estimate: f64,
    pub true_value: f64,
    pub bias: f64,
}

pub type BiasTrace = Vec<BiasSample>;

/// Probe an agent's value bias: mean critic-0 prediction at `(s, pi_0(s))`
/// over `n_states` buffer states, against the rollout truth under the
/// current deterministic policy. The runner calls this at its configured
/// cadence (10^4 steps by default) to build a [`BiasTrace`].
pub fn bias_probe(
    agent: &Agent,
    env: &mut dyn Env,
    buffer: &ReplayBuffer,
    n_states: usize,
    n_rollouts: usize,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> BiasSample {
    assert!(!buffer.is_empty(), "bias probe needs a non-empty buffer");
    let states: Vec<Vec<f64>> = (0..n_states)
        .map(|_| buffer.get(rng.random_range(0..buffer.len())).state.clone())
        .collect();
    let policy = |s: &[f64]| agent.act_deterministic(s);
    bias_probe_with(
        &|s| agent.value_estimate(s),
        &policy,
        env,
        &states,
        n_rollouts,
        agent.config.gamma,
        step,
    )
}

/// Core of the probe with explicit critic and policy, usable with
/// hand-wired functions in tests.
pub fn bias_probe_with(
    critic: &dyn Fn(&[f64]) -> f64,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    env: &mut dyn Env,
    states: &[Vec<f64>],
    n_rollouts: usize,
    gamma: f64,
    step: u64,
) -> BiasSample {
    let mut est = KahanSum::new();
    for s in states {
        est.add(critic(s));
    }
    let estimate = est.value() / states.len() as f64;
    let true_value = true_q_rollout(env, policy, states, n_rollouts, gamma);
    BiasSample { step, estimate, true_value, bias: estimate - true_value }
}

/// Synthetic noisy-critic model: a true landscape, per-evaluation Gaussian
/// noise level, number of independent critic copies (1 or 2), and trial
/// count.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub true_q: Vec<f64>,
    pub eta: f64,
    pub copies: usize,
    pub trials: usize,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), OperatorError> {
        if self.true_q.is_empty() {
            return Err(crate::landscape::LandscapeError::Empty.into());
        }
        if !(self.eta >= 0.0) || self.trials == 0 || !(1..=2).contains(&self.copies) {
            return Err(OperatorError::DegenerateProposal(format!(
                "noise model requires eta >= 0, trials >= 1, copies in {{1,2}}; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Monte-Carlo means and paired standard errors of the three estimators'
/// biases relative to `max(true_q)`.
#[derive(Debug, Clone, Copy)]
pub struct BiasOrdering {
    pub bias_max_single: f64,
    pub bias_ga_single: f64,
    pub bias_ga_min_pair: f64,
    pub stderr_max_single: f64,
    pub stderr_ga_single: f64,
    pub stderr_ga_min_pair: f64,
    /// Both orderings hold within 3 paired standard errors.
    pub orderings_ok: bool,
}

struct MeanAccumulator {
    sum: KahanSum,
    sum_sq: KahanSum,
    n: usize,
}

impl MeanAccumulator {
    fn new() -> Self {
        Self { sum: KahanSum::new(), sum_sq: KahanSum::new(), n: 0 }
    }

    fn add(&mut self, x: f64) {
        self.sum.add(x);
        self.sum_sq.add(x * x);
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum.value() / self.n as f64
    }

    fn stderr(&self) -> f64 {
        let n = self.n as f64;
        let mean = self.mean();
        let var = (self.sum_sq.value() / n - mean * mean).max(0.0);
        (var / n).sqrt()
    }
}

/// Estimate the bias ordering for one landscape, activation, and noise level.
/// Deterministic given the seed. With `copies = 1` the pair estimator
/// degenerates to the single-copy one.
pub fn synthetic_bias_ordering(
    model: &NoiseModel,
    spec: &ActivationSpec,
    seed: u64,
) -> Result<BiasOrdering, OperatorError> {
    model.validate()?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.true_q.len();
    let true_max = model.true_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut acc_max = MeanAccumulator::new();
    let mut acc_ga = MeanAccumulator::new();
    let mut acc_pair = MeanAccumulator::new();
    // Paired differences carry the ordering tolerances.
    let mut acc_d_pair_ga = MeanAccumulator::new();
    let mut acc_d_ga_max = MeanAccumulator::new();

    let mut noisy1 = vec![0.0; n];
    let mut noisy2 = vec![0.0; n];
    let measure = vec![1.0; n];
    for _ in 0..model.trials {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            noisy1[i] = model.true_q[i] + model.eta * z;
        }
        if model.copies == 2 {
            for i in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                noisy2[i] = model.true_q[i] + model.eta * z;
            }
        } else {
            noisy2.copy_from_slice(&noisy1);
        }

        let max_single = noisy1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ga_single = ga_over(&noisy1, &measure, spec)?;
        let min_pair: Vec<f64> =
            noisy1.iter().zip(&noisy2).map(|(a, b)| a.min(*b)).collect();
        let ga_pair = ga_over(&min_pair, &measure, spec)?;

        debug_assert!(ga_single <= max_single + 1e-12);
        acc_max.add(max_single - true_max);
        acc_ga.add(ga_single - true_max);
        acc_pair.add(ga_pair - true_max);
        acc_d_pair_ga.add(ga_pair - ga_single);
        acc_d_ga_max.add(ga_single - max_single);
    }

    let orderings_ok = acc_d_pair_ga.mean() <= 3.0 * acc_d_pair_ga.stderr()
        && acc_d_ga_max.mean() <= 3.0 * acc_d_ga_max.stderr();
    Ok(BiasOrdering {
        bias_max_single: acc_max.mean(),
        bias_ga_single: acc_ga.mean(),
        bias_ga_min_pair: acc_pair.mean(),
        stderr_max_single: acc_max.stderr(),
        stderr_ga_single: acc_ga.stderr(),
        stderr_ga_min_pair: acc_pair.stderr(),
        orderings_ok,
    })
}

fn ga_over(qs: &[f64], measure: &[f64], spec: &ActivationSpec) -> Result<f64, OperatorError> {
    let landscape = crate::QLandscape::new(
        (0..qs.len()).map(|i| vec![i as f64]).collect(),
        qs.to_vec(),
        measure.to_vec(),
        qs.len() as f64,
    )?;
    operator::ga_discrete(&landscape, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ContinuousBandit, BANDIT_TARGET};

    #[test]
    fn perfect_critic_on_bandit_has_zero_bias() {
        let mut env = ContinuousBandit::new();
        let states = vec![vec![0.0]; 4];
        // Critic hard-wired to the analytic optimal value of the policy's
        // action; the rollout truth is identical, so the bias vanishes.
        let policy = |_: &[f64]| vec![BANDIT_TARGET + 0.3];
        let critic = move |_: &[f64]| -(0.3f64 * 0.3);
        let sample = bias_probe_with(&critic, &policy, &mut env, &states, 10, 0.99, 0);
        assert!(sample.bias.abs() < 1e-12);
        assert!((sample.true_value - -(0.09)).abs() < 1e-12);
    }

    #[test]
    fn noiseless_model_reduces_to_analytic_gaps() {
        let model = NoiseModel { true_q: vec![0.0, 0.5, 1.0], eta: 0.0, copies: 2, trials: 10 };
        let spec = ActivationSpec::polynomial(0.05, 2.0, 2.0);
        let out = synthetic_bias_ordering(&model, &spec, 0).unwrap();
        assert_eq!(out.bias_max_single, 0.0);
        let landscape = crate::QLandscape::from_qs(&model.true_q).unwrap();
        let expected = operator::ga_discrete(&landscape, &spec).unwrap() - 1.0;
        assert!((out.bias_ga_single - expected).abs() < 1e-12);
        assert!((out.bias_ga_min_pair - expected).abs() < 1e-12);
        assert!(out.orderings_ok);
    }

    #[test]
    fn constant_activation_mean_bias_vanishes_on_zero_landscape() {
        let model = NoiseModel { true_q: vec![0.0; 16], eta: 1.0, copies: 2, trials: 20_000 };
        let out =
            synthetic_bias_ordering(&model, &ActivationSpec::constant(1.0), 7).unwrap();
        // The estimator is the plain mean of symmetric noise.
        assert!(out.bias_ga_single.abs() <= 3.0 * out.stderr_ga_single);
        assert!(out.bias_max_single > 1.0);
        assert!(out.orderings_ok);
    }

    #[test]
    fn zero_landscape_max_bias_matches_order_statistic_oracle() {
        // Oracle: E[max of 16 standard normals] by quadrature of
        // 16 x phi(x) Phi(x)^15 (Simpson on [-10, 10]).
        use statrs::distribution::{Continuous, ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let integrand = |x: f64| 16.0 * x * normal.pdf(x) * normal.cdf(x).powi(15);
        let (a, b, steps) = (-10.0, 10.0, 20_000);
        let h = (b - a) / steps as f64;
        let mut oracle = integrand(a) + integrand(b);
        for i in 1..steps {
            let x = a + h * i as f64;
            oracle += integrand(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        oracle *= h / 3.0;
        assert!((oracle - 1.766).abs() < 1e-3, "oracle {oracle}");

        let model = NoiseModel { true_q: vec![0.0; 16], eta: 1.0, copies: 1, trials: 30_000 };
        let out =
            synthetic_bias_ordering(&model, &ActivationSpec::constant(1.0), 123).unwrap();
        assert!(
            (out.bias_max_single - oracle).abs() <= 3.0 * out.stderr_max_single,
            "bias {} vs oracle {oracle} (stderr {})",
            out.bias_max_single,
            out.stderr_max_single
        );
    }

    #[test]
    fn ordering_holds_on_random_landscape_with_polynomial_weighting() {
        let true_q: Vec<f64> = (0..16).map(|i| (i as f64) / 15.0).collect();
        let model = NoiseModel { true_q, eta: 0.5, copies: 2, trials: 30_000 };
        let spec = ActivationSpec::polynomial(0.05, 2.0, 2.0);
        let out = synthetic_bias_ordering(&model, &spec, 99).unwrap();
        assert!(out.orderings_ok, "{out:?}");
        // The max estimator truly overestimates here.
        assert!(out.bias_max_single > 0.1);
    }

    #[test]
    fn model_validation_rejects_bad_inputs() {
        let bad = NoiseModel { true_q: vec![], eta: 1.0, copies: 2, trials: 10 };
        assert!(bad.validate().is_err());
        let bad = NoiseModel { true_q: vec![0.0], eta: -1.0, copies: 2, trials: 10 };
        assert!(bad.validate().is_err());
        let bad = NoiseModel { true_q: vec![0.0], eta: 1.0, copies: 3, trials: 10 };
        assert!(bad.validate().is_err());
    }
}
