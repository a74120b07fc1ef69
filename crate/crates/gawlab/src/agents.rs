//! Off-policy actor-critic update rules over [`crate::net`] networks and a
//! replay buffer: DDPG, TD3, and their activated-weighting variants GD2
//! (single critic) and GD3 (double critics and double actors).
//!
//! The four algorithms differ only in how they build the critic target:
//!
//! - DDPG: `y = r + gamma (1-d) Q'(s', pi'(s'))`
//! - TD3: `y = r + gamma (1-d) min_j Q'_j(s', pi'(s') + clipped noise)`
//! - GD2: `y = r + gamma (1-d) GA(Q'(s', .))` estimated over a truncated
//!   Gaussian proposal centered at `pi'(s')`
//! - GD3: as GD2 but over the pointwise minimum of two target critics, with
//!   a separate actor per critic index
//!
//! Exploration, target-smoothing, and proposal noise scales are expressed in
//! normalized units and multiplied by the action box half-extent, so the
//! Table-style defaults (0.1 / 0.2 / 0.5) mean the same thing on every
//! environment. Targets are clamped into the feasible value range
//! `[-r_max/(1-gamma), r_max/(1-gamma)]`.
//!
//! Within one update, importance-sampled targets share a single noise block
//! across the batch, which makes the whole training step a deterministic
//! function of the update RNG state.

use crate::activation::ActivationSpec;
use crate::envs::EnvSpec;
use crate::net::{AdamState, Mlp, NetError, OutputMap};
use crate::operator::{self, OperatorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at update {update}")]
    NonFiniteLoss { update: u64 },
    #[error("replay buffer holds {have} transitions, need {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ddpg,
    Td3,
    Gd2,
    Gd3,
}

impl Algorithm {
    pub fn n_critics(self) -> usize {
        match self {
            Algorithm::Ddpg | Algorithm::Gd2 => 1,
            Algorithm::Td3 | Algorithm::Gd3 => 2,
        }
    }

    pub fn n_actors(self) -> usize {
        match self {
            Algorithm::Gd3 => 2,
            _ => 1,
        }
    }

    pub fn uses_activation(self) -> bool {
        matches!(self, Algorithm::Gd2 | Algorithm::Gd3)
    }

    /// Actor/target update cadence: every step for DDPG and GD2, delayed for
    /// TD3 and GD3.
    pub fn default_update_interval(self) -> usize {
        match self {
            Algorithm::Ddpg | Algorithm::Gd2 => 1,
            Algorithm::Td3 | Algorithm::Gd3 => 2,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Algorithm::Ddpg => "ddpg",
            Algorithm::Td3 => "td3",
            Algorithm::Gd2 => "gd2",
            Algorithm::Gd3 => "gd3",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddpg" => Ok(Algorithm::Ddpg),
            "td3" => Ok(Algorithm::Td3),
            "gd2" => Ok(Algorithm::Gd2),
            "gd3" => Ok(Algorithm::Gd3),
            other => Err(format!("unknown algorithm: {other}")),
        }
    }
}

/// Experience tuple `(s, a, r, s', d)`. `done` marks true terminals only;
/// time-limit truncations store `false` so targets bootstrap through them.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        Self { data: Vec::new(), capacity, next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.data[idx]
    }

    /// Uniform sample (with replacement) over current contents.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..self.data.len())).collect()
    }
}

/// Hyperparameters. Defaults mirror the standard fine-tuned baseline setup:
/// batch 100, learning rate 1e-3, discount 0.99, Polyak rate 5e-3,
/// exploration noise 0.1, target noise 0.2 clipped at 0.5, delayed updates
/// every 2 steps, 50 proposal noises, 1e4 warmup steps, buffer capacity 1e6,
/// hidden layers (400, 300).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub activation: Option<ActivationSpec>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::exploration_noise")]
    pub exploration_noise: f64,
    #[serde(default = "defaults::target_noise")]
    pub target_noise: f64,
    #[serde(default = "defaults::noise_clip")]
    pub noise_clip: f64,
    #[serde(default = "defaults::policy_update_interval")]
    pub policy_update_interval: usize,
    #[serde(default = "defaults::noise_count")]
    pub noise_count: usize,
    #[serde(default = "defaults::warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "defaults::buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
}

mod defaults {
    pub fn batch_size() -> usize {
        100
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn gamma() -> f64 {
        0.99
    }
    pub fn tau() -> f64 {
        5e-3
    }
    pub fn exploration_noise() -> f64 {
        0.1
    }
    pub fn target_noise() -> f64 {
        0.2
    }
    pub fn noise_clip() -> f64 {
        0.5
    }
    pub fn policy_update_interval() -> usize {
        2
    }
    pub fn noise_count() -> usize {
        50
    }
    pub fn warmup_steps() -> usize {
        10_000
    }
    pub fn buffer_capacity() -> usize {
        1_000_000
    }
    pub fn hidden() -> Vec<usize> {
        vec![400, 300]
    }
}

impl AgentConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            activation: None,
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            gamma: defaults::gamma(),
            tau: defaults::tau(),
            exploration_noise: defaults::exploration_noise(),
            target_noise: defaults::target_noise(),
            noise_clip: defaults::noise_clip(),
            policy_update_interval: defaults::policy_update_interval(),
            noise_count: defaults::noise_count(),
            warmup_steps: defaults::warmup_steps(),
            buffer_capacity: defaults::buffer_capacity(),
            hidden: defaults::hidden(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.noise_count == 0 || self.policy_update_interval == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, noise_count, and policy_update_interval must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainError::InvalidConfig(format!(
                "need learning_rate >= 0 and gamma in [0,1), got lr={} gamma={}",
                self.learning_rate, self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(TrainError::InvalidConfig(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.exploration_noise < 0.0 || self.target_noise < 0.0 || !(self.noise_clip > 0.0) {
            return Err(TrainError::InvalidConfig("noise scales must be non-negative, clip positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(TrainError::InvalidConfig("need at least one hidden layer".into()));
        }
        if self.algorithm.uses_activation() {
            match &self.activation {
                None => {
                    return Err(TrainError::InvalidConfig(format!(
                        "{} requires an activation block",
                        self.algorithm
                    )))
                }
                Some(spec) => spec
                    .validate()
                    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
            }
        }
        Ok(())
    }
}

/// Metrics emitted by one training step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub critic_losses: Vec<f64>,
    pub mean_target: f64,
    pub mean_q: f64,
    pub actor_updated: bool,
}

/// Shared pieces of every target computation.
pub struct TargetParams<'a> {
    pub gamma: f64,
    /// Targets are clamped into `[-value_clamp, value_clamp]`.
    pub value_clamp: f64,
    pub low: &'a [f64],
    pub high: &'a [f64],
}

fn gather_rows(batch: &[&Transition], field: impl Fn(&Transition) -> &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.len() * field(batch[0]).len());
    for t in batch {
        out.extend_from_slice(field(t));
    }
    out
}

fn critic_rows(states: &[f64], actions: &[f64], batch: usize, sdim: usize, adim: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(batch * (sdim + adim));
    for i in 0..batch {
        rows.extend_from_slice(&states[i * sdim..(i + 1) * sdim]);
        rows.extend_from_slice(&actions[i * adim..(i + 1) * adim]);
    }
    rows
}

fn finish_targets(
    batch: &[&Transition],
    bootstrap: &[f64],
    p: &TargetParams<'_>,
) -> Vec<f64> {
    batch
        .iter()
        .zip(bootstrap)
        .map(|(t, &q)| {
            let not_done = if t.done { 0.0 } else { 1.0 };
            (t.reward + p.gamma * not_done * q).clamp(-p.value_clamp, p.value_clamp)
        })
        .collect()
}

/// `y = r + gamma (1-d) Q'(s', pi'(s'))`.
pub fn ddpg_target(
    critic_t: &Mlp,
    actor_t: &Mlp,
    batch: &[&Transition],
    p: &TargetParams<'_>,
) -> Result<Vec<f64>, TrainError> {
    let n = batch.len();
    let sdim = batch[0].next_state.len();
    let s2 = gather_rows(batch, |t| &t.next_state);
    let a2 = actor_t.forward_batch(&s2, n)?;
    let adim = a2.len() / n;
    let q2 = critic_t.forward_batch(&critic_rows(&s2, &a2, n, sdim, adim), n)?;
    Ok(finish_targets(batch, &q2, p))
}

/// Clipped-double-Q target with target-policy smoothing:
/// `a' = clamp(pi'(s') + clip(noise))`, `y = r + gamma (1-d) min_j Q'_j(s', a')`.
pub fn td3_target(
    critics_t: (&Mlp, &Mlp),
    actor_t: &Mlp,
    batch: &[&Transition],
    noise_std: f64,
    noise_clip: f64,
    p: &TargetParams<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    let n = batch.len();
    let sdim = batch[0].next_state.len();
    let s2 = gather_rows(batch, |t| &t.next_state);
    let mut a2 = actor_t.forward_batch(&s2, n)?;
    let adim = a2.len() / n;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        for (i, v) in a2.iter_mut().enumerate() {
            let eps: f64 = normal.sample(rng);
            let d = i % adim;
            *v = (*v + eps.clamp(-noise_clip, noise_clip)).clamp(p.low[d], p.high[d]);
        }
    }
    let rows = critic_rows(&s2, &a2, n, sdim, adim);
    let q1 = critics_t.0.forward_batch(&rows, n)?;
    let q2 = critics_t.1.forward_batch(&rows, n)?;
    let min_q: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect();
    Ok(finish_targets(batch, &min_q, p))
}

/// Reusable buffers for [`activated_target`]; one per agent, grown on first
/// use. Keeping the multi-thousand-row intermediates warm avoids large
/// allocator round trips in the training hot loop.
#[derive(Debug, Default)]
pub struct TargetScratch {
    net: crate::net::BatchScratch,
    centers: Vec<f64>,
    rows: Vec<f64>,
    log_density: Vec<f64>,
    q_min: Vec<f64>,
    q_tmp: Vec<f64>,
}

/// Activated-weighting target over one or two target critics. With a single
/// critic this is the GD2 rule; with a pair, the GD3 rule takes the pointwise
/// minimum before weighting. One truncated-Gaussian noise block (drawn from
/// `rng`) is shared by the whole batch; `shift` is the polynomial
/// translation (zero for other families).
#[allow(clippy::too_many_arguments)]
pub fn activated_target(
    critics_t: &[&Mlp],
    actor_t: &Mlp,
    batch: &[&Transition],
    spec: &ActivationSpec,
    noise_std: f64,
    noise_clip: f64,
    noise_count: usize,
    shift: f64,
    p: &TargetParams<'_>,
    scratch: &mut TargetScratch,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    let n = batch.len();
    let sdim = batch[0].next_state.len();
    let adim = p.low.len();
    let s2 = gather_rows(batch, |t| &t.next_state);
    actor_t.forward_batch_into(&s2, n, &mut scratch.net, &mut scratch.centers)?;
    let noise = operator::sample_noise_block(noise_std, noise_clip, noise_count, adim, rng)?;

    // All (element, noise) critic inputs in one batched evaluation. Actions
    // are the shared noises added to each element's center, clamped into the
    // box; the density is evaluated at the effective (post-clamp) noise, as
    // in `operator::proposal_from_noise`.
    let inv_var = 1.0 / (noise_std * noise_std);
    scratch.rows.clear();
    scratch.rows.reserve(n * noise_count * (sdim + adim));
    scratch.log_density.clear();
    scratch.log_density.reserve(n * noise_count);
    for i in 0..n {
        let center = &scratch.centers[i * adim..(i + 1) * adim];
        for k in 0..noise_count {
            scratch.rows.extend_from_slice(&batch[i].next_state);
            let mut lp = 0.0;
            for d in 0..adim {
                let a = (center[d] + noise[k * adim + d]).clamp(p.low[d], p.high[d]);
                let eff = a - center[d];
                lp += -0.5 * eff * eff * inv_var;
                scratch.rows.push(a);
            }
            scratch.log_density.push(lp);
        }
    }
    let total = n * noise_count;
    critics_t[0].forward_batch_into(&scratch.rows, total, &mut scratch.net, &mut scratch.q_min)?;
    for critic in &critics_t[1..] {
        critic.forward_batch_into(&scratch.rows, total, &mut scratch.net, &mut scratch.q_tmp)?;
        for (m, v) in scratch.q_min.iter_mut().zip(&scratch.q_tmp) {
            *m = m.min(*v);
        }
    }

    let mut bootstrap = Vec::with_capacity(n);
    for i in 0..n {
        let qs = &scratch.q_min[i * noise_count..(i + 1) * noise_count];
        let lps = &scratch.log_density[i * noise_count..(i + 1) * noise_count];
        bootstrap.push(operator::ga_from_samples(qs, lps, spec, shift)?);
    }
    Ok(finish_targets(batch, &bootstrap, p))
}

/// One agent: networks, their targets, and optimizer state for a fixed
/// algorithm and environment.
pub struct Agent {
    pub config: AgentConfig,
    algorithm: Algorithm,
    state_dim: usize,
    action_dim: usize,
    low: Vec<f64>,
    high: Vec<f64>,
    /// Uniform half-extent of the action box; noise scales multiply this.
    half_extent: f64,
    value_clamp: f64,
    poly_shift: f64,
    actors: Vec<Mlp>,
    actor_targets: Vec<Mlp>,
    critics: Vec<Mlp>,
    critic_targets: Vec<Mlp>,
    actor_opts: Vec<AdamState>,
    critic_opts: Vec<AdamState>,
    update_count: u64,
    scratch: TargetScratch,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step keeps per-net streams decorrelated.
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Agent {
    pub fn new(config: AgentConfig, env: &EnvSpec, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let half = env
            .action_low
            .iter()
            .zip(&env.action_high)
            .map(|(&lo, &hi)| 0.5 * (hi - lo))
            .collect::<Vec<f64>>();
        let half_extent = half[0];
        if half.iter().any(|&h| (h - half_extent).abs() > 1e-12) {
            return Err(TrainError::InvalidConfig(
                "action box must have a uniform half-extent".into(),
            ));
        }

        let mut critic_sizes = vec![env.state_dim + env.action_dim];
        critic_sizes.extend(&config.hidden);
        critic_sizes.push(1);
        let mut actor_sizes = vec![env.state_dim];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(env.action_dim);

        let algorithm = config.algorithm;
        let mut critics = Vec::new();
        let mut actors = Vec::new();
        for i in 0..algorithm.n_critics() {
            critics.push(Mlp::new(&critic_sizes, OutputMap::Identity, mix_seed(seed, 1 + i as u64))?);
        }
        for i in 0..algorithm.n_actors() {
            let output = OutputMap::ActionBox {
                low: env.action_low.clone(),
                high: env.action_high.clone(),
            };
            actors.push(Mlp::new(&actor_sizes, output, mix_seed(seed, 101 + i as u64))?);
        }
        let critic_targets = critics.clone();
        let actor_targets = actors.clone();
        let critic_opts = critics.iter().map(|c| AdamState::new(c, config.learning_rate)).collect();
        let actor_opts = actors.iter().map(|a| AdamState::new(a, config.learning_rate)).collect();

        let value_clamp = env.r_max / (1.0 - config.gamma);
        let poly_shift = config
            .activation
            .as_ref()
            .map(|spec| operator::value_bound_shift(spec, env.r_max, config.gamma))
            .unwrap_or(0.0);

        Ok(Self {
            config,
            algorithm,
            state_dim: env.state_dim,
            action_dim: env.action_dim,
            low: env.action_low.clone(),
            high: env.action_high.clone(),
            half_extent,
            value_clamp,
            poly_shift,
            actors,
            actor_targets,
            critics,
            critic_targets,
            actor_opts,
            critic_opts,
            update_count: 0,
            scratch: TargetScratch::default(),
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Evaluation policy: actor 0, no exploration noise.
    pub fn act_deterministic(&self, state: &[f64]) -> Vec<f64> {
        self.actors[0].forward(state).expect("actor forward")
    }

    /// Behavior policy: `pi(s) + N(0, (sigma * half_extent)^2)` clipped to
    /// the action box.
    pub fn select_action(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        select_action(
            &self.actors[0],
            state,
            self.config.exploration_noise * self.half_extent,
            &self.low,
            &self.high,
            rng,
        )
    }

    /// Critic-0 value estimate at `(s, pi_0(s))`, the quantity the bias probe
    /// compares against rollouts.
    pub fn value_estimate(&self, state: &[f64]) -> f64 {
        let action = self.act_deterministic(state);
        let mut input = state.to_vec();
        input.extend_from_slice(&action);
        self.critics[0].forward(&input).expect("critic forward")[0]
    }

    fn target_params(&self) -> TargetParams<'_> {
        TargetParams {
            gamma: self.config.gamma,
            value_clamp: self.value_clamp,
            low: &self.low,
            high: &self.high,
        }
    }

    /// One training step: critic regression toward the algorithm's target,
    /// delayed deterministic-policy-gradient actor updates, Polyak target
    /// updates. Requires `buffer.len() >= batch_size` (warmup gating is the
    /// runner's job).
    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepMetrics, TrainError> {
        if buffer.len() < self.config.batch_size {
            return Err(TrainError::BufferTooSmall {
                have: buffer.len(),
                need: self.config.batch_size,
            });
        }
        self.update_count += 1;
        let interval = match self.algorithm {
            Algorithm::Ddpg | Algorithm::Gd2 => 1,
            Algorithm::Td3 | Algorithm::Gd3 => self.config.policy_update_interval,
        };
        let update_due = self.update_count % interval as u64 == 0;

        let mut critic_losses = Vec::new();
        let mut target_sum = 0.0;
        let mut q_sum = 0.0;
        let mut count = 0usize;

        match self.algorithm {
            Algorithm::Ddpg | Algorithm::Td3 => {
                let idx = buffer.sample_indices(self.config.batch_size, rng);
                let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
                let y = match self.algorithm {
                    Algorithm::Ddpg => {
                        ddpg_target(&self.critic_targets[0], &self.actor_targets[0], &batch, &self.target_params())?
                    }
                    _ => td3_target(
                        (&self.critic_targets[0], &self.critic_targets[1]),
                        &self.actor_targets[0],
                        &batch,
                        self.config.target_noise * self.half_extent,
                        self.config.noise_clip * self.half_extent,
                        &self.target_params(),
                        rng,
                    )?,
                };
                target_sum += y.iter().sum::<f64>();
                count += y.len();
                for c in 0..self.algorithm.n_critics() {
                    let (loss, mean_q) = self.critic_regression_step(c, &batch, &y)?;
                    critic_losses.push(loss);
                    q_sum += mean_q * y.len() as f64;
                }
                if update_due {
                    self.actor_gradient_step(0, 0, &batch)?;
                    self.polyak_all()?;
                }
            }
            Algorithm::Gd2 | Algorithm::Gd3 => {
                let spec = self.config.activation.expect("validated");
                // GD2 runs this loop once; GD3 once per critic/actor pair with
                // an independently sampled batch.
                for i in 0..self.algorithm.n_critics() {
                    let idx = buffer.sample_indices(self.config.batch_size, rng);
                    let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
                    // Field-level borrows: the scratch is mutable while nets
                    // and box bounds stay shared.
                    let params = TargetParams {
                        gamma: self.config.gamma,
                        value_clamp: self.value_clamp,
                        low: &self.low,
                        high: &self.high,
                    };
                    let critic_refs: Vec<&Mlp> = self.critic_targets.iter().collect();
                    let actor_t = &self.actor_targets[i.min(self.algorithm.n_actors() - 1)];
                    let y = activated_target(
                        &critic_refs,
                        actor_t,
                        &batch,
                        &spec,
                        self.config.target_noise * self.half_extent,
                        self.config.noise_clip * self.half_extent,
                        self.config.noise_count,
                        self.poly_shift,
                        &params,
                        &mut self.scratch,
                        rng,
                    )?;
                    target_sum += y.iter().sum::<f64>();
                    count += y.len();
                    let (loss, mean_q) = self.critic_regression_step(i, &batch, &y)?;
                    critic_losses.push(loss);
                    q_sum += mean_q * y.len() as f64;
                    if update_due {
                        let actor_idx = i.min(self.algorithm.n_actors() - 1);
                        self.actor_gradient_step(actor_idx, i, &batch)?;
                        self.critic_targets[i].soft_update_from(&self.critics[i], self.config.tau)?;
                        self.actor_targets[actor_idx]
                            .soft_update_from(&self.actors[actor_idx], self.config.tau)?;
                    }
                }
            }
        }

        for loss in &critic_losses {
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { update: self.update_count });
            }
        }
        Ok(StepMetrics {
            critic_losses,
            mean_target: target_sum / count.max(1) as f64,
            mean_q: q_sum / count.max(1) as f64,
            actor_updated: update_due,
        })
    }

    /// Squared-loss regression of critic `c` toward `y`; returns
    /// (pre-update loss, mean prediction).
    fn critic_regression_step(
        &mut self,
        c: usize,
        batch: &[&Transition],
        y: &[f64],
    ) -> Result<(f64, f64), TrainError> {
        let n = batch.len();
        let states = gather_rows(batch, |t| &t.state);
        let actions = gather_rows(batch, |t| &t.action);
        let rows = critic_rows(&states, &actions, n, self.state_dim, self.action_dim);
        let q = self.critics[c].forward_batch(&rows, n)?;
        let loss = q.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        let mean_q = q.iter().sum::<f64>() / n as f64;
        let upstream: Vec<f64> = q.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / n as f64).collect();
        let (grads, _) = self.critics[c].backprop_batch(&rows, n, &upstream)?;
        self.critic_opts[c].apply(&mut self.critics[c], &grads)?;
        Ok((loss, mean_q))
    }

    /// Deterministic policy gradient ascent on `mean_s Q_c(s, pi_a(s))`.
    fn actor_gradient_step(
        &mut self,
        a: usize,
        c: usize,
        batch: &[&Transition],
    ) -> Result<(), TrainError> {
        let n = batch.len();
        let states = gather_rows(batch, |t| &t.state);
        let actions = self.actors[a].forward_batch(&states, n)?;
        let rows = critic_rows(&states, &actions, n, self.state_dim, self.action_dim);
        // dL/dQ = -1/n per row (gradient ascent on the mean value).
        let upstream = vec![-1.0 / n as f64; n];
        let (_, dins) = self.critics[c].backprop_batch(&rows, n, &upstream)?;
        let mut d_actions = Vec::with_capacity(n * self.action_dim);
        let in_dim = self.state_dim + self.action_dim;
        for i in 0..n {
            d_actions
                .extend_from_slice(&dins[i * in_dim + self.state_dim..(i + 1) * in_dim]);
        }
        let (grads, _) = self.actors[a].backprop_batch(&states, n, &d_actions)?;
        self.actor_opts[a].apply(&mut self.actors[a], &grads)?;
        Ok(())
    }

    fn polyak_all(&mut self) -> Result<(), TrainError> {
        for (t, o) in self.critic_targets.iter_mut().zip(&self.critics) {
            t.soft_update_from(o, self.config.tau)?;
        }
        for (t, o) in self.actor_targets.iter_mut().zip(&self.actors) {
            t.soft_update_from(o, self.config.tau)?;
        }
        Ok(())
    }

    pub fn critic(&self, idx: usize) -> &Mlp {
        &self.critics[idx]
    }

    pub fn actor(&self, idx: usize) -> &Mlp {
        &self.actors[idx]
    }

    /// Write network snapshots plus a JSON manifest (config and update count).
    pub fn checkpoint(&self, dir: &std::path::Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        for (i, net) in self.actors.iter().enumerate() {
            net.save(&dir.join(format!("actor{i}.bin")))?;
        }
        for (i, net) in self.critics.iter().enumerate() {
            net.save(&dir.join(format!("critic{i}.bin")))?;
        }
        let manifest = serde_json::json!({
            "config": self.config,
            "update_count": self.update_count,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).unwrap())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(())
    }
}

/// Standalone behavior-policy helper: actor output plus per-dim Gaussian
/// noise with the given (already scaled) standard deviation, clipped into
/// the box.
pub fn select_action(
    actor: &Mlp,
    state: &[f64],
    noise_std: f64,
    low: &[f64],
    high: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut action = actor.forward(state).expect("actor forward");
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("valid std");
        for (d, v) in action.iter_mut().enumerate() {
            let eps: f64 = normal.sample(rng);
            *v = (*v + eps).clamp(low[d], high[d]);
        }
    } else {
        for (d, v) in action.iter_mut().enumerate() {
            *v = v.clamp(low[d], high[d]);
        }
    }
    action
}
