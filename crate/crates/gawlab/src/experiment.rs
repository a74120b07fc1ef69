//! Seeded experiment orchestration: config ingestion, the training loop with
//! periodic deterministic evaluation and bias probes, CSV/SVG emission, and
//! the randomized diagnostic suites behind the `diagnose` subcommand.
//!
//! # Config format
//!
//! One TOML file describes one experiment:
//!
//! ```toml
//! env = "pendulum"            # "pendulum" | "pointmass1d" | "bandit"
//! algorithm = "gd3"           # "ddpg" | "td3" | "gd2" | "gd3"
//! total_steps = 100000
//! eval_interval = 5000        # evaluate 10 episodes every 5000 steps
//! eval_episodes = 10
//! bias_interval = 10000       # bias probe cadence
//! seeds = [0, 1, 2, 3, 4]
//! out_dir = "runs/pendulum-gd3"
//! activation = { family = "poly", alpha = 0.05, k = 2, bias = 2.0 }
//!
//! [agent]
//! batch_size = 100
//! hidden = [16, 16]
//! ```
//!
//! # Output layout
//!
//! `run` writes into a fresh directory (an existing non-empty target gets a
//! numeric suffix rather than being overwritten):
//!
//! ```text
//! out_dir/
//!   config.toml          # resolved configuration
//!   train_seed<k>.csv    # step, eval_return_mean, eval_return_std,
//!                        # critic_loss, mean_target, bias
//!   bias_seed<k>.csv     # step, q_estimate, true_q, bias
//!   aggregate.csv        # step, return_mean, return_std (across seeds)
//!   curve.svg            # mean eval return with a +/- std band
//! ```
//!
//! All floats are serialized with 9 significant digits, and a re-run with the
//! same config and seeds is byte-identical.

use crate::activation::ActivationSpec;
use crate::agents::{Agent, AgentConfig, Algorithm, ReplayBuffer, StepMetrics, TrainError, Transition};
use crate::diagnostics::{self, BiasTrace, NoiseModel};
use crate::envs::{make_env, Env, EnvError};
use crate::net::{Mlp, NetError, OutputMap};
use crate::operator::{self, BoundParams};
use crate::tabular::{self, TabularMdp};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown suite: {0} (expected operator, value-iteration, bias-ordering, or gradcheck)")]
    UnknownSuite(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Format with 9 significant digits; the one float serializer every CSV and
/// SVG writer uses.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Agent hyperparameter block of a config file. Everything is optional and
/// falls back to the [`AgentConfig`] defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentHypers {
    #[serde(default = "hyper_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "hyper_defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "hyper_defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "hyper_defaults::tau")]
    pub tau: f64,
    #[serde(default = "hyper_defaults::exploration_noise")]
    pub exploration_noise: f64,
    #[serde(default = "hyper_defaults::target_noise")]
    pub target_noise: f64,
    #[serde(default = "hyper_defaults::noise_clip")]
    pub noise_clip: f64,
    #[serde(default = "hyper_defaults::policy_update_interval")]
    pub policy_update_interval: usize,
    #[serde(default = "hyper_defaults::noise_count")]
    pub noise_count: usize,
    #[serde(default = "hyper_defaults::warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "hyper_defaults::buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "hyper_defaults::hidden")]
    pub hidden: Vec<usize>,
}

mod hyper_defaults {
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

impl Default for AgentHypers {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub activation: Option<ActivationSpec>,
    pub total_steps: u64,
    #[serde(default = "config_defaults::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "config_defaults::eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "config_defaults::bias_interval")]
    pub bias_interval: u64,
    #[serde(default = "config_defaults::bias_states")]
    pub bias_states: usize,
    #[serde(default = "config_defaults::bias_rollouts")]
    pub bias_rollouts: usize,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    #[serde(default)]
    pub agent: AgentHypers,
}

mod config_defaults {
    pub fn eval_interval() -> u64 {
        5000
    }
    pub fn eval_episodes() -> usize {
        10
    }
    pub fn bias_interval() -> u64 {
        10_000
    }
    pub fn bias_states() -> usize {
        64
    }
    pub fn bias_rollouts() -> usize {
        10
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(ExperimentError::Config(
                "eval_interval and eval_episodes must be positive".into(),
            ));
        }
        if self.bias_interval == 0 || self.bias_states == 0 || self.bias_rollouts == 0 {
            return Err(ExperimentError::Config(
                "bias_interval, bias_states, and bias_rollouts must be positive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must be non-empty".into()));
        }
        // Resolve every referenced name now, so failures carry config context.
        make_env(&self.env)?;
        self.agent_config().validate()?;
        Ok(())
    }

    /// Assemble the [`AgentConfig`] from the top-level algorithm/activation
    /// and the `[agent]` block.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            algorithm: self.algorithm,
            activation: self.activation,
            batch_size: self.agent.batch_size,
            learning_rate: self.agent.learning_rate,
            gamma: self.agent.gamma,
            tau: self.agent.tau,
            exploration_noise: self.agent.exploration_noise,
            target_noise: self.agent.target_noise,
            noise_clip: self.agent.noise_clip,
            policy_update_interval: self.agent.policy_update_interval,
            noise_count: self.agent.noise_count,
            warmup_steps: self.agent.warmup_steps,
            buffer_capacity: self.agent.buffer_capacity,
            hidden: self.agent.hidden.clone(),
        }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of a per-seed training CSV.
#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub step: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub critic_loss: f64,
    pub mean_target: f64,
    pub bias: f64,
}

/// Everything produced by one seed's training run.
pub struct SeedOutcome {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub bias_trace: BiasTrace,
}

/// Deterministic evaluation: `episodes` rollouts with the current policy and
/// no exploration noise; returns (mean, population std) of undiscounted
/// episode returns.
fn evaluate_policy(
    agent: &Agent,
    env: &mut dyn Env,
    episodes: usize,
    seed_base: u64,
) -> (f64, f64) {
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(mix(seed_base, ep as u64));
        let mut total = 0.0;
        loop {
            let action = agent.act_deterministic(&obs);
            let step = env.step(&action).expect("eval policy produced invalid action");
            total += step.reward;
            if step.done {
                break;
            }
            obs = step.next_state;
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / episodes as f64;
    (mean, var.sqrt())
}

/// Train one seed: the full loop with warmup exploration, per-step updates,
/// periodic deterministic evaluation, and bias probes at the configured
/// cadence.
pub fn run_single_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, ExperimentError> {
    let mut env = make_env(&config.env)?;
    let mut eval_env = make_env(&config.env)?;
    let mut probe_env = make_env(&config.env)?;
    let spec = env.spec().clone();

    let mut agent = Agent::new(config.agent_config(), &spec, mix(seed, 0xA6E7))?;
    let mut buffer = ReplayBuffer::new(config.agent.buffer_capacity);
    let mut action_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xAC7104));
    let mut train_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x77A17));
    let mut probe_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xB1A5));

    let mut episode: u64 = 0;
    let mut episode_len: usize = 0;
    let mut state = env.reset(mix(seed, episode));
    let mut last_metrics: Option<StepMetrics> = None;
    let mut bias_trace: BiasTrace = Vec::new();
    let mut rows = Vec::new();

    for step in 1..=config.total_steps {
        let action = if (step as usize) <= config.agent.warmup_steps {
            operator::uniform_in_box(&spec.action_low, &spec.action_high, &mut action_rng)
        } else {
            agent.select_action(&state, &mut action_rng)
        };
        let result = env.step(&action)?;
        episode_len += 1;
        // Time-limit truncations bootstrap; only true terminals store done.
        let done_flag =
            result.done && (episode_len < spec.horizon || env.horizon_is_terminal());
        buffer.push(Transition {
            state: state.clone(),
            action,
            reward: result.reward,
            next_state: result.next_state.clone(),
            done: done_flag,
        });
        if result.done {
            episode += 1;
            episode_len = 0;
            state = env.reset(mix(seed, episode));
        } else {
            state = result.next_state;
        }

        if (step as usize) > config.agent.warmup_steps
            && buffer.len() >= config.agent.batch_size
        {
            last_metrics = Some(agent.train_step(&buffer, &mut train_rng)?);
        }

        if step % config.bias_interval == 0 && !buffer.is_empty() {
            bias_trace.push(diagnostics::bias_probe(
                &agent,
                probe_env.as_mut(),
                &buffer,
                config.bias_states,
                config.bias_rollouts,
                step,
                &mut probe_rng,
            ));
        }

        if step % config.eval_interval == 0 {
            let (mean, std) =
                evaluate_policy(&agent, eval_env.as_mut(), config.eval_episodes, mix(seed, step));
            let (critic_loss, mean_target) = match &last_metrics {
                Some(m) => (
                    m.critic_losses.iter().sum::<f64>() / m.critic_losses.len() as f64,
                    m.mean_target,
                ),
                None => (0.0, 0.0),
            };
            rows.push(EvalRow {
                step,
                eval_return_mean: mean,
                eval_return_std: std,
                critic_loss,
                mean_target,
                bias: bias_trace.last().map(|b| b.bias).unwrap_or(0.0),
            });
        }
    }

    Ok(SeedOutcome { seed, rows, bias_trace })
}

/// Pick a fresh directory: `base`, or `base-1`, `base-2`, ... if it already
/// exists with content. Never overwrites silently.
fn unique_dir(base: &Path) -> PathBuf {
    let empty = |p: &Path| match std::fs::read_dir(p) {
        Ok(mut it) => it.next().is_none(),
        Err(_) => true,
    };
    if !base.exists() || empty(base) {
        return base.to_path_buf();
    }
    for i in 1.. {
        let candidate = PathBuf::from(format!("{}-{i}", base.display()));
        if !candidate.exists() || empty(&candidate) {
            return candidate;
        }
    }
    unreachable!()
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

const TRAIN_HEADER: &str = "step,eval_return_mean,eval_return_std,critic_loss,mean_target,bias";
const BIAS_HEADER: &str = "step,q_estimate,true_q,bias";
const AGGREGATE_HEADER: &str = "step,return_mean,return_std";

/// Run every seed (in parallel), write per-seed and aggregate CSVs plus the
/// learning-curve SVG, and return the artifact directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    config.validate()?;
    let dir = unique_dir(Path::new(&config.out_dir));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let outcomes: Vec<SeedOutcome> = config
        .seeds
        .par_iter()
        .map(|&seed| run_single_seed(config, seed))
        .collect::<Result<_, _>>()?;

    let resolved =
        toml::to_string_pretty(config).map_err(|e| ExperimentError::Config(e.to_string()))?;
    write_file(&dir.join("config.toml"), &resolved)?;

    for outcome in &outcomes {
        let mut csv = String::from(TRAIN_HEADER);
        csv.push('\n');
        for r in &outcome.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                fmt9(r.eval_return_mean),
                fmt9(r.eval_return_std),
                fmt9(r.critic_loss),
                fmt9(r.mean_target),
                fmt9(r.bias)
            ));
        }
        write_file(&dir.join(format!("train_seed{}.csv", outcome.seed)), &csv)?;

        let mut csv = String::from(BIAS_HEADER);
        csv.push('\n');
        for b in &outcome.bias_trace {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                b.step,
                fmt9(b.estimate),
                fmt9(b.true_value),
                fmt9(b.bias)
            ));
        }
        write_file(&dir.join(format!("bias_seed{}.csv", outcome.seed)), &csv)?;
    }

    // Aggregate mean and std of the per-seed eval means at each step.
    let n_rows = outcomes.first().map(|o| o.rows.len()).unwrap_or(0);
    let mut aggregate = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let step = outcomes[0].rows[i].step;
        let values: Vec<f64> = outcomes.iter().map(|o| o.rows[i].eval_return_mean).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        aggregate.push((step, mean, var.sqrt()));
    }
    let mut csv = String::from(AGGREGATE_HEADER);
    csv.push('\n');
    for (step, mean, std) in &aggregate {
        csv.push_str(&format!("{},{},{}\n", step, fmt9(*mean), fmt9(*std)));
    }
    write_file(&dir.join("aggregate.csv"), &csv)?;

    let title = format!("{} on {} ({} seeds)", config.algorithm, config.env, config.seeds.len());
    write_file(&dir.join("curve.svg"), &render_curve_svg(&aggregate, &title))?;

    Ok(dir)
}

/// Minimal deterministic SVG line plot: mean eval return over steps with a
/// shaded +/- std band.
fn render_curve_svg(points: &[(u64, f64, f64)], title: &str) -> String {
    let (width, height) = (880.0, 560.0);
    let (ml, mr, mt, mb) = (80.0, 30.0, 50.0, 70.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" font-family=\"monospace\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        width / 2.0
    ));

    if points.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">no evaluation points</text>\n",
            width / 2.0,
            height / 2.0
        ));
        svg.push_str("</svg>\n");
        return svg;
    }

    let x_max = points.last().unwrap().0.max(1) as f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for &(_, mean, std) in points {
        y_min = y_min.min(mean - std);
        y_max = y_max.max(mean + std);
    }
    if y_max - y_min < 1e-9 {
        y_max += 1.0;
        y_min -= 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let sx = |step: u64| ml + plot_w * step as f64 / x_max;
    let sy = |v: f64| mt + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    // Axes and ticks.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    for i in 0..=5u32 {
        let frac = i as f64 / 5.0;
        let x = ml + plot_w * frac;
        let step = (x_max * frac).round() as u64;
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            mt + plot_h,
            mt + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{step}</text>\n",
            mt + plot_h + 20.0
        ));
        let yv = y_min + (y_max - y_min) * frac;
        let y = sy(yv);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{:.1}</text>\n",
            ml - 9.0,
            y + 4.0,
            yv
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\">environment steps</text>\n",
        ml + plot_w / 2.0,
        height - 18.0
    ));
    svg.push_str(&format!(
        "<text x=\"22\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 22 {})\">evaluation return</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));

    // Std band.
    let mut band = String::from("<path d=\"");
    for (i, &(step, mean, std)) in points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        band.push_str(&format!("{cmd}{:.2},{:.2} ", sx(step), sy(mean + std)));
    }
    for &(step, mean, std) in points.iter().rev() {
        band.push_str(&format!("L{:.2},{:.2} ", sx(step), sy(mean - std)));
    }
    band.push_str("Z\" fill=\"#4878a8\" fill-opacity=\"0.25\" stroke=\"none\"/>\n");
    svg.push_str(&band);

    // Mean line.
    let mut line = String::from("<polyline fill=\"none\" stroke=\"#205080\" stroke-width=\"1.8\" points=\"");
    for &(step, mean, _) in points {
        line.push_str(&format!("{:.2},{:.2} ", sx(step), sy(mean)));
    }
    line.push_str("\"/>\n");
    svg.push_str(&line);

    svg.push_str("</svg>\n");
    svg
}

/// Randomized verification suites behind `diagnose`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Operator,
    ValueIteration,
    BiasOrdering,
    Gradcheck,
}

impl std::str::FromStr for Suite {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "operator" => Ok(Suite::Operator),
            "value-iteration" => Ok(Suite::ValueIteration),
            "bias-ordering" => Ok(Suite::BiasOrdering),
            "gradcheck" => Ok(Suite::Gradcheck),
            other => Err(ExperimentError::UnknownSuite(other.to_string())),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Suite::Operator => "operator",
            Suite::ValueIteration => "value-iteration",
            Suite::BiasOrdering => "bias-ordering",
            Suite::Gradcheck => "gradcheck",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    pub trials: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self { trials: None, seed: 0, out_dir: PathBuf::from("diagnostics") }
    }
}

/// Outcome of one suite: total checks, failures, and where the CSV went.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub total: usize,
    pub failed: usize,
    pub csv_path: PathBuf,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }

    /// One-line machine-readable summary.
    pub fn summary_json(&self) -> String {
        format!(
            r#"{{"suite":"{}","total":{},"failed":{},"csv":"{}"}}"#,
            self.suite,
            self.total,
            self.failed,
            self.csv_path.display()
        )
    }
}

pub fn run_diagnostics(suite: Suite, opts: &DiagnoseOptions) -> Result<SuiteReport, ExperimentError> {
    let dir = unique_dir(&opts.out_dir);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    match suite {
        Suite::Operator => operator_suite(opts, &dir),
        Suite::ValueIteration => value_iteration_suite(opts, &dir),
        Suite::BiasOrdering => bias_ordering_suite(opts, &dir),
        Suite::Gradcheck => gradcheck_suite(opts, &dir),
    }
}

/// Random activation with parameters drawn from the ranges the weighting
/// families are exercised with throughout the crate. Bias terms are kept at
/// or above one so an exponential-envelope rate always exists.
fn random_spec(rng: &mut ChaCha8Rng) -> ActivationSpec {
    match rng.random_range(0..5u32) {
        0 => {
            let alpha = [0.01, 0.05, 0.1, 0.5][rng.random_range(0..4usize)];
            let k = [1.0, 2.0, 3.0][rng.random_range(0..3usize)];
            let bias = [1.0, 2.0, 5.0][rng.random_range(0..3usize)];
            ActivationSpec::polynomial(alpha, k, bias)
        }
        1 => {
            let beta = [0.005, 0.05, 0.1][rng.random_range(0..3usize)];
            let bias = [1.0, 2.0, 5.0][rng.random_range(0..3usize)];
            ActivationSpec::tanh(beta, bias)
        }
        2 => {
            let beta = [0.005, 0.05, 0.1, 0.5][rng.random_range(0..4usize)];
            let bias = [0.0, 1.0, 2.0][rng.random_range(0..3usize)];
            ActivationSpec::exponential(beta, bias)
        }
        3 => {
            let alpha = [0.05, 0.1, 0.15][rng.random_range(0..3usize)];
            let bias = [1.0, 2.0, 5.0][rng.random_range(0..3usize)];
            ActivationSpec::linear(alpha, bias)
        }
        _ => ActivationSpec::constant([1.5, 2.0, 5.0][rng.random_range(0..3usize)]),
    }
}

/// Random landscape with up to `max_actions` entries and Q in [-5, 5].
pub fn random_landscape(max_actions: usize, rng: &mut ChaCha8Rng) -> crate::QLandscape {
    let n = rng.random_range(2..=max_actions);
    let qs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect();
    crate::QLandscape::from_qs(&qs).expect("random landscape is valid")
}

/// Max-gap bound sweep: random landscapes and activations with numerically
/// feasible envelope rates; every trial must satisfy
/// `0 <= distance <= bound`.
fn operator_suite(opts: &DiagnoseOptions, dir: &Path) -> Result<SuiteReport, ExperimentError> {
    let trials = opts.trials.unwrap_or(1000);
    let rows: Vec<(usize, ActivationSpec, f64, operator::GapBound, bool)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, trial as u64));
            // Redraw until the activation admits a feasible rate on this
            // landscape (bias >= 1 families almost always do).
            loop {
                let landscape = random_landscape(32, &mut rng);
                let spec = random_spec(&mut rng);
                if let Some(beta) = operator::feasible_beta(&spec, landscape.min_q(), landscape.max_q())
                {
                    let epsilon = (0.1 * landscape.spread()).max(1e-6);
                    let report = operator::operator_gap_bound(
                        &landscape,
                        &spec,
                        &BoundParams::new(epsilon, beta),
                    )
                    .expect("feasible beta was verified");
                    let ok = report.holds();
                    return (trial, spec, epsilon, report, ok);
                }
            }
        })
        .collect();

    let mut csv = String::from("trial,family,alpha,k,beta,bias,epsilon,distance,bound_M,ok\n");
    let mut failed = 0;
    for (trial, spec, epsilon, report, ok) in &rows {
        if !ok {
            failed += 1;
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            trial,
            spec.family,
            fmt9(spec.alpha),
            fmt9(spec.k),
            fmt9(spec.beta),
            fmt9(spec.bias),
            fmt9(*epsilon),
            fmt9(report.distance),
            fmt9(report.bound),
            ok
        ));
    }
    let csv_path = dir.join("operator.csv");
    write_file(&csv_path, &csv)?;
    Ok(SuiteReport { suite: "operator".into(), total: rows.len(), failed, csv_path })
}

/// Convergence gap bound sweep over random MDPs: the per-iteration bound must
/// hold at every step.
fn value_iteration_suite(opts: &DiagnoseOptions, dir: &Path) -> Result<SuiteReport, ExperimentError> {
    let n_mdps = opts.trials.unwrap_or(20);
    let iterations = 150;
    let specs = [
        ActivationSpec::exponential(10.0, 0.0),
        ActivationSpec::polynomial(0.05, 2.0, 2.0),
        ActivationSpec::tanh(0.1, 2.0),
        ActivationSpec::constant(2.0),
    ];

    let results: Vec<(Vec<(usize, f64, f64, bool)>, usize)> = (0..n_mdps)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, 0xDA00 + trial as u64));
            let n_states = rng.random_range(2..=8usize);
            let n_actions = rng.random_range(2..=4usize);
            let mdp = TabularMdp::random(n_states, n_actions, 0.9, 1.0, &mut rng);
            let spec = specs[trial % specs.len()];
            let beta = tabular::feasible_beta_for_mdp(&mdp, &spec)
                .expect("suite specs admit a feasible rate at gamma = 0.9");
            let epsilon = tabular::default_epsilon(&mdp).expect("optimal values converge");
            let trace = tabular::value_iterate_ga(&mdp, &spec, iterations)
                .expect("activated value iteration runs");
            let report = tabular::convergence_bound_report(
                &trace,
                &mdp,
                &spec,
                &BoundParams::new(epsilon, beta),
            )
            .expect("bound report evaluates");
            let mut rows = Vec::with_capacity(iterations);
            let mut failures = 0;
            for t in 0..iterations {
                let ok = report.lhs[t] <= report.rhs[t] + 1e-9;
                if !ok {
                    failures += 1;
                }
                rows.push((t + 1, report.lhs[t], report.rhs[t], ok));
            }
            (rows, failures)
        })
        .collect();

    let mut csv = String::from("t,gap,bound,ok\n");
    let mut failed = 0;
    let mut total = 0;
    for (rows, failures) in &results {
        failed += failures;
        total += rows.len();
        for (t, gap, bound, ok) in rows {
            csv.push_str(&format!("{},{},{},{}\n", t, fmt9(*gap), fmt9(*bound), ok));
        }
    }
    let csv_path = dir.join("value-iteration.csv");
    write_file(&csv_path, &csv)?;
    Ok(SuiteReport { suite: "value-iteration".into(), total, failed, csv_path })
}

/// Synthetic bias-ordering study: 20 landscapes x 3 noise levels, three
/// estimators each. A cell fails when the orderings are violated beyond
/// 3 paired standard errors.
fn bias_ordering_suite(opts: &DiagnoseOptions, dir: &Path) -> Result<SuiteReport, ExperimentError> {
    let trials = opts.trials.unwrap_or(100_000);
    let spec = ActivationSpec::polynomial(0.05, 2.0, 2.0);
    let etas = [0.25, 0.5, 1.0];
    let n_landscapes = 20;

    let cells: Vec<(usize, f64, diagnostics::BiasOrdering)> = (0..n_landscapes * etas.len())
        .into_par_iter()
        .map(|cell| {
            let l = cell / etas.len();
            let eta = etas[cell % etas.len()];
            // Landscape 0 is the all-zero reference cell; the rest draw
            // Q ~ U[0, 1] over 16 actions.
            let true_q: Vec<f64> = if l == 0 {
                vec![0.0; 16]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, 0x1A00 + l as u64));
                (0..16).map(|_| rng.random_range(0.0..=1.0)).collect()
            };
            let model = NoiseModel { true_q, eta, copies: 2, trials };
            let ordering =
                diagnostics::synthetic_bias_ordering(&model, &spec, mix(opts.seed, cell as u64))
                    .expect("model and spec are valid");
            (l, eta, ordering)
        })
        .collect();

    let mut csv = String::from("landscape,eta,estimator,bias,stderr,ok\n");
    let mut failed = 0;
    for (l, eta, ordering) in &cells {
        if !ordering.orderings_ok {
            failed += 1;
        }
        for (name, bias, stderr) in [
            ("max_single", ordering.bias_max_single, ordering.stderr_max_single),
            ("ga_single", ordering.bias_ga_single, ordering.stderr_ga_single),
            ("ga_min_pair", ordering.bias_ga_min_pair, ordering.stderr_ga_min_pair),
        ] {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l,
                fmt9(*eta),
                name,
                fmt9(bias),
                fmt9(stderr),
                ordering.orderings_ok
            ));
        }
    }
    let csv_path = dir.join("bias-ordering.csv");
    write_file(&csv_path, &csv)?;
    Ok(SuiteReport { suite: "bias-ordering".into(), total: cells.len(), failed, csv_path })
}

/// Analytic gradients against central finite differences (h = 1e-5) over
/// random networks, parameters, and inputs.
fn gradcheck_suite(opts: &DiagnoseOptions, dir: &Path) -> Result<SuiteReport, ExperimentError> {
    let trials = opts.trials.unwrap_or(20);
    let results: Vec<(usize, f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, 0x6C00 + trial as u64));
            let hidden = [vec![12, 8], vec![16], vec![8, 8, 8]][trial % 3].clone();
            let in_dim = rng.random_range(2..=5usize);
            let out_dim = rng.random_range(1..=3usize);
            let mut sizes = vec![in_dim];
            sizes.extend(&hidden);
            sizes.push(out_dim);
            let output = if trial % 2 == 0 {
                OutputMap::Identity
            } else {
                OutputMap::ActionBox { low: vec![-1.5; out_dim], high: vec![1.5; out_dim] }
            };
            let net = Mlp::new(&sizes, output, mix(opts.seed, trial as u64)).expect("valid sizes");
            let input: Vec<f64> = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = gradcheck_max_rel_error(&net, &input, &upstream);
            (trial, err, err <= 1e-4)
        })
        .collect();

    let mut csv = String::from("trial,max_rel_err,ok\n");
    let mut failed = 0;
    for (trial, err, ok) in &results {
        if !ok {
            failed += 1;
        }
        csv.push_str(&format!("{},{},{}\n", trial, fmt9(*err), ok));
    }
    let csv_path = dir.join("gradcheck.csv");
    write_file(&csv_path, &csv)?;
    Ok(SuiteReport { suite: "gradcheck".into(), total: results.len(), failed, csv_path })
}

/// Max relative error between analytic gradients (parameters and input) and
/// central finite differences of `output . upstream`.
pub fn gradcheck_max_rel_error(net: &Mlp, input: &[f64], upstream: &[f64]) -> f64 {
    let objective = |net: &Mlp, x: &[f64]| -> f64 {
        net.forward(x).unwrap().iter().zip(upstream).map(|(o, u)| o * u).sum()
    };
    let analytic = net.grad_params(input, upstream).unwrap();
    let d_input = net.grad_input(input, upstream).unwrap();
    let flat_analytic: Vec<f64> = analytic
        .w
        .iter()
        .zip(&analytic.b)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect();

    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut params = net.flat_params();
    let mut work = net.clone();
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        work.set_flat_params(&params).unwrap();
        let plus = objective(&work, input);
        params[i] = orig - h;
        work.set_flat_params(&params).unwrap();
        let minus = objective(&work, input);
        params[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = flat_analytic[i];
        let scale = a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max((a - numeric).abs() / scale);
    }
    work.set_flat_params(&params).unwrap();
    let mut x = input.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = objective(&work, &x);
        x[i] = orig - h;
        let minus = objective(&work, &x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = d_input[i];
        let scale = a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max((a - numeric).abs() / scale);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI_CONFIG: &str = r#"
env = "bandit"
algorithm = "gd2"
total_steps = 300
eval_interval = 100
eval_episodes = 3
bias_interval = 150
bias_states = 8
bias_rollouts = 2
seeds = [0, 1]
out_dir = "runs/test"
activation = { family = "poly", alpha = 0.05, k = 2, bias = 2.0 }

[agent]
batch_size = 16
warmup_steps = 32
buffer_capacity = 1000
hidden = [8, 8]
"#;

    #[test]
    fn config_parses_with_defaults_and_validates() {
        let config = ExperimentConfig::from_toml_str(MINI_CONFIG).unwrap();
        assert_eq!(config.env, "bandit");
        assert_eq!(config.algorithm, Algorithm::Gd2);
        assert_eq!(config.eval_interval, 100);
        assert_eq!(config.agent.batch_size, 16);
        // Defaults fill unspecified agent fields.
        assert_eq!(config.agent.tau, 5e-3);
        assert_eq!(config.agent.noise_count, 50);
        let agent_config = config.agent_config();
        assert_eq!(agent_config.hidden, vec![8, 8]);
    }

    #[test]
    fn config_rejects_unknown_env_and_missing_activation() {
        let bad_env = MINI_CONFIG.replace("\"bandit\"", "\"mujoco\"");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad_env),
            Err(ExperimentError::Env(_))
        ));
        let no_activation = MINI_CONFIG.replace(
            "activation = { family = \"poly\", alpha = 0.05, k = 2, bias = 2.0 }",
            "",
        );
        assert!(matches!(
            ExperimentConfig::from_toml_str(&no_activation),
            Err(ExperimentError::Train(_))
        ));
    }

    #[test]
    fn config_errors_carry_key_context() {
        let bad = MINI_CONFIG.replace("eval_interval = 100", "eval_interval = \"soon\"");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("eval_interval"), "message was: {msg}");
    }

    #[test]
    fn zero_steps_yield_header_only_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::from_toml_str(MINI_CONFIG).unwrap();
        config.total_steps = 0;
        config.out_dir = dir.path().join("empty").display().to_string();
        let out = run_experiment(&config).unwrap();
        let train = std::fs::read_to_string(out.join("train_seed0.csv")).unwrap();
        assert_eq!(train, format!("{TRAIN_HEADER}\n"));
        let aggregate = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
        assert_eq!(aggregate, format!("{AGGREGATE_HEADER}\n"));
        assert!(out.join("curve.svg").exists());
    }

    #[test]
    fn rerun_is_byte_identical_and_never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::from_toml_str(MINI_CONFIG).unwrap();
        config.out_dir = dir.path().join("run").display().to_string();
        let first = run_experiment(&config).unwrap();
        let second = run_experiment(&config).unwrap();
        assert_ne!(first, second, "second run must pick a fresh directory");
        for name in ["train_seed0.csv", "train_seed1.csv", "bias_seed0.csv", "aggregate.csv", "curve.svg"] {
            let a = std::fs::read(first.join(name)).unwrap();
            let b = std::fs::read(second.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn training_csv_rows_appear_at_eval_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::from_toml_str(MINI_CONFIG).unwrap();
        config.out_dir = dir.path().join("cadence").display().to_string();
        config.seeds = vec![0];
        let out = run_experiment(&config).unwrap();
        let train = std::fs::read_to_string(out.join("train_seed0.csv")).unwrap();
        let steps: Vec<u64> = train
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(steps, vec![100, 200, 300]);
    }

    #[test]
    fn fmt9_emits_nine_significant_digits() {
        assert_eq!(fmt9(2.45), "2.45000000e0");
        assert_eq!(fmt9(-0.0001234567891), "-1.23456789e-4");
        assert_eq!(fmt9(0.0), "0.00000000e0");
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(matches!(
            "frobnicate".parse::<Suite>(),
            Err(ExperimentError::UnknownSuite(_))
        ));
        assert_eq!("value-iteration".parse::<Suite>().unwrap(), Suite::ValueIteration);
    }

    #[test]
    fn gradcheck_suite_passes_and_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DiagnoseOptions {
            trials: Some(4),
            seed: 3,
            out_dir: dir.path().join("diag"),
        };
        let report = run_diagnostics(Suite::Gradcheck, &opts).unwrap();
        assert_eq!(report.total, 4);
        assert_eq!(report.failed, 0);
        let csv = std::fs::read_to_string(&report.csv_path).unwrap();
        assert!(csv.starts_with("trial,max_rel_err,ok\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(report.summary_json().contains("\"suite\":\"gradcheck\""));
    }

    #[test]
    fn operator_suite_small_run_all_hold() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DiagnoseOptions {
            trials: Some(50),
            seed: 11,
            out_dir: dir.path().join("diag"),
        };
        let report = run_diagnostics(Suite::Operator, &opts).unwrap();
        assert_eq!(report.total, 50);
        assert_eq!(report.failed, 0, "see {}", report.csv_path.display());
    }
}
