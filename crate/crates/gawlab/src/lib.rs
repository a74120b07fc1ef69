//! Numerics laboratory for activation-weighted value estimation.
//!
//! The central object is the *generalized-activated weighting operator*: given
//! a landscape of Q-values over an action set and any non-decreasing weight
//! function g (an "activation" in the weighting sense, unrelated to neural
//! layer nonlinearities), the operator returns the g-weighted average
//!
//! ```text
//!     GA(Q) = sum_i g(Q_i) * Q_i * mu_i / sum_j g(Q_j) * mu_j
//! ```
//!
//! which interpolates between the mean operator (constant g) and the max
//! operator (sharply increasing g). The crate provides:
//!
//! - activation families and their validity / weighting-condition checks
//!   ([`activation`]),
//! - the operator itself, an importance-sampled Monte-Carlo estimator, and a
//!   certified bound on its distance to the max operator ([`operator`]),
//! - value iteration on finite MDPs under the operator with a per-iteration
//!   convergence gap bound ([`tabular`]),
//! - a self-contained dense network with exact reverse-mode gradients, Adam,
//!   and Polyak target updates ([`net`]),
//! - deterministic desk-scale control environments with rollout oracles
//!   ([`envs`]),
//! - DDPG, TD3, GD2 and GD3 update rules over those pieces ([`agents`]),
//! - bias measurement and synthetic bias-ordering studies ([`diagnostics`]),
//! - seeded experiment orchestration with CSV/SVG output ([`experiment`]).
//!
//! Everything is deterministic given explicit seeds; randomized routines take
//! their randomness as arguments and never touch global state.

pub mod activation;
pub mod agents;
pub mod diagnostics;
pub mod envs;
pub mod experiment;
pub mod landscape;
pub mod net;
pub mod operator;
pub mod tabular;

mod guide;

pub use activation::{ActivationFamily, ActivationSpec};
pub use landscape::QLandscape;
pub use operator::{BoundParams, GapBound, GaussianProposal};
