//! Weighting activations: parameterized non-decreasing functions `g(x; psi)`
//! applied to Q-values to produce operator weights.
//!
//! Five families are supported. With parameters `psi = (alpha, k, beta, bias)`:
//!
//! | family        | g(x)                  | validity                  |
//! |---------------|-----------------------|---------------------------|
//! | `Polynomial`  | `alpha * x^k + bias`  | `alpha > 0`, `k > 0`      |
//! | `Tanh`        | `tanh(beta*x) + bias` | `beta > 0`                |
//! | `Exponential` | `exp(beta*x) + bias`  | `beta > 0`                |
//! | `Linear`      | `alpha * x + bias`    | `alpha >= 0`              |
//! | `Constant`    | `bias`                | `bias > 0`                |
//!
//! The bias term must be non-negative for every family; it softens the
//! weighting toward the mean operator without breaking monotonicity.
//!
//! Polynomial activations are only monotone on the positive half-line, so
//! callers that may see negative Q-values (the operator, value iteration, the
//! agents) translate their inputs into `(0, +inf)` before evaluating; see
//! [`crate::operator::polynomial_shift`].

use crate::landscape::QLandscape;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ActivationError {
    #[error("invalid activation spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite input to activation: {x}")]
    NonFiniteInput { x: f64 },
    #[error("polynomial activation with fractional index {k} evaluated on negative base {x}")]
    Domain { x: f64, k: f64 },
    #[error("landscape error: {0}")]
    Landscape(#[from] crate::landscape::LandscapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationFamily {
    #[serde(rename = "poly")]
    Polynomial,
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "exp")]
    Exponential,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "constant")]
    Constant,
}

impl std::fmt::Display for ActivationFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ActivationFamily::Polynomial => "poly",
            ActivationFamily::Tanh => "tanh",
            ActivationFamily::Exponential => "exp",
            ActivationFamily::Linear => "linear",
            ActivationFamily::Constant => "constant",
        };
        f.write_str(name)
    }
}

/// A parameterized weighting function. Unused parameters for a family default
/// to zero and are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub family: ActivationFamily,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub k: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub bias: f64,
}

impl ActivationSpec {
    pub fn polynomial(alpha: f64, k: f64, bias: f64) -> Self {
        Self { family: ActivationFamily::Polynomial, alpha, k, beta: 0.0, bias }
    }

    pub fn tanh(beta: f64, bias: f64) -> Self {
        Self { family: ActivationFamily::Tanh, alpha: 0.0, k: 0.0, beta, bias }
    }

    pub fn exponential(beta: f64, bias: f64) -> Self {
        Self { family: ActivationFamily::Exponential, alpha: 0.0, k: 0.0, beta, bias }
    }

    pub fn linear(alpha: f64, bias: f64) -> Self {
        Self { family: ActivationFamily::Linear, alpha, k: 0.0, beta: 0.0, bias }
    }

    pub fn constant(bias: f64) -> Self {
        Self { family: ActivationFamily::Constant, alpha: 0.0, k: 0.0, beta: 0.0, bias }
    }

    /// Check the family-specific parameter invariants.
    pub fn validate(&self) -> Result<(), ActivationError> {
        let finite = [self.alpha, self.k, self.beta, self.bias]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ActivationError::InvalidSpec(
                "activation parameters must be finite".into(),
            ));
        }
        if self.bias < 0.0 {
            return Err(ActivationError::InvalidSpec(format!(
                "bias must be non-negative, got {}",
                self.bias
            )));
        }
        match self.family {
            ActivationFamily::Polynomial => {
                if self.alpha <= 0.0 || self.k <= 0.0 {
                    return Err(ActivationError::InvalidSpec(format!(
                        "polynomial requires alpha > 0 and k > 0, got alpha={} k={}",
                        self.alpha, self.k
                    )));
                }
            }
            ActivationFamily::Tanh | ActivationFamily::Exponential => {
                if self.beta <= 0.0 {
                    return Err(ActivationError::InvalidSpec(format!(
                        "{} requires beta > 0, got {}",
                        self.family, self.beta
                    )));
                }
            }
            ActivationFamily::Linear => {
                if self.alpha < 0.0 {
                    return Err(ActivationError::InvalidSpec(format!(
                        "linear requires alpha >= 0, got {}",
                        self.alpha
                    )));
                }
            }
            ActivationFamily::Constant => {
                if self.bias <= 0.0 {
                    return Err(ActivationError::InvalidSpec(format!(
                        "constant activation requires bias > 0, got {}",
                        self.bias
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluate `g(x; psi)`.
    pub fn eval(&self, x: f64) -> Result<f64, ActivationError> {
        if !x.is_finite() {
            return Err(ActivationError::NonFiniteInput { x });
        }
        let g = match self.family {
            ActivationFamily::Polynomial => {
                if x < 0.0 && self.k.fract() != 0.0 {
                    return Err(ActivationError::Domain { x, k: self.k });
                }
                self.alpha * pow_index(x, self.k) + self.bias
            }
            ActivationFamily::Tanh => (self.beta * x).tanh() + self.bias,
            ActivationFamily::Exponential => (self.beta * x).exp() + self.bias,
            ActivationFamily::Linear => self.alpha * x + self.bias,
            ActivationFamily::Constant => self.bias,
        };
        Ok(g)
    }

    /// `ln g(x; psi)`, computed without overflow for the exponential family.
    ///
    /// For `exp(beta*x) + b` this is `logaddexp(beta*x, ln b)`, which stays
    /// finite where the direct evaluation would overflow. Other families
    /// evaluate directly; the result is `-inf`/NaN for non-positive weights,
    /// which callers treat as invalid.
    pub fn log_eval(&self, x: f64) -> Result<f64, ActivationError> {
        if self.family == ActivationFamily::Exponential {
            if !x.is_finite() {
                return Err(ActivationError::NonFiniteInput { x });
            }
            let t = self.beta * x;
            if self.bias == 0.0 {
                return Ok(t);
            }
            return Ok(log_add_exp(t, self.bias.ln()));
        }
        Ok(self.eval(x)?.ln())
    }

    /// True iff `eval` is non-decreasing over the uniform grid on `[lo, hi]`.
    pub fn validate_nondecreasing(
        &self,
        lo: f64,
        hi: f64,
        grid_points: usize,
    ) -> Result<bool, ActivationError> {
        if !(lo < hi) || grid_points < 2 {
            return Err(ActivationError::InvalidSpec(format!(
                "grid requires lo < hi and grid_points >= 2, got [{lo}, {hi}] with {grid_points}"
            )));
        }
        let step = (hi - lo) / (grid_points - 1) as f64;
        let mut prev = self.eval(lo)?;
        for i in 1..grid_points {
            let x = lo + step * i as f64;
            let cur = self.eval(x)?;
            if cur < prev {
                return Ok(false);
            }
            prev = cur;
        }
        Ok(true)
    }

    /// Discrete form of the weighting condition that puts the activated
    /// average at or above the plain average:
    ///
    /// ```text
    ///     (sum_i g(Q_i) Q_i mu_i)(sum_j mu_j) >= (sum_i g(Q_i) mu_i)(sum_j Q_j mu_j)
    /// ```
    ///
    /// Any non-decreasing g with positive weights satisfies it (a weighted
    /// Chebyshev sum inequality); the check is numerical so it can be run over
    /// randomized landscapes and arbitrary specs.
    pub fn check_condition1(&self, landscape: &QLandscape) -> Result<bool, ActivationError> {
        if landscape.is_empty() {
            return Err(crate::landscape::LandscapeError::Empty.into());
        }
        let mut gq = crate::operator::KahanSum::new();
        let mut g = crate::operator::KahanSum::new();
        let mut q = crate::operator::KahanSum::new();
        let mut m = crate::operator::KahanSum::new();
        for (&qi, &mu) in landscape.qs().iter().zip(landscape.measure()) {
            let gi = self.eval(qi)?;
            if !gi.is_finite() {
                return Err(ActivationError::NonFiniteInput { x: gi });
            }
            gq.add(gi * qi * mu);
            g.add(gi * mu);
            q.add(qi * mu);
            m.add(mu);
        }
        let lhs = gq.value() * m.value();
        let rhs = g.value() * q.value();
        // Equality (constant landscapes) must pass despite roundoff.
        let tol = 1e-12 * lhs.abs().max(rhs.abs()).max(1.0);
        Ok(lhs >= rhs - tol)
    }
}

/// `x^k` using the exact integer power when `k` is integral.
fn pow_index(x: f64, k: f64) -> f64 {
    if k.fract() == 0.0 && k.abs() <= i32::MAX as f64 {
        x.powi(k as i32)
    } else {
        x.powf(k)
    }
}

/// `ln(exp(a) + exp(b))` without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}
