//! The deterministic control process driving greediness, regularization decay
//! and the trust-region parameter history.

use serde::{Deserialize, Serialize};

use crate::approximator::ParamVector;
use crate::error::{Error, Result};

/// Slope bound used when no greediness bound can be computed.
pub const DEFAULT_BETA: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Z2Mode {
    /// `z₂ ← α z₂` with `α < 1`.
    Geometric { alpha: f64 },
    /// `z₂ ← z₂ / (z₂ + α)` with `α > 1`.
    Rational { alpha: f64 },
}

impl Z2Mode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Z2Mode::Geometric { alpha } if (0.0..1.0).contains(&alpha) => Ok(()),
            Z2Mode::Rational { alpha } if alpha > 1.0 => Ok(()),
            other => Err(Error::Config(format!("invalid z2 schedule {other:?}"))),
        }
    }

    pub fn next(&self, z2: f64) -> f64 {
        match *self {
            Z2Mode::Geometric { alpha } => alpha * z2,
            Z2Mode::Rational { alpha } => z2 / (z2 + alpha),
        }
    }
}

impl Default for Z2Mode {
    fn default() -> Self {
        Z2Mode::Geometric { alpha: 0.999 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub beta: f64,
    pub z2_init: f64,
    pub z2_mode: Z2Mode,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            beta: DEFAULT_BETA,
            z2_init: 1.0,
            z2_mode: Z2Mode::default(),
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must exceed 1, got {}", self.beta)));
        }
        if !(self.z2_init > 0.0 && self.z2_init.is_finite()) {
            return Err(Error::Config(format!("z2_init must be positive, got {}", self.z2_init)));
        }
        self.z2_mode.validate()
    }
}

/// `z_n = ((z₁)_n, (z₂)_n, (z₁)_{n-1}, (z₂)_{n-1}, θ_{n-1}, ω_{n-1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub z1_now: f64,
    pub z2_now: f64,
    pub z1_prev: f64,
    pub z2_prev: f64,
    pub theta_prev: ParamVector,
    pub omega_prev: ParamVector,
    pub beta: f64,
    pub z2_mode: Z2Mode,
}

impl ControlState {
    /// Start of the process: `z₁ = 1`, `z₂ = z2_init`, history equal to the initial parameters.
    pub fn new(config: &ControlConfig, theta: &ParamVector, omega: &ParamVector) -> Self {
        ControlState {
            z1_now: 1.0,
            z2_now: config.z2_init,
            z1_prev: 1.0,
            z2_prev: config.z2_init,
            theta_prev: theta.clone(),
            omega_prev: omega.clone(),
            beta: config.beta,
            z2_mode: config.z2_mode,
        }
    }

    /// The fixed point `(β, 0)` with history pinned to the given parameters.
    pub fn limit(beta: f64, z2_mode: Z2Mode, theta: &ParamVector, omega: &ParamVector) -> Self {
        ControlState {
            z1_now: beta,
            z2_now: 0.0,
            z1_prev: beta,
            z2_prev: 0.0,
            theta_prev: theta.clone(),
            omega_prev: omega.clone(),
            beta,
            z2_mode,
        }
    }

    /// Same greediness and regularization weights with a different history.
    pub fn with_history(&self, theta_prev: &ParamVector, omega_prev: &ParamVector) -> Self {
        ControlState {
            theta_prev: theta_prev.clone(),
            omega_prev: omega_prev.clone(),
            ..self.clone()
        }
    }
}

/// One transition of the control process given the current iterates.
pub fn step_control(z: &ControlState, theta_now: &ParamVector, omega_now: &ParamVector) -> ControlState {
    ControlState {
        z1_now: (1.0 - 1.0 / z.beta) * z.z1_now + 1.0,
        z2_now: z.z2_mode.next(z.z2_now),
        z1_prev: z.z1_now,
        z2_prev: z.z2_now,
        theta_prev: theta_now.clone(),
        omega_prev: omega_now.clone(),
        beta: z.beta,
        z2_mode: z.z2_mode,
    }
}

/// Closed form of the slope recursion started at 1: `β − (β−1)(1−1/β)ⁿ`.
pub fn z1_closed_form(beta: f64, n: u32) -> f64 {
    beta - (beta - 1.0) * (1.0 - 1.0 / beta).powi(n as i32)
}

/// Slope above which a softmax policy with score gap `delta` has Q-values
/// within `epsilon / 2` of the optimal ones:
///
/// `max( log(|A|−1)/δ, −log(ε / (2T(|A|−1)|S|ᵀ|A|ᵀ(T+1)K_R)) / δ )`.
///
/// Degenerate inputs (one action, or `T = 0`) make the corresponding term `−∞`.
pub fn greediness_beta(
    num_actions: usize,
    num_states: usize,
    horizon: usize,
    reward_bound: f64,
    delta: f64,
    epsilon: f64,
) -> Result<f64> {
    if !(delta > 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidGap { delta, epsilon });
    }
    let others = num_actions.saturating_sub(1) as f64;
    let first = others.ln() / delta;
    let t = horizon as f64;
    // log of the denominator, kept in log space to avoid overflow of |S|^T |A|^T
    let log_denominator = (2.0 * t * others).ln()
        + t * (num_states as f64).ln()
        + t * (num_actions as f64).ln()
        + (t + 1.0).ln()
        + reward_bound.ln();
    let second = (log_denominator - epsilon.ln()) / delta;
    Ok(first.max(second))
}
