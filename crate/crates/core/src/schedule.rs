//! Shifted cosine variance-preserving noise schedule.
//!
//! `log SNR(t) = -2 ln tan(pi t / 2) + shift`, with `alpha_t^2 = sigmoid(lambda)`
//! and `sigma_t^2 = sigmoid(-lambda)`. All quantities are evaluated in f64;
//! times are clamped into `[t_min, t_max]` before use because the tangent
//! degenerates at both ends of the unit interval.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-5;
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub shift: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            shift: 0.0,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }
}

/// Signal and noise scales of `q(z_t | x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSigma {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_sq: f64,
    pub sigma_sq: f64,
}

/// Coefficients of the transition `q(z_t | z_s)` and the posterior
/// `q(z_s | z_t, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCoeffs {
    /// `alpha_{t|s}`
    pub alpha_ts: f64,
    /// `sigma^2_{t|s}`
    pub var_ts: f64,
    pub post_coef_z: f64,
    pub post_coef_x: f64,
    pub post_var: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Schedule {
    pub fn new(shift: f64, t_min: f64, t_max: f64) -> Result<Self> {
        let s = Schedule { shift, t_min, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn with_shift(shift: f64) -> Self {
        Schedule {
            shift,
            ..Schedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "schedule clamps must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if !self.shift.is_finite() {
            return Err(Error::Config("schedule shift must be finite".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }

    pub fn log_snr(&self, t: f64) -> f64 {
        let t = self.clamp(t);
        -2.0 * (PI * t / 2.0).tan().ln() + self.shift
    }

    pub fn snr(&self, t: f64) -> f64 {
        self.log_snr(t).exp()
    }

    pub fn alpha_sigma(&self, t: f64) -> AlphaSigma {
        let lambda = self.log_snr(t);
        let alpha_sq = sigmoid(lambda);
        let sigma_sq = sigmoid(-lambda);
        AlphaSigma {
            alpha: alpha_sq.sqrt(),
            sigma: sigma_sq.sqrt(),
            alpha_sq,
            sigma_sq,
        }
    }

    fn ordered(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let (s, t) = (self.clamp(s), self.clamp(t));
        if s > t {
            return Err(Error::Ordering { s, t });
        }
        Ok((s, t))
    }

    /// `(alpha_{t|s}, sigma^2_{t|s})` for `s <= t`.
    pub fn transition(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let (s, t) = self.ordered(s, t)?;
        if s == t {
            return Ok((1.0, 0.0));
        }
        let at = self.alpha_sigma(t);
        let a_s = self.alpha_sigma(s);
        let alpha_ts = at.alpha / a_s.alpha;
        // sigma_t^2 - alpha_{t|s}^2 sigma_s^2 = sigma_t^2 (1 - exp(lambda_t - lambda_s))
        let var_ts = (-at.sigma_sq * (self.log_snr(t) - self.log_snr(s)).exp_m1()).max(0.0);
        Ok((alpha_ts, var_ts))
    }

    pub fn posterior(&self, s: f64, t: f64) -> Result<KernelCoeffs> {
        let (s, t) = self.ordered(s, t)?;
        if s == t {
            return Ok(KernelCoeffs {
                alpha_ts: 1.0,
                var_ts: 0.0,
                post_coef_z: 1.0,
                post_coef_x: 0.0,
                post_var: 0.0,
            });
        }
        let (alpha_ts, var_ts) = self.transition(s, t)?;
        let a_s = self.alpha_sigma(s);
        let at = self.alpha_sigma(t);
        Ok(KernelCoeffs {
            alpha_ts,
            var_ts,
            post_coef_z: alpha_ts * a_s.sigma_sq / at.sigma_sq,
            post_coef_x: a_s.alpha * var_ts / at.sigma_sq,
            post_var: var_ts * a_s.sigma_sq / at.sigma_sq,
        })
    }

    /// `d lambda / dt = -2 pi / sin(pi t)`; independent of the shift.
    pub fn log_snr_prime(&self, t: f64) -> f64 {
        let t = self.clamp(t);
        -2.0 * PI / (PI * t).sin()
    }

    /// `d SNR / dt`, strictly negative.
    pub fn snr_prime(&self, t: f64) -> f64 {
        self.snr(t) * self.log_snr_prime(t)
    }

    /// `N + 1` increasing times from `t_min` to `t_max`, uniformly spaced.
    pub fn time_grid(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::contract("time grid needs at least one step"));
        }
        let span = self.t_max - self.t_min;
        Ok((0..=n)
            .map(|i| {
                if i == n {
                    self.t_max
                } else {
                    self.t_min + span * i as f64 / n as f64
                }
            })
            .collect())
    }
}
