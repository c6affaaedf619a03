//! Noise schedules.
//!
//! A schedule fixes the masking rate `sigma(t)`, its integral `sigma_bar(t)` and
//! the per-token masking probability `lambda(t) = 1 - exp(-sigma_bar(t))` on
//! `[0, T]`. Every quantity is evaluated in closed form; nothing here is
//! differentiated or integrated numerically.

use serde::{Deserialize, Serialize};

use crate::error::{domain, RaddError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `sigma_bar(t) = -ln(1 - (1 - eps) t / T)`, so `lambda` is linear in `t`.
    LogLinear { eps: f64 },
    /// `sigma_bar(t) = sigma_min * ((sigma_max / sigma_min)^(t / T) - 1)`.
    Geometric { sigma_min: f64, sigma_max: f64 },
}

/// Values of the schedule at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub sigma: f64,
    pub sigma_bar: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    horizon: f64,
}

impl NoiseSchedule {
    pub fn log_linear(eps: f64) -> Result<Self> {
        Self::new(ScheduleKind::LogLinear { eps }, 1.0)
    }

    pub fn geometric(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(
            ScheduleKind::Geometric {
                sigma_min,
                sigma_max,
            },
            1.0,
        )
    }

    pub fn new(kind: ScheduleKind, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return domain(format!(
                "horizon must be positive and finite, got {horizon}"
            ));
        }
        match kind {
            ScheduleKind::LogLinear { eps } => {
                if !(eps > 0.0 && eps < 1.0) {
                    return domain(format!("log-linear eps must lie in (0, 1), got {eps}"));
                }
            }
            ScheduleKind::Geometric {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return domain(format!(
                        "geometric schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
                    ));
                }
            }
        }
        Ok(Self { kind, horizon })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// The horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_log_linear(&self) -> bool {
        matches!(self.kind, ScheduleKind::LogLinear { .. })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return domain(format!("time {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }

    /// `(sigma, sigma_bar, lambda)` at `t`.
    pub fn evaluate(&self, t: f64) -> Result<ScheduleValues> {
        self.check_time(t)?;
        Ok(ScheduleValues {
            sigma: self.sigma(t),
            sigma_bar: self.sigma_bar(t),
            lambda: self.lambda(t),
        })
    }

    /// Instantaneous rate `d sigma_bar / dt`. Unchecked: `t` must lie in `[0, T]`.
    pub fn sigma(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        match self.kind {
            ScheduleKind::LogLinear { eps } => {
                (1.0 - eps) / (self.horizon * (1.0 - (1.0 - eps) * u))
            }
            ScheduleKind::Geometric {
                sigma_min,
                sigma_max,
            } => {
                let ratio = sigma_max / sigma_min;
                sigma_min * ratio.powf(u) * ratio.ln() / self.horizon
            }
        }
    }

    /// Cumulative rate. Unchecked.
    pub fn sigma_bar(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        match self.kind {
            ScheduleKind::LogLinear { eps } => -(-(1.0 - eps) * u).ln_1p(),
            ScheduleKind::Geometric {
                sigma_min,
                sigma_max,
            } => sigma_min * ((sigma_max / sigma_min).ln() * u).exp_m1(),
        }
    }

    /// Masking probability `1 - exp(-sigma_bar(t))`. Unchecked.
    pub fn lambda(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LogLinear { eps } => (1.0 - eps) * (t / self.horizon),
            ScheduleKind::Geometric { .. } => -(-self.sigma_bar(t)).exp_m1(),
        }
    }

    /// Survival probability `exp(-sigma_bar(t)) = 1 - lambda(t)`. Unchecked.
    pub fn keep_prob(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LogLinear { eps } => 1.0 - (1.0 - eps) * (t / self.horizon),
            ScheduleKind::Geometric { .. } => (-self.sigma_bar(t)).exp(),
        }
    }

    /// The reparameterization scalar `exp(-sigma_bar) / (1 - exp(-sigma_bar))`.
    ///
    /// Infinite at `t = 0`; callers reject that point before asking.
    pub fn score_scalar(&self, t: f64) -> f64 {
        self.keep_prob(t) / self.lambda(t)
    }

    /// `lambda(T)`: the largest reachable masking probability.
    pub fn lambda_max(&self) -> f64 {
        self.lambda(self.horizon)
    }

    /// Time at which the masking probability equals `lambda`.
    pub fn lambda_inverse(&self, lambda: f64) -> Result<f64> {
        let max = self.lambda_max();
        if !(0.0..=max).contains(&lambda) {
            return domain(format!("lambda {lambda} outside [0, {max}]"));
        }
        if lambda == max {
            return Ok(self.horizon);
        }
        let u = match self.kind {
            ScheduleKind::LogLinear { eps } => lambda / (1.0 - eps),
            ScheduleKind::Geometric {
                sigma_min,
                sigma_max,
            } => {
                let sigma_bar = -(-lambda).ln_1p();
                (sigma_bar / sigma_min).ln_1p() / (sigma_max / sigma_min).ln()
            }
        };
        Ok((u * self.horizon).min(self.horizon))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LogLinear { eps: 1e-3 },
            horizon: 1.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_max: Option<f64>,
    #[serde(default = "unit_horizon")]
    horizon: f64,
}

fn unit_horizon() -> f64 {
    1.0
}

impl TryFrom<RawSchedule> for NoiseSchedule {
    type Error = RaddError;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        let kind = match raw.kind.as_str() {
            "loglinear" => {
                if raw.sigma_min.is_some() || raw.sigma_max.is_some() {
                    return domain("loglinear schedule takes only `eps`");
                }
                ScheduleKind::LogLinear {
                    eps: raw.eps.unwrap_or(1e-3),
                }
            }
            "geometric" => {
                if raw.eps.is_some() {
                    return domain(
                        "geometric schedule takes `sigma_min` and `sigma_max`, not `eps`",
                    );
                }
                ScheduleKind::Geometric {
                    sigma_min: raw.sigma_min.unwrap_or(1e-4),
                    sigma_max: raw.sigma_max.unwrap_or(20.0),
                }
            }
            other => return domain(format!("unknown schedule kind `{other}`")),
        };
        NoiseSchedule::new(kind, raw.horizon)
    }
}

impl From<NoiseSchedule> for RawSchedule {
    fn from(s: NoiseSchedule) -> Self {
        match s.kind {
            ScheduleKind::LogLinear { eps } => RawSchedule {
                kind: "loglinear".into(),
                eps: Some(eps),
                sigma_min: None,
                sigma_max: None,
                horizon: s.horizon,
            },
            ScheduleKind::Geometric {
                sigma_min,
                sigma_max,
            } => RawSchedule {
                kind: "geometric".into(),
                eps: None,
                sigma_min: Some(sigma_min),
                sigma_max: Some(sigma_max),
                horizon: s.horizon,
            },
        }
    }
}
