use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::analytic::AnalyticGammaTable;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    EulerSde,
    Ddpm,
    AnalyticDpm,
    Ddim,
    DpmSolver2,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [Self::EulerSde, Self::Ddpm, Self::AnalyticDpm, Self::Ddim, Self::DpmSolver2];

    pub fn name(&self) -> &'static str {
        match self {
            Self::EulerSde => "euler_sde",
            Self::Ddpm => "ddpm",
            Self::AnalyticDpm => "analytic_dpm",
            Self::Ddim => "ddim",
            Self::DpmSolver2 => "dpm_solver2",
        }
    }

    /// Whether the sampler injects fresh Gaussian noise at each step.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Self::EulerSde | Self::Ddpm | Self::AnalyticDpm)
    }

    /// Network evaluations of the plain sampler at step `t`.
    pub fn evals_per_step(&self, t: usize) -> usize {
        if *self == Self::DpmSolver2 && t >= 2 {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownSampler(s.to_owned()))
    }
}

/// A first-order step `x_{t-1} = a x_t + b eps_t + sqrt(injected) z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
    pub injected: f64,
}

/// The two stages of a second-order DPM-Solver step `t -> t-1`:
/// `x_s = mid_a x_t + mid_b eps_t` at fractional time `mid_time`, then
/// `x_{t-1} = a x_t + b eps_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpmCoefficients {
    pub mid_time: f64,
    pub mid_a: f64,
    pub mid_b: f64,
    pub a: f64,
    pub b: f64,
}

impl DpmCoefficients {
    pub fn outer(&self) -> StepCoefficients {
        StepCoefficients { a: self.a, b: self.b, injected: 0.0 }
    }
}

/// Coefficients of the first-order update of `kind` at step `t`. The
/// second-order solver uses the DDIM step at `t = 1`, where the next
/// half-log-SNR is infinite.
pub fn first_order_coefficients(
    kind: SamplerKind,
    s: &NoiseSchedule,
    t: usize,
    analytic: Option<&AnalyticGammaTable>,
) -> Result<StepCoefficients> {
    if t == 0 || t > s.num_steps() {
        return Err(Error::StepOutOfRange { t, min: 1, max: s.num_steps() });
    }
    let coeffs = match kind {
        SamplerKind::EulerSde => {
            let d = s.drift_coeffs(t)?;
            StepCoefficients { a: 1.0 - d.f, b: -d.g_sq / s.sigma(t), injected: d.g_sq }
        }
        SamplerKind::Ddpm | SamplerKind::AnalyticDpm => {
            let ap = s.alpha_prime(t);
            let a = 1.0 / ap.sqrt();
            let b = -s.beta(t) / (ap * s.one_minus_alpha_bar(t)).sqrt();
            let injected = if kind == SamplerKind::Ddpm {
                s.beta(t)
            } else {
                let table =
                    analytic.ok_or_else(|| Error::InvalidArgument("analytic_dpm needs a Gamma table".into()))?;
                analytic_dpm_variance(s, t, table.get(t)?)
            };
            StepCoefficients { a, b, injected }
        }
        SamplerKind::Ddim => ddim(s, t),
        SamplerKind::DpmSolver2 if t == 1 => ddim(s, t),
        SamplerKind::DpmSolver2 => {
            return Err(Error::InvalidArgument(format!(
                "dpm_solver2 step {t} is second order; use dpm_solver2_coefficients"
            )))
        }
    };
    if coeffs.injected < 0.0 || !coeffs.injected.is_finite() {
        return Err(Error::NegativeInjectedVariance { t, value: coeffs.injected });
    }
    Ok(coeffs)
}

fn ddim(s: &NoiseSchedule, t: usize) -> StepCoefficients {
    let a = s.alpha(t - 1) / s.alpha(t);
    StepCoefficients { a, b: s.sigma(t - 1) - a * s.sigma(t), injected: 0.0 }
}

pub fn dpm_solver2_coefficients(s: &NoiseSchedule, t: usize) -> Result<DpmCoefficients> {
    let mid_time = s.dpm_midpoint(t)?;
    let h = s.half_log_snr(t - 1)? - s.half_log_snr(t)?;
    let a = s.alpha(t - 1) / s.alpha(t);
    Ok(DpmCoefficients {
        mid_time,
        mid_a: s.alpha_at(mid_time) / s.alpha(t),
        mid_b: -s.sigma_at(mid_time) * (0.5 * h).exp_m1(),
        a,
        b: -s.sigma(t - 1) * h.exp_m1(),
    })
}

/// Injected-noise variance of Analytic-DPM at step `t` given the
/// dataset-averaged squared score norm `gamma`. The correction factor
/// `1 - (1 - alpha_bar_t) gamma` is clamped to `[0, 1]`.
pub fn analytic_dpm_variance(s: &NoiseSchedule, t: usize, gamma: f64) -> f64 {
    let oma_t = s.one_minus_alpha_bar(t);
    let oma_prev = s.one_minus_alpha_bar(t - 1);
    let lambda_sq = oma_prev / oma_t * s.beta(t);
    let gap = (oma_t / s.alpha_prime(t)).sqrt() - (oma_prev - lambda_sq).max(0.0).sqrt();
    let factor = (1.0 - oma_t * gamma).clamp(0.0, 1.0);
    lambda_sq + gap * gap * factor
}
