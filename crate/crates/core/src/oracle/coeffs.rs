//! Sampler coefficients derived directly from the betas, kept separate from
//! the engine's schedule code so the oracles do not share its mistakes.

use crate::error::{Error, Result};
use crate::moments::SamplerKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum StepRule {
    /// `x' = a x + b eps + sqrt(q) z`.
    FirstOrder { a: f64, b: f64, q: f64 },
    /// `x_s = p x + r eps_t` evaluated at time `tau`, then `x' = a x + b eps_s`.
    Midpoint { p: f64, r: f64, tau: f64, a: f64, b: f64 },
}

pub(crate) struct Grid {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Grid {
    pub(crate) fn new(beta: &[f64]) -> Self {
        let mut alpha_bar = vec![1.0];
        for b in beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Self { beta: beta.to_vec(), alpha_bar }
    }

    fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    fn lambda(&self, t: usize) -> f64 {
        self.alpha(t).ln() - self.sigma(t).ln()
    }

    fn slope(&self, v: &dyn Fn(usize) -> f64, t: usize) -> f64 {
        let n = self.beta.len();
        if t == n {
            v(n) - v(n - 1)
        } else {
            (v(t + 1) - v(t - 1)) / 2.0
        }
    }

    pub(crate) fn rule(&self, kind: SamplerKind, t: usize, analytic_gamma: Option<f64>) -> Result<StepRule> {
        let beta = self.beta[t - 1];
        let ab = &self.alpha_bar;
        Ok(match kind {
            SamplerKind::EulerSde => {
                let f = self.slope(&|s| 0.5 * ab[s].ln(), t);
                let var_rate = self.slope(&|s| 1.0 - ab[s], t);
                let g2 = (var_rate - 2.0 * f * (1.0 - ab[t])).max(0.0);
                StepRule::FirstOrder { a: 1.0 - f, b: -g2 / self.sigma(t), q: g2 }
            }
            SamplerKind::Ddpm | SamplerKind::AnalyticDpm => {
                let a = 1.0 / (1.0 - beta).sqrt();
                let b = -beta / ((1.0 - beta) * (1.0 - ab[t])).sqrt();
                let q = if kind == SamplerKind::Ddpm {
                    beta
                } else {
                    let gamma =
                        analytic_gamma.ok_or_else(|| Error::InvalidArgument("analytic_dpm needs Gamma".into()))?;
                    let post = (1.0 - ab[t - 1]) * beta / (1.0 - ab[t]);
                    let root = ((1.0 - ab[t]) / (1.0 - beta)).sqrt() - (1.0 - ab[t - 1] - post).max(0.0).sqrt();
                    post + root * root * (1.0 - (1.0 - ab[t]) * gamma).clamp(0.0, 1.0)
                };
                StepRule::FirstOrder { a, b, q }
            }
            SamplerKind::Ddim => self.ddim(t),
            SamplerKind::DpmSolver2 if t == 1 => self.ddim(t),
            SamplerKind::DpmSolver2 => {
                let (lo, hi) = (self.lambda(t - 1), self.lambda(t));
                let h = lo - hi;
                let mid = 0.5 * (lo + hi);
                // On a segment where log alpha_bar is linear in time, the
                // point with half-log-SNR `mid` has log alpha_bar = -ln(1 + e^{-2 mid}).
                let log_ab = -(-2.0 * mid).exp().ln_1p();
                let (l0, l1) = (ab[t - 1].ln(), ab[t].ln());
                let tau = (t - 1) as f64 + (log_ab - l0) / (l1 - l0);
                let alpha_s = (0.5 * log_ab).exp();
                let sigma_s = (1.0 - log_ab.exp()).sqrt();
                StepRule::Midpoint {
                    p: alpha_s / self.alpha(t),
                    r: -sigma_s * ((h / 2.0).exp() - 1.0),
                    tau,
                    a: self.alpha(t - 1) / self.alpha(t),
                    b: -self.sigma(t - 1) * (h.exp() - 1.0),
                }
            }
        })
    }

    fn ddim(&self, t: usize) -> StepRule {
        let a = self.alpha(t - 1) / self.alpha(t);
        StepRule::FirstOrder { a, b: self.sigma(t - 1) - a * self.sigma(t), q: 0.0 }
    }
}
