//! Discrete variance-preserving noise schedules.
//!
//! Grid index `t` runs over `0..=T`; `t = 0` is the data end where
//! `alpha = 1` and `sigma = 0`. The schedule also exposes a continuous-time
//! view (fractional `tau` in `[0, T]`) obtained by interpolating
//! `log alpha_bar` linearly between grid points, with `sigma` recovered from
//! the variance-preserving identity. The second-order solver needs this to
//! place its midpoint between two grid points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const G_SQ_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    log_alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Drift rate `f(t) = d log alpha / dt` and squared diffusion rate
/// `g(t)^2 = d sigma^2 / dt - 2 f(t) sigma^2` on the unit-step grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftCoeffs {
    pub f: f64,
    pub g_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleFile {
    num_steps: usize,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta VP schedule with `num_steps` reverse steps.
    pub fn linear(beta_start: f64, beta_end: f64, num_steps: usize) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {num_steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let last = (num_steps - 1) as f64;
        let beta = (0..num_steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / last).collect();
        Self::from_betas(beta)
    }

    /// The continuous-time limit of the 1000-step DDPM schedule (`beta` from
    /// `1e-4` to `0.02`), sampled on `num_steps` grid points: `alpha_bar_t`
    /// equals the continuous `alpha_bar(t / T)`. Every grid size therefore
    /// discretizes the same process and `alpha_bar_T` stays near zero.
    pub fn linear_rescaled(num_steps: usize) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {num_steps}")));
        }
        let (b0, b1) = (1e-4 * 1000.0, 0.02 * 1000.0);
        let log_ab = |u: f64| -(b0 * u + 0.5 * (b1 - b0) * u * u);
        let n = num_steps as f64;
        let beta = (1..=num_steps).map(|t| -(log_ab(t as f64 / n) - log_ab((t - 1) as f64 / n)).exp_m1()).collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("empty beta sequence".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
        }
        let mut log_alpha_bar = Vec::with_capacity(beta.len() + 1);
        log_alpha_bar.push(0.0);
        let mut acc = 0.0;
        for b in &beta {
            acc += (-b).ln_1p();
            log_alpha_bar.push(acc);
        }
        let alpha = log_alpha_bar.iter().map(|l| (0.5 * l).exp()).collect();
        let sigma = log_alpha_bar.iter().map(|l| (-l.exp_m1()).sqrt()).collect();
        Ok(Self { beta, log_alpha_bar, alpha, sigma })
    }

    /// Number of reverse steps `T`.
    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::StepOutOfRange { t, min: 1, max: self.num_steps() });
        }
        Ok(())
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `alpha'_t = 1 - beta_t`.
    pub fn alpha_prime(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Cumulative product `prod_{s <= t} (1 - beta_s)`; equals 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.log_alpha_bar[t].exp()
    }

    /// `1 - alpha_bar_t`, computed without cancellation.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        -self.log_alpha_bar[t].exp_m1()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn log_alpha(&self, t: usize) -> f64 {
        0.5 * self.log_alpha_bar[t]
    }

    /// Drift and diffusion coefficients at grid step `t`, by central
    /// differences (one-sided at `t = T`).
    pub fn drift_coeffs(&self, t: usize) -> Result<DriftCoeffs> {
        self.check_step(t)?;
        let log_alpha: Vec<f64> = (0..=self.num_steps()).map(|s| self.log_alpha(s)).collect();
        let sigma_sq: Vec<f64> = (0..=self.num_steps()).map(|s| self.one_minus_alpha_bar(s)).collect();
        let f = grid_derivative(&log_alpha, t);
        let d_sigma_sq = grid_derivative(&sigma_sq, t);
        let mut g_sq = d_sigma_sq - 2.0 * f * sigma_sq[t];
        if g_sq < 0.0 {
            if g_sq < -G_SQ_TOLERANCE {
                return Err(Error::Schedule(format!("negative diffusion rate {g_sq} at t = {t}")));
            }
            g_sq = 0.0;
        }
        Ok(DriftCoeffs { f, g_sq })
    }

    /// Half-log-SNR `lambda_t = log(alpha_t / sigma_t)`.
    pub fn half_log_snr(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::UndefinedSnr);
        }
        self.check_step(t)?;
        Ok(half_log_snr_from_log_alpha_bar(self.log_alpha_bar[t]))
    }

    /// `log alpha_bar` at fractional time, linear between grid points.
    pub fn log_alpha_bar_at(&self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, self.num_steps() as f64);
        let lo = tau.floor() as usize;
        if lo >= self.num_steps() {
            return self.log_alpha_bar[self.num_steps()];
        }
        let w = tau - lo as f64;
        (1.0 - w) * self.log_alpha_bar[lo] + w * self.log_alpha_bar[lo + 1]
    }

    pub fn alpha_at(&self, tau: f64) -> f64 {
        (0.5 * self.log_alpha_bar_at(tau)).exp()
    }

    pub fn sigma_at(&self, tau: f64) -> f64 {
        (-self.log_alpha_bar_at(tau).exp_m1()).sqrt()
    }

    pub fn half_log_snr_at(&self, tau: f64) -> Result<f64> {
        if tau <= 0.0 {
            return Err(Error::UndefinedSnr);
        }
        Ok(half_log_snr_from_log_alpha_bar(self.log_alpha_bar_at(tau)))
    }

    /// Finds the fractional time in `[lo, hi]` whose half-log-SNR equals
    /// `target`, by bisection (the half-log-SNR is strictly decreasing).
    pub fn time_for_half_log_snr(&self, target: f64, lo: f64, hi: f64) -> Result<f64> {
        if !(lo > 0.0 && lo < hi && hi <= self.num_steps() as f64) || !target.is_finite() {
            return Err(Error::MidpointInversion(format!("bad bracket [{lo}, {hi}] for target {target}")));
        }
        let (l_lo, l_hi) = (self.half_log_snr_at(lo)?, self.half_log_snr_at(hi)?);
        if !(l_hi <= target && target <= l_lo) {
            return Err(Error::MidpointInversion(format!("target {target} outside [{l_hi}, {l_lo}]")));
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.half_log_snr_at(mid)? > target {
                a = mid;
            } else {
                b = mid;
            }
            if b - a < 1e-14 {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// The intermediate time `s_t` of the second-order solver step `t -> t-1`:
    /// the point whose half-log-SNR is the average of the two endpoints.
    pub fn dpm_midpoint(&self, t: usize) -> Result<f64> {
        if t < 2 || t > self.num_steps() {
            return Err(Error::StepOutOfRange { t, min: 2, max: self.num_steps() });
        }
        let target = 0.5 * (self.half_log_snr(t - 1)? + self.half_log_snr(t)?);
        self.time_for_half_log_snr(target, (t - 1) as f64, t as f64)
    }

    pub fn to_json(&self) -> String {
        let file = ScheduleFile { num_steps: self.num_steps(), beta: self.beta.clone() };
        serde_json::to_string_pretty(&file).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(text)?;
        if file.beta.len() != file.num_steps {
            return Err(Error::Format(format!("num_steps = {} but {} beta values", file.num_steps, file.beta.len())));
        }
        Self::from_betas(file.beta)
    }
}

fn half_log_snr_from_log_alpha_bar(log_alpha_bar: f64) -> f64 {
    0.5 * (log_alpha_bar - (-log_alpha_bar.exp_m1()).ln())
}

/// Derivative of grid values at index `t` with unit spacing: central in the
/// interior, backward at the last index, forward at index 0.
pub fn grid_derivative(values: &[f64], t: usize) -> f64 {
    let last = values.len() - 1;
    if t == 0 {
        values[1] - values[0]
    } else if t == last {
        values[last] - values[last - 1]
    } else {
        0.5 * (values[t + 1] - values[t - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(NoiseSchedule::linear(0.0, 0.0, 10).is_err());
        assert!(NoiseSchedule::linear(1e-4, 0.02, 1).is_err());
        assert!(NoiseSchedule::linear(1e-4, 0.02, 0).is_err());
        assert!(NoiseSchedule::linear(0.5, 0.1, 10).is_err());
        assert!(NoiseSchedule::linear(0.1, 1.0, 10).is_err());
    }

    #[test]
    fn vp_identity_and_monotonicity() {
        let s = NoiseSchedule::linear(1e-4, 0.02, 1000).unwrap();
        let mut prod = 1.0;
        for t in 1..=s.num_steps() {
            prod *= 1.0 - s.beta(t);
            let (a, sg) = (s.alpha(t), s.sigma(t));
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            assert!((a * a - prod).abs() < 1e-12);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
        // direct product evaluation of alpha_bar_T
        assert!(prod < 1e-4, "alpha_bar_T = {prod}");
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-12);
    }

    #[test]
    fn constant_segment_has_zero_drift() {
        let flat = vec![-0.3; 6];
        for t in 0..6 {
            assert_eq!(grid_derivative(&flat, t), 0.0);
        }
    }

    #[test]
    fn drift_at_last_step_matches_half_spacing_difference() {
        let s = NoiseSchedule::linear(1e-4, 0.02, 100).unwrap();
        let t = s.num_steps();
        let f = s.drift_coeffs(t).unwrap().f;
        // centered difference at tau = T - 1/4 with half-step 1/4 on the
        // log-linear interpolant
        let tau = t as f64 - 0.25;
        let h = 0.25;
        let oracle = 0.5 * (s.log_alpha_bar_at(tau + h) - s.log_alpha_bar_at(tau - h)) / (2.0 * h);
        assert!(((f - oracle) / oracle).abs() < 1e-6, "{f} vs {oracle}");
    }

    #[test]
    fn diffusion_rate_is_nonnegative() {
        for s in [NoiseSchedule::linear(1e-4, 0.02, 100).unwrap(), NoiseSchedule::linear_rescaled(50).unwrap()] {
            for t in 1..=s.num_steps() {
                let d = s.drift_coeffs(t).unwrap();
                assert!(d.g_sq >= -1e-12);
                assert!(d.f < 0.0);
            }
        }
        let s = NoiseSchedule::linear_rescaled(10).unwrap();
        assert!(s.drift_coeffs(0).is_err());
        assert!(s.drift_coeffs(11).is_err());
    }

    #[test]
    fn half_log_snr_is_strictly_decreasing() {
        let s = NoiseSchedule::linear_rescaled(100).unwrap();
        assert!(matches!(s.half_log_snr(0), Err(Error::UndefinedSnr)));
        for t in 2..=s.num_steps() {
            assert!(s.half_log_snr(t - 1).unwrap() > s.half_log_snr(t).unwrap());
        }
    }

    #[test]
    fn half_log_snr_zero_where_alpha_equals_sigma() {
        // alpha_bar = 1/2 after one step with beta = 1/2
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert!(s.half_log_snr(1).unwrap().abs() < 1e-15);
    }

    #[test]
    fn midpoint_inversion_hits_target() {
        let s = NoiseSchedule::linear_rescaled(40).unwrap();
        for t in 2..=s.num_steps() {
            let target = 0.5 * (s.half_log_snr(t - 1).unwrap() + s.half_log_snr(t).unwrap());
            let mid = s.dpm_midpoint(t).unwrap();
            assert!(mid > (t - 1) as f64 && mid < t as f64);
            assert!((s.half_log_snr_at(mid).unwrap() - target).abs() < 1e-9);
        }
        assert!(s.dpm_midpoint(1).is_err());
    }

    #[test]
    fn json_round_trip_recomputes_derived_arrays() {
        let s = NoiseSchedule::linear_rescaled(20).unwrap();
        let back = NoiseSchedule::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        assert!(NoiseSchedule::from_json(r#"{"num_steps": 3, "beta": [0.1, 0.2]}"#).is_err());
    }
}
