use ndarray::Array1;

use super::{affine_closed_form, compare_to_ensemble, ensemble_moments, ComparisonRow};
use crate::error::Result;
use crate::field::{PixelField, Shape};
use crate::moments::{
    run_bayesdiff, run_bayesdiff_exact, AnalyticGammaTable, BayesDiffConfig, SamplerKind, VarianceInit,
};
use crate::predictor::AffineScoreModel;
use crate::schedule::NoiseSchedule;

/// Relative tolerance of the exact recursion against the closed form.
pub const CLOSED_FORM_RTOL: f64 = 1e-10;

/// A few-pixel affine model with distinct per-pixel data statistics and
/// predictive variances, plus a fixed starting latent.
#[derive(Debug, Clone)]
pub struct AffineSetup {
    pub model: AffineScoreModel,
    pub schedule: NoiseSchedule,
    pub x_t: PixelField,
    pub analytic: AnalyticGammaTable,
}

impl AffineSetup {
    pub fn new(pixels: usize, steps: usize) -> Result<Self> {
        let schedule = NoiseSchedule::linear_rescaled(steps)?;
        let shape = Shape::flat(pixels);
        let p = |f: &dyn Fn(f64) -> f64| Array1::from_shape_fn(pixels, |i| f(i as f64));
        let model = AffineScoreModel::new(
            shape,
            schedule.clone(),
            p(&|i| 0.5 - 0.4 * i),
            p(&|i| 0.2 + 0.3 * i),
            p(&|i| 0.02 + 0.03 * i),
        )?;
        let x_t = PixelField::from_array(shape, p(&|i| 1.1 - 0.9 * i))?;
        let analytic = gaussian_gamma_table(&model)?;
        Ok(Self { model, schedule, x_t, analytic })
    }

    pub fn analytic_for(&self, kind: SamplerKind) -> Option<&AnalyticGammaTable> {
        (kind == SamplerKind::AnalyticDpm).then_some(&self.analytic)
    }

    pub fn config(&self, kind: SamplerKind, mc_samples: usize, seed: u64) -> BayesDiffConfig {
        let cfg = BayesDiffConfig::new(kind, mc_samples, seed);
        match self.analytic_for(kind) {
            Some(t) => cfg.with_analytic(t.clone()),
            None => cfg,
        }
    }
}

/// Analytic-DPM's `Gamma_t` for the model's own Gaussian data law:
/// `x_t - alpha mu ~ N(0, alpha^2 v + sigma^2)`, so the mean squared score
/// per pixel is `1 / (alpha^2 v + sigma^2)` averaged over pixels.
pub fn gaussian_gamma_table(model: &AffineScoreModel) -> Result<AnalyticGammaTable> {
    let s = model.schedule();
    let v = model.data_var();
    let values = (1..=s.num_steps())
        .map(|t| {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            v.iter().map(|v| 1.0 / (a * a * v + sg * sg)).sum::<f64>() / v.len() as f64
        })
        .collect();
    AnalyticGammaTable::new(values)
}

/// Outcome of the three-way comparison for one sampler.
#[derive(Debug, Clone)]
pub struct KindVerdict {
    pub kind: SamplerKind,
    /// Largest relative gap of the exact-covariance engine to the closed form.
    pub closed_form_rel: f64,
    pub max_z_mean: f64,
    pub max_z_var: f64,
    pub rows: Vec<ComparisonRow>,
    pub tolerance: f64,
}

impl KindVerdict {
    pub fn closed_form_ok(&self) -> bool {
        self.closed_form_rel <= CLOSED_FORM_RTOL
    }

    pub fn ensemble_ok(&self) -> bool {
        self.max_z_mean <= self.tolerance && self.max_z_var <= self.tolerance
    }

    pub fn passed(&self) -> bool {
        self.closed_form_ok() && self.ensemble_ok()
    }
}

fn rel_gap(a: &PixelField, b: &PixelField) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Runs the engine twice on the affine setup: with the exact covariance
/// (checked against the closed form) and with its Monte-Carlo estimate
/// (checked against an `n_ensemble`-trajectory ensemble, in standard errors).
pub fn verify_kind(
    setup: &AffineSetup,
    kind: SamplerKind,
    mc_samples: usize,
    n_ensemble: usize,
    tolerance: f64,
    seed: u64,
) -> Result<KindVerdict> {
    let cfg = setup.config(kind, mc_samples, seed);
    let analytic = setup.analytic_for(kind);
    let (exact, _) = run_bayesdiff_exact(&setup.x_t, &setup.model, &setup.schedule, &cfg)?;
    let (cf_mean, cf_var) =
        affine_closed_form(&setup.model, kind, &setup.schedule, &setup.x_t, VarianceInit::Conditional, analytic)?;
    let closed_form_rel = rel_gap(&exact.mean0, &cf_mean).max(rel_gap(&exact.var0, &cf_var));

    let (mc, _) = run_bayesdiff(&setup.x_t, &setup.model, &setup.schedule, &cfg)?;
    let ens = ensemble_moments(
        &setup.x_t,
        kind,
        &setup.model,
        &setup.schedule,
        n_ensemble,
        seed ^ 0x5eed,
        analytic,
        VarianceInit::Conditional,
    )?;
    let rows = compare_to_ensemble(kind, &mc, &ens);
    let max_abs = |f: &dyn Fn(&ComparisonRow) -> f64| rows.iter().map(|r| f(r).abs()).fold(0.0, f64::max);
    Ok(KindVerdict {
        kind,
        closed_form_rel,
        max_z_mean: max_abs(&|r| r.z_mean()),
        max_z_var: max_abs(&|r| r.z_var()),
        tolerance,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_kinds_pass_on_small_setup() {
        let setup = AffineSetup::new(2, 10).unwrap();
        for kind in SamplerKind::ALL {
            let v = verify_kind(&setup, kind, 16, 20_000, 4.0, 3).unwrap();
            assert!(v.closed_form_ok(), "{kind}: {}", v.closed_form_rel);
            assert!(v.ensemble_ok(), "{kind}: {} {}", v.max_z_mean, v.max_z_var);
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let setup = AffineSetup::new(2, 10).unwrap();
        let v = verify_kind(&setup, SamplerKind::Ddpm, 16, 1000, 0.0, 3).unwrap();
        assert!(v.closed_form_ok());
        assert!(!v.passed());
    }
}
