use ndarray::Array1;

use super::coeffs::{Grid, StepRule};
use crate::error::Result;
use crate::field::PixelField;
use crate::moments::{AnalyticGammaTable, SamplerKind, VarianceInit};
use crate::predictor::AffineNoiseModel;
use crate::schedule::NoiseSchedule;

/// Exact `E(x_0)` and `Var(x_0)` when `eps(x, t) = A_t x + c_t` with
/// state-independent predictive variance: every step is a linear map of a
/// Gaussian, so both moments follow scalar recursions per pixel.
pub fn affine_closed_form(
    model: &dyn AffineNoiseModel,
    kind: SamplerKind,
    s: &NoiseSchedule,
    x_t: &PixelField,
    init: VarianceInit,
    analytic: Option<&AnalyticGammaTable>,
) -> Result<(PixelField, PixelField)> {
    x_t.check_len(model.dim())?;
    let d = model.dim();
    let grid = Grid::new(s.betas());
    let (mut mean, mut var) = match init {
        VarianceInit::Conditional => (x_t.data().clone(), Array1::zeros(d)),
        VarianceInit::Unconditional => (Array1::zeros(d), Array1::ones(d)),
    };
    for t in (1..=s.num_steps()).rev() {
        let tt = t as f64;
        let gamma = analytic.map(|a| a.get(t)).transpose()?;
        let (gain, off, g2) = (model.gain(tt), model.offset(tt), model.gamma_sq(tt));
        match grid.rule(kind, t, gamma)? {
            StepRule::FirstOrder { a, b, q } => {
                // x' = (a + b A) x + b c + b gamma z + sqrt(q) z'
                let lin = gain.mapv(|g| a + b * g);
                mean = &lin * &mean + &(off * b);
                var = &lin * &lin * &var + &(g2 * (b * b)) + q;
            }
            StepRule::Midpoint { p, r, tau, a, b } => {
                let (gain_s, off_s, g2_s) = (model.gain(tau), model.offset(tau), model.gamma_sq(tau));
                // x_s = (p + r A_t) x + r c_t + r gamma_t z
                // x'  = (a + b A_s (p + r A_t)) x + b (A_s r c_t + c_s) + b A_s r gamma_t z + b gamma_s z'
                let k = gain.mapv(|g| p + r * g);
                let lin = &gain_s * &k * b + a;
                let shift = (&gain_s * &off * r + &off_s) * b;
                let noise = &gain_s * &gain_s * &g2 * (b * b * r * r) + &(g2_s * (b * b));
                mean = &lin * &mean + &shift;
                var = &lin * &lin * &var + &noise;
            }
        }
    }
    let shape = x_t.shape();
    Ok((PixelField::from_array(shape, mean)?, PixelField::from_array(shape, var)?))
}
