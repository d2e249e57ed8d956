use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::score_model::Dataset;
use crate::seed::child_rng;

/// Mean squared score norm per dimension, `(1/M) sum_m ||eps_theta(x_m, t) / sigma_t||^2 / d`
/// over forward-diffused data `x_m = alpha_t x_0 + sigma_t eps`.
pub fn estimate_analytic_gamma(
    model: &dyn NoisePredictor,
    data: &Dataset,
    s: &NoiseSchedule,
    t: usize,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one Gamma sample".into()));
    }
    if t == 0 || t > s.num_steps() {
        return Err(Error::StepOutOfRange { t, min: 1, max: s.num_steps() });
    }
    let d = model.dim();
    if data.shape().len() != d {
        return Err(Error::ShapeMismatch { expected: d, got: data.shape().len() });
    }
    let mut rng = child_rng(seed, "analytic-gamma", t as u64);
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let mut xs = Array2::zeros((m, d));
    for mut row in xs.rows_mut() {
        let i = rng.gen_range(0..data.len());
        for (p, v) in row.iter_mut().enumerate() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = a * data.samples()[[i, p]] + sg * eps;
        }
    }
    let eps = model.mean_batch(xs.view(), t as f64)?;
    let total: f64 = eps.iter().map(|e| (e / sg).powi(2)).sum();
    Ok(total / (m * d) as f64)
}

/// Per-step `Gamma_t` for `t = 1..=T`, computed once per (model, schedule,
/// dataset) and reused across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGammaTable {
    values: Vec<f64>,
}

impl AnalyticGammaTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("Gamma values must be finite and nonnegative".into()));
        }
        Ok(Self { values })
    }

    pub fn estimate(
        model: &dyn NoisePredictor,
        data: &Dataset,
        s: &NoiseSchedule,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        let values = (1..=s.num_steps())
            .map(|t| estimate_analytic_gamma(model, data, s, t, m, seed))
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn get(&self, t: usize) -> Result<f64> {
        self.values.get(t.wrapping_sub(1)).copied().ok_or(Error::StepOutOfRange { t, min: 1, max: self.values.len() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
