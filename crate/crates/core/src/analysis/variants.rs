use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::moments::{denoise_from, sample_vanilla, AnalyticGammaTable, SamplerKind, TrajectoryRecord};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::seed::child_rng;

/// Resampling step used when none is given: 80% of the way from `x_0` to
/// `x_T`.
pub fn default_resample_step(num_steps: usize) -> usize {
    (0.8 * num_steps as f64).round() as usize
}

fn normal_vector(seed: u64, label: &str, i: usize, d: usize) -> Array1<f64> {
    let mut rng = child_rng(seed, label, i as u64);
    Array1::from_shape_fn(d, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    })
}

/// Draws `n` latents from `N(E(x_t*), diag Var(x_t*))` and denoises each with
/// the plain sampler from `t*`. All variants share the sampler seed, so their
/// differences come from the resampled latent alone.
#[allow(clippy::too_many_arguments)]
pub fn resample_variants(
    traj: &TrajectoryRecord,
    t_star: usize,
    n: usize,
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    kind: SamplerKind,
    seed: u64,
    analytic: Option<&AnalyticGammaTable>,
) -> Result<Vec<PixelField>> {
    let state = traj.state_at(t_star)?;
    if state.var.as_slice().iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument(format!("negative variance at t = {t_star}")));
    }
    let sd = state.var.data().mapv(f64::sqrt);
    let shape = state.mean.shape();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let z = normal_vector(seed, "resample", i, shape.len());
            let x = PixelField::from_array(shape, state.mean.data() + &(&sd * &z))?;
            Ok(denoise_from(&x, t_star, model, kind, s, seed, analytic)?.0)
        })
        .collect()
}

/// Generations from the adjacent starting points
/// `sqrt(1 - eta) x_T + sqrt(eta) z`, denoised with the plain sampler.
#[allow(clippy::too_many_arguments)]
pub fn adjacent_generations(
    x_t: &PixelField,
    eta: f64,
    n: usize,
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    kind: SamplerKind,
    seed: u64,
    analytic: Option<&AnalyticGammaTable>,
) -> Result<Vec<PixelField>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta = {eta} outside [0, 1]")));
    }
    let shape = x_t.shape();
    let keep = (1.0 - eta).sqrt();
    let mix = eta.sqrt();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let z = normal_vector(seed, "adjacent", i, shape.len());
            let start = if eta == 0.0 { x_t.data().clone() } else { x_t.data() * keep + &(z * mix) };
            let start = PixelField::from_array(shape, start)?;
            Ok(sample_vanilla(&start, model, kind, s, seed, analytic)?.0)
        })
        .collect()
}

/// Mean Euclidean distance over all pairs; zero for fewer than two fields.
pub fn mean_pairwise_distance(fields: &[PixelField]) -> f64 {
    let n = fields.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = fields[i].data() - fields[j].data();
            total += diff.dot(&diff).sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}
