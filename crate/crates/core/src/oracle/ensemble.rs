use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::coeffs::{Grid, StepRule};
use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::moments::{AnalyticGammaTable, SamplerKind, VarianceInit};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::seed::{child_rng, derive_seed};

/// Trajectories simulated together as one batch.
const CHUNK: usize = 2048;

/// Empirical moments of `x_0` over independent trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMoments {
    pub n: usize,
    pub mean: PixelField,
    /// Unbiased sample variance.
    pub var: PixelField,
    /// Standard error of the mean.
    pub stderr: PixelField,
    /// Standard error of the variance estimate, from the fourth central moment.
    pub stderr_var: PixelField,
}

fn normals(rng: &mut impl rand::Rng, rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

fn simulate_chunk(
    x_t: &PixelField,
    model: &dyn NoisePredictor,
    rules: &[StepRule],
    rows: usize,
    seed: u64,
    chunk: usize,
    init: VarianceInit,
) -> Result<Array2<f64>> {
    let d = model.dim();
    let mut rng = child_rng(seed, "ensemble", chunk as u64);
    let mut x = match init {
        VarianceInit::Conditional => x_t.data().broadcast((rows, d)).unwrap().to_owned(),
        VarianceInit::Unconditional => normals(&mut rng, rows, d),
    };
    let big_t = rules.len();
    for t in (1..=big_t).rev() {
        let gseed = derive_seed(seed, "ensemble-gamma", (chunk * (big_t + 1) + t) as u64);
        let (m, g2) = model.predictive_batch(x.view(), t as f64, gseed)?;
        let eps = m + &(g2.mapv(f64::sqrt) * &normals(&mut rng, rows, d));
        x = match rules[t - 1] {
            StepRule::FirstOrder { a, b, q } => {
                let mut next = &x * a + &(eps * b);
                if q > 0.0 {
                    next += &(normals(&mut rng, rows, d) * q.sqrt());
                }
                next
            }
            StepRule::Midpoint { p, r, tau, a, b } => {
                let x_mid = &x * p + &(eps * r);
                let (ms, g2s) = model.predictive_batch(x_mid.view(), tau, gseed ^ 1)?;
                let eps_s = ms + &(g2s.mapv(f64::sqrt) * &normals(&mut rng, rows, d));
                &x * a + &(eps_s * b)
            }
        };
    }
    Ok(x)
}

/// Brute-force moments of `x_0`: `n` independent trajectories, each drawing
/// every noise prediction from the predictive `N(eps_theta, gamma^2)` and
/// fresh injected noise. Chunks of trajectories run in parallel with seeds
/// derived from `(seed, chunk index)`, so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_moments(
    x_t: &PixelField,
    kind: SamplerKind,
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
    analytic: Option<&AnalyticGammaTable>,
    init: VarianceInit,
) -> Result<EnsembleMoments> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("ensemble needs at least 100 trajectories, got {n}")));
    }
    x_t.check_len(model.dim())?;
    let grid = Grid::new(s.betas());
    let rules = (1..=s.num_steps())
        .map(|t| {
            let gamma = analytic.map(|a| a.get(t)).transpose()?;
            grid.rule(kind, t, gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks = n.div_ceil(CHUNK);
    let finals = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK.min(n - c * CHUNK);
            simulate_chunk(x_t, model, &rules, rows, seed, c, init)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = finals.iter().map(|a| a.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
    summarize(&all, x_t)
}

/// Mean, unbiased variance and their standard errors for the rows of `xs`.
pub fn summarize(xs: &Array2<f64>, like: &PixelField) -> Result<EnsembleMoments> {
    let n = xs.nrows();
    let nf = n as f64;
    let first = xs.row(0).to_owned();
    let shifted = xs - &first;
    let mean = &first + &(shifted.sum_axis(Axis(0)) / nf);
    let dev = xs - &mean;
    let m2 = dev.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
    let m4 = dev.mapv(|v| v.powi(4)).sum_axis(Axis(0)) / nf;
    let var = &m2 * (nf / (nf - 1.0));
    let stderr = var.mapv(|v| (v / nf).sqrt());
    let stderr_var: Array1<f64> = m4
        .iter()
        .zip(var.iter())
        .map(|(k4, v)| ((k4 - (nf - 3.0) / (nf - 1.0) * v * v) / nf).max(0.0).sqrt())
        .collect();
    let shape = like.shape();
    Ok(EnsembleMoments {
        n,
        mean: PixelField::from_array(shape, mean)?,
        var: PixelField::from_array(shape, var)?,
        stderr: PixelField::from_array(shape, stderr)?,
        stderr_var: PixelField::from_array(shape, stderr_var)?,
    })
}
