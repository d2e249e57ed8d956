use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::predictor::NoisePredictor;
use crate::seed::{child_rng, derive_seed};

/// How the `S` Gaussian draws behind the covariance estimate are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McScheme {
    /// Independent standard normals.
    Iid,
    /// Per pixel, the normals are centred and rescaled to unit mean square,
    /// so the draws reproduce the target mean and variance exactly. The
    /// resulting estimate is exact whenever the noise prediction is affine
    /// in each pixel. Falls back to i.i.d. draws for `S < 2`.
    #[default]
    MomentMatched,
}

/// Moments of the noise prediction consumed by one step of the recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsMoments {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    /// Covariance between `x_t` and the noise prediction used by the step.
    pub cov: Array1<f64>,
}

impl EpsMoments {
    /// Moments of a noise prediction treated as a known constant.
    pub fn deterministic(eps: Array1<f64>) -> Self {
        let d = eps.len();
        Self { mean: eps, var: Array1::zeros(d), cov: Array1::zeros(d) }
    }
}

/// `s × d` standard-normal draws under `scheme`. With `orthogonal_to`, each
/// moment-matched column is additionally made orthogonal to the matching
/// column of that (already centred) draw, so the two sets have zero sample
/// correlation.
pub fn standard_normals<R: Rng>(
    s: usize,
    d: usize,
    scheme: McScheme,
    rng: &mut R,
    orthogonal_to: Option<&Array2<f64>>,
) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((s, d), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    if scheme == McScheme::Iid || s < 2 {
        return z;
    }
    for (p, mut col) in z.columns_mut().into_iter().enumerate() {
        let mean = col.sum() / s as f64;
        col -= mean;
        if let Some(other) = orthogonal_to {
            if s >= 3 {
                let u = other.column(p);
                let uu = u.dot(&u);
                if uu > 0.0 {
                    let proj = col.dot(&u) / uu;
                    col.scaled_add(-proj, &u);
                }
            }
        }
        let rms = (col.dot(&col) / s as f64).sqrt();
        if rms > 0.0 {
            col /= rms;
        }
    }
    z
}

/// Mean of each column, computed relative to the first row so that a column
/// of identical values returns that value exactly.
fn shifted_mean(m: ArrayView2<f64>) -> Array1<f64> {
    let first = m.row(0);
    let n = m.nrows() as f64;
    (&m - &first).sum_axis(Axis(0)) / n + first
}

fn column_var(m: ArrayView2<f64>, mean: &Array1<f64>, scheme: McScheme) -> Array1<f64> {
    let s = m.nrows();
    let denom = match scheme {
        McScheme::MomentMatched if s >= 2 => s as f64,
        _ if s >= 2 => (s - 1) as f64,
        _ => return Array1::zeros(m.ncols()),
    };
    let dev = &m - mean;
    (&dev * &dev).sum_axis(Axis(0)) / denom
}

/// Noise-prediction moments from Monte-Carlo inputs `xs` (rows) drawn around
/// `center`, given the predictive mean `m` and variance `g2` at each row.
///
/// The variance follows the law of total variance, `Var(m) + E[gamma^2]`,
/// and the covariance is `(1/S) sum_i (x_i - center) * m_i`.
pub fn eps_moments(
    xs: ArrayView2<f64>,
    center: &Array1<f64>,
    m: ArrayView2<f64>,
    g2: ArrayView2<f64>,
    scheme: McScheme,
) -> EpsMoments {
    let s = xs.nrows() as f64;
    let mean = shifted_mean(m);
    let var = column_var(m, &mean, scheme) + shifted_mean(g2);
    let cov = ((&xs - center) * m).sum_axis(Axis(0)) / s;
    EpsMoments { mean, var, cov }
}

/// Predictive moments for each row; when every row is identical the network
/// runs once and the result is broadcast, so the estimate is exactly
/// degenerate.
pub fn evaluate_rows(
    model: &dyn NoisePredictor,
    xs: ArrayView2<f64>,
    time: f64,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = xs.row(0);
    if xs.rows().into_iter().all(|r| r.iter().zip(first.iter()).all(|(a, b)| a.to_bits() == b.to_bits())) {
        let (m, g2) = model.predictive_batch(first.insert_axis(Axis(0)), time, seed)?;
        let shape = (xs.nrows(), xs.ncols());
        return Ok((m.broadcast(shape).unwrap().to_owned(), g2.broadcast(shape).unwrap().to_owned()));
    }
    model.predictive_batch(xs, time, seed)
}

/// Gaussian draws `mean + sqrt(var) * z` as rows.
pub fn gaussian_rows(mean: &Array1<f64>, var: &Array1<f64>, z: &Array2<f64>) -> Array2<f64> {
    let sd = var.mapv(f64::sqrt);
    let mut xs = z * &sd;
    xs += mean;
    xs
}

/// Estimates `Cov(x_t, eps_theta(x_t, t))` with `x_t ~ N(mean, diag(var))`
/// from `s` draws. Returns the covariance together with the noise moments
/// and the number of network evaluations consumed (always `s`).
pub fn estimate_cov_mc(
    mean: &PixelField,
    var: &PixelField,
    model: &dyn NoisePredictor,
    time: f64,
    s: usize,
    seed: u64,
    scheme: McScheme,
) -> Result<(PixelField, EpsMoments, usize)> {
    if s == 0 {
        return Err(Error::InvalidArgument("need at least one Monte-Carlo sample".into()));
    }
    let d = model.dim();
    mean.check_len(d)?;
    var.check_len(d)?;
    if var.as_slice().iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    let mut rng = child_rng(seed, "mc", 0);
    let z = standard_normals(s, d, scheme, &mut rng, None);
    let xs = gaussian_rows(mean.data(), var.data(), &z);
    let (m, g2) = evaluate_rows(model, xs.view(), time, derive_seed(seed, "gamma", 0))?;
    let moments = eps_moments(xs.view(), mean.data(), m.view(), g2.view(), scheme);
    let cov = PixelField::from_array(mean.shape(), moments.cov.clone())?;
    Ok((cov, moments, s))
}
