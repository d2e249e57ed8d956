use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{PixelField, Shape};
use crate::seed::child_rng;

/// Synthetic image generators standing in for real datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// A single smooth bump at a uniformly chosen pixel, plus pixel noise.
    GaussianBlobs,
    /// Equal mixture of two Gaussians centred at `+m` and `-m` for a fixed
    /// ramp pattern `m`.
    TwoModeGaussian,
    /// Checkerboards with random phase and contrast, plus pixel noise.
    CheckerFields,
    /// A single diagonal Gaussian; its optimal denoiser is affine, which the
    /// closed-form tests rely on.
    Gaussian,
}

const BLOB_NOISE: f64 = 0.05;
const TWO_MODE_AMPLITUDE: f64 = 0.6;
const TWO_MODE_NOISE: f64 = 0.15;
const CHECKER_NOISE: f64 = 0.1;

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianBlobs => "gaussian-blobs",
            Self::TwoModeGaussian => "two-mode-gaussian",
            Self::CheckerFields => "checker-fields",
            Self::Gaussian => "gaussian",
        }
    }

    /// Closed-form per-pixel mean of the generator.
    pub fn mean(&self, shape: Shape) -> Array1<f64> {
        match self {
            Self::GaussianBlobs => {
                let (h, w) = (shape.height, shape.width);
                let mut acc = Array1::<f64>::zeros(shape.len());
                for ci in 0..h {
                    for cj in 0..w {
                        acc += &blob_image(shape, ci, cj);
                    }
                }
                acc / (h * w) as f64
            }
            Self::TwoModeGaussian | Self::CheckerFields => Array1::zeros(shape.len()),
            Self::Gaussian => gaussian_params(shape).0,
        }
    }

    fn draw<R: Rng>(&self, shape: Shape, rng: &mut R) -> Array1<f64> {
        let d = shape.len();
        match self {
            Self::GaussianBlobs => {
                let k = rng.gen_range(0..shape.height * shape.width);
                let img = blob_image(shape, k / shape.width, k % shape.width);
                img + noise(d, BLOB_NOISE, rng)
            }
            Self::TwoModeGaussian => {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                two_mode_pattern(shape) * sign + noise(d, TWO_MODE_NOISE, rng)
            }
            Self::CheckerFields => {
                let phase = rng.gen_range(0..2usize);
                let contrast = rng.gen_range(0.4..0.9);
                let mut img = Array1::zeros(d);
                for c in 0..shape.channels {
                    for i in 0..shape.height {
                        for j in 0..shape.width {
                            let sign = if (i + j + phase) % 2 == 0 { 1.0 } else { -1.0 };
                            img[(c * shape.height + i) * shape.width + j] = contrast * sign;
                        }
                    }
                }
                img + noise(d, CHECKER_NOISE, rng)
            }
            Self::Gaussian => {
                let (mean, var) = gaussian_params(shape);
                mean + var.mapv(f64::sqrt) * noise(d, 1.0, rng)
            }
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "two-mode-gaussian" => Ok(Self::TwoModeGaussian),
            "checker-fields" => Ok(Self::CheckerFields),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::UnknownDataset(other.to_owned())),
        }
    }
}

fn noise<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn blob_image(shape: Shape, ci: usize, cj: usize) -> Array1<f64> {
    let width = (shape.height.max(shape.width) as f64 / 4.0).max(0.5);
    let mut img = Array1::zeros(shape.len());
    for c in 0..shape.channels {
        for i in 0..shape.height {
            for j in 0..shape.width {
                let di = i as f64 - ci as f64;
                let dj = j as f64 - cj as f64;
                let bump = (-(di * di + dj * dj) / (2.0 * width * width)).exp();
                img[(c * shape.height + i) * shape.width + j] = 2.0 * bump - 1.0;
            }
        }
    }
    img
}

fn two_mode_pattern(shape: Shape) -> Array1<f64> {
    let d = shape.len();
    if d == 1 {
        return Array1::from_elem(1, TWO_MODE_AMPLITUDE);
    }
    Array1::from_shape_fn(d, |p| TWO_MODE_AMPLITUDE * (2.0 * p as f64 / (d - 1) as f64 - 1.0))
}

/// Mean and variance of the [`DatasetKind::Gaussian`] generator.
pub fn gaussian_params(shape: Shape) -> (Array1<f64>, Array1<f64>) {
    let d = shape.len();
    let mean = Array1::from_shape_fn(d, |p| 0.5 * (2.0 * std::f64::consts::PI * (p as f64 + 0.5) / d as f64).sin());
    let var = Array1::from_shape_fn(d, |p| {
        let u = if d == 1 { 0.0 } else { p as f64 / (d - 1) as f64 };
        let sd = 0.2 + 0.4 * u;
        sd * sd
    });
    (mean, var)
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    pub shape: Shape,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    descriptor: DatasetDescriptor,
    samples: Array2<f64>,
}

impl Dataset {
    pub fn descriptor(&self) -> &DatasetDescriptor {
        &self.descriptor
    }

    pub fn shape(&self) -> Shape {
        self.descriptor.shape
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Samples as an `n × d` matrix, one flattened image per row.
    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> PixelField {
        PixelField::from_array(self.shape(), self.samples.row(i).to_owned()).expect("generated samples are finite")
    }

    pub fn from_descriptor(descriptor: &DatasetDescriptor) -> Result<Self> {
        synth_dataset(descriptor.kind, descriptor.n, descriptor.seed, descriptor.shape)
    }
}

/// Draws `n` i.i.d. samples from the named generator.
pub fn synth_dataset(kind: DatasetKind, n: usize, seed: u64, shape: Shape) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset must have at least one sample".into()));
    }
    if shape.is_empty() {
        return Err(Error::InvalidArgument("dataset shape has no pixels".into()));
    }
    let d = shape.len();
    let mut samples = Array2::zeros((n, d));
    for (i, mut row) in samples.rows_mut().into_iter().enumerate() {
        let mut rng = child_rng(seed, kind.name(), i as u64);
        row.assign(&kind.draw(shape, &mut rng));
    }
    Ok(Dataset { descriptor: DatasetDescriptor { kind, n, seed, shape }, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let shape = Shape::new(1, 4, 4);
        let a = synth_dataset(DatasetKind::TwoModeGaussian, 4, 0, shape).unwrap();
        let b = synth_dataset(DatasetKind::TwoModeGaussian, 4, 0, shape).unwrap();
        let bits = |d: &Dataset| d.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = synth_dataset(DatasetKind::TwoModeGaussian, 4, 1, shape).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn empty_and_unknown_rejected() {
        assert!(synth_dataset(DatasetKind::Gaussian, 0, 0, Shape::flat(2)).is_err());
        assert!(matches!("blobs".parse::<DatasetKind>(), Err(Error::UnknownDataset(_))));
        assert_eq!("checker-fields".parse::<DatasetKind>().unwrap(), DatasetKind::CheckerFields);
    }

    #[test]
    fn sample_means_match_generator_means() {
        let shape = Shape::new(1, 4, 4);
        for (kind, seed) in [
            (DatasetKind::GaussianBlobs, 1),
            (DatasetKind::TwoModeGaussian, 2),
            (DatasetKind::CheckerFields, 3),
            (DatasetKind::Gaussian, 4),
        ] {
            let n = 1000;
            let data = synth_dataset(kind, n, seed, shape).unwrap();
            let mean = kind.mean(shape);
            let xs = data.samples();
            for p in 0..shape.len() {
                let col = xs.column(p);
                let m = col.mean().unwrap();
                let sd = col.std(1.0);
                let se = sd / (n as f64).sqrt();
                assert!((m - mean[p]).abs() < 3.0 * se, "{kind:?} pixel {p}: {m} vs {} (se {se})", mean[p]);
            }
        }
    }
}
