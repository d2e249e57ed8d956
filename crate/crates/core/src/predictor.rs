//! Noise predictors as seen by the samplers: a per-row predictive mean and
//! variance for a batch of inputs at one (possibly fractional) time.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Shape;
use crate::laplace::{LaplacePosterior, DEFAULT_WEIGHT_SAMPLES};
use crate::schedule::NoiseSchedule;
use crate::score_model::ScoreNet;
use crate::seed::child_rng;

pub trait NoisePredictor: Sync {
    fn shape(&self) -> Shape;

    fn dim(&self) -> usize {
        self.shape().len()
    }

    /// `eps_theta` for each row of `xs` (`n × d`).
    fn mean_batch(&self, xs: ArrayView2<f64>, time: f64) -> Result<Array2<f64>>;

    /// Predictive mean and variance `gamma^2` for each row. `seed` feeds
    /// predictors whose variance is itself a Monte-Carlo estimate.
    fn predictive_batch(&self, xs: ArrayView2<f64>, time: f64, seed: u64) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// The network alone, with no predictive variance.
impl NoisePredictor for ScoreNet {
    fn shape(&self) -> Shape {
        ScoreNet::shape(self)
    }

    fn mean_batch(&self, xs: ArrayView2<f64>, time: f64) -> Result<Array2<f64>> {
        self.forward_batch(xs, time)
    }

    fn predictive_batch(&self, xs: ArrayView2<f64>, time: f64, _seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
        let mean = self.forward_batch(xs, time)?;
        let var = Array2::zeros(mean.dim());
        Ok((mean, var))
    }
}

/// How [`LastLayerPredictor`] evaluates `gamma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    /// Closed form, exact for an affine last layer.
    #[default]
    Exact,
    /// Sample variance over `n` last-layer weight draws.
    Sampled { n: usize },
}

impl GammaMode {
    pub fn sampled_default() -> Self {
        Self::Sampled { n: DEFAULT_WEIGHT_SAMPLES }
    }
}

/// A trained network with its last-layer Laplace posterior.
#[derive(Debug, Clone, Copy)]
pub struct LastLayerPredictor<'a> {
    net: &'a ScoreNet,
    posterior: &'a LaplacePosterior,
    mode: GammaMode,
}

impl<'a> LastLayerPredictor<'a> {
    pub fn new(net: &'a ScoreNet, posterior: &'a LaplacePosterior, mode: GammaMode) -> Result<Self> {
        posterior.check_compatible(net)?;
        if let GammaMode::Sampled { n } = mode {
            if n < 2 {
                return Err(Error::InvalidArgument(format!("need at least 2 weight samples, got {n}")));
            }
        }
        Ok(Self { net, posterior, mode })
    }

    pub fn net(&self) -> &ScoreNet {
        self.net
    }

    pub fn posterior(&self) -> &LaplacePosterior {
        self.posterior
    }
}

impl NoisePredictor for LastLayerPredictor<'_> {
    fn shape(&self) -> Shape {
        self.net.shape()
    }

    fn mean_batch(&self, xs: ArrayView2<f64>, time: f64) -> Result<Array2<f64>> {
        self.net.forward_batch(xs, time)
    }

    fn predictive_batch(&self, xs: ArrayView2<f64>, time: f64, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
        let feats = self.net.features_batch(xs, time)?;
        let mean = self.net.head(&feats, xs);
        let var = match self.mode {
            GammaMode::Exact => self.posterior.exact_variance(feats.view()),
            GammaMode::Sampled { n } => {
                let mut rng = child_rng(seed, "weights", 0);
                self.posterior.sampled_variance(feats.view(), n, &mut rng)?
            }
        };
        Ok((mean, var))
    }
}

/// A noise model `eps(x, tau) = gain(tau) * x + offset(tau)` with a
/// state-independent predictive variance; every moment recursion is then a
/// closed-form linear recursion.
pub trait AffineNoiseModel: NoisePredictor {
    fn gain(&self, time: f64) -> Array1<f64>;
    fn offset(&self, time: f64) -> Array1<f64>;
    fn gamma_sq(&self, time: f64) -> Array1<f64>;
}

/// The minimum-MSE noise predictor for diagonal-Gaussian data
/// `x_0 ~ N(mu, diag(v))`: `E[eps | x_t] = sigma (x_t - alpha mu) / (alpha^2 v + sigma^2)`.
///
/// `gain_scale` multiplies the gain only, so `0` yields a predictor that
/// ignores its input. `gamma_sq` is a constant per-pixel predictive variance.
#[derive(Debug, Clone)]
pub struct AffineScoreModel {
    shape: Shape,
    schedule: NoiseSchedule,
    data_mean: Array1<f64>,
    data_var: Array1<f64>,
    gain_scale: f64,
    gamma_sq: Array1<f64>,
}

impl AffineScoreModel {
    pub fn new(
        shape: Shape,
        schedule: NoiseSchedule,
        data_mean: Array1<f64>,
        data_var: Array1<f64>,
        gamma_sq: Array1<f64>,
    ) -> Result<Self> {
        let d = shape.len();
        for (name, v) in [("data_mean", &data_mean), ("data_var", &data_var), ("gamma_sq", &gamma_sq)] {
            if v.len() != d {
                return Err(Error::ShapeMismatch { expected: d, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if data_var.iter().any(|v| *v < 0.0) || gamma_sq.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("variances must be nonnegative".into()));
        }
        Ok(Self { shape, schedule, data_mean, data_var, gain_scale: 1.0, gamma_sq })
    }

    pub fn with_gain_scale(mut self, gain_scale: f64) -> Self {
        self.gain_scale = gain_scale;
        self
    }

    pub fn with_gamma_sq(mut self, gamma_sq: Array1<f64>) -> Self {
        assert_eq!(gamma_sq.len(), self.shape.len());
        self.gamma_sq = gamma_sq;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn data_mean(&self) -> &Array1<f64> {
        &self.data_mean
    }

    pub fn data_var(&self) -> &Array1<f64> {
        &self.data_var
    }

    fn unscaled_gain(&self, time: f64) -> Array1<f64> {
        let (a, s) = (self.schedule.alpha_at(time), self.schedule.sigma_at(time));
        self.data_var.mapv(|v| s / (a * a * v + s * s))
    }
}

impl NoisePredictor for AffineScoreModel {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn mean_batch(&self, xs: ArrayView2<f64>, time: f64) -> Result<Array2<f64>> {
        if xs.ncols() != self.dim() {
            return Err(Error::ShapeMismatch { expected: self.dim(), got: xs.ncols() });
        }
        Ok(&xs * &self.gain(time) + &self.offset(time))
    }

    fn predictive_batch(&self, xs: ArrayView2<f64>, time: f64, _seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
        let mean = self.mean_batch(xs, time)?;
        let var = self.gamma_sq.broadcast(mean.dim()).unwrap().to_owned();
        Ok((mean, var))
    }
}

impl AffineNoiseModel for AffineScoreModel {
    fn gain(&self, time: f64) -> Array1<f64> {
        self.unscaled_gain(time) * self.gain_scale
    }

    fn offset(&self, time: f64) -> Array1<f64> {
        let a = self.schedule.alpha_at(time);
        -(self.unscaled_gain(time) * &self.data_mean * a)
    }

    fn gamma_sq(&self, _time: f64) -> Array1<f64> {
        self.gamma_sq.clone()
    }
}
