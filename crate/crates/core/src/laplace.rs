//! Last-layer Laplace approximation with a diagonal generalized Gauss-Newton
//! curvature, and its Gaussian posterior predictive.
//!
//! The final layer is affine in its parameters, so the Jacobian of output
//! pixel `p` with respect to `W[p, j]` is the feature `phi_j` and the GGN
//! diagonal is `tau + sum_n phi_nj^2 / sigma_obs^2`. The predictive variance
//! then has the closed form `sum_j phi_j^2 / prec[p, j]`, which is what the
//! moment engine consumes by default; the sampled estimate exists to check it.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::schedule::NoiseSchedule;
use crate::score_model::{sample_batch, Dataset, ScoreNet};
use crate::seed::child_rng;

/// Number of last-layer weight draws used by the sampled predictive.
pub const DEFAULT_WEIGHT_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceConfig {
    pub prior_precision: f64,
    pub obs_noise_var: f64,
    pub n_fit_points: usize,
    /// Give the bias its own posterior variance instead of fixing it at MAP.
    pub bias_uncertain: bool,
    pub seed: u64,
}

impl LaplaceConfig {
    /// Prior precision tied to the training weight decay, `weight_decay / obs_noise_var`.
    pub fn from_weight_decay(weight_decay: f64, obs_noise_var: f64, n_fit_points: usize, seed: u64) -> Self {
        Self { prior_precision: weight_decay / obs_noise_var, obs_noise_var, n_fit_points, bias_uncertain: false, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    map_weight: Array2<f64>,
    map_bias: Array1<f64>,
    diag_precision: Array2<f64>,
    bias_precision: Option<Array1<f64>>,
    prior_precision: f64,
    obs_noise_var: f64,
}

/// Per-pixel predictive mean and variance of the noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMoments {
    pub mean: PixelField,
    pub variance: PixelField,
}

/// Diagonal GGN precision of an affine layer with `out_dim` outputs given the
/// `n × feat_dim` feature matrix of the fit points. Every output row shares
/// the same curvature because the Jacobian does not depend on the pixel.
pub fn ggn_diagonal(
    features: ArrayView2<f64>,
    out_dim: usize,
    prior_precision: f64,
    obs_noise_var: f64,
) -> Result<Array2<f64>> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit-point features".into()));
    }
    let curvature = features.mapv(|v| v * v).sum_axis(Axis(0)) / obs_noise_var;
    let row = curvature + prior_precision;
    Ok(row.broadcast((out_dim, row.len())).unwrap().to_owned())
}

fn check_hyper(prior_precision: f64, obs_noise_var: f64) -> Result<()> {
    if prior_precision.is_nan() || prior_precision <= 0.0 {
        return Err(Error::InvalidArgument(format!("prior_precision = {prior_precision}")));
    }
    if !(obs_noise_var > 0.0 && obs_noise_var.is_finite()) {
        return Err(Error::InvalidArgument(format!("obs_noise_var = {obs_noise_var}")));
    }
    Ok(())
}

/// Fits the diagonal last-layer posterior around the network's current
/// (MAP) final layer, using `n_fit_points` forward-diffused training inputs.
pub fn fit_lastlayer(
    net: &ScoreNet,
    data: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &LaplaceConfig,
) -> Result<LaplacePosterior> {
    check_hyper(cfg.prior_precision, cfg.obs_noise_var)?;
    if cfg.n_fit_points == 0 {
        return Err(Error::InvalidArgument("n_fit_points must be at least 1".into()));
    }
    if data.shape() != net.shape() {
        return Err(Error::ShapeMismatch { expected: net.dim(), got: data.shape().len() });
    }
    let mut rng = child_rng(cfg.seed, "laplace-fit", 0);
    let batch = sample_batch(data, schedule, cfg.n_fit_points, &mut rng);
    let features = net.features_rows(batch.xs.view(), &batch.times)?;
    let diag_precision = ggn_diagonal(features.view(), net.dim(), cfg.prior_precision, cfg.obs_noise_var)?;
    let bias_precision = cfg
        .bias_uncertain
        .then(|| Array1::from_elem(net.dim(), cfg.prior_precision + cfg.n_fit_points as f64 / cfg.obs_noise_var));
    LaplacePosterior::from_parts(
        net.last_layer().weight.clone(),
        net.last_layer().bias.clone(),
        diag_precision,
        bias_precision,
        cfg.prior_precision,
        cfg.obs_noise_var,
    )
}

impl LaplacePosterior {
    pub fn from_parts(
        map_weight: Array2<f64>,
        map_bias: Array1<f64>,
        diag_precision: Array2<f64>,
        bias_precision: Option<Array1<f64>>,
        prior_precision: f64,
        obs_noise_var: f64,
    ) -> Result<Self> {
        check_hyper(prior_precision, obs_noise_var)?;
        if diag_precision.dim() != map_weight.dim() {
            return Err(Error::ShapeMismatch { expected: map_weight.len(), got: diag_precision.len() });
        }
        if map_bias.len() != map_weight.nrows() {
            return Err(Error::ShapeMismatch { expected: map_weight.nrows(), got: map_bias.len() });
        }
        if let Some(bp) = &bias_precision {
            if bp.len() != map_bias.len() {
                return Err(Error::ShapeMismatch { expected: map_bias.len(), got: bp.len() });
            }
        }
        let all_prec = diag_precision.iter().chain(bias_precision.iter().flatten());
        for &p in all_prec {
            if p.is_nan() || p < prior_precision {
                return Err(Error::InvalidArgument(format!(
                    "precision entry {p} below prior precision {prior_precision}"
                )));
            }
        }
        if map_weight.iter().chain(map_bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MAP weights".into()));
        }
        Ok(Self { map_weight, map_bias, diag_precision, bias_precision, prior_precision, obs_noise_var })
    }

    /// A posterior with infinite precision: every weight draw equals the MAP.
    pub fn collapsed(net: &ScoreNet) -> Self {
        let w = net.last_layer();
        Self {
            map_weight: w.weight.clone(),
            map_bias: w.bias.clone(),
            diag_precision: Array2::from_elem(w.weight.dim(), f64::INFINITY),
            bias_precision: None,
            prior_precision: f64::INFINITY,
            obs_noise_var: 1.0,
        }
    }

    pub fn map_weight(&self) -> &Array2<f64> {
        &self.map_weight
    }

    pub fn map_bias(&self) -> &Array1<f64> {
        &self.map_bias
    }

    pub fn diag_precision(&self) -> &Array2<f64> {
        &self.diag_precision
    }

    pub fn bias_precision(&self) -> Option<&Array1<f64>> {
        self.bias_precision.as_ref()
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn obs_noise_var(&self) -> f64 {
        self.obs_noise_var
    }

    pub fn out_dim(&self) -> usize {
        self.map_weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.map_weight.ncols()
    }

    /// Checks that the posterior was fitted for a network of this geometry.
    pub fn check_compatible(&self, net: &ScoreNet) -> Result<()> {
        if self.out_dim() != net.dim() {
            return Err(Error::ShapeMismatch { expected: net.dim(), got: self.out_dim() });
        }
        if self.feature_dim() != net.feature_dim() {
            return Err(Error::ShapeMismatch { expected: net.feature_dim(), got: self.feature_dim() });
        }
        Ok(())
    }

    /// Closed-form predictive variance for each row of an `n × feat_dim`
    /// feature matrix.
    pub fn exact_variance(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let inv_prec = self.diag_precision.mapv(|p| 1.0 / p);
        let mut var = features.mapv(|v| v * v).dot(&inv_prec.t());
        if let Some(bp) = &self.bias_precision {
            var += &bp.mapv(|p| 1.0 / p);
        }
        var
    }

    /// Unbiased sample variance of the final-layer output over `k` weight
    /// draws, for each row of an `n × feat_dim` feature matrix.
    pub fn sampled_variance<R: Rng>(&self, features: ArrayView2<f64>, k: usize, rng: &mut R) -> Result<Array2<f64>> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 weight samples, got {k}")));
        }
        let (n, d) = (features.nrows(), self.out_dim());
        let scale = self.diag_precision.mapv(|p| 1.0 / p.sqrt());
        let bias_scale = self.bias_precision.as_ref().map(|bp| bp.mapv(|p| 1.0 / p.sqrt()));
        // Welford accumulation of the output perturbation over draws
        let mut mean = Array2::<f64>::zeros((n, d));
        let mut m2 = Array2::<f64>::zeros((n, d));
        for i in 0..k {
            let noise = Array2::from_shape_fn(scale.dim(), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            });
            let mut delta = features.dot(&(noise * &scale).t());
            if let Some(bs) = &bias_scale {
                let zb = Array1::from_shape_fn(d, |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                });
                delta += &(zb * bs);
            }
            let step = &delta - &mean;
            mean.scaled_add(1.0 / (i + 1) as f64, &step);
            m2 += &(step * (&delta - &mean));
        }
        Ok(m2 / (k - 1) as f64)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = serde_json::json!({
            "kind": "laplace-posterior",
            "prior_precision": self.prior_precision,
            "obs_noise_var": self.obs_noise_var,
            "bias_uncertain": self.bias_precision.is_some(),
        });
        let mut ar = Archive::new(meta);
        let shape = [self.out_dim(), self.feature_dim()];
        ar.push("map_weight", &shape, self.map_weight.iter().copied().collect())?;
        ar.push("map_bias", &[self.out_dim()], self.map_bias.to_vec())?;
        ar.push("diag_precision", &shape, self.diag_precision.iter().copied().collect())?;
        if let Some(bp) = &self.bias_precision {
            ar.push("bias_precision", &[self.out_dim()], bp.to_vec())?;
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let scalar = |key: &str| {
            ar.meta
                .get(key)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Format(format!("posterior header lacks `{key}`")))
        };
        let prior = scalar("prior_precision")?;
        let obs = scalar("obs_noise_var")?;
        let matrix = |name: &str| -> Result<Array2<f64>> {
            let (shape, data) = ar.get(name)?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("`{name}` must be 2-d")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).map_err(|e| Error::Format(e.to_string()))
        };
        let bias_precision = match ar.get("bias_precision") {
            Ok((_, data)) => Some(Array1::from(data.to_vec())),
            Err(_) => None,
        };
        Self::from_parts(
            matrix("map_weight")?,
            Array1::from(ar.get("map_bias")?.1.to_vec()),
            matrix("diag_precision")?,
            bias_precision,
            prior,
            obs,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Predictive moments at a single input: mean is the MAP network output,
/// variance the unbiased sample variance over `n_weight_samples` draws.
pub fn predictive(
    post: &LaplacePosterior,
    net: &ScoreNet,
    x: &PixelField,
    t: usize,
    n_weight_samples: usize,
    seed: u64,
) -> Result<PredictiveMoments> {
    post.check_compatible(net)?;
    x.check_len(net.dim())?;
    let xs = x.data().view().insert_axis(Axis(0));
    let feats = net.features_batch(xs, t as f64)?;
    let mean = net.forward_batch(xs, t as f64)?;
    let mut rng = child_rng(seed, "predictive", t as u64);
    let var = post.sampled_variance(feats.view(), n_weight_samples, &mut rng)?;
    Ok(PredictiveMoments {
        mean: PixelField::from_array(net.shape(), mean.row(0).to_owned())?,
        variance: PixelField::from_array(net.shape(), var.row(0).to_owned())?,
    })
}

/// Closed-form counterpart of [`predictive`].
pub fn predictive_exact(
    post: &LaplacePosterior,
    net: &ScoreNet,
    x: &PixelField,
    t: usize,
) -> Result<PredictiveMoments> {
    post.check_compatible(net)?;
    x.check_len(net.dim())?;
    let xs = x.data().view().insert_axis(Axis(0));
    let feats = net.features_batch(xs, t as f64)?;
    let mean = net.forward_batch(xs, t as f64)?;
    let var = post.exact_variance(feats.view());
    Ok(PredictiveMoments {
        mean: PixelField::from_array(net.shape(), mean.row(0).to_owned())?,
        variance: PixelField::from_array(net.shape(), var.row(0).to_owned())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Shape;
    use crate::score_model::{synth_dataset, DatasetKind, NetConfig};
    use ndarray::array;

    fn toy() -> (ScoreNet, Dataset, NoiseSchedule) {
        let shape = Shape::new(1, 2, 2);
        let cfg = NetConfig { shape, hidden: vec![6], time_features: 2, time_scale: 20.0, input_skip: false };
        let net = ScoreNet::new(cfg, 4).unwrap();
        let data = synth_dataset(DatasetKind::GaussianBlobs, 32, 1, shape).unwrap();
        (net, data, NoiseSchedule::linear_rescaled(20).unwrap())
    }

    #[test]
    fn hand_evaluated_ggn() {
        let feats = array![[1.0], [2.0]];
        let prec = ggn_diagonal(feats.view(), 1, 1.0, 1.0).unwrap();
        assert_eq!(prec, array![[6.0]]);
    }

    #[test]
    fn zero_features_give_prior() {
        let feats = Array2::<f64>::zeros((5, 3));
        let prec = ggn_diagonal(feats.view(), 2, 0.7, 2.0).unwrap();
        assert!(prec.iter().all(|p| *p == 0.7));
    }

    #[test]
    fn precision_dominates_prior() {
        let (net, data, s) = toy();
        let cfg =
            LaplaceConfig { prior_precision: 0.3, obs_noise_var: 1.0, n_fit_points: 64, bias_uncertain: true, seed: 2 };
        let post = fit_lastlayer(&net, &data, &s, &cfg).unwrap();
        assert!(post.diag_precision().iter().all(|p| *p >= 0.3 && p.is_finite()));
        assert_eq!(post.map_weight(), &net.last_layer().weight);
        let bad = LaplaceConfig { prior_precision: 0.0, ..cfg.clone() };
        assert!(fit_lastlayer(&net, &data, &s, &bad).is_err());
        let bad = LaplaceConfig { n_fit_points: 0, ..cfg };
        assert!(fit_lastlayer(&net, &data, &s, &bad).is_err());
    }

    #[test]
    fn predictive_mean_is_map_output() {
        let (net, data, s) = toy();
        let post = fit_lastlayer(&net, &data, &s, &LaplaceConfig::from_weight_decay(1e-2, 1.0, 16, 0)).unwrap();
        let x = data.sample(3);
        let p = predictive(&post, &net, &x, 7, DEFAULT_WEIGHT_SAMPLES, 1).unwrap();
        assert_eq!(p.mean, net.predict_noise(&x, 7).unwrap());
        assert!(p.variance.as_slice().iter().all(|v| *v >= 0.0));
        assert!(predictive(&post, &net, &x, 7, 1, 1).is_err());
    }

    #[test]
    fn infinite_precision_collapses_variance() {
        let (net, data, _) = toy();
        let post = LaplacePosterior::collapsed(&net);
        let x = data.sample(0);
        let p = predictive(&post, &net, &x, 5, 10, 3).unwrap();
        assert!(p.variance.as_slice().iter().all(|v| *v == 0.0));
        let e = predictive_exact(&post, &net, &x, 5).unwrap();
        assert!(e.variance.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn larger_prior_never_increases_exact_variance() {
        let (net, data, s) = toy();
        let x = data.sample(1);
        let mut last: Option<Vec<f64>> = None;
        for prior in [1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let cfg = LaplaceConfig {
                prior_precision: prior,
                obs_noise_var: 1.0,
                n_fit_points: 32,
                bias_uncertain: false,
                seed: 5,
            };
            let post = fit_lastlayer(&net, &data, &s, &cfg).unwrap();
            let v = predictive_exact(&post, &net, &x, 9).unwrap().variance.as_slice().to_vec();
            if let Some(prev) = &last {
                assert!(v.iter().zip(prev).all(|(a, b)| a <= b));
            }
            last = Some(v);
        }
    }

    #[test]
    fn sampled_variance_tracks_exact_at_default_count() {
        let (net, data, s) = toy();
        let cfg =
            LaplaceConfig { prior_precision: 1.0, obs_noise_var: 1.0, n_fit_points: 8, bias_uncertain: true, seed: 1 };
        let post = fit_lastlayer(&net, &data, &s, &cfg).unwrap();
        let x = data.sample(2);
        let exact = predictive_exact(&post, &net, &x, 4).unwrap().variance;
        let mc = predictive(&post, &net, &x, 4, DEFAULT_WEIGHT_SAMPLES, 11).unwrap().variance;
        for (a, b) in exact.as_slice().iter().zip(mc.as_slice()) {
            assert!(((b - a) / a).abs() < 0.25, "{b} vs {a}");
        }
    }

    #[test]
    fn archive_round_trip() {
        let (net, data, s) = toy();
        let cfg =
            LaplaceConfig { prior_precision: 0.5, obs_noise_var: 2.0, n_fit_points: 8, bias_uncertain: true, seed: 1 };
        let post = fit_lastlayer(&net, &data, &s, &cfg).unwrap();
        assert_eq!(LaplacePosterior::from_archive(&post.to_archive().unwrap()).unwrap(), post);
    }
}
