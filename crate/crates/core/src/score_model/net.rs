use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::field::{PixelField, Shape};
use crate::seed::child_rng;

/// Upper bound on the width of the final feature layer.
pub const MAX_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub shape: Shape,
    /// Widths of the tanh hidden layers; empty gives a model that is affine
    /// in its input.
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    /// Time is fed to the embedding as `tau / time_scale`, normally `T`.
    pub time_scale: f64,
    /// Adds the input to the output, `eps = x + W h + b`. A tanh network
    /// cannot follow the linear growth of the optimal noise prediction
    /// (`eps ~ x` near `t = T`), so without this the sampler loses its
    /// restoring force on latents outside the training range. The skip has
    /// no parameters, so the output stays affine in `(W, b)`.
    #[serde(default)]
    pub input_skip: bool,
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.shape.len() + self.time_features
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.input_dim())
    }

    fn validate(&self) -> Result<()> {
        if self.shape.is_empty() {
            return Err(Error::InvalidArgument("network shape has no pixels".into()));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("time_features must be even, got {}", self.time_features)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer of width 0".into()));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("time_scale = {}", self.time_scale)));
        }
        if self.feature_dim() > MAX_FEATURE_DIM {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {} exceeds {MAX_FEATURE_DIM}",
                self.feature_dim()
            )));
        }
        Ok(())
    }
}

/// An affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(out_dim: usize, in_dim: usize, seed: u64, index: u64) -> Self {
        let mut rng = child_rng(seed, "init", index);
        let scale = (1.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self { weight, bias: Array1::zeros(out_dim) }
    }

    fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        input.dot(&self.weight.t()) + &self.bias
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Minibatch for the denoising objective: noised inputs, their (possibly
/// fractional) times and the noise targets.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub xs: Array2<f64>,
    pub times: Vec<f64>,
    pub targets: Array2<f64>,
}

/// Noise-prediction network: a tanh MLP over pixels and sinusoidal time
/// features, followed by a final affine layer that the Laplace posterior
/// lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    config: NetConfig,
    hidden: Vec<Dense>,
    last: Dense,
}

impl ScoreNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut in_dim = config.input_dim();
        for (i, &width) in config.hidden.iter().enumerate() {
            hidden.push(Dense::init(width, in_dim, seed, i as u64));
            in_dim = width;
        }
        let last = Dense::init(config.shape.len(), in_dim, seed, config.hidden.len() as u64);
        Ok(Self { config, hidden, last })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn shape(&self) -> Shape {
        self.config.shape
    }

    pub fn dim(&self) -> usize {
        self.config.shape.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn last_layer(&self) -> &Dense {
        &self.last
    }

    /// Replaces the final layer, keeping the feature layers.
    pub fn with_last_layer(&self, weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let (out_dim, feat_dim) = (self.dim(), self.feature_dim());
        if weight.dim() != (out_dim, feat_dim) {
            return Err(Error::ShapeMismatch { expected: out_dim * feat_dim, got: weight.len() });
        }
        if bias.len() != out_dim {
            return Err(Error::ShapeMismatch { expected: out_dim, got: bias.len() });
        }
        let mut net = self.clone();
        net.last = Dense { weight, bias };
        Ok(net)
    }

    fn time_embedding(&self, tau: f64, out: &mut [f64]) {
        let u = tau / self.config.time_scale;
        let half = self.config.time_features / 2;
        for k in 0..half {
            let w = FRAC_PI_2 * (1u64 << k.min(52)) as f64;
            out[2 * k] = (w * u).sin();
            out[2 * k + 1] = (w * u).cos();
        }
    }

    fn inputs(&self, xs: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        let d = self.dim();
        if xs.ncols() != d {
            return Err(Error::ShapeMismatch { expected: d, got: xs.ncols() });
        }
        if times.len() != xs.nrows() {
            return Err(Error::ShapeMismatch { expected: xs.nrows(), got: times.len() });
        }
        let mut input = Array2::zeros((xs.nrows(), self.config.input_dim()));
        input.slice_mut(s![.., ..d]).assign(&xs);
        for (mut row, &tau) in input.rows_mut().into_iter().zip(times) {
            let row = row.as_slice_mut().expect("fresh arrays are contiguous");
            self.time_embedding(tau, &mut row[d..]);
        }
        Ok(input)
    }

    /// Layer activations from the input (index 0) to the final features.
    fn activations(&self, xs: ArrayView2<f64>, times: &[f64]) -> Result<Vec<Array2<f64>>> {
        let mut acts = vec![self.inputs(xs, times)?];
        for layer in &self.hidden {
            let z = layer.apply(acts.last().unwrap()).mapv_into(f64::tanh);
            acts.push(z);
        }
        Ok(acts)
    }

    /// Final-layer features `phi(x, t)` for each row of `xs`, `n × feat_dim`.
    pub fn features_rows(&self, xs: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        Ok(self.activations(xs, times)?.pop().unwrap())
    }

    pub fn features_batch(&self, xs: ArrayView2<f64>, time: f64) -> Result<Array2<f64>> {
        self.features_rows(xs, &vec![time; xs.nrows()])
    }

    pub fn forward_rows(&self, xs: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        Ok(self.head(&self.features_rows(xs, times)?, xs))
    }

    /// The last layer applied to `features`, plus the input skip if enabled.
    pub fn head(&self, features: &Array2<f64>, xs: ArrayView2<f64>) -> Array2<f64> {
        let out = self.last.apply(features);
        if self.config.input_skip {
            out + xs
        } else {
            out
        }
    }

    /// Network output for a batch of inputs sharing one time, `n × d`.
    pub fn forward_batch(&self, xs: ArrayView2<f64>, time: f64) -> Result<Array2<f64>> {
        self.forward_rows(xs, &vec![time; xs.nrows()])
    }

    /// `eps_theta(x, t)` at a grid step.
    pub fn predict_noise(&self, x: &PixelField, t: usize) -> Result<PixelField> {
        self.predict_noise_at(x, t as f64)
    }

    pub fn predict_noise_at(&self, x: &PixelField, tau: f64) -> Result<PixelField> {
        x.check_len(self.dim())?;
        let xs = x.data().view().insert_axis(Axis(0));
        let out = self.forward_batch(xs, tau)?;
        PixelField::from_array(self.shape(), out.row(0).to_owned())
    }

    pub fn num_params(&self) -> usize {
        self.hidden.iter().map(Dense::num_params).sum::<usize>() + self.last.num_params()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(std::iter::once(&self.last))
    }

    /// All parameters flattened: each layer's weight (row-major) then bias,
    /// hidden layers first, final layer last.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: self.num_params(), got: params.len() });
        }
        let mut cursor = 0;
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.last)) {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = params[cursor];
                cursor += 1;
            }
        }
        Ok(())
    }

    /// Denoising objective on a batch, `mean_n ||eps_theta(x_n, t_n) - eps_n||^2`,
    /// together with the gradient of `objective + weight_decay/2 * ||theta||^2`
    /// in [`Self::params_flat`] order.
    pub fn loss_and_grad(&self, batch: &TrainBatch, weight_decay: f64) -> Result<(f64, Vec<f64>)> {
        let n = batch.xs.nrows();
        if batch.targets.dim() != (n, self.dim()) {
            return Err(Error::ShapeMismatch { expected: n * self.dim(), got: batch.targets.len() });
        }
        let acts = self.activations(batch.xs.view(), &batch.times)?;
        let resid = self.head(acts.last().unwrap(), batch.xs.view()) - &batch.targets;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.hidden.len() + 1);
        let mut delta = resid * (2.0 / n as f64);
        let layers: Vec<&Dense> = self.layers().collect();
        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            grads.push((gw, gb));
            if li > 0 {
                let back = delta.dot(&layer.weight);
                // acts[li] is tanh output of hidden layer li - 1
                delta = back * input.mapv(|z| 1.0 - z * z);
            }
        }
        grads.reverse();

        let mut flat = Vec::with_capacity(self.num_params());
        for ((gw, gb), layer) in grads.iter().zip(layers) {
            flat.extend(gw.iter().zip(layer.weight.iter()).map(|(g, w)| g + weight_decay * w));
            flat.extend(gb.iter().zip(layer.bias.iter()).map(|(g, b)| g + weight_decay * b));
        }
        Ok((loss, flat))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = serde_json::json!({ "kind": "score-net", "config": self.config });
        let mut ar = Archive::new(meta);
        for (i, layer) in self.hidden.iter().enumerate() {
            push_dense(&mut ar, &format!("hidden.{i}"), layer)?;
        }
        push_dense(&mut ar, "last", &self.last)?;
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let config: NetConfig = serde_json::from_value(
            ar.meta.get("config").cloned().ok_or_else(|| Error::Format("checkpoint has no config".into()))?,
        )?;
        let mut net = Self::new(config, 0)?;
        for i in 0..net.hidden.len() {
            let name = format!("hidden.{i}");
            net.hidden[i] = read_dense(ar, &name, &net.hidden[i])?;
        }
        net.last = read_dense(ar, "last", &net.last)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

fn push_dense(ar: &mut Archive, prefix: &str, layer: &Dense) -> Result<()> {
    let (o, i) = layer.weight.dim();
    ar.push(&format!("{prefix}.weight"), &[o, i], layer.weight.iter().copied().collect())?;
    ar.push(&format!("{prefix}.bias"), &[o], layer.bias.to_vec())
}

fn read_dense(ar: &Archive, prefix: &str, like: &Dense) -> Result<Dense> {
    let (shape, w) = ar.get(&format!("{prefix}.weight"))?;
    if shape != [like.weight.nrows(), like.weight.ncols()] {
        return Err(Error::Format(format!("{prefix}.weight has shape {shape:?}")));
    }
    let weight = Array2::from_shape_vec(like.weight.dim(), w.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let (shape, b) = ar.get(&format!("{prefix}.bias"))?;
    if shape != [like.bias.len()] {
        return Err(Error::Format(format!("{prefix}.bias has shape {shape:?}")));
    }
    Ok(Dense { weight, bias: Array1::from(b.to_vec()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_net(seed: u64) -> ScoreNet {
        net_with_skip(seed, false)
    }

    fn net_with_skip(seed: u64, input_skip: bool) -> ScoreNet {
        let config = NetConfig {
            shape: Shape::new(1, 2, 2),
            hidden: vec![8, 6],
            time_features: 4,
            time_scale: 50.0,
            input_skip,
        };
        ScoreNet::new(config, seed).unwrap()
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let net = small_net(1);
        let zero = net.with_last_layer(Array2::zeros((4, net.feature_dim())), Array1::zeros(4)).unwrap();
        let x = PixelField::new(Shape::new(1, 2, 2), vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        assert!(zero.predict_noise(&x, 7).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_last_layer_doubles_output() {
        let net = small_net(2);
        let w = net.last_layer().weight.clone();
        let b = Array1::from(vec![0.1, -0.2, 0.3, 0.05]);
        let one = net.with_last_layer(w.clone(), b.clone()).unwrap();
        let two = net.with_last_layer(&w * 2.0, &b * 2.0).unwrap();
        let x = PixelField::new(Shape::new(1, 2, 2), vec![0.5, 0.5, -0.5, 1.5]).unwrap();
        let (y1, y2) = (one.predict_noise(&x, 3).unwrap(), two.predict_noise(&x, 3).unwrap());
        for (a, b) in y1.as_slice().iter().zip(y2.as_slice()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = small_net(3);
        let x = PixelField::new(Shape::new(1, 2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = net.predict_noise(&x, 10).unwrap();
        let b = net.predict_noise(&x, 10).unwrap();
        let bits = |f: &PixelField| f.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(net.predict_noise(&PixelField::zeros(Shape::flat(3)), 1).is_err());
    }

    proptest! {
        #[test]
        fn output_is_affine_in_last_layer(
            seed in 0u64..1000,
            w1 in proptest::collection::vec(-2.0f64..2.0, 4 * 6),
            w2 in proptest::collection::vec(-2.0f64..2.0, 4 * 6),
            b1 in proptest::collection::vec(-1.0f64..1.0, 4),
            b2 in proptest::collection::vec(-1.0f64..1.0, 4),
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            t in 1usize..50,
            skip in proptest::bool::ANY,
        ) {
            let net = net_with_skip(seed, skip);
            let w1 = Array2::from_shape_vec((4, 6), w1).unwrap();
            let w2 = Array2::from_shape_vec((4, 6), w2).unwrap();
            let (b1, b2) = (Array1::from(b1), Array1::from(b2));
            let x = PixelField::new(Shape::new(1, 2, 2), x).unwrap();
            let out = |w: Array2<f64>, b: Array1<f64>| {
                net.with_last_layer(w, b).unwrap().predict_noise(&x, t).unwrap().into_data()
            };
            let sum = out(&w1 + &w2, &b1 + &b2);
            let parts = out(w1, b1) + out(w2, b2) - out(Array2::zeros((4, 6)), Array1::zeros(4));
            for (a, b) in sum.iter().zip(parts.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn skip_adds_the_input() {
        let (plain, skip) = (net_with_skip(4, false), net_with_skip(4, true));
        let x = PixelField::new(Shape::new(1, 2, 2), vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let diff = skip.predict_noise(&x, 5).unwrap().into_data() - plain.predict_noise(&x, 5).unwrap().into_data();
        for (d, xi) in diff.iter().zip(x.as_slice()) {
            assert!((d - xi).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for skip in [false, true] {
            check_gradient(&net_with_skip(5, skip));
        }
    }

    fn check_gradient(net: &ScoreNet) {
        let mut rng = child_rng(9, "batch", 0);
        let n = 5;
        let xs = Array2::from_shape_fn((n, 4), |_| StandardNormal.sample(&mut rng));
        let targets = Array2::from_shape_fn((n, 4), |_| StandardNormal.sample(&mut rng));
        let batch = TrainBatch { xs, times: vec![3.0, 10.0, 20.0, 33.5, 49.0], targets };
        let wd = 0.01;
        let (_, grad) = net.loss_and_grad(&batch, wd).unwrap();
        let objective = |p: &[f64]| {
            let mut m = net.clone();
            m.set_params_flat(p).unwrap();
            let (loss, _) = m.loss_and_grad(&batch, 0.0).unwrap();
            loss + 0.5 * wd * p.iter().map(|v| v * v).sum::<f64>()
        };
        let params = net.params_flat();
        let h = 1e-6;
        for &j in &[0usize, 7, 40, 61, 90, net.num_params() - 1] {
            let mut up = params.clone();
            up[j] += h;
            let mut down = params.clone();
            down[j] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            let rel = (fd - grad[j]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "param {j}: analytic {} vs fd {fd}", grad[j]);
        }
    }

    #[test]
    fn archive_round_trip() {
        let net = small_net(11);
        let back = ScoreNet::from_archive(&net.to_archive().unwrap()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn rejects_oversized_feature_layer() {
        let config = NetConfig {
            shape: Shape::new(1, 8, 8),
            hidden: vec![],
            time_features: 2,
            time_scale: 100.0,
            input_skip: false,
        };
        assert!(ScoreNet::new(config, 0).is_err());
    }
}
