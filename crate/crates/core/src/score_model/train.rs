use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::net::{ScoreNet, TrainBatch};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::seed::child_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { weight_decay: 1e-4, steps: 2000, batch_size: 128, learning_rate: 0.02, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    /// Minibatch denoising loss before each update.
    pub losses: Vec<f64>,
}

/// Draws a minibatch of `(x_t, t, eps)` triples: data index and step `t` are
/// uniform, `x_t = alpha_t x_0 + sigma_t eps`.
pub fn sample_batch<R: Rng>(data: &Dataset, schedule: &NoiseSchedule, batch_size: usize, rng: &mut R) -> TrainBatch {
    let d = data.shape().len();
    let mut xs = Array2::zeros((batch_size, d));
    let mut targets = Array2::zeros((batch_size, d));
    let mut times = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let i = rng.gen_range(0..data.len());
        let t = rng.gen_range(1..=schedule.num_steps());
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for p in 0..d {
            let eps: f64 = StandardNormal.sample(rng);
            targets[[row, p]] = eps;
            xs[[row, p]] = a * data.samples()[[i, p]] + s * eps;
        }
        times.push(t as f64);
    }
    TrainBatch { xs, times, targets }
}

/// MAP training of the denoising objective with unit time weighting and an
/// L2 penalty, by plain minibatch SGD with a fixed step size.
pub fn train_map(net: &ScoreNet, data: &Dataset, schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !(cfg.weight_decay > 0.0 && cfg.weight_decay.is_finite()) {
        return Err(Error::InvalidArgument(format!("weight_decay must be positive, got {}", cfg.weight_decay)));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning_rate = {}", cfg.learning_rate)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if data.shape() != net.shape() {
        return Err(Error::ShapeMismatch { expected: net.dim(), got: data.shape().len() });
    }
    let mut net = net.clone();
    let mut params = net.params_flat();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = child_rng(cfg.seed, "train", step as u64);
        let batch = sample_batch(data, schedule, cfg.batch_size, &mut rng);
        let (loss, grad) = net.loss_and_grad(&batch, cfg.weight_decay)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        net.set_params_flat(&params)?;
    }
    Ok(TrainOutcome { net, losses })
}

/// Mean loss over the first and last 10% of steps (at least one step each).
pub fn window_means(losses: &[f64]) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let w = (losses.len() / 10).max(1);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}
