use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::analytic::AnalyticGammaTable;
use super::mc::{eps_moments, evaluate_rows, gaussian_rows, standard_normals, EpsMoments, McScheme};
use super::record::{GenerationResult, MomentState, StepRecord, TrajectoryMeta, TrajectoryRecord, VarianceInit};
use super::sampler::{
    dpm_solver2_coefficients, first_order_coefficients, DpmCoefficients, SamplerKind, StepCoefficients,
};
use super::skip::SkipSchedule;
use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::predictor::{AffineNoiseModel, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::seed::{child_rng, derive_seed};

/// Monte-Carlo sample size used when none is configured.
pub const DEFAULT_MC_SAMPLES: usize = 10;

/// Settings of one BayesDiff run.
#[derive(Debug, Clone)]
pub struct BayesDiffConfig {
    pub kind: SamplerKind,
    /// Monte-Carlo sample size `S` of the covariance estimate.
    pub mc_samples: usize,
    pub seed: u64,
    /// Steps treated as uncertain; `None` means every step.
    pub skip: Option<SkipSchedule>,
    pub mc_scheme: McScheme,
    pub var_init: VarianceInit,
    /// Required for [`SamplerKind::AnalyticDpm`].
    pub analytic: Option<AnalyticGammaTable>,
}

impl BayesDiffConfig {
    pub fn new(kind: SamplerKind, mc_samples: usize, seed: u64) -> Self {
        Self {
            kind,
            mc_samples,
            seed,
            skip: None,
            mc_scheme: McScheme::default(),
            var_init: VarianceInit::default(),
            analytic: None,
        }
    }

    pub fn with_skip(mut self, skip: SkipSchedule) -> Self {
        self.skip = Some(skip);
        self
    }

    pub fn with_scheme(mut self, scheme: McScheme) -> Self {
        self.mc_scheme = scheme;
        self
    }

    pub fn with_var_init(mut self, init: VarianceInit) -> Self {
        self.var_init = init;
        self
    }

    pub fn with_analytic(mut self, table: AnalyticGammaTable) -> Self {
        self.analytic = Some(table);
        self
    }
}

/// Network evaluations consumed by a BayesDiff run: the plain sampler's
/// evaluations plus `S` per uncertain step (`2S` for a second-order step).
pub fn expected_nfe(kind: SamplerKind, num_steps: usize, mc_samples: usize, skip: &SkipSchedule) -> usize {
    (1..=num_steps)
        .map(|t| {
            let base = kind.evals_per_step(t);
            base + if skip.contains(t) { base * mc_samples } else { 0 }
        })
        .sum()
}

/// `E(x_{t-1}) = a E(x_t) + b E(eps)`.
pub fn iterate_expectation(mean: &Array1<f64>, eps_mean: &Array1<f64>, c: &StepCoefficients) -> Array1<f64> {
    mean * c.a + eps_mean * c.b
}

/// `Var(x_{t-1}) = a^2 Var(x_t) + 2ab Cov(x_t, eps) + b^2 Var(eps) + injected`,
/// clamped at zero. Returns the variance and the number of clamped entries.
pub fn iterate_variance(
    var: &Array1<f64>,
    cov: &Array1<f64>,
    eps_var: &Array1<f64>,
    c: &StepCoefficients,
) -> Result<(Array1<f64>, usize)> {
    if c.injected < 0.0 {
        return Err(Error::NegativeInjectedVariance { t: 0, value: c.injected });
    }
    let mut clamps = 0;
    let mut out = var * (c.a * c.a) + cov * (2.0 * c.a * c.b) + eps_var * (c.b * c.b);
    out.mapv_inplace(|v| {
        let v = v + c.injected;
        if v < 0.0 {
            clamps += 1;
            0.0
        } else {
            v
        }
    });
    Ok((out, clamps))
}

/// Where the noise moments of an uncertain step come from.
#[derive(Clone, Copy)]
enum MomentSource<'a> {
    MonteCarlo(McScheme),
    Exact(&'a dyn AffineNoiseModel),
}

fn normals(seed: u64, label: &str, t: usize, d: usize) -> Array1<f64> {
    let mut rng = child_rng(seed, label, t as u64);
    Array1::from_shape_fn(d, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    })
}

fn gamma_seed(seed: u64, t: usize, slot: u64) -> u64 {
    derive_seed(seed, "gamma", 4 * t as u64 + slot)
}

fn single(model: &dyn NoisePredictor, x: &Array1<f64>, time: f64, seed: u64) -> Result<(Array1<f64>, Array1<f64>)> {
    let (m, g2) = model.predictive_batch(x.view().insert_axis(Axis(0)), time, seed)?;
    Ok((m.row(0).to_owned(), g2.row(0).to_owned()))
}

/// The plain noise prediction, for steps that carry no uncertainty.
fn mean_only(model: &dyn NoisePredictor, x: &Array1<f64>, time: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    let m = model.mean_batch(x.view().insert_axis(Axis(0)), time)?;
    Ok((m.row(0).to_owned(), Array1::zeros(x.len())))
}

fn draw_eps(m: &Array1<f64>, g2: &Array1<f64>, z: &Array1<f64>) -> Array1<f64> {
    m + &(g2.mapv(f64::sqrt) * z)
}

struct Engine<'a> {
    model: &'a dyn NoisePredictor,
    s: &'a NoiseSchedule,
    cfg: &'a BayesDiffConfig,
    source: MomentSource<'a>,
    nfe: usize,
}

impl Engine<'_> {
    fn first_order_moments(&mut self, t: usize, mean: &Array1<f64>, var: &Array1<f64>) -> Result<EpsMoments> {
        let time = t as f64;
        match self.source {
            MomentSource::Exact(affine) => {
                let gain = affine.gain(time);
                Ok(EpsMoments {
                    mean: &gain * mean + &affine.offset(time),
                    var: &gain * &gain * var + &affine.gamma_sq(time),
                    cov: &gain * var,
                })
            }
            MomentSource::MonteCarlo(scheme) => {
                let (seed, n) = (self.cfg.seed, self.cfg.mc_samples);
                let mut rng = child_rng(seed, "mc", t as u64);
                let z = standard_normals(n, mean.len(), scheme, &mut rng, None);
                let xs = gaussian_rows(mean, var, &z);
                let (m, g2) = evaluate_rows(self.model, xs.view(), time, gamma_seed(seed, t, 1))?;
                self.nfe += n;
                Ok(eps_moments(xs.view(), mean, m.view(), g2.view(), scheme))
            }
        }
    }

    /// Moments of the midpoint noise prediction `eps_s` of a second-order
    /// step, with `x_s = mid_a x_t + mid_b eps_t` and `eps_t` drawn from the
    /// predictive at `x_t`.
    fn midpoint_moments(
        &mut self,
        t: usize,
        c: &DpmCoefficients,
        mean: &Array1<f64>,
        var: &Array1<f64>,
    ) -> Result<EpsMoments> {
        match self.source {
            MomentSource::Exact(affine) => {
                let (tt, ts) = (t as f64, c.mid_time);
                let (gain_t, off_t, g2_t) = (affine.gain(tt), affine.offset(tt), affine.gamma_sq(tt));
                let (gain_s, off_s, g2_s) = (affine.gain(ts), affine.offset(ts), affine.gamma_sq(ts));
                let k = gain_t * c.mid_b + c.mid_a;
                let mid_mean = &k * mean + &(off_t * c.mid_b);
                let mid_var = &k * &k * var + &(g2_t * (c.mid_b * c.mid_b));
                Ok(EpsMoments {
                    mean: &gain_s * &mid_mean + &off_s,
                    var: &gain_s * &gain_s * &mid_var + &g2_s,
                    cov: &gain_s * &k * var,
                })
            }
            MomentSource::MonteCarlo(scheme) => {
                let (seed, n, d) = (self.cfg.seed, self.cfg.mc_samples, mean.len());
                let mut rng = child_rng(seed, "mc", t as u64);
                let z = standard_normals(n, d, scheme, &mut rng, None);
                let xs = gaussian_rows(mean, var, &z);
                let (m, g2) = evaluate_rows(self.model, xs.view(), t as f64, gamma_seed(seed, t, 1))?;
                let mut rng = child_rng(seed, "mc-mid", t as u64);
                let zm = standard_normals(n, d, scheme, &mut rng, Some(&z));
                let eps = m + &(g2.mapv(f64::sqrt) * &zm);
                let xs_mid: Array2<f64> = &xs * c.mid_a + &(eps * c.mid_b);
                let (ms, g2s) = evaluate_rows(self.model, xs_mid.view(), c.mid_time, gamma_seed(seed, t, 3))?;
                self.nfe += 2 * n;
                Ok(eps_moments(xs.view(), mean, ms.view(), g2s.view(), scheme))
            }
        }
    }

    fn run(&mut self, x_t: &PixelField) -> Result<(GenerationResult, TrajectoryRecord)> {
        let (s, cfg) = (self.s, self.cfg);
        let big_t = s.num_steps();
        let d = self.model.dim();
        x_t.check_len(d)?;
        if cfg.mc_samples == 0 {
            return Err(Error::InvalidArgument("Monte-Carlo sample size must be at least 1".into()));
        }
        let full = SkipSchedule::full(big_t);
        let skip = cfg.skip.as_ref().unwrap_or(&full);
        if skip.num_steps() != big_t {
            return Err(Error::InvalidArgument(format!(
                "skip schedule built for {} steps, schedule has {big_t}",
                skip.num_steps()
            )));
        }
        if skip.is_empty() {
            return Err(Error::InvalidArgument("skip schedule must be nonempty".into()));
        }
        let shape = x_t.shape();
        let field = |a: Array1<f64>| PixelField::from_array(shape, a);

        let mut x = x_t.data().clone();
        let (mut mean, mut var) = match cfg.var_init {
            VarianceInit::Conditional => (x.clone(), Array1::zeros(d)),
            VarianceInit::Unconditional => (Array1::zeros(d), Array1::ones(d)),
        };
        let mut clamps = 0;
        let mut states = Vec::with_capacity(big_t + 1);
        let mut steps = Vec::with_capacity(big_t);

        for t in (1..=big_t).rev() {
            let uncertain = skip.contains(t);
            let (m_t, g2_t) = if uncertain {
                single(self.model, &x, t as f64, gamma_seed(cfg.seed, t, 0))?
            } else {
                mean_only(self.model, &x, t as f64)?
            };
            self.nfe += 1;
            let eps_t = if uncertain { Some(draw_eps(&m_t, &g2_t, &normals(cfg.seed, "eps", t, d))) } else { None };
            let eps_t = eps_t.as_ref().unwrap_or(&m_t);

            let (x_next, coeffs, moments) = if cfg.kind == SamplerKind::DpmSolver2 && t >= 2 {
                let c = dpm_solver2_coefficients(s, t)?;
                let x_mid = &x * c.mid_a + &(eps_t * c.mid_b);
                let (m_s, g2_s) = if uncertain {
                    single(self.model, &x_mid, c.mid_time, gamma_seed(cfg.seed, t, 2))?
                } else {
                    mean_only(self.model, &x_mid, c.mid_time)?
                };
                self.nfe += 1;
                let eps_s =
                    if uncertain { draw_eps(&m_s, &g2_s, &normals(cfg.seed, "eps-mid", t, d)) } else { m_s.clone() };
                let moments =
                    if uncertain { self.midpoint_moments(t, &c, &mean, &var)? } else { EpsMoments::deterministic(m_s) };
                (&x * c.a + &(eps_s * c.b), c.outer(), moments)
            } else {
                let c = first_order_coefficients(cfg.kind, s, t, cfg.analytic.as_ref())?;
                let mut x_next = &x * c.a + &(eps_t * c.b);
                if c.injected > 0.0 {
                    x_next += &(normals(cfg.seed, "inject", t, d) * c.injected.sqrt());
                }
                let moments = if uncertain {
                    self.first_order_moments(t, &mean, &var)?
                } else {
                    EpsMoments::deterministic(m_t.clone())
                };
                (x_next, c, moments)
            };

            let new_mean = iterate_expectation(&mean, &moments.mean, &coeffs);
            let (new_var, n_clamped) = iterate_variance(&var, &moments.cov, &moments.var, &coeffs)
                .map_err(|_| Error::NegativeInjectedVariance { t, value: coeffs.injected })?;
            clamps += n_clamped;

            states.push(MomentState {
                t,
                sample: field(std::mem::replace(&mut x, x_next))?,
                mean: field(std::mem::replace(&mut mean, new_mean))?,
                var: field(std::mem::replace(&mut var, new_var))?,
                cov_x_eps: field(moments.cov)?,
            });
            steps.push(StepRecord {
                t,
                uncertain,
                pred_mean: m_t,
                pred_var: g2_t,
                eps_mean: moments.mean,
                eps_var: moments.var,
            });
            if x.iter().chain(mean.iter()).chain(var.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("state after step {t}")));
            }
        }
        states.push(MomentState {
            t: 0,
            sample: field(x.clone())?,
            mean: field(mean.clone())?,
            var: field(var.clone())?,
            cov_x_eps: PixelField::zeros(shape),
        });

        let var0 = field(var)?;
        let result = GenerationResult {
            x0: field(x)?,
            mean0: field(mean)?,
            image_uncertainty: var0.sum(),
            var0,
            nfe_count: self.nfe,
            clamp_count: clamps,
        };
        let meta = TrajectoryMeta {
            kind: cfg.kind,
            shape,
            num_steps: big_t,
            mc_samples: cfg.mc_samples,
            skip: skip.describe(),
            seed: cfg.seed,
            nfe_count: self.nfe,
            clamp_count: clamps,
            var_init: cfg.var_init,
            schedule_beta: s.betas().to_vec(),
        };
        Ok((result, TrajectoryRecord { meta, states, steps }))
    }
}

/// BayesDiff: runs the sampler from `x_t` while propagating the mean and
/// variance of the latent, estimating the latent/noise covariance by Monte
/// Carlo at every uncertain step (every step unless `cfg.skip` is set).
pub fn run_bayesdiff(
    x_t: &PixelField,
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    cfg: &BayesDiffConfig,
) -> Result<(GenerationResult, TrajectoryRecord)> {
    Engine { model, s, cfg, source: MomentSource::MonteCarlo(cfg.mc_scheme), nfe: 0 }.run(x_t)
}

/// BayesDiff-Skip: [`run_bayesdiff`] with uncertainty only on `skip`.
pub fn run_bayesdiff_skip(
    x_t: &PixelField,
    model: &dyn NoisePredictor,
    skip: &SkipSchedule,
    s: &NoiseSchedule,
    cfg: &BayesDiffConfig,
) -> Result<(GenerationResult, TrajectoryRecord)> {
    let cfg = cfg.clone().with_skip(skip.clone());
    run_bayesdiff(x_t, model, s, &cfg)
}

/// [`run_bayesdiff`] for an affine noise model with the Monte-Carlo moments
/// replaced by their closed forms. No covariance evaluations are counted.
pub fn run_bayesdiff_exact(
    x_t: &PixelField,
    model: &dyn AffineNoiseModel,
    s: &NoiseSchedule,
    cfg: &BayesDiffConfig,
) -> Result<(GenerationResult, TrajectoryRecord)> {
    Engine { model, s, cfg, source: MomentSource::Exact(model), nfe: 0 }.run(x_t)
}

/// One second-order solver step of the moment recursion from `state`,
/// returning the next state and the evaluations consumed.
pub fn step_dpm_solver2(
    state: &MomentState,
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    mc_samples: usize,
    seed: u64,
    scheme: McScheme,
) -> Result<(MomentState, usize)> {
    let t = state.t;
    if t < 2 {
        return Err(Error::StepOutOfRange { t, min: 2, max: s.num_steps() });
    }
    let cfg = BayesDiffConfig::new(SamplerKind::DpmSolver2, mc_samples, seed).with_scheme(scheme);
    let mut engine = Engine { model, s, cfg: &cfg, source: MomentSource::MonteCarlo(scheme), nfe: 0 };
    let d = model.dim();
    let c = dpm_solver2_coefficients(s, t)?;
    let x = state.sample.data();
    let (m_t, g2_t) = single(model, x, t as f64, gamma_seed(seed, t, 0))?;
    let eps_t = draw_eps(&m_t, &g2_t, &normals(seed, "eps", t, d));
    let x_mid = x * c.mid_a + &(eps_t * c.mid_b);
    let (m_s, g2_s) = single(model, &x_mid, c.mid_time, gamma_seed(seed, t, 2))?;
    let eps_s = draw_eps(&m_s, &g2_s, &normals(seed, "eps-mid", t, d));
    engine.nfe += 2;
    let moments = engine.midpoint_moments(t, &c, state.mean.data(), state.var.data())?;
    let coeffs = c.outer();
    let mean = iterate_expectation(state.mean.data(), &moments.mean, &coeffs);
    let (var, _) = iterate_variance(state.var.data(), &moments.cov, &moments.var, &coeffs)?;
    let shape = state.sample.shape();
    let next = MomentState {
        t: t - 1,
        sample: PixelField::from_array(shape, x * c.a + &(eps_s * c.b))?,
        mean: PixelField::from_array(shape, mean)?,
        var: PixelField::from_array(shape, var)?,
        cov_x_eps: PixelField::zeros(shape),
    };
    Ok((next, engine.nfe))
}

/// Plain sampling from step `t_start` down to `0` with the predictive mean
/// as the noise prediction. Injected noise (stochastic kinds) is drawn from
/// the same streams BayesDiff uses, so a run whose predictive variance is
/// identically zero reproduces this output bit for bit.
pub fn denoise_from(
    x: &PixelField,
    t_start: usize,
    model: &dyn NoisePredictor,
    kind: SamplerKind,
    s: &NoiseSchedule,
    seed: u64,
    analytic: Option<&AnalyticGammaTable>,
) -> Result<(PixelField, usize)> {
    if t_start > s.num_steps() {
        return Err(Error::StepOutOfRange { t: t_start, min: 0, max: s.num_steps() });
    }
    x.check_len(model.dim())?;
    let d = model.dim();
    let mut x_cur = x.data().clone();
    let mut nfe = 0;
    for t in (1..=t_start).rev() {
        let m_t = model.mean_batch(x_cur.view().insert_axis(Axis(0)), t as f64)?.row(0).to_owned();
        nfe += 1;
        x_cur = if kind == SamplerKind::DpmSolver2 && t >= 2 {
            let c = dpm_solver2_coefficients(s, t)?;
            let x_mid = &x_cur * c.mid_a + &(m_t * c.mid_b);
            let m_s = model.mean_batch(x_mid.view().insert_axis(Axis(0)), c.mid_time)?.row(0).to_owned();
            nfe += 1;
            &x_cur * c.a + &(m_s * c.b)
        } else {
            let c = first_order_coefficients(kind, s, t, analytic)?;
            let mut next = &x_cur * c.a + &(m_t * c.b);
            if c.injected > 0.0 {
                next += &(normals(seed, "inject", t, d) * c.injected.sqrt());
            }
            next
        };
    }
    Ok((PixelField::from_array(x.shape(), x_cur)?, nfe))
}

pub fn sample_vanilla(
    x_t: &PixelField,
    model: &dyn NoisePredictor,
    kind: SamplerKind,
    s: &NoiseSchedule,
    seed: u64,
    analytic: Option<&AnalyticGammaTable>,
) -> Result<(PixelField, usize)> {
    denoise_from(x_t, s.num_steps(), model, kind, s, seed, analytic)
}

/// The starting latent `x_T ~ N(0, I)` for a generation seed.
pub fn initial_latent(shape: crate::field::Shape, seed: u64) -> PixelField {
    PixelField::from_array(shape, normals(seed, "x_T", 0, shape.len())).expect("length matches shape")
}
