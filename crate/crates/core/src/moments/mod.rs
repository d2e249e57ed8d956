//! Moment iteration through reverse-diffusion samplers.
//!
//! Each sampler step is written as `x_{t-1} = a x_t + b eps + sqrt(q) z`, so
//! the latent's mean and per-pixel variance follow
//!
//! ```text
//! E(x_{t-1})   = a E(x_t) + b E(eps)
//! Var(x_{t-1}) = a^2 Var(x_t) + 2ab Cov(x_t, eps) + b^2 Var(eps) + q
//! ```
//!
//! with the covariance and the noise moments estimated by Monte Carlo over
//! `x_t ~ N(E(x_t), Var(x_t))`. The second-order DPM-Solver step consumes a
//! midpoint prediction `eps_s`; its moments come from a two-stage draw
//! through the midpoint.

mod analytic;
mod engine;
mod mc;
mod record;
mod sampler;
mod skip;

pub use analytic::{estimate_analytic_gamma, AnalyticGammaTable};
pub use engine::{
    denoise_from, expected_nfe, initial_latent, iterate_expectation, iterate_variance, run_bayesdiff,
    run_bayesdiff_exact, run_bayesdiff_skip, sample_vanilla, step_dpm_solver2, BayesDiffConfig, DEFAULT_MC_SAMPLES,
};
pub use mc::{eps_moments, estimate_cov_mc, evaluate_rows, gaussian_rows, standard_normals, EpsMoments, McScheme};
pub use record::{
    append_results, read_results, GenerationResult, MomentState, ResultRow, StepRecord, TrajectoryMeta,
    TrajectoryRecord, VarianceInit, RESULTS_HEADER,
};
pub use sampler::{
    analytic_dpm_variance, dpm_solver2_coefficients, first_order_coefficients, DpmCoefficients, SamplerKind,
    StepCoefficients,
};
pub use skip::{SkipDescriptor, SkipSchedule};
