//! Pixel-wise uncertainty estimation for diffusion model samplers.
//!
//! A trained noise-prediction network gets a last-layer Laplace posterior
//! ([`laplace`]); its Gaussian predictive is pushed through the reverse
//! process by moment iteration ([`moments`]), yielding a generation together
//! with a per-pixel variance map. [`oracle`] holds brute-force and
//! closed-form references for the iteration rules, [`continuous`] the
//! continuous-time quadrature cross-check and [`analysis`] the downstream
//! ranking, filtering and resampling studies.

pub mod analysis;
pub mod archive;
pub mod cli;
pub mod continuous;
pub mod error;
pub mod field;
pub mod laplace;
pub mod moments;
pub mod oracle;
pub mod predictor;
pub mod schedule;
pub mod score_model;
pub mod seed;

pub use error::{Error, Result};
pub use field::{PixelField, Shape};
pub use laplace::{LaplacePosterior, PredictiveMoments};
pub use moments::{GenerationResult, McScheme, MomentState, SamplerKind, SkipSchedule, TrajectoryRecord};
pub use predictor::{AffineNoiseModel, AffineScoreModel, GammaMode, LastLayerPredictor, NoisePredictor};
pub use schedule::NoiseSchedule;
pub use score_model::{Dataset, DatasetKind, ScoreNet};
