//! Reference solutions for the moment recursion: a brute-force trajectory
//! ensemble and the exact recursion for affine noise models.

mod closed_form;
mod coeffs;
mod ensemble;
mod report;
mod verify;

pub use closed_form::affine_closed_form;
pub use ensemble::{ensemble_moments, summarize, EnsembleMoments};
pub use report::{compare_to_ensemble, write_report, ComparisonRow, REPORT_HEADER};
pub use verify::{gaussian_gamma_table, verify_kind, AffineSetup, KindVerdict, CLOSED_FORM_RTOL};
