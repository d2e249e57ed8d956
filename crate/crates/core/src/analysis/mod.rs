//! Image-wise scores and the studies built on them: filtering, quintile
//! grouping, skip consistency, resampled and adjacent variants, and k-NN
//! precision/recall in pixel space.

mod export;
mod knn;
mod skip;
mod stats;
mod table;
mod variants;

pub use export::{export_uncertainty_map, write_pgm16};
pub use knn::{knn_precision_recall, stack_fields};
pub use skip::{
    generate_batch, skip_consistency_report, write_skip_report, SkipConsistencyRow, EXTREME_SET, MIN_CONSISTENCY_SEEDS,
    SKIP_HEADER,
};
pub use stats::{mean_std, ranks, skewness, spearman};
pub use table::{
    filter_fraction, filter_threshold, histogram, image_uncertainty, quintile_groups, write_histogram, FilterOutcome,
    Histogram, Quintiles, UncertaintyTable, MIN_FILTER_ROWS,
};
pub use variants::{adjacent_generations, default_resample_step, mean_pairwise_distance, resample_variants};

/// Neighbourhood size of the precision/recall balls.
pub const KNN_K: usize = 3;
