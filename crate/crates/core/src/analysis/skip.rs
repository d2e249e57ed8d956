use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::stats::spearman;
use crate::error::{Error, Result};
use crate::field::Shape;
use crate::moments::{expected_nfe, initial_latent, run_bayesdiff, BayesDiffConfig, GenerationResult, SkipSchedule};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;

/// Size of the top and bottom sets compared across intervals.
pub const EXTREME_SET: usize = 9;
pub const MIN_CONSISTENCY_SEEDS: usize = 32;

/// Runs BayesDiff from `initial_latent(shape, seed)` for every seed, in
/// parallel. `cfg.seed` is replaced by each generation seed.
pub fn generate_batch(
    seeds: &[u64],
    shape: Shape,
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    cfg: &BayesDiffConfig,
) -> Result<Vec<GenerationResult>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let run = BayesDiffConfig { seed, ..cfg.clone() };
            Ok(run_bayesdiff(&initial_latent(shape, seed), model, s, &run)?.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipConsistencyRow {
    pub interval: usize,
    pub spearman: f64,
    pub top_overlap: usize,
    pub bottom_overlap: usize,
    /// Evaluations per generation as counted by the engine.
    pub nfe_per_run: usize,
    /// The same count from the accounting formula.
    pub expected_nfe: usize,
    pub seconds: f64,
    pub scores: Vec<f64>,
}

pub const SKIP_HEADER: &str = "interval,spearman,top_overlap,bottom_overlap,nfe_per_run,expected_nfe,seconds";

impl SkipConsistencyRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{},{:.3}",
            self.interval,
            self.spearman,
            self.top_overlap,
            self.bottom_overlap,
            self.nfe_per_run,
            self.expected_nfe,
            self.seconds
        )
    }
}

/// Indices of the `k` largest (or smallest) scores, ties by index.
fn extreme(scores: &[f64], k: usize, top: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        if top { ord.reverse() } else { ord }.then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// Runs the same seeds with every skip interval (0 meaning the full grid)
/// and ranks each interval's image-wise uncertainty against the full run.
pub fn skip_consistency_report(
    seeds: &[u64],
    shape: Shape,
    intervals: &[usize],
    model: &dyn NoisePredictor,
    s: &NoiseSchedule,
    cfg: &BayesDiffConfig,
) -> Result<Vec<SkipConsistencyRow>> {
    if seeds.len() < MIN_CONSISTENCY_SEEDS {
        return Err(Error::InvalidArgument(format!(
            "skip consistency needs at least {MIN_CONSISTENCY_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    if !intervals.contains(&0) {
        return Err(Error::InvalidArgument("intervals must include 0 (the full run)".into()));
    }
    let t = s.num_steps();
    let mut runs = Vec::with_capacity(intervals.len());
    for &k in intervals {
        let skip = SkipSchedule::interval(k, t)?;
        let start = Instant::now();
        let results = generate_batch(seeds, shape, model, s, &cfg.clone().with_skip(skip.clone()))?;
        let seconds = start.elapsed().as_secs_f64();
        let nfe = results[0].nfe_count;
        if results.iter().any(|r| r.nfe_count != nfe) {
            return Err(Error::Format("evaluation count differs between seeds".into()));
        }
        let scores = results.iter().map(|r| r.image_uncertainty).collect::<Vec<_>>();
        runs.push((k, scores, nfe, expected_nfe(cfg.kind, t, cfg.mc_samples, &skip), seconds));
    }
    let full = runs.iter().find(|r| r.0 == 0).map(|r| r.1.clone()).unwrap();
    let m = EXTREME_SET.min(seeds.len());
    let (full_top, full_bottom) = (extreme(&full, m, true), extreme(&full, m, false));
    runs.into_iter()
        .map(|(interval, scores, nfe_per_run, expected_nfe, seconds)| {
            Ok(SkipConsistencyRow {
                interval,
                spearman: spearman(&full, &scores)?,
                top_overlap: overlap(&full_top, &extreme(&scores, m, true)),
                bottom_overlap: overlap(&full_bottom, &extreme(&scores, m, false)),
                nfe_per_run,
                expected_nfe,
                seconds,
                scores,
            })
        })
        .collect()
}

pub fn write_skip_report(path: &Path, rows: &[SkipConsistencyRow]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{SKIP_HEADER}")?;
    for row in rows {
        writeln!(file, "{}", row.to_csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::SamplerKind;
    use crate::predictor::AffineScoreModel;
    use ndarray::array;

    #[test]
    fn extremes_and_overlap() {
        let s = [3.0, 1.0, 2.0, 3.0];
        assert_eq!(extreme(&s, 2, true), vec![0, 3]);
        assert_eq!(extreme(&s, 2, false), vec![1, 2]);
        assert_eq!(overlap(&[0, 3], &[3, 1]), 1);
    }

    #[test]
    fn full_interval_only_is_perfectly_consistent() {
        let s = NoiseSchedule::linear_rescaled(10).unwrap();
        let m =
            AffineScoreModel::new(Shape::flat(2), s.clone(), array![0.1, 0.2], array![0.3, 0.1], array![0.02, 0.05])
                .unwrap();
        let seeds: Vec<u64> = (0..32).collect();
        let cfg = BayesDiffConfig::new(SamplerKind::Ddim, 4, 0);
        let rows = skip_consistency_report(&seeds, Shape::flat(2), &[0], &m, &s, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].spearman - 1.0).abs() < 1e-12);
        assert_eq!(rows[0].top_overlap, 9);
        assert_eq!(rows[0].nfe_per_run, rows[0].expected_nfe);
        assert!(skip_consistency_report(&seeds[..10], Shape::flat(2), &[0], &m, &s, &cfg).is_err());
        assert!(skip_consistency_report(&seeds, Shape::flat(2), &[2], &m, &s, &cfg).is_err());
    }
}
