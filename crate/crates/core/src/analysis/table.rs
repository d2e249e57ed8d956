use std::fs;
use std::io::Write;
use std::path::Path;

use super::stats::{mean_std, skewness};
use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::moments::ResultRow;

/// Image-wise uncertainty: the sum of the pixel-wise variances.
pub fn image_uncertainty(var0: &PixelField) -> f64 {
    var0.sum()
}

/// Generation results together with summary statistics of their
/// image-wise uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyTable {
    rows: Vec<ResultRow>,
    mean: f64,
    std: f64,
    skewness: f64,
}

impl UncertaintyTable {
    pub fn new(rows: Vec<ResultRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("uncertainty table is empty".into()));
        }
        let scores: Vec<f64> = rows.iter().map(|r| r.image_uncertainty).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("image_uncertainty".into()));
        }
        let (mean, std) = mean_std(&scores);
        Ok(Self { rows, mean, std, skewness: skewness(&scores) })
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.image_uncertainty).collect()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn skewness(&self) -> f64 {
        self.skewness
    }

    /// Rows by descending uncertainty, ties by ascending run id.
    pub fn ranked(&self) -> Vec<&ResultRow> {
        let mut rows: Vec<&ResultRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.image_uncertainty.total_cmp(&a.image_uncertainty).then(a.run_id.cmp(&b.run_id)));
        rows
    }
}

/// Result of a filtering rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub threshold: f64,
    pub kept: Vec<ResultRow>,
    pub removed: Vec<ResultRow>,
}

impl FilterOutcome {
    pub fn kept_fraction(&self) -> f64 {
        self.kept.len() as f64 / (self.kept.len() + self.removed.len()) as f64
    }
}

/// Minimum number of rows for the filtering rules.
pub const MIN_FILTER_ROWS: usize = 10;

fn check_filter_rows(table: &UncertaintyTable) -> Result<()> {
    if table.len() < MIN_FILTER_ROWS {
        return Err(Error::InvalidArgument(format!(
            "filtering needs at least {MIN_FILTER_ROWS} rows, got {}",
            table.len()
        )));
    }
    Ok(())
}

fn split_at_threshold(table: &UncertaintyTable, threshold: f64) -> FilterOutcome {
    let (kept, removed) = table.rows.iter().cloned().partition(|r| r.image_uncertainty <= threshold);
    FilterOutcome { threshold, kept, removed }
}

/// Keeps rows whose uncertainty is at most `mu + sigma`.
pub fn filter_threshold(table: &UncertaintyTable) -> Result<FilterOutcome> {
    check_filter_rows(table)?;
    Ok(split_at_threshold(table, table.mean + table.std))
}

/// Removes the `fraction` of rows with the highest uncertainty (ties by run
/// id, as in [`UncertaintyTable::ranked`]).
pub fn filter_fraction(table: &UncertaintyTable, fraction: f64) -> Result<FilterOutcome> {
    check_filter_rows(table)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")));
    }
    let n_removed = (fraction * table.len() as f64).round() as usize;
    let ranked = table.ranked();
    let removed: Vec<ResultRow> = ranked[..n_removed].iter().map(|r| (*r).clone()).collect();
    let kept: Vec<ResultRow> = ranked[n_removed..].iter().map(|r| (*r).clone()).collect();
    let threshold = kept.first().map_or(f64::NEG_INFINITY, |r| r.image_uncertainty);
    Ok(FilterOutcome { threshold, kept, removed })
}

/// Five equal groups by descending uncertainty. Rows left over after an
/// even split go to the last group and are counted in `remainder`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quintiles {
    pub groups: Vec<Vec<ResultRow>>,
    pub remainder: usize,
}

pub fn quintile_groups(table: &UncertaintyTable) -> Quintiles {
    let ranked = table.ranked();
    let size = ranked.len() / 5;
    let remainder = ranked.len() % 5;
    let mut groups: Vec<Vec<ResultRow>> =
        ranked.chunks(size.max(1)).map(|c| c.iter().map(|r| (*r).clone()).collect()).collect();
    if size == 0 {
        groups.resize(5, Vec::new());
    } else {
        while groups.len() > 5 {
            let extra = groups.pop().unwrap();
            groups.last_mut().unwrap().extend(extra);
        }
    }
    Quintiles { groups, remainder }
}

/// Equal-width histogram of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 || scores.is_empty() {
        return Err(Error::InvalidArgument("histogram needs bins and data".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for s in scores {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "bin_lo,bin_hi,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(file, "{:e},{:e},{c}", h.edges[i], h.edges[i + 1])?;
    }
    Ok(())
}
