use std::fs;
use std::io::Write;
use std::path::Path;

use super::ensemble::EnsembleMoments;
use crate::error::Result;
use crate::moments::{GenerationResult, SamplerKind};

pub const REPORT_HEADER: &str =
    "kind,pixel,engine_mean,engine_var,ensemble_mean,ensemble_var,stderr_mean,stderr_var,z_mean,z_var,rel_var_err";

/// Per-pixel comparison of an engine run against the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub kind: SamplerKind,
    pub pixel: usize,
    pub engine_mean: f64,
    pub engine_var: f64,
    pub ensemble_mean: f64,
    pub ensemble_var: f64,
    pub stderr_mean: f64,
    pub stderr_var: f64,
}

impl ComparisonRow {
    /// Mean gap in units of the ensemble standard error.
    pub fn z_mean(&self) -> f64 {
        z(self.engine_mean - self.ensemble_mean, self.stderr_mean)
    }

    pub fn z_var(&self) -> f64 {
        z(self.engine_var - self.ensemble_var, self.stderr_var)
    }

    pub fn rel_var_err(&self) -> f64 {
        if self.ensemble_var == 0.0 {
            if self.engine_var == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.engine_var - self.ensemble_var).abs() / self.ensemble_var
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:.4},{:.4},{:.6}",
            self.kind,
            self.pixel,
            self.engine_mean,
            self.engine_var,
            self.ensemble_mean,
            self.ensemble_var,
            self.stderr_mean,
            self.stderr_var,
            self.z_mean(),
            self.z_var(),
            self.rel_var_err()
        )
    }
}

fn z(gap: f64, se: f64) -> f64 {
    if se > 0.0 {
        gap / se
    } else if gap == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// One row per pixel comparing the engine's `E(x_0)`, `Var(x_0)` with the ensemble.
pub fn compare_to_ensemble(kind: SamplerKind, engine: &GenerationResult, ens: &EnsembleMoments) -> Vec<ComparisonRow> {
    (0..engine.var0.len())
        .map(|p| ComparisonRow {
            kind,
            pixel: p,
            engine_mean: engine.mean0.as_slice()[p],
            engine_var: engine.var0.as_slice()[p],
            ensemble_mean: ens.mean.as_slice()[p],
            ensemble_var: ens.var.as_slice()[p],
            stderr_mean: ens.stderr.as_slice()[p],
            stderr_var: ens.stderr_var.as_slice()[p],
        })
        .collect()
}

pub fn write_report(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{REPORT_HEADER}")?;
    for row in rows {
        writeln!(file, "{}", row.to_csv())?;
    }
    Ok(())
}
