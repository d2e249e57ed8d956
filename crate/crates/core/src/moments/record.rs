use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::sampler::SamplerKind;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::field::{PixelField, Shape};

/// The running sample and propagated moments at one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub t: usize,
    pub sample: PixelField,
    pub mean: PixelField,
    pub var: PixelField,
    /// Covariance between `x_t` and the noise prediction the step out of `t`
    /// consumes (at the midpoint for the second-order solver).
    pub cov_x_eps: PixelField,
}

/// Starting moments of the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceInit {
    /// `E(x_T) = x_T`, `Var(x_T) = 0`: uncertainty conditioned on the seed.
    #[default]
    Conditional,
    /// `E(x_T) = 0`, `Var(x_T) = 1`: the marginal law of `x_T`.
    Unconditional,
}

/// What happened on one step `t -> t-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Whether the step treated the noise prediction as random.
    pub uncertain: bool,
    /// Predictive mean and variance at the realized sample. The variance is
    /// not evaluated on steps outside the uncertain set and reads zero there.
    pub pred_mean: Array1<f64>,
    pub pred_var: Array1<f64>,
    /// Noise moments entering the recursion.
    pub eps_mean: Array1<f64>,
    pub eps_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub x0: PixelField,
    pub mean0: PixelField,
    pub var0: PixelField,
    pub image_uncertainty: f64,
    pub nfe_count: usize,
    pub clamp_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub kind: SamplerKind,
    pub shape: Shape,
    pub num_steps: usize,
    pub mc_samples: usize,
    pub skip: String,
    pub seed: u64,
    pub nfe_count: usize,
    pub clamp_count: usize,
    pub var_init: VarianceInit,
    pub schedule_beta: Vec<f64>,
}

/// Full per-step history of one run, `states` from `t = T` down to `0` and
/// `steps` from `T` down to `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub meta: TrajectoryMeta,
    pub states: Vec<MomentState>,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn state_at(&self, t: usize) -> Result<&MomentState> {
        let n = self.meta.num_steps;
        if t > n {
            return Err(Error::StepOutOfRange { t, min: 0, max: n });
        }
        Ok(&self.states[n - t])
    }

    pub fn step_at(&self, t: usize) -> Result<&StepRecord> {
        let n = self.meta.num_steps;
        if t == 0 || t > n {
            return Err(Error::StepOutOfRange { t, min: 1, max: n });
        }
        Ok(&self.steps[n - t])
    }

    /// Writes `meta.json` and `arrays.bin` into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let d = self.meta.shape.len();
        let n = self.meta.num_steps;
        let mut ar = Archive::new(serde_json::json!({ "kind": "trajectory" }));
        let stack = |f: &dyn Fn(&MomentState) -> &PixelField| -> Vec<f64> {
            self.states.iter().flat_map(|s| f(s).as_slice().to_vec()).collect()
        };
        ar.push("sample", &[n + 1, d], stack(&|s| &s.sample))?;
        ar.push("mean", &[n + 1, d], stack(&|s| &s.mean))?;
        ar.push("var", &[n + 1, d], stack(&|s| &s.var))?;
        ar.push("cov", &[n + 1, d], stack(&|s| &s.cov_x_eps))?;
        let steps = |f: &dyn Fn(&StepRecord) -> &Array1<f64>| -> Vec<f64> {
            self.steps.iter().flat_map(|s| f(s).to_vec()).collect()
        };
        ar.push("pred_mean", &[n, d], steps(&|s| &s.pred_mean))?;
        ar.push("pred_var", &[n, d], steps(&|s| &s.pred_var))?;
        ar.push("eps_mean", &[n, d], steps(&|s| &s.eps_mean))?;
        ar.push("eps_var", &[n, d], steps(&|s| &s.eps_var))?;
        let flags = self.steps.iter().map(|s| if s.uncertain { 1.0 } else { 0.0 }).collect();
        ar.push("uncertain", &[n], flags)?;
        ar.write(&dir.join("arrays.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: TrajectoryMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let ar = Archive::read(&dir.join("arrays.bin"))?;
        let (n, d, shape) = (meta.num_steps, meta.shape.len(), meta.shape);
        let rows = |name: &str, count: usize| -> Result<Vec<Array1<f64>>> {
            let (dims, data) = ar.get(name)?;
            if dims != [count, d] {
                return Err(Error::Format(format!("`{name}` has shape {dims:?}")));
            }
            Ok(data.chunks_exact(d).map(|c| Array1::from(c.to_vec())).collect())
        };
        let field = |a: Array1<f64>| PixelField::from_array(shape, a);
        let (sample, mean, var, cov) =
            (rows("sample", n + 1)?, rows("mean", n + 1)?, rows("var", n + 1)?, rows("cov", n + 1)?);
        let mut states = Vec::with_capacity(n + 1);
        for (i, (((x, m), v), c)) in sample.into_iter().zip(mean).zip(var).zip(cov).enumerate() {
            states.push(MomentState {
                t: n - i,
                sample: field(x)?,
                mean: field(m)?,
                var: field(v)?,
                cov_x_eps: field(c)?,
            });
        }
        let (pm, pv, em, ev) = (rows("pred_mean", n)?, rows("pred_var", n)?, rows("eps_mean", n)?, rows("eps_var", n)?);
        let flags = ar.get("uncertain")?.1.to_vec();
        let steps = pm
            .into_iter()
            .zip(pv)
            .zip(em)
            .zip(ev)
            .zip(flags)
            .enumerate()
            .map(|(i, ((((pred_mean, pred_var), eps_mean), eps_var), flag))| StepRecord {
                t: n - i,
                uncertain: flag != 0.0,
                pred_mean,
                pred_var,
                eps_mean,
                eps_var,
            })
            .collect();
        Ok(Self { meta, states, steps })
    }
}

/// Header of the generation results CSV.
pub const RESULTS_HEADER: &str = "run_id,seed,kind,S,skip_desc,image_uncertainty,nfe_count";

/// One row of the generation results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: usize,
    pub seed: u64,
    pub kind: SamplerKind,
    pub mc_samples: usize,
    pub skip_desc: String,
    pub image_uncertainty: f64,
    pub nfe_count: usize,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{}",
            self.run_id, self.seed, self.kind, self.mc_samples, self.skip_desc, self.image_uncertainty, self.nfe_count
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Format(format!("expected 7 columns, got {}: `{line}`", cols.len())));
        }
        let bad = |what: &str| Error::Format(format!("bad {what} in `{line}`"));
        Ok(Self {
            run_id: cols[0].parse().map_err(|_| bad("run_id"))?,
            seed: cols[1].parse().map_err(|_| bad("seed"))?,
            kind: cols[2].parse()?,
            mc_samples: cols[3].parse().map_err(|_| bad("S"))?,
            skip_desc: cols[4].to_owned(),
            image_uncertainty: cols[5].parse().map_err(|_| bad("image_uncertainty"))?,
            nfe_count: cols[6].parse().map_err(|_| bad("nfe_count"))?,
        })
    }
}

/// Appends rows to a results CSV, writing the header if the file is new.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{RESULTS_HEADER}")?;
    }
    for row in rows {
        writeln!(file, "{}", row.to_csv())?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingInput(path.display().to_string()))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(ResultRow::parse).collect()
}
