//! Flat INI experiment configuration.
//!
//! Every command reads the same file. Sections and keys are checked against a
//! fixed vocabulary, and all problems are collected before anything is
//! reported, so a broken config fails once with the full list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::Shape;
use crate::laplace::LaplaceConfig;
use crate::moments::{McScheme, SamplerKind, VarianceInit, DEFAULT_MC_SAMPLES};
use crate::predictor::GammaMode;
use crate::schedule::NoiseSchedule;
use crate::score_model::{DatasetDescriptor, DatasetKind, NetConfig, TrainConfig};

/// Sections whose contents determine the trained artifacts; their resolved
/// form is what the output directory's hash covers.
const ARTIFACT_SECTIONS: [&str; 5] = ["dataset", "schedule", "model", "train", "laplace"];

const VOCABULARY: [(&str, &[&str]); 8] = [
    ("dataset", &["kind", "n", "seed", "channels", "height", "width"]),
    ("schedule", &["kind", "steps", "beta_start", "beta_end"]),
    ("model", &["hidden", "time_features", "input_skip", "seed"]),
    ("train", &["weight_decay", "steps", "batch_size", "learning_rate", "seed"]),
    (
        "laplace",
        &["obs_noise_var", "prior_precision", "n_fit_points", "bias_uncertain", "gamma", "weight_samples", "seed"],
    ),
    ("uq", &["samplers", "mc_samples", "skip", "n", "seed", "scheme", "var_init", "analytic_samples"]),
    ("verify", &["pixels", "steps", "ensemble", "mc_samples", "tolerance", "seed"]),
    ("output", &["dir"]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    /// `linear(beta_start, beta_end, steps)`.
    Linear { beta_start: f64, beta_end: f64, steps: usize },
    /// The `T`-independent continuous linear schedule sampled on `T` steps.
    LinearRescaled { steps: usize },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            Self::Linear { beta_start, beta_end, steps } => NoiseSchedule::linear(beta_start, beta_end, steps),
            Self::LinearRescaled { steps } => NoiseSchedule::linear_rescaled(steps),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            Self::Linear { steps, .. } | Self::LinearRescaled { steps } => steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqConfig {
    pub samplers: Vec<SamplerKind>,
    pub mc_samples: usize,
    /// Skipping interval; 0 runs full BayesDiff.
    pub skip: usize,
    pub n: usize,
    /// Generation `i` uses seed `seed + i`.
    pub seed: u64,
    pub scheme: McScheme,
    pub var_init: VarianceInit,
    /// Forward-diffused samples per step for the Analytic-DPM Gamma table.
    pub analytic_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub pixels: usize,
    pub steps: usize,
    pub ensemble: usize,
    pub mc_samples: usize,
    /// Largest accepted |z| of engine moments against the ensemble.
    pub tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetDescriptor,
    pub schedule: ScheduleSpec,
    pub net: NetConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub laplace: LaplaceConfig,
    pub gamma: GammaMode,
    pub uq: UqConfig,
    pub verify: VerifyConfig,
    pub output_dir: PathBuf,
}

/// Typed access to the raw key-value pairs that records every problem
/// instead of stopping at the first.
struct Reader {
    values: BTreeMap<(String, String), String>,
    errors: Vec<String>,
}

impl Reader {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_owned(), key.to_owned())).map(String::as_str)
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str, what: &str) -> Option<T> {
        let raw = self.raw(section, key)?.to_owned();
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("{section}.{key}: expected {what}, got `{raw}`"));
                None
            }
        }
    }

    fn required<T: FromStr>(&mut self, section: &str, key: &str, what: &str) -> Option<T> {
        if self.raw(section, key).is_none() {
            self.errors.push(format!("{section}.{key}: missing"));
            return None;
        }
        self.parse(section, key, what)
    }

    fn optional<T: FromStr>(&mut self, section: &str, key: &str, what: &str, default: T) -> T {
        match self.raw(section, key) {
            None => default,
            Some(_) => self.parse(section, key, what).unwrap_or(default),
        }
    }

    fn check(&mut self, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.errors.push(msg.into());
        }
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, what: &str) -> Option<Vec<T>> {
        let raw = self.raw(section, key)?.to_owned();
        let parsed: std::result::Result<Vec<T>, _> =
            raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect();
        match parsed {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("{section}.{key}: expected a comma-separated list of {what}, got `{raw}`"));
                None
            }
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and validates a config; a relative `output.dir` is taken
    /// relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut r = Reader { values: BTreeMap::new(), errors: Vec::new() };
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                for (key, _) in props.iter() {
                    r.errors.push(format!("`{key}` appears outside any section"));
                }
                continue;
            };
            let Some((_, keys)) = VOCABULARY.iter().find(|(name, _)| *name == section) else {
                r.errors.push(format!("unknown section [{section}]"));
                continue;
            };
            for (key, value) in props.iter() {
                if !keys.contains(&key) {
                    r.errors.push(format!("{section}.{key}: unknown key"));
                }
                r.values.insert((section.to_owned(), key.to_owned()), value.trim().to_owned());
            }
        }

        let kind: Option<DatasetKind> = match r.raw("dataset", "kind") {
            None => {
                r.errors.push("dataset.kind: missing".into());
                None
            }
            Some(k) => match k.parse() {
                Ok(k) => Some(k),
                Err(e) => {
                    r.errors.push(format!("dataset.kind: {e}"));
                    None
                }
            },
        };
        let n_data: Option<usize> = r.required("dataset", "n", "a count");
        let data_seed: Option<u64> = r.required("dataset", "seed", "an integer seed");
        let channels: usize = r.optional("dataset", "channels", "a count", 1);
        let height: Option<usize> = r.required("dataset", "height", "a count");
        let width: Option<usize> = r.required("dataset", "width", "a count");
        r.check(n_data != Some(0), "dataset.n: must be at least 1");
        r.check(channels > 0 && height != Some(0) && width != Some(0), "dataset: image dimensions must be positive");

        let sched_kind = r.raw("schedule", "kind").unwrap_or("linear-rescaled").to_owned();
        let steps: Option<usize> = r.required("schedule", "steps", "a step count");
        let beta_start: f64 = r.optional("schedule", "beta_start", "a number", 1e-4);
        let beta_end: f64 = r.optional("schedule", "beta_end", "a number", 0.02);
        let schedule = match (sched_kind.as_str(), steps) {
            ("linear", Some(steps)) => Some(ScheduleSpec::Linear { beta_start, beta_end, steps }),
            ("linear-rescaled", Some(steps)) => Some(ScheduleSpec::LinearRescaled { steps }),
            ("linear" | "linear-rescaled", None) => None,
            (other, _) => {
                r.errors.push(format!("schedule.kind: expected `linear` or `linear-rescaled`, got `{other}`"));
                None
            }
        };
        if let Some(spec) = schedule {
            if let Err(e) = spec.build() {
                r.errors.push(format!("schedule: {e}"));
            }
        }

        let hidden: Option<Vec<usize>> = match r.raw("model", "hidden") {
            None => {
                r.errors.push("model.hidden: missing".into());
                None
            }
            Some("") => Some(Vec::new()),
            Some(_) => r.list("model", "hidden", "layer widths"),
        };
        let time_features: usize = r.optional("model", "time_features", "a count", 8);
        let input_skip: bool = r.optional("model", "input_skip", "true or false", false);
        let model_seed: u64 = r.optional("model", "seed", "an integer seed", 0);

        let weight_decay: Option<f64> = r.required("train", "weight_decay", "a number");
        let train_steps: Option<usize> = r.required("train", "steps", "a step count");
        let train_seed: Option<u64> = r.required("train", "seed", "an integer seed");
        let defaults = TrainConfig::default();
        let batch_size: usize = r.optional("train", "batch_size", "a count", defaults.batch_size);
        let learning_rate: f64 = r.optional("train", "learning_rate", "a number", defaults.learning_rate);
        if let Some(wd) = weight_decay {
            r.check(positive(wd), format!("train.weight_decay: must be positive, got {wd}"));
        }
        r.check(batch_size > 0, "train.batch_size: must be at least 1");
        r.check(positive(learning_rate), "train.learning_rate: must be positive");

        let obs_noise_var: f64 = r.optional("laplace", "obs_noise_var", "a number", 1.0);
        r.check(positive(obs_noise_var), "laplace.obs_noise_var: must be positive");
        let prior_precision: Option<f64> = r.parse("laplace", "prior_precision", "a number");
        if let Some(p) = prior_precision {
            r.check(positive(p), "laplace.prior_precision: must be positive");
        }
        let n_fit_points: usize = r.optional("laplace", "n_fit_points", "a count", 1000);
        r.check(n_fit_points > 0, "laplace.n_fit_points: must be at least 1");
        let bias_uncertain: bool = r.optional("laplace", "bias_uncertain", "true or false", false);
        let laplace_seed: u64 = r.optional("laplace", "seed", "an integer seed", 0);
        let gamma = match r.raw("laplace", "gamma").unwrap_or("exact") {
            "exact" => Some(GammaMode::Exact),
            "sampled" => {
                let n: usize =
                    r.optional("laplace", "weight_samples", "a count", crate::laplace::DEFAULT_WEIGHT_SAMPLES);
                r.check(n >= 2, "laplace.weight_samples: need at least 2");
                Some(GammaMode::Sampled { n })
            }
            other => {
                r.errors.push(format!("laplace.gamma: expected `exact` or `sampled`, got `{other}`"));
                None
            }
        };

        let samplers: Vec<SamplerKind> = if r.raw("uq", "samplers").is_some() {
            let parsed = r.list("uq", "samplers", "sampler names");
            r.check(parsed.as_ref().is_none_or(|l| !l.is_empty()), "uq.samplers: empty list");
            parsed.unwrap_or_default()
        } else {
            vec![SamplerKind::Ddim]
        };
        let mc_samples: usize = r.optional("uq", "mc_samples", "a count", DEFAULT_MC_SAMPLES);
        r.check(mc_samples > 0, "uq.mc_samples: must be at least 1");
        let skip: usize = r.optional("uq", "skip", "a skipping interval", 4);
        let n_gen: usize = r.optional("uq", "n", "a count", 500);
        r.check(n_gen > 0, "uq.n: must be at least 1");
        let uq_seed: u64 = r.optional("uq", "seed", "an integer seed", 0);
        let scheme = match r.raw("uq", "scheme").unwrap_or("moment-matched") {
            "moment-matched" => McScheme::MomentMatched,
            "iid" => McScheme::Iid,
            other => {
                r.errors.push(format!("uq.scheme: expected `moment-matched` or `iid`, got `{other}`"));
                McScheme::MomentMatched
            }
        };
        let var_init = match r.raw("uq", "var_init").unwrap_or("conditional") {
            "conditional" => VarianceInit::Conditional,
            "unconditional" => VarianceInit::Unconditional,
            other => {
                r.errors.push(format!("uq.var_init: expected `conditional` or `unconditional`, got `{other}`"));
                VarianceInit::Conditional
            }
        };
        let analytic_samples: usize = r.optional("uq", "analytic_samples", "a count", 1000);
        r.check(analytic_samples > 0, "uq.analytic_samples: must be at least 1");

        let verify = VerifyConfig {
            pixels: r.optional("verify", "pixels", "a count", 2),
            steps: r.optional("verify", "steps", "a step count", 20),
            ensemble: r.optional("verify", "ensemble", "a count", 100_000),
            mc_samples: r.optional("verify", "mc_samples", "a count", 64),
            tolerance: r.optional("verify", "tolerance", "a number", 3.0),
            seed: r.optional("verify", "seed", "an integer seed", 0),
        };
        r.check((1..=4).contains(&verify.pixels), "verify.pixels: must be between 1 and 4");
        r.check(verify.steps >= 2, "verify.steps: must be at least 2");
        r.check(verify.ensemble >= 100, "verify.ensemble: need at least 100 trajectories");
        r.check(verify.mc_samples > 0, "verify.mc_samples: must be at least 1");
        r.check(verify.tolerance >= 0.0, "verify.tolerance: must be nonnegative");

        let output_dir = match r.raw("output", "dir") {
            Some(d) => Some(base.join(d)),
            None => {
                r.errors.push("output.dir: missing".into());
                None
            }
        };

        if !r.errors.is_empty() {
            return Err(Error::Config(r.errors));
        }
        // Every Option below was checked above.
        let shape = Shape::new(channels, height.unwrap(), width.unwrap());
        let schedule = schedule.unwrap();
        let net = NetConfig {
            shape,
            hidden: hidden.unwrap(),
            time_features,
            time_scale: schedule.steps() as f64,
            input_skip,
        };
        let weight_decay = weight_decay.unwrap();
        let mut laplace = LaplaceConfig::from_weight_decay(weight_decay, obs_noise_var, n_fit_points, laplace_seed);
        if let Some(p) = prior_precision {
            laplace.prior_precision = p;
        }
        laplace.bias_uncertain = bias_uncertain;
        Ok(Self {
            dataset: DatasetDescriptor { kind: kind.unwrap(), n: n_data.unwrap(), seed: data_seed.unwrap(), shape },
            schedule,
            net,
            model_seed,
            train: TrainConfig {
                weight_decay,
                steps: train_steps.unwrap(),
                batch_size,
                learning_rate,
                seed: train_seed.unwrap(),
            },
            laplace,
            gamma: gamma.unwrap(),
            uq: UqConfig { samplers, mc_samples, skip, n: n_gen, seed: uq_seed, scheme, var_init, analytic_samples },
            verify,
            output_dir: output_dir.unwrap(),
        })
    }

    /// Canonical text of every resolved value, defaults included, in a fixed
    /// order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for section in ARTIFACT_SECTIONS {
            out.push_str(&self.section_text(section));
        }
        out.push_str(&self.section_text("uq"));
        out.push_str(&self.section_text("verify"));
        let _ = writeln!(out, "[output]\ndir = {}\n", self.output_dir.display());
        out
    }

    fn section_text(&self, section: &str) -> String {
        let mut s = format!("[{section}]\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match section {
            "dataset" => {
                let d = &self.dataset;
                kv("kind", d.kind.name().into());
                kv("n", d.n.to_string());
                kv("seed", d.seed.to_string());
                kv("channels", d.shape.channels.to_string());
                kv("height", d.shape.height.to_string());
                kv("width", d.shape.width.to_string());
            }
            "schedule" => match self.schedule {
                ScheduleSpec::Linear { beta_start, beta_end, steps } => {
                    kv("kind", "linear".into());
                    kv("steps", steps.to_string());
                    kv("beta_start", format!("{beta_start:e}"));
                    kv("beta_end", format!("{beta_end:e}"));
                }
                ScheduleSpec::LinearRescaled { steps } => {
                    kv("kind", "linear-rescaled".into());
                    kv("steps", steps.to_string());
                }
            },
            "model" => {
                let widths: Vec<String> = self.net.hidden.iter().map(usize::to_string).collect();
                kv("hidden", widths.join(","));
                kv("time_features", self.net.time_features.to_string());
                kv("input_skip", self.net.input_skip.to_string());
                kv("seed", self.model_seed.to_string());
            }
            "train" => {
                let t = &self.train;
                kv("weight_decay", format!("{:e}", t.weight_decay));
                kv("steps", t.steps.to_string());
                kv("batch_size", t.batch_size.to_string());
                kv("learning_rate", format!("{:e}", t.learning_rate));
                kv("seed", t.seed.to_string());
            }
            "laplace" => {
                let l = &self.laplace;
                kv("obs_noise_var", format!("{:e}", l.obs_noise_var));
                kv("prior_precision", format!("{:e}", l.prior_precision));
                kv("n_fit_points", l.n_fit_points.to_string());
                kv("bias_uncertain", l.bias_uncertain.to_string());
                match self.gamma {
                    GammaMode::Exact => kv("gamma", "exact".into()),
                    GammaMode::Sampled { n } => {
                        kv("gamma", "sampled".into());
                        kv("weight_samples", n.to_string());
                    }
                }
                kv("seed", l.seed.to_string());
            }
            "uq" => {
                let u = &self.uq;
                let names: Vec<&str> = u.samplers.iter().map(SamplerKind::name).collect();
                kv("samplers", names.join(","));
                kv("mc_samples", u.mc_samples.to_string());
                kv("skip", u.skip.to_string());
                kv("n", u.n.to_string());
                kv("seed", u.seed.to_string());
                kv(
                    "scheme",
                    match u.scheme {
                        McScheme::Iid => "iid".into(),
                        McScheme::MomentMatched => "moment-matched".into(),
                    },
                );
                kv(
                    "var_init",
                    match u.var_init {
                        VarianceInit::Conditional => "conditional".into(),
                        VarianceInit::Unconditional => "unconditional".into(),
                    },
                );
                kv("analytic_samples", u.analytic_samples.to_string());
            }
            "verify" => {
                let v = &self.verify;
                kv("pixels", v.pixels.to_string());
                kv("steps", v.steps.to_string());
                kv("ensemble", v.ensemble.to_string());
                kv("mc_samples", v.mc_samples.to_string());
                kv("tolerance", v.tolerance.to_string());
                kv("seed", v.seed.to_string());
            }
            _ => unreachable!("fixed section list"),
        }
        s.push('\n');
        s
    }

    /// SHA-256 of the resolved artifact sections, hex encoded. Sampling and
    /// verification settings are left out: they are recorded per result row
    /// and do not change the checkpoint or posterior.
    pub fn artifact_hash(&self) -> String {
        let mut h = Sha256::new();
        for section in ARTIFACT_SECTIONS {
            h.update(self.section_text(section).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = "\
[dataset]
kind = two-mode-gaussian
n = 64
seed = 1
height = 2
width = 2

[schedule]
steps = 10

[model]
hidden = 8

[train]
weight_decay = 1e-4
steps = 5
seed = 0

[output]
dir = out
";

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/base"))
    }

    fn errors(text: &str) -> Vec<String> {
        match parse(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.dataset.shape, Shape::new(1, 2, 2));
        assert_eq!(c.schedule, ScheduleSpec::LinearRescaled { steps: 10 });
        assert_eq!(c.net.time_scale, 10.0);
        assert_eq!(c.laplace.obs_noise_var, 1.0);
        assert_eq!(c.laplace.prior_precision, 1e-4);
        assert_eq!(c.uq.samplers, vec![SamplerKind::Ddim]);
        assert_eq!(c.uq.skip, 4);
        assert_eq!(c.output_dir, Path::new("/base/out"));
    }

    #[test]
    fn missing_weight_decay_is_named() {
        let e = errors(&MINIMAL.replace("weight_decay = 1e-4\n", ""));
        assert_eq!(e, vec!["train.weight_decay: missing".to_string()]);
    }

    #[test]
    fn all_problems_are_listed() {
        let text = MINIMAL
            .replace("n = 64", "n = lots")
            .replace("hidden = 8", "hidden = 8\nwidht = 3")
            .replace("[output]", "[outputs]");
        let e = errors(&text);
        assert!(e.iter().any(|m| m.starts_with("dataset.n: expected a count")), "{e:?}");
        assert!(e.iter().any(|m| m == "model.widht: unknown key"), "{e:?}");
        assert!(e.iter().any(|m| m == "unknown section [outputs]"), "{e:?}");
        assert!(e.iter().any(|m| m == "output.dir: missing"), "{e:?}");
    }

    #[test]
    fn bad_enums_are_rejected() {
        let text = format!("{MINIMAL}\n[uq]\nsamplers = ddim,heun\nscheme = sobol\n");
        let e = errors(&text);
        assert_eq!(e.len(), 2, "{e:?}");
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&c.resolved(), Path::new("/")).unwrap();
        assert_eq!(again.artifact_hash(), c.artifact_hash());
        assert_eq!(again.uq, c.uq);
    }

    #[test]
    fn hash_tracks_artifact_sections_only() {
        let c = parse(MINIMAL).unwrap();
        let more_runs = parse(&format!("{MINIMAL}\n[uq]\nn = 7\n")).unwrap();
        assert_eq!(c.artifact_hash(), more_runs.artifact_hash());
        let other_wd = parse(&MINIMAL.replace("1e-4", "2e-4")).unwrap();
        assert_ne!(c.artifact_hash(), other_wd.artifact_hash());
        assert_eq!(c.artifact_hash().len(), 64);
    }
}
