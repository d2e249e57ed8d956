use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::moments::{ResultRow, SamplerKind};

const HASH_FILE: &str = "config.sha256";

/// An output directory bound to one artifact configuration.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Opens (and with `create`, initialises) the configured output
    /// directory. A directory stamped with a different artifact hash is
    /// refused.
    pub fn open(cfg: &ExperimentConfig, create: bool) -> Result<Self> {
        let root = cfg.output_dir.clone();
        let hash = cfg.artifact_hash();
        let stamp = root.join(HASH_FILE);
        if stamp.exists() {
            let found = fs::read_to_string(&stamp)?.trim().to_owned();
            if found != hash {
                return Err(Error::Config(vec![format!(
                    "output directory {} holds artifacts of config {found}, this config is {hash}",
                    root.display()
                )]));
            }
        } else if create {
            fs::create_dir_all(&root)?;
            fs::write(&stamp, format!("{hash}\n"))?;
            fs::write(root.join("config.ini"), cfg.resolved())?;
        } else {
            return Err(Error::MissingInput(format!("{} (run `train` first)", stamp.display())));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn posterior(&self) -> PathBuf {
        self.root.join("posterior.bin")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("train_loss.csv")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn analytic_table(&self) -> PathBuf {
        self.root.join("analytic_gamma.json")
    }

    pub fn reports(&self) -> Result<PathBuf> {
        let dir = self.root.join("reports");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn trajectory(&self, kind: SamplerKind, skip_desc: &str, mc_samples: usize, seed: u64) -> PathBuf {
        self.root.join("trajectories").join(format!("{kind}_{skip_desc}_s{mc_samples}")).join(format!("seed{seed}"))
    }

    pub fn trajectory_of(&self, row: &ResultRow) -> PathBuf {
        self.trajectory(row.kind, &row.skip_desc, row.mc_samples, row.seed)
    }

    /// Fails with the file name when an input artifact is absent.
    pub fn require(&self, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingInput(path.display().to_string()))
        }
    }
}
