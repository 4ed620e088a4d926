use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, Dataset, SynthSuite};
use crate::episode::{EpisodeConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::lsr::LsrConfig;
use crate::model::{AdapterKind, VitConfig};
use crate::tensor::Precision;
use crate::verify::GradCheckOptions;

/// Where datasets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SynthSuite),
    Manifests {
        base: PathBuf,
        validation: PathBuf,
        targets: Vec<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SynthSuite::default())
    }
}

/// Loaded datasets of a run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub base: Dataset,
    pub validation: Dataset,
    pub targets: Vec<Dataset>,
}

impl DataConfig {
    fn check_paths(&self) -> Result<()> {
        if let DataConfig::Manifests {
            base,
            validation,
            targets,
        } = self
        {
            if targets.is_empty() {
                return Err(Error::Config("data.manifests.targets is empty".into()));
            }
            for p in std::iter::once(base).chain(std::iter::once(validation)).chain(targets) {
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "dataset manifest {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Datasets> {
        match self {
            DataConfig::Synthetic(suite) => {
                let (base, validation, targets) = suite.generate()?;
                Ok(Datasets {
                    base,
                    validation,
                    targets,
                })
            }
            DataConfig::Manifests {
                base,
                validation,
                targets,
            } => Ok(Datasets {
                base: load_dataset(base)?,
                validation: load_dataset(validation)?,
                targets: targets.iter().map(load_dataset).collect::<Result<_>>()?,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub episode: EpisodeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1000,
            episode: EpisodeConfig::default(),
        }
    }
}

/// Episode used by the `gradcheck` command, drawn from the base dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub episode: EpisodeConfig,
    /// Standard deviation of random values added to the adapter before
    /// checking. Zero checks the initial point; away from it, entries with
    /// gradients near 1e-6 need a wider `options.step`.
    pub perturb: f64,
    pub options: GradCheckOptions,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            episode: EpisodeConfig::new(2, 1, 1),
            perturb: 0.0,
            options: GradCheckOptions::default(),
        }
    }
}

/// Everything a command needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Filled in from the subcommand.
    pub command: String,
    pub model: VitConfig,
    /// Adapter trained by `train`.
    pub adapter: AdapterKind,
    pub train: TrainConfig,
    pub lsr: LsrConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub data: DataConfig,
    pub out: PathBuf,
    /// Master seed; copied into `train.seed`.
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            model: VitConfig::toy(),
            adapter: AdapterKind::Cp,
            train: TrainConfig::desk(),
            lsr: LsrConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
            data: DataConfig::default(),
            out: PathBuf::from("runs"),
            seed: 0,
            precision: Precision::F32,
            checkpoint: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub episodes: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply overrides and validate the whole configuration. `--episodes`
    /// sets training episodes for `train`/`ablate` and evaluation episodes
    /// otherwise.
    pub fn resolve(mut self, command: &str, o: &Overrides) -> Result<Self> {
        self.command = command.to_string();
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        match o.precision {
            Some(p) => self.precision = p,
            None if command == "gradcheck" => self.precision = Precision::F64,
            None => {}
        }
        if let Some(p) = &o.checkpoint {
            self.checkpoint = Some(p.clone());
        }
        if let Some(n) = o.episodes {
            match command {
                "train" | "ablate" => self.train.episodes = n,
                _ => self.eval.episodes = n,
            }
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.lsr.validate(self.train.episodes)?;
        self.eval.episode.validate()?;
        self.gradcheck.episode.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        if self.adapter == AdapterKind::Frozen && self.command == "train" {
            return Err(Error::Config("adapter `frozen` has nothing to train".into()));
        }
        if self.command == "gradcheck" && self.precision != Precision::F64 {
            return Err(Error::Config("gradcheck runs in 64-bit precision only".into()));
        }
        if let Some(c) = &self.checkpoint {
            if !c.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", c.display())));
            }
        }
        self.data.check_paths()
    }

    /// Hex digest of the resolved configuration without the output root.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.out = PathBuf::new();
        let json = serde_json::to_string(&keyed).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// `<out>/<command>-<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("{}-{}", self.command, self.hash()))
    }
}
