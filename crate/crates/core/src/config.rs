//! Run configuration: a TOML document with one section per module config,
//! layered over a built-in profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::MocoConfig;
use crate::dataio::{gen_synthetic, load_cifar10, Dataset};
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::sseval::ProbeConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SELFAUG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Synthetic data and small models; minutes on a laptop.
    Desk,
    /// CIFAR-10 with the original large-scale training parameters.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DatasetConfig {
    /// `synthetic` or `cifar10`.
    pub source: String,
    /// Directory of the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub per_class: usize,
    /// Side length of synthetic images.
    pub size: usize,
    pub data_seed: u64,
    /// Keep a seeded random subset of this many images.
    pub subsample: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: "synthetic".into(),
            path: None,
            num_classes: 4,
            per_class: 640,
            size: 16,
            data_seed: 7,
            subsample: None,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let data = match self.source.as_str() {
            "synthetic" => gen_synthetic(self.num_classes, self.per_class, (self.size, self.size), self.data_seed)?,
            "cifar10" => {
                let dir = self
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::Config("dataset.path is required for cifar10".into()))?;
                load_cifar10(dir)?
            }
            other => return Err(Error::Config(format!("unknown dataset source {other:?}"))),
        };
        Ok(match self.subsample {
            Some(n) => data.subsample(n, seed),
            None => data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
    pub dataset: DatasetConfig,
    pub moco: MocoConfig,
    pub search: SearchConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::profile(Profile::Desk)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut cfg = match profile {
            Profile::Desk => RunConfig {
                seed: 0,
                out_dir: PathBuf::from("runs"),
                workers: None,
                dataset: DatasetConfig::default(),
                moco: MocoConfig::default(),
                search: SearchConfig::default(),
                probe: ProbeConfig::default(),
            },
            Profile::Paper => RunConfig {
                seed: 0,
                out_dir: PathBuf::from("runs"),
                workers: None,
                dataset: DatasetConfig {
                    source: "cifar10".into(),
                    path: Some(PathBuf::from("data/cifar-10-batches-bin")),
                    ..DatasetConfig::default()
                },
                moco: MocoConfig::paper(),
                search: SearchConfig::paper(),
                probe: ProbeConfig::paper(),
            },
        };
        cfg.search.probe = cfg.probe.clone();
        cfg
    }

    /// Layers the TOML document `text` over `profile`; keys absent from the
    /// document keep the profile's values.
    pub fn from_toml(text: &str, profile: Profile) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        let mut base = toml::Value::try_from(RunConfig::profile(profile)).expect("profiles serialize");
        merge(&mut base, over);
        let mut cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::parse("config", e.to_string()))?;
        cfg.search.probe = cfg.probe.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text, profile)
    }

    /// Replaces the seed with `SELFAUG_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// The search settings with the run's probe settings.
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            probe: self.probe.clone(),
            ..self.search.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.moco.validate()?;
        self.search_config().validate()?;
        self.probe.validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}
