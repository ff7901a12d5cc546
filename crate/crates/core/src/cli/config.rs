//! Experiment configuration files.
//!
//! ```toml
//! [model]
//! kind = "ipvae"          # ipvae | igvae | igrelu | pc | lca
//! decoder = "linear"      # optional: linear | linear_relu | mlp1
//! latent_dim = 256
//!
//! [inference]
//! t_test = 1000
//! map_decode = "both"     # on | off | both
//!
//! [train]                 # any TrainConfig field
//! epochs = 100
//! t_train = 16
//! beta = 24.0
//!
//! [data]
//! source = "patches"      # or "idx"
//! dir = "../data/natural"
//! patch = 16
//! n_train = 20000
//! n_test = 2000
//!
//! [run]
//! seed = 0
//! out_dir = "runs/ipvae"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{Decode, ModelKind};
use crate::error::{FondError, Result};
use crate::learning::TrainConfig;
use crate::model::DecoderKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderKind>,
    /// K
    pub latent_dim: usize,
    /// Hidden width of the one-layer MLP decoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Ipvae,
            decoder: None,
            latent_dim: 512,
            hidden: None,
        }
    }
}

impl ModelSection {
    pub fn decoder_kind(&self) -> DecoderKind {
        self.decoder.unwrap_or_else(|| self.kind.default_decoder())
    }
}

/// Which reconstructions evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapDecode {
    Off,
    On,
    #[default]
    Both,
}

impl MapDecode {
    pub fn decode(self) -> Decode {
        match self {
            MapDecode::Off => Decode::Sampled,
            MapDecode::On => Decode::Map,
            MapDecode::Both => Decode::Both,
        }
    }
}

impl std::str::FromStr for MapDecode {
    type Err = FondError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(MapDecode::On),
            "off" => Ok(MapDecode::Off),
            "both" => Ok(MapDecode::Both),
            other => Err(FondError::InvalidArgument(format!(
                "map-decode must be on, off or both, not {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub t_test: usize,
    pub map_decode: MapDecode,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            t_test: 1000,
            map_decode: MapDecode::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    /// Whitened square patches cut from a directory of grayscale images.
    Patches {
        dir: PathBuf,
        #[serde(default = "default_patch")]
        patch: usize,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    /// IDX image (and optional label) files.
    Idx {
        train_images: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_labels: Option<PathBuf>,
        test_images: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        /// Use only the first `limit_train` training rows.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_test: Option<usize>,
    },
}

fn default_patch() -> usize {
    16
}

fn default_n_train() -> usize {
    20_000
}

fn default_n_test() -> usize {
    2_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text without resolving paths.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| FondError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FondError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            FondError::Config(msg) => FondError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FondError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FondError::Config(msg.to_string()));
        if self.model.latent_dim == 0 {
            return bad("model.latent_dim must be ≥ 1");
        }
        if self.train.t_train == 0 {
            return bad("train.t_train must be ≥ 1");
        }
        if self.inference.t_test == 0 {
            return bad("inference.t_test must be ≥ 1");
        }
        if !(self.train.beta >= 0.0) {
            return bad("train.beta must be ≥ 0");
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be ≥ 1");
        }
        if !(self.train.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        let dec = self.model.decoder_kind();
        let ok = match self.model.kind {
            ModelKind::Igrelu => dec == DecoderKind::LinearRelu,
            ModelKind::Pc | ModelKind::Lca => dec == DecoderKind::Linear,
            ModelKind::Ipvae | ModelKind::Igvae => dec != DecoderKind::LinearRelu,
        };
        if !ok {
            return Err(FondError::Config(format!(
                "model.decoder {dec:?} is not available for {}",
                self.model.kind
            )));
        }
        if let DataSpec::Patches { patch, n_train, .. } = &self.data {
            if *patch == 0 || *n_train < 2 {
                return bad("data.patch must be ≥ 1 and data.n_train ≥ 2");
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSpec::Patches { dir, .. } => fix(dir),
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(train_images);
                fix(test_images);
                if let Some(p) = train_labels {
                    fix(p);
                }
                if let Some(p) = test_labels {
                    fix(p);
                }
            }
        }
        fix(&mut self.run.out_dir);
    }
}
