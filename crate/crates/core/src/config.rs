//! TOML pipeline configuration: dataset, captions, training and evaluation settings
//! under one master seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captions::EndpointConfig;
use crate::dataset::{DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::morphology::StageClass;
use crate::train::TrainConfig;
use crate::zeroshot::PrototypeMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    #[default]
    Template,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionSection {
    pub provider: Provider,
    pub endpoint: EndpointConfig,
    /// Serve remote requests from recorded response files instead of the network.
    pub replay_dir: Option<PathBuf>,
    /// Save every remote response body here.
    pub record_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub prototypes: PrototypeMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            prototypes: PrototypeMode::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; copied into the dataset and training sections.
    pub seed: u64,
    /// Run directory holding every artifact.
    pub out: PathBuf,
    /// Worker cap for parallel sections; `None` uses every core.
    pub threads: Option<usize>,
    pub precision: Precision,
    pub dataset: DatasetConfig,
    pub caption: CaptionSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: None,
            precision: Precision::F32,
            dataset: DatasetConfig::default(),
            caption: CaptionSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Sets the per-class count from a total image count.
    pub fn set_total_images(&mut self, total: usize) -> Result<()> {
        if total == 0 || !total.is_multiple_of(StageClass::COUNT) {
            return Err(Error::Config(format!(
                "image count {total} must be a positive multiple of {}",
                StageClass::COUNT
            )));
        }
        self.dataset.per_class = total / StageClass::COUNT;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.dataset.validate()?;
        self.train.validate()
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out.join("model")
    }

    pub fn eval_dir(&self, split: Split) -> PathBuf {
        self.out.join("eval").join(split.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_and_seed() {
        let cfg = PipelineConfig::from_toml(
            "seed = 9\nout = \"r\"\n[dataset]\nper_class = 30\n[train]\nepochs = 2\n[eval]\nsplit = \"val\"\n",
        )
        .unwrap();
        assert_eq!((cfg.dataset.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.dataset.per_class, 30);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.eval.split, Split::Val);
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let err = PipelineConfig::from_toml("[train]\nepochz = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("epochz")), "{err}");
        let err = PipelineConfig::from_toml("[caption]\nprovider = \"carrier-pigeon\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set_total_images(31).is_err());
        cfg.set_total_images(6000).unwrap();
        assert_eq!(cfg.dataset.per_class, 2000);
    }
}
