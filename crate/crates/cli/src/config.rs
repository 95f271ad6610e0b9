use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use tokensplit::adapters::{AdapterTrainConfig, MergeMode};
use tokensplit::dataset::ConceptSpec;
use tokensplit::loda::InferenceConfig;
use tokensplit::model::{BaseTrainConfig, ModelConfig};
use tokensplit::{Error, Result};

pub const RUN_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    #[default]
    Checker,
    Stripes,
}

impl Concept {
    pub fn spec(self) -> ConceptSpec {
        match self {
            Concept::Checker => ConceptSpec::checker(),
            Concept::Stripes => ConceptSpec::stripes(),
        }
    }
}

/// Scene seeds for base training and its held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Prebuilt bundle from `gen-dataset`; scenes are generated on the fly when absent.
    pub bundle: Option<PathBuf>,
    pub first_seed: u64,
    pub count: usize,
    pub heldout_seed: u64,
    pub heldout_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            bundle: None,
            first_seed: 0,
            count: 1000,
            heldout_seed: 100_000,
            heldout_count: 16,
        }
    }
}

/// Few-shot images for one concept adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptConfig {
    pub kind: Concept,
    /// Adapter name in the database; defaults to the concept kind.
    pub name: Option<String>,
    /// Prompt word the adapter binds to; defaults to the concept's word.
    pub word: Option<String>,
    pub images: usize,
    pub seed: u64,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        ConceptConfig {
            kind: Concept::Checker,
            name: None,
            word: None,
            images: 6,
            seed: 7,
        }
    }
}

/// Adapter `concept` attached to `word`, or to its stored word when absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    pub concept: String,
    #[serde(default)]
    pub word: Option<String>,
}

impl Binding {
    /// Parses `name` or `name=word`.
    pub fn parse(s: &str) -> Result<Self> {
        let (concept, word) = match s.split_once('=') {
            Some((c, w)) => (c, Some(w.to_string())),
            None => (s, None),
        };
        if concept.is_empty() || word.as_deref() == Some("") {
            return Err(Error::config(
                "bindings",
                format!("expected NAME or NAME=WORD, got `{s}`"),
            ));
        }
        Ok(Binding {
            concept: concept.to_string(),
            word,
        })
    }
}

/// Everything a command needs; file values are overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: u32,
    pub precision: Precision,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub dataset: DatasetConfig,
    pub train: BaseTrainConfig,
    pub concept: ConceptConfig,
    pub adapter: AdapterTrainConfig,
    pub inference: InferenceConfig,
    pub prompt: String,
    pub bindings: Vec<Binding>,
    pub merge: MergeMode,
    /// Attach bound adapters during inference.
    pub use_adapters: bool,
    /// Tokens whose attention is separated; defaults to the bound words.
    pub tokens: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: RUN_SCHEMA,
            precision: Precision::F32,
            model: ModelConfig::default(),
            model_seed: 1,
            dataset: DatasetConfig::default(),
            train: BaseTrainConfig {
                steps: 1500,
                ..Default::default()
            },
            concept: ConceptConfig::default(),
            adapter: AdapterTrainConfig::default(),
            inference: InferenceConfig::default(),
            prompt: "a square and a circle".into(),
            bindings: ["checker", "stripes"]
                .map(|c| Binding {
                    concept: c.into(),
                    word: None,
                })
                .to_vec(),
            merge: MergeMode::TokenWise,
            use_adapters: true,
            tokens: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        if cfg.schema > RUN_SCHEMA {
            return Err(Error::UnsupportedVersion {
                what: "run config",
                found: cfg.schema,
                supported: RUN_SCHEMA,
            });
        }
        Ok(cfg)
    }

    /// Checks the sections every command reads. Commands validate their
    /// own sections (`train`, `adapter`, `dataset`) before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.inference.validate(self.model.train_timesteps)?;
        if self.prompt.split_whitespace().next().is_none() {
            return Err(Error::config("prompt", "must contain at least one word"));
        }
        for (i, b) in self.bindings.iter().enumerate() {
            if b.concept.is_empty() {
                return Err(Error::config(format!("bindings[{i}].concept"), "must not be empty"));
            }
        }
        Ok(())
    }

    pub fn validate_dataset(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.count == 0 {
            return Err(Error::config("dataset.count", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echoed_config_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut cfg = RunConfig::default();
        cfg.bindings.push(Binding::parse("checker=square").unwrap());
        cfg.inference.percentile = 0.85;
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap(), cfg);
    }

    #[test]
    fn partial_files_keep_defaults_and_future_schemas_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"inference": {"steps": 20}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.inference.steps, 20);
        assert_eq!(cfg.inference.percentile, 0.9);
        fs::write(&path, r#"{"schema": 9}"#).unwrap();
        assert!(matches!(
            RunConfig::load(Some(&path)),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn bindings_parse() {
        assert_eq!(Binding::parse("a").unwrap().word, None);
        assert_eq!(Binding::parse("a=b").unwrap().word.as_deref(), Some("b"));
        for bad in ["", "=b", "a="] {
            assert!(Binding::parse(bad).is_err(), "{bad}");
        }
    }
}
