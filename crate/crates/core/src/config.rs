//! JSON run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::FeatureRecord;
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub n_candidates: usize,
    pub eval_steps: usize,
    /// Training feature file.
    pub features: Option<PathBuf>,
    /// Held-out feature file for evaluation; defaults to `features`.
    pub eval_features: Option<PathBuf>,
    /// Vocabulary file; built from the training captions when absent.
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            n_candidates: 5,
            eval_steps: 50,
            features: None,
            eval_features: None,
            vocab: None,
            checkpoint: None,
            report: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_candidates == 0 {
            return Err(Error::BadConfig("n_candidates must be at least 1".into()));
        }
        if self.eval_steps == 0 || self.eval_steps > self.train.model.steps {
            return Err(Error::BadConfig(format!(
                "eval_steps must lie in 1..={}",
                self.train.model.steps
            )));
        }
        Ok(())
    }

    /// The value of an optional path key, or a configuration error naming it.
    pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::BadConfig(format!("missing required key `{key}`")))
    }
}

/// Sorted vocabulary of every word in the records' captions.
pub fn vocabulary_from_records(records: &[FeatureRecord]) -> Result<Vocabulary> {
    let mut words: Vec<String> = records
        .iter()
        .flat_map(|r| r.captions.iter().flat_map(|c| tokenize(c)))
        .collect();
    words.sort();
    words.dedup();
    Vocabulary::from_words(words)
}
