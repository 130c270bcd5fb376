//! Class caption generation.
//!
//! Captions come either from a deterministic template grammar ([`grammar`]) or from a
//! chat-completion endpoint ([`remote`]). Both are organised in batches: `N` captions
//! with batch size `B` are produced as the union of `⌈N/B⌉` batches, and every caption
//! is held to a token-length window `[min_len, max_len]`.

pub mod grammar;
pub mod remote;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::StageClass;

pub use grammar::{generate_batch, generate_set, Characteristic, PromptTemplate};
pub use remote::{fetch_remote_captions, EndpointConfig};

/// Lowercase, whitespace-split words with punctuation removed. Shared with the text encoder.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn token_len(text: &str) -> usize {
    tokenize(text).len()
}

pub fn batch_count(total: usize, batch_size: usize) -> usize {
    total.div_ceil(batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConstraints {
    pub min_len: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub total: usize,
    pub sampling_temperature: f64,
}

impl Default for CaptionConstraints {
    fn default() -> Self {
        Self {
            min_len: 8,
            max_len: 40,
            batch_size: 10,
            total: 50,
            sampling_temperature: 0.9,
        }
    }
}

impl CaptionConstraints {
    pub fn validate(&self) -> Result<()> {
        if self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total > 0 && self.batch_size > self.total {
            return Err(Error::Config(format!(
                "batch_size {} exceeds total {}",
                self.batch_size, self.total
            )));
        }
        if !(self.sampling_temperature > 0.0 && self.sampling_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling_temperature must be positive, got {}",
                self.sampling_temperature
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, caption: &str) -> bool {
        (self.min_len..=self.max_len).contains(&token_len(caption))
    }

    pub fn batches(&self) -> usize {
        batch_count(self.total, self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    /// Batch that produced the caption; unknown for sets read back from disk.
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub class: StageClass,
    pub captions: Vec<Caption>,
    pub provider: String,
    /// True when every caption in the set is distinct.
    pub deduplicated: bool,
}

impl CaptionSet {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.captions.iter().map(|c| c.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// One caption per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.captions {
            out.push_str(&c.text.replace(['\n', '\r'], " "));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, class: StageClass, provider: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let captions: Vec<Caption> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Caption {
                text: l.to_string(),
                batch: None,
            })
            .collect();
        let distinct: BTreeSet<&str> = captions.iter().map(|c| c.text.as_str()).collect();
        Ok(Self {
            class,
            deduplicated: distinct.len() == captions.len(),
            captions,
            provider: provider.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub count: usize,
    pub mean_len: f64,
    pub vocabulary: usize,
}

pub fn caption_stats(set: &CaptionSet) -> CaptionStats {
    let mut vocab = BTreeSet::new();
    let mut tokens = 0usize;
    for text in set.texts() {
        let toks = tokenize(text);
        tokens += toks.len();
        vocab.extend(toks);
    }
    let count = set.len();
    CaptionStats {
        count,
        mean_len: if count == 0 { 0.0 } else { tokens as f64 / count as f64 },
        vocabulary: vocab.len(),
    }
}
