use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::captions::tokenize;

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token → row index of the embedding table. Index 0 is the unknown token.
/// Frozen once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNKNOWN: usize = 0;

    /// Sorted distinct tokens of the given texts, after the unknown token.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens = std::iter::once(UNKNOWN_TOKEN.to_string())
            .chain(distinct.into_iter().filter(|t| t != UNKNOWN_TOKEN))
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNKNOWN)
    }

    /// Token ids of a caption; a caption with no tokens encodes as a lone unknown token.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![Self::UNKNOWN]
        } else {
            ids
        }
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
