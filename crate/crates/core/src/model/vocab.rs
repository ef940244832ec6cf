use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary. Specials take ids 0..4; corpus tokens follow in
/// lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build<'a, I, S>(sentences: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<str> + 'a + ?Sized,
    {
        let mut set = BTreeSet::new();
        let mut any = false;
        for s in sentences {
            any = true;
            set.extend(s.as_ref().split_whitespace().map(str::to_string));
        }
        if !any || set.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of a whitespace-separated sentence; fails on unknown words.
    pub fn encode(&self, sentence: &str) -> Result<Vec<u32>, ModelError> {
        sentence
            .split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| ModelError::OutOfVocabulary(t.to_string())))
            .collect()
    }
}
