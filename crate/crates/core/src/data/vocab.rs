use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;

/// How raw utterance text is split into vocabulary lookups.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    /// One token per non-whitespace character.
    Character,
}

/// Fixed vocabulary; the line number in the vocabulary file is the token id.
/// Lines 0 and 1 must hold the pad and out-of-vocabulary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    tokenizer: Tokenizer,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[OOV_ID] != OOV_TOKEN {
            return Err(Error::data(None, format!("vocabulary must start with `{PAD_TOKEN}` and `{OOV_TOKEN}`")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::data(Some(i + 1), format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(Some(i + 1), format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index, tokenizer: Tokenizer::Whitespace })
    }

    /// Pad, OOV, then `words` in order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::new(tokens)
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        match self.tokenizer {
            Tokenizer::Whitespace => text.split_whitespace().map(|w| self.id(w)).collect(),
            Tokenizer::Character => {
                text.chars().filter(|c| !c.is_whitespace()).map(|c| self.id(c.encode_utf8(&mut [0; 4]))).collect()
            }
        }
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let sep = if self.tokenizer == Tokenizer::Character { "" } else { " " };
        ids.iter().map(|&i| self.token(i).unwrap_or(OOV_TOKEN)).collect::<Vec<_>>().join(sep)
    }
}

/// Reads a label file (one label per line).
pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}
