//! Whitespace tokenizer with a corpus-built word list and byte fallback.
//!
//! Vocabulary layout: four specials, the corpus words in sorted order, then
//! 256 byte tokens `<0xNN>`. Unknown words are spelled out in bytes; a space
//! byte separates two consecutive spelled-out words.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{HiveError, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    byte_base: usize,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Tokenizer {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(str::to_string));
        tokens.extend((0..=255u8).map(byte_token));
        Self::from_tokens(tokens).expect("generated vocabulary is well-formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [PAD, BOS, EOS, UNK];
        if tokens.len() < specials.len() + 256 || tokens[..4] != specials {
            return Err(HiveError::Format(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let byte_base = tokens.len() - 256;
        for b in 0..=255u8 {
            if tokens[byte_base + b as usize] != byte_token(b) {
                return Err(HiveError::Format("vocabulary must end with the 256 byte tokens".into()));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(HiveError::Format(format!(
                    "vocabulary line {} is not a single token",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(HiveError::Format(format!("duplicate token {t:?}")));
            }
        }
        Ok(Tokenizer {
            tokens,
            index,
            byte_base,
        })
    }

    /// One token per line; line number (from 0) is the id.
    pub fn to_vocab_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_vocab_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_vocab_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_vocab_text(&std::fs::read_to_string(path)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev_spelled = false;
        for word in text.split_whitespace() {
            match self.index.get(word) {
                Some(&id) if id >= 4 && id < self.byte_base => {
                    out.push(id);
                    prev_spelled = false;
                }
                _ => {
                    if prev_spelled {
                        out.push(self.byte_base + b' ' as usize);
                    }
                    out.extend(word.bytes().map(|b| self.byte_base + b as usize));
                    prev_spelled = true;
                }
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode); specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.extend(String::from_utf8_lossy(bytes).split(' ').map(str::to_string));
                bytes.clear();
            }
        };
        for &id in ids {
            if id >= self.byte_base && id < self.tokens.len() {
                bytes.push((id - self.byte_base) as u8);
            } else {
                flush(&mut bytes, &mut words);
                if (4..self.byte_base).contains(&id) {
                    words.push(self.tokens[id].clone());
                }
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }
}
