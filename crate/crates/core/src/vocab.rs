//! Closed vocabulary with dense token ids.
//!
//! On disk a vocabulary is a newline-delimited token file; the token id is the
//! 0-based line number.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved separator between conversation segments.
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("vocabulary must not be empty".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { tokens, ids })
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

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sep_id(&self) -> Result<u32> {
        self.id(SEP_TOKEN)
            .ok_or_else(|| Error::InvalidConfig(format!("vocabulary has no {SEP_TOKEN} token")))
    }

    /// Whitespace tokenization; returns the ids and the number of dropped
    /// out-of-vocabulary tokens.
    pub fn tokenize(&self, text: &str) -> (Vec<u32>, usize) {
        let mut oov = 0;
        let ids = text
            .split_whitespace()
            .filter_map(|w| {
                let id = self.id(w);
                if id.is_none() {
                    oov += 1;
                }
                id
            })
            .collect();
        (ids, oov)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            tokens.push(line?);
        }
        Self::new(tokens)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}
