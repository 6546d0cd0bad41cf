//! Plain-text embedding lexicon: one `token v1 ... ve` entry per line.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Real;

/// Ordered token → vector table. Entry order doubles as token id order when
/// the lexicon seeds an encoder's embedding table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<Vec<Real>>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn insert(&mut self, word: &str, vector: Vec<Real>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Contract(format!(
                "lexicon vector for {word:?} has {} values, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(word) {
            return Err(Error::Contract(format!("duplicate lexicon entry {word:?}")));
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[Real]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vectors(&self) -> &[Vec<Real>] {
        &self.vectors
    }

    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let mut lex = Self::new(dim);
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let vector = fields
                .map(|f| {
                    f.parse::<Real>().map_err(|e| Error::Parse {
                        line: line_no,
                        message: format!("bad value {f:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("{word:?} has {} values, expected {dim}", vector.len()),
                });
            }
            lex.insert(word, vector).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        Ok(lex)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, v) in self.words.iter().zip(&self.vectors) {
            out.push_str(w);
            for x in v {
                write!(out, " {x}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a lexicon whose vectors must all have `dim` values.
pub fn load_embedding_lexicon(path: impl AsRef<Path>, dim: usize) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Lexicon::parse(&text, dim)
}
