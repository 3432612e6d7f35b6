//! Pre-trained word vectors in the plain text format: one word per line
//! followed by its floats, with an optional `count dim` header line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::combinator::UNK;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("embedding dimension {found} does not match configured {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    dim: usize,
    /// Excluded from optimizer updates once loaded into a model.
    pub frozen: bool,
}

impl EmbeddingTable {
    /// Builds a table; an all-zero [`UNK`] entry is appended when absent.
    pub fn new(
        entries: Vec<(String, Vec<f64>)>,
        dim: usize,
        frozen: bool,
    ) -> Result<Self, EmbeddingError> {
        let mut t = EmbeddingTable {
            words: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            dim,
            frozen,
        };
        for (i, (w, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::Format {
                    line: i + 1,
                    message: format!("{} values, expected {dim}", v.len()),
                });
            }
            if t.index.contains_key(&w) {
                continue;
            }
            t.index.insert(w.clone(), t.words.len());
            t.words.push(w);
            t.data.extend(v);
        }
        if !t.index.contains_key(UNK) {
            t.index.insert(UNK.to_string(), t.words.len());
            t.words.push(UNK.to_string());
            t.data.extend(std::iter::repeat_n(0.0, dim));
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entries including [`UNK`].
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// The vector of `word`, or the [`UNK`] vector.
    pub fn get(&self, word: &str) -> &[f64] {
        let i = self.index.get(word).or_else(|| self.index.get(UNK)).copied().unwrap_or(0);
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), &self.data[i * self.dim..(i + 1) * self.dim]))
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), EmbeddingError> {
        if self.dim != expected {
            return Err(EmbeddingError::Dimension {
                expected,
                found: self.dim,
            });
        }
        Ok(())
    }
}

/// Reads a vector file. When `keep` is given, only those words are loaded.
pub fn load_embeddings(
    path: &Path,
    keep: Option<&dyn Fn(&str) -> bool>,
) -> Result<EmbeddingTable, EmbeddingError> {
    let io = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut entries = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if i == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() {
            if let Ok(d) = rest[0].parse::<usize>() {
                dim = Some(d);
                continue;
            }
        }
        let d = *dim.get_or_insert(rest.len());
        if rest.len() != d {
            return Err(EmbeddingError::Format {
                line: i + 1,
                message: format!("{} values, expected {d}", rest.len()),
            });
        }
        if keep.is_some_and(|k| !k(word)) {
            continue;
        }
        let v = rest
            .iter()
            .map(|x| x.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EmbeddingError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.push((word.to_string(), v));
    }
    let dim = dim.ok_or(EmbeddingError::Format {
        line: 0,
        message: "no vectors".into(),
    })?;
    EmbeddingTable::new(entries, dim, true)
}
