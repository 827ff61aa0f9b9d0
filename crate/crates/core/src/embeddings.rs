//! Word-vector tables in the whitespace-separated text format
//! (`token v1 v2 ... vd`, one token per line, no header).
//!
//! Vectors are stored unnormalized, row-major. Normalization only happens
//! inside [`cosine`].

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ordered list of unique tokens with a reverse index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from an iterator, failing on duplicates or empty tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for (line, tok) in tokens.into_iter().enumerate() {
            vocab.push(tok.into(), line + 1)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String, line: usize) -> Result<usize> {
        if token.is_empty() {
            return Err(Error::MalformedLine { line });
        }
        if self.index.contains_key(&token) {
            return Err(Error::DuplicateToken { line, token });
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, collecting every missing token into one error.
    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        let mut missing = Vec::new();
        let mut ids = Vec::with_capacity(tokens.len());
        for t in tokens {
            match self.id(t.as_ref()) {
                Some(id) => ids.push(id),
                None => missing.push(t.as_ref().to_string()),
            }
        }
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(Error::OutOfVocabulary(missing))
        }
    }
}

/// Token → dense vector map. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows.
    pub fn from_rows<I, S>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::new();
        let mut data = Vec::new();
        let mut dim = 0;
        for (i, (tok, v)) in rows.into_iter().enumerate() {
            let line = i + 1;
            if i == 0 {
                if v.is_empty() {
                    return Err(Error::MalformedLine { line });
                }
                dim = v.len();
            } else if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    line,
                    expected: dim,
                    found: v.len(),
                });
            }
            if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue {
                    line,
                    value: x.to_string(),
                });
            }
            vocab.push(tok.into(), line)?;
            data.extend_from_slice(&v);
        }
        if vocab.is_empty() {
            return Err(Error::EmptyFile);
        }
        Ok(Self { vocab, dim, data })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Row `id` of the table.
    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    /// The stored vector for `token`.
    pub fn embed(&self, token: &str) -> Result<&[f64]> {
        self.vocab
            .id(token)
            .map(|id| self.row(id))
            .ok_or_else(|| Error::OutOfVocabulary(vec![token.to_string()]))
    }

    /// The table as a `|V| × dim` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }

    /// Keeps only the listed tokens, in the given order.
    pub fn subset<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Self> {
        let ids = self.vocab.ids(tokens)?;
        Self::from_rows(
            ids.into_iter()
                .map(|id| (self.vocab.token(id).to_string(), self.row(id).to_vec())),
        )
    }

    /// Writes the table in the same text format [`parse_embeddings`] reads.
    ///
    /// Values use Rust's shortest round-trip formatting, so a write/parse cycle
    /// is bit-exact.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, tok) in self.vocab.tokens().iter().enumerate() {
            write!(out, "{tok}")?;
            for x in self.row(id) {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Parses a whitespace-separated embedding file. Blank lines are skipped.
pub fn parse_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut vocab = Vocabulary::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let start = data.len();
        for field in fields {
            let x: f64 = field.parse().map_err(|_| Error::NonFiniteValue {
                line: line_no,
                value: field.to_string(),
            })?;
            if !x.is_finite() {
                return Err(Error::NonFiniteValue {
                    line: line_no,
                    value: field.to_string(),
                });
            }
            data.push(x);
        }
        let found = data.len() - start;
        match dim {
            None if found == 0 => return Err(Error::MalformedLine { line: line_no }),
            None => dim = Some(found),
            Some(d) if d != found => {
                return Err(Error::DimensionMismatch {
                    line: line_no,
                    expected: d,
                    found,
                })
            }
            Some(_) => {}
        }
        vocab.push(token.to_string(), line_no)?;
    }
    let dim = dim.ok_or(Error::EmptyFile)?;
    Ok(EmbeddingTable { vocab, dim, data })
}

/// Parses an embedding file from a string.
pub fn parse_embeddings_str(text: &str) -> Result<EmbeddingTable> {
    parse_embeddings(text.as_bytes())
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
