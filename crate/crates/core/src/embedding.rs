//! Monolingual embedding lookup tables.
//!
//! Pretrained word and subword tables are read from the two common text
//! formats and stay frozen for the lifetime of a model. Character tables
//! (and the random-embedding baseline) are initialized here and trained.
//!
//! Both text formats hold one entry per line, a token followed by its
//! components separated by spaces:
//!
//! * `vec_with_header`: the first line holds `count dim` (FastText `.vec`);
//! * `glove_no_header`: no header, the dimension is taken from the first row.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use hme_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmeError, Result};
use crate::tokenize::{Subword, END_OF_WORD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Subword,
    Char,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextFormat {
    VecWithHeader,
    GloveNoHeader,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    ZeroVector,
    TrainableUnk,
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ROW: usize = 0;
pub const UNK_ROW: usize = 1;

const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    language: String,
    level: Level,
    dim: usize,
    tokens: Vec<String>,
    vocab: HashMap<String, usize>,
    vectors: Vec<f64>,
    trainable: bool,
    oov_policy: OovPolicy,
}

impl EmbeddingTable {
    /// A frozen table with `zero_vector` OOV handling.
    pub fn frozen(language: &str, level: Level, dim: usize, tokens: Vec<String>, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(HmeError::Invalid("embedding dim must be positive".into()));
        }
        if vectors.len() != tokens.len() * dim {
            return Err(HmeError::Invalid(format!(
                "{} tokens need {} values, got {}",
                tokens.len(),
                tokens.len() * dim,
                vectors.len()
            )));
        }
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if vocab.insert(t.clone(), i).is_some() {
                return Err(HmeError::Invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(EmbeddingTable {
            language: language.to_string(),
            level,
            dim,
            tokens,
            vocab,
            vectors,
            trainable: false,
            oov_policy: OovPolicy::ZeroVector,
        })
    }

    /// A trainable table with rows ~ Uniform(−0.1, 0.1) drawn from `seed`.
    ///
    /// Row 0 is a padding row fixed at zero and row 1 the shared unknown
    /// row; `symbols` follow in sorted order.
    pub fn random_trainable(
        language: &str,
        level: Level,
        symbols: &BTreeSet<String>,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if symbols.is_empty() {
            return Err(HmeError::Invalid("cannot build a table over an empty alphabet".into()));
        }
        if dim == 0 {
            return Err(HmeError::Invalid("embedding dim must be positive".into()));
        }
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(symbols.iter().filter(|s| *s != PAD && *s != UNK).cloned());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = vec![0.0; dim];
        vectors.extend((dim..tokens.len() * dim).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)));
        let mut table = Self::frozen(language, level, dim, tokens, vectors)?;
        table.trainable = true;
        table.oov_policy = OovPolicy::TrainableUnk;
        Ok(table)
    }

    pub fn with_language(mut self, language: &str, level: Level) -> Self {
        self.language = language.to_string();
        self.level = level;
        self
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov_policy
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    /// The table as an `len × dim` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.vectors.clone())
    }

    /// Row index for `token`: exact match, then lowercase, then the unknown
    /// row if the policy has one.
    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocab
            .get(token)
            .or_else(|| {
                let lower = token.to_lowercase();
                if lower != token {
                    self.vocab.get(&lower)
                } else {
                    None
                }
            })
            .copied()
            .or(match self.oov_policy {
                OovPolicy::TrainableUnk => Some(UNK_ROW),
                OovPolicy::ZeroVector => None,
            })
    }

    /// Row index for a BPE piece: a word-final piece is tried with the
    /// end-of-word marker first.
    pub fn subword_index(&self, piece: &Subword) -> Option<usize> {
        if piece.end_of_word {
            let marked = format!("{}{}", piece.text, END_OF_WORD);
            if let Some(&i) = self.vocab.get(&marked) {
                return Some(i);
            }
        }
        self.index_of(&piece.text)
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        match self.index_of(token) {
            Some(i) => self.row(i).to_vec(),
            None => vec![0.0; self.dim],
        }
    }

    /// Stacks the given rows into an `n × dim` tensor; `None` rows are zero.
    pub fn gather(&self, rows: &[Option<usize>]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for r in rows {
            match r {
                Some(i) => data.extend_from_slice(self.row(*i)),
                None => data.extend(std::iter::repeat_n(0.0, self.dim)),
            }
        }
        Tensor::matrix(rows.len(), self.dim, data)
    }

    pub fn set_vectors(&mut self, vectors: Vec<f64>) -> Result<()> {
        if vectors.len() != self.vectors.len() {
            return Err(HmeError::Invalid(format!(
                "table {} expects {} values, got {}",
                self.language,
                self.vectors.len(),
                vectors.len()
            )));
        }
        self.vectors = vectors;
        Ok(())
    }

    /// Parses a text table. Duplicate tokens keep their first row.
    pub fn read_text<R: BufRead>(
        reader: R,
        source_name: &str,
        format: TextFormat,
        limit: Option<usize>,
        expected_dim: Option<usize>,
    ) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let mut dim = None;
        let io_err = |e: std::io::Error| HmeError::io(source_name, e);
        if format == TextFormat::VecWithHeader {
            let Some((_, header)) = lines.next() else {
                return Err(HmeError::format(source_name, 1, "empty file"));
            };
            let header = header.map_err(io_err)?;
            let fields: Vec<&str> = header.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [count, d] => count.parse::<usize>().ok().and(d.parse::<usize>().ok()),
                _ => None,
            };
            match parsed {
                Some(d) if d > 0 => dim = Some(d),
                _ => {
                    return Err(HmeError::format(
                        source_name,
                        1,
                        format!("bad header {header:?}, expected \"count dim\""),
                    ))
                }
            }
        }
        if let (Some(d), Some(e)) = (dim, expected_dim) {
            if d != e {
                return Err(HmeError::format(
                    source_name,
                    1,
                    format!("header dim {d} but manifest expects {e}"),
                ));
            }
        }
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        let mut vectors = Vec::new();
        for (i, line) in lines {
            if limit.is_some_and(|l| tokens.len() >= l) {
                break;
            }
            let line = line.map_err(io_err)?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let token = fields.next().unwrap();
            let start = vectors.len();
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| HmeError::format(source_name, line_no, format!("bad number {f:?}")))?;
                if !v.is_finite() {
                    return Err(HmeError::format(
                        source_name,
                        line_no,
                        format!("non-finite value {f:?}"),
                    ));
                }
                vectors.push(v);
            }
            let got = vectors.len() - start;
            let want = *dim.get_or_insert(got);
            if got == 0 || got != want {
                let what = if format == TextFormat::VecWithHeader {
                    "header"
                } else {
                    "first row"
                };
                return Err(HmeError::format(
                    source_name,
                    line_no,
                    format!("row has {got} values but {what} says {want}"),
                ));
            }
            if let Some(e) = expected_dim {
                if got != e {
                    return Err(HmeError::format(
                        source_name,
                        line_no,
                        format!("row has {got} values but manifest expects {e}"),
                    ));
                }
            }
            if seen.contains_key(token) {
                vectors.truncate(start);
                continue;
            }
            seen.insert(token.to_string(), tokens.len());
            tokens.push(token.to_string());
        }
        if tokens.is_empty() {
            return Err(HmeError::format(source_name, 1, "no embeddings in file"));
        }
        Self::frozen("", Level::Word, dim.unwrap(), tokens, vectors)
    }

    /// Writes the table in `format`. Values use Rust's shortest round-trip
    /// representation, so reading the file back reproduces every bit.
    pub fn write_text<W: Write>(&self, mut out: W, format: TextFormat) -> std::io::Result<()> {
        if format == TextFormat::VecWithHeader {
            writeln!(out, "{} {}", self.len(), self.dim)?;
        }
        for (i, t) in self.tokens.iter().enumerate() {
            write!(out, "{t}")?;
            for v in self.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Reads an embedding file from disk.
pub fn load_text_embeddings(
    path: &Path,
    format: TextFormat,
    limit: Option<usize>,
    expected_dim: Option<usize>,
) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| HmeError::io(path, e))?;
    EmbeddingTable::read_text(
        BufReader::new(file),
        &path.display().to_string(),
        format,
        limit,
        expected_dim,
    )
}

/// The trainable character table: padding row, unknown row, then one row
/// per symbol of `alphabet`.
pub fn init_char_table(alphabet: &BTreeSet<String>, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    EmbeddingTable::random_trainable("char", Level::Char, alphabet, dim, seed)
}
