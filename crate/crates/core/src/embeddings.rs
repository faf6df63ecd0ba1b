//! Word vectors and character quantization.
//!
//! Pre-trained vectors are read from the GloVe text format (one token followed
//! by its values per line). Tokens are also quantized into one-hot
//! [`CharGrid`]s over a fixed 36-symbol alphabet for the character path.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// `a..z` followed by `0..9`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Alphabet;

impl Alphabet {
    pub const SIZE: usize = 36;

    pub fn symbols() -> impl Iterator<Item = char> {
        ('a'..='z').chain('0'..='9')
    }

    pub fn index(c: char) -> Option<usize> {
        match c {
            'a'..='z' => Some(c as usize - 'a' as usize),
            '0'..='9' => Some(26 + c as usize - '0' as usize),
            _ => None,
        }
    }
}

/// One-hot character encoding of a token, `len × 36`. Positions past the end
/// of the token and characters outside the alphabet are all-zero rows.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CharGrid {
    slots: Vec<Option<u8>>,
}

impl CharGrid {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Alphabet index of each position, `None` for all-zero rows.
    pub fn slots(&self) -> &[Option<u8>] {
        &self.slots
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.slots.len(), Alphabet::SIZE]);
        let d = t.data_mut();
        for (r, s) in self.slots.iter().enumerate() {
            if let Some(c) = s {
                d[r * Alphabet::SIZE + *c as usize] = 1.0;
            }
        }
        t
    }
}

/// Lowercases `token` and one-hot encodes its first `len` characters.
pub fn quantize(token: &str, len: usize) -> CharGrid {
    let mut slots: Vec<Option<u8>> = token
        .chars()
        .flat_map(char::to_lowercase)
        .take(len)
        .map(|c| Alphabet::index(c).map(|i| i as u8))
        .collect();
    slots.resize(len, None);
    CharGrid { slots }
}

/// Whitespace split, then strip leading and trailing punctuation. Tokens that
/// are pure punctuation disappear.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the PAD and UNK entries.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD);
        v.insert(UNK);
        v
    }

    /// Returns the index of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, its lowercase form, or UNK.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token)
            .or_else(|| self.get(&token.to_lowercase()))
            .unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Two-column `token<TAB>index` dump.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    /// SHA-256 over the dump, hex encoded.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_dump(&mut buf).expect("write to vec");
        hex(&Sha256::digest(&buf))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen `vocab × dim` table. Row 0 (PAD) is zero, row 1 (UNK) is the mean
/// of all loaded rows.
#[derive(Clone, Debug)]
pub struct WordEmbeddingTable {
    matrix: Tensor,
}

impl WordEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row_slice(index)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Always true: the table never trains.
    pub fn is_constant(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GloveStats {
    pub loaded: usize,
    /// Lines with more fields than `dim + 1` (multi-word tokens), blank lines,
    /// and repeated tokens. These are skipped.
    pub malformed: usize,
}

/// Reads a GloVe text file. Lines with fewer than `dim` values or with
/// unparseable numbers are errors that name the line. `max_words` (if
/// nonzero) stops after that many vectors.
pub fn load_glove(path: &Path, dim: usize, max_words: usize) -> Result<(Vocabulary, WordEmbeddingTable, GloveStats)> {
    let reader = crate::data::open_maybe_gz(path)?;
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<f64> = vec![0.0; 2 * dim];
    let mut stats = GloveStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = lineno + 1;
        if max_words > 0 && stats.loaded == max_words {
            break;
        }
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            stats.malformed += 1;
            continue;
        }
        if fields.len() < dim + 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {dim} values, found {}", fields.len() - 1),
            ));
        }
        if fields.len() > dim + 1 || vocab.get(fields[0]).is_some() {
            stats.malformed += 1;
            continue;
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad value {f:?}")))?;
            rows.push(v);
        }
        vocab.insert(fields[0]);
        stats.loaded += 1;
    }
    if stats.loaded > 0 {
        let n = stats.loaded as f64;
        for j in 0..dim {
            let s: f64 = (0..stats.loaded).map(|r| rows[(r + 2) * dim + j]).sum();
            rows[dim + j] = s / n;
        }
    }
    let matrix = Tensor::matrix(vocab.len(), dim, rows)?;
    Ok((vocab, WordEmbeddingTable { matrix }, stats))
}

/// Source of per-token word vectors.
#[derive(Clone, Debug)]
pub enum WordVectors {
    Table { vocab: Vocabulary, table: WordEmbeddingTable },
    /// Deterministic pseudo-random vectors derived from a hash of the token,
    /// uniform in ±0.5. Used when no pre-trained file is configured.
    Hashed { dim: usize, seed: u64 },
}

impl WordVectors {
    pub fn dim(&self) -> usize {
        match self {
            WordVectors::Table { table, .. } => table.dim(),
            WordVectors::Hashed { dim, .. } => *dim,
        }
    }

    pub fn vector_into(&self, token: &str, out: &mut Vec<f64>) {
        match self {
            WordVectors::Table { vocab, table } => out.extend_from_slice(table.row(vocab.lookup(token))),
            WordVectors::Hashed { dim, seed } => {
                let h = Sha256::digest(token.to_lowercase().as_bytes());
                let mut k = [0u8; 8];
                k.copy_from_slice(&h[..8]);
                let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(k) ^ seed);
                out.extend((0..*dim).map(|_| rng.gen_range(-0.5..0.5)));
            }
        }
    }

    /// `T × dim` matrix of the tokens' vectors.
    pub fn matrix(&self, tokens: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(tokens.len() * self.dim());
        for t in tokens {
            self.vector_into(t, &mut data);
        }
        Tensor::matrix(tokens.len(), self.dim(), data)
    }

    /// Hash identifying the vocabulary, recorded in checkpoints.
    pub fn vocab_hash(&self) -> String {
        match self {
            WordVectors::Table { vocab, .. } => vocab.hash(),
            WordVectors::Hashed { dim, seed } => format!("hashed:{dim}:{seed}"),
        }
    }
}
