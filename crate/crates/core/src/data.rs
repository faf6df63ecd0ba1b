//! SICK-format sentence pair ingestion and seeded minibatching.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::tokenize;
use crate::error::{Error, Result};

/// Opens a text file, decompressing transparently when it starts with the
/// gzip magic bytes.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntailmentLabel {
    Entailment,
    Contradiction,
    Neutral,
}

impl EntailmentLabel {
    pub const ALL: [EntailmentLabel; 3] = [
        EntailmentLabel::Entailment,
        EntailmentLabel::Contradiction,
        EntailmentLabel::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EntailmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntailmentLabel::Entailment => "ENTAILMENT",
            EntailmentLabel::Contradiction => "CONTRADICTION",
            EntailmentLabel::Neutral => "NEUTRAL",
        })
    }
}

impl FromStr for EntailmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ENTAILMENT" => Ok(EntailmentLabel::Entailment),
            "CONTRADICTION" => Ok(EntailmentLabel::Contradiction),
            "NEUTRAL" => Ok(EntailmentLabel::Neutral),
            _ => Err(Error::invalid(format!("unknown entailment label {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Trial,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Trial => "TRIAL",
            Split::Test => "TEST",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "trial" | "dev" => Ok(Split::Trial),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub id: String,
    pub sentence_a: String,
    pub sentence_b: String,
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
    pub score: f64,
    pub label: EntailmentLabel,
    pub split: Split,
}

impl PairExample {
    /// Validates and tokenizes a record.
    pub fn new(
        id: impl Into<String>,
        sentence_a: impl Into<String>,
        sentence_b: impl Into<String>,
        score: f64,
        label: EntailmentLabel,
        split: Split,
    ) -> Result<Self> {
        let (sentence_a, sentence_b) = (sentence_a.into(), sentence_b.into());
        if !(1.0..=5.0).contains(&score) {
            return Err(Error::invalid(format!("relatedness score {score} outside [1, 5]")));
        }
        let tokens_a = tokenize(&sentence_a);
        let tokens_b = tokenize(&sentence_b);
        if tokens_a.is_empty() || tokens_b.is_empty() {
            return Err(Error::invalid("empty sentence"));
        }
        Ok(PairExample {
            id: id.into(),
            sentence_a,
            sentence_b,
            tokens_a,
            tokens_b,
            score,
            label,
            split,
        })
    }
}

const REQUIRED: [&str; 5] = [
    "pair_ID",
    "sentence_A",
    "sentence_B",
    "relatedness_score",
    "entailment_judgment",
];

/// Parses a SICK TSV. Rows without a `SemEval_set` column get `default_split`.
pub fn load_sick_with_split(path: &Path, default_split: Split) -> Result<Vec<PairExample>> {
    let mut lines = open_maybe_gz(path)?.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "empty file")),
    };
    let cols: HashMap<String, usize> = header
        .trim_end_matches(['\r', '\n'])
        .split('\t')
        .enumerate()
        .map(|(i, c)| (c.trim().to_ascii_lowercase(), i))
        .collect();
    let col = |name: &str| cols.get(&name.to_ascii_lowercase()).copied();
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::parse(path, 1, format!("missing column {name}")))?;
    }
    let split_col = col("SemEval_set");
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |c: usize| {
            fields
                .get(c)
                .copied()
                .ok_or_else(|| Error::parse(path, lineno, format!("row has {} fields", fields.len())))
        };
        let score: f64 = get(idx[3])?
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad relatedness score {:?}", fields[idx[3]])))?;
        let label: EntailmentLabel = get(idx[4])?
            .parse()
            .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        let split = match split_col {
            Some(c) => get(c)?
                .parse()
                .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?,
            None => default_split,
        };
        let ex = PairExample::new(get(idx[0])?.trim(), get(idx[1])?, get(idx[2])?, score, label, split)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_sick(path: &Path) -> Result<Vec<PairExample>> {
    load_sick_with_split(path, Split::Train)
}

/// Examples per split.
pub fn split_counts(examples: &[PairExample]) -> [(Split, usize); 3] {
    let c = |s| examples.iter().filter(|e| e.split == s).count();
    [(Split::Train, c(Split::Train)), (Split::Trial, c(Split::Trial)), (Split::Test, c(Split::Test))]
}

/// Loads every example under `dir`: either a single `SICK.txt` with a
/// `SemEval_set` column, or separate `SICK_train.txt`, `SICK_trial.txt` and
/// `SICK_test_annotated.txt` files (each optionally `.gz`). A path to a file
/// is loaded directly.
pub fn load_sick_dir(dir: &Path) -> Result<Vec<PairExample>> {
    if dir.is_file() {
        return load_sick(dir);
    }
    let find = |stem: &str| -> Option<PathBuf> {
        [format!("{stem}.txt"), format!("{stem}.txt.gz"), format!("{stem}.tsv"), format!("{stem}.tsv.gz")]
            .into_iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
    };
    if let Some(p) = find("SICK") {
        return load_sick(&p);
    }
    let mut out = Vec::new();
    let mut any = false;
    for (stem, split) in [
        ("SICK_train", Split::Train),
        ("SICK_trial", Split::Trial),
        ("SICK_test_annotated", Split::Test),
        ("SICK_test", Split::Test),
    ] {
        if split == Split::Test && out.iter().any(|e: &PairExample| e.split == Split::Test) {
            continue;
        }
        if let Some(p) = find(stem) {
            out.extend(load_sick_with_split(&p, split)?);
            any = true;
        }
    }
    if !any {
        return Err(Error::invalid(format!("no SICK files found in {}", dir.display())));
    }
    Ok(out)
}

/// Writes examples with the five required columns plus `SemEval_set`.
pub fn write_sick<W: Write>(mut w: W, examples: &[PairExample]) -> std::io::Result<()> {
    writeln!(w, "{}\tSemEval_set", REQUIRED.join("\t"))?;
    for e in examples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.id, e.sentence_a, e.sentence_b, e.score, e.label, e.split
        )?;
    }
    Ok(())
}

/// Seeded permutation of `0..n` for the given epoch, cut into batches. The
/// last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
