//! Flat key-value configuration, stored as TOML and snapshotted into
//! checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bilstm::{EncoderConfig, UpperInput};
use crate::char_cnn::CharCnnConfig;
use crate::error::{Error, Result};
use crate::match_cnn::{Topology, TopologyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Relatedness,
    Entailment,
    /// Both heads on one shared encoder; the loss is the sum of both.
    Joint,
}

impl Task {
    pub fn scores(self) -> bool {
        matches!(self, Task::Relatedness | Task::Joint)
    }

    pub fn labels(self) -> bool {
        matches!(self, Task::Entailment | Task::Joint)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Relatedness => "relatedness",
            Task::Entailment => "entailment",
            Task::Joint => "joint",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relatedness" => Ok(Task::Relatedness),
            "entailment" => Ok(Task::Entailment),
            "joint" => Ok(Task::Joint),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Which parameters to keep after training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Parameters after the final epoch.
    #[default]
    Last,
    /// Parameters from the epoch with the best trial-split metric.
    BestDev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // word vectors
    /// GloVe text file; hashed pseudo-random vectors when unset.
    pub glove: Option<String>,
    /// Stop reading the GloVe file after this many vectors (0 = all).
    pub glove_max_words: usize,
    pub word_dim: usize,

    // character path
    pub token_len: usize,
    pub char_frames: usize,
    pub char_kernel: usize,
    pub char_stages: usize,
    pub highway_units: usize,

    // encoder
    pub memory_dim: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub upper_input: UpperInput,

    // matching CNN
    pub topology: Topology,
    pub stage1_frames: usize,
    pub stage2_frames: usize,
    pub per_plane_stage1: bool,

    // training
    pub task: Task,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Added to the root of the accumulator. Small values make the first
    /// update move every coordinate by the full learning rate, which
    /// saturates this network at rate 0.05.
    pub adagrad_eps: f64,
    pub max_len: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub select: Selection,
    /// Worker threads for per-example gradients; 0 uses all cores.
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            glove: None,
            glove_max_words: 0,
            word_dim: 300,
            token_len: 16,
            char_frames: 100,
            char_kernel: 3,
            char_stages: 1,
            highway_units: 50,
            memory_dim: 100,
            layers: 2,
            bidirectional: true,
            upper_input: UpperInput::BothDirections,
            topology: Topology::I,
            stage1_frames: 150,
            stage2_frames: 150,
            per_plane_stage1: false,
            task: Task::Relatedness,
            learning_rate: 0.05,
            batch_size: 25,
            l2: 1e-4,
            epochs: 10,
            seed: 1,
            adagrad_eps: 0.1,
            max_len: 37,
            grad_clip: 0.0,
            select: Selection::Last,
            threads: 0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("token_len", self.token_len),
            ("char_frames", self.char_frames),
            ("char_kernel", self.char_kernel),
            ("char_stages", self.char_stages),
            ("highway_units", self.highway_units),
            ("memory_dim", self.memory_dim),
            ("layers", self.layers),
            ("stage1_frames", self.stage1_frames),
            ("stage2_frames", self.stage2_frames),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.adagrad_eps > 0.0) {
            return Err(Error::Config("learning_rate and adagrad_eps must be positive".into()));
        }
        if !(self.l2 >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("l2 and grad_clip must be non-negative".into()));
        }
        if self.layers < 2 {
            return Err(Error::Config(
                "layers must be at least 2: the matching CNN needs two rows per sentence".into(),
            ));
        }
        Ok(())
    }

    pub fn char_cnn(&self) -> CharCnnConfig {
        CharCnnConfig {
            token_len: self.token_len,
            frames: self.char_frames,
            kernel: self.char_kernel,
            stages: self.char_stages,
            highway_units: self.highway_units,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            word_dim: self.word_dim,
            char_dim: self.char_frames,
            memory_dim: self.memory_dim,
            layers: self.layers,
            bidirectional: self.bidirectional,
            upper_input: self.upper_input,
        }
    }

    pub fn match_cnn(&self) -> TopologyConfig {
        TopologyConfig {
            topology: self.topology,
            stage1_frames: self.stage1_frames,
            stage2_frames: self.stage2_frames,
            per_plane_stage1: self.per_plane_stage1,
        }
    }

    /// A small model for finite-difference checks and quick tests.
    pub fn tiny() -> Self {
        Config {
            word_dim: 5,
            token_len: 6,
            char_frames: 4,
            highway_units: 3,
            memory_dim: 3,
            stage1_frames: 6,
            stage2_frames: 4,
            ..Config::default()
        }
    }
}
