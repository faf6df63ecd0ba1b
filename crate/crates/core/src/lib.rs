//! Sentence-pair relatedness and entailment modeling.
//!
//! Tokens are embedded twice: fixed pre-trained word vectors feed the forward
//! direction of a stacked BiLSTM, and character-CNN vectors feed the backward
//! direction. Each sentence becomes a `layers × 2d` matrix of terminal
//! states; two such matrices are compared through three matching planes and
//! a temporal CNN, and task heads score the result.
//!
//! Everything runs on a small reverse-mode autodiff in [`autodiff`], in
//! 64-bit floats.

pub mod autodiff;
pub mod bilstm;
pub mod char_cnn;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod match_cnn;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::{load_model, save_model};
pub use config::{Config, Selection, Task};
pub use data::{load_sick, load_sick_dir, EntailmentLabel, PairExample, Split};
pub use embeddings::{quantize, tokenize, CharGrid, Vocabulary, WordVectors};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use match_cnn::Topology;
pub use metrics::MetricsReport;
pub use model::{Model, Network, PreparedPair, Prediction, Target};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
pub use trainer::{evaluate, train, Evaluation, TrainOptions, TrainSummary};
