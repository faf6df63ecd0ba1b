//! The full sentence-pair network: word and char embeddings into the
//! asymmetric BiLSTM, matching planes, match CNN, and task heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::bilstm::Encoder;
use crate::char_cnn::CharCnn;
use crate::config::Config;
use crate::data::{EntailmentLabel, PairExample};
use crate::embeddings::{load_glove, quantize, tokenize, CharGrid, WordVectors};
use crate::error::{Error, Result};
use crate::match_cnn::MatchCnn;
use crate::matching::{FeatureTensor, Matching};
use crate::objectives::{
    entailment_loss, kl_to_target, nll, predict_label, predict_score, relatedness_loss, sparse_target, ClassHead,
    OrdinalHead, ENTAILMENT_CLASSES, SCORE_CLASSES,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Seed for the hashed fallback word vectors. Fixed so that, like a
/// pre-trained table, they do not change with the model seed.
pub const HASHED_VECTOR_SEED: u64 = 0x5e_ed0f_3017;

/// Word vectors named by the config: the GloVe file if set, hashed vectors
/// otherwise.
pub fn load_word_vectors(config: &Config) -> Result<WordVectors> {
    match &config.glove {
        Some(path) if !path.is_empty() => {
            let (vocab, table, _) = load_glove(path.as_ref(), config.word_dim, config.glove_max_words)?;
            Ok(WordVectors::Table { vocab, table })
        }
        _ => Ok(WordVectors::Hashed {
            dim: config.word_dim,
            seed: HASHED_VECTOR_SEED,
        }),
    }
}

/// Model-ready inputs for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSentence {
    /// `T × word_dim`, constant.
    pub words: Tensor,
    pub grids: Vec<CharGrid>,
    /// Tokens dropped by the length cap.
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub a: PreparedSentence,
    pub b: PreparedSentence,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub score: f64,
    pub label: EntailmentLabel,
}

impl From<&PairExample> for Target {
    fn from(e: &PairExample) -> Self {
        Target {
            score: e.score,
            label: e.label,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    pub m1: Var,
    pub m2: Var,
    pub features: FeatureTensor,
    pub x_h: Var,
    pub score_logits: Option<Var>,
    pub class_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub score: Option<f64>,
    pub label: Option<EntailmentLabel>,
}

/// Architecture: parameter handles plus the forward computation. Parameter
/// values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: Config,
    pub char_cnn: CharCnn,
    pub encoder: Encoder,
    pub matching: Matching,
    pub match_cnn: MatchCnn,
    pub score_head: Option<OrdinalHead>,
    pub class_head: Option<ClassHead>,
    pub x_h_dim: usize,
}

impl Network {
    /// Creates the architecture and its initial parameters from `config.seed`.
    pub fn build(config: &Config) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let char_cnn = CharCnn::new(&mut store, &mut rng, &config.char_cnn())?;
        let encoder = Encoder::new(&mut store, &mut rng, &config.encoder())?;
        let width = encoder.output_width();
        let matching = Matching::new(&mut store, &mut rng, width)?;
        let match_cnn = MatchCnn::new(&mut store, &mut rng, &config.match_cnn(), width)?;
        let x_h_dim = match_cnn
            .output_dim(config.layers)
            .map_err(|e| Error::Config(e.to_string()))?;
        let score_head = config
            .task
            .scores()
            .then(|| OrdinalHead::new(&mut store, &mut rng, x_h_dim, SCORE_CLASSES))
            .transpose()?;
        let class_head = config
            .task
            .labels()
            .then(|| ClassHead::new(&mut store, &mut rng, x_h_dim, ENTAILMENT_CLASSES))
            .transpose()?;
        let net = Network {
            config: config.clone(),
            char_cnn,
            encoder,
            matching,
            match_cnn,
            score_head,
            class_head,
            x_h_dim,
        };
        Ok((net, store))
    }

    /// Trainable parameters, i.e. the L2 set.
    pub fn trainable(store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// `layers × (2 · memory_dim)` sentence matrix.
    pub fn sentence_matrix(&self, g: &mut Graph, store: &ParamStore, s: &PreparedSentence) -> Result<Var> {
        let words = g.constant(s.words.clone());
        let chars = self.char_cnn.embed_grids(g, store, &s.grids)?;
        self.encoder.encode(g, store, words, chars)
    }

    pub fn forward_pair(&self, g: &mut Graph, store: &ParamStore, pair: &PreparedPair) -> Result<PairOutput> {
        let m1 = self.sentence_matrix(g, store, &pair.a)?;
        let m2 = self.sentence_matrix(g, store, &pair.b)?;
        let features = self.matching.assemble(g, store, m1, m2)?;
        let x_h = self.match_cnn.match_features(g, store, &features)?;
        let score_logits = self.score_head.map(|h| h.logits(g, store, x_h)).transpose()?;
        let class_logits = self.class_head.map(|h| h.logits(g, store, x_h)).transpose()?;
        Ok(PairOutput {
            m1,
            m2,
            features,
            x_h,
            score_logits,
            class_logits,
        })
    }

    /// Unregularized loss of one pair: KL, NLL, or their sum.
    pub fn pair_loss(&self, g: &mut Graph, store: &ParamStore, pair: &PreparedPair, target: &Target) -> Result<Var> {
        let out = self.forward_pair(g, store, pair)?;
        let mut loss = None;
        if let Some(z) = out.score_logits {
            let p = sparse_target(target.score, SCORE_CLASSES)?;
            loss = Some(kl_to_target(g, z, &p)?);
        }
        if let Some(z) = out.class_logits {
            let l = nll(g, z, target.label.index())?;
            loss = Some(match loss {
                Some(k) => g.add(k, l)?,
                None => l,
            });
        }
        Ok(loss.expect("network has at least one head"))
    }

    /// Batch objective built in one graph: mean task loss plus
    /// `(λ/2)‖θ‖²` over all trainable parameters.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[(&PreparedPair, &Target)],
        lambda: f64,
    ) -> Result<Var> {
        let outs = batch
            .iter()
            .map(|(p, _)| self.forward_pair(g, store, p))
            .collect::<Result<Vec<_>>>()?;
        let x_h: Vec<Var> = outs.iter().map(|o| o.x_h).collect();
        let theta = Self::trainable(store);
        let mut l2_left = Some(lambda);
        let mut total = None;
        if let Some(head) = &self.score_head {
            let scores: Vec<f64> = batch.iter().map(|(_, t)| t.score).collect();
            let lam = l2_left.take().unwrap_or(0.0);
            total = Some(relatedness_loss(g, store, head, &x_h, &scores, lam, &theta)?);
        }
        if let Some(head) = &self.class_head {
            let labels: Vec<usize> = batch.iter().map(|(_, t)| t.label.index()).collect();
            let lam = l2_left.take().unwrap_or(0.0);
            let l = entailment_loss(g, store, head, &x_h, &labels, lam, &theta)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("network has at least one head"))
    }

    pub fn predict(&self, store: &ParamStore, pair: &PreparedPair) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward_pair(&mut g, store, pair)?;
        Ok(Prediction {
            score: out.score_logits.map(|z| predict_score(g.value(z).data())),
            label: out
                .class_logits
                .map(|z| EntailmentLabel::from_index(predict_label(g.value(z).data())).expect("three classes")),
        })
    }
}

/// Network, parameter values and word vectors together.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
    pub words: Arc<WordVectors>,
}

impl Model {
    pub fn new(config: &Config) -> Result<Self> {
        Self::with_words(config, Arc::new(load_word_vectors(config)?))
    }

    pub fn with_words(config: &Config, words: Arc<WordVectors>) -> Result<Self> {
        if words.dim() != config.word_dim {
            return Err(Error::Config(format!(
                "word vectors have dimension {}, config says {}",
                words.dim(),
                config.word_dim
            )));
        }
        let (net, params) = Network::build(config)?;
        Ok(Model { net, params, words })
    }

    pub fn config(&self) -> &Config {
        &self.net.config
    }

    /// Embeds tokens, keeping at most `max_len`.
    pub fn prepare(&self, tokens: &[String]) -> Result<PreparedSentence> {
        if tokens.is_empty() {
            return Err(Error::invalid("sentence has no tokens"));
        }
        let keep = tokens.len().min(self.config().max_len);
        let kept = &tokens[..keep];
        Ok(PreparedSentence {
            words: self.words.matrix(kept)?,
            grids: kept.iter().map(|t| quantize(t, self.config().token_len)).collect(),
            truncated: tokens.len() - keep,
        })
    }

    pub fn prepare_pair(&self, a: &[String], b: &[String]) -> Result<PreparedPair> {
        Ok(PreparedPair {
            a: self.prepare(a)?,
            b: self.prepare(b)?,
        })
    }

    pub fn prepare_example(&self, e: &PairExample) -> Result<PreparedPair> {
        self.prepare_pair(&e.tokens_a, &e.tokens_b)
    }

    pub fn predict(&self, pair: &PreparedPair) -> Result<Prediction> {
        self.net.predict(&self.params, pair)
    }

    /// Tokenizes and scores two raw sentences.
    pub fn predict_text(&self, a: &str, b: &str) -> Result<Prediction> {
        let pair = self.prepare_pair(&tokenize(a), &tokenize(b))?;
        self.predict(&pair)
    }
}
