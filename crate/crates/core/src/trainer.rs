//! AdaGrad minibatch training, evaluation, and the topology comparison.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::{Config, Selection, Task};
use crate::data::{batch_iter, EntailmentLabel, PairExample, Split};
use crate::embeddings::WordVectors;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective};
use crate::match_cnn::Topology;
use crate::metrics::MetricsReport;
use crate::model::{Model, Network, PreparedPair, Target};
use crate::objectives::{kl_to_target, predict_label, predict_score, sparse_target, softmax, SCORE_CLASSES};
use crate::params::{ParamGrads, ParamStore};

/// Squared-gradient accumulators, one per parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGradState {
    acc: Vec<Vec<f64>>,
}

impl AdaGradState {
    pub fn new(store: &ParamStore) -> Self {
        AdaGradState {
            acc: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn accumulator(&self, id: crate::params::ParamId) -> &[f64] {
        &self.acc[id.index()]
    }
}

/// `acc += g²; θ −= rate · g / (√acc + ε)` on trainable parameters. A
/// non-finite gradient rejects the whole step and leaves everything as is.
pub fn adagrad_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdaGradState,
    rate: f64,
    eps: f64,
) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::invalid("AdaGrad epsilon must be positive"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.param(id).trainable {
            continue;
        }
        let Some(g) = grads.get(id) else { continue };
        let acc = &mut state.acc[id.index()];
        let theta = store.get_mut(id).data_mut();
        for ((t, a), &gi) in theta.iter_mut().zip(acc.iter_mut()).zip(g) {
            if gi == 0.0 {
                continue;
            }
            *a += gi * gi;
            *t -= rate * gi / (a.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradient of one pair, without regularization.
pub fn example_gradient(net: &Network, store: &ParamStore, pair: &PreparedPair, target: &Target) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let loss = net.pair_loss(&mut g, store, pair, target)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.param_grads(&g, store.len(), 1.0)))
}

/// Mean loss over the batch plus `(λ/2)‖θ‖²`, with its gradient. Examples
/// run in parallel; their gradients are summed in batch order so the result
/// does not depend on scheduling.
pub fn batch_gradient(
    net: &Network,
    store: &ParamStore,
    batch: &[(&PreparedPair, &Target)],
    lambda: f64,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|(p, t)| example_gradient(net, store, p, t))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::zeros_like(store);
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        grads.add_scaled(g, scale);
    }
    grads.add_l2(store, lambda);
    Ok((loss * scale + 0.5 * lambda * store.l2_squared(), grads))
}

/// The batch objective evaluated as a single graph, with the L2 term built
/// from parameter nodes. Used for finite-difference checks.
pub struct BatchObjective<'a> {
    pub net: &'a Network,
    pub batch: Vec<(&'a PreparedPair, &'a Target)>,
    pub lambda: f64,
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.net.batch_loss(&mut g, params, &self.batch, self.lambda)?;
        Ok(g.value(l).item())
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new();
        let l = self.net.batch_loss(&mut g, params, &self.batch, self.lambda)?;
        let grads = g.backward(l)?;
        Ok((g.value(l).item(), grads.param_grads(&g, params.len(), 1.0)))
    }
}

/// The two pairs used by [`model_gradcheck`].
pub fn gradcheck_pairs() -> Vec<PairExample> {
    vec![
        PairExample::new("g1", "A man plays a guitar", "The man is playing guitar", 4.3, EntailmentLabel::Entailment, Split::Train)
            .expect("valid pair"),
        PairExample::new("g2", "Two dogs run", "Nobody is cooking", 1.6, EntailmentLabel::Neutral, Split::Train)
            .expect("valid pair"),
    ]
}

/// Finite-difference check of the full model on the small configuration:
/// both heads, two built-in pairs, L2 on, every entry of every trainable
/// parameter. Parameters are first nudged by uniform noise in ±0.1 so no
/// rectifier input sits exactly on its kink.
pub fn model_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let cfg = Config {
        task: Task::Joint,
        seed,
        ..Config::tiny()
    };
    let mut model = Model::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let (items, _) = prepare_examples(&model, &gradcheck_pairs())?;
    let objective = BatchObjective {
        net: &model.net,
        batch: items.iter().map(|(p, t)| (p, t)).collect(),
        lambda: cfg.l2,
    };
    grad_check(&objective, &mut model.params.clone(), &GradCheckConfig::default())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TruncationStats {
    pub sentences: usize,
    pub tokens: usize,
}

pub type Prepared = Vec<(PreparedPair, Target)>;

/// Embeds every example once, applying the length cap.
pub fn prepare_examples(model: &Model, examples: &[PairExample]) -> Result<(Prepared, TruncationStats)> {
    let mut stats = TruncationStats::default();
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        if !(1.0..=5.0).contains(&e.score) {
            return Err(Error::invalid(format!("example {}: score {} outside [1, 5]", e.id, e.score)));
        }
        let p = model.prepare_example(e)?;
        for s in [&p.a, &p.b] {
            if s.truncated > 0 {
                stats.sentences += 1;
                stats.tokens += s.truncated;
            }
        }
        out.push((p, Target::from(e)));
    }
    Ok((out, stats))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean KL to the sparse targets.
    pub mean_kl: Option<f64>,
    /// Mean entailment negative log-likelihood.
    pub mean_nll: Option<f64>,
}

#[derive(Clone, Debug)]
struct PairScores {
    score: Option<f64>,
    label: Option<EntailmentLabel>,
    kl: Option<f64>,
    nll: Option<f64>,
}

fn score_pair(net: &Network, store: &ParamStore, pair: &PreparedPair, target: &Target) -> Result<PairScores> {
    let mut g = Graph::new();
    let out = net.forward_pair(&mut g, store, pair)?;
    let mut r = PairScores {
        score: None,
        label: None,
        kl: None,
        nll: None,
    };
    if let Some(z) = out.score_logits {
        let p = sparse_target(target.score, SCORE_CLASSES)?;
        let kl = kl_to_target(&mut g, z, &p)?;
        r.kl = Some(g.value(kl).item());
        r.score = Some(predict_score(g.value(z).data()));
    }
    if let Some(z) = out.class_logits {
        let logits = g.value(z).data();
        r.label = EntailmentLabel::from_index(predict_label(logits));
        r.nll = Some(-softmax(logits)[target.label.index()].ln());
    }
    Ok(r)
}

/// Metrics and mean task losses over prepared examples.
pub fn evaluate(net: &Network, store: &ParamStore, items: &[(PreparedPair, Target)]) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let scored: Vec<PairScores> = items
        .par_iter()
        .map(|(p, t)| score_pair(net, store, p, t))
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&PairScores) -> Option<f64>| -> Option<f64> {
        scored.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    let pred_s: Option<Vec<f64>> = scored.iter().map(|s| s.score).collect();
    let gold_s: Vec<f64> = items.iter().map(|(_, t)| t.score).collect();
    let pred_l: Option<Vec<EntailmentLabel>> = scored.iter().map(|s| s.label).collect();
    let gold_l: Vec<EntailmentLabel> = items.iter().map(|(_, t)| t.label).collect();
    let report = MetricsReport::compute(
        pred_s.as_deref().map(|p| (p, gold_s.as_slice())),
        pred_l.as_deref().map(|p| (p, gold_l.as_slice())),
    )?;
    Ok(Evaluation {
        report,
        mean_kl: mean(&|s| s.kl),
        mean_nll: mean(&|s| s.nll),
    })
}

/// Model-selection metric: Pearson when a score head exists, else accuracy.
pub fn selection_metric(e: &Evaluation) -> f64 {
    e.report
        .pearson
        .or(e.report.accuracy)
        .unwrap_or(f64::NEG_INFINITY)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean over steps of the regularized batch loss.
    pub train_loss: f64,
    pub rejected_steps: usize,
    pub train: Option<Evaluation>,
    pub dev: Option<Evaluation>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord<'a> {
    Start {
        examples: usize,
        dev_examples: usize,
        trainable_values: usize,
        truncated: &'a TruncationStats,
        config: &'a Config,
    },
    Step {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    Rejected {
        epoch: usize,
        step: usize,
        reason: String,
    },
    Epoch(&'a EpochSummary),
    Select {
        epoch: usize,
        metric: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub history: Vec<EpochSummary>,
    /// Epoch whose parameters the model holds on return.
    pub selected_epoch: usize,
    pub truncated: TruncationStats,
}

/// Hooks for callers that need more than the config provides.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Evaluate on the training set after each epoch.
    pub eval_train: bool,
    /// JSON-lines log sink.
    pub log: Option<&'a mut dyn Write>,
    /// Called after each epoch; returning true ends training early.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary) -> bool>,
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

/// Trains `model` in place. The examples are validated and embedded before
/// the first epoch; each epoch visits a seeded permutation in batches.
pub fn train(model: &mut Model, train_set: &[PairExample], dev_set: &[PairExample], mut opts: TrainOptions) -> Result<TrainSummary> {
    let cfg = model.config().clone();
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.select == Selection::BestDev && dev_set.is_empty() {
        return Err(Error::Config("best-dev selection needs trial examples".into()));
    }
    let (items, truncated) = prepare_examples(model, train_set)?;
    let (dev, _) = prepare_examples(model, dev_set)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    emit(
        &mut opts.log,
        &LogRecord::Start {
            examples: items.len(),
            dev_examples: dev.len(),
            trainable_values: model.params.num_trainable_values(),
            truncated: &truncated,
            config: &cfg,
        },
    )?;

    let mut state = AdaGradState::new(&model.params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(items.len(), cfg.batch_size, cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut rejected = 0;
        for idx in &batches {
            step += 1;
            let batch: Vec<(&PreparedPair, &Target)> = idx.iter().map(|&i| (&items[i].0, &items[i].1)).collect();
            let (loss, mut grads) = pool.install(|| batch_gradient(&model.net, &model.params, &batch, cfg.l2))?;
            if cfg.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            let applied = if loss.is_finite() {
                adagrad_step(&mut model.params, &grads, &mut state, cfg.learning_rate, cfg.adagrad_eps)
            } else {
                Err(Error::NonFinite("loss".into()))
            };
            match applied {
                Ok(()) => {
                    loss_sum += loss;
                    emit(&mut opts.log, &LogRecord::Step { epoch, step, loss })?;
                }
                Err(e) => {
                    rejected += 1;
                    emit(
                        &mut opts.log,
                        &LogRecord::Rejected {
                            epoch,
                            step,
                            reason: e.to_string(),
                        },
                    )?;
                }
            }
        }
        let applied = batches.len() - rejected;
        let summary = EpochSummary {
            epoch,
            train_loss: if applied > 0 { loss_sum / applied as f64 } else { f64::NAN },
            rejected_steps: rejected,
            train: if opts.eval_train {
                Some(pool.install(|| evaluate(&model.net, &model.params, &items))?)
            } else {
                None
            },
            dev: if dev.is_empty() {
                None
            } else {
                Some(pool.install(|| evaluate(&model.net, &model.params, &dev))?)
            },
        };
        emit(&mut opts.log, &LogRecord::Epoch(&summary))?;
        if cfg.select == Selection::BestDev {
            let m = selection_metric(summary.dev.as_ref().expect("dev set present"));
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.params.clone()));
            }
        }
        let stop = opts.on_epoch.as_mut().is_some_and(|f| f(&summary));
        history.push(summary);
        if stop {
            break;
        }
    }
    let mut selected_epoch = history.len();
    if let Some((metric, epoch, params)) = best {
        model.params = params;
        selected_epoch = epoch;
        emit(&mut opts.log, &LogRecord::Select { epoch, metric })?;
    }
    Ok(TrainSummary {
        history,
        selected_epoch,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopologyRow {
    pub topology: Topology,
    pub seed: u64,
    pub selected_epoch: usize,
    pub eval: Evaluation,
}

/// Trains both topologies under each seed with otherwise identical settings
/// and evaluates them on `eval_set`.
pub fn compare_topologies(
    config: &Config,
    words: Arc<WordVectors>,
    train_set: &[PairExample],
    dev_set: &[PairExample],
    eval_set: &[PairExample],
    seeds: &[u64],
) -> Result<Vec<TopologyRow>> {
    let mut rows = Vec::new();
    for topology in [Topology::I, Topology::II] {
        for &seed in seeds {
            let cfg = Config {
                topology,
                seed,
                ..config.clone()
            };
            let mut model = Model::with_words(&cfg, words.clone())?;
            let summary = train(&mut model, train_set, dev_set, TrainOptions::default())?;
            let (items, _) = prepare_examples(&model, eval_set)?;
            rows.push(TopologyRow {
                topology,
                seed,
                selected_epoch: summary.selected_epoch,
                eval: evaluate(&model.net, &model.params, &items)?,
            });
        }
    }
    Ok(rows)
}
