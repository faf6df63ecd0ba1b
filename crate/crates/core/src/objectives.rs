//! Task heads and losses.
//!
//! Relatedness is ordinal: the head predicts a distribution over the scores
//! `1..=K` and is trained with KL divergence against the two-point target
//! whose expectation is the gold score. Entailment is plain softmax NLL.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SCORE_CLASSES: usize = 5;
pub const ENTAILMENT_CLASSES: usize = 3;

/// Distribution over `1..=k` with at most two adjacent nonzeros and
/// expectation exactly `y`.
pub fn sparse_target(y: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 || !(1.0..=k as f64).contains(&y) {
        return Err(Error::invalid(format!("score {y} outside [1, {k}]")));
    }
    let fl = y.floor();
    let i = fl as usize; // 1-based
    let mut p = vec![0.0; k];
    let frac = y - fl;
    p[i - 1] = fl - y + 1.0;
    if i < k {
        p[i] = frac;
    }
    Ok(p)
}

/// `Σ p_i · i` over the 1-based ramp.
pub fn expected_score(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax over `K` ordinal classes.
#[derive(Clone, Copy, Debug)]
pub struct OrdinalHead {
    pub linear: Linear,
    pub classes: usize,
}

impl OrdinalHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, input: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("ordinal head needs at least two classes".into()));
        }
        Ok(OrdinalHead {
            linear: Linear::new(store, rng, "head.score", input, classes)?,
            classes,
        })
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x_h: Var) -> Result<Var> {
        self.linear.forward(g, store, x_h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassHead {
    pub linear: Linear,
    pub classes: usize,
}

impl ClassHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, input: usize, classes: usize) -> Result<Self> {
        Ok(ClassHead {
            linear: Linear::new(store, rng, "head.class", input, classes)?,
            classes,
        })
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x_h: Var) -> Result<Var> {
        self.linear.forward(g, store, x_h)
    }
}

/// `KL(p ‖ softmax(logits))` for one `1 × K` row. Zero-mass entries of `p`
/// contribute nothing.
pub fn kl_to_target(g: &mut Graph, logits: Var, p: &[f64]) -> Result<Var> {
    if g.shape(logits) != [1, p.len()] {
        return Err(Error::ShapeMismatch {
            op: "kl_to_target",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![1, p.len()],
        });
    }
    let neg_entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let ls = g.log_softmax(logits)?;
    let pc = g.constant(Tensor::row(p.to_vec())?);
    let cross = g.mul(ls, pc)?;
    let cross = g.sum(cross);
    Ok(g.affine(cross, -1.0, neg_entropy))
}

/// `−log softmax(logits)[label]` for one `1 × C` row.
pub fn nll(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let c = g.shape(logits)[1];
    if label >= c {
        return Err(Error::invalid(format!("label {label} outside 0..{c}")));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.slice(ls, 1, label, 1)?;
    let picked = g.sum(picked);
    Ok(g.scale(picked, -1.0))
}

/// `(λ/2) Σ ‖θ‖²` over the given parameters, in-graph.
pub fn l2_penalty(g: &mut Graph, store: &ParamStore, lambda: f64, theta: &[ParamId]) -> Result<Option<Var>> {
    if lambda == 0.0 || theta.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for &id in theta {
        let p = g.param(store, id);
        let sq = g.mul(p, p)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| g.scale(t, lambda / 2.0)))
}

fn mean_plus_l2(g: &mut Graph, store: &ParamStore, terms: Vec<Var>, lambda: f64, theta: &[ParamId]) -> Result<Var> {
    let m = terms.len();
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = g.add(sum, t)?;
    }
    let mean = g.scale(sum, 1.0 / m as f64);
    match l2_penalty(g, store, lambda, theta)? {
        Some(r) => g.add(mean, r),
        None => Ok(mean),
    }
}

/// Mean KL over the batch plus the L2 term. `scores` are gold values in
/// `[1, K]`.
pub fn relatedness_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &OrdinalHead,
    x_h: &[Var],
    scores: &[f64],
    lambda: f64,
    theta: &[ParamId],
) -> Result<Var> {
    check_batch(x_h.len(), scores.len(), lambda)?;
    let mut terms = Vec::with_capacity(x_h.len());
    for (&x, &y) in x_h.iter().zip(scores) {
        let p = sparse_target(y, head.classes)?;
        let z = head.logits(g, store, x)?;
        terms.push(kl_to_target(g, z, &p)?);
    }
    mean_plus_l2(g, store, terms, lambda, theta)
}

/// Mean NLL over the batch plus the L2 term.
pub fn entailment_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &ClassHead,
    x_h: &[Var],
    labels: &[usize],
    lambda: f64,
    theta: &[ParamId],
) -> Result<Var> {
    check_batch(x_h.len(), labels.len(), lambda)?;
    let mut terms = Vec::with_capacity(x_h.len());
    for (&x, &y) in x_h.iter().zip(labels) {
        let z = head.logits(g, store, x)?;
        terms.push(nll(g, z, y)?);
    }
    mean_plus_l2(g, store, terms, lambda, theta)
}

fn check_batch(n: usize, targets: usize, lambda: f64) -> Result<()> {
    if n == 0 || n != targets {
        return Err(Error::invalid(format!("batch of {n} inputs with {targets} targets")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("negative L2 strength {lambda}")));
    }
    Ok(())
}

/// Expected score under the head's distribution, always in `[1, K]`.
pub fn predict_score(logits: &[f64]) -> f64 {
    expected_score(&softmax(logits))
}

pub fn predict_label(logits: &[f64]) -> usize {
    argmax(logits)
}
