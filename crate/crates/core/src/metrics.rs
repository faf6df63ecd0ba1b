//! Evaluation metrics for relatedness and entailment.

use std::fmt;

use serde::Serialize;

use crate::data::EntailmentLabel;
use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::invalid(format!("metric inputs have lengths {a} and {b}")));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation. Constant inputs are rejected.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let (mp, mg) = (mean(pred), mean(gold));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(format!(
            "Pearson undefined: {} has zero variance",
            if sxx == 0.0 { "prediction" } else { "gold" }
        )));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    pearson(&ranks(pred), &ranks(gold))
}

pub fn mse(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    Ok(pred.iter().zip(gold).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `counts[gold][pred]`.
pub fn confusion(pred: &[EntailmentLabel], gold: &[EntailmentLabel]) -> Result<[[usize; 3]; 3]> {
    check_lengths(pred.len(), gold.len())?;
    let mut c = [[0; 3]; 3];
    for (p, g) in pred.iter().zip(gold) {
        c[g.index()][p.index()] += 1;
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub confusion: Option<[[usize; 3]; 3]>,
}

impl MetricsReport {
    /// Fills whichever parts have predictions. Correlations are left empty
    /// when undefined (constant predictions).
    pub fn compute(
        scores: Option<(&[f64], &[f64])>,
        labels: Option<(&[EntailmentLabel], &[EntailmentLabel])>,
    ) -> Result<Self> {
        let mut r = MetricsReport::default();
        if let Some((p, g)) = scores {
            r.examples = p.len();
            r.pearson = pearson(p, g).ok();
            r.spearman = spearman(p, g).ok();
            r.mse = Some(mse(p, g)?);
        }
        if let Some((p, g)) = labels {
            r.examples = p.len();
            r.accuracy = Some(accuracy(p, g)?);
            r.confusion = Some(confusion(p, g)?);
        }
        Ok(r)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "examples  {}", self.examples)?;
        if self.mse.is_some() {
            writeln!(f, "pearson   {}", opt(self.pearson))?;
            writeln!(f, "spearman  {}", opt(self.spearman))?;
            writeln!(f, "mse       {}", opt(self.mse))?;
        }
        if let Some(acc) = self.accuracy {
            writeln!(f, "accuracy  {acc:.4}")?;
        }
        if let Some(c) = self.confusion {
            writeln!(f, "confusion (rows gold, cols predicted)")?;
            for (i, row) in c.iter().enumerate() {
                let name = EntailmentLabel::from_index(i).expect("three classes").to_string();
                writeln!(f, "  {name:<13} {:>6} {:>6} {:>6}", row[0], row[1], row[2])?;
            }
        }
        Ok(())
    }
}
