//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamGrads)>;
}

/// Adapts a graph-building closure into an [`Objective`].
pub struct GraphObjective<F>(pub F);

impl<F> Objective for GraphObjective<F>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let out = (self.0)(&mut g, params)?;
        Ok(g.value(out).item())
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new();
        let out = (self.0)(&mut g, params)?;
        let grads = g.backward(out)?;
        Ok((g.value(out).item(), grads.param_grads(&g, params.len(), 1.0)))
    }
}

#[derive(Clone, Debug)]
pub enum Selection {
    /// Every entry of every trainable parameter.
    All,
    /// At most `per_param` entries of each parameter, drawn without replacement.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub selection: Selection,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            selection: Selection::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub per_param: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (loss, analytic) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut report = GradCheckReport {
        loss,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = params.get(id).len();
        let entries: Vec<usize> = match &cfg.selection {
            Selection::All => (0..n).collect(),
            Selection::Sample { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9e37_79b9));
                let mut v = sample(&mut rng, n, (*per_param).min(n)).into_vec();
                v.sort_unstable();
                v
            }
        };
        let mut pr = ParamReport {
            name: params.param(id).name.clone(),
            checked: 0,
            max_rel_error: 0.0,
        };
        for i in entries {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.epsilon;
            let plus = objective.loss(params);
            params.get_mut(id).data_mut()[i] = orig - cfg.epsilon;
            let minus = objective.loss(params);
            params.get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("perturbed loss at {}[{i}]", pr.name)));
            }
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic.value(id, i);
            let err = relative_error(a, numeric);
            pr.checked += 1;
            pr.max_rel_error = pr.max_rel_error.max(err);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Mismatch {
                    param: pr.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
        report.checked += pr.checked;
        report.per_param.push(pr);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0]).unwrap(), true).unwrap();
        let obj = GraphObjective(move |g: &mut Graph, s: &ParamStore| {
            let v = g.param(s, x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        });
        let (_, grad) = obj.loss_and_grad(&store).unwrap();
        assert_eq!(grad.get(x).unwrap(), &[2.0, 4.0]);
        let report = grad_check(&obj, &mut store, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
        // parameters restored bit-exactly
        assert_eq!(store.get(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn detects_wrong_gradient() {
        struct Wrong;
        impl Objective for Wrong {
            fn loss(&self, p: &ParamStore) -> Result<f64> {
                Ok(p.get(crate::params::ParamId(0)).data()[0].powi(2))
            }
            fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, ParamGrads)> {
                let mut g = ParamGrads::zeros_like(p);
                g.accumulate(crate::params::ParamId(0), &[1.0], 1.0);
                Ok((self.loss(p)?, g))
            }
        }
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(3.0), true).unwrap();
        let r = grad_check(&Wrong, &mut store, &GradCheckConfig::default()).unwrap();
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst.unwrap().param, "x");
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0), true).unwrap();
        let obj = GraphObjective(move |g: &mut Graph, s: &ParamStore| {
            let v = g.param(s, x);
            Ok(g.affine(v, f64::INFINITY, 0.0))
        });
        assert!(grad_check(&obj, &mut store, &GradCheckConfig::default()).is_err());
    }
}
