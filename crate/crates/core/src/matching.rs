//! Matching feature planes between two sentence matrices.
//!
//! Planes, in order: elementwise product, absolute difference, and a joint
//! convolution over the row-interleaved pair
//! `[M1_0, M2_0, M1_1, M2_1, …]` with kernel width 2 and stride 2, so each
//! output row mixes one layer of sentence A with the same layer of sentence B.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv1d;
use crate::params::ParamStore;

pub const PLANES: usize = 3;

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

pub fn fp_mul(g: &mut Graph, m1: Var, m2: Var) -> Result<Var> {
    check_same(g, "fp_mul", m1, m2)?;
    g.mul(m1, m2)
}

pub fn fp_absdiff(g: &mut Graph, m1: Var, m2: Var) -> Result<Var> {
    check_same(g, "fp_absdiff", m1, m2)?;
    let d = g.sub(m1, m2)?;
    Ok(g.abs(d))
}

/// `(2n × w)` matrix whose even rows come from `m1` and odd rows from `m2`.
pub fn interleave(g: &mut Graph, m1: Var, m2: Var) -> Result<Var> {
    check_same(g, "interleave", m1, m2)?;
    let n = g.shape(m1)[0];
    let mut rows = Vec::with_capacity(2 * n);
    for r in 0..n {
        rows.push(g.row(m1, r)?);
        rows.push(g.row(m2, r)?);
    }
    g.concat(0, &rows)
}

/// The convolutional plane's parameters: `w → w` frames, width 2, stride 2.
#[derive(Clone, Copy, Debug)]
pub struct Matching {
    pub fp3: Conv1d,
    pub width: usize,
}

impl Matching {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, width: usize) -> Result<Self> {
        let fp3 = Conv1d::new(store, rng, "match.fp3", width, width, 2, 2)?;
        Ok(Matching { fp3, width })
    }

    pub fn fp_conv(&self, g: &mut Graph, store: &ParamStore, m1: Var, m2: Var) -> Result<Var> {
        check_same(g, "fp_conv", m1, m2)?;
        let joined = interleave(g, m1, m2)?;
        let c = self.fp3.forward(g, store, joined)?;
        Ok(g.tanh(c))
    }

    /// The three planes in fixed order.
    pub fn planes(&self, g: &mut Graph, store: &ParamStore, m1: Var, m2: Var) -> Result<[Var; PLANES]> {
        Ok([
            fp_mul(g, m1, m2)?,
            fp_absdiff(g, m1, m2)?,
            self.fp_conv(g, store, m1, m2)?,
        ])
    }

    /// Stacked `(3 × n × w)` feature tensor.
    pub fn assemble(&self, g: &mut Graph, store: &ParamStore, m1: Var, m2: Var) -> Result<FeatureTensor> {
        let planes = self.planes(g, store, m1, m2)?;
        let (n, w) = (g.shape(m1)[0], g.shape(m1)[1]);
        let stacked = planes
            .iter()
            .map(|&p| g.reshape(p, &[1, n, w]))
            .collect::<Result<Vec<_>>>()?;
        let tensor = g.concat(0, &stacked)?;
        Ok(FeatureTensor { tensor, planes, n, width: w })
    }
}

/// Graph handle to a `(planes × n × w)` tensor, keeping the individual
/// planes for consumers that fold them.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTensor {
    pub tensor: Var,
    pub planes: [Var; PLANES],
    pub n: usize,
    pub width: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(g: &mut Graph, rows: usize, cols: usize, data: &[f64]) -> Var {
        g.constant(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn product_and_difference_examples() {
        let mut g = Graph::new();
        let a = m(&mut g, 1, 2, &[1.0, -2.0]);
        let p = fp_mul(&mut g, a, a).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 4.0]);
        let d = fp_absdiff(&mut g, a, a).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0]);
        let z = m(&mut g, 1, 2, &[0.0, 0.0]);
        let p = fp_mul(&mut g, a, z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        let b = m(&mut g, 2, 1, &[1.0, 2.0]);
        assert!(fp_mul(&mut g, a, b).is_err());
        assert!(fp_absdiff(&mut g, a, b).is_err());
    }

    #[test]
    fn absdiff_symmetric() {
        let mut g = Graph::new();
        let a = m(&mut g, 2, 2, &[0.3, -0.1, 0.5, 0.9]);
        let b = m(&mut g, 2, 2, &[-0.2, 0.4, 0.5, -0.9]);
        let ab = fp_absdiff(&mut g, a, b).unwrap();
        let ba = fp_absdiff(&mut g, b, a).unwrap();
        assert_eq!(g.value(ab), g.value(ba));
    }

    #[test]
    fn averaging_kernel_gives_tanh_of_mean() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = 3;
        let mt = Matching::new(&mut store, &mut rng, w).unwrap();
        let mut k = Tensor::zeros(&[w, 2, w]);
        for o in 0..w {
            for s in 0..2 {
                k.data_mut()[(o * 2 + s) * w + o] = 0.5;
            }
        }
        *store.get_mut(mt.fp3.w) = k;
        let mut g = Graph::new();
        let a = m(&mut g, 2, 3, &[0.2, -0.4, 0.6, 0.1, 0.0, -0.3]);
        let b = m(&mut g, 2, 3, &[0.0, 0.4, 0.2, -0.5, 0.8, 0.3]);
        let c = mt.fp_conv(&mut g, &store, a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        let (va, vb) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
        for (i, v) in g.value(c).data().iter().enumerate() {
            assert!((v - ((va[i] + vb[i]) / 2.0).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn assemble_orders_planes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mt = Matching::new(&mut store, &mut rng, 4).unwrap();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
        let a = m(&mut g, 2, 4, &data);
        let f = mt.assemble(&mut g, &store, a, a).unwrap();
        let t = g.value(f.tensor).clone();
        assert_eq!(t.shape(), &[3, 2, 4]);
        for i in 0..8 {
            assert_eq!(t.data()[i], data[i] * data[i]);
            assert_eq!(t.data()[8 + i], 0.0);
            assert!(t.data()[16 + i].is_finite());
        }
        let again = mt.assemble(&mut g, &store, a, a).unwrap();
        assert_eq!(g.value(again.tensor), &t);
    }
}
