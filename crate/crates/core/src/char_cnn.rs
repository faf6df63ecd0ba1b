//! Character-derived word vectors.
//!
//! Each token's [`CharGrid`] goes through temporal convolution with a
//! threshold (relu) activation, max-over-time pooling, and a highway MLP:
//!
//! ```text
//! grid (l0 × 36) → conv(width 3) → relu → max over time → (1 × frames)
//!   → relu(affine frames→units) → highway(units) → relu(affine units→frames)
//! ```
//!
//! With more than one conv stage, intermediate stages pool locally (width 2,
//! stride 2) and only the last one pools over all of time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::embeddings::{quantize, Alphabet, CharGrid};
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharCnnConfig {
    /// Characters kept per token (l0).
    pub token_len: usize,
    pub frames: usize,
    pub kernel: usize,
    pub stages: usize,
    pub highway_units: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        CharCnnConfig {
            token_len: 16,
            frames: 100,
            kernel: 3,
            stages: 1,
            highway_units: 50,
        }
    }
}

/// One gated highway layer: `t ⊙ relu(W_H y + b_H) + (1 − t) ⊙ y` with
/// `t = σ(W_T y + b_T)`.
#[derive(Clone, Copy, Debug)]
pub struct HighwayParams {
    pub hidden: Linear,
    pub transform: Linear,
}

impl HighwayParams {
    /// Transform-gate bias starts at −2 so the layer initially carries.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, units: usize) -> Result<Self> {
        let hidden = Linear::new(store, rng, &format!("{name}.hidden"), units, units)?;
        let transform = Linear::new(store, rng, &format!("{name}.transform"), units, units)?;
        *store.get_mut(transform.b) = Tensor::filled(&[units], -2.0);
        Ok(HighwayParams { hidden, transform })
    }
}

/// Convolution followed by relu.
pub fn temporal_conv(g: &mut Graph, store: &ParamStore, conv: &Conv1d, x: Var) -> Result<Var> {
    let c = conv.forward(g, store, x)?;
    Ok(g.relu(c))
}

pub fn max_over_time(g: &mut Graph, x: Var) -> Result<Var> {
    g.max_over_time(x)
}

/// Applies the highway layer row-wise to `y` (`rows × units`).
pub fn highway(g: &mut Graph, store: &ParamStore, p: &HighwayParams, y: Var) -> Result<Var> {
    let gate_pre = p.transform.forward(g, store, y)?;
    let t = g.sigmoid(gate_pre);
    let h_pre = p.hidden.forward(g, store, y)?;
    let h = g.relu(h_pre);
    let carry = g.one_minus(t);
    let a = g.mul(t, h)?;
    let b = g.mul(carry, y)?;
    g.add(a, b)
}

#[derive(Clone, Debug)]
pub struct CharCnn {
    pub config: CharCnnConfig,
    pub convs: Vec<Conv1d>,
    pub proj_in: Linear,
    pub highway: HighwayParams,
    pub proj_out: Linear,
}

impl CharCnn {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &CharCnnConfig) -> Result<Self> {
        Self::check_lengths(config)?;
        let mut convs = Vec::with_capacity(config.stages);
        for s in 0..config.stages {
            let input = if s == 0 { Alphabet::SIZE } else { config.frames };
            convs.push(Conv1d::new(
                store,
                rng,
                &format!("char.conv{s}"),
                input,
                config.frames,
                config.kernel,
                1,
            )?);
        }
        let proj_in = Linear::new(store, rng, "char.proj_in", config.frames, config.highway_units)?;
        let highway = HighwayParams::new(store, rng, "char.highway", config.highway_units)?;
        let proj_out = Linear::new(store, rng, "char.proj_out", config.highway_units, config.frames)?;
        Ok(CharCnn {
            config: config.clone(),
            convs,
            proj_in,
            highway,
            proj_out,
        })
    }

    fn check_lengths(c: &CharCnnConfig) -> Result<()> {
        if c.stages == 0 || c.kernel == 0 || c.frames == 0 || c.highway_units == 0 {
            return Err(Error::Config("char CNN sizes must be positive".into()));
        }
        let mut t = c.token_len;
        for s in 0..c.stages {
            if t < c.kernel {
                return Err(Error::Config(format!(
                    "char token length {} leaves {t} steps at stage {s}, below kernel width {}",
                    c.token_len, c.kernel
                )));
            }
            t = t - c.kernel + 1;
            if s + 1 < c.stages {
                if t < 2 {
                    return Err(Error::Config(format!("char stage {s} output too short to pool")));
                }
                t = (t - 2) / 2 + 1;
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.config.frames
    }

    /// Convolution stages and pooling for one token: `1 × frames`.
    pub fn pooled_features(&self, g: &mut Graph, store: &ParamStore, grid: &CharGrid) -> Result<Var> {
        let mut x = g.constant(grid.to_tensor());
        for (s, conv) in self.convs.iter().enumerate() {
            x = temporal_conv(g, store, conv, x)?;
            x = if s + 1 == self.convs.len() {
                max_over_time(g, x)?
            } else {
                g.max_pool(x, 2, 2)?
            };
        }
        Ok(x)
    }

    /// The projection–highway–projection sandwich applied row-wise.
    pub fn highway_mlp(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
        let a = self.proj_in.forward(g, store, y)?;
        let a = g.relu(a);
        let z = highway(g, store, &self.highway, a)?;
        let o = self.proj_out.forward(g, store, z)?;
        Ok(g.relu(o))
    }

    /// Character vectors for a token sequence: `T × frames`.
    pub fn embed_grids(&self, g: &mut Graph, store: &ParamStore, grids: &[CharGrid]) -> Result<Var> {
        if grids.is_empty() {
            return Err(Error::invalid("no tokens to embed"));
        }
        let pooled = grids
            .iter()
            .map(|grid| self.pooled_features(g, store, grid))
            .collect::<Result<Vec<_>>>()?;
        let y = if pooled.len() == 1 { pooled[0] } else { g.concat(0, &pooled)? };
        self.highway_mlp(g, store, y)
    }

    /// Character vector of a single token: `1 × frames`.
    pub fn char_embed(&self, g: &mut Graph, store: &ParamStore, token: &str) -> Result<Var> {
        let grid = quantize(token, self.config.token_len);
        self.embed_grids(g, store, std::slice::from_ref(&grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CharCnnConfig {
        CharCnnConfig {
            token_len: 6,
            frames: 5,
            kernel: 3,
            stages: 1,
            highway_units: 4,
        }
    }

    #[test]
    fn zero_grid_gives_relu_of_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::new(&mut store, &mut rng, "c", 36, 4, 3, 1).unwrap();
        *store.get_mut(conv.b) = Tensor::vector(vec![0.5, -0.5, 2.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[6, 36]));
        let c = temporal_conv(&mut g, &store, &conv, x).unwrap();
        assert_eq!(g.shape(c), &[4, 4]);
        for r in 0..4 {
            assert_eq!(g.value(c).row_slice(r), &[0.5, 0.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn conv_output_length_is_n_minus_h_plus_1() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::new(&mut store, &mut rng, "c", 36, 2, 3, 1).unwrap();
        for n in 3..12 {
            let mut g = Graph::new();
            let x = g.constant(quantize("abcdefghijk", n).to_tensor());
            let c = temporal_conv(&mut g, &store, &conv, x).unwrap();
            assert_eq!(g.shape(c)[0], n - 3 + 1);
        }
        let mut g = Graph::new();
        let x = g.constant(quantize("ab", 2).to_tensor());
        assert!(temporal_conv(&mut g, &store, &conv, x).is_err());
    }

    fn highway_limit(bias: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hw = HighwayParams::new(&mut store, &mut rng, "hw", 4).unwrap();
        *store.get_mut(hw.transform.b) = Tensor::filled(&[4], bias);
        *store.get_mut(hw.hidden.b) = Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]).unwrap();
        let y = vec![0.3, -0.7, 1.1, 0.2];
        let mut g = Graph::new();
        let yv = g.constant(Tensor::row(y.clone()).unwrap());
        let z = highway(&mut g, &store, &hw, yv).unwrap();
        let hpre = hw.hidden.forward(&mut g, &store, yv).unwrap();
        let h = g.relu(hpre);
        (y, g.value(z).data().to_vec(), g.value(h).data().to_vec())
    }

    #[test]
    fn highway_carry_limit_is_identity() {
        let (y, z, _) = highway_limit(-20.0);
        for (a, b) in y.iter().zip(&z) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn highway_transform_limit_is_plain_mlp() {
        let (_, z, h) = highway_limit(20.0);
        for (a, b) in h.iter().zip(&z) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn char_embed_is_pure_and_distinguishes_tokens() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cnn = CharCnn::new(&mut store, &mut rng, &small()).unwrap();
        let mut g = Graph::new();
        let a = cnn.char_embed(&mut g, &store, "cat").unwrap();
        let b = cnn.char_embed(&mut g, &store, "cat").unwrap();
        let c = cnn.char_embed(&mut g, &store, "cats").unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert_eq!(g.shape(a), &[1, 5]);
    }

    #[test]
    fn multi_stage_lengths_validated() {
        let mut cfg = small();
        cfg.stages = 2;
        cfg.token_len = 16;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cnn = CharCnn::new(&mut store, &mut rng, &cfg).unwrap();
        let mut g = Graph::new();
        let v = cnn.char_embed(&mut g, &store, "elephant").unwrap();
        assert_eq!(g.shape(v), &[1, 5]);
        cfg.token_len = 5;
        assert!(CharCnn::new(&mut ParamStore::new(), &mut rng, &cfg).is_err());
    }
}
