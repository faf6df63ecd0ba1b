//! Temporal CNN over the folded matching planes.
//!
//! The `(3 × n × w)` feature tensor is folded plane-major into `n × 3w`
//! (time = layer index, frames = FP1 ‖ FP2 ‖ FP3), then passed through two
//! conv + tanh stages and flattened into `x_h`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv1d;
use crate::matching::{FeatureTensor, PLANES};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Topology {
    /// Width-1 stage, then width-2 stage.
    #[default]
    I,
    /// Width-2 stage, then width-1 stage.
    II,
}

impl Topology {
    pub fn kernel_widths(self) -> [usize; 2] {
        match self {
            Topology::I => [1, 2],
            Topology::II => [2, 1],
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::I => "I",
            Topology::II => "II",
        })
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Topology::I),
            "II" | "2" => Ok(Topology::II),
            _ => Err(Error::invalid(format!("unknown topology {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub topology: Topology,
    pub stage1_frames: usize,
    pub stage2_frames: usize,
    /// Give each plane its own stage-1 filter bank of `stage1_frames / 3`
    /// outputs instead of one bank over all folded frames.
    pub per_plane_stage1: bool,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            topology: Topology::I,
            stage1_frames: 150,
            stage2_frames: 150,
            per_plane_stage1: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatchCnn {
    pub config: TopologyConfig,
    pub plane_width: usize,
    /// One bank, or one per plane.
    pub stage1: Vec<Conv1d>,
    pub stage2: Conv1d,
}

impl MatchCnn {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &TopologyConfig, plane_width: usize) -> Result<Self> {
        if config.stage1_frames == 0 || config.stage2_frames == 0 {
            return Err(Error::Config("match CNN frame counts must be positive".into()));
        }
        let [k1, k2] = config.topology.kernel_widths();
        let stage1 = if config.per_plane_stage1 {
            if !config.stage1_frames.is_multiple_of(PLANES) {
                return Err(Error::Config(format!(
                    "per-plane stage 1 needs frames divisible by {PLANES}, got {}",
                    config.stage1_frames
                )));
            }
            (0..PLANES)
                .map(|p| {
                    Conv1d::new(
                        store,
                        rng,
                        &format!("mcnn.s1.p{p}"),
                        plane_width,
                        config.stage1_frames / PLANES,
                        k1,
                        1,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![Conv1d::new(store, rng, "mcnn.s1", PLANES * plane_width, config.stage1_frames, k1, 1)?]
        };
        let stage2 = Conv1d::new(store, rng, "mcnn.s2", config.stage1_frames, config.stage2_frames, k2, 1)?;
        Ok(MatchCnn {
            config: config.clone(),
            plane_width,
            stage1,
            stage2,
        })
    }

    /// Length of `x_h` for sentence matrices with `n` rows.
    pub fn output_dim(&self, n: usize) -> Result<usize> {
        let [k1, k2] = self.config.topology.kernel_widths();
        let t1 = n
            .checked_sub(k1)
            .map(|t| t + 1)
            .filter(|&t| t >= k2)
            .ok_or_else(|| too_short(n))?;
        Ok((t1 - k2 + 1) * self.config.stage2_frames)
    }

    /// `n × (planes · w)` with plane blocks side by side.
    pub fn fold_planes(&self, g: &mut Graph, features: &FeatureTensor) -> Result<Var> {
        g.concat(1, &features.planes)
    }

    /// Stage outputs before flattening: `(stage1, stage2)`.
    pub fn stages(&self, g: &mut Graph, store: &ParamStore, features: &FeatureTensor) -> Result<(Var, Var)> {
        self.output_dim(features.n)?;
        let s1 = if self.stage1.len() == 1 {
            let x = self.fold_planes(g, features)?;
            self.stage1[0].forward(g, store, x)?
        } else {
            let outs = self
                .stage1
                .iter()
                .zip(features.planes)
                .map(|(conv, plane)| conv.forward(g, store, plane))
                .collect::<Result<Vec<_>>>()?;
            g.concat(1, &outs)?
        };
        let s1 = g.tanh(s1);
        let s2 = self.stage2.forward(g, store, s1)?;
        Ok((s1, g.tanh(s2)))
    }

    /// `x_h` as a `1 × output_dim` row.
    pub fn match_features(&self, g: &mut Graph, store: &ParamStore, features: &FeatureTensor) -> Result<Var> {
        let (_, s2) = self.stages(g, store, features)?;
        let len = g.value(s2).len();
        g.reshape(s2, &[1, len])
    }
}

fn too_short(n: usize) -> Error {
    Error::InvalidShape {
        op: "match_features",
        detail: format!("{n} layer rows are too few for a width-2 temporal convolution"),
    }
}
