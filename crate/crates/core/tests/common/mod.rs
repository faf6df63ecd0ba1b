//! Scalar-loop reference implementations and randomized comparison drivers.
//! Nothing here calls into the graph operations it checks; the references
//! index raw parameter buffers directly.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentpair::bilstm::{DepTree, Encoder, EncoderConfig, LstmParams, UpperInput};
use sentpair::layers::Conv1d;
use sentpair::match_cnn::{MatchCnn, Topology, TopologyConfig};
use sentpair::matching::Matching;
use sentpair::{Graph, ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn from_tensor(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Overwrites every parameter with uniform values in ±1 so biases are
/// nonzero and gates leave their initial regime.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    max_abs_diff(&vec![a.to_vec()], &vec![b.to_vec()])
}

// ---- temporal convolution ----

/// `out[r][f] = b[f] + Σ_k Σ_i w[f][k][i] · x[r·stride + k][i]`.
pub fn conv1d_ref(x: &Mat, w: &Tensor, b: &[f64], stride: usize) -> Mat {
    let (fout, width, fin) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let rows = (x.len() - width) / stride + 1;
    let mut out = vec![vec![0.0; fout]; rows];
    for r in 0..rows {
        for f in 0..fout {
            let mut s = b[f];
            for k in 0..width {
                for i in 0..fin {
                    s += w.at(&[f, k, i]) * x[r * stride + k][i];
                }
            }
            out[r][f] = s;
        }
    }
    out
}

pub fn conv_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let fin = rng.gen_range(1..6);
        let fout = rng.gen_range(1..6);
        let width = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let t = width + rng.gen_range(0..6);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, &mut rng, "c", fin, fout, width, stride).unwrap();
        randomize(&mut store, &mut rng);
        let mut x = rand_mat(&mut rng, t, fin);
        // one-hot style inputs take the sparse path
        if trial % 2 == 0 {
            for row in x.iter_mut() {
                let hot = rng.gen_range(0..fin);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = if i == hot { 1.0 } else { 0.0 };
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(to_tensor(&x));
        let y = conv.forward(&mut g, &store, xv).unwrap();
        let want = conv1d_ref(&x, store.get(conv.w), store.get(conv.b).data(), stride);
        worst = worst.max(max_abs_diff(&from_tensor(g.value(y)), &want));
    }
    worst
}

// ---- LSTM ----

pub struct LstmRef {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Vec<f64>,
    pub d: usize,
}

impl LstmRef {
    pub fn from_store(store: &ParamStore, p: &LstmParams) -> Self {
        LstmRef {
            w: store.get(p.w).clone(),
            u: store.get(p.u).clone(),
            b: store.get(p.b).data().to_vec(),
            d: p.hidden_dim,
        }
    }

    /// Pre-activation of packed column `col` for input `x` and recurrent `h`.
    fn pre(&self, col: usize, x: &[f64], h: &[f64]) -> f64 {
        let mut s = self.b[col];
        for (i, xi) in x.iter().enumerate() {
            s += xi * self.w.at(&[i, col]);
        }
        for (k, hk) in h.iter().enumerate() {
            s += hk * self.u.at(&[k, col]);
        }
        s
    }

    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut h2 = vec![0.0; d];
        let mut c2 = vec![0.0; d];
        for j in 0..d {
            let i = sigmoid(self.pre(j, x, h));
            let f = sigmoid(self.pre(d + j, x, h));
            let o = sigmoid(self.pre(2 * d + j, x, h));
            let u = self.pre(3 * d + j, x, h).tanh();
            c2[j] = i * u + f * c[j];
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    /// Hidden states indexed by time, sweeping forward or backward.
    pub fn run(&self, xs: &Mat, reverse: bool) -> Mat {
        let t = xs.len();
        let (mut h, mut c) = (vec![0.0; self.d], vec![0.0; self.d]);
        let mut out = vec![Vec::new(); t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for s in order {
            (h, c) = self.step(&xs[s], &h, &c);
            out[s] = h.clone();
        }
        out
    }

    /// Child-sum node: `(h_j, c_j)` from the node's input and its children's
    /// states, evaluated recursively from `node`.
    pub fn tree_node(&self, xs: &Mat, tree: &DepTree, node: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let kids: Vec<(Vec<f64>, Vec<f64>)> = tree.children(node).iter().map(|&k| self.tree_node(xs, tree, k)).collect();
        let mut h_sum = vec![0.0; d];
        for (hk, _) in &kids {
            for j in 0..d {
                h_sum[j] += hk[j];
            }
        }
        let x = &xs[node];
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        for j in 0..d {
            let i = sigmoid(self.pre(j, x, &h_sum));
            let o = sigmoid(self.pre(2 * d + j, x, &h_sum));
            let u = self.pre(3 * d + j, x, &h_sum).tanh();
            let mut cj = i * u;
            for (hk, ck) in &kids {
                cj += sigmoid(self.pre(d + j, x, hk)) * ck[j];
            }
            c[j] = cj;
            h[j] = o * cj.tanh();
        }
        (h, c)
    }
}

pub fn lstm_step_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let input = rng.gen_range(1..7);
        let d = rng.gen_range(1..6);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, &mut rng, "l", input, d).unwrap();
        randomize(&mut store, &mut rng);
        let x = rand_mat(&mut rng, 1, input);
        let h = rand_mat(&mut rng, 1, d);
        let c = rand_mat(&mut rng, 1, d);
        let mut g = Graph::new();
        let (xv, hv, cv) = (g.constant(to_tensor(&x)), g.constant(to_tensor(&h)), g.constant(to_tensor(&c)));
        let (h2, c2) = sentpair::bilstm::lstm_step(&mut g, &store, &p, xv, hv, cv).unwrap();
        let (rh, rc) = LstmRef::from_store(&store, &p).step(&x[0], &h[0], &c[0]);
        worst = worst.max(vec_diff(g.value(h2).data(), &rh)).max(vec_diff(g.value(c2).data(), &rc));
    }
    worst
}

/// Random rooted tree over `n` nodes as 1-based CoNLL heads.
pub fn random_heads(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut heads = vec![0; n];
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        heads[order[k]] = parent + 1;
    }
    heads
}

pub fn tree_node_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let input = rng.gen_range(1..6);
        let d = rng.gen_range(1..5);
        let n = rng.gen_range(1..9);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, &mut rng, "t", input, d).unwrap();
        randomize(&mut store, &mut rng);
        let tree = DepTree::from_heads(&random_heads(&mut rng, n)).unwrap();
        let xs = rand_mat(&mut rng, n, input);
        let mut g = Graph::new();
        let xv = g.constant(to_tensor(&xs));
        let root = sentpair::bilstm::tree_lstm_encode(&mut g, &store, &p, xv, &tree).unwrap();
        let (rh, _) = LstmRef::from_store(&store, &p).tree_node(&xs, &tree, tree.root());
        worst = worst.max(vec_diff(g.value(root).data(), &rh));
    }
    worst
}

/// Whole-encoder reference: sentence matrix rows `[h→_T | h←_1]` per layer.
pub fn encoder_ref(store: &ParamStore, enc: &Encoder, words: &Mat, chars: &Mat) -> Mat {
    let t = words.len();
    let cfg = &enc.config;
    let mut fin = if cfg.bidirectional {
        words.clone()
    } else {
        words.iter().zip(chars).map(|(w, c)| [w.as_slice(), c.as_slice()].concat()).collect()
    };
    let mut bin = chars.clone();
    let mut rows = Vec::new();
    for l in 0..cfg.layers {
        let fs = LstmRef::from_store(store, &enc.forward[l]).run(&fin, false);
        let mut row = fs[t - 1].clone();
        if cfg.bidirectional {
            let bs = LstmRef::from_store(store, &enc.backward[l]).run(&bin, true);
            row.extend_from_slice(&bs[0]);
            match cfg.upper_input {
                UpperInput::SameDirection => {
                    fin = fs;
                    bin = bs;
                }
                UpperInput::BothDirections => {
                    let both: Mat = fs.iter().zip(&bs).map(|(f, b)| [f.as_slice(), b.as_slice()].concat()).collect();
                    fin = both.clone();
                    bin = both;
                }
            }
        } else {
            fin = fs;
        }
        rows.push(row);
    }
    rows
}

pub fn encoder_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let cfg = EncoderConfig {
            word_dim: rng.gen_range(1..5),
            char_dim: rng.gen_range(1..5),
            memory_dim: rng.gen_range(1..4),
            layers: rng.gen_range(1..4),
            bidirectional: trial % 3 != 2,
            upper_input: if trial % 2 == 0 { UpperInput::BothDirections } else { UpperInput::SameDirection },
        };
        let t = rng.gen_range(1..5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, &cfg).unwrap();
        randomize(&mut store, &mut rng);
        let words = rand_mat(&mut rng, t, cfg.word_dim);
        let chars = rand_mat(&mut rng, t, cfg.char_dim);
        let mut g = Graph::new();
        let (wv, cv) = (g.constant(to_tensor(&words)), g.constant(to_tensor(&chars)));
        let m = enc.encode(&mut g, &store, wv, cv).unwrap();
        worst = worst.max(max_abs_diff(&from_tensor(g.value(m)), &encoder_ref(&store, &enc, &words, &chars)));
    }
    worst
}

// ---- matching planes ----

pub fn fp_ref(m1: &Mat, m2: &Mat, w: &Tensor, b: &[f64]) -> [Mat; 3] {
    let n = m1.len();
    let cols = m1[0].len();
    let mut mul = vec![vec![0.0; cols]; n];
    let mut diff = vec![vec![0.0; cols]; n];
    let mut conv = vec![vec![0.0; cols]; n];
    for r in 0..n {
        for j in 0..cols {
            mul[r][j] = m1[r][j] * m2[r][j];
            diff[r][j] = (m1[r][j] - m2[r][j]).abs();
        }
        // width-2 kernel: tap 0 sees sentence A's row, tap 1 sentence B's
        for f in 0..cols {
            let mut s = b[f];
            for i in 0..cols {
                s += w.at(&[f, 0, i]) * m1[r][i] + w.at(&[f, 1, i]) * m2[r][i];
            }
            conv[r][f] = s.tanh();
        }
    }
    [mul, diff, conv]
}

pub fn fp_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..5);
        let w = rng.gen_range(1..7);
        let mut store = ParamStore::new();
        let matching = Matching::new(&mut store, &mut rng, w).unwrap();
        randomize(&mut store, &mut rng);
        let m1 = rand_mat(&mut rng, n, w);
        let m2 = rand_mat(&mut rng, n, w);
        let mut g = Graph::new();
        let (a, b) = (g.constant(to_tensor(&m1)), g.constant(to_tensor(&m2)));
        let ft = matching.assemble(&mut g, &store, a, b).unwrap();
        let want = fp_ref(&m1, &m2, store.get(matching.fp3.w), store.get(matching.fp3.b).data());
        let stacked = g.value(ft.tensor);
        assert_eq!(stacked.shape(), &[3, n, w]);
        for p in 0..3 {
            worst = worst.max(max_abs_diff(&from_tensor(g.value(ft.planes[p])), &want[p]));
            for r in 0..n {
                for j in 0..w {
                    worst = worst.max((stacked.at(&[p, r, j]) - want[p][r][j]).abs());
                }
            }
        }
    }
    worst
}

// ---- match CNN stages ----

fn tanh_mat(m: Mat) -> Mat {
    m.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect()
}

pub fn match_cnn_ref(store: &ParamStore, cnn: &MatchCnn, planes: &[Mat; 3]) -> (Mat, Mat) {
    let n = planes[0].len();
    let s1 = if cnn.stage1.len() == 1 {
        let folded: Mat = (0..n).map(|r| planes.iter().flat_map(|p| p[r].iter().copied()).collect()).collect();
        let c = &cnn.stage1[0];
        conv1d_ref(&folded, store.get(c.w), store.get(c.b).data(), 1)
    } else {
        let outs: Vec<Mat> = cnn
            .stage1
            .iter()
            .zip(planes)
            .map(|(c, p)| conv1d_ref(p, store.get(c.w), store.get(c.b).data(), 1))
            .collect();
        (0..outs[0].len()).map(|r| outs.iter().flat_map(|o| o[r].iter().copied()).collect()).collect()
    };
    let s1 = tanh_mat(s1);
    let c = &cnn.stage2;
    let s2 = tanh_mat(conv1d_ref(&s1, store.get(c.w), store.get(c.b).data(), 1));
    (s1, s2)
}

pub fn match_cnn_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let per_plane = trial % 4 == 3;
        let cfg = TopologyConfig {
            topology: if trial % 2 == 0 { Topology::I } else { Topology::II },
            stage1_frames: 3 * rng.gen_range(1..4),
            stage2_frames: rng.gen_range(1..6),
            per_plane_stage1: per_plane,
        };
        let n = rng.gen_range(2..6);
        let w = rng.gen_range(1..5);
        let mut store = ParamStore::new();
        let matching = Matching::new(&mut store, &mut rng, w).unwrap();
        let cnn = MatchCnn::new(&mut store, &mut rng, &cfg, w).unwrap();
        randomize(&mut store, &mut rng);
        let m1 = rand_mat(&mut rng, n, w);
        let m2 = rand_mat(&mut rng, n, w);
        let mut g = Graph::new();
        let (a, b) = (g.constant(to_tensor(&m1)), g.constant(to_tensor(&m2)));
        let ft = matching.assemble(&mut g, &store, a, b).unwrap();
        let (s1, s2) = cnn.stages(&mut g, &store, &ft).unwrap();
        let x_h = cnn.match_features(&mut g, &store, &ft).unwrap();
        let planes = [0, 1, 2].map(|p| from_tensor(g.value(ft.planes[p])));
        let (r1, r2) = match_cnn_ref(&store, &cnn, &planes);
        let flat: Vec<f64> = r2.iter().flatten().copied().collect();
        assert_eq!(flat.len(), cnn.output_dim(n).unwrap());
        worst = worst
            .max(max_abs_diff(&from_tensor(g.value(s1)), &r1))
            .max(max_abs_diff(&from_tensor(g.value(s2)), &r2))
            .max(vec_diff(g.value(x_h).data(), &flat));
    }
    worst
}
