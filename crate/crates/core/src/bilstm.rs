//! Stacked bidirectional LSTM with asymmetric inputs, plus the child-sum
//! tree-LSTM baseline.
//!
//! Layer 1 runs forward over pre-trained word vectors and backward over
//! character vectors. The sentence matrix has one row per layer holding that
//! layer's terminal forward state (after the last token) joined with its
//! terminal backward state (after the first token).
//!
//! Gate pre-activations are packed as `[i | f | o | u]` column blocks, so one
//! LSTM direction stores `W: in × 4d`, `U: d × 4d` and `b: 4d`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GATES: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    /// Forget-gate bias starts at 1, the other biases at 0.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        let d = hidden_dim;
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[input_dim, GATES * d], input_dim, d),
            true,
        )?;
        let u = store.add(format!("{name}.u"), glorot_uniform(rng, &[d, GATES * d], d, d), true)?;
        let mut bias = vec![0.0; GATES * d];
        bias[d..2 * d].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), Tensor::vector(bias)?, true)?;
        Ok(LstmParams {
            w,
            u,
            b,
            input_dim,
            hidden_dim,
        })
    }

    /// `X·W + b` for every row of `xs` at once.
    pub fn input_projection(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(xs, w, b)
    }

    fn zeros(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[1, self.hidden_dim]))
    }
}

/// Gates and state update from packed pre-activations `pre` (`1 × 4d`).
fn lstm_cell(g: &mut Graph, pre: Var, c_prev: Var, d: usize) -> Result<(Var, Var)> {
    let i = g.slice(pre, 1, 0, d)?;
    let i = g.sigmoid(i);
    let f = g.slice(pre, 1, d, d)?;
    let f = g.sigmoid(f);
    let o = g.slice(pre, 1, 2 * d, d)?;
    let o = g.sigmoid(o);
    let u = g.slice(pre, 1, 3 * d, d)?;
    let u = g.tanh(u);
    let iu = g.mul(i, u)?;
    let fc = g.mul(f, c_prev)?;
    let c = g.add(iu, fc)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// One LSTM transition for a single input row `x` (`1 × in`).
pub fn lstm_step(g: &mut Graph, store: &ParamStore, p: &LstmParams, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let xp = p.input_projection(g, store, x)?;
    step_projected(g, store, p, xp, h_prev, c_prev)
}

fn step_projected(g: &mut Graph, store: &ParamStore, p: &LstmParams, xp: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let u = g.param(store, p.u);
    let hu = g.matmul(h_prev, u)?;
    let pre = g.add(xp, hu)?;
    lstm_cell(g, pre, c_prev, p.hidden_dim)
}

/// Runs one direction over the rows of `xs` (`T × in`) from zero state.
/// Returns hidden states indexed by time step, whichever way the sweep went.
pub fn run_direction(g: &mut Graph, store: &ParamStore, p: &LstmParams, xs: Var, reverse: bool) -> Result<Vec<Var>> {
    let t = g.shape(xs)[0];
    let proj = p.input_projection(g, store, xs)?;
    let mut h = p.zeros(g);
    let mut c = p.zeros(g);
    let mut states = vec![h; t];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t).rev()) } else { Box::new(0..t) };
    for step in order {
        let xp = g.row(proj, step)?;
        (h, c) = step_projected(g, store, p, xp, h, c)?;
        states[step] = h;
    }
    Ok(states)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpperInput {
    /// Each upper-layer direction reads the same direction's states below.
    SameDirection,
    /// Each upper-layer direction reads both directions' states below, joined
    /// as `[forward | backward]`.
    #[default]
    BothDirections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub memory_dim: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub upper_input: UpperInput,
}

/// Per-layer direction parameters. `backward` is empty for a unidirectional
/// stack, whose first layer reads word and char vectors side by side.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub forward: Vec<LstmParams>,
    pub backward: Vec<LstmParams>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `layers × (directions · d)`.
    pub matrix: Var,
    pub forward_states: Vec<Vec<Var>>,
    pub backward_states: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &EncoderConfig) -> Result<Self> {
        if config.layers == 0 || config.memory_dim == 0 {
            return Err(Error::Config("encoder needs at least one layer and a positive memory size".into()));
        }
        let d = config.memory_dim;
        let upper = match (config.bidirectional, config.upper_input) {
            (true, UpperInput::BothDirections) => 2 * d,
            _ => d,
        };
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for l in 0..config.layers {
            let (fin, bin) = match (l, config.bidirectional) {
                (0, true) => (config.word_dim, config.char_dim),
                (0, false) => (config.word_dim + config.char_dim, 0),
                _ => (upper, upper),
            };
            forward.push(LstmParams::new(store, rng, &format!("lstm.l{l}.fwd"), fin, d)?);
            if config.bidirectional {
                backward.push(LstmParams::new(store, rng, &format!("lstm.l{l}.bwd"), bin, d)?);
            }
        }
        Ok(Encoder {
            config: config.clone(),
            forward,
            backward,
        })
    }

    /// Row width of the sentence matrix.
    pub fn output_width(&self) -> usize {
        self.config.memory_dim * if self.config.bidirectional { 2 } else { 1 }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, words: Var, chars: Var) -> Result<Var> {
        Ok(self.encode_detailed(g, store, words, chars)?.matrix)
    }

    /// `words` is `T × word_dim`, `chars` is `T × char_dim`.
    pub fn encode_detailed(&self, g: &mut Graph, store: &ParamStore, words: Var, chars: Var) -> Result<EncoderOutput> {
        let (tw, tc) = (g.shape(words)[0], g.shape(chars)[0]);
        if tw != tc {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: g.shape(words).to_vec(),
                rhs: g.shape(chars).to_vec(),
            });
        }
        let t = tw;
        let mut forward_states: Vec<Vec<Var>> = Vec::new();
        let mut backward_states: Vec<Vec<Var>> = Vec::new();
        let mut rows = Vec::new();
        let (mut fin, mut bin) = if self.config.bidirectional {
            (words, chars)
        } else {
            (g.concat(1, &[words, chars])?, chars)
        };
        for l in 0..self.config.layers {
            let fs = run_direction(g, store, &self.forward[l], fin, false)?;
            let mut row = vec![fs[t - 1]];
            let fseq = if t == 1 { fs[0] } else { g.concat(0, &fs)? };
            if self.config.bidirectional {
                let bs = run_direction(g, store, &self.backward[l], bin, true)?;
                row.push(bs[0]);
                let bseq = if t == 1 { bs[0] } else { g.concat(0, &bs)? };
                (fin, bin) = match self.config.upper_input {
                    UpperInput::SameDirection => (fseq, bseq),
                    UpperInput::BothDirections => {
                        let both = g.concat(1, &[fseq, bseq])?;
                        (both, both)
                    }
                };
                backward_states.push(bs);
            } else {
                fin = fseq;
            }
            forward_states.push(fs);
            rows.push(if row.len() == 1 { row[0] } else { g.concat(1, &row)? });
        }
        let matrix = if rows.len() == 1 { rows[0] } else { g.concat(0, &rows)? };
        Ok(EncoderOutput {
            matrix,
            forward_states,
            backward_states,
        })
    }
}

/// Dependency tree over token positions `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepTree {
    root: usize,
    children: Vec<Vec<usize>>,
}

impl DepTree {
    /// From CoNLL-style heads: `heads[i]` is the 1-based head of token `i+1`,
    /// 0 for the root.
    pub fn from_heads(heads: &[usize]) -> Result<Self> {
        let n = heads.len();
        let mut children = vec![Vec::new(); n];
        let mut root = None;
        for (i, &h) in heads.iter().enumerate() {
            match h {
                0 if root.is_some() => return Err(Error::invalid("dependency tree has more than one root")),
                0 => root = Some(i),
                h if h > n => return Err(Error::invalid(format!("head {h} out of range for {n} tokens"))),
                h => children[h - 1].push(i),
            }
        }
        let root = root.ok_or_else(|| Error::invalid("dependency tree has no root"))?;
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while heads[cur] != 0 {
                cur = heads[cur] - 1;
                steps += 1;
                if steps > n {
                    return Err(Error::invalid("dependency tree contains a cycle"));
                }
            }
        }
        Ok(DepTree { root, children })
    }

    /// Parses the parenthesized form, e.g. `(2 (1) (3))`: a 1-based token
    /// index followed by its child subtrees.
    pub fn parse(s: &str) -> Result<Self> {
        let tokens: Vec<String> = s
            .replace('(', " ( ")
            .replace(')', " ) ")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let mut pos = 0;
        let mut edges: Vec<(usize, Option<usize>)> = Vec::new();
        parse_subtree(&tokens, &mut pos, None, &mut edges)?;
        if pos != tokens.len() {
            return Err(Error::invalid(format!("trailing input in tree {s:?}")));
        }
        let n = edges.len();
        let mut heads = vec![usize::MAX; n];
        for (node, parent) in edges {
            if node == 0 || node > n || heads[node - 1] != usize::MAX {
                return Err(Error::invalid(format!("tree {s:?} must use each index 1..={n} exactly once")));
            }
            heads[node - 1] = parent.unwrap_or(0);
        }
        Self::from_heads(&heads)
    }

    /// A path where token `j` is the only child of token `j + 1`.
    pub fn chain(n: usize) -> Self {
        let heads: Vec<usize> = (0..n).map(|i| if i + 1 == n { 0 } else { i + 2 }).collect();
        Self::from_heads(&heads).expect("chain is a tree")
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Children before parents.
    pub fn post_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![(self.root, false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                out.push(node);
            } else {
                stack.push((node, true));
                for &c in self.children[node].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }
}

impl fmt::Display for DepTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(t: &DepTree, n: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(f, "({}", n + 1)?;
            for &c in &t.children[n] {
                write!(f, " ")?;
                go(t, c, f)?;
            }
            write!(f, ")")
        }
        go(self, self.root, f)
    }
}

fn parse_subtree(tokens: &[String], pos: &mut usize, parent: Option<usize>, edges: &mut Vec<(usize, Option<usize>)>) -> Result<()> {
    let expect = |pos: usize, what: &str| -> Result<&String> {
        tokens
            .get(pos)
            .ok_or_else(|| Error::invalid(format!("unexpected end of tree, wanted {what}")))
    };
    if expect(*pos, "(")? != "(" {
        return Err(Error::invalid(format!("expected '(' at token {}", *pos)));
    }
    *pos += 1;
    let node: usize = expect(*pos, "index")?
        .parse()
        .map_err(|_| Error::invalid(format!("bad node index {:?}", tokens[*pos])))?;
    *pos += 1;
    edges.push((node, parent));
    loop {
        match expect(*pos, ")")?.as_str() {
            ")" => {
                *pos += 1;
                return Ok(());
            }
            "(" => parse_subtree(tokens, pos, Some(node), edges)?,
            other => return Err(Error::invalid(format!("unexpected {other:?} in tree"))),
        }
    }
}

/// Child-sum tree LSTM over the rows of `xs` (`T × in`), evaluated bottom-up.
/// Returns the root hidden state (`1 × d`).
///
/// `h̃_j = Σ_k h_k` feeds the input, output and update gates; each child gets
/// its own forget gate `f_jk = σ(W_f x_j + U_f h_k + b_f)`, and
/// `c_j = i_j ⊙ u_j + Σ_k f_jk ⊙ c_k`.
pub fn tree_lstm_encode(g: &mut Graph, store: &ParamStore, p: &LstmParams, xs: Var, tree: &DepTree) -> Result<Var> {
    let t = g.shape(xs)[0];
    if t != tree.len() {
        return Err(Error::invalid(format!("tree has {} nodes for {t} tokens", tree.len())));
    }
    let d = p.hidden_dim;
    let proj = p.input_projection(g, store, xs)?;
    let u = g.param(store, p.u);
    let mut states: Vec<Option<(Var, Var)>> = vec![None; t];
    for j in tree.post_order() {
        let xj = g.row(proj, j)?;
        let kids: Vec<(Var, Var)> = tree.children[j]
            .iter()
            .map(|&k| states[k].expect("post-order visits children first"))
            .collect();
        let h_sum = match kids.split_first() {
            None => p.zeros(g),
            Some((first, rest)) => {
                let mut s = first.0;
                for k in rest {
                    s = g.add(s, k.0)?;
                }
                s
            }
        };
        let hu = g.matmul(h_sum, u)?;
        let pre = g.add(xj, hu)?;
        let i = g.slice(pre, 1, 0, d)?;
        let i = g.sigmoid(i);
        let o = g.slice(pre, 1, 2 * d, d)?;
        let o = g.sigmoid(o);
        let uu = g.slice(pre, 1, 3 * d, d)?;
        let uu = g.tanh(uu);
        let mut c = g.mul(i, uu)?;
        for &(hk, ck) in &kids {
            let hku = g.matmul(hk, u)?;
            let pre_k = g.add(xj, hku)?;
            let f = g.slice(pre_k, 1, d, d)?;
            let f = g.sigmoid(f);
            let fc = g.mul(f, ck)?;
            c = g.add(c, fc)?;
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        states[j] = Some((h, c));
    }
    Ok(states[tree.root].expect("root visited").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(input: usize, d: usize, seed: u64) -> (ParamStore, LstmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = LstmParams::new(&mut store, &mut rng, "l", input, d).unwrap();
        (store, p)
    }

    #[test]
    fn zero_params_zero_state() {
        let (mut store, p) = setup(3, 2, 1);
        for id in [p.w, p.u, p.b] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.3, -1.0, 2.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let (h, c) = lstm_step(&mut g, &store, &p, x, z, z).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_carries_memory() {
        let (mut store, p) = setup(2, 2, 2);
        let mut b = vec![0.0; 8];
        b[0..2].iter_mut().for_each(|v| *v = -40.0); // input gate shut
        b[2..4].iter_mut().for_each(|v| *v = 40.0); // forget gate open
        *store.get_mut(p.b) = Tensor::vector(b).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.1, 0.2]).unwrap());
        let h0 = g.constant(Tensor::row(vec![0.05, -0.05]).unwrap());
        let c0 = g.constant(Tensor::row(vec![0.7, -1.3]).unwrap());
        let (_, c) = lstm_step(&mut g, &store, &p, x, h0, c0).unwrap();
        for (a, b) in g.value(c).data().iter().zip([0.7, -1.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn encoder(bidirectional: bool, upper: UpperInput) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = EncoderConfig {
            word_dim: 4,
            char_dim: 3,
            memory_dim: 5,
            layers: 2,
            bidirectional,
            upper_input: upper,
        };
        let e = Encoder::new(&mut store, &mut rng, &cfg).unwrap();
        (store, e)
    }

    fn inputs(g: &mut Graph, t: usize, seed: u64) -> (Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (
            g.constant(Tensor::matrix(t, 4, w).unwrap()),
            g.constant(Tensor::matrix(t, 3, c).unwrap()),
        )
    }

    #[test]
    fn single_token_sentence() {
        let (store, e) = encoder(true, UpperInput::SameDirection);
        let mut g = Graph::new();
        let (w, c) = inputs(&mut g, 1, 1);
        let m = e.encode(&mut g, &store, w, c).unwrap();
        assert_eq!(g.shape(m), &[2, 10]);
        assert!(g.value(m).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn length_mismatch_rejected() {
        let (store, e) = encoder(true, UpperInput::SameDirection);
        let mut g = Graph::new();
        let (w, _) = inputs(&mut g, 3, 1);
        let (_, c) = inputs(&mut g, 2, 1);
        assert!(e.encode(&mut g, &store, w, c).is_err());
    }

    #[test]
    fn variants_have_expected_widths() {
        for (bi, upper, width) in [
            (true, UpperInput::BothDirections, 10),
            (false, UpperInput::SameDirection, 5),
        ] {
            let (store, e) = encoder(bi, upper);
            let mut g = Graph::new();
            let (w, c) = inputs(&mut g, 4, 2);
            let m = e.encode(&mut g, &store, w, c).unwrap();
            assert_eq!(g.shape(m), &[2, width]);
            assert_eq!(e.output_width(), width);
        }
    }

    #[test]
    fn forward_prefix_states_unchanged_by_truncation() {
        let (store, e) = encoder(true, UpperInput::SameDirection);
        let mut g = Graph::new();
        let (w, c) = inputs(&mut g, 5, 3);
        let full = e.encode_detailed(&mut g, &store, w, c).unwrap();
        let w3 = g.slice(w, 0, 0, 3).unwrap();
        let c3 = g.slice(c, 0, 0, 3).unwrap();
        let pre = e.encode_detailed(&mut g, &store, w3, c3).unwrap();
        for l in 0..2 {
            for t in 0..3 {
                assert_eq!(g.value(full.forward_states[l][t]), g.value(pre.forward_states[l][t]));
            }
        }
    }

    #[test]
    fn tree_parse_and_validation() {
        let t = DepTree::parse("(2 (1) (3))").unwrap();
        assert_eq!(t.root(), 1);
        assert_eq!(t.children(1), &[0, 2]);
        assert_eq!(t.to_string(), "(2 (1) (3))");
        assert_eq!(t.post_order(), vec![0, 2, 1]);
        assert!(DepTree::parse("(2 (1) (1))").is_err());
        assert!(DepTree::parse("(2 (1)").is_err());
        assert!(DepTree::parse("(1) (2)").is_err());
        assert!(DepTree::from_heads(&[2, 1]).is_err()); // cycle, no root
        assert!(DepTree::from_heads(&[0, 0]).is_err()); // two roots
        assert!(DepTree::from_heads(&[0, 3, 2]).is_err()); // cycle off the root
        assert_eq!(DepTree::chain(3).to_string(), "(3 (2 (1)))");
    }

    #[test]
    fn tree_size_must_match_tokens() {
        let (store, p) = setup(3, 2, 4);
        let mut g = Graph::new();
        let xs = g.constant(Tensor::zeros(&[2, 3]));
        assert!(tree_lstm_encode(&mut g, &store, &p, xs, &DepTree::chain(3)).is_err());
    }

    #[test]
    fn leaf_equals_step_from_zero_state() {
        let (store, p) = setup(3, 4, 5);
        let mut g = Graph::new();
        let xs = g.constant(Tensor::row(vec![0.2, -0.4, 0.9]).unwrap());
        let root = tree_lstm_encode(&mut g, &store, &p, xs, &DepTree::chain(1)).unwrap();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let (h, _) = lstm_step(&mut g, &store, &p, xs, z, z).unwrap();
        assert_eq!(g.value(root), g.value(h));
    }
}
