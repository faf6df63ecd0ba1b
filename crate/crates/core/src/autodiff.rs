//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so the tape is always topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Graphs are cheap to build and
//! are meant to be thrown away after each example.
//!
//! There is no broadcasting: binary elementwise ops need identical shapes. The
//! only mixed-shape ops are [`Graph::affine`] (scalar with tensor) and
//! [`Graph::linear`] (row-wise bias).

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Concat { axis: usize, inputs: Vec<Var> },
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so all uses accumulate into one gradient buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.param(id);
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: p.trainable,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                detail: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `x·w + b` with `b` (length `n`) added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("linear", x)?;
        let (k2, n) = self.matrix_dims("linear", w)?;
        if k != k2 || self.value(b).len() != n {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![m, k],
                rhs: vec![k2, n, self.value(b).len()],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let bias = self.value(b).data();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Linear(x, w, b), rg))
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("map keeps shape");
        let rg = self.rg(&[a]);
        self.push(t, mk, rg)
    }

    /// `scale·a + shift` elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    fn check_finite(&self, op: &str, a: Var) -> Result<()> {
        if !self.value(a).is_finite() {
            return Err(Error::NonFinite(format!("{op} input")));
        }
        Ok(())
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("axis {axis} range {start}..{} of {s:?}", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { input: a, axis, start }, rg))
    }

    /// Row `r` of a matrix, as a `1 × cols` matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice(a, 0, r, 1)
    }

    /// Max pooling over the rows of a `T × F` matrix with the given window and
    /// stride. Gradient goes to the first maximal row on ties.
    pub fn max_pool(&mut self, a: Var, width: usize, stride: usize) -> Result<Var> {
        let (t, f) = self.matrix_dims("max_pool", a)?;
        if width == 0 || stride == 0 || t < width {
            return Err(Error::InvalidShape {
                op: "max_pool",
                detail: format!("window {width} stride {stride} over {t} rows"),
            });
        }
        let rows = (t - width) / stride + 1;
        let x = self.value(a).data();
        let mut data = vec![0.0; rows * f];
        let mut argmax = vec![0; rows * f];
        for r in 0..rows {
            for j in 0..f {
                let mut best = r * stride * f + j;
                for i in r * stride + 1..r * stride + width {
                    if x[i * f + j] > x[best] {
                        best = i * f + j;
                    }
                }
                data[r * f + j] = x[best];
                argmax[r * f + j] = best;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rows, f, data)?, Op::MaxPool { input: a, argmax }, rg))
    }

    /// Columnwise maximum over all rows: `T × F → 1 × F`.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var> {
        let (t, _) = self.matrix_dims("max_over_time", a)?;
        self.max_pool(a, t, 1)
    }

    /// Temporal convolution. `x` is `T × in` (time by input frames), `w` is
    /// `out × width × in`, `b` has `out` entries. The result has
    /// `(T − width) / stride + 1` rows and `out` columns.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (t, fin) = self.matrix_dims("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[2] != fin || self.value(b).len() != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![t, fin],
                rhs: ws,
            });
        }
        let (fout, width) = (ws[0], ws[1]);
        if stride == 0 || t < width {
            return Err(Error::InvalidShape {
                op: "conv1d",
                detail: format!("{t} time steps cannot fit a kernel of width {width}"),
            });
        }
        let rows = (t - width) / stride + 1;
        let span = width * fin;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; rows * fout];
        let sparse = xd.iter().filter(|v| **v != 0.0).count() * 4 < xd.len();
        let mut nz: Vec<(usize, f64)> = Vec::new();
        for r in 0..rows {
            let window = &xd[r * stride * fin..r * stride * fin + span];
            if sparse {
                nz.clear();
                nz.extend(window.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)));
            }
            for f in 0..fout {
                let filt = &wd[f * span..(f + 1) * span];
                let s = if sparse {
                    nz.iter().map(|&(i, v)| filt[i] * v).sum::<f64>()
                } else {
                    tensor::dot(filt, window)
                };
                out[r * fout + f] = s + bd[f];
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::matrix(rows, fout, out)?, Op::Conv1d { x, w, b, stride }, rg))
    }

    /// Reverse sweep from a one-element output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let v = self.value(output);
        if v.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("output must be a scalar, got {:?}", v.shape()),
            });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_with(output, Tensor::filled(v.shape(), 1.0))
    }

    /// Reverse sweep with an explicit seed gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.into_data());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // lazily allocated accumulator for an input that requires grad
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(ga) = acc!(*a) {
                    tensor::matmul_bt_acc(g, bv.data(), ga, m, k, n);
                }
                if let Some(gb) = acc!(*b) {
                    tensor::matmul_at_acc(av.data(), g, gb, m, k, n);
                }
                if let Op::Linear(_, _, bias) = &node.op {
                    if let Some(gbias) = acc!(*bias) {
                        for row in g.chunks(n) {
                            for (o, v) in gbias.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = acc!(v) {
                        ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::Abs(a) => {
                let av = self.nodes[a.0].value.clone();
                if let Some(ga) = acc!(*a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av.data()) {
                        // subgradient 0 at 0
                        let s = if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *o += s * x;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = acc!(*a) {
                    for ((go, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let s: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, x), y) in go.iter_mut().zip(gr).zip(yr) {
                            *o += y * (x - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = acc!(*a) {
                    for ((go, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let s: f64 = gr.iter().sum();
                        for ((o, x), y) in go.iter_mut().zip(gr).zip(yr) {
                            *o += x - y.exp() * s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Concat { axis, inputs } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if let Some(gv) = acc!(v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            for (d, s) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, ext, inner) = split_axis(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = acc!(*input) {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(ga) = acc!(*input) {
                    for (&src, x) in argmax.iter().zip(g) {
                        ga[src] += x;
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (_, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let ws = self.shape(*w);
                let (fout, width) = (ws[0], ws[1]);
                let span = width * fin;
                let rows = node.value.shape()[0];
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                let xd = xv.data();
                if let Some(gw) = acc!(*w) {
                    let sparse = xd.iter().filter(|v| **v != 0.0).count() * 4 < xd.len();
                    for r in 0..rows {
                        let window = &xd[r * stride * fin..r * stride * fin + span];
                        let nz: Vec<(usize, f64)> = if sparse {
                            window.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect()
                        } else {
                            Vec::new()
                        };
                        for f in 0..fout {
                            let gv = g[r * fout + f];
                            if gv == 0.0 {
                                continue;
                            }
                            let dst = &mut gw[f * span..(f + 1) * span];
                            if sparse {
                                for &(i, v) in &nz {
                                    dst[i] += gv * v;
                                }
                            } else {
                                for (d, v) in dst.iter_mut().zip(window) {
                                    *d += gv * v;
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let wd = wv.data();
                    for r in 0..rows {
                        let dst = &mut gx[r * stride * fin..r * stride * fin + span];
                        for f in 0..fout {
                            let gv = g[r * fout + f];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, wv) in dst.iter_mut().zip(&wd[f * span..(f + 1) * span]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }
}

/// Result of a reverse sweep: one optional buffer per graph node. Nodes that
/// do not require gradient, or that the output does not depend on, have none.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the parameter leaves, scaled by `scale`, indexed by
    /// parameter id. `num_params` is the size of the owning store.
    pub fn param_grads(&self, graph: &Graph, num_params: usize, scale: f64) -> ParamGrads {
        let mut out = ParamGrads::with_len(num_params);
        self.accumulate_params(graph, &mut out, scale);
        out
    }

    pub fn accumulate_params(&self, graph: &Graph, out: &mut ParamGrads, scale: f64) {
        for (v, id) in graph.param_leaves() {
            if let Some(g) = self.get(v) {
                out.accumulate(id, g, scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn fixed_points_and_relu() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let th = g.tanh(z);
        let sg = g.sigmoid(z);
        assert_eq!(g.value(th).item(), 0.0);
        assert_eq!(g.value(sg).item(), 0.5);
        let x = g.constant(Tensor::vector(vec![-2., 0., 3.]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 3.]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0., 0., 0.]).unwrap());
        let s = g.softmax(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000., 0.]).unwrap());
        let s = g.softmax(x).unwrap();
        let d = g.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN, 0.]).unwrap());
        assert!(matches!(g.softmax(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_and_reshape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1., 2.]).unwrap());
        let b = g.constant(Tensor::vector(vec![3.]).unwrap());
        let c = g.concat(0, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3.]);

        let m = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let r = g.reshape(m, &[3, 2]).unwrap();
        assert_eq!(g.value(r).data(), &[1., 2., 3., 4., 5., 6.]);
        assert!(g.reshape(m, &[4, 2]).is_err());
        let bad = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.concat(0, &[m, bad]).is_err());
    }

    #[test]
    fn concat_then_slice_routes_gradient_exactly() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.variable(t(&[2, 3], &[5., 6., 7., 8., 9., 10.]));
        let c = g.concat(1, &[a, b]).unwrap();
        let sa = g.slice(c, 1, 0, 2).unwrap();
        let sb = g.slice(c, 1, 2, 3).unwrap();
        let wa = g.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let wb = g.constant(t(&[2, 3], &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]));
        let pa = g.mul(sa, wa).unwrap();
        let pb = g.mul(sb, wb).unwrap();
        let ta = g.sum(pa);
        let tb = g.sum(pb);
        let total = g.add(ta, tb).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(a).unwrap(), g.value(wa).data());
        assert_eq!(grads.get(b).unwrap(), g.value(wb).data());
    }

    #[test]
    fn max_over_time_columnwise() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1., 5., 3., 2.]));
        let m = g.max_over_time(x).unwrap();
        assert_eq!(g.value(m).data(), &[3., 5.]);
        let one = g.constant(t(&[1, 3], &[4., -1., 2.]));
        let m = g.max_over_time(one).unwrap();
        assert_eq!(g.value(m).data(), &[4., -1., 2.]);
    }

    #[test]
    fn max_ties_route_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3, 1], &[2., 2., 1.]));
        let m = g.max_over_time(x).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1., 0., 0.]);
    }

    #[test]
    fn constants_never_get_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1., 2.]).unwrap());
        let x = g.variable(Tensor::vector(vec![3., 4.]).unwrap());
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1., 2.]);
    }

    #[test]
    fn frozen_params_enter_as_constants() {
        let mut store = ParamStore::new();
        let frozen = store.add("emb", Tensor::vector(vec![1., 2.]).unwrap(), false).unwrap();
        let live = store.add("w", Tensor::vector(vec![3., 4.]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let e = g.param(&store, frozen);
        let w = g.param(&store, live);
        assert_eq!(g.param(&store, live), w);
        let p = g.mul(e, w).unwrap();
        let s = g.sum(p);
        let pg = g.backward(s).unwrap().param_grads(&g, store.len(), 1.0);
        assert!(pg.get(frozen).is_none());
        assert_eq!(pg.get(live).unwrap(), &[1., 2.]);
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let w = g.variable(t(&[3, 2], &[1., 2., 3., -1., 0.5, 0.25]));
        let y = g.matmul(x, w).unwrap();
        let z = g.tanh(y);
        let s = g.sum(z);
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn conv1d_toy_example() {
        // one filter [1, -1] over a one-symbol alphabet, width 2, relu
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[2., 1., 3.]));
        let w = g.constant(t(&[1, 2, 1], &[1., -1.]));
        let b = g.constant(Tensor::vector(vec![0.]).unwrap());
        let c = g.conv1d(x, w, b, 1).unwrap();
        let r = g.relu(c);
        assert_eq!(g.value(r).data(), &[1., 0.]);
        let short = g.constant(t(&[1, 1], &[1.]));
        assert!(g.conv1d(short, w, b, 1).is_err());
    }
}
