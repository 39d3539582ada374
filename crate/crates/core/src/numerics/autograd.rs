//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every node that depends on a parameter.
//! Constants never receive gradients, so inputs such as noisy latents cost
//! nothing on the way back.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-row rotation tables used by [`Graph::rope`].
#[derive(Debug, Clone)]
pub struct RopeTable {
    /// `[rows, head_dim / 2]` cosines, one per channel pair.
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub head_dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var),
    Rope(Var, Arc<RopeTable>),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    Scatter {
        a: Var,
        entries: Arc<Vec<(usize, usize, f64)>>,
    },
    Mse {
        a: Var,
        target: Tensor,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Op-specific saved state (row inverse std for layer norm).
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter name to graph leaf.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    if t.shape().len() == 1 {
        (1, t.shape()[0])
    } else {
        (t.rows(), t.numel() / t.rows())
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_aux(value, op, needs_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds every tensor of `params` as a trainable leaf.
    pub fn bind<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
    ) -> Bindings {
        let vars = params
            .into_iter()
            .map(|(name, t)| (name.clone(), self.param(t.clone())))
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: [{m},{k}] x {}[{br},{bc}]",
                if trans_b { "T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_op(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (n, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!(
                "row broadcast needs [1,{c}], got [{rr},{rc}]"
            )));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            out.extend(
                av[r * c..(r + 1) * c]
                    .iter()
                    .zip(rv)
                    .map(|(&x, &y)| f(x, y)),
            );
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::matrix(n, c, out)?, op, ng))
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::Offset(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(a);
        let value = Tensor::matrix(n, c, out).expect("shape preserved");
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        let mut rstds = Vec::with_capacity(n);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        let value = Tensor::matrix(n, c, out).expect("shape preserved");
        self.push_aux(value, Op::LayerNorm(a), ng, rstds)
    }

    /// Rotates adjacent channel pairs of every head by per-row angles.
    pub fn rope(&mut self, a: Var, table: Arc<RopeTable>) -> Result<Var> {
        let (n, c) = self.shape(a);
        let hd = table.head_dim;
        if hd == 0 || c % hd != 0 || table.cos.len() != n * hd / 2 {
            return Err(Error::Shape(format!(
                "rope table for head_dim {hd} does not fit [{n},{c}]"
            )));
        }
        let mut out = self.value(a).data().to_vec();
        rotate_rows(&mut out, c, &table, false);
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Rope(a, table), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&av[r * c + start..r * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(n, len, out)?, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::Shape("concat_cols needs equal row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(n, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Builds a matrix whose row `i` is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let c = self.shape(sources[0]).1;
        if sources.iter().any(|&s| self.shape(s).1 != c) {
            return Err(Error::Shape("gather_rows needs equal column counts".into()));
        }
        if index.is_empty() {
            return Err(Error::Shape("gather_rows with empty index".into()));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &(s, r) in &index {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::Shape(format!("gather source {s} missing")))?;
            if r >= self.shape(*src).0 {
                return Err(Error::Shape(format!("gather row {r} out of range")));
            }
            out.extend_from_slice(self.value(*src).row(r));
        }
        let ng = sources.iter().any(|&s| self.ng(s));
        let value = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                sources: sources.to_vec(),
                index,
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let index = parts
            .iter()
            .enumerate()
            .flat_map(|(s, &p)| (0..self.shape(p).0).map(move |r| (s, r)))
            .collect();
        self.gather_rows(parts, index)
    }

    /// Weighted scatter over flat indices: `out[dst] += w · a[src]`.
    pub fn scatter(
        &mut self,
        a: Var,
        out_shape: &[usize],
        entries: Arc<Vec<(usize, usize, f64)>>,
    ) -> Result<Var> {
        let mut out = Tensor::zeros(out_shape);
        let av = self.value(a).data();
        {
            let od = out.data_mut();
            for &(src, dst, w) in entries.iter() {
                if src >= av.len() || dst >= od.len() {
                    return Err(Error::Shape("scatter index out of range".into()));
                }
                od[dst] += w * av[src];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Scatter { a, entries }, ng))
    }

    /// Mean squared error against a constant target; `[1,1]` result.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.numel() != target.numel() {
            return Err(Error::Shape(format!(
                "mse over {} vs {} elements",
                av.numel(),
                target.numel()
            )));
        }
        let n = av.numel() as f64;
        let loss = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                a,
                target: target.clone(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.shape(*a);
                let n = node.value.cols();
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let ga = grad_buf(grads, self, *a);
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    gemm(m, n, k, g, false, bv, !trans_b, ga, 1.0);
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let gb = grad_buf(grads, self, *b);
                    if *trans_b {
                        // dB = dCᵀ · A, shape [n, k]
                        gemm(n, m, k, g, true, av, false, gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC, shape [k, n]
                        gemm(k, m, n, av, true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, self, *a, |i| g[i]);
                accumulate(grads, self, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, |i| g[i]);
                accumulate(grads, self, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                accumulate(grads, self, *a, |i| g[i] * bv[i]);
                accumulate(grads, self, *b, |i| g[i] * av[i]);
            }
            Op::AddRow(a, row) => {
                let c = node.value.cols();
                accumulate(grads, self, *a, |i| g[i]);
                if self.ng(*row) {
                    let gr = grad_buf(grads, self, *row);
                    for chunk in g.chunks(c) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = node.value.cols();
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                accumulate(grads, self, *a, |i| g[i] * rv[i % c]);
                if self.ng(*row) {
                    let gr = grad_buf(grads, self, *row);
                    for (gchunk, achunk) in g.chunks(c).zip(av.chunks(c)) {
                        for j in 0..c {
                            gr[j] += gchunk[j] * achunk[j];
                        }
                    }
                }
            }
            Op::Scale(a, s) => accumulate(grads, self, *a, |i| g[i] * s),
            Op::Offset(a) => accumulate(grads, self, *a, |i| g[i]),
            Op::Silu(a) => {
                let av = self.value(*a).data();
                accumulate(grads, self, *a, |i| {
                    let s = sigmoid(av[i]);
                    g[i] * s * (1.0 + av[i] * (1.0 - s))
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                accumulate(grads, self, *a, |i| g[i] * gelu_grad(av[i]));
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dots = Vec::with_capacity(y.len() / c);
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    dots.push(yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>());
                }
                accumulate(grads, self, *a, |i| y[i] * (g[i] - dots[i / c]));
            }
            Op::LayerNorm(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let rstd = &node.aux;
                let mut means = Vec::with_capacity(rstd.len() * 2);
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    means.push((mg, mgy));
                }
                accumulate(grads, self, *a, |i| {
                    let (mg, mgy) = means[i / c];
                    rstd[i / c] * (g[i] - mg - y[i] * mgy)
                });
            }
            Op::Rope(a, table) => {
                if self.ng(*a) {
                    let c = node.value.cols();
                    let mut back = g.to_vec();
                    rotate_rows(&mut back, c, table, true);
                    accumulate(grads, self, *a, |i| back[i]);
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let len = node.value.cols();
                    let c = self.shape(*a).1;
                    let ga = grad_buf(grads, self, *a);
                    for (r, chunk) in g.chunks(len).enumerate() {
                        for (acc, v) in ga[r * c + start..r * c + start + len].iter_mut().zip(chunk)
                        {
                            *acc += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.ng(p) {
                        let gp = grad_buf(grads, self, p);
                        for (r, chunk) in gp.chunks_mut(pc).enumerate() {
                            for (acc, v) in chunk.iter_mut().zip(&g[r * total + offset..]) {
                                *acc += v;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Gather { sources, index } => {
                let c = node.value.cols();
                for (s, &src) in sources.iter().enumerate() {
                    if !self.ng(src) {
                        continue;
                    }
                    let gs = grad_buf(grads, self, src);
                    for (i, &(si, r)) in index.iter().enumerate() {
                        if si == s {
                            for (acc, v) in gs[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                            {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Scatter { a, entries } => {
                if self.ng(*a) {
                    let ga = grad_buf(grads, self, *a);
                    for &(src, dst, w) in entries.iter() {
                        ga[src] += w * g[dst];
                    }
                }
            }
            Op::Mse { a, target } => {
                let av = self.value(*a).data();
                let t = target.data();
                let scale = 2.0 * g[0] / av.len() as f64;
                accumulate(grads, self, *a, |i| scale * (av[i] - t[i]));
            }
            Op::Sum(a) => accumulate(grads, self, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                accumulate(grads, self, *a, |_| g[0] / n);
            }
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], g: &Graph, v: Var) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(g.nodes[v.0].value.shape()))
        .data_mut()
}

fn accumulate(grads: &mut [Option<Tensor>], g: &Graph, v: Var, f: impl Fn(usize) -> f64) {
    if !g.ng(v) {
        return;
    }
    let buf = grad_buf(grads, g, v);
    for (i, acc) in buf.iter_mut().enumerate() {
        *acc += f(i);
    }
}

fn rotate_rows(data: &mut [f64], cols: usize, table: &RopeTable, inverse: bool) {
    let half = table.head_dim / 2;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let cos = &table.cos[r * half..(r + 1) * half];
        let sin = &table.sin[r * half..(r + 1) * half];
        for head in row.chunks_mut(table.head_dim) {
            for p in 0..half {
                let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                let x0 = head[2 * p];
                let x1 = head[2 * p + 1];
                head[2 * p] = x0 * c - x1 * s;
                head[2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let th = gelu_inner(x).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
