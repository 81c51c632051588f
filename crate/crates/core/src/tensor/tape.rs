//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse.

use super::kernels::{axpy, dot, gelu, gelu_grad, gemm, softmax_in_place, View, ViewMut};
use super::{Tensor, LOG_EPS};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Structured attention mask over `[context rows | query rows]`.
///
/// Context rows attend to the whole context block. Each query row attends to
/// the context block and to itself, never to another query row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub context: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        qkv: Var,
        heads: usize,
        context: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanOf {
        x: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, Op::Leaf, false))
    }

    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, Op::Leaf, true))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::row_major(&self.node(a).value, k),
            View::row_major(&self.node(b).value, n),
            0.0,
            ViewMut::row_major(&mut out, n),
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.any_grad(&[a, b]);
        self.push(self.node(a).shape.clone(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.node(x).cols();
        if self.node(bias).value.len() != cols {
            return Err(shape_err("add_bias", &self.node(x).shape, &self.node(bias).shape));
        }
        let b = &self.node(bias).value;
        let mut out = self.node(x).value.clone();
        for row in out.chunks_mut(cols.max(1)) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let ng = self.any_grad(&[x, bias]);
        Ok(self.push(self.node(x).shape.clone(), out, Op::AddBias(x, bias), ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.node(x).value.iter().map(|v| f(*v)).collect();
        let ng = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), out, op, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    /// Normalizes each row to zero mean and unit (population) variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let nx = self.node(x);
        let (rows, cols) = (nx.rows(), nx.cols());
        if cols == 0 || nx.shape.is_empty() {
            return Err(shape_err("layer_norm", &nx.shape, &[]));
        }
        if self.node(gain).value.len() != cols || self.node(bias).value.len() != cols {
            return Err(shape_err("layer_norm", &nx.shape, &self.node(gain).shape));
        }
        let (g, b) = (&self.node(gain).value, &self.node(bias).value);
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &nx.value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let xh = (row[j] - mean) * rs;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            nx.shape.clone(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let cols = n.cols();
        if cols == 0 {
            return Err(shape_err("softmax", &n.shape, &[]));
        }
        let mut out = n.value.clone();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = n.needs_grad;
        Ok(self.push(n.shape.clone(), out, Op::Softmax(x), ng))
    }

    /// Multi-head scaled dot-product attention over a fused `[S x 3e]`
    /// query/key/value matrix, masked per `layout`. Returns `[S x e]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, layout: AttentionLayout) -> Result<Var> {
        let n = self.node(qkv);
        if n.shape.len() != 2 || !n.shape[1].is_multiple_of(3) || heads == 0 {
            return Err(shape_err("attention", &n.shape, &[heads]));
        }
        let (s, e3) = (n.shape[0], n.shape[1]);
        let e = e3 / 3;
        if e % heads != 0 || layout.context > s {
            return Err(shape_err("attention", &n.shape, &[heads, layout.context]));
        }
        let dh = e / heads;
        let c = layout.context;
        let w = c + 1;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = &n.value;
        let mut probs = vec![0.0; heads * s * w];
        let mut out = vec![0.0; s * e];
        for h in 0..heads {
            let pb = &mut probs[h * s * w..(h + 1) * s * w];
            let qv = View {
                data: src,
                offset: h * dh,
                rs: e3,
                cs: 1,
            };
            let kv = View {
                data: src,
                offset: e + h * dh,
                rs: e3,
                cs: 1,
            };
            let vv = View {
                data: src,
                offset: 2 * e + h * dh,
                rs: e3,
                cs: 1,
            };
            if c > 0 {
                gemm(s, dh, c, scale, qv, kv.transposed(), 0.0, ViewMut::row_major(pb, w));
            }
            for i in 0..s {
                let row = &mut pb[i * w..(i + 1) * w];
                if i >= c {
                    let q = &src[i * e3 + h * dh..i * e3 + (h + 1) * dh];
                    let k = &src[i * e3 + e + h * dh..i * e3 + e + (h + 1) * dh];
                    row[c] = scale * dot(q, k);
                    softmax_in_place(row);
                } else {
                    softmax_in_place(&mut row[..c]);
                    row[c] = 0.0;
                }
            }
            if c > 0 {
                gemm(
                    s,
                    c,
                    dh,
                    1.0,
                    View::row_major(pb, w),
                    vv,
                    0.0,
                    ViewMut::row_major(&mut out, e).at(h * dh),
                );
            }
            for i in c..s {
                let p_self = pb[i * w + c];
                let v = &src[i * e3 + 2 * e + h * dh..i * e3 + 2 * e + (h + 1) * dh];
                axpy(p_self, v, &mut out[i * e + h * dh..i * e + (h + 1) * dh]);
            }
        }
        let ng = n.needs_grad;
        Ok(self.push(
            vec![s, e],
            out,
            Op::Attention {
                qkv,
                heads,
                context: c,
                probs,
            },
            ng,
        ))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let n = self.node(table);
        if n.shape.len() != 2 {
            return Err(shape_err("gather_rows", &n.shape, &[]));
        }
        let (vocab, cols) = (n.shape[0], n.shape[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for (i, &ix) in indices.iter().enumerate() {
            if ix >= vocab {
                return Err(Error::Label {
                    index: i,
                    label: ix,
                    classes: vocab,
                });
            }
            out.extend_from_slice(&n.value[ix * cols..(ix + 1) * cols]);
        }
        let ng = n.needs_grad;
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks 2-D parts vertically; parts may have zero rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?;
        let cols = self.node(*first).cols();
        let mut rows = 0;
        for p in parts {
            let n = self.node(*p);
            if n.shape.len() != 2 || n.shape[1] != cols {
                return Err(shape_err("concat_rows", &self.node(*first).shape, &n.shape));
            }
            rows += n.shape[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&self.node(*p).value);
        }
        let ng = self.any_grad(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 2 || start > end || end > n.shape[0] {
            return Err(shape_err("slice_rows", &n.shape, &[start, end]));
        }
        let cols = n.shape[1];
        let out = n.value[start * cols..end * cols].to_vec();
        let ng = n.needs_grad;
        Ok(self.push(vec![end - start, cols], out, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 2 || start > end || end > n.shape[1] {
            return Err(shape_err("slice_cols", &n.shape, &[start, end]));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&n.value[r * cols + start..r * cols + end]);
        }
        let ng = n.needs_grad;
        Ok(self.push(vec![rows, end - start], out, Op::SliceCols { x, start }, ng))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = self.node(logits);
        if n.shape.len() != 2 || n.shape[0] != targets.len() || targets.is_empty() {
            return Err(shape_err("cross_entropy", &n.shape, &[targets.len()]));
        }
        let c = n.shape[1];
        if let Some((index, &label)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let mut probs = n.value.clone();
        let mut loss = 0.0;
        for (row, (&t, logit_row)) in probs.chunks_mut(c).zip(targets.iter().zip(n.value.chunks(c))) {
            let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - logit_row[t];
            softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        let ng = n.needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Batch mean of `sum p log(p / q)`; both arguments are clamped below by
    /// [`LOG_EPS`] inside the logarithm.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let np = self.node(p);
        if np.shape.len() != 2 || np.shape[0] == 0 {
            return Err(shape_err("kl_divergence", &np.shape, &[]));
        }
        let (b, c) = (np.shape[0], np.shape[1]);
        for (name, v) in [("p", p), ("q", q)] {
            for (r, row) in self.node(v).value.chunks(c).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                    return Err(Error::Distribution(format!(
                        "row {r} of {name} is not a probability vector (sum {s})"
                    )));
                }
            }
        }
        let total: f64 = np
            .value
            .iter()
            .zip(&self.node(q).value)
            .map(|(&pi, &qi)| kl_term(pi, qi))
            .sum();
        let ng = self.any_grad(&[p, q]);
        Ok(self.push(vec![1], vec![total / b as f64], Op::KlDiv { p, q }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        let ng = self.node(x).needs_grad;
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.value.is_empty() {
            return Err(shape_err("mean", &n.shape, &[]));
        }
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let ng = n.needs_grad;
        Ok(self.push(vec![1], vec![m], Op::Mean(x), ng))
    }

    /// Mean of the flat elements of `x` at `indices`.
    pub fn mean_of(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.node(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= n.value.len()) {
            return Err(shape_err("mean_of", &n.shape, &[indices.len()]));
        }
        let m = indices.iter().map(|&i| n.value[i]).sum::<f64>() / indices.len() as f64;
        let ng = n.needs_grad;
        Ok(self.push(
            vec![1],
            vec![m],
            Op::MeanOf {
                x,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(shape_err("backward", &root.shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let len = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                if wants(*a) {
                    acc(*a, &mut |da| {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            View::row_major(g, n),
                            View::row_major(&nb.value, n).transposed(),
                            1.0,
                            ViewMut::row_major(da, k),
                        )
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |db| {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            View::row_major(&na.value, k).transposed(),
                            View::row_major(g, n),
                            1.0,
                            ViewMut::row_major(db, n),
                        )
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(1.0, g, d));
                acc(*b, &mut |d| axpy(1.0, g, d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(1.0, g, d));
                acc(*b, &mut |d| axpy(-1.0, g, d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |d| axpy(1.0, g, d));
                let cols = nodes[bias.0].value.len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(cols) {
                        axpy(1.0, row, d);
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| axpy(*f, g, d)),
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let s = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[i] += g[i] * s;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                acc(*x, &mut |d| {
                    let mut dxhat = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dot(&dxhat, xh) / cols as f64;
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (gr, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            d[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks(cols) {
                        axpy(1.0, gr, d);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = node.cols();
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let s = dot(gr, yr);
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Attention {
                qkv,
                heads,
                context,
                probs,
            } => {
                let src = &nodes[qkv.0].value;
                let (s, e3) = (nodes[qkv.0].shape[0], nodes[qkv.0].shape[1]);
                acc(*qkv, &mut |d| {
                    attention_backward(src, s, e3, *heads, *context, probs, g, d)
                });
            }
            Op::GatherRows { table, indices } => {
                let cols = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (i, &ix) in indices.iter().enumerate() {
                        axpy(1.0, &g[i * cols..(i + 1) * cols], &mut d[ix * cols..(ix + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| axpy(1.0, &g[offset..offset + len], d));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = nodes[x.0].shape[1];
                acc(*x, &mut |d| axpy(1.0, g, &mut d[start * cols..start * cols + g.len()]));
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].shape[1];
                let width = node.cols();
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(width.max(1)).enumerate() {
                        axpy(1.0, gr, &mut d[r * cols + start..r * cols + start + width]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].shape[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::KlDiv { p, q } => {
                let (pv, qv) = (&nodes[p.0].value, &nodes[q.0].value);
                let b = nodes[p.0].shape[0] as f64;
                let scale = g[0] / b;
                acc(*p, &mut |d| {
                    for i in 0..d.len() {
                        if pv[i] > LOG_EPS {
                            d[i] += scale * (pv[i].ln() - qv[i].max(LOG_EPS).ln() + 1.0);
                        } else if pv[i] > 0.0 {
                            d[i] += scale * (LOG_EPS.ln() - qv[i].max(LOG_EPS).ln());
                        }
                    }
                });
                acc(*q, &mut |d| {
                    for i in 0..d.len() {
                        if qv[i] > LOG_EPS {
                            d[i] -= scale * pv[i] / qv[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MeanOf { x, indices } => {
                let n = indices.len() as f64;
                acc(*x, &mut |d| {
                    for &i in indices {
                        d[i] += g[0] / n;
                    }
                });
            }
        }
    }
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p.max(LOG_EPS).ln() - q.max(LOG_EPS).ln())
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    src: &[f64],
    s: usize,
    e3: usize,
    heads: usize,
    c: usize,
    probs: &[f64],
    g: &[f64],
    d: &mut [f64],
) {
    let e = e3 / 3;
    let dh = e / heads;
    let w = c + 1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; s * w];
    for h in 0..heads {
        let pb = &probs[h * s * w..(h + 1) * s * w];
        let qv = View {
            data: src,
            offset: h * dh,
            rs: e3,
            cs: 1,
        };
        let kv = View {
            data: src,
            offset: e + h * dh,
            rs: e3,
            cs: 1,
        };
        let vv = View {
            data: src,
            offset: 2 * e + h * dh,
            rs: e3,
            cs: 1,
        };
        let go = View {
            data: g,
            offset: h * dh,
            rs: e,
            cs: 1,
        };
        let head = |i: usize, part: usize| i * e3 + part * e + h * dh..i * e3 + part * e + (h + 1) * dh;
        let g_head = |i: usize| i * e + h * dh..i * e + (h + 1) * dh;

        // dP = dO V^T
        if c > 0 {
            gemm(s, dh, c, 1.0, go, vv.transposed(), 0.0, ViewMut::row_major(&mut dp, w));
        }
        for i in c..s {
            dp[i * w + c] = dot(&g[g_head(i)], &src[head(i, 2)]);
        }
        // dV
        if c > 0 {
            gemm(
                c,
                s,
                dh,
                1.0,
                View::row_major(pb, w).transposed(),
                go,
                1.0,
                ViewMut {
                    data: &mut *d,
                    offset: 2 * e + h * dh,
                    rs: e3,
                    cs: 1,
                },
            );
        }
        for i in c..s {
            let p_self = pb[i * w + c];
            let gi = &g[g_head(i)];
            axpy(p_self, gi, &mut d[head(i, 2)]);
        }
        // dS = P * (dP - <P, dP>), scaled
        for i in 0..s {
            let len = if i >= c { w } else { c };
            let pr = &pb[i * w..i * w + len];
            let dr = &mut dp[i * w..i * w + len];
            let inner = dot(pr, dr);
            for j in 0..len {
                dr[j] = pr[j] * (dr[j] - inner) * scale;
            }
            if i < c {
                dp[i * w + c] = 0.0;
            }
        }
        // dQ = dS K ; dK = dS^T Q
        if c > 0 {
            gemm(
                s,
                c,
                dh,
                1.0,
                View::row_major(&dp, w),
                kv,
                1.0,
                ViewMut {
                    data: &mut *d,
                    offset: h * dh,
                    rs: e3,
                    cs: 1,
                },
            );
            gemm(
                c,
                s,
                dh,
                1.0,
                View::row_major(&dp, w).transposed(),
                qv,
                1.0,
                ViewMut {
                    data: &mut *d,
                    offset: e + h * dh,
                    rs: e3,
                    cs: 1,
                },
            );
        }
        for i in c..s {
            let ds = dp[i * w + c];
            let (q_range, k_range) = (head(i, 0), head(i, 1));
            let k: Vec<f64> = src[k_range.clone()].to_vec();
            let q: Vec<f64> = src[q_range.clone()].to_vec();
            axpy(ds, &k, &mut d[q_range]);
            axpy(ds, &q, &mut d[k_range]);
        }
    }
}
