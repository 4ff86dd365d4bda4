//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough information to compute the
//! vector-Jacobian product later; nodes are appended in evaluation order, so
//! the node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse.
//!
//! There is no implicit broadcasting. Bias rows are expanded with
//! [`Graph::tile_rows`] and per-row scalars with [`Graph::tile_cols`].

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Powf(Var, f64),
    Tanh(Var),
    Mean(Var),
    Sum(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    TileRows(Var),
    TileCols(Var),
    ClampMin(Var, f64),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        lens: Vec<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Parameters are borrowed for `'p`.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c = a · b` for row-major `a: [m, k]`, `b: [k, n]`. Zero entries of `a`
/// are skipped, which both speeds up one-hot inputs and keeps masked
/// attention rows exactly independent of the masked values.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("node shape is consistent")
    }

    /// Copies row `r` of a rank-2 node.
    pub fn row(&self, v: Var, r: usize) -> Vec<f64> {
        let cols = *self.shape(v).last().unwrap_or(&1);
        self.value(v)[r * cols..(r + 1) * cols].to_vec()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that owns its data; differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// A leaf borrowing a parameter's data.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let value = matmul_into(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let x = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn powf(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Powf(a, c), |x| x.powf(c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMin(a, c), |x| x.max(c))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![value], Op::Mean(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![value], Op::Sum(a), rg)
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("sum_rows", self.shape(a))?;
        let value = self.value(a).chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, 1], value, Op::SumRows(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (m, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.shape(p))?;
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (_, n) = dims2("concat_rows", self.shape(first))?;
        let mut m = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            m += r;
            value.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a rank-2 node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(a))?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, end]));
        }
        let x = self.value(a);
        let mut value = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            value.extend_from_slice(&x[i * n + start..i * n + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, end - start], value, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..end` of a rank-2 node.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.shape(a))?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, end]));
        }
        let value = self.value(a)[start * n..end * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![end - start, n], value, Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2("layer_norm", self.shape(a))?;
        let x = self.value(a);
        let mut value = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in x.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            value.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::LayerNorm { x: a, inv_std }, rg))
    }

    /// Softmax along the last axis of a rank-2 node.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("softmax", self.shape(a))?;
        let mut value = Vec::with_capacity(m * n);
        for row in self.value(a).chunks(n) {
            value.extend(softmax_row(row));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::Softmax(a), rg))
    }

    /// Rows of `table: [V, D]` selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("gather", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::invalid("gather with no ids"));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            value.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let mut probs = Vec::with_capacity(m * v);
        let mut total = 0.0;
        for (row, &t) in self.value(logits).chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![total / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `[1, n] -> [m, n]` by repeating the row.
    pub fn tile_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = dims2("tile_rows", self.shape(a))?;
        if r != 1 {
            return Err(Error::shape("tile_rows", self.shape(a), &[1, n]));
        }
        let value = self.value(a).repeat(m);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::TileRows(a), rg))
    }

    /// `[m, 1] -> [m, n]` by repeating each row's single value.
    pub fn tile_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let (m, c) = dims2("tile_cols", self.shape(a))?;
        if c != 1 {
            return Err(Error::shape("tile_cols", self.shape(a), &[m, 1]));
        }
        let value = self
            .value(a)
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::TileCols(a), rg))
    }

    /// Multi-head causal self-attention over a stack of sequences.
    ///
    /// `q`, `k`, `v` are `[N, D]` with rows grouped into consecutive sequences
    /// of lengths `lens`; head `h` uses columns `h·D/heads .. (h+1)·D/heads`.
    /// Row `i` of a sequence attends to rows `0..=i` of the same sequence only,
    /// and the sums never touch later rows, so earlier outputs are bit-exactly
    /// independent of later inputs.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lens: &[usize],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = dims2("causal_attention", self.shape(q))?;
        for other in [k, v] {
            if self.shape(other) != [n, d] {
                return Err(Error::shape("causal_attention", &[n, d], self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        if lens.iter().sum::<usize>() != n {
            return Err(Error::shape(
                "causal_attention",
                &[n],
                &[lens.iter().sum::<usize>()],
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        let mut offset = 0;
        for &len in lens {
            for h in 0..heads {
                let c = h * dh;
                for i in 0..len {
                    let qi = &qv[(offset + i) * d + c..(offset + i) * d + c + dh];
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = &kv[(offset + j) * d + c..(offset + j) * d + c + dh];
                            scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect();
                    let p = softmax_row(&scores);
                    let orow = &mut out[(offset + i) * d + c..(offset + i) * d + c + dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &vv[(offset + j) * d + c..(offset + j) * d + c + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                    probs.extend(p);
                }
            }
            offset += len;
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![n, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                lens: lens.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            }
            // Intermediate gradients are dropped once propagated.
            if matches!(node.op, Op::Leaf) || i == loss.0 {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let shape = &node.shape;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = shape[1];
                let av = self.value(a);
                let bv = self.value(b);
                self.acc(grads, a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aval = av[i * k + p];
                            if aval == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (m, n) = (shape[0], shape[1]);
                self.acc(grads, a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |d| add_assign(d, g));
                self.acc(grads, b, |d| add_assign(d, g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |d| add_assign(d, g));
                self.acc(grads, b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv)
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |d| zip3(d, g, bv, |x, gv, o| *x += gv * o));
                self.acc(grads, b, |d| zip3(d, g, av, |x, gv, o| *x += gv * o));
            }
            &Op::Scale(a, c) => self.acc(grads, a, |d| {
                d.iter_mut().zip(g).for_each(|(x, gv)| *x += c * gv)
            }),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.acc(grads, a, |d| add_assign(d, g)),
            &Op::Exp(a) => self.acc(grads, a, |d| zip3(d, g, y, |x, gv, o| *x += gv * o)),
            &Op::Log(a) => {
                let av = self.value(a);
                self.acc(grads, a, |d| zip3(d, g, av, |x, gv, o| *x += gv / o));
            }
            &Op::Square(a) => {
                let av = self.value(a);
                self.acc(grads, a, |d| zip3(d, g, av, |x, gv, o| *x += 2.0 * o * gv));
            }
            &Op::Powf(a, c) => {
                let av = self.value(a);
                self.acc(grads, a, |d| {
                    zip3(d, g, av, |x, gv, o| *x += gv * c * o.powf(c - 1.0))
                });
            }
            &Op::Tanh(a) => self.acc(grads, a, |d| {
                zip3(d, g, y, |x, gv, o| *x += gv * (1.0 - o * o))
            }),
            &Op::Relu(a) => {
                let av = self.value(a);
                self.acc(grads, a, |d| {
                    zip3(d, g, av, |x, gv, o| *x += if o > 0.0 { gv } else { 0.0 })
                });
            }
            &Op::Gelu(a) => {
                let av = self.value(a);
                self.acc(grads, a, |d| {
                    zip3(d, g, av, |x, gv, o| *x += gv * gelu_grad(o))
                });
            }
            &Op::ClampMin(a, c) => {
                let av = self.value(a);
                self.acc(grads, a, |d| {
                    zip3(d, g, av, |x, gv, o| *x += if o > c { gv } else { 0.0 })
                });
            }
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                self.acc(grads, a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            &Op::Sum(a) => self.acc(grads, a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::SumRows(a) => {
                let n = self.shape(a)[1];
                self.acc(grads, a, |d| {
                    for (row, gv) in d.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|x| *x += gv);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (shape[0], shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(grads, p, |d| {
                        for i in 0..m {
                            add_assign(
                                &mut d[i * w..(i + 1) * w],
                                &g[i * n + offset..i * n + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |d| add_assign(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceCols(a, start) => {
                let n = self.shape(a)[1];
                let (m, w) = (shape[0], shape[1]);
                self.acc(grads, a, |d| {
                    for i in 0..m {
                        add_assign(
                            &mut d[i * n + start..i * n + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            &Op::SliceRows(a, start) => {
                let n = shape[1];
                self.acc(grads, a, |d| {
                    add_assign(&mut d[start * n..start * n + g.len()], g)
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = shape[1];
                self.acc(grads, *x, |d| {
                    for ((drow, (grow, yrow)), inv) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n).zip(y.chunks(n)))
                        .zip(inv_std)
                    {
                        let mg = grow.iter().sum::<f64>() / n as f64;
                        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += inv * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = shape[1];
                self.acc(grads, a, |d| {
                    for (drow, (grow, yrow)) in d.chunks_mut(n).zip(g.chunks(n).zip(y.chunks(n))) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dcols = shape[1];
                self.acc(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(
                            &mut d[id * dcols..(id + 1) * dcols],
                            &g[r * dcols..(r + 1) * dcols],
                        );
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let m = targets.len() as f64;
                let scale = g[0] / m;
                self.acc(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                lens,
                heads,
                probs,
            } => {
                let (n, d) = (shape[0], shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (mut dq, mut dk, mut dv) =
                    (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
                let mut at = 0;
                let mut offset = 0;
                for &len in lens {
                    for h in 0..*heads {
                        let c = h * dh;
                        for i in 0..len {
                            let p = &probs[at..at + i + 1];
                            at += i + 1;
                            let ri = (offset + i) * d + c;
                            let gi = &g[ri..ri + dh];
                            let dp: Vec<f64> = (0..=i)
                                .map(|j| {
                                    let rj = (offset + j) * d + c;
                                    gi.iter()
                                        .zip(&vv[rj..rj + dh])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>()
                                })
                                .collect();
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                let rj = (offset + j) * d + c;
                                let ds = scale * p[j] * (dp[j] - dot);
                                for t in 0..dh {
                                    dq[ri + t] += ds * kv[rj + t];
                                    dk[rj + t] += ds * qv[ri + t];
                                    dv[rj + t] += p[j] * gi[t];
                                }
                            }
                        }
                    }
                    offset += len;
                }
                self.acc(grads, *q, |x| add_assign(x, &dq));
                self.acc(grads, *k, |x| add_assign(x, &dk));
                self.acc(grads, *v, |x| add_assign(x, &dv));
            }
            &Op::TileRows(a) => {
                let n = shape[1];
                self.acc(grads, a, |d| g.chunks(n).for_each(|row| add_assign(d, row)));
            }
            &Op::TileCols(a) => {
                let n = shape[1];
                self.acc(grads, a, |d| {
                    for (dv, row) in d.iter_mut().zip(g.chunks(n)) {
                        *dv += row.iter().sum::<f64>();
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn add_assign(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, gv)| *x += gv);
}

fn zip3(d: &mut [f64], g: &[f64], o: &[f64], f: impl Fn(&mut f64, f64, f64)) {
    for ((x, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
        f(x, gv, ov);
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradients retained after a backward pass: one entry per leaf, plus the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is a differentiable
    /// leaf that the loss depends on (or the loss itself).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
