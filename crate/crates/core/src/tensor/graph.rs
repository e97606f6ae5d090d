//! Reverse-mode tape over 2-D tensors.
//!
//! Nodes are appended in creation order, so every node's inputs precede it and
//! the backward sweep is a single reverse pass over node ids. Gradient
//! accumulation order is therefore fixed, which makes repeated runs bitwise
//! identical.

use super::ops::{
    gelu_grad_scalar, gelu_scalar, gemm_acc, gemm_nt, gemm_tn_acc, layernorm_stats, softmax_rows_raw,
    Activation,
};
use super::{flops, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    DivCol { x: Var, d: Var, eps: E },
    Scale(Var, E),
    /// `c·I − x`
    IdentityMinus(Var, E),
    Act(Activation, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    RowSqNorm(Var),
    MeanRows(Var),
    Sum(Var),
    Mse { a: Var, b: Var, scale: E },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<E> },
    PinvInit { a: Var, norm: E, col: usize, row: usize },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
}

/// Gradients indexed by node; absent for nodes that do not need one.
#[derive(Debug)]
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf. Rank-1 tensors are stored as `1×n` rows.
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        let t = matrixify(t);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        let t = matrixify(t);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut c = vec![E::zero(); m * n];
        gemm_acc(&self.value(a).data, &self.value(b).data, &mut c, m, k, n);
        flops::add(2 * (m * k * n) as u64);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], c)?, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        flops::add(t.len() as u64);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        flops::add(t.len() as u64);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        flops::add(t.len() as u64);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    /// `x + r` with the `1×d` row `r` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.dims(r) != (1, d) {
            return Err(Error::shape("add_row", self.shape(x), self.shape(r)));
        }
        let row = self.value(r).data.clone();
        let mut t = self.value(x).clone();
        for chunk in t.data.chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(&row) {
                *v += b;
            }
        }
        flops::add((n * d) as u64);
        let ng = self.ng(x) || self.ng(r);
        self.push(t, Op::AddRow(x, r), ng, "add_row")
    }

    fn col_check(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize)> {
        let (n, d) = self.dims(x);
        if self.dims(c) != (n, 1) {
            return Err(Error::shape(op, self.shape(x), self.shape(c)));
        }
        Ok((n, d))
    }

    /// `x + c` with the `n×1` column `c` broadcast over columns.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, d) = self.col_check("add_col", x, c)?;
        let col = self.value(c).data.clone();
        let mut t = self.value(x).clone();
        for (chunk, &b) in t.data.chunks_mut(d).zip(&col) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        flops::add((n * d) as u64);
        let ng = self.ng(x) || self.ng(c);
        self.push(t, Op::AddCol(x, c), ng, "add_col")
    }

    /// Row `i` of `x` scaled by `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, d) = self.col_check("mul_col", x, c)?;
        let col = self.value(c).data.clone();
        let mut t = self.value(x).clone();
        for (chunk, &b) in t.data.chunks_mut(d).zip(&col) {
            chunk.iter_mut().for_each(|v| *v *= b);
        }
        flops::add((n * d) as u64);
        let ng = self.ng(x) || self.ng(c);
        self.push(t, Op::MulCol(x, c), ng, "mul_col")
    }

    /// Row `i` of `x` divided by `d[i] + eps`.
    pub fn div_col(&mut self, x: Var, den: Var, eps: E) -> Result<Var> {
        let (n, d) = self.col_check("div_col", x, den)?;
        let col = self.value(den).data.clone();
        let mut t = self.value(x).clone();
        for (chunk, &b) in t.data.chunks_mut(d).zip(&col) {
            let inv = E::one() / (b + eps);
            chunk.iter_mut().for_each(|v| *v *= inv);
        }
        flops::add((n * d + n) as u64);
        let ng = self.ng(x) || self.ng(den);
        self.push(t, Op::DivCol { x, d: den, eps }, ng, "div_col")
    }

    pub fn scale(&mut self, x: Var, s: E) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        flops::add(t.len() as u64);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng, "scale")
    }

    /// `c·I − x` for square `x`.
    pub fn identity_minus(&mut self, x: Var, c: E) -> Result<Var> {
        let (n, m) = self.dims(x);
        if n != m {
            return Err(Error::shape("identity_minus", self.shape(x), &[n, n]));
        }
        let mut t = self.value(x).map(|v| -v);
        for i in 0..n {
            t.data[i * n + i] += c;
        }
        flops::add((n * n) as u64);
        let ng = self.ng(x);
        self.push(t, Op::IdentityMinus(x, c), ng, "identity_minus")
    }

    pub fn act(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| kind.apply(v));
        flops::add(kind.cost() * t.len() as u64);
        let ng = self.ng(x);
        self.push(t, Op::Act(kind, x), ng, "activation")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_scalar);
        flops::add(8 * t.len() as u64);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng, "gelu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let t = Tensor::new(&[n, d], softmax_rows_raw(&self.value(x).data, n, d))?;
        flops::add(3 * (n * d) as u64);
        let ng = self.ng(x);
        self.push(t, Op::SoftmaxRows(x), ng, "softmax_rows")
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.dims(gamma) != (1, d) || self.dims(beta) != (1, d) {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        let (xhat, rstd) = layernorm_stats(&self.value(x).data, n, d, eps);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *v = gv * *v + bv;
            }
        }
        flops::add(8 * (n * d) as u64);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let t = Tensor::new(&[n, d], y)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
            "layernorm",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_cols(start, len)?;
        let ng = self.ng(x);
        self.push(t, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&refs)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_outer(start, len)?;
        let ng = self.ng(x);
        self.push(t, Op::SliceRows { x, start }, ng, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[rows, d], data)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Squared Euclidean norm of each row, as an `n×1` column.
    pub fn row_sq_norm(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let data: Vec<E> = self
            .value(x)
            .data
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum())
            .collect();
        flops::add(2 * (n * d) as u64);
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, 1], data)?, Op::RowSqNorm(x), ng, "row_sq_norm")
    }

    /// Column means as a `1×d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let mut acc = vec![E::zero(); d];
        for row in self.value(x).data.chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = E::one() / E::lit(n as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        flops::add((n * d) as u64);
        let ng = self.ng(x);
        self.push(Tensor::new(&[1, d], acc)?, Op::MeanRows(x), ng, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::new(&[1, 1], vec![s])?, Op::Sum(x), ng, "sum")
    }

    /// `scale · mean((a − b)²)` as a `1×1` scalar.
    pub fn mse(&mut self, a: Var, b: Var, scale: E) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len();
        let s: E = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = scale * s / E::lit(n as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[1, 1], vec![v])?, Op::Mse { a, b, scale }, ng, "mse")
    }

    /// Mean softmax cross-entropy of `B×C` logits against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if r != labels.len() {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len(), c]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let probs = softmax_rows_raw(&self.value(logits).data, r, c);
        let total: E = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * c + l].max(E::min_positive_value())).ln())
            .sum();
        let loss = total / E::lit(r as f64);
        let ng = self.ng(logits);
        self.push(
            Tensor::new(&[1, 1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    /// Pseudo-inverse seed `Aᵀ / (‖A‖₁ · ‖A‖∞)`.
    pub fn pinv_init(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let t = self.value(a);
        let mut col_sums = vec![E::zero(); m];
        let mut row_best = (E::neg_infinity(), 0);
        for (i, row) in t.data.chunks(m).enumerate() {
            let mut rs = E::zero();
            for (j, &v) in row.iter().enumerate() {
                col_sums[j] += v.abs();
                rs += v.abs();
            }
            if rs > row_best.0 {
                row_best = (rs, i);
            }
        }
        let mut col_best = (E::neg_infinity(), 0);
        for (j, &s) in col_sums.iter().enumerate() {
            if s > col_best.0 {
                col_best = (s, j);
            }
        }
        let norm = col_best.0 * row_best.0;
        if norm <= E::zero() {
            return Err(Error::Numeric {
                op: "pinv_init",
                iteration: 0,
            });
        }
        let inv = E::one() / norm;
        let z = t.transpose().map(|v| v * inv);
        flops::add(3 * (n * m) as u64);
        let ng = self.ng(a);
        self.push(
            z,
            Op::PinvInit {
                a,
                norm,
                col: col_best.1,
                row: row_best.1,
            },
            ng,
            "pinv_init",
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&[1, 1]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<E>, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let send = |v: Var, t: Tensor<E>, grads: &mut [Option<Tensor<E>>]| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.ng(*a) {
                    let da = gemm_nt(&g.data, &self.value(*b).data, m, n, k);
                    send(*a, Tensor::new(&[m, k], da)?, grads);
                }
                if self.ng(*b) {
                    let mut db = vec![E::zero(); k * n];
                    gemm_tn_acc(&self.value(*a).data, &g.data, &mut db, m, k, n);
                    send(*b, Tensor::new(&[k, n], db)?, grads);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose(), grads),
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?, grads);
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?, grads);
                }
            }
            Op::AddRow(x, r) => {
                send(*x, g.clone(), grads);
                if self.ng(*r) {
                    let d = g.cols();
                    let mut acc = vec![E::zero(); d];
                    for row in g.data.chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    send(*r, Tensor::new(&[1, d], acc)?, grads);
                }
            }
            Op::AddCol(x, c) => {
                send(*x, g.clone(), grads);
                if self.ng(*c) {
                    let d = g.cols();
                    let col: Vec<E> = g.data.chunks(d).map(|r| r.iter().copied().sum()).collect();
                    send(*c, Tensor::new(&[col.len(), 1], col)?, grads);
                }
            }
            Op::MulCol(x, c) => {
                let d = g.cols();
                let cv = &self.value(*c).data;
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for (chunk, &s) in dx.data.chunks_mut(d).zip(cv) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    send(*x, dx, grads);
                }
                if self.ng(*c) {
                    let xv = &self.value(*x).data;
                    let col: Vec<E> = g
                        .data
                        .chunks(d)
                        .zip(xv.chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    send(*c, Tensor::new(&[col.len(), 1], col)?, grads);
                }
            }
            Op::DivCol { x, d: den, eps } => {
                let d = g.cols();
                let dv = &self.value(*den).data;
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for (chunk, &s) in dx.data.chunks_mut(d).zip(dv) {
                        let inv = E::one() / (s + *eps);
                        chunk.iter_mut().for_each(|v| *v *= inv);
                    }
                    send(*x, dx, grads);
                }
                if self.ng(*den) {
                    let xv = &self.value(*x).data;
                    let col: Vec<E> = g
                        .data
                        .chunks(d)
                        .zip(xv.chunks(d))
                        .zip(dv)
                        .map(|((gr, xr), &s)| {
                            let den = s + *eps;
                            let dot: E = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                            -dot / (den * den)
                        })
                        .collect();
                    send(*den, Tensor::new(&[col.len(), 1], col)?, grads);
                }
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s), grads),
            Op::IdentityMinus(x, _) => send(*x, g.map(|v| -v), grads),
            Op::Act(kind, x) => {
                let dx = self
                    .value(*x)
                    .zip_map(&node.value, |xv, yv| kind.derivative(xv, yv))?
                    .zip_map(g, |d, gv| d * gv)?;
                send(*x, dx, grads);
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gelu_grad_scalar(xv) * gv)?;
                send(*x, dx, grads);
            }
            Op::SoftmaxRows(x) => {
                let d = g.cols();
                let y = &node.value.data;
                let mut dx = vec![E::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.data.chunks(d)) {
                    let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*x, Tensor::new(g.shape(), dx)?, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let gam = &self.value(*gamma).data;
                if self.ng(*gamma) {
                    let mut dg = vec![E::zero(); d];
                    for (gr, xr) in g.data.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, &gv), &xv) in dg.iter_mut().zip(gr).zip(xr) {
                            *a += gv * xv;
                        }
                    }
                    send(*gamma, Tensor::new(&[1, d], dg)?, grads);
                }
                if self.ng(*beta) {
                    let mut db = vec![E::zero(); d];
                    for gr in g.data.chunks(d) {
                        for (a, &gv) in db.iter_mut().zip(gr) {
                            *a += gv;
                        }
                    }
                    send(*beta, Tensor::new(&[1, d], db)?, grads);
                }
                if self.ng(*x) {
                    let n_f = E::lit(d as f64);
                    let mut dx = vec![E::zero(); g.len()];
                    for (((dr, gr), xr), &rs) in dx
                        .chunks_mut(d)
                        .zip(g.data.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd)
                    {
                        let mut s1 = E::zero();
                        let mut s2 = E::zero();
                        for ((&gv, &gm), &xv) in gr.iter().zip(gam).zip(xr) {
                            let dxh = gv * gm;
                            s1 += dxh;
                            s2 += dxh * xv;
                        }
                        for (((o, &gv), &gm), &xv) in dr.iter_mut().zip(gr).zip(gam).zip(xr) {
                            let dxh = gv * gm;
                            *o = rs / n_f * (n_f * dxh - s1 - xv * s2);
                        }
                    }
                    send(*x, Tensor::new(g.shape(), dx)?, grads);
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.dims(*x);
                let w = g.cols();
                let mut dx = vec![E::zero(); n * d];
                for (i, gr) in g.data.chunks(w).enumerate() {
                    dx[i * d + start..i * d + start + w].copy_from_slice(gr);
                }
                send(*x, Tensor::new(&[n, d], dx)?, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.ng(p) {
                        send(p, g.slice_cols(off, w)?, grads);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (n, d) = self.dims(*x);
                let mut dx = vec![E::zero(); n * d];
                dx[start * d..start * d + g.len()].copy_from_slice(&g.data);
                send(*x, Tensor::new(&[n, d], dx)?, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.dims(p).0;
                    if self.ng(p) {
                        send(p, g.slice_outer(off, r)?, grads);
                    }
                    off += r;
                }
            }
            Op::RowSqNorm(x) => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = xv.clone();
                for (chunk, &gv) in dx.data.chunks_mut(d).zip(&g.data) {
                    let two_g = gv + gv;
                    chunk.iter_mut().for_each(|v| *v *= two_g);
                }
                send(*x, dx, grads);
            }
            Op::MeanRows(x) => {
                let (n, d) = self.dims(*x);
                let inv = E::one() / E::lit(n as f64);
                let row: Vec<E> = g.data.iter().map(|&v| v * inv).collect();
                let dx: Vec<E> = (0..n).flat_map(|_| row.iter().copied()).collect();
                send(*x, Tensor::new(&[n, d], dx)?, grads);
            }
            Op::Sum(x) => {
                let gv = g.data[0];
                send(*x, Tensor::full(self.shape(*x), gv), grads);
            }
            Op::Mse { a, b, scale } => {
                let n = self.value(*a).len();
                let k = g.data[0] * *scale * E::lit(2.0) / E::lit(n as f64);
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * k)?;
                if self.ng(*b) {
                    send(*b, diff.map(|v| -v), grads);
                }
                if self.ng(*a) {
                    send(*a, diff, grads);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let gv = g.data[0] / E::lit(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= E::one();
                }
                d.iter_mut().for_each(|v| *v *= gv);
                send(*logits, Tensor::new(&[labels.len(), c], d)?, grads);
            }
            Op::PinvInit { a, norm, col, row } => {
                // Z = Aᵀ / c with c = ‖A‖₁‖A‖∞; the norms use the argmax column/row.
                let av = self.value(*a);
                let (n, m) = (av.rows(), av.cols());
                let gt = g.transpose();
                let inv = E::one() / *norm;
                let mut da = gt.map(|v| v * inv);
                // ∂L/∂c = −Σ G∘Z / c
                let dc = -g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(&x, &y)| x * y)
                    .sum::<E>()
                    * inv;
                let col_norm: E = (0..n).map(|i| av.at(i, *col).abs()).sum();
                let row_norm: E = (0..m).map(|j| av.at(*row, j).abs()).sum();
                for i in 0..n {
                    let v = av.at(i, *col);
                    let cur = da.at(i, *col);
                    da.set(i, *col, cur + dc * row_norm * v.signum());
                }
                for j in 0..m {
                    let v = av.at(*row, j);
                    let cur = da.at(*row, j);
                    da.set(*row, j, cur + dc * col_norm * v.signum());
                }
                send(*a, da, grads);
            }
        }
        Ok(())
    }
}

fn matrixify<E: Element>(t: Tensor<E>) -> Tensor<E> {
    if t.rank() == 1 {
        let n = t.len();
        Tensor {
            shape: vec![1, n],
            data: t.data,
        }
    } else if t.rank() > 2 {
        t.as_matrix()
    } else {
        t
    }
}
