//! Reverse-mode differentiation over a per-call tape.
//!
//! A [`Graph`] is built eagerly: each op computes its value immediately and
//! records what it needs for the backward pass. Graphs are cheap, short-lived
//! objects — one per forward/backward — so model parameters live outside the
//! graph (see `params`) and are bound as leaves each call. That keeps forward
//! passes over shared read-only parameters safe to run concurrently.
//!
//! Backward walks the tape in reverse creation order, which is already a
//! topological order. All reductions accumulate in f64 before casting back,
//! and every tie-break (argmax rows, nearest neighbors) is by lowest index,
//! so results are deterministic regardless of thread count.

use crate::diffcore::real::Real;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, R),
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    AddBiasRows { x: Var, bias: Var },
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, stats: Vec<(R, R)> },
    MaxSegments { x: Var, argmax: Vec<usize> },
    MeanAll(Var),
    SumAll(Var),
    MeanScalars(Vec<Var>),
    MeanRowSqNorm(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    BroadcastRow(Var),
    GatherRows { x: Var, indices: Vec<usize> },
    Detach,
    StraightThrough { grad_to: Var },
    Reshape(Var),
    ChamferTo { pred: Var, target: Tensor<R>, pred_nn: Vec<usize>, tgt_nn: Vec<usize> },
    MseTo { pred: Var, target: Tensor<R> },
    BceWithLogitsMean { logits: Var, targets: Vec<bool> },
    CrossEntropyLogits { logits: Var, class: usize },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
}

/// One forward/backward tape.
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    /// (parameter slot, leaf var) pairs recorded by `param`.
    bindings: Vec<(usize, Var)>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matmul kernels ───────────────────────────────────────────────

fn min_par_rows(m: usize, k: usize, n: usize) -> usize {
    // Only fan out when there is real work; tiny matmuls stay sequential.
    if m * k * n >= 64 * 1024 {
        2
    } else {
        usize::MAX
    }
}

/// c[m,n] = a[m,k] · b[k,n]
fn matmul_nn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::ZERO; m * n];
    par::for_each_chunk_mut(&mut c, n, min_par_rows(m, k, n), |i, row| {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * *bv;
            }
        }
    });
    c
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::ZERO; m * n];
    par::for_each_chunk_mut(&mut c, n, min_par_rows(m, k, n), |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = R::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                s += *av * *bv;
            }
            *cv = s;
        }
    });
    c
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::ZERO; k * n];
    par::for_each_chunk_mut(&mut c, n, min_par_rows(m, k, n), |i, row| {
        for p in 0..m {
            let api = a[p * k + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += api * *bv;
            }
        }
    });
    c
}

fn gelu_val<R: Real>(x: R) -> R {
    // tanh approximation
    let c = R::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = R::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    R::from_f64(0.5) * x * (R::ONE + u.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(0.797_884_560_802_865_4);
    let k = R::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (R::ONE + R::from_f64(3.0) * k * x * x);
    R::from_f64(0.5) * (R::ONE + t) + R::from_f64(0.5) * x * (R::ONE - t * t) * du
}

fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

/// Nearest row of `points` (rows × w) to `query`, ties to lower index.
fn nearest_row<R: Real>(points: &Tensor<R>, query: &[R]) -> (usize, R) {
    let w = points.cols();
    let mut best = (R::from_f64(f64::INFINITY), usize::MAX);
    for r in 0..points.rows() {
        let mut d = R::ZERO;
        for (a, b) in points.row(r).iter().zip(query) {
            let t = *a - *b;
            d += t * t;
        }
        if d < best.0 || (d == best.0 && r < best.1) {
            best = (d, r);
        }
    }
    let _ = w;
    (best.1, best.0)
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> R {
        self.value(v).item()
    }

    /// Leaf holding a copy of `t`; gradients are computed but not bound
    /// to any parameter slot.
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to parameter slot `slot`; after `backward`,
    /// `accumulate_param_grads` folds this leaf's gradient into the slot.
    pub fn param(&mut self, slot: usize, value: &Tensor<R>) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.bindings.push((slot, v));
        v
    }

    // ── elementwise / structural ops ─────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "sub: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let data = self.value(x).data().iter().map(|v| *v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.max_val(R::ZERO))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| gelu_val(*v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Gelu(x))
    }

    /// Forward value is a copy of `x`; backward stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Detach)
    }

    /// Forward value is `value_of` (bitwise); the downstream gradient is
    /// routed to `grad_to` unchanged and `value_of` receives none.
    pub fn straight_through(&mut self, value_of: Var, grad_to: Var) -> Result<Var> {
        if self.value(value_of).shape() != self.value(grad_to).shape() {
            return Err(Error::shape("straight_through: shape mismatch"));
        }
        let t = self.value(value_of).clone();
        Ok(self.push(t, Op::StraightThrough { grad_to }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// [m,k]·[k,n] → [m,n]. Leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, kb) = (self.value(a).cols(), self.value(b).rows());
        if ka != kb || self.value(b).shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (m, k, n) = (self.value(a).rows(), ka, self.value(b).cols());
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data), Op::MatMul { a, b }))
    }

    /// [m,k]·[n,k]ᵀ → [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols() != self.value(b).cols() {
            return Err(Error::shape(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (m, k, n) = (self.value(a).rows(), self.value(a).cols(), self.value(b).rows());
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data), Op::MatMulNT { a, b }))
    }

    /// Add a width-w bias vector to every row of x.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = self.value(x).cols();
        if self.value(bias).numel() != w {
            return Err(Error::shape(format!(
                "bias width {} vs rows of width {}",
                self.value(bias).numel(),
                w
            )));
        }
        let bvals = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(w) {
            for (v, b) in row.iter_mut().zip(&bvals) {
                *v += *b;
            }
        }
        Ok(self.push(t, Op::AddBiasRows { x, bias }))
    }

    /// x·W + b, the affine map along the trailing dim.
    pub fn linear(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weights)?;
        self.add_bias_rows(y, bias)
    }

    // ── row-structured ops ───────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let w = self.value(x).cols();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(w) {
            let m = row.iter().fold(R::from_f64(f64::NEG_INFINITY), |acc, v| acc.max_val(*v));
            let mut s = R::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(t, Op::SoftmaxRows(x))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<Var> {
        let w = self.value(x).cols();
        if self.value(gamma).numel() != w || self.value(beta).numel() != w {
            return Err(Error::shape("layer_norm: gamma/beta width mismatch"));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut t = self.value(x).clone();
        let mut stats = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(w) {
            let mean = R::from_f64(row.iter().map(|v| v.to_f64()).sum::<f64>() / w as f64);
            let var = R::from_f64(
                row.iter().map(|v| (*v - mean).to_f64().powi(2)).sum::<f64>() / w as f64,
            );
            let inv_std = R::ONE / (var + eps).sqrt();
            stats.push((mean, inv_std));
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push(t, Op::LayerNormRows { x, gamma, beta, stats }))
    }

    /// Coordinatewise max over each segment of `seg_len` consecutive rows.
    /// x: [segments·seg_len, w] → [segments, w].
    pub fn max_segments(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let (rows, w) = (self.value(x).rows(), self.value(x).cols());
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Error::shape(format!(
                "max_segments: {rows} rows not divisible by segment length {seg_len}"
            )));
        }
        let segments = rows / seg_len;
        let xv = self.value(x);
        let mut out = vec![R::ZERO; segments * w];
        let mut argmax = vec![0usize; segments * w];
        for s in 0..segments {
            for j in 0..w {
                let mut best = xv[(s * seg_len, j)];
                let mut best_r = s * seg_len;
                for r in s * seg_len + 1..(s + 1) * seg_len {
                    let v = xv[(r, j)];
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out[s * w + j] = best;
                argmax[s * w + j] = best_r;
            }
        }
        Ok(self.push(Tensor::new(vec![segments, w], out), Op::MaxSegments { x, argmax }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, w) = (self.value(x).rows(), self.value(x).cols());
        if start + len > rows {
            return Err(Error::shape(format!(
                "slice_rows: {start}+{len} > {rows} rows"
            )));
        }
        let data = self.value(x).data()[start * w..(start + len) * w].to_vec();
        Ok(self.push(Tensor::new(vec![len, w], data), Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = self.value(a).cols();
        if self.value(b).cols() != w {
            return Err(Error::shape("concat_rows: width mismatch"));
        }
        let rows = self.value(a).rows() + self.value(b).rows();
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(vec![rows, w], data), Op::ConcatRows(a, b)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, w) = (self.value(x).rows(), self.value(x).cols());
        if start + len > w {
            return Err(Error::shape(format!("slice_cols: {start}+{len} > width {w}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![rows, len], data), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        if self.value(b).rows() != rows {
            return Err(Error::shape("concat_cols: row count mismatch"));
        }
        let (wa, wb) = (self.value(a).cols(), self.value(b).cols());
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        Ok(self.push(Tensor::new(vec![rows, wa + wb], data), Op::ConcatCols(a, b)))
    }

    /// Repeat a [1,w] row n times → [n,w].
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Result<Var> {
        if self.value(x).rows() != 1 {
            return Err(Error::shape("broadcast_row: input must have one row"));
        }
        let w = self.value(x).cols();
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * w);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        Ok(self.push(Tensor::new(vec![n, w], data), Op::BroadcastRow(x)))
    }

    /// out[i,:] = x[indices[i],:]; backward scatters (accumulating) into x.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, w) = (self.value(x).rows(), self.value(x).cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather_rows: index {bad} >= {rows}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), w], data),
            Op::GatherRows { x, indices: indices.to_vec() },
        ))
    }

    // ── reductions & losses ──────────────────────────────────────────

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(R::from_f64(s / n as f64)), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(R::from_f64(s)), Op::SumAll(x))
    }

    /// Mean of a list of scalar vars.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid_argument("mean_scalars: empty list"));
        }
        let s: f64 = xs.iter().map(|v| self.scalar(*v).to_f64()).sum();
        let val = R::from_f64(s / xs.len() as f64);
        Ok(self.push(Tensor::scalar(val), Op::MeanScalars(xs.to_vec())))
    }

    /// (1/rows) Σ_r ‖row_r‖²
    pub fn mean_row_sq_norm(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows();
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64().powi(2)).sum();
        self.push(
            Tensor::scalar(R::from_f64(s / rows as f64)),
            Op::MeanRowSqNorm(x),
        )
    }

    /// Squared-distance Chamfer between `pred` rows and a constant target
    /// point set; differentiable with respect to `pred`. Nearest-neighbor
    /// ties take the first minimizer by index.
    pub fn chamfer_to(&mut self, pred: Var, target: &Tensor<R>) -> Result<Var> {
        let (p, w) = (self.value(pred).rows(), self.value(pred).cols());
        let t = target.rows();
        if p == 0 || t == 0 {
            return Err(Error::invalid_argument("chamfer: empty point set"));
        }
        if target.cols() != w {
            return Err(Error::shape("chamfer: point width mismatch"));
        }
        let pv = self.value(pred);
        let pred_nn: Vec<(usize, R)> =
            par::map_collect(p, 64, |i| nearest_row(target, pv.row(i)));
        let tgt_nn: Vec<(usize, R)> = par::map_collect(t, 64, |j| nearest_row(pv, target.row(j)));
        let s1: f64 = pred_nn.iter().map(|(_, d)| d.to_f64()).sum::<f64>() / p as f64;
        let s2: f64 = tgt_nn.iter().map(|(_, d)| d.to_f64()).sum::<f64>() / t as f64;
        Ok(self.push(
            Tensor::scalar(R::from_f64(s1 + s2)),
            Op::ChamferTo {
                pred,
                target: target.clone(),
                pred_nn: pred_nn.into_iter().map(|(i, _)| i).collect(),
                tgt_nn: tgt_nn.into_iter().map(|(i, _)| i).collect(),
            },
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_to(&mut self, pred: Var, target: &Tensor<R>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse: {:?} vs {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let n = target.numel();
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b).to_f64().powi(2))
            .sum();
        Ok(self.push(
            Tensor::scalar(R::from_f64(s / n as f64)),
            Op::MseTo { pred, target: target.clone() },
        ))
    }

    /// Mean binary cross-entropy of per-element logits against boolean
    /// targets, computed in the numerically stable log1p form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &[bool]) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != targets.len() {
            return Err(Error::shape(format!(
                "bce: {n} logits vs {} targets",
                targets.len()
            )));
        }
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(x, t)| {
                let x = x.to_f64();
                let t = if *t { 1.0 } else { 0.0 };
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(R::from_f64(s / n as f64)),
            Op::BceWithLogitsMean { logits, targets: targets.to_vec() },
        ))
    }

    /// Multi-class cross-entropy of a single logit row against a class id.
    pub fn cross_entropy_logits(&mut self, logits: Var, class: usize) -> Result<Var> {
        let c = self.value(logits).numel();
        if class >= c {
            return Err(Error::invalid_argument(format!(
                "cross_entropy: class {class} out of {c}"
            )));
        }
        let xs = self.value(logits).data();
        let m = xs.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
        let lse = m + xs.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
        let val = lse - xs[class].to_f64();
        Ok(self.push(
            Tensor::scalar(R::from_f64(val)),
            Op::CrossEntropyLogits { logits, class },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Gradient of `v` from the most recent `backward`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads[v.0].as_deref()
    }

    /// Fold bound parameter gradients into `store[slot]`, summing when a
    /// slot was bound more than once.
    pub fn accumulate_param_grads(&self, store: &mut [Vec<R>]) {
        for (slot, var) in &self.bindings {
            if let Some(g) = self.grad(*var) {
                let dst = &mut store[*slot];
                if dst.is_empty() {
                    dst.resize(g.len(), R::ZERO);
                }
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    pub fn bindings(&self) -> &[(usize, Var)] {
        &self.bindings
    }

    /// Reverse pass seeding d(loss)/d(loss) = 1. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = vec![None; n];
        grads[loss.0] = Some(vec![R::ONE]);
        let nodes = &self.nodes;

        // Inputs of node i always have index < i, so split_at_mut cleanly
        // separates this node's grad from the buffers it writes into.
        fn grad_slot<'a, R: Real>(
            nodes: &[Node<R>],
            grads: &'a mut [Option<Vec<R>>],
            v: Var,
        ) -> &'a mut Vec<R> {
            let len = nodes[v.0].value.numel();
            grads[v.0].get_or_insert_with(|| vec![R::ZERO; len])
        }
        macro_rules! buf {
            ($grads:expr, $v:expr) => {
                grad_slot(nodes, $grads, $v)
            };
        }
        let val = |v: Var| -> &Tensor<R> { &nodes[v.0].value };

        for i in (0..n).rev() {
            let (lower, rest) = grads.split_at_mut(i);
            let Some(dy) = rest[0].as_deref() else {
                continue;
            };
            let this = Var(i);
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (g, d) in buf!(lower, *a).iter_mut().zip(dy) {
                        *g += *d;
                    }
                    for (g, d) in buf!(lower, *b).iter_mut().zip(dy) {
                        *g += *d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, d) in buf!(lower, *a).iter_mut().zip(dy) {
                        *g += *d;
                    }
                    for (g, d) in buf!(lower, *b).iter_mut().zip(dy) {
                        *g -= *d;
                    }
                }
                Op::Scale(x, c) => {
                    for (g, d) in buf!(lower, *x).iter_mut().zip(dy) {
                        *g += *d * *c;
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let nn = val(*b).cols();
                    let da = matmul_nt(dy, val(*b).data(), m, nn, k);
                    let db = matmul_tn(val(*a).data(), dy, m, k, nn);
                    for (g, d) in buf!(lower, *a).iter_mut().zip(&da) {
                        *g += *d;
                    }
                    for (g, d) in buf!(lower, *b).iter_mut().zip(&db) {
                        *g += *d;
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let nn = val(*b).rows();
                    let da = matmul_nn(dy, val(*b).data(), m, nn, k);
                    let db = matmul_tn(dy, val(*a).data(), m, nn, k);
                    for (g, d) in buf!(lower, *a).iter_mut().zip(&da) {
                        *g += *d;
                    }
                    for (g, d) in buf!(lower, *b).iter_mut().zip(&db) {
                        *g += *d;
                    }
                }
                Op::AddBiasRows { x, bias } => {
                    let w = val(*x).cols();
                    for (g, d) in buf!(lower, *x).iter_mut().zip(dy) {
                        *g += *d;
                    }
                    let gb = buf!(lower, *bias);
                    for row in dy.chunks(w) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += *d;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xd = val(*x).data();
                    for ((g, d), v) in buf!(lower, *x).iter_mut().zip(dy).zip(xd) {
                        if *v > R::ZERO {
                            *g += *d;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xd = val(*x).data();
                    for ((g, d), v) in buf!(lower, *x).iter_mut().zip(dy).zip(xd) {
                        *g += *d * gelu_grad(*v);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let w = val(this).cols();
                    let y = val(this).data();
                    let gx = buf!(lower, *x);
                    for r in 0..y.len() / w {
                        let yr = &y[r * w..(r + 1) * w];
                        let dr = &dy[r * w..(r + 1) * w];
                        let dot: f64 = yr
                            .iter()
                            .zip(dr)
                            .map(|(a, b)| a.to_f64() * b.to_f64())
                            .sum();
                        let dot = R::from_f64(dot);
                        for (j, g) in gx[r * w..(r + 1) * w].iter_mut().enumerate() {
                            *g += yr[j] * (dr[j] - dot);
                        }
                    }
                }
                Op::LayerNormRows { x, gamma, beta, stats } => {
                    let w = val(*x).cols();
                    let xd = val(*x).data();
                    let gd = val(*gamma).data();
                    let rows = xd.len() / w;
                    {
                        let gg = buf!(lower, *gamma);
                        for r in 0..rows {
                            let (mean, inv_std) = stats[r];
                            for j in 0..w {
                                let xhat = (xd[r * w + j] - mean) * inv_std;
                                gg[j] += dy[r * w + j] * xhat;
                            }
                        }
                    }
                    {
                        let gb = buf!(lower, *beta);
                        for r in 0..rows {
                            for j in 0..w {
                                gb[j] += dy[r * w + j];
                            }
                        }
                    }
                    let gx = buf!(lower, *x);
                    let wn = R::from_usize(w);
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let mut sum_dxhat = R::ZERO;
                        let mut sum_dxhat_xhat = R::ZERO;
                        for j in 0..w {
                            let xhat = (xd[r * w + j] - mean) * inv_std;
                            let dxhat = dy[r * w + j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / wn;
                        let m2 = sum_dxhat_xhat / wn;
                        for j in 0..w {
                            let xhat = (xd[r * w + j] - mean) * inv_std;
                            let dxhat = dy[r * w + j] * gd[j];
                            gx[r * w + j] += inv_std * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                Op::MaxSegments { x, argmax } => {
                    let w = val(this).cols();
                    let gx = buf!(lower, *x);
                    for (sj, &src_row) in argmax.iter().enumerate() {
                        let j = sj % w;
                        gx[src_row * w + j] += dy[sj];
                    }
                }
                Op::MeanAll(x) => {
                    let d = dy[0] / R::from_usize(val(*x).numel());
                    for g in buf!(lower, *x).iter_mut() {
                        *g += d;
                    }
                }
                Op::SumAll(x) => {
                    for g in buf!(lower, *x).iter_mut() {
                        *g += dy[0];
                    }
                }
                Op::MeanScalars(xs) => {
                    let d = dy[0] / R::from_usize(xs.len());
                    for v in xs {
                        buf!(lower, *v)[0] += d;
                    }
                }
                Op::MeanRowSqNorm(x) => {
                    let rows = val(*x).rows();
                    let xd = val(*x).data();
                    let c = dy[0] * R::from_f64(2.0) / R::from_usize(rows);
                    for (g, v) in buf!(lower, *x).iter_mut().zip(xd) {
                        *g += c * *v;
                    }
                }
                Op::SliceRows { x, start } => {
                    let w = val(this).cols();
                    let gx = buf!(lower, *x);
                    for (k, d) in dy.iter().enumerate() {
                        gx[start * w + k] += *d;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = val(*a).numel();
                    for (g, d) in buf!(lower, *a).iter_mut().zip(&dy[..na]) {
                        *g += *d;
                    }
                    for (g, d) in buf!(lower, *b).iter_mut().zip(&dy[na..]) {
                        *g += *d;
                    }
                }
                Op::SliceCols { x, start } => {
                    let w_in = val(*x).cols();
                    let w_out = val(this).cols();
                    let gx = buf!(lower, *x);
                    for r in 0..dy.len() / w_out {
                        for j in 0..w_out {
                            gx[r * w_in + start + j] += dy[r * w_out + j];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (wa, wb) = (val(*a).cols(), val(*b).cols());
                    let rows = val(*a).rows();
                    {
                        let ga = buf!(lower, *a);
                        for r in 0..rows {
                            for j in 0..wa {
                                ga[r * wa + j] += dy[r * (wa + wb) + j];
                            }
                        }
                    }
                    let gb = buf!(lower, *b);
                    for r in 0..rows {
                        for j in 0..wb {
                            gb[r * wb + j] += dy[r * (wa + wb) + wa + j];
                        }
                    }
                }
                Op::BroadcastRow(x) => {
                    let w = val(*x).cols();
                    let gx = buf!(lower, *x);
                    for (k, d) in dy.iter().enumerate() {
                        gx[k % w] += *d;
                    }
                }
                Op::GatherRows { x, indices } => {
                    let w = val(this).cols();
                    let gx = buf!(lower, *x);
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..w {
                            gx[src * w + j] += dy[r * w + j];
                        }
                    }
                }
                Op::Detach => {}
                Op::StraightThrough { grad_to } => {
                    for (g, d) in buf!(lower, *grad_to).iter_mut().zip(dy) {
                        *g += *d;
                    }
                }
                Op::Reshape(x) => {
                    for (g, d) in buf!(lower, *x).iter_mut().zip(dy) {
                        *g += *d;
                    }
                }
                Op::ChamferTo { pred, target, pred_nn, tgt_nn } => {
                    let w = target.cols();
                    let p = pred_nn.len();
                    let t = tgt_nn.len();
                    let pd = val(*pred).data();
                    let cp = dy[0] * R::from_f64(2.0) / R::from_usize(p);
                    let ct = dy[0] * R::from_f64(2.0) / R::from_usize(t);
                    let gx = buf!(lower, *pred);
                    for (pi, &nn) in pred_nn.iter().enumerate() {
                        for j in 0..w {
                            gx[pi * w + j] += cp * (pd[pi * w + j] - target[(nn, j)]);
                        }
                    }
                    for (jt, &nn) in tgt_nn.iter().enumerate() {
                        for j in 0..w {
                            gx[nn * w + j] += ct * (pd[nn * w + j] - target[(jt, j)]);
                        }
                    }
                }
                Op::MseTo { pred, target } => {
                    let c = dy[0] * R::from_f64(2.0) / R::from_usize(target.numel());
                    let pd = val(*pred).data();
                    let gx = buf!(lower, *pred);
                    for ((g, p), t) in gx.iter_mut().zip(pd).zip(target.data()) {
                        *g += c * (*p - *t);
                    }
                }
                Op::BceWithLogitsMean { logits, targets } => {
                    let c = dy[0] / R::from_usize(targets.len());
                    let xd = val(*logits).data();
                    let gx = buf!(lower, *logits);
                    for ((g, x), t) in gx.iter_mut().zip(xd).zip(targets) {
                        let tv = if *t { R::ONE } else { R::ZERO };
                        *g += c * (sigmoid(*x) - tv);
                    }
                }
                Op::CrossEntropyLogits { logits, class } => {
                    let xd = val(*logits).data();
                    let m = xd.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
                    let z: f64 = xd.iter().map(|v| (v.to_f64() - m).exp()).sum();
                    let gx = buf!(lower, *logits);
                    for (j, g) in gx.iter_mut().enumerate() {
                        let p = R::from_f64((xd[j].to_f64() - m).exp() / z);
                        let onehot = if j == *class { R::ONE } else { R::ZERO };
                        *g += dy[0] * (p - onehot);
                    }
                }
            }
        }
        self.grads = grads;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn linear_identity_and_scalar_case() {
        // identity weights, zero bias -> output equals input
        let mut g = Graph::<f32>::new();
        let x = g.input(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let w = g.input(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.input(Tensor::new(vec![2], vec![0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        // 1x1: w=2, b=1, x=3 -> 7
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::scalar(3.0).reshaped(vec![1, 1]).unwrap());
        let w = g.input(Tensor::scalar(2.0).reshaped(vec![1, 1]).unwrap());
        let b = g.input(Tensor::new(vec![1], vec![1.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.scalar(y), 7.0);
    }

    #[test]
    fn matmul_backward_hand_case() {
        // y = sum(a @ b): da = ones @ b^T, db = a^T @ ones
        let mut g = Graph::<f32>::new();
        let a = g.input(t2(&[&[1.0, 2.0]]));
        let b = g.input(t2(&[&[3.0], &[5.0]]));
        let y = g.matmul(a, b).unwrap();
        let loss = g.sum_all(y);
        assert_eq!(g.scalar(loss), 13.0);
        g.backward(loss);
        assert_eq!(g.grad(a).unwrap(), &[3.0, 5.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_singleton_is_one() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![4.2]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[1.0]);
    }

    #[test]
    fn max_segments_routes_gradient_to_argmax() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t2(&[&[1.0, 9.0], &[5.0, 2.0], &[7.0, 0.0], &[7.0, 1.0]]));
        let y = g.max_segments(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 9.0, 7.0, 1.0]);
        let loss = g.sum_all(y);
        g.backward(loss);
        // ties (rows 2,3 col 0) go to the lower row
        assert_eq!(
            g.grad(x).unwrap(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let loss = g.sum_all(d);
        g.backward(loss);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn straight_through_passes_gradient_and_value() {
        let mut g = Graph::<f32>::new();
        let z_e = g.input(Tensor::new(vec![1, 2], vec![0.9, 0.8]));
        let z_q = g.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let st = g.straight_through(z_q, z_e).unwrap();
        assert_eq!(g.value(st).data(), &[1.0, 1.0]);
        let loss = g.sum_all(st);
        g.backward(loss);
        assert_eq!(g.grad(z_e).unwrap(), &[1.0, 1.0]);
        assert!(g.grad(z_q).is_none());
    }

    #[test]
    fn chamfer_hand_values() {
        let mut g = Graph::<f32>::new();
        let pred = g.input(t2(&[&[1.0, 0.0, 0.0]]));
        let target = t2(&[&[0.0, 0.0, 0.0]]);
        let d = g.chamfer_to(pred, &target).unwrap();
        assert!((g.scalar(d) - 2.0).abs() < 1e-6);

        let mut g = Graph::<f32>::new();
        let pred = g.input(t2(&[&[0.0, 0.0, 0.0]]));
        let target = t2(&[&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]);
        let d = g.chamfer_to(pred, &target).unwrap();
        assert!((g.scalar(d) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn bce_uniform_prediction_is_ln2() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![4], vec![0.0; 4]));
        let l = g
            .bce_with_logits_mean(x, &[true, false, true, false])
            .unwrap();
        assert!((g.scalar(l) - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let l = g.cross_entropy_logits(x, 2).unwrap();
        let z: f32 = (1f32.exp() + 2f32.exp() + 3f32.exp()).ln();
        assert!((g.scalar(l) - (z - 3.0)).abs() < 1e-6);
        g.backward(l);
        let gx = g.grad(x).unwrap();
        let sum: f32 = gx.iter().sum();
        assert!(sum.abs() < 1e-6); // softmax - onehot sums to zero
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let bias = g.input(Tensor::zeros(vec![4]));
        assert!(g.add_bias_rows(a, bias).is_err());
    }
}
