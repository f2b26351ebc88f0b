use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::params::{ParamId, ParamRegistry};
use super::tensor::Tensor;
use crate::dist::{self, BaseKind};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    SoftmaxColumns(Var),
    Elu(Var),
    Conv1d(Var, Var),
    MaxPool1d(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRow(Var, usize),
    Stack(Vec<Var>),
    LogSumExp(Var),
    LogDensity { mean: Var, log_scale: Var, target: Vec<f64>, kind: BaseKind },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's parents precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Iterates over (parameter, gradient) pairs that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, idx)| self.grads[idx].as_deref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the registry's gradient slots.
    pub fn accumulate_into(&self, registry: &mut ParamRegistry) {
        for (id, g) in self.params() {
            registry.tensor_mut(id).accumulate_grad(g);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Dot product with four independent partial sums so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradient buffer of node `idx`, created as zeros on first use.
fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Conv1d(a, b)
            | Op::LogDensity { mean: a, log_scale: b, .. } => self.nodes[a.idx].needs_grad || self.nodes[b.idx].needs_grad,
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SoftmaxColumns(a)
            | Op::Elu(a)
            | Op::MaxPool1d(a, _)
            | Op::Dropout(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRow(a, _)
            | Op::LogSumExp(a) => self.nodes[a.idx].needs_grad,
            Op::LayerNorm { x, gain, bias, .. } => [x, gain, bias].iter().any(|v| self.nodes[v.idx].needs_grad),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) | Op::Stack(parts) => {
                parts.iter().any(|v| self.nodes[v.idx].needs_grad)
            }
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Structural("variable belongs to a different tape".into()));
        }
        self.nodes
            .get(v.idx)
            .ok_or_else(|| Error::Structural("variable index out of range".into()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    /// Differentiable input that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-trainable input. No gradient is recorded for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.idx].needs_grad = false;
        v
    }

    /// Registers a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, registry: &ParamRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let src = registry.tensor(id);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().to_vec());
        let v = self.push(value, Op::Leaf);
        self.param_leaves.insert(id, v);
        v
    }

    /// Makes `v` stand in for parameter `id` on this tape.
    #[cfg(test)]
    pub(crate) fn bind_param(&mut self, id: ParamId, v: Var) {
        self.param_leaves.insert(id, v);
    }

    /// Fails with a numeric error naming `layer` if `v` holds a non-finite value.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric { layer: layer.to_string(), detail: "non-finite activation".into() })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, p) = check_2d("matmul", av)?;
        let (p2, n) = check_2d("matmul", bv)?;
        if p != p2 {
            return Err(Error::shape("matmul", format!("{m}x{p} times {p2}x{n}")));
        }
        let out = matmul_raw(av.data(), bv.data(), m, p, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let (m, n) = check_2d("transpose", av)?;
        let d = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (&self.node(a)?.value, &self.node(row)?.value);
        let (m, n) = check_2d("add_row", av)?;
        if rv.len() != n {
            return Err(Error::shape("add_row", format!("row of {} for {m}x{n}", rv.len())));
        }
        let mut out = av.data().to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().zip(rv.data()).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = av.data().iter().map(|x| x * c).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = av.data().iter().map(|x| x + c).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(t, Op::AddScalar(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = av.data().iter().map(|x| x * x).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(t, Op::Square(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?.value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Softmax down each column, shifted by the column maximum.
    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let (m, n) = check_2d("softmax_columns", av)?;
        if !av.is_finite() {
            return Err(Error::InvalidValue {
                op: "softmax_columns",
                detail: "non-finite input".into(),
            });
        }
        let d = av.data();
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let mx = (0..m).map(|i| d[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..m {
                let e = (d[i * n + j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for i in 0..m {
                out[i * n + j] /= z;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxColumns(a)))
    }

    /// Exponential linear unit with unit slope parameter.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = av.data().iter().map(|&x| if x > 0.0 { x } else { x.exp_m1() }).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(t, Op::Elu(a)))
    }

    /// Same-padded width-3 convolution along the rows (time) of a `t×d` input
    /// with a `3×d×d'` kernel.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (&self.node(x)?.value, &self.node(kernel)?.value);
        let (t, d) = check_2d("conv1d", xv)?;
        let ks = kv.shape();
        if ks.len() != 3 || ks[0] != 3 || ks[1] != d {
            return Err(Error::shape("conv1d", format!("kernel {ks:?} for input {t}x{d}")));
        }
        let dout = ks[2];
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![0.0; t * dout];
        for tau in 0..t {
            let orow = &mut out[tau * dout..(tau + 1) * dout];
            for k in 0..3 {
                let src = tau + k;
                if src == 0 || src > t {
                    continue;
                }
                let xrow = &xd[(src - 1) * d..src * d];
                for (i, &xi) in xrow.iter().enumerate() {
                    let krow = &kd[(k * d + i) * dout..(k * d + i + 1) * dout];
                    for (o, &w) in orow.iter_mut().zip(krow) {
                        *o += xi * w;
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, dout], out), Op::Conv1d(x, kernel)))
    }

    /// Window-2 stride-2 max pooling over rows; an odd trailing row passes through.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (t, d) = check_2d("maxpool1d", xv)?;
        let rows = t.div_ceil(2);
        let xd = xv.data();
        let mut out = vec![0.0; rows * d];
        let mut arg = vec![0usize; rows * d];
        for r in 0..rows {
            for c in 0..d {
                let mut best = 2 * r;
                if 2 * r + 1 < t && xd[(2 * r + 1) * d + c] > xd[best * d + c] {
                    best = 2 * r + 1;
                }
                out[r * d + c] = xd[best * d + c];
                arg[r * d + c] = best * d + c;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, d], out), Op::MaxPool1d(x, arg)))
    }

    /// Inverted dropout. Masks are drawn from `rng` in row-major order.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let xv = &self.node(x)?.value;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..xv.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let out = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::Dropout(x, mask)))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (m, n) = check_2d("layer_norm", xv)?;
        let (gv, bv) = (&self.node(gain)?.value, &self.node(bias)?.value);
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        let xd = xv.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mu) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut width = None;
        for &p in parts {
            let v = &self.node(p)?.value;
            let (m, n) = check_2d("concat_rows", v)?;
            if *width.get_or_insert(n) != n {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += m;
            data.extend_from_slice(v.data());
        }
        let n = width.ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (m, n) = check_2d("concat_cols", &self.node(p)?.value)?;
            if *rows.get_or_insert(m) != m {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            total += n;
        }
        let m = rows.ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.idx].value;
            let n = v.cols();
            for r in 0..m {
                data[r * total + off..r * total + off + n].copy_from_slice(v.row(r));
            }
            off += n;
        }
        Ok(self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (m, n) = check_2d("slice_rows", v)?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m}")));
        }
        let data = v.data()[start * n..end * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![end - start, n], data), Op::SliceRows(x, start)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (m, n) = check_2d("slice_cols", v)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, w], data), Op::SliceCols(x, start)))
    }

    /// Row `idx` of a table as a `1×n` matrix.
    pub fn gather_row(&mut self, table: Var, idx: usize) -> Result<Var> {
        let v = &self.node(table)?.value;
        let (m, n) = check_2d("gather_row", v)?;
        if idx >= m {
            return Err(Error::Lookup(format!("row {idx} of a {m}-row table")));
        }
        let data = v.row(idx).to_vec();
        Ok(self.push(Tensor::from_parts(vec![1, n], data), Op::GatherRow(table, idx)))
    }

    /// Collects scalars into a `1×n` row.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let v = &self.node(s)?.value;
            if v.len() != 1 {
                return Err(Error::shape("stack", "expected scalars"));
            }
            data.push(v.item());
        }
        if data.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![1, n], data), Op::Stack(scalars.to_vec())))
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let v = dist::logsumexp(self.node(x)?.value.data())?;
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(x)))
    }

    /// Sum over positions of the base log-density of `target` under
    /// per-position `(mean, log_scale)`.
    pub fn log_density(&mut self, mean: Var, log_scale: Var, target: &[f64], kind: BaseKind) -> Result<Var> {
        let (mv, sv) = (&self.node(mean)?.value, &self.node(log_scale)?.value);
        if mv.len() != target.len() || sv.len() != target.len() {
            return Err(Error::shape(
                "log_density",
                format!("mean {} / scale {} / target {}", mv.len(), sv.len(), target.len()),
            ));
        }
        let total = dist::base_log_pdf_sum(kind, target, mv.data(), sv.data());
        let op = Op::LogDensity { mean, log_scale, target: target.to_vec(), kind };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Structural("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Structural("loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, usize)> =
            self.param_leaves.iter().map(|(&id, v)| (id, v.idx)).collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { tape: self.id, grads, params })
    }

    /// Runs [`Tape::backward`] and accumulates into the registry's gradient slots.
    pub fn backward_into(&self, loss: Var, registry: &mut ParamRegistry) -> Result<()> {
        self.backward(loss)?.accumulate_into(registry);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.idx].value;
        let wants = |v: &Var| self.nodes[v.idx].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, p) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(a) {
                    let ga = slot(grads, a.idx, m * p);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for k in 0..p {
                            ga[r * p + k] += dot(grow, &bv.data()[k * n..(k + 1) * n]);
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b.idx, p * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for k in 0..p {
                            let a_rk = av.data()[r * p + k];
                            if a_rk == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[k * n..(k + 1) * n].iter_mut().zip(grow) {
                                *o += a_rk * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] = g[c * m + r];
                    }
                }
                add_into(&mut grads[a.idx], &ga);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(&mut grads[v.idx], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.idx], g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut grads[b.idx], &neg);
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if wants(v) {
                        let gv = slot(grads, v.idx, g.len());
                        for ((o, x), y) in gv.iter_mut().zip(g).zip(val(*other).data()) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let n = val(*row).len();
                if wants(a) {
                    add_into(&mut grads[a.idx], g);
                }
                if wants(row) {
                    let gr = slot(grads, row.idx, n);
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut grads[a.idx], &ga);
            }
            Op::AddScalar(a) => add_into(&mut grads[a.idx], g),
            Op::Square(a) => {
                let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| 2.0 * x * y).collect();
                add_into(&mut grads[a.idx], &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).len()];
                add_into(&mut grads[a.idx], &ga);
            }
            Op::SoftmaxColumns(a) => {
                let y = node.value.data();
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut ga = vec![0.0; m * n];
                for j in 0..n {
                    let dot: f64 = (0..m).map(|r| g[r * n + j] * y[r * n + j]).sum();
                    for r in 0..m {
                        ga[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                    }
                }
                add_into(&mut grads[a.idx], &ga);
            }
            Op::Elu(a) => {
                // For x ≤ 0 the derivative exp(x) equals output + 1.
                let ga = slot(grads, a.idx, g.len());
                for ((o, gv), (&x, &y)) in ga.iter_mut().zip(g).zip(val(*a).data().iter().zip(node.value.data())) {
                    *o += if x > 0.0 { *gv } else { gv * (y + 1.0) };
                }
            }
            Op::Conv1d(x, kernel) => {
                let (xv, kv) = (val(*x), val(*kernel));
                let (t, d) = (xv.shape()[0], xv.shape()[1]);
                let dout = kv.shape()[2];
                let (xd, kd) = (xv.data(), kv.data());
                let mut gx = vec![0.0; t * d];
                let mut gk = vec![0.0; if wants(kernel) { 3 * d * dout } else { 0 }];
                for tau in 0..t {
                    let grow = &g[tau * dout..(tau + 1) * dout];
                    for k in 0..3 {
                        let src = tau + k;
                        if src == 0 || src > t {
                            continue;
                        }
                        let s = src - 1;
                        for i in 0..d {
                            let base = (k * d + i) * dout;
                            let krow = &kd[base..base + dout];
                            gx[s * d + i] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                            if gk.is_empty() {
                                continue;
                            }
                            let xi = xd[s * d + i];
                            for (o, gv) in gk[base..base + dout].iter_mut().zip(grow) {
                                *o += xi * gv;
                            }
                        }
                    }
                }
                add_into(&mut grads[x.idx], &gx);
                if !gk.is_empty() {
                    add_into(&mut grads[kernel.idx], &gk);
                }
            }
            Op::MaxPool1d(x, arg) => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gv, &src) in g.iter().zip(arg) {
                    gx[src] += gv;
                }
                add_into(&mut grads[x.idx], &gx);
            }
            Op::Dropout(x, mask) => {
                let gx = slot(grads, x.idx, g.len());
                for ((o, a), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += a * m;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gamma = val(*gain).data();
                let n = gamma.len();
                let m = inv_std.len();
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for c in 0..n {
                        gg[c] += grow[c] * hrow[c];
                        gb[c] += grow[c];
                        let gh = grow[c] * gamma[c];
                        sum_gh += gh;
                        sum_ghh += gh * hrow[c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let gh = grow[c] * gamma[c];
                        gx[r * n + c] = inv_std[r] / nf * (nf * gh - sum_gh - hrow[c] * sum_ghh);
                    }
                }
                add_into(&mut grads[x.idx], &gx);
                add_into(&mut grads[gain.idx], &gg);
                add_into(&mut grads[bias.idx], &gb);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    add_into(&mut grads[p.idx], &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut off = 0;
                for p in parts {
                    let n = val(*p).shape()[1];
                    let mut gp = Vec::with_capacity(m * n);
                    for r in 0..m {
                        gp.extend_from_slice(&g[r * total + off..r * total + off + n]);
                    }
                    add_into(&mut grads[p.idx], &gp);
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let n = xv.shape()[1];
                let gx = slot(grads, x.idx, xv.len());
                gx[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let w = node.value.shape()[1];
                let gx = slot(grads, x.idx, m * n);
                for r in 0..m {
                    let dst = &mut gx[r * n + start..r * n + start + w];
                    dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(o, v)| *o += v);
                }
            }
            Op::GatherRow(table, idx) => {
                let tv = val(*table);
                let n = tv.shape()[1];
                let gt = slot(grads, table.idx, tv.len());
                gt[idx * n..(idx + 1) * n].iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::Stack(parts) => {
                for (p, gv) in parts.iter().zip(g) {
                    add_into(&mut grads[p.idx], &[*gv]);
                }
            }
            Op::LogSumExp(x) => {
                let xd = val(*x).data();
                let lse = node.value.item();
                let gx: Vec<f64> = xd.iter().map(|v| g[0] * (v - lse).exp()).collect();
                add_into(&mut grads[x.idx], &gx);
            }
            Op::LogDensity { mean, log_scale, target, kind } => {
                let (md, sd) = (val(*mean).data(), val(*log_scale).data());
                let mut gm = vec![0.0; md.len()];
                let mut gs = vec![0.0; sd.len()];
                for h in 0..target.len() {
                    let (dm, ds) = dist::base_log_pdf_grad(*kind, target[h], md[h], sd[h]);
                    gm[h] = g[0] * dm;
                    gs[h] = g[0] * ds;
                }
                add_into(&mut grads[mean.idx], &gm);
                add_into(&mut grads[log_scale.idx], &gs);
            }
        }
    }
}
