//! Wengert-list reverse-mode autodiff.
//!
//! Ops execute eagerly in f32 as they are recorded; `backward` replays the
//! list in reverse, accumulating gradients additively so fan-out just works.
//! A tape admits exactly one backward pass. The recorded list can also be
//! re-evaluated in f64 (`replay_f64`), which is what the finite-difference
//! gradient checker uses for its high-precision forward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Value {
    data: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
}

impl Value {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { x: Var, k: f32 },
    AddRow { a: Var, row: Var },
    BroadcastRow { row: Var, rows: usize },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Softmax { x: Var, axis: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize>, out_rows: usize },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    MseMasked { pred: Var, target: Var, idx: Option<Vec<usize>> },
    Reshape { x: Var },
}

struct OpRecord {
    op: Op,
    out: Var,
}

/// Gradients produced by one backward pass, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    /// Gradient of `v`, or zeros if `v` did not influence the loss.
    pub fn or_zeros(&self, v: Var, numel: usize) -> Vec<f32> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }
}

/// Records a computation and runs its backward pass.
pub struct Tape {
    vals: Vec<Value>,
    ops: Vec<OpRecord>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            consumed: false,
        }
    }

    /// Registers a leaf value.
    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || data.len() != numel {
            return Err(Error::InvalidParameter(format!(
                "leaf data length {} incompatible with shape {:?}",
                data.len(),
                shape
            )));
        }
        self.vals.push(Value {
            data,
            shape,
            requires_grad,
            leaf: true,
        });
        Ok(Var(self.vals.len() - 1))
    }

    /// Registers a leaf copied from a tensor, honoring its `requires_grad`.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
            .expect("tensor invariants guarantee a valid leaf")
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.vals[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.vals[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.vals[v.0].requires_grad
    }

    /// Copies a value out of the tape as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.vals[v.0].data.clone(), self.vals[v.0].shape.clone())
            .expect("tape values always have consistent shapes")
    }

    fn push(&mut self, op: Op, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.vals.push(Value {
            data,
            shape,
            requires_grad,
            leaf: false,
        });
        let out = Var(self.vals.len() - 1);
        self.ops.push(OpRecord { op, out });
        out
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.vals[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: self.vals[v.0].shape.clone(),
                right: vec![],
            }),
        }
    }

    // ---- ops -----------------------------------------------------------

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = mm_nn(self.value(a), self.value(b), m, ka, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Matmul { a, b }, data, vec![m, n], rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2(x, "transpose")?;
        let src = self.value(x);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Transpose { x }, data, vec![c, r], rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add { a, b }, data, shape, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Sub { a, b }, data, shape, rg))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul_elem")?;
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MulElem { a, b }, data, shape, rg))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var> {
        let data: Vec<f32> = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Scale { x, k }, data, shape, rg))
    }

    /// `a (r×c) + row (c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rank2(a, "add_row")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let av = self.value(a);
        let rv = self.value(row);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] + rv[j];
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(Op::AddRow { a, row }, data, vec![r, c], rg))
    }

    /// Repeats `row (c)` into an `rows×c` matrix.
    pub fn broadcast_row(&mut self, row: Var, rows: usize) -> Result<Var> {
        let c = match self.shape(row) {
            [c] => *c,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_row",
                    left: s.to_vec(),
                    right: vec![],
                })
            }
        };
        if rows == 0 {
            return Err(Error::InvalidParameter("broadcast_row needs rows > 0".into()));
        }
        let rv = self.value(row).to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&rv);
        }
        let rg = self.requires_grad(row);
        Ok(self.push(Op::BroadcastRow { row, rows }, data, vec![rows, c], rg))
    }

    /// Elementwise tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.value(x).iter().map(|&v| gelu_f64(v as f64) as f32).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Gelu { x }, data, shape, rg))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gamma`/`beta` (both sized to the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("shapes are non-empty");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / c;
        let mut data = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let (mean, var) = row_mean_var(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..c {
                let xhat = (row[j] as f64 - mean) * inv;
                data[r * c + j] = (xhat * g[j] as f64 + b[j] as f64) as f32;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, data, shape, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidParameter(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let data = softmax_forward(self.value(x), &shape, axis);
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Softmax { x, axis }, data, shape, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits (n×c)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.rank2(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::InvalidParameter(format!(
                "softmax_cross_entropy got {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidParameter(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let mut sum = 0.0f64;
            for &v in row {
                sum += (v as f64 - max).exp();
            }
            total += max + sum.ln() - row[t] as f64;
        }
        let data = vec![(total / n as f64) as f32];
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() },
            data,
            vec![1],
            rg,
        ))
    }

    /// Selects rows of `x` by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rank2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::InvalidParameter("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidParameter(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Op::GatherRows { x, idx: idx.to_vec() },
            data,
            vec![idx.len(), c],
            rg,
        ))
    }

    /// Places row `j` of `x` at row `idx[j]` of an `out_rows×c` zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (r, c) = self.rank2(x, "scatter_rows")?;
        if idx.len() != r {
            return Err(Error::InvalidParameter(format!(
                "scatter_rows got {} indices for {} rows",
                idx.len(),
                r
            )));
        }
        let mut seen = vec![false; out_rows];
        for &i in idx {
            if i >= out_rows {
                return Err(Error::InvalidParameter(format!(
                    "scatter_rows index {i} out of range for {out_rows} rows"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "scatter_rows index {i} repeated"
                )));
            }
            seen[i] = true;
        }
        let xv = self.value(x);
        let mut data = vec![0.0f32; out_rows * c];
        for (j, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&xv[j * c..(j + 1) * c]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Op::ScatterRows { x, idx: idx.to_vec(), out_rows },
            data,
            vec![out_rows, c],
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_rows needs at least one part".into()));
        }
        let (_, c0) = self.rank2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows")?;
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            data,
            vec![rows, c0],
            rg,
        ))
    }

    /// Contiguous slice along the first axis (elements, for rank-1 input).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if len == 0 || start + len > rows {
            return Err(Error::InvalidParameter(format!(
                "slice_rows range {start}..{} out of bounds for {rows} rows",
                start + len
            )));
        }
        let row_size: usize = shape[1..].iter().product::<usize>().max(1);
        let data = self.value(x)[start * row_size..(start + len) * row_size].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::SliceRows { x, start, len }, data, out_shape, rg))
    }

    /// Contiguous slice of columns of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidParameter(format!(
                "slice_cols range {start}..{} out of bounds for {c} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Op::SliceCols { x, start, len }, data, vec![r, len], rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_cols needs at least one part".into()));
        }
        let (r0, _) = self.rank2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_cols")?;
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0f32; r0 * cols];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.rank2(p, "concat_cols")?;
            let pv = self.value(p);
            for i in 0..r0 {
                data[i * cols + off..i * cols + off + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            data,
            vec![r0, cols],
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Sum { x }, vec![total as f32], vec![1], rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals[x.0].numel();
        let total: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Mean { x }, vec![(total / n as f64) as f32], vec![1], rg))
    }

    /// Mean squared error over flat positions `idx` (all positions if `None`).
    pub fn mse(&mut self, pred: Var, target: Var, idx: Option<&[usize]>) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let numel = self.vals[pred.0].numel();
        if let Some(idx) = idx {
            if idx.is_empty() {
                return Err(Error::DegenerateInput("mse mask selects no positions".into()));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= numel) {
                return Err(Error::InvalidParameter(format!(
                    "mse mask index {bad} out of range for {numel} elements"
                )));
            }
        }
        let p = self.value(pred);
        let t = self.value(target);
        let mut acc = 0.0f64;
        let count;
        match idx {
            Some(idx) => {
                count = idx.len();
                for &i in idx {
                    let d = p[i] as f64 - t[i] as f64;
                    acc += d * d;
                }
            }
            None => {
                count = numel;
                for i in 0..numel {
                    let d = p[i] as f64 - t[i] as f64;
                    acc += d * d;
                }
            }
        }
        let data = vec![(acc / count as f64) as f32];
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.push(
            Op::MseMasked { pred, target, idx: idx.map(|s| s.to_vec()) },
            data,
            vec![1],
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.vals[x.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Reshape { x }, data, shape, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from scalar `loss`. Consumes the tape's single backward
    /// allowance; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        self.consumed = true;
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for rec in self.ops.iter().rev() {
            let Some(dout) = grads[rec.out.0].take() else { continue };
            self.backprop_op(&rec.op, rec.out, &dout, &mut grads);
            // The loss grad slot stays populated so callers can read leaf
            // gradients; intermediate grads are consumed as we pass them.
            if rec.out == loss {
                grads[loss.0] = Some(dout);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_op(&self, op: &Op, out: Var, dout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let da = mm_nt(dout, self.value(*b), m, n, k);
                    acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(self.value(*a), dout, m, k, n);
                    acc(grads, *b, &db);
                }
            }
            Op::Transpose { x } => {
                if self.requires_grad(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![0.0f32; r * c];
                    for j in 0..c {
                        for i in 0..r {
                            dx[i * c + j] = dout[j * r + i];
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    acc(grads, *a, dout);
                }
                if self.requires_grad(*b) {
                    acc(grads, *b, dout);
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(*a) {
                    acc(grads, *a, dout);
                }
                if self.requires_grad(*b) {
                    let neg: Vec<f32> = dout.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::MulElem { a, b } => {
                if self.requires_grad(*a) {
                    let da: Vec<f32> =
                        dout.iter().zip(self.value(*b)).map(|(d, y)| d * y).collect();
                    acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f32> =
                        dout.iter().zip(self.value(*a)).map(|(d, x)| d * x).collect();
                    acc(grads, *b, &db);
                }
            }
            Op::Scale { x, k } => {
                if self.requires_grad(*x) {
                    let dx: Vec<f32> = dout.iter().map(|d| d * k).collect();
                    acc(grads, *x, &dx);
                }
            }
            Op::AddRow { a, row } => {
                if self.requires_grad(*a) {
                    acc(grads, *a, dout);
                }
                if self.requires_grad(*row) {
                    let c = self.shape(*row)[0];
                    let rows = dout.len() / c;
                    let mut drow = vec![0.0f64; c];
                    for i in 0..rows {
                        for j in 0..c {
                            drow[j] += dout[i * c + j] as f64;
                        }
                    }
                    let drow: Vec<f32> = drow.iter().map(|&v| v as f32).collect();
                    acc(grads, *row, &drow);
                }
            }
            Op::BroadcastRow { row, rows } => {
                if self.requires_grad(*row) {
                    let c = self.shape(*row)[0];
                    let mut drow = vec![0.0f64; c];
                    for i in 0..*rows {
                        for j in 0..c {
                            drow[j] += dout[i * c + j] as f64;
                        }
                    }
                    let drow: Vec<f32> = drow.iter().map(|&v| v as f32).collect();
                    acc(grads, *row, &drow);
                }
            }
            Op::Gelu { x } => {
                if self.requires_grad(*x) {
                    let dx: Vec<f32> = self
                        .value(*x)
                        .iter()
                        .zip(dout)
                        .map(|(&v, &d)| (gelu_grad_f64(v as f64) * d as f64) as f32)
                        .collect();
                    acc(grads, *x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let shape = self.shape(*x);
                let c = *shape.last().expect("shapes are non-empty");
                let rows = dout.len() / c;
                let xv = self.value(*x);
                let g = self.value(*gamma);
                let need_x = self.requires_grad(*x);
                let need_g = self.requires_grad(*gamma);
                let need_b = self.requires_grad(*beta);
                let mut dx = if need_x { vec![0.0f32; xv.len()] } else { Vec::new() };
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                let mut xhat = vec![0.0f64; c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let drow = &dout[r * c..(r + 1) * c];
                    let (mean, var) = row_mean_var(row);
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    for j in 0..c {
                        xhat[j] = (row[j] as f64 - mean) * inv;
                    }
                    if need_g || need_b {
                        for j in 0..c {
                            dg[j] += drow[j] as f64 * xhat[j];
                            db[j] += drow[j] as f64;
                        }
                    }
                    if need_x {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let dxh = drow[j] as f64 * g[j] as f64;
                            m1 += dxh;
                            m2 += dxh * xhat[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = drow[j] as f64 * g[j] as f64;
                            dx[r * c + j] = ((dxh - m1 - xhat[j] * m2) * inv) as f32;
                        }
                    }
                }
                if need_x {
                    acc(grads, *x, &dx);
                }
                if need_g {
                    let dg: Vec<f32> = dg.iter().map(|&v| v as f32).collect();
                    acc(grads, *gamma, &dg);
                }
                if need_b {
                    let db: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                    acc(grads, *beta, &db);
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x);
                    let y = self.value(out);
                    let dx = softmax_backward(y, dout, shape, *axis);
                    acc(grads, *x, &dx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if self.requires_grad(*logits) {
                    let (n, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let lv = self.value(*logits);
                    let d = dout[0] as f64 / n as f64;
                    let mut dl = vec![0.0f32; n * c];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * c..(r + 1) * c];
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                        let mut sum = 0.0f64;
                        for &v in row {
                            sum += (v as f64 - max).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] as f64 - max).exp() / sum;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] = ((p - onehot) * d) as f32;
                        }
                    }
                    acc(grads, *logits, &dl);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires_grad(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![0.0f32; r * c];
                    for (j, &i) in idx.iter().enumerate() {
                        for t in 0..c {
                            dx[i * c + t] += dout[j * c + t];
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::ScatterRows { x, idx, out_rows: _ } => {
                if self.requires_grad(*x) {
                    let c = self.shape(*x)[1];
                    let mut dx = vec![0.0f32; idx.len() * c];
                    for (j, &i) in idx.iter().enumerate() {
                        dx[j * c..(j + 1) * c].copy_from_slice(&dout[i * c..(i + 1) * c]);
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    let row_size: usize =
                        self.shape(p)[1..].iter().product::<usize>().max(1);
                    let span = rows * row_size;
                    if self.requires_grad(p) {
                        acc(grads, p, &dout[off..off + span]);
                    }
                    off += span;
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x);
                    let row_size: usize = shape[1..].iter().product::<usize>().max(1);
                    let mut dx = vec![0.0f32; self.vals[x.0].numel()];
                    dx[start * row_size..(start + len) * row_size].copy_from_slice(dout);
                    acc(grads, *x, &dx);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.requires_grad(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![0.0f32; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&dout[i * len..(i + 1) * len]);
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.shape(parts[0])[0];
                let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut dp = vec![0.0f32; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&dout[i * cols + off..i * cols + off + c]);
                        }
                        acc(grads, p, &dp);
                    }
                    off += c;
                }
            }
            Op::Sum { x } => {
                if self.requires_grad(*x) {
                    let dx = vec![dout[0]; self.vals[x.0].numel()];
                    acc(grads, *x, &dx);
                }
            }
            Op::Mean { x } => {
                if self.requires_grad(*x) {
                    let n = self.vals[x.0].numel();
                    let dx = vec![dout[0] / n as f32; n];
                    acc(grads, *x, &dx);
                }
            }
            Op::MseMasked { pred, target, idx } => {
                let numel = self.vals[pred.0].numel();
                let p = self.value(*pred);
                let t = self.value(*target);
                let count = idx.as_ref().map_or(numel, |s| s.len());
                let scale = 2.0 * dout[0] as f64 / count as f64;
                let need_p = self.requires_grad(*pred);
                let need_t = self.requires_grad(*target);
                let mut dp = if need_p { vec![0.0f32; numel] } else { Vec::new() };
                let mut dt = if need_t { vec![0.0f32; numel] } else { Vec::new() };
                let apply = |i: usize, dp: &mut Vec<f32>, dt: &mut Vec<f32>| {
                    let g = (scale * (p[i] as f64 - t[i] as f64)) as f32;
                    if need_p {
                        dp[i] += g;
                    }
                    if need_t {
                        dt[i] -= g;
                    }
                };
                match idx {
                    Some(idx) => {
                        for &i in idx {
                            apply(i, &mut dp, &mut dt);
                        }
                    }
                    None => {
                        for i in 0..numel {
                            apply(i, &mut dp, &mut dt);
                        }
                    }
                }
                if need_p {
                    acc(grads, *pred, &dp);
                }
                if need_t {
                    acc(grads, *target, &dt);
                }
            }
            Op::Reshape { x } => {
                if self.requires_grad(*x) {
                    acc(grads, *x, dout);
                }
            }
        }
    }

    // ---- f64 replay ------------------------------------------------------

    /// Re-evaluates the recorded graph in f64, with optional leaf overrides,
    /// and returns the scalar value of `out`. Used by the gradient checker so
    /// central differences are not drowned in f32 rounding noise.
    pub fn replay_f64(&self, overrides: &[(Var, &[f64])], out: Var) -> Result<f64> {
        if self.vals[out.0].numel() != 1 {
            return Err(Error::Tape("replay output must be scalar".into()));
        }
        Ok(self.replay_f64_vec(overrides, out)?[0])
    }

    /// Like [`Tape::replay_f64`] but returns the full value of `out`.
    pub fn replay_f64_vec(&self, overrides: &[(Var, &[f64])], out: Var) -> Result<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = self
            .vals
            .iter()
            .map(|v| {
                if v.leaf {
                    v.data.iter().map(|&x| x as f64).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        for (var, data) in overrides {
            if !self.vals[var.0].leaf {
                return Err(Error::Tape("replay override must target a leaf".into()));
            }
            if data.len() != self.vals[var.0].numel() {
                return Err(Error::Tape("replay override has wrong length".into()));
            }
            vals[var.0] = data.to_vec();
        }
        for rec in &self.ops {
            let result = self.replay_op(&rec.op, rec.out, &vals);
            vals[rec.out.0] = result;
        }
        Ok(std::mem::take(&mut vals[out.0]))
    }

    fn replay_op(&self, op: &Op, _out: Var, vals: &[Vec<f64>]) -> Vec<f64> {
        let v = |x: Var| &vals[x.0];
        match op {
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                mm_nn_f64(v(*a), v(*b), m, k, n)
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = v(*x);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = xv[i * c + j];
                    }
                }
                out
            }
            Op::Add { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect(),
            Op::Sub { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x - y).collect(),
            Op::MulElem { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).collect(),
            Op::Scale { x, k } => v(*x).iter().map(|a| a * *k as f64).collect(),
            Op::AddRow { a, row } => {
                let c = self.shape(*row)[0];
                let av = v(*a);
                let rv = v(*row);
                av.iter().enumerate().map(|(i, x)| x + rv[i % c]).collect()
            }
            Op::BroadcastRow { row, rows } => {
                let rv = v(*row);
                let mut out = Vec::with_capacity(rv.len() * rows);
                for _ in 0..*rows {
                    out.extend_from_slice(rv);
                }
                out
            }
            Op::Gelu { x } => v(*x).iter().map(|&a| gelu_f64(a)).collect(),
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = *self.shape(*x).last().expect("shapes are non-empty");
                let xv = v(*x);
                let g = v(*gamma);
                let b = v(*beta);
                let rows = xv.len() / c;
                let mut out = vec![0.0; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    for j in 0..c {
                        out[r * c + j] = (row[j] - mean) * inv * g[j] + b[j];
                    }
                }
                out
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x);
                softmax_forward_f64(v(*x), shape, *axis)
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let c = self.shape(*logits)[1];
                let lv = v(*logits);
                let n = targets.len();
                let mut total = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * c..(r + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    total += max + sum.ln() - row[t];
                }
                vec![total / n as f64]
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                let xv = v(*x);
                let mut out = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    out.extend_from_slice(&xv[i * c..(i + 1) * c]);
                }
                out
            }
            Op::ScatterRows { x, idx, out_rows } => {
                let c = self.shape(*x)[1];
                let xv = v(*x);
                let mut out = vec![0.0; out_rows * c];
                for (j, &i) in idx.iter().enumerate() {
                    out[i * c..(i + 1) * c].copy_from_slice(&xv[j * c..(j + 1) * c]);
                }
                out
            }
            Op::ConcatRows { parts } => {
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(v(p));
                }
                out
            }
            Op::SliceRows { x, start, len } => {
                let shape = self.shape(*x);
                let row_size: usize = shape[1..].iter().product::<usize>().max(1);
                v(*x)[start * row_size..(start + len) * row_size].to_vec()
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = v(*x);
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
                }
                out
            }
            Op::ConcatCols { parts } => {
                let r = self.shape(parts[0])[0];
                let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut out = vec![0.0; r * cols];
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let pv = v(p);
                    for i in 0..r {
                        out[i * cols + off..i * cols + off + c]
                            .copy_from_slice(&pv[i * c..(i + 1) * c]);
                    }
                    off += c;
                }
                out
            }
            Op::Sum { x } => vec![v(*x).iter().sum()],
            Op::Mean { x } => {
                let xv = v(*x);
                vec![xv.iter().sum::<f64>() / xv.len() as f64]
            }
            Op::MseMasked { pred, target, idx } => {
                let p = v(*pred);
                let t = v(*target);
                let mut acc = 0.0;
                let count;
                match idx {
                    Some(idx) => {
                        count = idx.len();
                        for &i in idx {
                            let d = p[i] - t[i];
                            acc += d * d;
                        }
                    }
                    None => {
                        count = p.len();
                        for i in 0..p.len() {
                            let d = p[i] - t[i];
                            acc += d * d;
                        }
                    }
                }
                vec![acc / count as f64]
            }
            Op::Reshape { x } => v(*x).clone(),
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => grads[v.0] = Some(contribution.to_vec()),
    }
}

// ---- kernels -------------------------------------------------------------

/// `(m×k)·(k×n)`, f64 accumulation per output row, fixed iteration order.
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p] as f64;
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j] as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = row[j] as f32;
        }
    }
    out
}

/// `(m×k)·(n×k)ᵀ`: rows of `a` dotted with rows of `b`.
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut accum = 0.0f64;
            for p in 0..k {
                accum += arow[p] as f64 * brow[p] as f64;
            }
            out[i * n + j] = accum as f32;
        }
    }
    out
}

/// `(m×k)ᵀ·(m×n)`.
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc64 = vec![0.0f64; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p] as f64;
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                acc64[p * n + j] += av * brow[j] as f64;
            }
        }
    }
    acc64.iter().map(|&v| v as f32).collect()
}

fn mm_nn_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out[i * n + j] += av * brow[j];
            }
        }
    }
    out
}

fn row_mean_var(row: &[f32]) -> (f64, f64) {
    let c = row.len() as f64;
    let mut mean = 0.0f64;
    for &v in row {
        mean += v as f64;
    }
    mean /= c;
    let mut var = 0.0f64;
    for &v in row {
        let d = v as f64 - mean;
        var += d * d;
    }
    (mean, var / c)
}

/// Iterates lanes along `axis` of a row-major array.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product::<usize>().max(1);
    let outer: usize = shape[..axis].iter().product::<usize>().max(1);
    for o in 0..outer {
        for i in 0..inner {
            f(o * axis_len * inner + i, inner);
        }
    }
}

fn softmax_forward(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    let axis_len = shape[axis];
    for_each_lane(shape, axis, |base, stride| {
        let mut max = f64::NEG_INFINITY;
        for t in 0..axis_len {
            max = max.max(x[base + t * stride] as f64);
        }
        let mut sum = 0.0f64;
        for t in 0..axis_len {
            sum += (x[base + t * stride] as f64 - max).exp();
        }
        for t in 0..axis_len {
            out[base + t * stride] = ((x[base + t * stride] as f64 - max).exp() / sum) as f32;
        }
    });
    out
}

fn softmax_forward_f64(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    let axis_len = shape[axis];
    for_each_lane(shape, axis, |base, stride| {
        let mut max = f64::NEG_INFINITY;
        for t in 0..axis_len {
            max = max.max(x[base + t * stride]);
        }
        let mut sum = 0.0f64;
        for t in 0..axis_len {
            sum += (x[base + t * stride] - max).exp();
        }
        for t in 0..axis_len {
            out[base + t * stride] = (x[base + t * stride] - max).exp() / sum;
        }
    });
    out
}

/// VJP of softmax: `dx = y ∘ (dy − ⟨dy, y⟩)` per lane.
fn softmax_backward(y: &[f32], dy: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    let axis_len = shape[axis];
    for_each_lane(shape, axis, |base, stride| {
        let mut dot = 0.0f64;
        for t in 0..axis_len {
            dot += dy[base + t * stride] as f64 * y[base + t * stride] as f64;
        }
        for t in 0..axis_len {
            let i = base + t * stride;
            dx[i] = (y[i] as f64 * (dy[i] as f64 - dot)) as f32;
        }
    });
    dx
}

pub(crate) fn gelu_f64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_f64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}
