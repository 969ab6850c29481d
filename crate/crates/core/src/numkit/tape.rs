//! Reverse-mode autodiff over a flat operation tape.
//!
//! Values are computed eagerly as operations are recorded, so a tape doubles
//! as a forward pass. `backward` replays the recorded operations in reverse,
//! accumulating vector-Jacobian products. A parameter registered twice (or
//! referenced by several layers, as under parameter sharing) maps to a single
//! tape node, so its gradient contributions sum automatically.

use std::collections::HashMap;

use crate::error::{KdError, Result};
use crate::numkit::ops;
use crate::numkit::tensor::{ParamId, Tensor, TensorStore};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

impl Node {
    fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            1 => (1, self.shape[0]),
            _ => panic!("dims2 on rank-{} node", self.shape.len()),
        }
    }
}

enum Op {
    MatMul { a: Var, b: Var, out: Var },
    Transpose { a: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    AddRowBias { m: Var, bias: Var, out: Var },
    Gelu { a: Var, out: Var },
    LayerNormRows { x: Var, scale: Var, shift: Var, eps: f64, out: Var },
    SoftmaxRows { a: Var, out: Var },
    NormalizeRows { x: Var, out: Var },
    GatherRows { table: Var, indices: Vec<usize>, out: Var },
    Row { m: Var, index: usize, out: Var },
    SliceCols { m: Var, start: usize, len: usize, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    Reshape { a: Var, out: Var },
    Sum { a: Var, out: Var },
    CrossEntropy { probs: Var, label: usize, out: Var },
    KlDiv { p: Var, q: Var, out: Var },
    Mse { a: Var, b: Var, out: Var },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    param_vars: HashMap<ParamId, Var>,
    leaves: Vec<(ParamId, Var)>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a stored tensor as a tape leaf. Idempotent per `ParamId`:
    /// repeated registration returns the same node, which is what makes
    /// gradients accumulate across shared uses.
    pub fn param(&mut self, store: &TensorStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad());
        self.param_vars.insert(id, v);
        self.leaves.push((id, v));
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(KdError::shape(
                "constant",
                format!("shape {:?} vs {} elements", shape, data.len()),
            ));
        }
        Ok(self.push(data, shape, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    // ---- recorded operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].dims2();
        let (n2, p) = self.nodes[b.0].dims2();
        if self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 || n != n2 {
            return Err(KdError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = ops::matmul_slices(&self.nodes[a.0].value, m, n, &self.nodes[b.0].value, p);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(value, vec![m, p], needs);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].shape.len() != 2 {
            return Err(KdError::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let (r, c) = self.nodes[a.0].dims2();
        let value = ops::transpose_slices(&self.nodes[a.0].value, r, c);
        let needs = self.needs(a);
        let out = self.push(value, vec![c, r], needs);
        self.ops.push(Op::Transpose { a, out });
        Ok(out)
    }

    fn elementwise_pair(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(KdError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    /// `m` is rows x cols; `bias` is a length-cols vector added to each row.
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[m.0].dims2();
        if self.nodes[bias.0].shape != [cols] {
            return Err(KdError::shape(
                "add_row_bias",
                format!("matrix {:?} with bias {:?}", self.shape(m), self.shape(bias)),
            ));
        }
        let mut value = self.nodes[m.0].value.clone();
        for r in 0..rows {
            for (v, b) in value[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(&self.nodes[bias.0].value)
            {
                *v += b;
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        let shape = self.nodes[m.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::AddRowBias { m, bias, out });
        Ok(out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| ops::gelu_scalar(x)).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::Gelu { a, out });
        out
    }

    pub fn layer_norm_rows(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].dims2();
        if self.nodes[scale.0].shape != [cols] || self.nodes[shift.0].shape != [cols] {
            return Err(KdError::shape(
                "layer_norm_rows",
                format!(
                    "input {:?} with scale {:?} shift {:?}",
                    self.shape(x),
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                let xhat = (row[j] - mean) * inv;
                value[r * cols + j] =
                    self.nodes[scale.0].value[j] * xhat + self.nodes[shift.0].value[j];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::LayerNormRows { x, scale, shift, eps, out });
        Ok(out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[a.0].dims2();
        let value = ops::softmax_rows_slices(&self.nodes[a.0].value, rows, cols)?;
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::SoftmaxRows { a, out });
        Ok(out)
    }

    /// Scale each row to unit L2 norm. Errors on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].dims2();
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].value[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(KdError::invalid("normalize_rows", format!("row {r} is zero")));
            }
            for j in 0..cols {
                value[r * cols + j] = row[j] / norm;
            }
        }
        let needs = self.needs(x);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(value, shape, needs);
        self.ops.push(Op::NormalizeRows { x, out });
        Ok(out)
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        if self.nodes[table.0].shape.len() != 2 {
            return Err(KdError::shape("gather_rows", format!("{:?}", self.shape(table))));
        }
        let (rows, cols) = self.nodes[table.0].dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(KdError::invalid(
                "gather_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            value.extend_from_slice(&self.nodes[table.0].value[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(table);
        let out = self.push(value, vec![indices.len(), cols], needs);
        self.ops.push(Op::GatherRows { table, indices: indices.to_vec(), out });
        Ok(out)
    }

    /// Extract one row of a matrix as a rank-1 vector.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[m.0].dims2();
        if index >= rows {
            return Err(KdError::invalid(
                "row",
                format!("row {index} out of range for {rows} rows"),
            ));
        }
        let value = self.nodes[m.0].value[index * cols..(index + 1) * cols].to_vec();
        let needs = self.needs(m);
        let out = self.push(value, vec![cols], needs);
        self.ops.push(Op::Row { m, index, out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, m: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[m.0].dims2();
        if start + len > cols || len == 0 {
            return Err(KdError::shape(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&self.nodes[m.0].value[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(m);
        let out = self.push(value, vec![rows, len], needs);
        self.ops.push(Op::SliceCols { m, start, len, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(KdError::invalid("concat_cols", "no parts"));
        }
        let rows = self.nodes[parts[0].0].dims2().0;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.nodes[p.0].dims2();
            if r != rows {
                return Err(KdError::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            total_cols += c;
        }
        let mut value = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.nodes[p.0].dims2().1;
                value.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = self.push(value, vec![rows, total_cols], needs);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(KdError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let value = self.nodes[a.0].value.clone();
        let needs = self.needs(a);
        let out = self.push(value, shape, needs);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let needs = self.needs(a);
        let out = self.push(value, vec![1], needs);
        self.ops.push(Op::Sum { a, out });
        out
    }

    /// probs must be rank-1; see [`ops::cross_entropy`] for semantics.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        if self.nodes[probs.0].shape.len() != 1 {
            return Err(KdError::shape("cross_entropy", format!("{:?}", self.shape(probs))));
        }
        let v = ops::cross_entropy_slices(&self.nodes[probs.0].value, label)?;
        let needs = self.needs(probs);
        let out = self.push(vec![v], vec![1], needs);
        self.ops.push(Op::CrossEntropy { probs, label, out });
        Ok(out)
    }

    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.elementwise_pair("kl_div", p, q)?;
        let v = ops::kl_div_slices(&self.nodes[p.0].value, &self.nodes[q.0].value)?;
        let needs = self.needs(p) || self.needs(q);
        let out = self.push(vec![v], vec![1], needs);
        self.ops.push(Op::KlDiv { p, q, out });
        Ok(out)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mse", a, b)?;
        let v = ops::mse_slices(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(vec![v], vec![1], needs);
        self.ops.push(Op::Mse { a, b, out });
        Ok(out)
    }

    // ---- reverse pass ---------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(KdError::Tape(
                "backward already ran on this tape; record a fresh tape instead".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(KdError::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            match op {
                Op::MatMul { a, b, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    let (m, n) = self.nodes[a.0].dims2();
                    let p = self.nodes[b.0].dims2().1;
                    if self.nodes[a.0].needs_grad {
                        let bt = ops::transpose_slices(&self.nodes[b.0].value, n, p);
                        let da = ops::matmul_slices(&g, m, p, &bt, n);
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = ops::transpose_slices(&self.nodes[a.0].value, m, n);
                        let db = ops::matmul_slices(&at, n, m, &g, p);
                        accumulate(&mut grads, *b, db, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Transpose { a, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        let (r, c) = self.nodes[a.0].dims2();
                        // g has shape (c, r); transposing it back gives (r, c)
                        let da = ops::transpose_slices(&g, c, r);
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Add { a, b, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone(), &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g.clone(), &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Sub { a, b, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone(), &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = g.iter().map(|x| -x).collect();
                        accumulate(&mut grads, *b, db, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Mul { a, b, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> =
                            g.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> =
                            g.iter().zip(&self.nodes[a.0].value).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, db, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Scale { a, c, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::AddRowBias { m, bias, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    let (rows, cols) = self.nodes[m.0].dims2();
                    if self.nodes[m.0].needs_grad {
                        accumulate(&mut grads, *m, g.clone(), &self.nodes);
                    }
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads, *bias, db, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Gelu { a, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].value)
                            .map(|(gv, &x)| gv * ops::gelu_derivative(x))
                            .collect();
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::LayerNormRows { x, scale, shift, eps, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    let (rows, cols) = self.nodes[x.0].dims2();
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[scale.0].value;
                    let mut dx = vec![0.0; rows * cols];
                    let mut dscale = vec![0.0; cols];
                    let mut dshift = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; cols];
                        let mut dxhat = vec![0.0; cols];
                        for j in 0..cols {
                            xhat[j] = (row[j] - mean) * inv;
                            dxhat[j] = grow[j] * sv[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                            dscale[j] += grow[j] * xhat[j];
                            dshift[j] += grow[j];
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads, *x, dx, &self.nodes);
                    }
                    if self.nodes[scale.0].needs_grad {
                        accumulate(&mut grads, *scale, dscale, &self.nodes);
                    }
                    if self.nodes[shift.0].needs_grad {
                        accumulate(&mut grads, *shift, dshift, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::SoftmaxRows { a, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        let (rows, cols) = self.nodes[a.0].dims2();
                        let y = &self.nodes[out.0].value;
                        let mut da = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..cols {
                                da[r * cols + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::NormalizeRows { x, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[x.0].needs_grad {
                        let (rows, cols) = self.nodes[x.0].dims2();
                        let xv = &self.nodes[x.0].value;
                        let y = &self.nodes[out.0].value;
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let xr = &xv[r * cols..(r + 1) * cols];
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                            // y = x/‖x‖, so dx = (g − y (g·y)) / ‖x‖
                            let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..cols {
                                dx[r * cols + j] = (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                        accumulate(&mut grads, *x, dx, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::GatherRows { table, indices, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[table.0].needs_grad {
                        let (rows, cols) = self.nodes[table.0].dims2();
                        let mut dt = vec![0.0; rows * cols];
                        for (i, &idx) in indices.iter().enumerate() {
                            for (d, gv) in dt[idx * cols..(idx + 1) * cols]
                                .iter_mut()
                                .zip(&g[i * cols..(i + 1) * cols])
                            {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads, *table, dt, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Row { m, index, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[m.0].needs_grad {
                        let (rows, cols) = self.nodes[m.0].dims2();
                        let mut dm = vec![0.0; rows * cols];
                        dm[index * cols..(index + 1) * cols].copy_from_slice(&g);
                        accumulate(&mut grads, *m, dm, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::SliceCols { m, start, len, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[m.0].needs_grad {
                        let (rows, cols) = self.nodes[m.0].dims2();
                        let mut dm = vec![0.0; rows * cols];
                        for r in 0..rows {
                            dm[r * cols + start..r * cols + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                        accumulate(&mut grads, *m, dm, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::ConcatCols { parts, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    let rows = self.nodes[parts[0].0].dims2().0;
                    let total_cols = self.nodes[out.0].dims2().1;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].dims2().1;
                        if self.nodes[p.0].needs_grad {
                            let mut dp = vec![0.0; rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c].copy_from_slice(
                                    &g[r * total_cols + offset..r * total_cols + offset + c],
                                );
                            }
                            accumulate(&mut grads, p, dp, &self.nodes);
                        }
                        offset += c;
                    }
                    grads[out.0] = Some(g);
                }
                Op::Reshape { a, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone(), &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Sum { a, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[a.0].needs_grad {
                        let da = vec![g[0]; self.nodes[a.0].value.len()];
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::CrossEntropy { probs, label, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    if self.nodes[probs.0].needs_grad {
                        let p = self.nodes[probs.0].value[*label];
                        let mut dp = vec![0.0; self.nodes[probs.0].value.len()];
                        if p > ops::LOG_FLOOR {
                            dp[*label] = -g[0] / p;
                        }
                        accumulate(&mut grads, *probs, dp, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::KlDiv { p, q, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    let pv = &self.nodes[p.0].value;
                    let qv = &self.nodes[q.0].value;
                    if self.nodes[p.0].needs_grad {
                        let dp: Vec<f64> = pv
                            .iter()
                            .zip(qv)
                            .map(|(&pi, &qi)| {
                                if pi > 0.0 {
                                    g[0] * ((pi / qi).ln() + 1.0)
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *p, dp, &self.nodes);
                    }
                    if self.nodes[q.0].needs_grad {
                        let dq: Vec<f64> = pv
                            .iter()
                            .zip(qv)
                            .map(|(&pi, &qi)| if pi > 0.0 { -g[0] * pi / qi } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *q, dq, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
                Op::Mse { a, b, out } => {
                    let Some(g) = grads[out.0].take() else { continue };
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> =
                            av.iter().zip(bv).map(|(x, y)| 2.0 * (x - y) * g[0]).collect();
                        accumulate(&mut grads, *a, da, &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> =
                            av.iter().zip(bv).map(|(x, y)| -2.0 * (x - y) * g[0]).collect();
                        accumulate(&mut grads, *b, db, &self.nodes);
                    }
                    grads[out.0] = Some(g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the loss with respect to a tape value, if it was reached
    /// by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a registered parameter.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars.get(&id).and_then(|&v| self.grad(v))
    }

    /// Add this tape's parameter gradients into the store's grad buffers.
    pub fn accumulate_grads_into(&self, store: &mut TensorStore) {
        for &(id, v) in &self.leaves {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>, nodes: &[Node]) {
    debug_assert_eq!(delta.len(), nodes[v.0].value.len());
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi += di;
            }
        }
        slot => *slot = Some(delta),
    }
}
