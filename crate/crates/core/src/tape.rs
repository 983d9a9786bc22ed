//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Nodes are only ever appended, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use hamur_core::tape::Tape;
//! use hamur_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap(), true);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    Reshape(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ColMean(Var),
    ColVar(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Sqrt(Var),
    Clip(Var, f64, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | BatchMatMul(a, b) | Add(a, b) | Sub(a, b)
            | Mul(a, b) | Div(a, b) => vec![*a, *b],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            Detach(a) | Transpose(a) | AddScalar(a, _) | MulScalar(a, _) | BroadcastRows(a, _)
            | BroadcastCols(a, _) | Reshape(a, _) | GatherRows(a, _) | Sum(a) | Mean(a)
            | SumCols(a) | ColMean(a) | ColVar(a) | Sigmoid(a) | Relu(a) | Log(a) | Sqrt(a)
            | Clip(a, _, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

trait Values {
    fn val(&self, v: Var) -> &Tensor;
}

impl Values for [Node] {
    fn val(&self, v: Var) -> &Tensor {
        &self[v.0].value
    }
}

impl Values for [Tensor] {
    fn val(&self, v: Var) -> &Tensor {
        &self[v.0]
    }
}

/// Record of operations for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a trainable leaf. Binding the same id twice
    /// returns the same node so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
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

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, self.nodes.as_slice())?;
        let requires_grad = !matches!(op, Op::Detach(_))
            && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a` (m×k) and `b` (n×k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    /// Per-batch matrix product of `a` (B×m×k) and `b` (B×k×n).
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::BatchMatMul(a, b))
    }

    /// Transpose of a matrix, or of the last two axes of a rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::MulScalar(a, c))
    }

    /// Repeats a length-h vector into an `rows × h` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(v, rows))
    }

    /// Repeats an `n × 1` column into an `n × cols` matrix.
    pub fn broadcast_cols(&mut self, v: Var, cols: usize) -> Result<Var> {
        self.push(Op::BroadcastCols(v, cols))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.push(Op::Reshape(a, shape.into()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows along the first axis. Doubles as embedding lookup: the
    /// backward pass scatters gradients back into the selected rows only.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, rows))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::GatherRows(a, (start..end).collect()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Sums each row of a matrix into an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a))
    }

    /// Per-column mean and biased (divide-by-B) variance of a `B × h` matrix.
    pub fn batch_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let mean = self.push(Op::ColMean(x))?;
        let var = self.push(Op::ColVar(x))?;
        Ok((mean, var))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clip(a, lo, hi))
    }

    /// Copies a value into a node that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach(a))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, values.as_slice())?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in backprop(&node.op, &g, &node.value, self.nodes.as_slice())? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Keep the gradient of interior nodes available to callers.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Collects parameter gradients, indexed by [`ParamId`], for a store of
    /// `n_params` entries. Parameters not bound on this tape get `None`.
    pub fn param_grads(&self, grads: &mut Gradients, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n_params];
        for (&id, &v) in &self.params {
            if id.index() < n_params {
                out[id.index()] = grads.take(v);
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

fn transpose_data(t: &Tensor) -> Result<Tensor> {
    let (batch, r, c) = match t.shape() {
        &[r, c] => (1, r, c),
        &[b, r, c] => (b, r, c),
        other => return Err(Error::shape("transpose", other, &[0, 0])),
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let shape = if t.rank() == 2 {
        vec![c, r]
    } else {
        vec![batch, c, r]
    };
    Tensor::new(shape, out)
}

/// Row count and row width when treating a tensor as a stack of rows.
fn rows_of(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().first() {
        Some(&n) if n > 0 => Ok((n, t.len() / n)),
        Some(_) => Ok((0, t.shape()[1..].iter().product())),
        None => Err(Error::Precondition("scalar has no rows".into())),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval<V: Values + ?Sized>(op: &Op, vals: &V) -> Result<Tensor> {
    use Op::*;
    Ok(match op {
        Leaf => unreachable!("leaves are never evaluated"),
        Detach(a) => vals.val(*a).clone(),
        MatMul(a, b) => {
            let (a, b) = (vals.val(*a), vals.val(*b));
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::new(vec![m, n], out)?
        }
        MatMulNt(a, b) => {
            let (a, b) = (vals.val(*a), vals.val(*b));
            let (m, k) = a.dims2()?;
            let (n, k2) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
            Tensor::new(vec![m, n], out)?
        }
        BatchMatMul(a, b) => {
            let (a, b) = (vals.val(*a), vals.val(*b));
            let (bt, m, k) = a.dims3()?;
            let (bt2, k2, n) = b.dims3()?;
            if bt != bt2 || k != k2 {
                return Err(Error::shape("bmm", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; bt * m * n];
            for i in 0..bt {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Tensor::new(vec![bt, m, n], out)?
        }
        Transpose(a) => transpose_data(vals.val(*a))?,
        Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => {
            let (x, y) = (vals.val(*a), vals.val(*b));
            same_shape("elementwise", x, y)?;
            match op {
                Add(..) => zip_map(x, y, |p, q| p + q),
                Sub(..) => zip_map(x, y, |p, q| p - q),
                Mul(..) => zip_map(x, y, |p, q| p * q),
                _ => zip_map(x, y, |p, q| p / q),
            }
        }
        AddScalar(a, c) => vals.val(*a).map(|v| v + c),
        MulScalar(a, c) => vals.val(*a).map(|v| v * c),
        BroadcastRows(a, rows) => {
            let v = vals.val(*a);
            if v.rank() != 1 {
                return Err(Error::shape("broadcast_rows", v.shape(), &[0]));
            }
            let mut out = Vec::with_capacity(rows * v.len());
            for _ in 0..*rows {
                out.extend_from_slice(v.data());
            }
            Tensor::new(vec![*rows, v.len()], out)?
        }
        BroadcastCols(a, cols) => {
            let v = vals.val(*a);
            let (n, one) = v.dims2()?;
            if one != 1 {
                return Err(Error::shape("broadcast_cols", v.shape(), &[n, 1]));
            }
            let mut out = Vec::with_capacity(n * cols);
            for &x in v.data() {
                out.extend(std::iter::repeat_n(x, *cols));
            }
            Tensor::new(vec![n, *cols], out)?
        }
        Reshape(a, shape) => vals.val(*a).clone().reshaped(shape.clone())?,
        ConcatCols(parts) => {
            let first = parts
                .first()
                .ok_or_else(|| Error::Precondition("concat of nothing".into()))?;
            let (n, _) = vals.val(*first).dims2()?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = vals.val(*p);
                let (r, c) = t.dims2()?;
                if r != n {
                    return Err(Error::shape("concat_cols", vals.val(*first).shape(), t.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(n * total);
            for i in 0..n {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&vals.val(*p).data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(vec![n, total], out)?
        }
        ConcatRows(parts) => {
            let first = parts
                .first()
                .ok_or_else(|| Error::Precondition("concat of nothing".into()))?;
            let tail = vals.val(*first).shape()[1..].to_vec();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let t = vals.val(*p);
                if t.rank() == 0 || t.shape()[1..] != tail[..] {
                    return Err(Error::shape("concat_rows", vals.val(*first).shape(), t.shape()));
                }
                rows += t.shape()[0];
                out.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(&tail);
            Tensor::new(shape, out)?
        }
        GatherRows(a, rows) => {
            let t = vals.val(*a);
            let (n, w) = rows_of(t)?;
            let mut out = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                if r >= n {
                    return Err(Error::Precondition(format!(
                        "row index {r} out of range for {n} rows"
                    )));
                }
                out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, out)?
        }
        Sum(a) => Tensor::scalar(vals.val(*a).data().iter().sum()),
        Mean(a) => {
            let t = vals.val(*a);
            if t.is_empty() {
                return Err(Error::Precondition("mean of empty tensor".into()));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        SumCols(a) => {
            let t = vals.val(*a);
            let (n, c) = t.dims2()?;
            let out = (0..n).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor::new(vec![n, 1], out)?
        }
        ColMean(a) => {
            let t = vals.val(*a);
            col_mean(t)?
        }
        ColVar(a) => {
            let t = vals.val(*a);
            let mean = col_mean(t)?;
            let (b, h) = t.dims2()?;
            let mut var = vec![0.0; h];
            for i in 0..b {
                for j in 0..h {
                    let d = t.data()[i * h + j] - mean.data()[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            Tensor::new(vec![h], var)?
        }
        Sigmoid(a) => vals.val(*a).map(sigmoid),
        Relu(a) => vals.val(*a).map(|v| if v < 0.0 { 0.0 } else { v }),
        Log(a) => vals.val(*a).map(f64::ln),
        Sqrt(a) => vals.val(*a).map(f64::sqrt),
        Clip(a, lo, hi) => vals.val(*a).map(|v| v.clamp(*lo, *hi)),
    })
}

fn col_mean(t: &Tensor) -> Result<Tensor> {
    let (b, h) = t.dims2()?;
    if b == 0 {
        return Err(Error::Precondition("batch statistics need at least one row".into()));
    }
    let mut mean = vec![0.0; h];
    for i in 0..b {
        for j in 0..h {
            mean[j] += t.data()[i * h + j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= b as f64);
    Tensor::new(vec![h], mean)
}

fn backprop(op: &Op, g: &Tensor, out: &Tensor, nodes: &[Node]) -> Result<Vec<(Var, Tensor)>> {
    use Op::*;
    let val = |v: &Var| &nodes[v.0].value;
    Ok(match op {
        Leaf | Detach(_) => vec![],
        MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2()?;
            let (_, n) = bv.dims2()?;
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
            vec![
                (*a, Tensor::new(vec![m, k], ga)?),
                (*b, Tensor::new(vec![k, n], gb)?),
            ]
        }
        MatMulNt(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2()?;
            let (n, _) = bv.dims2()?;
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g.data(), false, bv.data(), false, &mut ga, false);
            let mut gb = vec![0.0; n * k];
            gemm(n, m, k, g.data(), true, av.data(), false, &mut gb, false);
            vec![
                (*a, Tensor::new(vec![m, k], ga)?),
                (*b, Tensor::new(vec![n, k], gb)?),
            ]
        }
        BatchMatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (bt, m, k) = av.dims3()?;
            let (_, _, n) = bv.dims3()?;
            let mut ga = vec![0.0; bt * m * k];
            let mut gb = vec![0.0; bt * k * n];
            for i in 0..bt {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &av.data()[i * m * k..(i + 1) * m * k];
                let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                gemm(m, n, k, gi, false, bi, true, &mut ga[i * m * k..(i + 1) * m * k], false);
                gemm(k, m, n, ai, true, gi, false, &mut gb[i * k * n..(i + 1) * k * n], false);
            }
            vec![
                (*a, Tensor::new(vec![bt, m, k], ga)?),
                (*b, Tensor::new(vec![bt, k, n], gb)?),
            ]
        }
        Transpose(a) => vec![(*a, transpose_data(g)?)],
        Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Mul(a, b) => vec![
            (*a, zip_map(g, val(b), |p, q| p * q)),
            (*b, zip_map(g, val(a), |p, q| p * q)),
        ],
        Div(a, b) => {
            let (x, y) = (val(a), val(b));
            let gb = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&gi, (&xi, &yi))| -gi * xi / (yi * yi))
                .collect();
            vec![
                (*a, zip_map(g, y, |p, q| p / q)),
                (*b, Tensor::new(y.shape().to_vec(), gb)?),
            ]
        }
        AddScalar(a, _) => vec![(*a, g.clone())],
        MulScalar(a, c) => vec![(*a, g.map(|v| v * c))],
        BroadcastRows(a, rows) => {
            let h = val(a).len();
            let mut acc = vec![0.0; h];
            for i in 0..*rows {
                for j in 0..h {
                    acc[j] += g.data()[i * h + j];
                }
            }
            vec![(*a, Tensor::new(vec![h], acc)?)]
        }
        BroadcastCols(a, cols) => {
            let n = val(a).len();
            let acc = (0..n)
                .map(|i| g.data()[i * cols..(i + 1) * cols].iter().sum())
                .collect();
            vec![(*a, Tensor::new(vec![n, 1], acc)?)]
        }
        Reshape(a, _) => vec![(*a, g.clone().reshaped(val(a).shape().to_vec())?)],
        ConcatCols(parts) => {
            let (n, total) = g.dims2()?;
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let (_, w) = val(p).dims2()?;
                let mut part = Vec::with_capacity(n * w);
                for i in 0..n {
                    part.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                offset += w;
                res.push((*p, Tensor::new(vec![n, w], part)?));
            }
            res
        }
        ConcatRows(parts) => {
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let len = val(p).len();
                let part = g.data()[offset..offset + len].to_vec();
                offset += len;
                res.push((*p, Tensor::new(val(p).shape().to_vec(), part)?));
            }
            res
        }
        GatherRows(a, rows) => {
            let src = val(a);
            let (_, w) = rows_of(src)?;
            let mut acc = Tensor::zeros(src.shape().to_vec());
            let data = acc.data_mut();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..w {
                    data[r * w + j] += g.data()[k * w + j];
                }
            }
            vec![(*a, acc)]
        }
        Sum(a) => vec![(*a, Tensor::full(val(a).shape().to_vec(), g.data()[0]))],
        Mean(a) => {
            let n = val(a).len() as f64;
            vec![(*a, Tensor::full(val(a).shape().to_vec(), g.data()[0] / n))]
        }
        SumCols(a) => {
            let (n, c) = val(a).dims2()?;
            let mut acc = Vec::with_capacity(n * c);
            for i in 0..n {
                acc.extend(std::iter::repeat_n(g.data()[i], c));
            }
            vec![(*a, Tensor::new(vec![n, c], acc)?)]
        }
        ColMean(a) => {
            let (b, h) = val(a).dims2()?;
            let mut acc = Vec::with_capacity(b * h);
            for _ in 0..b {
                acc.extend(g.data().iter().map(|v| v / b as f64));
            }
            vec![(*a, Tensor::new(vec![b, h], acc)?)]
        }
        ColVar(a) => {
            let x = val(a);
            let (b, h) = x.dims2()?;
            let mean = col_mean(x)?;
            let scale = 2.0 / b as f64;
            let mut acc = Vec::with_capacity(b * h);
            for i in 0..b {
                for j in 0..h {
                    acc.push(g.data()[j] * scale * (x.data()[i * h + j] - mean.data()[j]));
                }
            }
            vec![(*a, Tensor::new(vec![b, h], acc)?)]
        }
        Sigmoid(a) => vec![(*a, zip_map(g, out, |gi, s| gi * s * (1.0 - s)))],
        Relu(a) => vec![(*a, zip_map(g, val(a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
        Log(a) => vec![(*a, zip_map(g, val(a), |gi, x| gi / x))],
        Sqrt(a) => vec![(*a, zip_map(g, out, |gi, y| gi / (2.0 * y)))],
        Clip(a, lo, hi) => vec![(
            *a,
            zip_map(g, val(a), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 }),
        )],
    })
}
