//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values are pushed as nodes in
//! creation order, so the node list is already a topological order and the
//! backward sweep simply walks it in reverse. Only the operations the
//! distribution auto-encoder needs are provided; there is no broadcasting
//! beyond the row-wise bias add.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Largest argument accepted by `exp` before the result overflows.
pub const EXP_MAX_ARG: f64 = 709.0;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(skip))]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Square,
    Reciprocal,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Reciprocal => "reciprocal",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Unary(Var, Unary),
    Mean(Var),
    Sum(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    SoftmaxXent(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => [Some(a), Some(b)],
            Op::Relu(a)
            | Op::Unary(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Clamp(a, _, _)
            | Op::Reshape(a)
            | Op::SoftmaxXent(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    corrupt_matmul: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug hook: deliberately mis-scales the weight gradient of every
    /// matmul. Used as the negative control of the gradient checker.
    pub fn corrupt_matmul_backward(&mut self) {
        self.corrupt_matmul = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Copies a parameter's current value onto the tape as a differentiable leaf.
    pub fn param(&mut self, param: &Parameter) -> Var {
        self.push_leaf(param.tensor.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node; `None` until a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Every node's inputs precede it on the tape.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().flatten().all(|v| v.0 < i))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape_err = || Error::Shape {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let (m, k) = ta.rows_cols().ok_or_else(shape_err)?;
        let (k2, n) = tb.rows_cols().ok_or_else(shape_err)?;
        if k != k2 {
            return Err(shape_err());
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = match (tx.rows_cols(), tb.shape()) {
            (Some((_, n)), [nb]) if n == *nb => n,
            _ => {
                return Err(Error::Shape {
                    op: "add_bias",
                    left: tx.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data: out, grad: None }, Op::Relu(x))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            let y = match f {
                Unary::Exp if v <= EXP_MAX_ARG => libm::exp(v),
                Unary::Log if v > 0.0 => libm::log(v),
                Unary::Square => v * v,
                Unary::Reciprocal if v != 0.0 => 1.0 / v,
                _ => return Err(Error::Domain { op: f.name(), index: i }),
            };
            out.push(y);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data: out, grad: None }, Op::Unary(x, f)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Reciprocal)
    }

    /// Arithmetic mean of all elements, as a scalar.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("reduce_mean"));
        }
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(mean), Op::Mean(x)))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data, grad: None }, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain { op: "div", index: i });
        }
        Ok(self.zip_with(Op::Div(a, b), a, b, |x, y| x / y))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data, grad: None }, Op::Scale(x, c))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data, grad: None }, Op::Shift(x))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient flows only where the input
    /// lies inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data, grad: None }, Op::Clamp(x, lo, hi))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape,
            });
        }
        let data = t.data().to_vec();
        Ok(self.push(Tensor { shape, data, grad: None }, Op::Reshape(x)))
    }

    /// Per-row softmax cross-entropy of `logits[m×k]` against class indices,
    /// returning a length-`m` vector of losses.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, k) = t.rows_cols().ok_or_else(|| Error::Shape {
            op: "softmax_cross_entropy",
            left: t.shape().to_vec(),
            right: vec![targets.len()],
        })?;
        if m != targets.len() || k == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(i) = targets.iter().position(|&c| c >= k) {
            return Err(Error::Domain {
                op: "softmax_cross_entropy",
                index: i,
            });
        }
        let out = t
            .data()
            .chunks(k)
            .zip(targets)
            .map(|(row, &c)| log_sum_exp(row) - row[c])
            .collect();
        Ok(self.push(Tensor::vector(out), Op::SoftmaxXent(logits, targets.to_vec())))
    }

    /// Back-propagates from a scalar `loss`, adding dLoss/dNode into the
    /// gradient buffer of every differentiable node that reaches it.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_backward(i, &g);
            for (input, delta) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.rows_cols().unwrap();
                let n = self.nodes[b.0].value.rows_cols().unwrap().1;
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    // dA = dOut · Bᵀ
                    let bt = transpose(val(*b), k, n);
                    out.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dOut
                    let at = transpose(val(*a), m, k);
                    let mut db = matmul_raw(&at, g, k, m, n);
                    if self.corrupt_matmul {
                        db.iter_mut().for_each(|d| *d *= 1.5);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::AddBias(x, b) => {
                let n = self.nodes[b.0].value.len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Unary(x, f) => {
                let xs = val(*x);
                let ys = node.value.data();
                let d = xs
                    .iter()
                    .zip(ys)
                    .zip(g)
                    .map(|((&x, &y), &g)| match f {
                        Unary::Exp => g * y,
                        Unary::Log => g / x,
                        Unary::Square => 2.0 * x * g,
                        Unary::Reciprocal => -g * y * y,
                    })
                    .collect();
                vec![(*x, d)]
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0]; n])]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let da = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(va).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let da = g.iter().zip(vb).map(|(g, y)| g / y).collect();
                let db = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|g| g * c).collect())],
            Op::Shift(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Clamp(x, lo, hi) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::SoftmaxXent(x, targets) => {
                let k = self.nodes[x.0].value.rows_cols().unwrap().1;
                let mut d = Vec::with_capacity(self.nodes[x.0].value.len());
                for ((row, &c), &gi) in val(*x).chunks(k).zip(targets).zip(g) {
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = libm::exp(z - lse);
                        let onehot = if j == c { 1.0 } else { 0.0 };
                        d.push(gi * (p - onehot));
                    }
                }
                vec![(*x, d)]
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|z| libm::exp(z - max)).sum::<f64>())
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Row-major `[m×k]·[k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1]);
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                left: vec![1, 2],
                right: vec![3, 1]
            }
        );
    }

    #[test]
    fn matmul_gradient_wrt_left() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = tape.matmul(a, b).unwrap();
        let s = tape.reduce_sum(p);
        tape.backward(s).unwrap();
        let fd = central_diff(|x| x[0] * 3.0 + x[1] * 4.0, &[1.0, 2.0], 1e-5);
        let g = tape.grad(a).unwrap();
        for (g, f) in g.iter().zip(&fd) {
            assert!((g - f).abs() < 1e-8);
        }
        assert_eq!(g, &[3.0, 4.0]);
    }

    #[test]
    fn add_bias_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let out = tape.add_bias(x, z).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0]);

        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![10.0, 20.0]));
        let out = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0, 22.0]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![0.5; 6]).unwrap());
        let b = tape.variable(Tensor::vector(vec![1.0, -1.0]));
        let out = tape.add_bias(x, b).unwrap();
        let s = tape.reduce_sum(out);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);

        let bad = tape.constant(Tensor::vector(vec![1.0; 3]));
        assert!(matches!(tape.add_bias(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.reduce_sum(y);
        tape.backward(s).unwrap();
        // subgradient 0 at exactly 0
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![-3.0, -0.5]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let s = tape.reduce_sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![3.0, -3.0]));
        let y = tape.relu(x);
        let s = tape.reduce_sum(y);
        tape.backward(s).unwrap();
        let fd = central_diff(|v| v.iter().map(|v| v.max(0.0)).sum(), &[3.0, -3.0], 1e-5);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
        assert!((fd[0] - 1.0).abs() < 1e-9 && fd[1].abs() < 1e-12);
    }

    #[test]
    fn elementwise_values_and_domains() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0]);
        let one = tape.constant(Tensor::vector(vec![1.0]));
        let l = tape.log(one).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);

        let bad = tape.constant(Tensor::vector(vec![1.0, 2.0, -1.0]));
        assert_eq!(
            tape.log(bad).unwrap_err(),
            Error::Domain { op: "log", index: 2 }
        );
        let zero = tape.constant(Tensor::vector(vec![4.0, 0.0]));
        assert_eq!(
            tape.reciprocal(zero).unwrap_err(),
            Error::Domain {
                op: "reciprocal",
                index: 1
            }
        );
        let huge = tape.constant(Tensor::vector(vec![800.0]));
        assert!(tape.exp(huge).is_err());
    }

    #[test]
    fn square_derivative_at_three() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![3.0]));
        let y = tape.square(x).unwrap();
        let s = tape.reduce_sum(y);
        tape.backward(s).unwrap();
        let fd = central_diff(|v| v[0] * v[0], &[3.0], 1e-5);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        assert!((fd[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn reduce_mean_cases() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![2.0, 4.0]));
        let m = tape.reduce_mean(x).unwrap();
        assert_eq!(tape.value(m).item(), Some(3.0));
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5]);

        let c = tape.constant(Tensor::vector(vec![7.25]));
        let m = tape.reduce_mean(c).unwrap();
        assert_eq!(tape.value(m).item(), Some(7.25));

        let empty = tape.constant(Tensor::vector(Vec::new()));
        assert_eq!(tape.reduce_mean(empty).unwrap_err(), Error::Empty("reduce_mean"));
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let s = tape.reduce_sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(w).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn linear_mse_matches_finite_differences() {
        // loss = mean((w·x − y)²) with x [3×2], w [2×1]
        let x = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let y = [1.0, -0.5, 0.25];
        let w0 = [0.8, -0.3];
        let loss = |w: &[f64]| {
            (0..3)
                .map(|i| {
                    let p = x[2 * i] * w[0] + x[2 * i + 1] * w[1];
                    (p - y[i]) * (p - y[i])
                })
                .sum::<f64>()
                / 3.0
        };
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(3, 2, x.to_vec()).unwrap());
        let wv = tape.variable(Tensor::matrix(2, 1, w0.to_vec()).unwrap());
        let yv = tape.constant(Tensor::matrix(3, 1, y.to_vec()).unwrap());
        let p = tape.matmul(xv, wv).unwrap();
        let r = tape.sub(p, yv).unwrap();
        let r2 = tape.square(r).unwrap();
        let l = tape.reduce_mean(r2).unwrap();
        assert!((tape.value(l).item().unwrap() - loss(&w0)).abs() < 1e-15);
        tape.backward(l).unwrap();
        let fd = central_diff(loss, &w0, 1e-5);
        for (g, f) in tape.grad(wv).unwrap().iter().zip(&fd) {
            assert!((g - f).abs() / f.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![-20.0, 0.5, 20.0]));
        let c = tape.clamp(x, -10.0, 10.0);
        assert_eq!(tape.value(c).data(), &[-10.0, 0.5, 10.0]);
        let s = tape.reduce_sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_cross_entropy_value_and_grad() {
        let logits = [0.2, -1.0, 0.7, 1.5, 0.0, -0.3];
        let targets = [2usize, 0];
        let loss = |z: &[f64]| {
            z.chunks(3)
                .zip(&targets)
                .map(|(r, &c)| {
                    let s: f64 = r.iter().map(|v| v.exp()).sum();
                    s.ln() - r[c]
                })
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::matrix(2, 3, logits.to_vec()).unwrap());
        let ce = tape.softmax_cross_entropy(z, &targets).unwrap();
        let s = tape.reduce_sum(ce);
        assert!((tape.value(s).item().unwrap() - loss(&logits)).abs() < 1e-12);
        tape.backward(s).unwrap();
        let fd = central_diff(loss, &logits, 1e-5);
        for (g, f) in tape.grad(z).unwrap().iter().zip(&fd) {
            assert!((g - f).abs() < 1e-8);
        }
        assert!(tape.softmax_cross_entropy(z, &[3, 0]).is_err());
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.exp(a).unwrap();
        let c = tape.mul(a, b).unwrap();
        let _ = tape.reduce_mean(c).unwrap();
        assert!(tape.is_topologically_ordered());
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.variable(Tensor::vector(vec![2.0]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.reduce_sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }
}
