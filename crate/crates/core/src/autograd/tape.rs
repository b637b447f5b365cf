use std::collections::BTreeMap;

use rand::Rng;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds.
///
/// Binary element-wise ops (`Add`, `Sub`, `Mul`, `Div`) broadcast their second
/// operand over the leading axes of the first: the second operand's shape,
/// ignoring leading unit axes, must be a suffix of the first's (a scalar always
/// qualifies). All rank-2 ops treat the last axis as features.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Square,
    /// Sum of all entries, yielding a scalar.
    Sum,
    /// Mean of all entries, yielding a scalar.
    Mean,
    /// Sum over the last axis, dropping it.
    SumLastAxis,
    Scale(f64),
    Offset(f64),
    /// Element-wise clamp; the gradient passes only inside `[lo, hi]`.
    Clamp { lo: f64, hi: f64 },
    /// Concatenation of rank-2 inputs along the last axis.
    Concat,
    /// Columns `start..start + len` of a rank-2 input.
    Slice { start: usize, len: usize },
    Transpose,
    /// Row-wise log-softmax of a rank-2 input.
    LogSoftmax,
    /// Pairwise squared Euclidean distances between the rows of two rank-2
    /// inputs: `out[i, j] = ‖a_i − b_j‖²`.
    SquaredDistances,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLastAxis => "sum_last_axis",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Clamp { .. } => "clamp",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::LogSoftmax => "log_softmax",
            Op::SquaredDistances => "squared_distances",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::SquaredDistances => Some(2),
            Op::Concat => None,
            _ => Some(1),
        }
    }
}

enum Kind {
    Leaf,
    Op(Op),
    Dropout(Vec<f64>),
}

struct Node {
    value: Tensor,
    kind: Kind,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Linear record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every input of a node precedes
/// it and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    fault: Option<String>,
}

/// Tape handles for every parameter of a [`ParameterStore`], keyed by path.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.0
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    by_path: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to every parameter registered on the tape.
    /// Parameters the loss does not depend on get zeros.
    pub fn by_path(&self) -> &BTreeMap<String, Tensor> {
        &self.by_path
    }

    pub fn into_by_path(self) -> BTreeMap<String, Tensor> {
        self.by_path
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Perturbs the backward rule of the named op kind. Only used to check
    /// that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    fn push(&mut self, value: Tensor, kind: Kind, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Kind::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable leaf under `path`.
    pub fn param(&mut self, path: &str, value: Tensor) -> Var {
        let v = self.leaf(value, true);
        self.params.push((path.to_string(), v));
        v
    }

    /// Registers every parameter of `store` as a trainable leaf.
    pub fn bind(&mut self, store: &ParameterStore) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (path, t) in store.iter() {
            vars.insert(path.clone(), self.param(path, t.clone()));
        }
        ParamVars(vars)
    }

    /// Executes `op` on `inputs` and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{}: expected {n} inputs, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(format!("{}: needs at least one input", op.name())));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        Ok(self.push(out, Kind::Op(op), inputs.to_vec(), requires_grad))
    }

    /// Inverted dropout. In evaluation mode, or with `rate == 0`, returns `x`
    /// itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout: rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Kind::Dropout(mask), vec![x], rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumLastAxis, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Offset(c), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { start, len }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn squared_distances(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::SquaredDistances, &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|v| self.requires_grad(*v)).collect();
            let input_grads = match &node.kind {
                Kind::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Kind::Dropout(mask) => {
                    vec![Some(g.iter().zip(mask).map(|(g, m)| g * m).collect())]
                }
                Kind::Op(op) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| self.value(*v)).collect();
                    let mut ig = backward_op(op, &inputs, &node.value, &g, &need);
                    if self.fault.as_deref() == Some(op.name()) {
                        for gi in ig.iter_mut().flatten() {
                            gi.iter_mut().for_each(|x| *x *= 1.5);
                        }
                    }
                    ig
                }
            };
            for ((input, gi), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                if !needed {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }

        let mut node_grads = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            node_grads.push(match g {
                Some(g) => Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g)?),
                None => None,
            });
        }
        let mut by_path = BTreeMap::new();
        for (path, var) in &self.params {
            let t = match node_grads.get(var.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(*var).shape()),
            };
            by_path.insert(path.clone(), t);
        }
        Ok(Gradients {
            grads: node_grads,
            by_path,
        })
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let k = shape.iter().take_while(|&&d| d == 1).count();
    &shape[k..]
}

fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let bs = strip_leading_ones(b.shape());
    if a.shape() == b.shape() || bs.is_empty() || a.shape().ends_with(bs) {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let nb = b.numel();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % nb]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    Ok(match op {
        Op::MatMul => {
            let (n, k) = require_rank2(name, x[0])?;
            let (k2, m) = require_rank2(name, x[1])?;
            if k != k2 {
                return Err(Error::Shape {
                    op: name,
                    left: x[0].shape().to_vec(),
                    right: x[1].shape().to_vec(),
                });
            }
            let (a, b) = (x[0].data(), x[1].data());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for kk in 0..k {
                    let aik = a[i * k + kk];
                    let brow = &b[kk * m..(kk + 1) * m];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
            Tensor::new(vec![n, m], out)?
        }
        Op::Add => {
            check_broadcast(name, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a + b)
        }
        Op::Sub => {
            check_broadcast(name, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a - b)
        }
        Op::Mul => {
            check_broadcast(name, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a * b)
        }
        Op::Div => {
            check_broadcast(name, x[0], x[1])?;
            if let Some(&v) = x[1].data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain { op: name, value: v });
            }
            binary(x[0], x[1], |a, b| a / b)
        }
        Op::Neg => x[0].map(|v| -v),
        Op::Exp => x[0].map(f64::exp),
        Op::Log => {
            if let Some(&v) = x[0].data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain { op: name, value: v });
            }
            x[0].map(f64::ln)
        }
        Op::Softplus => x[0].map(stable_softplus),
        Op::Sigmoid => x[0].map(stable_sigmoid),
        Op::Square => x[0].map(|v| v * v),
        Op::Sum => Tensor::scalar(x[0].data().iter().sum()),
        Op::Mean => {
            let n = x[0].numel().max(1) as f64;
            Tensor::scalar(x[0].data().iter().sum::<f64>() / n)
        }
        Op::SumLastAxis => {
            let t = x[0];
            if t.rank() == 0 {
                return Err(Error::Shape {
                    op: name,
                    left: vec![],
                    right: vec![1],
                });
            }
            let c = t.cols();
            let out: Vec<f64> = if c == 0 {
                vec![0.0; t.shape()[..t.rank() - 1].iter().product()]
            } else {
                t.data().chunks(c).map(|r| r.iter().sum()).collect()
            };
            Tensor::new(t.shape()[..t.rank() - 1].to_vec(), out)?
        }
        Op::Scale(c) => x[0].map(|v| c * v),
        Op::Offset(c) => x[0].map(|v| v + c),
        Op::Clamp { lo, hi } => x[0].map(|v| v.clamp(*lo, *hi)),
        Op::Concat => {
            let rows = require_rank2(name, x[0])?.0;
            for t in x {
                let (r, _) = require_rank2(name, t)?;
                if r != rows {
                    return Err(Error::Shape {
                        op: name,
                        left: x[0].shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
            }
            Tensor::concat_cols(x)?
        }
        Op::Slice { start, len } => {
            let (_, c) = require_rank2(name, x[0])?;
            if start + len > c {
                return Err(Error::Shape {
                    op: name,
                    left: x[0].shape().to_vec(),
                    right: vec![start + len],
                });
            }
            x[0].slice_cols(*start, *len)
        }
        Op::Transpose => {
            let (r, c) = require_rank2(name, x[0])?;
            let d = x[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        }
        Op::LogSoftmax => {
            let (r, c) = require_rank2(name, x[0])?;
            let mut out = Vec::with_capacity(r * c);
            for row in x[0].data().chunks(c.max(1)).take(r) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(vec![r, c], out)?
        }
        Op::SquaredDistances => {
            let (n, d) = require_rank2(name, x[0])?;
            let (m, d2) = require_rank2(name, x[1])?;
            if d != d2 {
                return Err(Error::Shape {
                    op: name,
                    left: x[0].shape().to_vec(),
                    right: x[1].shape().to_vec(),
                });
            }
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let ai = x[0].row(i);
                for j in 0..m {
                    let bj = x[1].row(j);
                    let mut s = 0.0;
                    for (p, q) in ai.iter().zip(bj) {
                        let t = p - q;
                        s += t * t;
                    }
                    out[i * m + j] = s;
                }
            }
            Tensor::new(vec![n, m], out)?
        }
    })
}

/// Vector-Jacobian products for one recorded op. Entries are `None` where
/// the corresponding input does not need a gradient.
fn backward_op(op: &Op, x: &[&Tensor], out: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let unary = |f: &dyn Fn(usize) -> f64| vec![Some((0..g.len()).map(f).collect::<Vec<f64>>())];
    match op {
        Op::MatMul => {
            let (n, k) = (x[0].shape()[0], x[0].shape()[1]);
            let m = x[1].shape()[1];
            let (a, b) = (x[0].data(), x[1].data());
            let da = need[0].then(|| {
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for kk in 0..k {
                        da[i * k + kk] = dot(grow, &b[kk * m..(kk + 1) * m]);
                    }
                }
                da
            });
            let db = need[1].then(|| {
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for kk in 0..k {
                        let aik = a[i * k + kk];
                        for (d, gv) in db[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                            *d += aik * gv;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let nb = x[1].numel();
            let (a, b) = (x[0].data(), x[1].data());
            let da = need[0].then(|| match op {
                Op::Add | Op::Sub => g.to_vec(),
                Op::Mul => g.iter().enumerate().map(|(i, gv)| gv * b[i % nb]).collect(),
                _ => g.iter().enumerate().map(|(i, gv)| gv / b[i % nb]).collect(),
            });
            let db = need[1].then(|| {
                let mut db = vec![0.0; nb];
                for (i, gv) in g.iter().enumerate() {
                    let j = i % nb;
                    db[j] += match op {
                        Op::Add => *gv,
                        Op::Sub => -gv,
                        Op::Mul => gv * a[i],
                        _ => -gv * a[i] / (b[j] * b[j]),
                    };
                }
                db
            });
            vec![da, db]
        }
        Op::Neg => unary(&|i| -g[i]),
        Op::Exp => unary(&|i| g[i] * out.data()[i]),
        Op::Log => unary(&|i| g[i] / x[0].data()[i]),
        Op::Softplus => unary(&|i| g[i] * stable_sigmoid(x[0].data()[i])),
        Op::Sigmoid => unary(&|i| {
            let s = out.data()[i];
            g[i] * s * (1.0 - s)
        }),
        Op::Square => unary(&|i| 2.0 * x[0].data()[i] * g[i]),
        Op::Sum => vec![Some(vec![g[0]; x[0].numel()])],
        Op::Mean => {
            let n = x[0].numel().max(1) as f64;
            vec![Some(vec![g[0] / n; x[0].numel()])]
        }
        Op::SumLastAxis => {
            let c = x[0].cols();
            let mut d = Vec::with_capacity(x[0].numel());
            for gv in g {
                d.extend(std::iter::repeat_n(*gv, c));
            }
            vec![Some(d)]
        }
        Op::Scale(c) => unary(&|i| c * g[i]),
        Op::Offset(_) => vec![Some(g.to_vec())],
        Op::Clamp { lo, hi } => unary(&|i| {
            let v = x[0].data()[i];
            if v >= *lo && v <= *hi {
                g[i]
            } else {
                0.0
            }
        }),
        Op::Concat => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            let mut res = Vec::with_capacity(x.len());
            for (t, needed) in x.iter().zip(need) {
                let c = t.cols();
                if *needed {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    res.push(Some(d));
                } else {
                    res.push(None);
                }
                offset += c;
            }
            res
        }
        Op::Slice { start, len } => {
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(d)]
        }
        Op::Transpose => {
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(d)]
        }
        Op::LogSoftmax => {
            let c = x[0].cols().max(1);
            let mut d = Vec::with_capacity(g.len());
            for (grow, orow) in g.chunks(c).zip(out.data().chunks(c)) {
                let gs: f64 = grow.iter().sum();
                d.extend(grow.iter().zip(orow).map(|(gv, o)| gv - o.exp() * gs));
            }
            vec![Some(d)]
        }
        Op::SquaredDistances => {
            let (n, dim) = (x[0].shape()[0], x[0].shape()[1]);
            let m = x[1].shape()[0];
            let mut da = need[0].then(|| vec![0.0; n * dim]);
            let mut db = need[1].then(|| vec![0.0; m * dim]);
            for i in 0..n {
                let ai = x[0].row(i);
                for j in 0..m {
                    let gij = g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = x[1].row(j);
                    for k in 0..dim {
                        let t = 2.0 * gij * (ai[k] - bj[k]);
                        if let Some(da) = da.as_mut() {
                            da[i * dim + k] += t;
                        }
                        if let Some(db) = db.as_mut() {
                            db[j * dim + k] -= t;
                        }
                    }
                }
            }
            vec![da, db]
        }
    }
}
