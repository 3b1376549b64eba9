//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded operation
//! appends a node holding its forward value and the ids of its inputs, so the
//! node list is always in topological order. [`Tape::backward`] walks it in
//! reverse, accumulating vector-Jacobian products.
//!
//! Binary elementwise ops (`add`, `sub`, `hadamard`, `div`) accept a right
//! operand that broadcasts to the left one: either a one-element tensor, or a
//! tensor of the same rank whose extents are 1 wherever they differ.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Hadamard,
    Div,
    Scale,
    Sigmoid,
    Tanh,
    Softplus,
    EluPlusOne,
    Exp,
    Sqrt,
    Square,
    Sum,
    Mean,
    Concat,
    Slice,
    Transpose,
    SoftmaxRows,
    MseLoss,
    CrossEntropyLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softplus,
        OpKind::EluPlusOne,
        OpKind::Exp,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::SoftmaxRows,
        OpKind::MseLoss,
        OpKind::CrossEntropyLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::EluPlusOne => "elu_plus_one",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::MseLoss => "mse_loss",
            OpKind::CrossEntropyLoss => "cross_entropy_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-tensor arguments for [`Tape::record`].
#[derive(Clone, Debug, Default)]
pub enum OpAttrs {
    #[default]
    None,
    Scale(f64),
    Axis(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Target(Tensor),
    Classes {
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(OpKind, Var),
    Binary(OpKind, Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Mse {
        input: Var,
        target: Tensor,
    },
    CrossEntropy {
        input: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    fault: Option<OpKind>,
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    disconnected: bool,
}

impl Gradients {
    /// Gradient of the root with respect to a registered parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// All parameter gradients, ordered by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to any node; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.adjoints[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// True when the root does not depend on any registered parameter.
    pub fn disconnected(&self) -> bool {
        self.disconnected
    }
}

enum Bcast {
    Same,
    Map(Vec<usize>),
}

impl Bcast {
    fn new(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        let n: usize = lhs.iter().product();
        let rn: usize = rhs.iter().product();
        if rn == 1 {
            return Ok(Bcast::Map(vec![0; n]));
        }
        let bad = || Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs.len() != rhs.len() {
            return Err(bad());
        }
        if lhs.iter().zip(rhs).any(|(&l, &r)| r != l && r != 1) {
            return Err(bad());
        }
        let rank = lhs.len();
        let mut rstride = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            rstride[d] = if rhs[d] == 1 { 0 } else { acc };
            acc *= rhs[d];
        }
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&rstride).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < lhs[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Bcast::Map(map))
    }

    fn get(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Map(m) => m[i],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn check_finite(t: &Tensor, op: OpKind) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: op.name().to_string(),
        })
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

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Registers every entry of `params`, returning the handles by name.
    pub fn register(&mut self, params: &crate::ParamMap) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), self.param(k.clone(), v.clone())))
            .collect()
    }

    /// A leaf whose gradient is tracked but which is not a parameter
    /// (for example the state argument of a vector-Jacobian product).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Corrupts the vector-Jacobian product of one op kind. Only meant for
    /// checking that the gradient verification catches broken backward rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Generic entry point: records `kind` applied to `inputs`.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Hadamard | OpKind::Div => {
                arity(2)?;
                self.binary(kind, inputs[0], inputs[1])
            }
            OpKind::Scale => {
                arity(1)?;
                match attrs {
                    OpAttrs::Scale(c) => self.scale(inputs[0], *c),
                    _ => Err(Error::InvalidArgument("scale needs OpAttrs::Scale".into())),
                }
            }
            OpKind::Concat => match attrs {
                OpAttrs::Axis(axis) => self.concat(inputs, *axis),
                _ => Err(Error::InvalidArgument("concat needs OpAttrs::Axis".into())),
            },
            OpKind::Slice => {
                arity(1)?;
                match attrs {
                    OpAttrs::Slice { axis, start, len } => self.slice(inputs[0], *axis, *start, *len),
                    _ => Err(Error::InvalidArgument("slice needs OpAttrs::Slice".into())),
                }
            }
            OpKind::MseLoss => {
                arity(1)?;
                match attrs {
                    OpAttrs::Target(t) => self.mse_loss(inputs[0], t),
                    _ => Err(Error::InvalidArgument("mse_loss needs OpAttrs::Target".into())),
                }
            }
            OpKind::CrossEntropyLoss => {
                arity(1)?;
                match attrs {
                    OpAttrs::Classes { targets, weights } => {
                        self.cross_entropy_loss(inputs[0], targets, weights.as_deref())
                    }
                    _ => Err(Error::InvalidArgument(
                        "cross_entropy_loss needs OpAttrs::Classes".into(),
                    )),
                }
            }
            _ => {
                arity(1)?;
                self.unary(kind, inputs[0])
            }
        }
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let value = match kind {
            OpKind::MatMul => av.matmul(bv)?,
            _ => {
                let name = kind.name();
                let map = Bcast::new(name, av.shape(), bv.shape())?;
                if kind == OpKind::Div && bv.data().iter().any(|&x| x == 0.0) {
                    return Err(Error::DivisionByZero { op: name });
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    OpKind::Hadamard => |x, y| x * y,
                    OpKind::Div => |x, y| x / y,
                    _ => unreachable!(),
                };
                let bd = bv.data();
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[map.get(i)]))
                    .collect();
                Tensor::from_parts(av.shape().to_vec(), data)
            }
        };
        check_finite(&value, kind)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(kind, a, b), needs))
    }

    fn unary(&mut self, kind: OpKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            OpKind::Sigmoid => x.map(sigmoid),
            OpKind::Tanh => x.map(f64::tanh),
            OpKind::Softplus => x.map(softplus),
            OpKind::EluPlusOne => x.map(|v| if v >= 0.0 { v + 1.0 } else { v.exp() }),
            OpKind::Exp => x.map(f64::exp),
            OpKind::Sqrt => {
                if let Some(&bad) = x.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                x.map(f64::sqrt)
            }
            OpKind::Square => x.map(|v| v * v),
            OpKind::Sum => Tensor::scalar(x.sum()),
            OpKind::Mean => Tensor::scalar(x.sum() / x.numel() as f64),
            OpKind::Transpose => x.transpose()?,
            OpKind::SoftmaxRows => softmax_last_axis(x),
            other => {
                return Err(Error::InvalidArgument(format!("{other} is not a unary op")));
            }
        };
        check_finite(&value, kind)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Unary(kind, a), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::MatMul, a, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Hadamard, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        check_finite(&value, OpKind::Scale)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Scale(a, c), needs))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Tanh, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Softplus, a)
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::EluPlusOne, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Exp, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Square, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Mean, a)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Transpose, a)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::SoftmaxRows, a)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == base[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(inputs.to_vec(), axis),
            needs,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            needs,
        ))
    }

    /// Mean squared error against a fixed target.
    pub fn mse_loss(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: x.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = x.numel() as f64;
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                input: a,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// Weighted mean cross-entropy of logits (last axis = classes) against
    /// integer targets, one per row. Weights default to 1; a zero weight masks
    /// the row out.
    pub fn cross_entropy_loss(&mut self, a: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let x = self.value(a);
        let classes = x.cols();
        let rows = x.numel() / classes;
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_loss",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let weights = weights.map_or_else(|| vec![1.0; rows], <[f64]>::to_vec);
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(
                "cross_entropy_loss: weights sum to zero".into(),
            ));
        }
        let probs = softmax_last_axis(x).into_data();
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] != 0.0 {
                loss -= weights[r] * probs[r * classes + targets[r]].max(f64::MIN_POSITIVE).ln();
            }
        }
        loss /= total;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                input: a,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::from_parts(rv.shape().to_vec(), vec![1.0]));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        let mut disconnected = true;
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            let g = match &adj[v.0] {
                Some(g) => {
                    disconnected = false;
                    g.clone()
                }
                None => Tensor::zeros(self.value(*v).shape()),
            };
            params.insert(name.clone(), g);
        }
        Ok(Gradients {
            params,
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            disconnected,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let fault = |kind: OpKind, t: Tensor| -> Tensor {
            if self.fault == Some(kind) {
                t.scale(1.1)
            } else {
                t
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Scale(a, c) => {
                let ga = fault(OpKind::Scale, g.scale(*c));
                self.accumulate(adj, *a, ga)?;
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let ga = match kind {
                    OpKind::Sigmoid => zip3(g, y, |g, y| g * y * (1.0 - y)),
                    OpKind::Tanh => zip3(g, y, |g, y| g * (1.0 - y * y)),
                    OpKind::Softplus => zip3(g, x, |g, x| g * sigmoid(x)),
                    OpKind::EluPlusOne => {
                        let d = x.map(|v| if v >= 0.0 { 1.0 } else { v.exp() });
                        zip3(g, &d, |g, d| g * d)
                    }
                    OpKind::Exp => zip3(g, y, |g, y| g * y),
                    // The derivative is unbounded at zero; a zero output
                    // contributes nothing (sub-gradient convention).
                    OpKind::Sqrt => zip3(g, y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
                    OpKind::Square => zip3(g, x, |g, x| 2.0 * g * x),
                    OpKind::Sum => Tensor::full(x.shape(), g.data()[0]),
                    OpKind::Mean => Tensor::full(x.shape(), g.data()[0] / x.numel() as f64),
                    OpKind::Transpose => g.transpose()?,
                    OpKind::SoftmaxRows => {
                        let c = y.cols();
                        let mut out = vec![0.0; y.numel()];
                        for r in 0..y.numel() / c {
                            let yr = &y.data()[r * c..(r + 1) * c];
                            let gr = &g.data()[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                out[r * c + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        Tensor::from_parts(y.shape().to_vec(), out)
                    }
                    _ => unreachable!("not unary"),
                };
                self.accumulate(adj, *a, fault(*kind, ga))?;
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                match kind {
                    OpKind::MatMul => {
                        let (ga, gb) = matmul_vjp(av, bv, g)?;
                        if self.needs(*a) {
                            self.accumulate(adj, *a, fault(*kind, ga))?;
                        }
                        if self.needs(*b) {
                            self.accumulate(adj, *b, fault(*kind, gb))?;
                        }
                    }
                    _ => {
                        let map = Bcast::new(kind.name(), av.shape(), bv.shape())?;
                        let n = av.numel();
                        let mut ga = vec![0.0; n];
                        let mut gb = vec![0.0; bv.numel()];
                        let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                        for i in 0..n {
                            let j = map.get(i);
                            let (da, db) = match kind {
                                OpKind::Add => (gd[i], gd[i]),
                                OpKind::Sub => (gd[i], -gd[i]),
                                OpKind::Hadamard => (gd[i] * bd[j], gd[i] * ad[i]),
                                OpKind::Div => (gd[i] / bd[j], -gd[i] * ad[i] / (bd[j] * bd[j])),
                                _ => unreachable!(),
                            };
                            ga[i] = da;
                            gb[j] += db;
                        }
                        if self.needs(*a) {
                            let t = Tensor::from_parts(av.shape().to_vec(), ga);
                            self.accumulate(adj, *a, fault(*kind, t))?;
                        }
                        if self.needs(*b) {
                            let t = Tensor::from_parts(bv.shape().to_vec(), gb);
                            self.accumulate(adj, *b, fault(*kind, t))?;
                        }
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let s = self.value(*v).shape().to_vec();
                    let len = s[*axis];
                    if self.needs(*v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        let t = Tensor::from_parts(s, data);
                        self.accumulate(adj, *v, fault(OpKind::Concat, t))?;
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(*input).shape().to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                let t = Tensor::from_parts(shape, data);
                self.accumulate(adj, *input, fault(OpKind::Slice, t))?;
            }
            Op::Mse { input, target } => {
                let x = self.value(*input);
                let c = 2.0 * g.data()[0] / x.numel() as f64;
                let t = x.zip_with(target, "mse_loss", |p, t| c * (p - t))?;
                self.accumulate(adj, *input, fault(OpKind::MseLoss, t))?;
            }
            Op::CrossEntropy {
                input,
                targets,
                weights,
                probs,
            } => {
                let x = self.value(*input);
                let classes = x.cols();
                let total: f64 = weights.iter().sum();
                let scale = g.data()[0] / total;
                let mut data = vec![0.0; x.numel()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..classes {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        data[r * classes + j] = scale * w * (probs[r * classes + j] - onehot);
                    }
                }
                let t = Tensor::from_parts(x.shape().to_vec(), data);
                self.accumulate(adj, *input, fault(OpKind::CrossEntropyLoss, t))?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

fn zip3(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(other.shape().to_vec(), data)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last_axis(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    match (a.rank(), b.rank()) {
        (2, 2) | (3, 3) => {
            let ga = g.matmul(&b.transpose()?)?;
            let gb = a.transpose()?.matmul(g)?;
            Ok((ga, gb))
        }
        (3, 2) => {
            let ga = g.matmul(&b.transpose()?)?;
            let (rows, k, n) = (a.numel() / a.cols(), a.cols(), g.cols());
            let a2 = a.reshape(&[rows, k])?.transpose()?;
            let mut gb = vec![0.0; k * n];
            gemm(a2.data(), g.data(), &mut gb, k, rows, n);
            Ok((ga, Tensor::from_parts(vec![k, n], gb)))
        }
        _ => Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn hadamard_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let c = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let x = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap());
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[2.0, 4.0]);
        assert!(!g.disconnected());
    }

    #[test]
    fn constant_root_is_disconnected() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::vector(vec![3.0]));
        let c = tape.constant(Tensor::scalar(2.0));
        let g = tape.backward(c).unwrap();
        assert!(g.disconnected());
        assert_eq!(g.param("w").unwrap().data(), &[0.0]);
        let _ = w;
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), Error::NotScalar(vec![2]));
    }

    #[test]
    fn division_by_zero_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::DivisionByZero { .. })));
    }

    #[test]
    fn sqrt_of_negative_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        assert!(matches!(tape.sqrt(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn row_broadcast_gradient_sums_over_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 2]));
        let b = tape.param("b", Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let y = tape.add(x, b).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param("b").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = tape.param("b", Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param("a").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.param("b").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn record_dispatches_by_kind() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.5]));
        let y = tape.record(OpKind::Scale, &[x], &OpAttrs::Scale(2.0)).unwrap();
        assert_eq!(tape.value(y).data(), &[-2.0, 1.0]);
        assert!(tape.record(OpKind::Add, &[x], &OpAttrs::None).is_err());
        for kind in OpKind::ALL {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
    }
}
