//! First-order optimizers over a [`ParamMap`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ParamMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    HeavyBall,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::HeavyBall => "heavy-ball",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "heavy-ball" => Ok(Self::HeavyBall),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step_size: f64,
    /// Heavy-ball coefficient, or Adam's first-moment decay.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: ParamMap,
    second: ParamMap,
}

impl Optimizer {
    pub fn sgd(step_size: f64) -> Self {
        Self::new(OptimizerKind::Sgd, step_size, 0.0)
    }

    pub fn heavy_ball(step_size: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::HeavyBall, step_size, momentum)
    }

    pub fn adam(step_size: f64) -> Self {
        Self::new(OptimizerKind::Adam, step_size, 0.9)
    }

    pub fn new(kind: OptimizerKind, step_size: f64, momentum: f64) -> Self {
        Self {
            kind,
            step_size,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: ParamMap::new(),
            second: ParamMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place. Every parameter must have a gradient of
    /// the same shape.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::InvalidArgument(format!("no gradient for parameter '{name}'")))
                }
            }
        }
        self.steps += 1;
        let s = self.step_size;
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in p.data_mut().iter_mut().zip(g) {
                        *x -= s * gi;
                    }
                }
                OptimizerKind::HeavyBall => {
                    let beta = self.momentum;
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((x, mi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g) {
                        *mi = beta * *mi + gi;
                        *x -= s * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.momentum, self.beta2, self.eps);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let xs = p.data_mut();
                    let (ms, vs) = (m.data_mut(), v.data_mut());
                    for i in 0..xs.len() {
                        ms[i] = b1 * ms[i] + (1.0 - b1) * g[i];
                        vs[i] = b2 * vs[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = ms[i] / c1;
                        let vhat = vs[i] / c2;
                        xs[i] -= s * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Global ℓ2 norm over every tensor in the map.
pub fn global_norm(grads: &ParamMap) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = max_norm / norm;
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}
