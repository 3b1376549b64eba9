//! ODE-block classifiers: `x → h(0) → solve → h(T) → linear head → softmax`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ode::dynamics::{adjoint_backward, adjoint_norm_trace, solve, AdjointOptions, DampingParams, Dynamics, MomentumActivation, OdeState};
use crate::ode::field::{MlpField, OdeFunc, VectorField};
use crate::ode::solver::SolverOptions;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::ParamMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum OdeFamily {
    Node,
    Hbnode,
    Ghbnode,
}

impl OdeFamily {
    pub fn name(self) -> &'static str {
        match self {
            OdeFamily::Node => "node",
            OdeFamily::Hbnode => "hbnode",
            OdeFamily::Ghbnode => "ghbnode",
        }
    }
}

impl fmt::Display for OdeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OdeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Self::Node),
            "hbnode" => Ok(Self::Hbnode),
            "ghbnode" => Ok(Self::Ghbnode),
            other => Err(Error::InvalidArgument(format!("unknown ode family '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub family: OdeFamily,
    pub input_dim: usize,
    /// Zero features appended to the input before the solve.
    pub augment: usize,
    pub hidden: usize,
    pub classes: usize,
    pub t1: f64,
    pub damping: DampingParams,
    pub activation: MomentumActivation,
}

impl ClassifierConfig {
    pub fn new(family: OdeFamily, input_dim: usize, classes: usize) -> Self {
        Self {
            family,
            input_dim,
            augment: 0,
            hidden: 20,
            classes,
            t1: 1.0,
            damping: DampingParams::default(),
            activation: MomentumActivation::Tanh,
        }
    }

    pub fn width(&self) -> usize {
        self.input_dim + self.augment
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct ClassifierStep {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: ParamMap,
    pub forward_nfe: usize,
    pub backward_nfe: usize,
    /// `‖a(t)‖` at the terminal time, each checkpoint, and `t = 0`.
    pub adjoint_norms: Vec<f64>,
}

/// Forward-only evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierEval {
    pub loss: f64,
    pub accuracy: f64,
    pub forward_nfe: usize,
}

#[derive(Clone, Debug)]
pub struct OdeClassifier {
    config: ClassifierConfig,
    field: MlpField,
    head: Tensor,
}

impl OdeClassifier {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        if config.input_dim == 0 || config.classes < 2 || config.hidden == 0 || !(config.t1 > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid classifier config {config:?}")));
        }
        let w = config.width();
        let field = MlpField::new(&[w, config.hidden, config.hidden, w], rng)?;
        let head = Tensor::fan_in_uniform(&[config.classes, w + 1], w + 1, rng);
        Ok(Self { config, field, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn family(&self) -> OdeFamily {
        self.config.family
    }

    /// All trainable tensors: field weights, `head.w`, and the damping
    /// scalars the family uses.
    pub fn params(&self) -> ParamMap {
        let mut out = self.field.params().clone();
        out.insert("head.w".into(), self.head.clone());
        match self.config.family {
            OdeFamily::Node => {}
            OdeFamily::Hbnode => {
                out.insert("damping.omega".into(), Tensor::scalar(self.config.damping.omega));
            }
            OdeFamily::Ghbnode => {
                out.insert("damping.omega".into(), Tensor::scalar(self.config.damping.omega));
                out.insert("damping.chi".into(), Tensor::scalar(self.config.damping.chi));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().values().map(Tensor::numel).sum()
    }

    pub fn set_params(&mut self, params: &ParamMap) -> Result<()> {
        let current = self.params();
        for (name, t) in &current {
            let new = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if new.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    lhs: t.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        for (name, t) in params {
            match name.as_str() {
                "head.w" => self.head = t.clone(),
                "damping.omega" => self.config.damping.omega = t.item()?,
                "damping.chi" => self.config.damping.chi = t.item()?,
                _ if current.contains_key(name) => {
                    self.field.params_mut().insert(name.clone(), t.clone());
                }
                _ => return Err(Error::InvalidArgument(format!("unknown parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Dynamics {
        let d = &self.config.damping;
        match self.config.family {
            OdeFamily::Node => Dynamics::FirstOrder,
            OdeFamily::Hbnode => Dynamics::HeavyBall { gamma: d.gamma() },
            OdeFamily::Ghbnode => Dynamics::Generalized {
                gamma: d.gamma(),
                xi: d.xi(),
                activation: self.config.activation,
            },
        }
    }

    fn initial_state(&self, x: &Tensor) -> Result<OdeState> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::InvalidShape {
                op: "ode classifier",
                shape: x.shape().to_vec(),
                reason: format!("expected [batch, {}]", self.config.input_dim),
            });
        }
        let (b, w) = (x.rows(), self.config.width());
        let mut h = vec![0.0; b * w];
        for i in 0..b {
            h[i * w..i * w + x.cols()].copy_from_slice(x.row(i));
        }
        let h = Tensor::new(vec![b, w], h)?;
        if self.config.family == OdeFamily::Node {
            Ok(OdeState::position(h))
        } else {
            OdeState::with_momentum(h, Tensor::zeros(&[b, w]))
        }
    }

    /// Cross-entropy of the head on `h(T)`; returns loss, accuracy,
    /// `dL/dh(T)` and `dL/dhead`.
    fn head_loss(&self, h: &Tensor, labels: &[usize]) -> Result<(f64, f64, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let hv = tape.input(h.clone());
        let ones = tape.constant(Tensor::ones(&[h.rows(), 1]));
        let aug = tape.concat(&[hv, ones], 1)?;
        let head = tape.param("head.w", self.head.clone());
        let head_t = tape.transpose(head)?;
        let logits = tape.matmul(aug, head_t)?;
        let loss = tape.cross_entropy_loss(logits, labels, None)?;
        let grads = tape.backward(loss)?;
        let lv = tape.value(logits);
        let correct = (0..lv.rows())
            .filter(|&i| {
                let row = lv.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == labels[i]
            })
            .count();
        Ok((
            tape.value(loss).item()?,
            correct as f64 / labels.len() as f64,
            grads.wrt(hv),
            grads.param("head.w").cloned().unwrap_or_else(|| Tensor::zeros(self.head.shape())),
        ))
    }

    pub fn evaluate(&self, x: &Tensor, labels: &[usize], solver: &SolverOptions) -> Result<ClassifierEval> {
        let func = OdeFunc::new(&self.field);
        let y0 = self.initial_state(x)?;
        let (y1, stats) = solve(&func, &self.dynamics(), &y0, 0.0, self.config.t1, solver)?;
        let (loss, accuracy, _, _) = self.head_loss(&y1.h, labels)?;
        Ok(ClassifierEval {
            loss,
            accuracy,
            forward_nfe: stats.nfe,
        })
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize], solver: &SolverOptions) -> Result<f64> {
        Ok(self.evaluate(x, labels, solver)?.loss)
    }

    /// Forward solve, head loss, and adjoint solve for every parameter.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize], opts: &AdjointOptions) -> Result<ClassifierStep> {
        let func = OdeFunc::new(&self.field);
        let dynamics = self.dynamics();
        let y0 = self.initial_state(x)?;
        let (y1, fwd) = solve(&func, &dynamics, &y0, 0.0, self.config.t1, &opts.solver)?;
        let (loss, accuracy, dl_dh, d_head) = self.head_loss(&y1.h, labels)?;
        let back = adjoint_backward(&func, &dynamics, &y1, &dl_dh, None, 0.0, self.config.t1, opts)?;
        let adjoint_norms = adjoint_norm_trace(&back).into_iter().map(|(_, n)| n).collect();
        let mut grads = back.param_grads;
        grads.insert("head.w".into(), d_head);
        let d = &self.config.damping;
        if dynamics.has_momentum() {
            grads.insert("damping.omega".into(), Tensor::scalar(back.d_gamma * d.dgamma_domega()));
        }
        if self.config.family == OdeFamily::Ghbnode {
            grads.insert("damping.chi".into(), Tensor::scalar(back.d_xi * d.dxi_dchi()));
        }
        Ok(ClassifierStep {
            loss,
            accuracy,
            grads,
            forward_nfe: fwd.nfe,
            backward_nfe: back.stats.nfe,
            adjoint_norms,
        })
    }
}
