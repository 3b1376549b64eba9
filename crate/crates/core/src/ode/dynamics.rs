//! First-order, heavy-ball and generalized heavy-ball dynamics, their
//! forward solves and the adjoint solves that produce gradients.
//!
//! States are `[batch, n]` tensors flattened row-major; the heavy-ball
//! families append the momentum block after the position block.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ode::field::OdeFunc;
use crate::ode::solver::{integrate, SolverOptions, StepStats};
use crate::tensor::Tensor;
use crate::ParamMap;

#[derive(Clone, Debug, PartialEq)]
pub struct OdeState {
    pub h: Tensor,
    /// Momentum; absent for first-order dynamics.
    pub m: Option<Tensor>,
}

impl OdeState {
    pub fn position(h: Tensor) -> Self {
        Self { h, m: None }
    }

    pub fn with_momentum(h: Tensor, m: Tensor) -> Result<Self> {
        if h.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "ode state",
                lhs: h.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        Ok(Self { h, m: Some(m) })
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = self.h.data().to_vec();
        if let Some(m) = &self.m {
            out.extend_from_slice(m.data());
        }
        out
    }

    fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let n = self.h.numel();
        let h = Tensor::new(self.h.shape().to_vec(), flat[..n].to_vec())?;
        let m = match &self.m {
            Some(m) => Some(Tensor::new(m.shape().to_vec(), flat[n..2 * n].to_vec())?),
            None => None,
        };
        Ok(Self { h, m })
    }
}

/// Activation applied to the momentum in the position equation of the
/// generalized model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentumActivation {
    Tanh,
    /// Clamp to [−5, 5].
    HardTanh,
    Identity,
}

impl MomentumActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            MomentumActivation::Tanh => x.tanh(),
            MomentumActivation::HardTanh => x.clamp(-5.0, 5.0),
            MomentumActivation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            MomentumActivation::Tanh => 1.0 - x.tanh().powi(2),
            MomentumActivation::HardTanh => {
                if x.abs() < 5.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MomentumActivation::Identity => 1.0,
        }
    }
}

impl fmt::Display for MomentumActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MomentumActivation::Tanh => "tanh",
            MomentumActivation::HardTanh => "hardtanh",
            MomentumActivation::Identity => "identity",
        })
    }
}

impl FromStr for MomentumActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "hardtanh" => Ok(Self::HardTanh),
            "identity" => Ok(Self::Identity),
            other => Err(Error::InvalidArgument(format!("unknown momentum activation '{other}'"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained damping parameters: `γ = cap·sigmoid(ω)`, `ξ = softplus(χ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DampingParams {
    pub omega: f64,
    pub cap: f64,
    pub chi: f64,
}

impl Default for DampingParams {
    fn default() -> Self {
        Self {
            omega: -3.0,
            cap: 1.0,
            chi: -3.0,
        }
    }
}

impl DampingParams {
    pub fn gamma(&self) -> f64 {
        self.cap * sigmoid(self.omega)
    }

    pub fn xi(&self) -> f64 {
        if self.chi > 30.0 {
            self.chi
        } else {
            self.chi.exp().ln_1p()
        }
    }

    pub fn dgamma_domega(&self) -> f64 {
        let s = sigmoid(self.omega);
        self.cap * s * (1.0 - s)
    }

    pub fn dxi_dchi(&self) -> f64 {
        sigmoid(self.chi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dynamics {
    /// `h′ = f(h)`.
    FirstOrder,
    /// `h′ = m`, `m′ = −γm + f(h)`.
    HeavyBall { gamma: f64 },
    /// `h′ = σ(m)`, `m′ = −γm + f(h) − ξh`.
    Generalized {
        gamma: f64,
        xi: f64,
        activation: MomentumActivation,
    },
}

impl Dynamics {
    pub fn has_momentum(&self) -> bool {
        !matches!(self, Dynamics::FirstOrder)
    }

    /// Derivative of a full state.
    pub fn rhs(&self, func: &OdeFunc, state: &OdeState, t: f64) -> Result<OdeState> {
        match *self {
            Dynamics::FirstOrder => Ok(OdeState::position(func.eval(t, &state.h)?)),
            Dynamics::HeavyBall { gamma } => {
                let m = momentum_of(state)?;
                let f = func.eval(t, &state.h)?;
                OdeState::with_momentum(m.clone(), f.axpy(-gamma, m)?)
            }
            Dynamics::Generalized { gamma, xi, activation } => {
                let m = momentum_of(state)?;
                let f = func.eval(t, &state.h)?;
                let dm = f.axpy(-gamma, m)?.axpy(-xi, &state.h)?;
                OdeState::with_momentum(m.map(|x| activation.apply(x)), dm)
            }
        }
    }
}

fn momentum_of(state: &OdeState) -> Result<&Tensor> {
    state
        .m
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("heavy-ball dynamics need a momentum state".into()))
}

/// `dh/dt = f(h, t)`.
pub fn node_rhs(func: &OdeFunc, h: &Tensor, t: f64) -> Result<Tensor> {
    func.eval(t, h)
}

/// `dh/dt = m`, `dm/dt = −γm + f(h, t)`.
pub fn hbnode_rhs(func: &OdeFunc, state: &OdeState, t: f64, gamma: f64) -> Result<OdeState> {
    Dynamics::HeavyBall { gamma }.rhs(func, state, t)
}

/// `dh/dt = σ(m)`, `dm/dt = −γm + f(h, t) − ξh`.
pub fn ghbnode_rhs(
    func: &OdeFunc,
    state: &OdeState,
    t: f64,
    gamma: f64,
    xi: f64,
    activation: MomentumActivation,
) -> Result<OdeState> {
    Dynamics::Generalized { gamma, xi, activation }.rhs(func, state, t)
}

/// Function-evaluation and step counts for one forward/backward pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolverStats {
    pub forward_nfe: usize,
    pub backward_nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rtol: f64,
    pub atol: f64,
}

/// Solves the dynamics from `t0` to `t1`. The returned step counts take
/// their NFE from the function's own counter.
pub fn solve(
    func: &OdeFunc,
    dynamics: &Dynamics,
    y0: &OdeState,
    t0: f64,
    t1: f64,
    opts: &SolverOptions,
) -> Result<(OdeState, StepStats)> {
    if dynamics.has_momentum() != y0.m.is_some() {
        return Err(Error::InvalidArgument("momentum state does not match the dynamics".into()));
    }
    let before = func.nfe();
    let flat0 = y0.flatten();
    let (flat1, mut stats) = integrate(
        |t, y, dy| {
            let state = y0.unflatten(y)?;
            let d = dynamics.rhs(func, &state, t)?;
            dy.copy_from_slice(&d.flatten());
            Ok(())
        },
        &flat0,
        t0,
        t1,
        opts,
    )?;
    stats.nfe = func.nfe() - before;
    Ok((y0.unflatten(&flat1)?, stats))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdjointOptions {
    pub solver: SolverOptions,
    /// Times strictly inside the interval where the adjoint is recorded
    /// (and clipped, when `clip` is set).
    pub checkpoints: Vec<f64>,
    /// Rescale the adjoint to this global norm whenever it is exceeded at
    /// the terminal time or a checkpoint.
    pub clip: Option<f64>,
}

/// Adjoint of the state at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointSnapshot {
    pub t: f64,
    pub a_h: Tensor,
    pub a_m: Option<Tensor>,
}

impl AdjointSnapshot {
    pub fn norm(&self) -> f64 {
        let mut sq = self.a_h.data().iter().map(|x| x * x).sum::<f64>();
        if let Some(m) = &self.a_m {
            sq += m.data().iter().map(|x| x * x).sum::<f64>();
        }
        sq.sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AdjointOutput {
    pub param_grads: ParamMap,
    pub d_h0: Tensor,
    pub d_m0: Option<Tensor>,
    /// `dL/dγ`; zero for first-order dynamics.
    pub d_gamma: f64,
    /// `dL/dξ`; zero unless generalized.
    pub d_xi: f64,
    pub stats: StepStats,
    /// Snapshots from the terminal time back to the initial time.
    pub trace: Vec<AdjointSnapshot>,
}

/// `‖(a_h, a_m)(t)‖₂` at each recorded time of a completed backward pass.
pub fn adjoint_norm_trace(out: &AdjointOutput) -> Vec<(f64, f64)> {
    out.trace.iter().map(|s| (s.t, s.norm())).collect()
}

struct Layout {
    state: usize,
    params: usize,
}

impl Layout {
    fn total(&self) -> usize {
        2 * self.state + self.params + 2
    }
}

fn flatten_params(p: &ParamMap, out: &mut [f64]) {
    let mut k = 0;
    for t in p.values() {
        out[k..k + t.numel()].copy_from_slice(t.data());
        k += t.numel();
    }
}

fn unflatten_params(template: &ParamMap, flat: &[f64]) -> Result<ParamMap> {
    let mut k = 0;
    let mut out = ParamMap::new();
    for (name, t) in template {
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[k..k + t.numel()].to_vec())?);
        k += t.numel();
    }
    Ok(out)
}

/// Integrates the state backward from `t1` to `t0` together with its
/// adjoint and the running parameter-gradient integrals.
///
/// Terminal conditions: `a_h(t1) = dl_dh`, `a_m(t1) = dl_dm` (zero when the
/// loss reads only the position).
#[allow(clippy::too_many_arguments)]
pub fn adjoint_backward(
    func: &OdeFunc,
    dynamics: &Dynamics,
    final_state: &OdeState,
    dl_dh: &Tensor,
    dl_dm: Option<&Tensor>,
    t0: f64,
    t1: f64,
    opts: &AdjointOptions,
) -> Result<AdjointOutput> {
    if dynamics.has_momentum() != final_state.m.is_some() {
        return Err(Error::InvalidArgument("momentum state does not match the dynamics".into()));
    }
    if dl_dh.shape() != final_state.h.shape() {
        return Err(Error::ShapeMismatch {
            op: "adjoint terminal condition",
            lhs: final_state.h.shape().to_vec(),
            rhs: dl_dh.shape().to_vec(),
        });
    }
    let params = func.field().params();
    let n = final_state.h.numel();
    let shape = final_state.h.shape().to_vec();
    let layout = Layout {
        state: final_state.flatten().len(),
        params: params.values().map(Tensor::numel).sum(),
    };
    let mut z = vec![0.0; layout.total()];
    z[..layout.state].copy_from_slice(&final_state.flatten());
    z[layout.state..layout.state + n].copy_from_slice(dl_dh.data());
    if let (Some(dm), true) = (dl_dm, dynamics.has_momentum()) {
        z[layout.state + n..2 * layout.state].copy_from_slice(dm.data());
    }

    let tensor = |s: &[f64]| Tensor::new(shape.clone(), s.to_vec());
    let rhs = |t: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        let s = layout.state;
        let h = tensor(&z[..n])?;
        let a_h = &z[s..s + n];
        let gp = 2 * s;
        let (gg, gx) = (gp + layout.params, gp + layout.params + 1);
        dz[gg] = 0.0;
        dz[gx] = 0.0;
        match *dynamics {
            Dynamics::FirstOrder => {
                let vjp = func.vjp(t, &h, &tensor(a_h)?)?;
                dz[..n].copy_from_slice(vjp.value.data());
                for (d, v) in dz[s..s + n].iter_mut().zip(vjp.wrt_state.data()) {
                    *d = -v;
                }
                flatten_params(&vjp.wrt_params, &mut dz[gp..gp + layout.params]);
            }
            Dynamics::HeavyBall { gamma } | Dynamics::Generalized { gamma, .. } => {
                let m = &z[n..2 * n];
                let a_m = &z[s + n..s + 2 * n];
                let vjp = func.vjp(t, &h, &tensor(a_m)?)?;
                let (xi, act) = match *dynamics {
                    Dynamics::Generalized { xi, activation, .. } => (xi, activation),
                    _ => (0.0, MomentumActivation::Identity),
                };
                let f = vjp.value.data();
                let af = vjp.wrt_state.data();
                for i in 0..n {
                    dz[i] = act.apply(m[i]);
                    dz[n + i] = -gamma * m[i] + f[i] - xi * z[i];
                    dz[s + i] = -(af[i] - xi * a_m[i]);
                    dz[s + n + i] = -a_h[i] * act.derivative(m[i]) + gamma * a_m[i];
                }
                flatten_params(&vjp.wrt_params, &mut dz[gp..gp + layout.params]);
                dz[gg] = (0..n).map(|i| a_m[i] * m[i]).sum();
                dz[gx] = (0..n).map(|i| a_m[i] * z[i]).sum();
            }
        }
        // Every gradient integral X obeys g_X′ = −a·∂F/∂X.
        for d in &mut dz[gp..gp + layout.params] {
            *d = -*d;
        }
        Ok(())
    };

    let mut stops: Vec<f64> = opts
        .checkpoints
        .iter()
        .copied()
        .filter(|&c| (c - t0) * (t1 - c) > 0.0)
        .collect();
    // Visit checkpoints in the direction of travel, from t1 toward t0.
    stops.sort_by(|a, b| b.total_cmp(a));
    if t1 < t0 {
        stops.reverse();
    }
    stops.dedup();
    stops.push(t0);

    let snapshot = |t: f64, z: &[f64]| -> Result<AdjointSnapshot> {
        let s = layout.state;
        Ok(AdjointSnapshot {
            t,
            a_h: tensor(&z[s..s + n])?,
            a_m: if dynamics.has_momentum() {
                Some(tensor(&z[s + n..2 * s])?)
            } else {
                None
            },
        })
    };
    let clip = |z: &mut [f64]| {
        if let Some(max) = opts.clip {
            let a = &mut z[layout.state..2 * layout.state];
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > max {
                for x in a.iter_mut() {
                    *x *= max / norm;
                }
            }
        }
    };

    let before = func.nfe();
    let mut stats = StepStats::default();
    let mut trace = Vec::with_capacity(stops.len() + 1);
    clip(&mut z);
    trace.push(snapshot(t1, &z)?);
    let mut t = t1;
    for &stop in &stops {
        let (next, seg) = integrate(&rhs, &z, t, stop, &opts.solver)?;
        stats.absorb(seg);
        z = next;
        t = stop;
        if stop != t0 {
            clip(&mut z);
        }
        trace.push(snapshot(t, &z)?);
    }
    stats.nfe = func.nfe() - before;

    let s = layout.state;
    let gp = 2 * s;
    Ok(AdjointOutput {
        param_grads: unflatten_params(params, &z[gp..gp + layout.params])?,
        d_h0: tensor(&z[s..s + n])?,
        d_m0: if dynamics.has_momentum() {
            Some(tensor(&z[s + n..2 * s])?)
        } else {
            None
        },
        d_gamma: if dynamics.has_momentum() { z[gp + layout.params] } else { 0.0 },
        d_xi: if matches!(dynamics, Dynamics::Generalized { .. }) { z[gp + layout.params + 1] } else { 0.0 },
        stats,
        trace,
    })
}

/// First-order adjoint: `a′ = −a·∂f/∂h`, `dL/dθ = ∫ a·∂f/∂θ dt`.
pub fn adjoint_backward_node(
    func: &OdeFunc,
    h_final: &Tensor,
    dl_dh: &Tensor,
    t0: f64,
    t1: f64,
    opts: &AdjointOptions,
) -> Result<AdjointOutput> {
    let state = OdeState::position(h_final.clone());
    adjoint_backward(func, &Dynamics::FirstOrder, &state, dl_dh, None, t0, t1, opts)
}

/// Heavy-ball adjoint: `a_h′ = −a_m·∂f/∂h`, `a_m′ = −a_h + γ a_m`,
/// `dL/dθ = ∫ a_m·∂f/∂θ dt`.
pub fn adjoint_backward_hbnode(
    func: &OdeFunc,
    final_state: &OdeState,
    dl_dh: &Tensor,
    gamma: f64,
    t0: f64,
    t1: f64,
    opts: &AdjointOptions,
) -> Result<AdjointOutput> {
    adjoint_backward(func, &Dynamics::HeavyBall { gamma }, final_state, dl_dh, None, t0, t1, opts)
}

/// Generalized adjoint: `a_h′ = −a_m(∂f/∂h − ξI)`,
/// `a_m′ = −a_h σ′(m) + γ a_m`.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_backward_ghbnode(
    func: &OdeFunc,
    final_state: &OdeState,
    dl_dh: &Tensor,
    gamma: f64,
    xi: f64,
    activation: MomentumActivation,
    t0: f64,
    t1: f64,
    opts: &AdjointOptions,
) -> Result<AdjointOutput> {
    let dynamics = Dynamics::Generalized { gamma, xi, activation };
    adjoint_backward(func, &dynamics, final_state, dl_dh, None, t0, t1, opts)
}
