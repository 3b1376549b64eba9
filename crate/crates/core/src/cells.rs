//! Recurrent cells: the plain recurrent cell, the momentum cell (with
//! constant, Nesterov and scheduled-restart coefficients), the Adam/RMSProp
//! cells and LSTM with its momentum variant.
//!
//! Hidden states are batched row-wise as `[batch, hidden]`. Inputs carry an
//! appended column of ones (see [`augment`]) so each input matrix absorbs its
//! bias: `W` has shape `[hidden, input_dim + 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::ParamMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn inverse(self, y: f64) -> Result<f64> {
        let ok = match self {
            Activation::Tanh => y.abs() < 1.0,
            Activation::Sigmoid => y > 0.0 && y < 1.0,
        };
        if !ok {
            return Err(Error::Domain {
                op: "activation inverse",
                detail: format!("{y} outside the range of {self}"),
            });
        }
        Ok(match self {
            Activation::Tanh => y.atanh(),
            Activation::Sigmoid => (y / (1.0 - y)).ln(),
        })
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Appends a column of ones: `[batch, d]` → `[batch, d + 1]`.
pub fn augment(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "augment",
            shape: x.shape().to_vec(),
            reason: "expected [batch, features]".into(),
        });
    }
    let (b, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(b * (d + 1));
    for i in 0..b {
        data.extend_from_slice(x.row(i));
        data.push(1.0);
    }
    Tensor::new(vec![b, d + 1], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub u: Tensor,
    pub w: Tensor,
    pub activation: Activation,
}

impl RnnParams {
    pub fn new(u: Tensor, w: Tensor, activation: Activation) -> Result<Self> {
        if u.rank() != 2 || u.rows() != u.cols() {
            return Err(Error::NonSquare(u.shape().to_vec()));
        }
        if w.rank() != 2 || w.rows() != u.rows() || w.cols() < 2 {
            return Err(Error::ShapeMismatch {
                op: "rnn params",
                lhs: u.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        Ok(Self { u, w, activation })
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, input_dim: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            u: Tensor::fan_in_uniform(&[hidden, hidden], hidden, rng),
            w: Tensor::fan_in_uniform(&[hidden, input_dim + 1], input_dim + 1, rng),
            activation,
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols() - 1
    }

    pub fn insert_into(&self, prefix: &str, map: &mut ParamMap) {
        map.insert(format!("{prefix}.u"), self.u.clone());
        map.insert(format!("{prefix}.w"), self.w.clone());
    }

    pub fn from_map(prefix: &str, map: &ParamMap, activation: Activation) -> Result<Self> {
        let get = |k: &str| {
            map.get(&format!("{prefix}.{k}"))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {prefix}.{k}")))
        };
        Self::new(get("u")?, get("w")?, activation)
    }
}

/// Recurrent weights on a tape, pre-transposed for row-batched states.
#[derive(Clone, Copy, Debug)]
pub struct RnnVars {
    u_t: Var,
    w_t: Var,
    pub activation: Activation,
}

impl RnnVars {
    pub fn new(tape: &mut Tape, u: Var, w: Var, activation: Activation) -> Result<Self> {
        Ok(Self {
            u_t: tape.transpose(u)?,
            w_t: tape.transpose(w)?,
            activation,
        })
    }

    pub fn from_registered(tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, activation: Activation) -> Result<Self> {
        let u = lookup(vars, prefix, "u")?;
        let w = lookup(vars, prefix, "w")?;
        Self::new(tape, u, w, activation)
    }
}

fn lookup(vars: &BTreeMap<String, Var>, prefix: &str, key: &str) -> Result<Var> {
    vars.get(&format!("{prefix}.{key}"))
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {prefix}.{key}")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// `μ_t = (t − 1)/(t + 2)`.
    Nesterov,
    /// `μ_t = (t mod F)/((t mod F) + 3)`.
    ScheduledRestart(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// `h_t = σ(U h_{t−1} + v_t)` with `v_t` driven by `W x̃_t`.
    V,
    /// `h_t = σ(U h_{t−1} + U v_t)` with `v_t` driven by a free matrix in
    /// place of `U⁻¹W`.
    U,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumHyper {
    pub mu: f64,
    pub s: f64,
    pub schedule: Schedule,
    pub parameterization: Parameterization,
    /// Second-moment decay of the Adam/RMSProp cells.
    pub beta: f64,
    pub eps: f64,
}

impl Default for MomentumHyper {
    fn default() -> Self {
        Self {
            mu: 0.6,
            s: 1.0,
            schedule: Schedule::Constant,
            parameterization: Parameterization::V,
            beta: 0.99,
            eps: 1e-8,
        }
    }
}

impl MomentumHyper {
    pub fn constant(mu: f64, s: f64) -> Self {
        Self {
            mu,
            s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.schedule == Schedule::Constant && !(0.0..1.0).contains(&self.mu) {
            return bad(format!("momentum {} outside [0, 1)", self.mu));
        }
        if !(self.s > 0.0) {
            return bad(format!("step size {} must be positive", self.s));
        }
        if self.schedule == Schedule::ScheduledRestart(0) {
            return bad("restart period must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta) || !(self.eps > 0.0) {
            return bad(format!("invalid second-moment settings beta={} eps={}", self.beta, self.eps));
        }
        Ok(())
    }

    /// Momentum coefficient at sequence step `t ≥ 1`.
    pub fn mu_at(&self, t: usize) -> Result<f64> {
        if t < 1 {
            return Err(Error::InvalidArgument("time steps start at 1".into()));
        }
        Ok(match self.schedule {
            Schedule::Constant => self.mu,
            Schedule::Nesterov => (t as f64 - 1.0) / (t as f64 + 2.0),
            Schedule::ScheduledRestart(period) => {
                let r = (t % period) as f64;
                r / (r + 3.0)
            }
        })
    }
}

/// Per-step recurrent state. `v` and `m` start at zero; cells that do not
/// use them pass them through.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub v: Var,
    pub m: Var,
}

impl CellState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[batch, hidden]));
        let v = tape.constant(Tensor::zeros(&[batch, hidden]));
        let m = tape.constant(Tensor::zeros(&[batch, hidden]));
        Self { h, v, m }
    }
}

/// `h_t = σ(U h_{t−1} + W x̃_t)`.
pub fn recurrent_step(tape: &mut Tape, cell: &RnnVars, h_prev: Var, x_aug: Var) -> Result<Var> {
    let rec = tape.matmul(h_prev, cell.u_t)?;
    let inp = tape.matmul(x_aug, cell.w_t)?;
    let pre = tape.add(rec, inp)?;
    cell.activation.apply(tape, pre)
}

fn momentum_stream(tape: &mut Tape, v_prev: Var, drive: Var, mu: f64, s: f64) -> Result<Var> {
    let carried = tape.scale(v_prev, mu)?;
    let pushed = tape.scale(drive, s)?;
    tape.add(carried, pushed)
}

/// Momentum cell: `v_t = μ v_{t−1} + s W x̃_t`, then the hidden update of the
/// chosen parameterization.
pub fn momentum_step(
    tape: &mut Tape,
    cell: &RnnVars,
    hyper: &MomentumHyper,
    state: &CellState,
    x_aug: Var,
    t: usize,
) -> Result<CellState> {
    let mu = hyper.mu_at(t)?;
    let drive = tape.matmul(x_aug, cell.w_t)?;
    let v = momentum_stream(tape, state.v, drive, mu, hyper.s)?;
    let pre = match hyper.parameterization {
        Parameterization::V => {
            let rec = tape.matmul(state.h, cell.u_t)?;
            tape.add(rec, v)?
        }
        Parameterization::U => {
            let total = tape.add(state.h, v)?;
            tape.matmul(total, cell.u_t)?
        }
    };
    let h = cell.activation.apply(tape, pre)?;
    Ok(CellState { h, v, m: state.m })
}

/// Adam cell; with `μ = 0` it is the RMSProp cell.
pub fn adam_cell_step(
    tape: &mut Tape,
    cell: &RnnVars,
    hyper: &MomentumHyper,
    state: &CellState,
    x_aug: Var,
    t: usize,
) -> Result<CellState> {
    let mu = hyper.mu_at(t)?;
    let drive = tape.matmul(x_aug, cell.w_t)?;
    let v = momentum_stream(tape, state.v, drive, mu, hyper.s)?;
    let sq = tape.square(drive)?;
    let kept = tape.scale(state.m, hyper.beta)?;
    let fresh = tape.scale(sq, 1.0 - hyper.beta)?;
    let m = tape.add(kept, fresh)?;
    let root = tape.sqrt(m)?;
    let eps = tape.constant(Tensor::scalar(hyper.eps));
    let denom = tape.add(root, eps)?;
    let step = tape.div(v, denom)?;
    let rec = tape.matmul(state.h, cell.u_t)?;
    let pre = tape.add(rec, step)?;
    let h = cell.activation.apply(tape, pre)?;
    Ok(CellState { h, v, m })
}

/// One-equation form of the momentum cell, evaluated directly:
/// `h_t = σ(U(h_{t−1} − μ h_{t−2}) + μ σ⁻¹(h_{t−1}) + s W x̃_t)`.
/// Only meaningful for the v-parameterization; serves as an oracle.
pub fn momentum_step_single_eq(
    params: &RnnParams,
    hyper: &MomentumHyper,
    h_prev: &Tensor,
    h_prev2: &Tensor,
    x_aug: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let mu = hyper.mu_at(t)?;
    let act = params.activation;
    let lagged = h_prev.axpy(-mu, h_prev2)?;
    let rec = lagged.matmul(&params.u.transpose()?)?;
    let mut inverse = Vec::with_capacity(h_prev.numel());
    for &y in h_prev.data() {
        inverse.push(act.inverse(y)?);
    }
    let inverse = Tensor::new(h_prev.shape().to_vec(), inverse)?;
    let drive = x_aug.matmul(&params.w.transpose()?)?;
    let pre = rec.axpy(mu, &inverse)?.axpy(hyper.s, &drive)?;
    Ok(pre.map(|x| act.eval(x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Gate {
    Input,
    Candidate,
    Output,
    Forget,
}

impl Gate {
    pub fn key(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Candidate => "c",
            Gate::Output => "o",
            Gate::Forget => "f",
        }
    }

    pub fn set(forget_gate: bool) -> &'static [Gate] {
        if forget_gate {
            &[Gate::Input, Gate::Candidate, Gate::Output, Gate::Forget]
        } else {
            &[Gate::Input, Gate::Candidate, Gate::Output]
        }
    }
}

/// LSTM weights per gate. Without a forget gate the cell state update is
/// `c_t = c_{t−1} + i_t ⊙ c̃_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub recurrent: BTreeMap<Gate, Tensor>,
    pub input: BTreeMap<Gate, Tensor>,
    pub forget_gate: bool,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, input_dim: usize, forget_gate: bool, rng: &mut R) -> Self {
        let mut recurrent = BTreeMap::new();
        let mut input = BTreeMap::new();
        for &g in Gate::set(forget_gate) {
            recurrent.insert(g, Tensor::fan_in_uniform(&[hidden, hidden], hidden, rng));
            input.insert(g, Tensor::fan_in_uniform(&[hidden, input_dim + 1], input_dim + 1, rng));
        }
        Self {
            recurrent,
            input,
            forget_gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gates = Gate::set(self.forget_gate);
        let first = self
            .recurrent
            .get(&gates[0])
            .ok_or_else(|| Error::InvalidArgument("missing input-gate weights".into()))?;
        let h = first.rows();
        for g in gates {
            let (Some(u), Some(w)) = (self.recurrent.get(g), self.input.get(g)) else {
                return Err(Error::InvalidArgument(format!("missing weights for gate {}", g.key())));
            };
            if u.shape() != [h, h] {
                return Err(Error::NonSquare(u.shape().to_vec()));
            }
            if w.rank() != 2 || w.rows() != h {
                return Err(Error::ShapeMismatch {
                    op: "lstm params",
                    lhs: u.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn insert_into(&self, prefix: &str, map: &mut ParamMap) {
        for (g, u) in &self.recurrent {
            map.insert(format!("{prefix}.u_{}", g.key()), u.clone());
        }
        for (g, w) in &self.input {
            map.insert(format!("{prefix}.w_{}", g.key()), w.clone());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmVars {
    gates: Vec<(Gate, Var, Var)>,
    forget_gate: bool,
}

impl LstmVars {
    pub fn from_registered(tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, forget_gate: bool) -> Result<Self> {
        let mut gates = Vec::new();
        for &g in Gate::set(forget_gate) {
            let u = lookup(vars, prefix, &format!("u_{}", g.key()))?;
            let w = lookup(vars, prefix, &format!("w_{}", g.key()))?;
            gates.push((g, tape.transpose(u)?, tape.transpose(w)?));
        }
        Ok(Self { gates, forget_gate })
    }

    fn gate(&self, g: Gate) -> (Var, Var) {
        let (_, u, w) = self.gates.iter().find(|(k, _, _)| *k == g).expect("gate present");
        (*u, *w)
    }
}

#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
    /// One momentum stream per gate, in [`Gate::set`] order.
    pub v: Vec<Var>,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize, forget_gate: bool) -> Self {
        let mut z = || tape.constant(Tensor::zeros(&[batch, hidden]));
        let h = z();
        let c = z();
        let v = Gate::set(forget_gate).iter().map(|_| z()).collect();
        Self { h, c, v }
    }
}

fn lstm_combine(tape: &mut Tape, lstm: &LstmVars, h_prev: Var, c_prev: Var, drives: &[Var]) -> Result<(Var, Var)> {
    let mut pre = Vec::with_capacity(drives.len());
    for (k, &d) in drives.iter().enumerate() {
        let (u, _) = lstm.gate(lstm.gates[k].0);
        let rec = tape.matmul(h_prev, u)?;
        pre.push(tape.add(rec, d)?);
    }
    let i = tape.sigmoid(pre[0])?;
    let cand = tape.tanh(pre[1])?;
    let o = tape.sigmoid(pre[2])?;
    let written = tape.hadamard(i, cand)?;
    let kept = if lstm.forget_gate {
        let f = tape.sigmoid(pre[3])?;
        tape.hadamard(f, c_prev)?
    } else {
        c_prev
    };
    let c = tape.add(kept, written)?;
    let squashed = tape.tanh(c)?;
    let h = tape.hadamard(o, squashed)?;
    Ok((h, c))
}

pub fn lstm_step(tape: &mut Tape, lstm: &LstmVars, h_prev: Var, c_prev: Var, x_aug: Var) -> Result<(Var, Var)> {
    let mut drives = Vec::with_capacity(lstm.gates.len());
    for k in 0..lstm.gates.len() {
        let (_, w) = lstm.gate(lstm.gates[k].0);
        drives.push(tape.matmul(x_aug, w)?);
    }
    lstm_combine(tape, lstm, h_prev, c_prev, &drives)
}

/// LSTM whose gate inputs `W_g x̃_t` each pass through their own momentum
/// stream `v_g ← μ v_g + s W_g x̃_t`.
pub fn momentum_lstm_step(
    tape: &mut Tape,
    lstm: &LstmVars,
    hyper: &MomentumHyper,
    state: &LstmState,
    x_aug: Var,
    t: usize,
) -> Result<LstmState> {
    let mu = hyper.mu_at(t)?;
    let mut streams = Vec::with_capacity(lstm.gates.len());
    for (k, &v_prev) in state.v.iter().enumerate() {
        let (_, w) = lstm.gate(lstm.gates[k].0);
        let drive = tape.matmul(x_aug, w)?;
        streams.push(momentum_stream(tape, v_prev, drive, mu, hyper.s)?);
    }
    let (h, c) = lstm_combine(tape, lstm, state.h, state.c, &streams)?;
    Ok(LstmState { h, c, v: streams })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Momentum,
    Adam,
    Lstm,
    MomentumLstm,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::Rnn,
        CellKind::Momentum,
        CellKind::Adam,
        CellKind::Lstm,
        CellKind::MomentumLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Momentum => "momentum-rnn",
            CellKind::Adam => "adam-rnn",
            CellKind::Lstm => "lstm",
            CellKind::MomentumLstm => "momentum-lstm",
        }
    }

    fn is_lstm(self) -> bool {
        matches!(self, CellKind::Lstm | CellKind::MomentumLstm)
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cell '{s}'")))
    }
}

/// A single-layer recurrent network with a linear readout.
#[derive(Clone, Debug)]
pub struct RecurrentModel {
    pub kind: CellKind,
    pub hyper: MomentumHyper,
    pub activation: Activation,
    pub forget_gate: bool,
    pub hidden: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub params: ParamMap,
}

/// Hidden trajectory of one forward pass, kept for gradient diagnostics.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub hidden: Vec<Var>,
    /// Momentum stream per step when the cell is a v-form momentum cell.
    pub momentum: Vec<Option<Var>>,
    activation: Activation,
}

impl RecurrentModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kind: CellKind,
        hyper: MomentumHyper,
        activation: Activation,
        forget_gate: bool,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        let mut params = ParamMap::new();
        if kind.is_lstm() {
            LstmParams::init(hidden, input_dim, forget_gate, rng).insert_into("cell", &mut params);
        } else {
            RnnParams::init(hidden, input_dim, activation, rng).insert_into("cell", &mut params);
        }
        params.insert(
            "head.w".into(),
            Tensor::fan_in_uniform(&[output_dim, hidden + 1], hidden + 1, rng),
        );
        Ok(Self {
            kind,
            hyper,
            activation,
            forget_gate,
            hidden,
            input_dim,
            output_dim,
            params,
        })
    }

    /// Runs the cell over `inputs` (one `[batch, input_dim]` tensor per
    /// step) using the registered handles `vars`.
    pub fn unroll(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, inputs: &[Tensor]) -> Result<Unrolled> {
        let batch = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty input sequence".into()))?
            .rows();
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut momentum = Vec::with_capacity(inputs.len());
        let v_form = self.kind == CellKind::Momentum && self.hyper.parameterization == Parameterization::V;
        if self.kind.is_lstm() {
            let lstm = LstmVars::from_registered(tape, vars, "cell", self.forget_gate)?;
            let mut state = LstmState::zeros(tape, batch, self.hidden, self.forget_gate);
            for (k, x) in inputs.iter().enumerate() {
                let xa = tape.constant(augment(x)?);
                state = if self.kind == CellKind::Lstm {
                    let (h, c) = lstm_step(tape, &lstm, state.h, state.c, xa)?;
                    LstmState { h, c, v: state.v }
                } else {
                    momentum_lstm_step(tape, &lstm, &self.hyper, &state, xa, k + 1)?
                };
                hidden.push(state.h);
                momentum.push(None);
            }
        } else {
            let cell = RnnVars::from_registered(tape, vars, "cell", self.activation)?;
            let mut state = CellState::zeros(tape, batch, self.hidden);
            for (k, x) in inputs.iter().enumerate() {
                let xa = tape.constant(augment(x)?);
                state = match self.kind {
                    CellKind::Rnn => CellState {
                        h: recurrent_step(tape, &cell, state.h, xa)?,
                        ..state
                    },
                    CellKind::Momentum => momentum_step(tape, &cell, &self.hyper, &state, xa, k + 1)?,
                    _ => adam_cell_step(tape, &cell, &self.hyper, &state, xa, k + 1)?,
                };
                hidden.push(state.h);
                momentum.push(v_form.then_some(state.v));
            }
        }
        Ok(Unrolled {
            hidden,
            momentum,
            activation: self.activation,
        })
    }

    /// Linear readout `[h, 1] Wᵀ` of a hidden state.
    pub fn readout(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, h: Var) -> Result<Var> {
        let w = lookup(vars, "head", "w")?;
        let rows = tape.value(h).rows();
        let ones = tape.constant(Tensor::ones(&[rows, 1]));
        let ha = tape.concat(&[h, ones], 1)?;
        let wt = tape.transpose(w)?;
        tape.matmul(ha, wt)
    }
}

/// ℓ2 norm of `∂L/∂h_t` for every step of a completed forward pass.
///
/// For the v-form momentum cell the derivative is taken in the cell's
/// one-equation form, where `h_{t+1}` depends on `h_t` directly and through
/// `σ⁻¹(h_t)`. Holding `h_{t−1}` fixed, a change in `h_t` is a change in `v_t`
/// scaled by `1/σ′`, so the derivative is the adjoint of `v_t` divided by
/// `σ′` at step `t`. With `μ = 0`, and at the last step, this equals the
/// adjoint of `h_t`. All other cells report the adjoint of `h_t` itself.
pub fn bptt_gradient_norms(tape: &Tape, unrolled: &Unrolled, grads: &Gradients) -> Vec<f64> {
    unrolled
        .hidden
        .iter()
        .zip(&unrolled.momentum)
        .map(|(&h, v)| match v {
            Some(v) => {
                let av = grads.wrt(*v);
                let hv = tape.value(h);
                av.data()
                    .iter()
                    .zip(hv.data())
                    .map(|(a, y)| {
                        let d = a / unrolled.activation.derivative_at_output(*y);
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            }
            None => grads.wrt(h).norm_l2(),
        })
        .collect()
}
