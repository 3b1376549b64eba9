//! The verification suites: every gradient against finite differences,
//! the exact equivalences between alternate forms of each model, adjoint
//! correctness and the heavy-ball spectrum pairing.
//!
//! Each check reduces to one observed worst case compared with a fixed
//! tolerance. A check whose computation errors out is reported as a
//! failure with an infinite worst case rather than aborting the suite.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use momentum_core::attention::{
    attention_head, attention_layer, causal_linear_attention, causal_momentum_attention, causal_momentum_unrolled,
    kernel_average_bruteforce, linear_attention, momentum_attention_noncausal, AttentionKind, AttentionVars,
    AttnHyper, FeatureMap, KvCounter, TokenExample, Transformer, TransformerConfig, TransformerVariant,
};
use momentum_core::cells::{
    momentum_step_single_eq, Activation, CellKind, MomentumHyper, Parameterization, RecurrentModel, RnnParams,
    Schedule,
};
use momentum_core::finite_diff::{finite_difference_gradient, global_relative_error, max_relative_error, DEFAULT_STEP};
use momentum_core::gradcheck::check_op;
use momentum_core::ode::{
    adjoint_backward_ghbnode, adjoint_backward_hbnode, adjoint_backward_node, eigen_pairing_check, solve,
    AdjointOptions, ClassifierConfig, Dynamics, LinearField, MlpField, MomentumActivation, OdeClassifier, OdeFamily,
    OdeFunc, OdeState, SolverOptions,
};
use momentum_core::{seeded_rng, OpKind, ParamMap, Tape, Tensor};

/// Seeds per randomized gradient check.
pub const GRADIENT_SEEDS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Equivalences,
    Adjoints,
    Eigenpairs,
    Attention,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [
        Suite::Gradients,
        Suite::Equivalences,
        Suite::Adjoints,
        Suite::Eigenpairs,
        Suite::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Equivalences => "equivalences",
            Suite::Adjoints => "adjoints",
            Suite::Eigenpairs => "eigenpairs",
            Suite::Attention => "attention",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                anyhow::anyhow!("unknown suite `{s}`; expected gradients, equivalences, adjoints, eigenpairs, attention or all")
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub property: String,
    pub tolerance: f64,
    pub worst: f64,
    /// Set when the computation itself failed.
    pub error: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn find(&self, property: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.property == property)
    }

    /// Tab-separated, one check per line.
    pub fn render(&self) -> String {
        let mut out = String::from("suite\tproperty\ttolerance\tworst\tverdict\n");
        for c in &self.checks {
            let verdict = match &c.error {
                Some(e) => format!("FAIL ({e})"),
                None if c.passed() => "PASS".into(),
                None => "FAIL".into(),
            };
            out.push_str(&format!("{}\t{}\t{:e}\t{:e}\t{verdict}\n", c.suite, c.property, c.tolerance, c.worst));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    /// Corrupts the backward rule of one op in every tape the checks build.
    pub fault: Option<OpKind>,
}

fn check(suite: Suite, property: impl Into<String>, tolerance: f64, f: impl FnOnce() -> anyhow::Result<f64>) -> Check {
    let (worst, error) = match f() {
        Ok(w) if w.is_nan() => (f64::INFINITY, Some("non-finite result".into())),
        Ok(w) => (w, None),
        Err(e) => (f64::INFINITY, Some(format!("{e:#}"))),
    };
    Check {
        suite,
        property: property.into(),
        tolerance,
        worst,
        error,
    }
}

fn worst_over<I, F>(items: I, mut f: F) -> anyhow::Result<f64>
where
    I: IntoIterator,
    F: FnMut(I::Item) -> anyhow::Result<f64>,
{
    let mut worst: f64 = 0.0;
    for item in items {
        worst = worst.max(f(item)?);
    }
    Ok(worst)
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Report {
    let mut checks = Vec::new();
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    for s in suites {
        checks.extend(match s {
            Suite::Gradients => gradients(opts),
            Suite::Equivalences => equivalences(),
            Suite::Adjoints => adjoints(),
            Suite::Eigenpairs => eigenpairs(),
            Suite::Attention => attention(opts),
            Suite::All => unreachable!(),
        });
    }
    Report { checks }
}

// ---------------------------------------------------------------- gradients

fn cell_hyper(kind: CellKind, rng: &mut ChaCha8Rng) -> MomentumHyper {
    let mut hyper = MomentumHyper::constant(rng.gen_range(0.0..0.95), rng.gen_range(0.5..1.5));
    if kind == CellKind::Adam {
        hyper.beta = rng.gen_range(0.5..0.99);
    }
    hyper
}

/// Small recurrent model and a batch it is trained on with an MSE readout.
struct CellCase {
    model: RecurrentModel,
    inputs: Vec<Tensor>,
    target: Tensor,
}

impl CellCase {
    fn new(kind: CellKind, param: Parameterization, seed: u64) -> anyhow::Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut hyper = cell_hyper(kind, &mut rng);
        hyper.parameterization = param;
        let model = RecurrentModel::new(kind, hyper, Activation::Tanh, true, 2, 3, 2, &mut rng)?;
        let inputs = (0..5).map(|_| Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng)).collect();
        let target = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng);
        Ok(Self { model, inputs, target })
    }

    fn loss_tape(&self, params: &ParamMap, fault: Option<OpKind>) -> anyhow::Result<(Tape, momentum_core::Var)> {
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let vars = tape.register(params);
        let unrolled = self.model.unroll(&mut tape, &vars, &self.inputs)?;
        let last = *unrolled.hidden.last().expect("non-empty sequence");
        let out = self.model.readout(&mut tape, &vars, last)?;
        let loss = tape.mse_loss(out, &self.target)?;
        Ok((tape, loss))
    }

    fn gradient_error(&self, fault: Option<OpKind>) -> anyhow::Result<f64> {
        let (tape, root) = self.loss_tape(&self.model.params, fault)?;
        let analytic = tape.backward(root)?.into_params();
        let numeric = finite_difference_gradient(
            |p| {
                let (t, r) = self.loss_tape(p, None).map_err(|e| momentum_core::Error::InvalidArgument(e.to_string()))?;
                t.value(r).item()
            },
            &self.model.params,
            DEFAULT_STEP,
        )?;
        Ok(max_relative_error(&analytic, &numeric))
    }
}

fn tiny_transformer(variant: TransformerVariant, seed: u64) -> anyhow::Result<(Transformer, Vec<TokenExample>)> {
    let mut rng = seeded_rng(seed);
    let mut cfg = TransformerConfig::new(variant, 5);
    cfg.d_model = 4;
    cfg.heads = 2;
    cfg.ff_dim = 3;
    cfg.max_len = 6;
    cfg.attn = AttnHyper::new(rng.gen_range(0.5..1.5), rng.gen_range(0.0..0.9))?;
    cfg.beta_conn = rng.gen_range(0.0..0.9);
    let model = Transformer::new(cfg, &mut rng)?;
    let batch = (0..2)
        .map(|_| {
            let inputs: Vec<usize> = (0..5).map(|_| rng.gen_range(0..5)).collect();
            let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..5)).collect();
            let weights = (0..5).map(|p| if p < 2 { 0.0 } else { 1.0 }).collect();
            TokenExample { inputs, targets, weights }
        })
        .collect();
    Ok((model, batch))
}

fn transformer_gradient_error(variant: TransformerVariant, seed: u64) -> anyhow::Result<f64> {
    let (model, batch) = tiny_transformer(variant, seed)?;
    let (_, grads) = model.loss_and_grad(&batch)?;
    let fd = finite_difference_gradient(
        |p| {
            let mut m = model.clone();
            *m.params_mut() = p.clone();
            m.loss(&batch)
        },
        model.params(),
        DEFAULT_STEP,
    )?;
    Ok(max_relative_error(&grads, &fd))
}

fn gradients(opts: &VerifyOptions) -> Vec<Check> {
    let s = Suite::Gradients;
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        out.push(check(s, format!("op {kind} gradient"), 1e-5, || {
            worst_over(0..GRADIENT_SEEDS, |seed| Ok(check_op(kind, seed, opts.fault)?))
        }));
    }
    let mut cells: Vec<(CellKind, Parameterization, String)> =
        CellKind::ALL.iter().map(|&k| (k, Parameterization::V, format!("cell {k} gradient"))).collect();
    cells.push((CellKind::Momentum, Parameterization::U, "cell momentum-rnn (u-form) gradient".into()));
    for (kind, param, name) in cells {
        out.push(check(s, name, 1e-5, || {
            worst_over(0..GRADIENT_SEEDS, |seed| CellCase::new(kind, param, seed)?.gradient_error(opts.fault))
        }));
    }
    for variant in TransformerVariant::ALL {
        out.push(check(s, format!("transformer {variant} gradient"), 1e-5, || {
            worst_over(0..GRADIENT_SEEDS, |seed| transformer_gradient_error(variant, seed))
        }));
    }
    out
}

// ------------------------------------------------------------- equivalences

/// Hidden trajectory of the two-stream momentum cell against the
/// one-equation recurrence in `h` alone.
fn momentum_single_equation_gap(seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let (hidden, input_dim, batch, steps) = (4, 3, 3, 10);
    let mut hyper = MomentumHyper::constant(rng.gen_range(0.0..0.95), rng.gen_range(0.5..1.5));
    if seed % 4 == 3 {
        hyper.schedule = Schedule::Nesterov;
    }
    let mut model = RecurrentModel::new(CellKind::Momentum, hyper, Activation::Tanh, false, input_dim, hidden, 1, &mut rng)?;
    // Shrunk weights keep |h| well inside (−0.99, 0.99).
    let cell = RnnParams::new(
        Tensor::uniform(&[hidden, hidden], -0.3, 0.3, &mut rng),
        Tensor::uniform(&[hidden, input_dim + 1], -0.3, 0.3, &mut rng),
        Activation::Tanh,
    )?;
    cell.insert_into("cell", &mut model.params);
    let inputs: Vec<Tensor> = (0..steps).map(|_| Tensor::uniform(&[batch, input_dim], -1.0, 1.0, &mut rng)).collect();
    let mut tape = Tape::new();
    let vars = tape.register(&model.params);
    let unrolled = model.unroll(&mut tape, &vars, &inputs)?;
    let mut prev2 = Tensor::zeros(&[batch, hidden]);
    let mut prev = Tensor::zeros(&[batch, hidden]);
    let mut worst: f64 = 0.0;
    for (t, x) in inputs.iter().enumerate() {
        let h = tape.value(unrolled.hidden[t]);
        if h.max_abs() >= 0.99 {
            bail!("seed {seed}: |h| reached {} at step {}", h.max_abs(), t + 1);
        }
        let next = momentum_step_single_eq(&cell, &hyper, &prev, &prev2, &momentum_core::cells::augment(x)?, t + 1)?;
        worst = worst.max(next.max_abs_diff(h));
        prev2 = std::mem::replace(&mut prev, next);
    }
    Ok(worst)
}

/// Momentum cell with μ = 0, s = 1 against the plain recurrent cell:
/// trajectories and parameter gradients.
fn momentum_rnn_reduction_gap(seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let hyper = MomentumHyper::constant(0.0, 1.0);
    let plain = RecurrentModel::new(CellKind::Rnn, hyper, Activation::Tanh, false, 2, 4, 1, &mut rng)?;
    let mut mom = plain.clone();
    mom.kind = CellKind::Momentum;
    let inputs: Vec<Tensor> = (0..8).map(|_| Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng)).collect();
    let target = Tensor::uniform(&[3, 1], -1.0, 1.0, &mut rng);
    let run = |m: &RecurrentModel| -> anyhow::Result<(Vec<Tensor>, ParamMap)> {
        let mut tape = Tape::new();
        let vars = tape.register(&m.params);
        let un = m.unroll(&mut tape, &vars, &inputs)?;
        let out = m.readout(&mut tape, &vars, *un.hidden.last().unwrap())?;
        let loss = tape.mse_loss(out, &target)?;
        let hs = un.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        Ok((hs, tape.backward(loss)?.into_params()))
    };
    let (ha, ga) = run(&plain)?;
    let (hb, gb) = run(&mom)?;
    let mut worst: f64 = 0.0;
    for (a, b) in ha.iter().zip(&hb) {
        worst = worst.max(a.max_abs_diff(b));
    }
    for (k, g) in &ga {
        worst = worst.max(g.max_abs_diff(&gb[k]));
    }
    Ok(worst)
}

/// GHBNODE with ξ = 0 and identity momentum activation against HBNODE:
/// final state and every adjoint output.
fn ghbnode_reduction_gap(seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let field = MlpField::new(&[3, 8, 3], &mut rng)?;
    let h0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let m0 = Tensor::uniform(&[4, 3], -0.5, 0.5, &mut rng);
    let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let gamma = rng.gen_range(0.05..1.0);
    let o = AdjointOptions {
        solver: SolverOptions::dopri(1e-10),
        ..Default::default()
    };
    let y0 = OdeState::with_momentum(h0, m0)?;
    let f1 = OdeFunc::new(&field);
    let (hb, _) = solve(&f1, &Dynamics::HeavyBall { gamma }, &y0, 0.0, 1.0, &o.solver)?;
    let hb_back = adjoint_backward_hbnode(&f1, &hb, &a, gamma, 0.0, 1.0, &o)?;
    let gen = Dynamics::Generalized {
        gamma,
        xi: 0.0,
        activation: MomentumActivation::Identity,
    };
    let f2 = OdeFunc::new(&field);
    let (gh, _) = solve(&f2, &gen, &y0, 0.0, 1.0, &o.solver)?;
    let gh_back = adjoint_backward_ghbnode(&f2, &gh, &a, gamma, 0.0, MomentumActivation::Identity, 0.0, 1.0, &o)?;
    let mut worst = hb.h.max_abs_diff(&gh.h);
    worst = worst.max(hb.m.as_ref().unwrap().max_abs_diff(gh.m.as_ref().unwrap()));
    for (k, g) in &hb_back.param_grads {
        worst = worst.max(g.max_abs_diff(&gh_back.param_grads[k]));
    }
    worst = worst.max(hb_back.d_h0.max_abs_diff(&gh_back.d_h0));
    worst = worst.max(hb_back.d_m0.as_ref().unwrap().max_abs_diff(gh_back.d_m0.as_ref().unwrap()));
    Ok(worst.max((hb_back.d_gamma - gh_back.d_gamma).abs()))
}

fn qkv(n: usize, d: usize, dv: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    (
        Tensor::uniform(&[n, d], -1.0, 1.0, rng),
        Tensor::uniform(&[n, d], -1.0, 1.0, rng),
        Tensor::uniform(&[n, dv], -1.0, 1.0, rng),
    )
}

/// β = 0, γ = 1 momentum attention against linear attention, causal and
/// not, through both the direct routines and the tape head.
fn attention_reduction_gap(seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let n = rng.gen_range(1..=32);
    let (q, k, v) = qkv(n, 4, 3, &mut rng);
    let phi = FeatureMap::EluPlusOne;
    let hyper = AttnHyper::linear();
    let mut worst = causal_momentum_attention(&q, &k, &v, phi, &hyper, None)?
        .max_abs_diff(&causal_linear_attention(&q, &k, &v, phi, None)?);
    worst = worst.max(
        momentum_attention_noncausal(&q, &k, &v, phi, &hyper, None)?.max_abs_diff(&linear_attention(&q, &k, &v, phi, None)?),
    );
    for causal in [true, false] {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let a = attention_head(&mut tape, qv, kv, vv, &AttentionKind::Momentum(hyper), causal)?;
        let b = attention_head(&mut tape, qv, kv, vv, &AttentionKind::Linear, causal)?;
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b)));
    }
    Ok(worst)
}

fn equivalences() -> Vec<Check> {
    let s = Suite::Equivalences;
    vec![
        check(s, "momentum cell = one-equation form", 1e-9, || worst_over(0..20, momentum_single_equation_gap)),
        check(s, "momentum-rnn(mu=0,s=1) = rnn", 1e-9, || worst_over(0..10, momentum_rnn_reduction_gap)),
        check(s, "ghbnode(xi=0,identity) = hbnode", 1e-9, || worst_over(0..10, ghbnode_reduction_gap)),
        check(s, "momentum attention(beta=0,gamma=1) = linear", 1e-9, || {
            worst_over(0..10, attention_reduction_gap)
        }),
    ]
}

// ----------------------------------------------------------------- adjoints

fn classifier_gradient_error(family: OdeFamily, seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut config = ClassifierConfig::new(family, 2, 2);
    config.damping.omega = rng.gen_range(-3.0..1.0);
    config.damping.chi = rng.gen_range(-3.0..1.0);
    let model = OdeClassifier::new(config, &mut rng)?;
    let x = Tensor::uniform(&[6, 2], -1.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let opts = AdjointOptions {
        solver: SolverOptions::dopri(1e-9),
        ..Default::default()
    };
    let step = model.loss_and_grad(&x, &labels, &opts)?;
    let fd = finite_difference_gradient(
        |p| {
            let mut m = model.clone();
            m.set_params(p)?;
            m.loss(&x, &labels, &opts.solver)
        },
        &model.params(),
        DEFAULT_STEP,
    )?;
    Ok(max_relative_error(&step.grads, &fd))
}

/// `h′ = θh` with `L = h(T)`: `dL/dθ = T h₀ e^{θT}` and `dL/dh₀ = e^{θT}`.
fn scalar_adjoint_gap(seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let (theta, t1, h0) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0));
    let field = LinearField::new(Tensor::from_rows(&[vec![theta]])?)?;
    let func = OdeFunc::new(&field);
    let o = AdjointOptions {
        solver: SolverOptions::dopri(1e-11),
        ..Default::default()
    };
    let (y1, _) = solve(&func, &Dynamics::FirstOrder, &OdeState::position(Tensor::full(&[1, 1], h0)), 0.0, t1, &o.solver)?;
    let back = adjoint_backward_node(&func, &y1.h, &Tensor::ones(&[1, 1]), 0.0, t1, &o)?;
    let growth: f64 = (theta * t1).exp();
    let g = (back.param_grads["f.a"].data()[0] - t1 * h0 * growth).abs();
    Ok(g.max((back.d_h0.data()[0] - growth).abs()))
}

/// With a linear field `f(h) = hA` the momentum adjoint of HBNODE obeys
/// `a_m″ = γ a_m′ + a_m A`; the residual is measured with five-point
/// stencils on a uniform checkpoint grid.
fn heavy_ball_adjoint_law_residual(seed: u64) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let a_mat = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let field = LinearField::new(a_mat.clone())?;
    let func = OdeFunc::new(&field);
    let gamma = rng.gen_range(0.0..1.0);
    let y0 = OdeState::with_momentum(Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng), Tensor::zeros(&[1, 3]))?;
    let dt = 0.05;
    let o = AdjointOptions {
        solver: SolverOptions::dopri(1e-13),
        checkpoints: (1..40).map(|i| i as f64 * dt).collect(),
        clip: None,
    };
    let (y1, _) = solve(&func, &Dynamics::HeavyBall { gamma }, &y0, 0.0, 2.0, &o.solver)?;
    let dl = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
    let back = adjoint_backward_hbnode(&func, &y1, &dl, gamma, 0.0, 2.0, &o)?;
    let am: Vec<Vec<f64>> = back.trace.iter().map(|s| s.a_m.as_ref().unwrap().data().to_vec()).collect();
    let h = -dt;
    let mut worst: f64 = 0.0;
    for i in 2..am.len() - 2 {
        for k in 0..3 {
            let d1 = (-am[i + 2][k] + 8.0 * am[i + 1][k] - 8.0 * am[i - 1][k] + am[i - 2][k]) / (12.0 * h);
            let d2 = (-am[i + 2][k] + 16.0 * am[i + 1][k] - 30.0 * am[i][k] + 16.0 * am[i - 1][k] - am[i - 2][k])
                / (12.0 * h * h);
            let am_a: f64 = (0..3).map(|j| am[i][j] * a_mat.at(j, k)).sum();
            worst = worst.max((d2 - gamma * d1 - am_a).abs());
        }
    }
    Ok(worst)
}

fn adjoints() -> Vec<Check> {
    let s = Suite::Adjoints;
    let mut out: Vec<Check> = [OdeFamily::Node, OdeFamily::Hbnode, OdeFamily::Ghbnode]
        .into_iter()
        .map(|family| {
            check(s, format!("{family} adjoint gradient (tol 1e-9)"), 1e-4, || {
                worst_over(0..GRADIENT_SEEDS, |seed| classifier_gradient_error(family, seed))
            })
        })
        .collect();
    out.push(check(s, "scalar growth adjoint = closed form", 1e-8, || worst_over(0..10, scalar_adjoint_gap)));
    out.push(check(s, "hbnode adjoint second-order law", 1e-6, || {
        worst_over(0..5, heavy_ball_adjoint_law_residual)
    }));
    out
}

// --------------------------------------------------------------- eigenpairs

/// Number of random `(F, J, γ)` triples in the pairing check.
pub const PAIRING_TRIALS: u64 = 100;

pub fn max_pairing_residual(trials: u64) -> anyhow::Result<f64> {
    worst_over(0..trials, |seed| {
        let mut rng = seeded_rng(seed);
        let n = rng.gen_range(1..=4);
        let f = Tensor::uniform(&[n, n], -1.0, 1.0, &mut rng);
        let j = Tensor::uniform(&[n, n], -1.0, 1.0, &mut rng);
        let gamma = rng.gen_range(0.0..2.0);
        let dt = rng.gen_range(0.01..1.0);
        Ok(eigen_pairing_check(&f, &j, gamma, dt)?.max_pair_residual)
    })
}

fn eigenpairs() -> Vec<Check> {
    vec![check(
        Suite::Eigenpairs,
        format!("spectrum pair sums = -dt*gamma ({PAIRING_TRIALS} trials)"),
        1e-8,
        || max_pairing_residual(PAIRING_TRIALS),
    )]
}

// ---------------------------------------------------------------- attention

const BETAS: [f64; 3] = [0.0, 0.3, 0.9];
const LENGTHS: [usize; 5] = [1, 2, 7, 33, 64];

fn recurrent_vs_unrolled() -> anyhow::Result<f64> {
    let mut rng = seeded_rng(0);
    worst_over(LENGTHS.iter().flat_map(|&n| BETAS.map(|b| (n, b))), |(n, beta)| {
        let (q, k, v) = qkv(n, 4, 3, &mut rng);
        let hyper = AttnHyper::new(rng.gen_range(0.5..1.5), beta)?;
        let mut w: f64 = 0.0;
        for phi in [FeatureMap::EluPlusOne, FeatureMap::PositiveClip] {
            let rec = causal_momentum_attention(&q, &k, &v, phi, &hyper, None)?;
            let unr = causal_momentum_unrolled(&q, &k, &v, phi, &hyper, None)?;
            let brute = kernel_average_bruteforce(&q, &k, &v, phi, true, |i, j| hyper.unrolled_weight(i, j), None)?;
            w = w.max(rec.max_abs_diff(&unr)).max(rec.max_abs_diff(&brute));
        }
        Ok(w)
    })
}

fn collapse_to_linear() -> anyhow::Result<f64> {
    let mut rng = seeded_rng(1);
    worst_over(LENGTHS, |n| {
        let (q, k, v) = qkv(n, 4, 3, &mut rng);
        let phi = FeatureMap::EluPlusOne;
        let mom = causal_momentum_attention(&q, &k, &v, phi, &AttnHyper::linear(), None)?;
        let lin = causal_linear_attention(&q, &k, &v, phi, None)?;
        let brute = kernel_average_bruteforce(&q, &k, &v, phi, true, |_, _| 1.0, None)?;
        let full = linear_attention(&q, &k, &v, phi, None)?;
        let full_brute = kernel_average_bruteforce(&q, &k, &v, phi, false, |_, _| 1.0, None)?;
        Ok(mom
            .max_abs_diff(&lin)
            .max(lin.max_abs_diff(&brute))
            .max(full.max_abs_diff(&full_brute)))
    })
}

fn noncausal_vs_bruteforce() -> anyhow::Result<f64> {
    let mut rng = seeded_rng(2);
    worst_over(LENGTHS.iter().flat_map(|&n| BETAS.map(|b| (n, b))), |(n, beta)| {
        let (q, k, v) = qkv(n, 4, 3, &mut rng);
        let hyper = AttnHyper::new(rng.gen_range(0.5..1.5), beta)?;
        let phi = FeatureMap::EluPlusOne;
        let direct = momentum_attention_noncausal(&q, &k, &v, phi, &hyper, None)?;
        let brute = kernel_average_bruteforce(&q, &k, &v, phi, false, |_, j| hyper.unrolled_weight(n, j), None)?;
        Ok(direct.max_abs_diff(&brute))
    })
}

/// `|outer products − N|` for the recurrent causal forms.
fn kv_products_per_token() -> anyhow::Result<f64> {
    let mut rng = seeded_rng(3);
    worst_over(LENGTHS, |n| {
        let (q, k, v) = qkv(n, 4, 3, &mut rng);
        let c1 = KvCounter::default();
        causal_linear_attention(&q, &k, &v, FeatureMap::EluPlusOne, Some(&c1))?;
        let c2 = KvCounter::default();
        causal_momentum_attention(&q, &k, &v, FeatureMap::EluPlusOne, &AttnHyper::new(1.0, 0.6)?, Some(&c2))?;
        Ok((c1.get().abs_diff(n)).max(c2.get().abs_diff(n)) as f64)
    })
}

/// The masked `N × N` tape head against the recurrent form.
fn tape_head_vs_recurrent() -> anyhow::Result<f64> {
    let mut rng = seeded_rng(4);
    worst_over(BETAS, |beta| {
        let (q, k, v) = qkv(17, 4, 3, &mut rng);
        let hyper = AttnHyper::new(rng.gen_range(0.5..1.5), beta)?;
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let head = attention_head(&mut tape, qv, kv, vv, &AttentionKind::Momentum(hyper), true)?;
        let rec = causal_momentum_attention(&q, &k, &v, FeatureMap::EluPlusOne, &hyper, None)?;
        Ok(tape.value(head).max_abs_diff(&rec))
    })
}

fn layer_gradient_error(kind: AttentionKind, causal: bool, seed: u64, fault: Option<OpKind>) -> anyhow::Result<f64> {
    let mut rng = seeded_rng(seed);
    let n = rng.gen_range(1..=6);
    let d = 4;
    let mut params = ParamMap::new();
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("a.{name}"), Tensor::uniform(&[d, d], -0.8, 0.8, &mut rng));
    }
    let x = Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng);
    let probe = Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng);
    let build = |p: &ParamMap, fault: Option<OpKind>| -> momentum_core::Result<(Tape, momentum_core::Var)> {
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let vars = tape.register(p);
        let w = AttentionVars::from_registered(&vars, "a")?;
        let xv = tape.constant(x.clone());
        let out = attention_layer(&mut tape, xv, &w, 2, &kind, causal)?;
        let pv = tape.constant(probe.clone());
        let weighted = tape.hadamard(out, pv)?;
        let root = tape.sum(weighted)?;
        Ok((tape, root))
    };
    let (tape, root) = build(&params, fault)?;
    let analytic = tape.backward(root)?.into_params();
    let numeric = finite_difference_gradient(
        |p| {
            let (t, r) = build(p, None)?;
            t.value(r).item()
        },
        &params,
        DEFAULT_STEP,
    )?;
    // At N = 1 the query and key blocks are identically zero, so the error
    // is taken over the whole gradient rather than block by block.
    Ok(global_relative_error(&analytic, &numeric))
}

fn attention(opts: &VerifyOptions) -> Vec<Check> {
    let s = Suite::Attention;
    let mut out = vec![
        check(s, "causal recurrent = unrolled = brute force (N<=64)", 1e-10, recurrent_vs_unrolled),
        check(s, "beta=0,gamma=1 recurrent = linear = brute force", 1e-12, collapse_to_linear),
        check(s, "noncausal momentum = brute force", 1e-10, noncausal_vs_bruteforce),
        check(s, "kv outer products = N", 0.0, kv_products_per_token),
        check(s, "tape head = recurrent form", 1e-10, tape_head_vs_recurrent),
    ];
    let mut rng = seeded_rng(5);
    let hyper = AttnHyper::new(rng.gen_range(0.5..1.5), 0.6).expect("valid hyper");
    for kind in [AttentionKind::Softmax, AttentionKind::Linear, AttentionKind::Momentum(hyper)] {
        for causal in [true, false] {
            let tag = if causal { "causal" } else { "noncausal" };
            out.push(check(s, format!("{} layer gradient ({tag})", kind.name()), 1e-5, || {
                worst_over(0..GRADIENT_SEEDS, |seed| layer_gradient_error(kind, causal, seed, opts.fault))
            }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn failed_computation_is_a_failed_check() {
        let c = check(Suite::Gradients, "x", 1.0, || bail!("boom"));
        assert!(!c.passed());
        assert!(c.worst.is_infinite());
        let report = Report { checks: vec![c] };
        assert!(report.render().contains("FAIL (boom)"));
    }

    #[test]
    fn eigenpairs_suite_passes() {
        let r = run_suite(Suite::Eigenpairs, &VerifyOptions::default());
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn corrupted_tanh_fails_gradients_and_names_it() {
        let check = check(Suite::Gradients, "op tanh gradient", 1e-5, || {
            worst_over(0..3, |seed| Ok(check_op(OpKind::Tanh, seed, Some(OpKind::Tanh))?))
        });
        assert!(!check.passed());
        let cell = CellCase::new(CellKind::Rnn, Parameterization::V, 0)
            .unwrap()
            .gradient_error(Some(OpKind::Tanh))
            .unwrap();
        assert!(cell > 1e-3);
    }
}
