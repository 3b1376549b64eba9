//! Per-op gradient checks: each op kind applied to random conforming inputs,
//! tape gradient against central finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::finite_diff::{finite_difference_gradient, max_relative_error, DEFAULT_STEP};
use crate::tape::{OpAttrs, OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::{seeded_rng, ParamMap};

/// Inputs and attributes drawn for one check.
struct Case {
    inputs: Vec<Tensor>,
    attrs: OpAttrs,
    /// Whether the output is non-scalar and needs contracting with random
    /// weights before differentiation.
    probe: bool,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| dim(rng)).collect()
}

/// Magnitudes in [0.5, 1.5] with random sign, safe as a divisor.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let magnitude = Tensor::uniform(shape, 0.5, 1.5, rng);
    let sign = Tensor::uniform(shape, -1.0, 1.0, rng);
    magnitude
        .zip_with(&sign, "sign", |m, s| if s < 0.0 { -m } else { m })
        .expect("same shape")
}

fn draw(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let u = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(s, -1.0, 1.0, rng);
    let rank = rng.gen_range(1..=3);
    let s = shape(rng, rank);
    let mut probe = true;
    let (inputs, attrs) = match kind {
        OpKind::MatMul => {
            let (m, k, n, b) = (dim(rng), dim(rng), dim(rng), dim(rng));
            match rng.gen_range(0..3) {
                0 => (vec![u(&[m, k], rng), u(&[k, n], rng)], OpAttrs::None),
                1 => (vec![u(&[b, m, k], rng), u(&[k, n], rng)], OpAttrs::None),
                _ => (vec![u(&[b, m, k], rng), u(&[b, k, n], rng)], OpAttrs::None),
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Hadamard | OpKind::Div => {
            // Half of the cases broadcast the right operand.
            let rhs_shape: Vec<usize> = if rng.gen_bool(0.5) {
                s.clone()
            } else if rng.gen_bool(0.5) {
                vec![1]
            } else {
                s.iter().map(|&e| if rng.gen_bool(0.5) { 1 } else { e }).collect()
            };
            let rhs = if kind == OpKind::Div {
                away_from_zero(&rhs_shape, rng)
            } else {
                u(&rhs_shape, rng)
            };
            (vec![u(&s, rng), rhs], OpAttrs::None)
        }
        OpKind::Scale => (vec![u(&s, rng)], OpAttrs::Scale(rng.gen_range(-2.0..2.0))),
        OpKind::Sqrt => (vec![Tensor::uniform(&s, 0.5, 2.0, rng)], OpAttrs::None),
        OpKind::Sigmoid | OpKind::Tanh | OpKind::Softplus | OpKind::Exp | OpKind::Square => {
            (vec![Tensor::uniform(&s, -2.0, 2.0, rng)], OpAttrs::None)
        }
        OpKind::EluPlusOne => (vec![away_from_zero(&s, rng)], OpAttrs::None),
        OpKind::Sum | OpKind::Mean => {
            probe = false;
            (vec![u(&s, rng)], OpAttrs::None)
        }
        OpKind::Transpose => {
            let r = rng.gen_range(2..=3);
            (vec![u(&shape(rng, r), rng)], OpAttrs::None)
        }
        OpKind::SoftmaxRows => (vec![Tensor::uniform(&s, -2.0, 2.0, rng)], OpAttrs::None),
        OpKind::Concat => {
            let axis = rng.gen_range(0..rank);
            let count = rng.gen_range(1..=3);
            let inputs = (0..count)
                .map(|_| {
                    let mut si = s.clone();
                    si[axis] = dim(rng);
                    u(&si, rng)
                })
                .collect();
            (inputs, OpAttrs::Axis(axis))
        }
        OpKind::Slice => {
            let axis = rng.gen_range(0..rank);
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            (vec![u(&s, rng)], OpAttrs::Slice { axis, start, len })
        }
        OpKind::MseLoss => {
            probe = false;
            (vec![u(&s, rng)], OpAttrs::Target(u(&s, rng)))
        }
        OpKind::CrossEntropyLoss => {
            probe = false;
            let classes = rng.gen_range(2..=5);
            let rows = dim(rng);
            let targets = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
            let mut weights: Vec<f64> = (0..rows).map(|_| if rng.gen_bool(0.25) { 0.0 } else { 1.0 }).collect();
            weights[0] = 1.0;
            (
                vec![Tensor::uniform(&[rows, classes], -2.0, 2.0, rng)],
                OpAttrs::Classes {
                    targets,
                    weights: Some(weights),
                },
            )
        }
    };
    Case { inputs, attrs, probe }
}

fn loss(kind: OpKind, case: &Case, params: &ParamMap, probe: Option<&Tensor>, fault: Option<OpKind>) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let vars: Vec<Var> = (0..case.inputs.len())
        .map(|i| tape.param(format!("in{i}"), params[&format!("in{i}")].clone()))
        .collect();
    let out = tape.record(kind, &vars, &case.attrs)?;
    let root = match probe {
        Some(w) => {
            let w = tape.constant(w.clone());
            let weighted = tape.hadamard(out, w)?;
            tape.sum(weighted)?
        }
        None => out,
    };
    Ok((tape, root))
}

/// Worst relative error between the tape gradient and finite differences
/// for one random instance of `kind`. `fault` corrupts one op's backward
/// rule to confirm the check can fail.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = seeded_rng(seed ^ ((kind as u64 + 1) << 32));
    let case = draw(kind, &mut rng);
    let params: ParamMap = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("in{i}"), t.clone()))
        .collect();
    let probe = if case.probe {
        let (tape, root) = loss(kind, &case, &params, None, None)?;
        Some(Tensor::uniform(tape.value(root).shape(), -1.0, 1.0, &mut rng))
    } else {
        None
    };
    let (tape, root) = loss(kind, &case, &params, probe.as_ref(), fault)?;
    let analytic = tape.backward(root)?.into_params();
    let numeric = finite_difference_gradient(
        |p| {
            let (t, r) = loss(kind, &case, p, probe.as_ref(), None)?;
            t.value(r).item()
        },
        &params,
        DEFAULT_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
