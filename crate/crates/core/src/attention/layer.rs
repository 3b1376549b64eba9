//! Differentiable attention on a tape. Linear-family kernels are evaluated
//! in the masked `N×N` form, `((φQ φKᵀ) ⊙ W) V / ((φQ φKᵀ) ⊙ L) 1`, where
//! `W` holds the momentum weights and `L` the causal mask. The recurrent
//! evaluators in `kernels` serve inference and act as oracles for this form.

use std::collections::BTreeMap;
use std::fmt;

use crate::attention::kernels::AttnHyper;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Added to masked softmax scores; large enough that `exp` underflows to 0.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    Softmax,
    Linear,
    Momentum(AttnHyper),
}

impl AttentionKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Linear => "linear",
            AttentionKind::Momentum(_) => "momentum",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mixing weights of the linear-family kernels (1-based `i`, `j`).
fn kernel_weights(kind: &AttentionKind, n: usize, causal: bool) -> (Tensor, Tensor) {
    let mut w = vec![0.0; n * n];
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        let last = if causal { i + 1 } else { n };
        for j in 0..last {
            mask[i * n + j] = 1.0;
            w[i * n + j] = match kind {
                AttentionKind::Momentum(h) if causal => h.unrolled_weight(i + 1, j + 1),
                AttentionKind::Momentum(h) => h.unrolled_weight(n, j + 1),
                _ => 1.0,
            };
        }
    }
    (Tensor::from_parts(vec![n, n], w), Tensor::from_parts(vec![n, n], mask))
}

/// One head on `[N, d]` queries/keys and `[N, dv]` values.
pub fn attention_head(tape: &mut Tape, q: Var, k: Var, v: Var, kind: &AttentionKind, causal: bool) -> Result<Var> {
    let n = tape.value(q).rows();
    if tape.value(k).rows() != n || tape.value(v).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "attention_head",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        });
    }
    match kind {
        AttentionKind::Softmax => {
            let d = tape.value(q).cols();
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            if causal {
                let mut mask = vec![0.0; n * n];
                for i in 0..n {
                    for j in i + 1..n {
                        mask[i * n + j] = MASKED_SCORE;
                    }
                }
                let mask = tape.constant(Tensor::from_parts(vec![n, n], mask));
                scores = tape.add(scores, mask)?;
            }
            let weights = tape.softmax_rows(scores)?;
            tape.matmul(weights, v)
        }
        AttentionKind::Linear | AttentionKind::Momentum(_) => {
            if let AttentionKind::Momentum(h) = kind {
                h.validate()?;
            }
            let pq = tape.elu_plus_one(q)?;
            let pk = tape.elu_plus_one(k)?;
            let pkt = tape.transpose(pk)?;
            let kern = tape.matmul(pq, pkt)?;
            let (w, mask) = kernel_weights(kind, n, causal);
            let w = tape.constant(w);
            let mask = tape.constant(mask);
            let weighted = tape.hadamard(kern, w)?;
            let num = tape.matmul(weighted, v)?;
            let masked = tape.hadamard(kern, mask)?;
            let ones = tape.constant(Tensor::ones(&[n, 1]));
            let den = tape.matmul(masked, ones)?;
            tape.div(num, den)
        }
    }
}

/// Projection weights of one attention layer, input-major (`[D, D]`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionVars {
    pub fn from_registered(vars: &BTreeMap<String, Var>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            vars.get(&format!("{prefix}.{name}"))
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {prefix}.{name}")))
        };
        Ok(Self {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }
}

/// Multi-head attention over one `[N, D]` sequence: heads are independent
/// slices of the projected width, concatenated and mixed by `wo`.
pub fn attention_layer(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    heads: usize,
    kind: &AttentionKind,
    causal: bool,
) -> Result<Var> {
    let d = tape.value(w.wq).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("width {d} does not split into {heads} heads")));
    }
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice(q, 1, h * dh, dh)?, tape.slice(k, 1, h * dh, dh)?, tape.slice(v, 1, h * dh, dh)?)
        };
        outs.push(attention_head(tape, qh, kh, vh, kind, causal)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    tape.matmul(joined, w.wo)
}
