//! Small causal transformer for token-level sequence tasks.
//!
//! Layer `ℓ` maps its input `X` to `f_ℓ(V̂ + X + β̃(X − X_prev))`, where
//! `X_prev` is the previous layer's input (`X` itself for the first layer)
//! and `f_ℓ(Y) = Y + tanh(Y W₁ + b₁) W₂ + b₂`. With `β̃ = 0` this is the
//! plain residual block.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::kernels::{adaptive_momentum, AttnHyper};
use crate::attention::layer::{attention_layer, AttentionKind, AttentionVars};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ParamMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TransformerVariant {
    Softmax,
    Linear,
    Momentum,
    /// Momentum attention with `β̃` re-estimated from successive training
    /// gradients.
    AdaptiveMomentum,
}

impl TransformerVariant {
    pub const ALL: [TransformerVariant; 4] = [
        TransformerVariant::Softmax,
        TransformerVariant::Linear,
        TransformerVariant::Momentum,
        TransformerVariant::AdaptiveMomentum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformerVariant::Softmax => "softmax",
            TransformerVariant::Linear => "linear",
            TransformerVariant::Momentum => "momentum",
            TransformerVariant::AdaptiveMomentum => "adaptive-momentum",
        }
    }
}

impl fmt::Display for TransformerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown transformer variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub variant: TransformerVariant,
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub attn: AttnHyper,
    pub beta_conn: f64,
    pub delta: f64,
}

impl TransformerConfig {
    pub fn new(variant: TransformerVariant, vocab: usize) -> Self {
        Self {
            variant,
            vocab,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_len: 32,
            attn: AttnHyper { gamma: 1.0, beta: 0.6 },
            beta_conn: 0.6,
            delta: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab < 2 || self.d_model == 0 || self.layers == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return bad(format!("invalid transformer sizes {self:?}"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} does not split into {} heads", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.beta_conn) {
            return bad(format!("connection momentum must lie in [0, 1), got {}", self.beta_conn));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("clamp margin must lie in (0, 1), got {}", self.delta));
        }
        self.attn.validate()
    }

    pub fn attention_kind(&self) -> AttentionKind {
        match self.variant {
            TransformerVariant::Softmax => AttentionKind::Softmax,
            TransformerVariant::Linear => AttentionKind::Linear,
            TransformerVariant::Momentum | TransformerVariant::AdaptiveMomentum => AttentionKind::Momentum(self.attn),
        }
    }

    fn initial_beta_conn(&self) -> f64 {
        match self.variant {
            TransformerVariant::Softmax | TransformerVariant::Linear => 0.0,
            _ => self.beta_conn,
        }
    }
}

/// One training sequence: predict `targets[p]` from `inputs[..=p]`; the
/// loss averages over positions with nonzero weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenExample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

/// `sin`/`cos` position codes, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    params: ParamMap,
    beta_conn: f64,
    last_grad: Option<Vec<f64>>,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.ff_dim, config.vocab);
        let mut params = ParamMap::new();
        params.insert("embed".into(), Tensor::normal(&[v, d], 1.0, rng));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("l{l}.{w}"), Tensor::fan_in_uniform(&[d, d], d, rng));
            }
            params.insert(format!("l{l}.ff1.w"), Tensor::fan_in_uniform(&[d, f], d, rng));
            params.insert(format!("l{l}.ff1.b"), Tensor::zeros(&[1, f]));
            params.insert(format!("l{l}.ff2.w"), Tensor::fan_in_uniform(&[f, d], f, rng));
            params.insert(format!("l{l}.ff2.b"), Tensor::zeros(&[1, d]));
        }
        params.insert("out.w".into(), Tensor::fan_in_uniform(&[d, v], d, rng));
        params.insert("out.b".into(), Tensor::zeros(&[1, v]));
        let beta_conn = config.initial_beta_conn();
        Ok(Self {
            config,
            params,
            beta_conn,
            last_grad: None,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    /// Current connection momentum `β̃`.
    pub fn beta_conn(&self) -> f64 {
        self.beta_conn
    }

    /// Logits `[N, vocab]` for one token sequence.
    pub fn forward(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, tokens: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 || n > cfg.max_len {
            return Err(Error::InvalidArgument(format!("sequence length {n} outside 1..={}", cfg.max_len)));
        }
        let mut onehot = vec![0.0; n * cfg.vocab];
        for (p, &t) in tokens.iter().enumerate() {
            if t >= cfg.vocab {
                return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", cfg.vocab)));
            }
            onehot[p * cfg.vocab + t] = 1.0;
        }
        let get = |k: &str| {
            vars.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {k}")))
        };
        let onehot = tape.constant(Tensor::from_parts(vec![n, cfg.vocab], onehot));
        let emb = tape.matmul(onehot, get("embed")?)?;
        let pos = tape.constant(sinusoidal_positions(n, cfg.d_model));
        let mut x = tape.add(emb, pos)?;
        let mut prev = x;
        let kind = cfg.attention_kind();
        for l in 0..cfg.layers {
            let attn = AttentionVars::from_registered(vars, &format!("l{l}"))?;
            let v_hat = attention_layer(tape, x, &attn, cfg.heads, &kind, true)?;
            let mut y = tape.add(v_hat, x)?;
            if self.beta_conn != 0.0 && l > 0 {
                let diff = tape.sub(x, prev)?;
                let push = tape.scale(diff, self.beta_conn)?;
                y = tape.add(y, push)?;
            }
            let h = tape.matmul(y, get(&format!("l{l}.ff1.w"))?)?;
            let h = tape.add(h, get(&format!("l{l}.ff1.b"))?)?;
            let h = tape.tanh(h)?;
            let h = tape.matmul(h, get(&format!("l{l}.ff2.w"))?)?;
            let h = tape.add(h, get(&format!("l{l}.ff2.b"))?)?;
            prev = x;
            x = tape.add(y, h)?;
        }
        let logits = tape.matmul(x, get("out.w")?)?;
        tape.add(logits, get("out.b")?)
    }

    fn batch_loss(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, batch: &[TokenExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for ex in batch {
            if ex.targets.len() != ex.inputs.len() || ex.weights.len() != ex.inputs.len() {
                return Err(Error::InvalidArgument("example inputs, targets and weights differ in length".into()));
            }
            logits.push(self.forward(tape, vars, &ex.inputs)?);
            targets.extend_from_slice(&ex.targets);
            weights.extend_from_slice(&ex.weights);
        }
        let all = if logits.len() == 1 { logits[0] } else { tape.concat(&logits, 0)? };
        tape.cross_entropy_loss(all, &targets, Some(&weights))
    }

    pub fn loss(&self, batch: &[TokenExample]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let loss = self.batch_loss(&mut tape, &vars, batch)?;
        tape.value(loss).item()
    }

    pub fn loss_and_grad(&self, batch: &[TokenExample]) -> Result<(f64, ParamMap)> {
        let mut tape = Tape::new();
        let vars = tape.register(&self.params);
        let loss = self.batch_loss(&mut tape, &vars, batch)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, grads.into_params()))
    }

    /// Feeds the latest training gradient to the adaptive rule; a no-op for
    /// the other variants.
    pub fn observe_gradient(&mut self, grads: &ParamMap) -> Result<()> {
        if self.config.variant != TransformerVariant::AdaptiveMomentum {
            return Ok(());
        }
        let flat: Vec<f64> = grads.values().flat_map(|t| t.data().iter().copied()).collect();
        if let Some(prev) = &self.last_grad {
            self.beta_conn = adaptive_momentum(&flat, prev, self.config.delta, self.beta_conn)?;
        }
        self.last_grad = Some(flat);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::{finite_difference_gradient, max_relative_error};
    use crate::seeded_rng;

    fn tiny(variant: TransformerVariant) -> Transformer {
        let mut cfg = TransformerConfig::new(variant, 5);
        cfg.d_model = 4;
        cfg.heads = 2;
        cfg.ff_dim = 3;
        cfg.max_len = 6;
        Transformer::new(cfg, &mut seeded_rng(3)).unwrap()
    }

    fn example() -> TokenExample {
        TokenExample {
            inputs: vec![0, 3, 1, 0, 3],
            targets: vec![3, 1, 0, 3, 1],
            weights: vec![0.0, 0.0, 0.0, 1.0, 1.0],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for variant in TransformerVariant::ALL {
            let model = tiny(variant);
            let batch = vec![example()];
            let (_, grads) = model.loss_and_grad(&batch).unwrap();
            let fd = finite_difference_gradient(
                |p| {
                    let mut m = model.clone();
                    *m.params_mut() = p.clone();
                    m.loss(&batch)
                },
                model.params(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&grads, &fd);
            assert!(err < 1e-5, "{variant}: {err}");
        }
    }

    #[test]
    fn causal_outputs_ignore_future_tokens() {
        let model = tiny(TransformerVariant::Momentum);
        let eval = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let vars = tape.register(model.params());
            let out = model.forward(&mut tape, &vars, tokens).unwrap();
            tape.value(out).clone()
        };
        let a = eval(&[1, 2, 3, 4]);
        let b = eval(&[1, 2, 0, 0]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn adaptive_connection_tracks_gradients() {
        let mut model = tiny(TransformerVariant::AdaptiveMomentum);
        let g = ParamMap::from([("a".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        model.observe_gradient(&g).unwrap();
        assert_eq!(model.beta_conn(), 0.6);
        model.observe_gradient(&g).unwrap();
        assert_eq!(model.beta_conn(), 1.0 - 1e-3);
        let mut plain = tiny(TransformerVariant::Linear);
        plain.observe_gradient(&g).unwrap();
        plain.observe_gradient(&g).unwrap();
        assert_eq!(plain.beta_conn(), 0.0);
    }

    #[test]
    fn positions_start_with_sin_cos_of_zero() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
