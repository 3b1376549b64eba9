//! Plain (non-differentiable) attention evaluations on `[N, D]` matrices.
//!
//! The recurrent forms count the `φ(k)vᵀ` outer products they build so the
//! linear-cost claim can be asserted directly.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tape::softmax_last_axis;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMap {
    /// `elu(x) + 1`, strictly positive.
    EluPlusOne,
    /// `max(x, 1e-6)`.
    PositiveClip,
}

impl FeatureMap {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            FeatureMap::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            FeatureMap::PositiveClip => x.max(1e-6),
        }
    }

    pub fn apply(self, t: &Tensor) -> Tensor {
        t.map(|x| self.eval(x))
    }
}

/// Momentum attention hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnHyper {
    pub gamma: f64,
    pub beta: f64,
}

impl AttnHyper {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        let h = Self { gamma, beta };
        h.validate()?;
        Ok(h)
    }

    pub fn linear() -> Self {
        Self { gamma: 1.0, beta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("attention step size must be > 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("attention momentum must lie in [0, 1), got {}", self.beta)));
        }
        Ok(())
    }

    /// Weight on key `j` when read at position `i` (1-based, `j ≤ i`).
    pub fn unrolled_weight(&self, i: usize, j: usize) -> f64 {
        self.gamma * (1.0 - self.beta.powi((i - j + 1) as i32)) / (1.0 - self.beta)
    }
}

/// Counts `φ(k)vᵀ` outer products.
#[derive(Debug, Default)]
pub struct KvCounter(Cell<usize>);

impl KvCounter {
    pub fn get(&self) -> usize {
        self.0.get()
    }

    fn bump(&self) {
        self.0.set(self.0.get() + 1);
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    for t in [q, k, v] {
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: t.shape().to_vec(),
                reason: "expected [N, D]".into(),
            });
        }
    }
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: if q.shape() != k.shape() { k.shape().to_vec() } else { v.shape().to_vec() },
        });
    }
    Ok(())
}

fn outer_into(acc: &mut [f64], a: &[f64], b: &[f64], c: f64, counter: Option<&KvCounter>) {
    if let Some(counter) = counter {
        counter.bump();
    }
    let dv = b.len();
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            acc[i * dv + j] += c * ai * bj;
        }
    }
}

/// `φ(q)ᵀ s / φ(q)ᵀ z` for a `[D, Dv]` state.
fn read(phi_q: &[f64], s: &[f64], z: &[f64], dv: usize) -> Result<Vec<f64>> {
    let den: f64 = phi_q.iter().zip(z).map(|(a, b)| a * b).sum();
    if den == 0.0 {
        return Err(Error::DivisionByZero { op: "attention normalizer" });
    }
    let mut out = vec![0.0; dv];
    for (d, p) in phi_q.iter().enumerate() {
        for (o, sv) in out.iter_mut().zip(&s[d * dv..(d + 1) * dv]) {
            *o += p * sv;
        }
    }
    Ok(out.into_iter().map(|x| x / den).collect())
}

/// `softmax(QKᵀ/√D)·V`, optionally with the strict upper triangle masked.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul(&k.transpose()?)?.scale(scale);
    if causal {
        let data = scores.data_mut();
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    softmax_last_axis(&scores).matmul(v)
}

/// Linear attention via associativity: one pass builds `Σφ(k)vᵀ` and `Σφ(k)`.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, phi: FeatureMap, counter: Option<&KvCounter>) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let (pq, pk) = (phi.apply(q), phi.apply(k));
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let mut s = vec![0.0; d * dv];
    let mut z = vec![0.0; d];
    for j in 0..n {
        outer_into(&mut s, pk.row(j), v.row(j), 1.0, counter);
        for (zz, kk) in z.iter_mut().zip(pk.row(j)) {
            *zz += kk;
        }
    }
    let mut out = Vec::with_capacity(n * dv);
    for i in 0..n {
        out.extend(read(pq.row(i), &s, &z, dv)?);
    }
    Tensor::new(vec![n, dv], out)
}

/// Running state of the causal recurrences.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnState {
    /// `[D, Dv]`, row-major.
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub m: Vec<f64>,
    dv: usize,
}

impl AttnState {
    pub fn zeros(d: usize, dv: usize) -> Self {
        Self {
            s: vec![0.0; d * dv],
            z: vec![0.0; d],
            m: vec![0.0; d * dv],
            dv,
        }
    }
}

/// `s ← s + φ(k)vᵀ`, `z ← z + φ(k)`, then read with `φ(q)`.
pub fn causal_linear_step(
    state: &mut AttnState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    phi: FeatureMap,
    counter: Option<&KvCounter>,
) -> Result<Vec<f64>> {
    let pk: Vec<f64> = k.iter().map(|&x| phi.eval(x)).collect();
    outer_into(&mut state.s, &pk, v, 1.0, counter);
    for (z, p) in state.z.iter_mut().zip(&pk) {
        *z += p;
    }
    let pq: Vec<f64> = q.iter().map(|&x| phi.eval(x)).collect();
    read(&pq, &state.s, &state.z, state.dv)
}

/// `m ← βm − φ(k)vᵀ`, `s ← s − γm`, `z ← z + φ(k)`, then read with `φ(q)`.
#[allow(clippy::too_many_arguments)]
pub fn causal_momentum_step(
    state: &mut AttnState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    phi: FeatureMap,
    hyper: &AttnHyper,
    counter: Option<&KvCounter>,
) -> Result<Vec<f64>> {
    let pk: Vec<f64> = k.iter().map(|&x| phi.eval(x)).collect();
    for m in state.m.iter_mut() {
        *m *= hyper.beta;
    }
    outer_into(&mut state.m, &pk, v, -1.0, counter);
    for (s, m) in state.s.iter_mut().zip(&state.m) {
        *s -= hyper.gamma * m;
    }
    for (z, p) in state.z.iter_mut().zip(&pk) {
        *z += p;
    }
    let pq: Vec<f64> = q.iter().map(|&x| phi.eval(x)).collect();
    read(&pq, &state.s, &state.z, state.dv)
}

fn run_steps(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mut step: impl FnMut(&mut AttnState, &[f64], &[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let (n, dv) = (q.rows(), v.cols());
    let mut state = AttnState::zeros(q.cols(), dv);
    let mut out = Vec::with_capacity(n * dv);
    for i in 0..n {
        out.extend(step(&mut state, q.row(i), k.row(i), v.row(i))?);
    }
    Tensor::new(vec![n, dv], out)
}

/// Causal linear attention through its recurrent form.
pub fn causal_linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, phi: FeatureMap, counter: Option<&KvCounter>) -> Result<Tensor> {
    run_steps(q, k, v, |st, qi, ki, vi| causal_linear_step(st, qi, ki, vi, phi, counter))
}

/// Causal momentum attention through its recurrent form.
pub fn causal_momentum_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi: FeatureMap,
    hyper: &AttnHyper,
    counter: Option<&KvCounter>,
) -> Result<Tensor> {
    hyper.validate()?;
    run_steps(q, k, v, |st, qi, ki, vi| causal_momentum_step(st, qi, ki, vi, phi, hyper, counter))
}

/// Causal momentum attention in closed form, weighting key `j` at query `i`
/// by `γ(1 − β^{i−j+1})/(1 − β)`.
///
/// Evaluated in one pass: with `A_i = Σ_{j≤i} φ(k_j)v_jᵀ` and the decayed sum
/// `C_i = βC_{i−1} + φ(k_i)v_iᵀ`, the weighted numerator state is
/// `γ(A_i − βC_i)/(1 − β)`. No negative powers of β are formed.
pub fn causal_momentum_unrolled(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi: FeatureMap,
    hyper: &AttnHyper,
    counter: Option<&KvCounter>,
) -> Result<Tensor> {
    hyper.validate()?;
    check_qkv(q, k, v)?;
    let (pq, pk) = (phi.apply(q), phi.apply(k));
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let (gamma, beta) = (hyper.gamma, hyper.beta);
    let mut kv = vec![0.0; d * dv];
    let mut total = vec![0.0; d * dv];
    let mut decayed = vec![0.0; d * dv];
    let mut z = vec![0.0; d];
    let mut s = vec![0.0; d * dv];
    let mut out = Vec::with_capacity(n * dv);
    for i in 0..n {
        kv.iter_mut().for_each(|x| *x = 0.0);
        outer_into(&mut kv, pk.row(i), v.row(i), 1.0, counter);
        for e in 0..d * dv {
            total[e] += kv[e];
            decayed[e] = beta * decayed[e] + kv[e];
            s[e] = gamma * (total[e] - beta * decayed[e]) / (1.0 - beta);
        }
        for (zz, p) in z.iter_mut().zip(pk.row(i)) {
            *zz += p;
        }
        out.extend(read(pq.row(i), &s, &z, dv)?);
    }
    Tensor::new(vec![n, dv], out)
}

/// Non-causal momentum attention: every query reads the full-sequence
/// state, with key `j` weighted by `γ(1 − β^{N−j+1})/(1 − β)`.
pub fn momentum_attention_noncausal(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi: FeatureMap,
    hyper: &AttnHyper,
    counter: Option<&KvCounter>,
) -> Result<Tensor> {
    hyper.validate()?;
    check_qkv(q, k, v)?;
    let (pq, pk) = (phi.apply(q), phi.apply(k));
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let mut s = vec![0.0; d * dv];
    let mut z = vec![0.0; d];
    for j in 0..n {
        outer_into(&mut s, pk.row(j), v.row(j), hyper.unrolled_weight(n, j + 1), counter);
        for (zz, p) in z.iter_mut().zip(pk.row(j)) {
            *zz += p;
        }
    }
    let mut out = Vec::with_capacity(n * dv);
    for i in 0..n {
        out.extend(read(pq.row(i), &s, &z, dv)?);
    }
    Tensor::new(vec![n, dv], out)
}

/// Direct double loop: `v̂_i = Σ_j w_ij κ_ij v_j / Σ_j κ_ij` with
/// `κ_ij = φ(q_i)·φ(k_j)`. `weight(i, j)` takes 1-based indices and the
/// sum runs over `j ≤ i` when `causal`. Counts `N(N+1)/2` (causal) or `N²`
/// kernel products.
pub fn kernel_average_bruteforce(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi: FeatureMap,
    causal: bool,
    weight: impl Fn(usize, usize) -> f64,
    counter: Option<&KvCounter>,
) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let (pq, pk) = (phi.apply(q), phi.apply(k));
    let (n, dv) = (q.rows(), v.cols());
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut den = 0.0;
        let last = if causal { i + 1 } else { n };
        for j in 0..last {
            if let Some(c) = counter {
                c.bump();
            }
            let kappa: f64 = pq.row(i).iter().zip(pk.row(j)).map(|(a, b)| a * b).sum();
            den += kappa;
            let w = weight(i + 1, j + 1) * kappa;
            for (o, vj) in out[i * dv..(i + 1) * dv].iter_mut().zip(v.row(j)) {
                *o += w * vj;
            }
        }
        if den == 0.0 {
            return Err(Error::DivisionByZero { op: "attention normalizer" });
        }
        out[i * dv..(i + 1) * dv].iter_mut().for_each(|o| *o /= den);
    }
    Tensor::new(vec![n, dv], out)
}

/// `T = f(V̂ + X + β̃(X − prev))` for any position-wise `f`.
pub fn momentum_connection(
    x: &Tensor,
    v_hat: &Tensor,
    prev: &Tensor,
    beta_conn: f64,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let y = v_hat.add(x)?.axpy(beta_conn, &x.sub(prev)?)?;
    f(&y)
}

/// `clamp_{[0, 1−δ]}((1 − √(‖g_k − g_{k−1}‖ / ‖g_{k−1}‖))²)`; keeps
/// `previous` when `g_{k−1}` vanishes.
pub fn adaptive_momentum(g_k: &[f64], g_prev: &[f64], delta: f64, previous: f64) -> Result<f64> {
    if g_k.len() != g_prev.len() {
        return Err(Error::ShapeMismatch {
            op: "adaptive_momentum",
            lhs: vec![g_k.len()],
            rhs: vec![g_prev.len()],
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("clamp margin must lie in (0, 1), got {delta}")));
    }
    let prev_norm = g_prev.iter().map(|x| x * x).sum::<f64>().sqrt();
    if prev_norm == 0.0 {
        return Ok(previous);
    }
    let diff = g_k.iter().zip(g_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let raw = (1.0 - (diff / prev_norm).sqrt()).powi(2);
    Ok(raw.clamp(0.0, 1.0 - delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn qkv(seed: u64, n: usize, d: usize, dv: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = seeded_rng(seed);
        (
            Tensor::uniform(&[n, d], -1.5, 1.5, &mut rng),
            Tensor::uniform(&[n, d], -1.5, 1.5, &mut rng),
            Tensor::uniform(&[n, dv], -1.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn single_position_returns_the_value() {
        let (q, k, v) = qkv(1, 1, 3, 2);
        assert_eq!(softmax_attention(&q, &k, &v, false).unwrap(), v);
        let lin = linear_attention(&q, &k, &v, FeatureMap::EluPlusOne, None).unwrap();
        assert!(lin.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_softmax() {
        let (q, _, v) = qkv(2, 4, 3, 2);
        let k = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5]; 4]).unwrap();
        let out = softmax_attention(&q, &k, &v, false).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                let mean = (0..4).map(|j| v.at(j, c)).sum::<f64>() / 4.0;
                assert!((out.at(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn causal_softmax_first_row_is_first_value() {
        let (q, k, v) = qkv(3, 5, 2, 3);
        let out = softmax_attention(&q, &k, &v, true).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn constant_values_pass_through() {
        let (q, k, _) = qkv(4, 6, 3, 2);
        let v = Tensor::full(&[6, 2], 0.7);
        let out = causal_linear_attention(&q, &k, &v, FeatureMap::EluPlusOne, None).unwrap();
        assert!(out.data().iter().all(|x| (x - 0.7).abs() < 1e-14));
    }

    #[test]
    fn first_momentum_output_is_scaled_value() {
        let (q, k, v) = qkv(5, 4, 3, 2);
        let hyper = AttnHyper::new(0.5, 0.9).unwrap();
        let out = causal_momentum_attention(&q, &k, &v, FeatureMap::EluPlusOne, &hyper, None).unwrap();
        for c in 0..2 {
            assert!((out.at(0, c) - 0.5 * v.at(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn unrolled_weights_example() {
        let h = AttnHyper::new(1.0, 0.5).unwrap();
        let w: Vec<f64> = (1..=3).map(|j| h.unrolled_weight(3, j)).collect();
        assert_eq!(w, vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn unit_momentum_rejected() {
        assert!(AttnHyper::new(1.0, 1.0).is_err());
        assert!(AttnHyper::new(0.0, 0.5).is_err());
    }

    #[test]
    fn recurrent_unrolled_and_bruteforce_agree() {
        for seed in 0..5 {
            let (q, k, v) = qkv(seed, 12, 4, 3);
            for beta in [0.0, 0.3, 0.9] {
                let hyper = AttnHyper::new(0.7, beta).unwrap();
                let phi = FeatureMap::EluPlusOne;
                let rnn = causal_momentum_attention(&q, &k, &v, phi, &hyper, None).unwrap();
                let unrolled = causal_momentum_unrolled(&q, &k, &v, phi, &hyper, None).unwrap();
                let brute = kernel_average_bruteforce(&q, &k, &v, phi, true, |i, j| hyper.unrolled_weight(i, j), None).unwrap();
                assert!(rnn.max_abs_diff(&unrolled) < 1e-10);
                assert!(rnn.max_abs_diff(&brute) < 1e-10);
            }
        }
    }

    #[test]
    fn noncausal_matches_bruteforce_and_scales_linear() {
        let (q, k, v) = qkv(8, 6, 3, 2);
        let phi = FeatureMap::EluPlusOne;
        let hyper = AttnHyper::new(0.8, 0.4).unwrap();
        let n = 6;
        let out = momentum_attention_noncausal(&q, &k, &v, phi, &hyper, None).unwrap();
        let brute = kernel_average_bruteforce(&q, &k, &v, phi, false, |_, j| hyper.unrolled_weight(n, j), None).unwrap();
        assert!(out.max_abs_diff(&brute) < 1e-12);
        let flat = AttnHyper::new(0.8, 0.0).unwrap();
        let out = momentum_attention_noncausal(&q, &k, &v, phi, &flat, None).unwrap();
        let lin = linear_attention(&q, &k, &v, phi, None).unwrap().scale(0.8);
        assert!(out.max_abs_diff(&lin) < 1e-12);
    }

    #[test]
    fn counters_measure_cost() {
        let (q, k, v) = qkv(9, 10, 2, 2);
        let phi = FeatureMap::EluPlusOne;
        let hyper = AttnHyper::new(1.0, 0.3).unwrap();
        let c = KvCounter::default();
        causal_momentum_attention(&q, &k, &v, phi, &hyper, Some(&c)).unwrap();
        assert_eq!(c.get(), 10);
        let c = KvCounter::default();
        kernel_average_bruteforce(&q, &k, &v, phi, true, |_, _| 1.0, Some(&c)).unwrap();
        assert_eq!(c.get(), 55);
    }

    #[test]
    fn connection_examples() {
        let mut rng = seeded_rng(10);
        let x = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let prev = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let zero = Tensor::zeros(&[3, 2]);
        let id = |t: &Tensor| Ok(t.clone());
        let out = momentum_connection(&x, &zero, &prev, 0.4, id).unwrap();
        let expected = x.axpy(0.4, &x.sub(&prev).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-15);
        assert_eq!(momentum_connection(&x, &zero, &x, 0.9, id).unwrap(), x);
    }

    #[test]
    fn adaptive_examples() {
        let g = [1.0, -2.0, 0.5];
        let g2: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
        assert_eq!(adaptive_momentum(&g, &g, 1e-3, 0.2).unwrap(), 0.999);
        assert_eq!(adaptive_momentum(&g2, &g, 1e-3, 0.2).unwrap(), 0.0);
        assert_eq!(adaptive_momentum(&g, &[0.0; 3], 1e-3, 0.2).unwrap(), 0.2);
    }
}
