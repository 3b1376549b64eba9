//! Learned vector fields `f(h, t, θ)` acting row-wise on `[batch, n]` states.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ParamMap;

/// Value and vector-Jacobian products of a field at one point.
#[derive(Clone, Debug)]
pub struct FieldVjp {
    pub value: Tensor,
    /// `a · ∂f/∂h`, shaped like the state.
    pub wrt_state: Tensor,
    /// `a · ∂f/∂θ`, one entry per parameter.
    pub wrt_params: ParamMap,
}

pub trait VectorField {
    /// Features per state row.
    fn width(&self) -> usize;

    fn params(&self) -> &ParamMap;

    fn params_mut(&mut self) -> &mut ParamMap;

    /// Records `f(h, t)` on a tape given registered parameter handles.
    fn record(&self, tape: &mut Tape, params: &BTreeMap<String, Var>, h: Var, t: f64) -> Result<Var>;

    fn eval(&self, t: f64, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = constants(&mut tape, self.params());
        let hv = tape.constant(h.clone());
        let out = self.record(&mut tape, &vars, hv, t)?;
        Ok(tape.value(out).clone())
    }

    fn vjp(&self, t: f64, h: &Tensor, a: &Tensor) -> Result<FieldVjp> {
        let mut tape = Tape::new();
        let vars = tape.register(self.params());
        let hv = tape.input(h.clone());
        let out = self.record(&mut tape, &vars, hv, t)?;
        let av = tape.constant(a.clone());
        let weighted = tape.hadamard(out, av)?;
        let root = tape.sum(weighted)?;
        let grads = tape.backward(root)?;
        Ok(FieldVjp {
            value: tape.value(out).clone(),
            wrt_state: grads.wrt(hv),
            wrt_params: grads.into_params(),
        })
    }
}

fn constants(tape: &mut Tape, params: &ParamMap) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
        .collect()
}

fn get(vars: &BTreeMap<String, Var>, key: &str) -> Result<Var> {
    vars.get(key)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing field parameter {key}")))
}

/// Dense network with tanh between layers and a linear last layer.
/// Weights are stored input-major (`[in, out]`) so rows multiply directly.
#[derive(Clone, Debug)]
pub struct MlpField {
    sizes: Vec<usize>,
    params: ParamMap,
}

impl MlpField {
    /// `sizes` lists the widths from input to output; the first and last
    /// must agree.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes[0] != *sizes.last().unwrap() || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid field layer sizes {sizes:?}")));
        }
        let mut params = ParamMap::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            params.insert(format!("f.l{l}.w"), Tensor::fan_in_uniform(&[pair[0], pair[1]], pair[0], rng));
            params.insert(format!("f.l{l}.b"), Tensor::fan_in_uniform(&[1, pair[1]], pair[0], rng));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Multiplies every weight of the last layer by `c`.
    pub fn scale_output(&mut self, c: f64) {
        let last = self.sizes.len() - 2;
        for key in [format!("f.l{last}.w"), format!("f.l{last}.b")] {
            let t = self.params[&key].scale(c);
            self.params.insert(key, t);
        }
    }
}

impl VectorField for MlpField {
    fn width(&self) -> usize {
        self.sizes[0]
    }

    fn params(&self) -> &ParamMap {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, h: Var, _t: f64) -> Result<Var> {
        let layers = self.sizes.len() - 1;
        let mut x = h;
        for l in 0..layers {
            let w = get(vars, &format!("f.l{l}.w"))?;
            let b = get(vars, &format!("f.l{l}.b"))?;
            let z = tape.matmul(x, w)?;
            x = tape.add(z, b)?;
            if l + 1 < layers {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }
}

/// `f(h) = A h` for every row.
#[derive(Clone, Debug)]
pub struct LinearField {
    params: ParamMap,
}

impl LinearField {
    pub fn new(a: Tensor) -> Result<Self> {
        if a.rank() != 2 || a.rows() != a.cols() {
            return Err(Error::NonSquare(a.shape().to_vec()));
        }
        Ok(Self {
            params: ParamMap::from([("f.a".to_string(), a)]),
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.params["f.a"]
    }
}

impl VectorField for LinearField {
    fn width(&self) -> usize {
        self.params["f.a"].rows()
    }

    fn params(&self) -> &ParamMap {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, h: Var, _t: f64) -> Result<Var> {
        let a = get(vars, "f.a")?;
        let at = tape.transpose(a)?;
        tape.matmul(h, at)
    }
}

/// A vector field paired with its evaluation counter. Every evaluation,
/// plain or with a vector-Jacobian product, counts once.
pub struct OdeFunc<'a> {
    field: &'a dyn VectorField,
    count: Cell<usize>,
}

impl<'a> OdeFunc<'a> {
    pub fn new(field: &'a dyn VectorField) -> Self {
        Self {
            field,
            count: Cell::new(0),
        }
    }

    pub fn field(&self) -> &dyn VectorField {
        self.field
    }

    pub fn nfe(&self) -> usize {
        self.count.get()
    }

    pub fn eval(&self, t: f64, h: &Tensor) -> Result<Tensor> {
        self.count.set(self.count.get() + 1);
        self.field.eval(t, h)
    }

    pub fn vjp(&self, t: f64, h: &Tensor, a: &Tensor) -> Result<FieldVjp> {
        self.count.set(self.count.get() + 1);
        self.field.vjp(t, h, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn linear_field_is_a_matrix_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let field = LinearField::new(a).unwrap();
        let h = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(field.eval(0.0, &h).unwrap().data(), &[11.0, -1.0]);
    }

    #[test]
    fn counter_counts_every_evaluation() {
        let field = MlpField::new(&[2, 4, 2], &mut seeded_rng(0)).unwrap();
        let func = OdeFunc::new(&field);
        let h = Tensor::zeros(&[3, 2]);
        for _ in 0..5 {
            func.eval(0.0, &h).unwrap();
        }
        func.vjp(0.0, &h, &Tensor::ones(&[3, 2])).unwrap();
        assert_eq!(func.nfe(), 6);
    }

    #[test]
    fn zero_field_evaluates_to_zero() {
        let field = LinearField::new(Tensor::zeros(&[3, 3])).unwrap();
        let out = field.eval(0.0, &Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(out.data(), &[0.0; 6]);
    }
}
