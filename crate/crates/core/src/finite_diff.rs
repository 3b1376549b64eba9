//! Central finite differences, the independent oracle for every gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ParamMap;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimates `∂f/∂θ` entry by entry as `(f(θ+h·e) − f(θ−h·e)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, params: &ParamMap, h: f64) -> Result<ParamMap>
where
    F: FnMut(&ParamMap) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut work = params.clone();
    let mut out = ParamMap::new();
    for (name, value) in params {
        let mut grad = vec![0.0; value.numel()];
        for (i, g) in grad.iter_mut().enumerate() {
            let x = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x + h;
            let plus = eval(&mut f, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x - h;
            let minus = eval(&mut f, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x;
            *g = (plus - minus) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(value.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Same estimate for a function of a flat vector.
pub fn finite_difference_vec<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + h;
        let plus = f(&work)?;
        work[i] = x[i] - h;
        let minus = f(&work)?;
        work[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation".into(),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

fn eval<F: FnMut(&ParamMap) -> Result<f64>>(f: &mut F, p: &ParamMap) -> Result<f64> {
    let v = f(p)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: "finite-difference evaluation".into(),
        })
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`; zero when both are zero.
///
/// The floor (1e-8) keeps an all-but-zero gradient from turning rounding
/// noise into a large relative error.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Worst relative error across every parameter present in `analytic`.
pub fn max_relative_error(analytic: &ParamMap, numeric: &ParamMap) -> f64 {
    analytic
        .iter()
        .map(|(k, a)| match numeric.get(k) {
            Some(n) if n.shape() == a.shape() => relative_error(a.data(), n.data()),
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Relative error of the whole gradient, all parameters flattened in name
/// order. Parameters missing from `numeric` count as infinite error.
pub fn global_relative_error(analytic: &ParamMap, numeric: &ParamMap) -> f64 {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (k, g) in analytic {
        match numeric.get(k) {
            Some(n) if n.shape() == g.shape() => {
                a.extend_from_slice(g.data());
                b.extend_from_slice(n.data());
            }
            _ => return f64::INFINITY,
        }
    }
    relative_error(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, x: f64) -> ParamMap {
        ParamMap::from([(name.to_string(), Tensor::scalar(x))])
    }

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|p| Ok(p["x"].item()?.powi(2)), &one("x", 3.0), 1e-5).unwrap();
        assert!((g["x"].item().unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = ParamMap::from([("x".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        let g = finite_difference_gradient(|_| Ok(4.0), &p, 1e-5).unwrap();
        assert_eq!(g["x"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_difference_gradient(|p| Ok(p["x"].item()?.sin()), &one("x", 0.0), 1e-5).unwrap();
        assert!((g["x"].item().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_is_reported() {
        let r = finite_difference_gradient(|_| Ok(f64::NAN), &one("x", 0.0), 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[1.0, 1e-7]) < 1.1e-7);
    }
}
