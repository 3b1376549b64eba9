//! Eigenvalue pairing of the linearized heavy-ball adjoint step.
//!
//! For the block matrix `H = [[0, J], [F, −γI]]` every eigenpair `(λ, (x, y))`
//! satisfies `J F x = λ(λ + γ) x`, so the spectrum of `Δt·H` splits into
//! pairs of roots of `μ² + Δtγ μ − Δt² κ = 0`, one pair per eigenvalue `κ` of
//! `J F`. Each pair sums to `−Δt·γ`.

use num_complex::Complex64;

use crate::eigen::eigenvalues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PairingReport {
    pub pairs: Vec<(Complex64, Complex64)>,
    /// Largest `|pair sum + Δt·γ|` over all pairs.
    pub max_pair_residual: f64,
}

/// Builds `Δt·H` from its blocks.
pub fn heavy_ball_block(f_avg: &Tensor, j_avg: &Tensor, gamma: f64, dt: f64) -> Result<Tensor> {
    for m in [f_avg, j_avg] {
        if m.rank() != 2 || m.rows() != m.cols() {
            return Err(Error::NonSquare(m.shape().to_vec()));
        }
    }
    if f_avg.shape() != j_avg.shape() {
        return Err(Error::ShapeMismatch {
            op: "eigen_pairing_check",
            lhs: f_avg.shape().to_vec(),
            rhs: j_avg.shape().to_vec(),
        });
    }
    let n = f_avg.rows();
    let mut data = vec![0.0; 4 * n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * 2 * n + n + j] = dt * j_avg.at(i, j);
            data[(n + i) * 2 * n + j] = dt * f_avg.at(i, j);
        }
        data[(n + i) * 2 * n + n + i] = -dt * gamma;
    }
    Tensor::new(vec![2 * n, 2 * n], data)
}

/// Pairs the spectrum of `Δt·H` through the quadratic above and reports the
/// worst deviation of a pair sum from `−Δt·γ`.
///
/// The pairing is guided by the eigenvalues of `J F`: the two quadratic
/// roots for each `κ` are matched to the closest unused eigenvalues of
/// `Δt·H`, and the reported sums use those computed eigenvalues.
pub fn eigen_pairing_check(f_avg: &Tensor, j_avg: &Tensor, gamma: f64, dt: f64) -> Result<PairingReport> {
    let block = heavy_ball_block(f_avg, j_avg, gamma, dt)?;
    let mut spectrum: Vec<Option<Complex64>> = eigenvalues(&block)?.into_iter().map(Some).collect();
    let jf = j_avg.matmul(f_avg)?;
    let kappas = eigenvalues(&jf)?;
    let b = Complex64::new(dt * gamma, 0.0);
    let mut pairs = Vec::with_capacity(kappas.len());
    let mut worst: f64 = 0.0;
    for kappa in kappas {
        let disc = (b * b + 4.0 * dt * dt * kappa).sqrt();
        let roots = [(-b + disc) / 2.0, (-b - disc) / 2.0];
        let mut chosen = [Complex64::new(0.0, 0.0); 2];
        for (slot, root) in chosen.iter_mut().zip(roots) {
            let idx = spectrum
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i, (v - root).norm())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .ok_or(Error::NoConvergence)?;
            *slot = spectrum[idx].take().unwrap();
        }
        worst = worst.max((chosen[0] + chosen[1] + b).norm());
        pairs.push((chosen[0], chosen[1]));
    }
    Ok(PairingReport {
        pairs,
        max_pair_residual: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undamped_rotation_pairs_to_zero() {
        let n = 3;
        let j = Tensor::eye(n);
        let f = Tensor::eye(n).scale(-1.0);
        let report = eigen_pairing_check(&f, &j, 0.0, 1.0).unwrap();
        assert_eq!(report.pairs.len(), n);
        assert!(report.max_pair_residual < 1e-12);
        for (a, b) in &report.pairs {
            assert!((a.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
            assert!(a.re.abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_blocks_follow_vieta() {
        let f = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let j = Tensor::from_rows(&[vec![-1.3]]).unwrap();
        let report = eigen_pairing_check(&f, &j, 0.4, 1.0).unwrap();
        let (a, b) = report.pairs[0];
        assert!((a + b + 0.4).norm() < 1e-14);
        assert!((a * b - 0.7 * 1.3).norm() < 1e-14);
    }

    #[test]
    fn mismatched_blocks_rejected() {
        let r = eigen_pairing_check(&Tensor::eye(2), &Tensor::eye(3), 0.1, 1.0);
        assert!(r.is_err());
        let r = eigen_pairing_check(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]), 0.1, 1.0);
        assert!(matches!(r, Err(Error::NonSquare(_))));
    }
}
