//! Explicit integrators over a flat state vector: adaptive Dormand–Prince
//! 5(4) with embedded error control, and fixed-step RK4 / Euler.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dopri45,
    Rk4,
    Euler,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dopri45 => "dopri45",
            Method::Rk4 => "rk4",
            Method::Euler => "euler",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dopri45" => Ok(Self::Dopri45),
            "rk4" => Ok(Self::Rk4),
            "euler" => Ok(Self::Euler),
            other => Err(Error::InvalidArgument(format!("unknown solver '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Step count over the whole interval for the fixed-step methods.
    pub fixed_steps: usize,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: Method::Dopri45,
            rtol: 1e-7,
            atol: 1e-7,
            fixed_steps: 100,
            max_steps: 100_000,
        }
    }
}

impl SolverOptions {
    pub fn dopri(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }
}

/// Counts from one call to [`integrate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl StepStats {
    pub fn absorb(&mut self, other: StepStats) {
        self.nfe += other.nfe;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (either direction).
/// `f` writes the derivative into its third argument.
pub fn integrate<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, opts: &SolverOptions) -> Result<(Vec<f64>, StepStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if t0 == t1 {
        return Err(Error::InvalidArgument("integration interval is empty".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "initial state".into(),
        });
    }
    match opts.method {
        Method::Dopri45 => dopri45(&mut f, y0, t0, t1, opts),
        Method::Rk4 | Method::Euler => fixed(&mut f, y0, t0, t1, opts),
    }
}

fn eval<F>(f: &mut F, t: f64, y: &[f64], out: &mut [f64], stats: &mut StepStats) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    stats.nfe += 1;
    f(t, y, out)
}

fn fixed<F>(f: &mut F, y0: &[f64], t0: f64, t1: f64, opts: &SolverOptions) -> Result<(Vec<f64>, StepStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if opts.fixed_steps == 0 {
        return Err(Error::InvalidArgument("fixed-step solver needs at least one step".into()));
    }
    let n = y0.len();
    let h = (t1 - t0) / opts.fixed_steps as f64;
    let mut stats = StepStats::default();
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 4];
    let mut tmp = vec![0.0; n];
    for step in 0..opts.fixed_steps {
        let t = t0 + step as f64 * h;
        match opts.method {
            Method::Euler => {
                eval(f, t, &y, &mut k[0], &mut stats)?;
                for i in 0..n {
                    y[i] += h * k[0][i];
                }
            }
            _ => {
                eval(f, t, &y, &mut k[0], &mut stats)?;
                for (stage, (dt, w)) in [(0.5, 0.5), (0.5, 0.5), (1.0, 1.0)].into_iter().enumerate() {
                    for i in 0..n {
                        tmp[i] = y[i] + w * h * k[stage][i];
                    }
                    let (_, rest) = k.split_at_mut(stage + 1);
                    eval(f, t + dt * h, &tmp, &mut rest[0], &mut stats)?;
                }
                for i in 0..n {
                    y[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("ode state at t = {}", t + h),
            });
        }
        stats.accepted += 1;
    }
    Ok((y, stats))
}

fn rms_norm(v: &[f64], scale: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().zip(scale).map(|(x, s)| (x / s) * (x / s)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Initial step from the size of the state and its derivative, with one
/// trial Euler step to estimate the second derivative.
fn initial_step<F>(
    f: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    opts: &SolverOptions,
    stats: &mut StepStats,
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let dir = span.signum();
    let scale: Vec<f64> = y0.iter().map(|y| opts.atol + opts.rtol * y.abs()).collect();
    let d0 = rms_norm(y0, &scale);
    let d1 = rms_norm(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span.abs());
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, d)| y + dir * h0 * d).collect();
    let mut f1 = vec![0.0; y0.len()];
    eval(f, t0 + dir * h0, &y1, &mut f1, stats)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_norm(&diff, &scale) / h0;
    let dmax = d1.max(d2);
    if dmax <= 1e-15 {
        // A vanishing derivative: take the whole interval at once.
        return Ok(span.abs());
    }
    let h1 = (0.01 / dmax).powf(1.0 / 5.0);
    Ok((100.0 * h0).min(h1).min(span.abs()))
}

fn dopri45<F>(f: &mut F, y0: &[f64], t0: f64, t1: f64, opts: &SolverOptions) -> Result<(Vec<f64>, StepStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::InvalidArgument("tolerances must be positive".into()));
    }
    let n = y0.len();
    let span = t1 - t0;
    let dir = span.signum();
    let mut stats = StepStats::default();
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    eval(f, t0, &y, &mut k[0], &mut stats)?;
    if k[0].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("vector field at t = {t0}"),
        });
    }
    let mut h = initial_step(f, t0, &y, &k[0].clone(), span, opts, &mut stats)?;
    let mut t = t0;
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut scale = vec![0.0; n];
    let mut last_rejected = false;
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::TooManySteps {
                max_steps: opts.max_steps,
                t,
            });
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepSizeUnderflow { t });
        }
        let hs = dir * h;
        for stage in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage) {
                    acc += A[stage][j] * kj[i];
                }
                tmp[i] = y[i] + hs * acc;
            }
            if stage == 6 {
                y_new.copy_from_slice(&tmp);
            }
            let (_, rest) = k.split_at_mut(stage);
            eval(f, t + C[stage] * hs, &tmp, &mut rest[0], &mut stats)?;
        }
        for i in 0..n {
            err[i] = hs * E.iter().zip(&k).map(|(e, ki)| e * ki[i]).sum::<f64>();
            scale[i] = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
        }
        let finite = y_new.iter().chain(&k[6]).all(|v| v.is_finite());
        let e = if finite { rms_norm(&err, &scale) } else { f64::INFINITY };
        if e <= 1.0 {
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            stats.accepted += 1;
            let mut factor = if e == 0.0 { MAX_FACTOR } else { SAFETY * e.powf(-0.2) };
            factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
            if last_rejected {
                factor = factor.min(1.0);
            }
            h *= factor;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            let factor = if e.is_finite() { (SAFETY * e.powf(-0.2)).max(MIN_FACTOR) } else { MIN_FACTOR };
            h *= factor.min(1.0);
            last_rejected = true;
        }
    }
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let opts = SolverOptions::dopri(1e-9);
        let (y, stats) = integrate(
            |_, y, d| {
                d[0] = -y[0];
                Ok(())
            },
            &[1.0],
            0.0,
            1.0,
            &opts,
        )
        .unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-7);
        assert!(stats.nfe >= 6 * stats.accepted);
    }

    #[test]
    fn zero_field_is_exact_and_short() {
        let (y, stats) = integrate(
            |_, _, d| {
                d.fill(0.0);
                Ok(())
            },
            &[0.3, -2.0],
            0.0,
            5.0,
            &SolverOptions::dopri(1e-9),
        )
        .unwrap();
        assert_eq!(y, vec![0.3, -2.0]);
        assert!(stats.accepted <= 2);
    }

    #[test]
    fn cosine_integral() {
        let (y, _) = integrate(
            |t, _, d| {
                d[0] = t.cos();
                Ok(())
            },
            &[0.0],
            0.0,
            std::f64::consts::PI,
            &SolverOptions::dopri(1e-9),
        )
        .unwrap();
        assert!(y[0].abs() < 1e-6);
    }

    #[test]
    fn backward_in_time() {
        let (y, _) = integrate(
            |_, y, d| {
                d[0] = -y[0];
                Ok(())
            },
            &[(-1.0f64).exp()],
            1.0,
            0.0,
            &SolverOptions::dopri(1e-10),
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fixed_step_methods_converge() {
        for (method, tol) in [(Method::Rk4, 1e-9), (Method::Euler, 1e-2)] {
            let opts = SolverOptions {
                method,
                fixed_steps: 100,
                ..SolverOptions::default()
            };
            let (y, stats) = integrate(
                |_, y, d| {
                    d[0] = -y[0];
                    Ok(())
                },
                &[1.0],
                0.0,
                1.0,
                &opts,
            )
            .unwrap();
            assert!((y[0] - (-1.0f64).exp()).abs() < tol, "{method}");
            assert_eq!(stats.accepted, 100);
        }
    }

    #[test]
    fn blow_up_reports_failure() {
        let r = integrate(
            |_, y, d| {
                d[0] = y[0] * y[0];
                Ok(())
            },
            &[1.0],
            0.0,
            2.0,
            &SolverOptions::dopri(1e-8),
        );
        assert!(matches!(
            r,
            Err(Error::StepSizeUnderflow { .. } | Error::TooManySteps { .. } | Error::NonFinite { .. })
        ));
    }
}
