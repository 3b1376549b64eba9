use momentum_core::ode::{
    adjoint_backward_ghbnode, adjoint_backward_hbnode, adjoint_backward_node, adjoint_norm_trace, solve,
    AdjointOptions, Dynamics, LinearField, MlpField, MomentumActivation, OdeFunc, OdeState, SolverOptions,
};
use momentum_core::{seeded_rng, Tensor};

fn opts(tol: f64) -> AdjointOptions {
    AdjointOptions {
        solver: SolverOptions::dopri(tol),
        ..Default::default()
    }
}

#[test]
fn first_order_decay_hits_e_inverse() {
    let field = LinearField::new(Tensor::from_rows(&[vec![-1.0]]).unwrap()).unwrap();
    let func = OdeFunc::new(&field);
    let y0 = OdeState::position(Tensor::ones(&[1, 1]));
    let (y1, _) = solve(&func, &Dynamics::FirstOrder, &y0, 0.0, 1.0, &SolverOptions::dopri(1e-10)).unwrap();
    assert!((y1.h.data()[0] - (-1.0f64).exp()).abs() < 1e-9);
}

#[test]
fn undamped_heavy_ball_is_a_harmonic_oscillator() {
    // h'' = −h from h = 1, h' = 0 gives cos t.
    let field = LinearField::new(Tensor::from_rows(&[vec![-1.0]]).unwrap()).unwrap();
    let func = OdeFunc::new(&field);
    let y0 = OdeState::with_momentum(Tensor::ones(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap();
    let (y1, _) = solve(&func, &Dynamics::HeavyBall { gamma: 0.0 }, &y0, 0.0, 2.0, &SolverOptions::dopri(1e-10)).unwrap();
    assert!((y1.h.data()[0] - 2.0f64.cos()).abs() < 1e-8);
    assert!((y1.m.unwrap().data()[0] + 2.0f64.sin()).abs() < 1e-8);
}

#[test]
fn damped_heavy_ball_matches_closed_form() {
    // h'' + γh' + h = 0, underdamped.
    let gamma = 0.5;
    let w = (1.0 - gamma * gamma / 4.0f64).sqrt();
    let field = LinearField::new(Tensor::from_rows(&[vec![-1.0]]).unwrap()).unwrap();
    let func = OdeFunc::new(&field);
    let y0 = OdeState::with_momentum(Tensor::ones(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap();
    let t = 3.0;
    let (y1, _) = solve(&func, &Dynamics::HeavyBall { gamma }, &y0, 0.0, t, &SolverOptions::dopri(1e-11)).unwrap();
    let exact = (-gamma * t / 2.0).exp() * ((w * t).cos() + gamma / (2.0 * w) * (w * t).sin());
    assert!((y1.h.data()[0] - exact).abs() < 1e-8);
}

#[test]
fn scalar_growth_rate_gradient_is_analytic() {
    // h' = θh, L = h(T): dL/dθ = T·h0·e^{θT}, dL/dh0 = e^{θT}.
    let (theta, t1, h0) = (0.7, 1.5, 0.8);
    let field = LinearField::new(Tensor::from_rows(&[vec![theta]]).unwrap()).unwrap();
    let func = OdeFunc::new(&field);
    let y0 = OdeState::position(Tensor::full(&[1, 1], h0));
    let o = opts(1e-11);
    let (y1, _) = solve(&func, &Dynamics::FirstOrder, &y0, 0.0, t1, &o.solver).unwrap();
    let back = adjoint_backward_node(&func, &y1.h, &Tensor::ones(&[1, 1]), 0.0, t1, &o).unwrap();
    let growth = (theta * t1).exp();
    assert!((back.param_grads["f.a"].data()[0] - t1 * h0 * growth).abs() < 1e-8);
    assert!((back.d_h0.data()[0] - growth).abs() < 1e-8);
}

#[test]
fn generalized_reduces_to_heavy_ball() {
    let mut rng = seeded_rng(11);
    let field = MlpField::new(&[3, 8, 3], &mut rng).unwrap();
    let h0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let m0 = Tensor::uniform(&[4, 3], -0.5, 0.5, &mut rng);
    let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let gamma = 0.3;
    let o = opts(1e-10);
    let y0 = OdeState::with_momentum(h0, m0).unwrap();

    let f1 = OdeFunc::new(&field);
    let (hb, _) = solve(&f1, &Dynamics::HeavyBall { gamma }, &y0, 0.0, 1.0, &o.solver).unwrap();
    let hb_back = adjoint_backward_hbnode(&f1, &hb, &a, gamma, 0.0, 1.0, &o).unwrap();

    let gen = Dynamics::Generalized {
        gamma,
        xi: 0.0,
        activation: MomentumActivation::Identity,
    };
    let f2 = OdeFunc::new(&field);
    let (gh, _) = solve(&f2, &gen, &y0, 0.0, 1.0, &o.solver).unwrap();
    let gh_back = adjoint_backward_ghbnode(&f2, &gh, &a, gamma, 0.0, MomentumActivation::Identity, 0.0, 1.0, &o).unwrap();

    assert!(hb.h.max_abs_diff(&gh.h) <= 1e-9);
    assert!(hb.m.unwrap().max_abs_diff(gh.m.as_ref().unwrap()) <= 1e-9);
    for (k, g) in &hb_back.param_grads {
        assert!(g.max_abs_diff(&gh_back.param_grads[k]) <= 1e-9, "{k}");
    }
    assert!(hb_back.d_h0.max_abs_diff(&gh_back.d_h0) <= 1e-9);
    assert!((hb_back.d_gamma - gh_back.d_gamma).abs() <= 1e-9);
}

#[test]
fn heavy_ball_adjoint_obeys_its_own_second_order_law() {
    // With f(h) = A h the momentum adjoint satisfies a_m'' = γ a_m' + a_m A.
    let mut rng = seeded_rng(5);
    let a_mat = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let field = LinearField::new(a_mat.clone()).unwrap();
    let func = OdeFunc::new(&field);
    let gamma = 0.4;
    let y0 = OdeState::with_momentum(Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng), Tensor::zeros(&[1, 3])).unwrap();
    let dt = 0.05;
    let mut o = opts(1e-13);
    o.checkpoints = (1..40).map(|i| i as f64 * dt).collect();
    let (y1, _) = solve(&func, &Dynamics::HeavyBall { gamma }, &y0, 0.0, 2.0, &o.solver).unwrap();
    let dl = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
    let back = adjoint_backward_hbnode(&func, &y1, &dl, gamma, 0.0, 2.0, &o).unwrap();
    // Trace runs from t = 2 back to 0 on a uniform grid.
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
    assert!(worst <= 1e-6, "residual {worst}");
}

#[test]
fn norm_trace_starts_at_terminal_condition() {
    let mut rng = seeded_rng(3);
    let field = MlpField::new(&[2, 6, 2], &mut rng).unwrap();
    let func = OdeFunc::new(&field);
    let y0 = OdeState::with_momentum(Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng), Tensor::zeros(&[2, 2])).unwrap();
    let mut o = opts(1e-8);
    o.checkpoints = vec![0.25, 0.5, 0.75];
    let (y1, _) = solve(&func, &Dynamics::HeavyBall { gamma: 0.2 }, &y0, 0.0, 1.0, &o.solver).unwrap();
    let dl = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng);
    let back = adjoint_backward_hbnode(&func, &y1, &dl, 0.2, 0.0, 1.0, &o).unwrap();
    let trace = adjoint_norm_trace(&back);
    let times: Vec<f64> = trace.iter().map(|p| p.0).collect();
    assert_eq!(times, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    assert!((trace[0].1 - dl.norm_l2()).abs() < 1e-15);
}

#[test]
fn clipping_bounds_checkpoint_norms() {
    let field = LinearField::new(Tensor::from_rows(&[vec![2.0]]).unwrap()).unwrap();
    let func = OdeFunc::new(&field);
    let y0 = OdeState::position(Tensor::ones(&[1, 1]));
    let mut o = opts(1e-9);
    o.checkpoints = vec![0.5];
    o.clip = Some(1.5);
    let (y1, _) = solve(&func, &Dynamics::FirstOrder, &y0, 0.0, 1.0, &o.solver).unwrap();
    let back = adjoint_backward_node(&func, &y1.h, &Tensor::ones(&[1, 1]), 0.0, 1.0, &o).unwrap();
    // a grows by e^{2·0.5} over each half; clipped back to 1.5 at t = 0.5.
    assert!((back.trace[1].norm() - 1.5).abs() < 1e-12);
    assert!((back.d_h0.data()[0] - 1.5 * 1.0f64.exp()).abs() < 1e-7);
}

#[test]
fn tighter_tolerance_needs_more_evaluations() {
    let mut rng = seeded_rng(9);
    let mut field = MlpField::new(&[2, 16, 2], &mut rng).unwrap();
    field.scale_output(3.0);
    let y0 = OdeState::position(Tensor::uniform(&[8, 2], -1.0, 1.0, &mut rng));
    let nfe: Vec<usize> = [1e-3, 1e-5, 1e-7]
        .iter()
        .map(|&tol| {
            let func = OdeFunc::new(&field);
            solve(&func, &Dynamics::FirstOrder, &y0, 0.0, 5.0, &SolverOptions::dopri(tol)).unwrap().1.nfe
        })
        .collect();
    assert!(nfe[0] < nfe[1] && nfe[1] < nfe[2], "{nfe:?}");
}
