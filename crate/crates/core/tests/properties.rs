use proptest::prelude::*;

use momentum_core::attention::{
    adaptive_momentum, causal_linear_attention, causal_momentum_attention, causal_momentum_unrolled, AttnHyper,
    FeatureMap, KvCounter,
};
use momentum_core::cells::{augment, momentum_step_single_eq, Activation, CellKind, MomentumHyper, RecurrentModel, RnnParams};
use momentum_core::eigen::eigenvalues;
use momentum_core::gradcheck::check_op;
use momentum_core::ode::eigen_pairing_check;
use momentum_core::optim::{clip_grad_norm, global_norm, Optimizer};
use momentum_core::tasks::{gen_adding_task, gen_copy_task_rnn, gen_point_cloud, CopySpec, PointCloud};
use momentum_core::{seeded_rng, OpKind, ParamMap, Tape, Tensor};

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], -1.0, 1.0, &mut seeded_rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transpose_reverses_products(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let a = tensor(m, k, seed);
        let b = tensor(k, n, seed.wrapping_add(1));
        let lhs = a.matmul(&b).unwrap().transpose().unwrap();
        let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-14);
    }

    #[test]
    fn every_op_gradient_on_random_seeds(op in 0usize..OpKind::ALL.len(), seed in any::<u64>()) {
        let kind = OpKind::ALL[op];
        let err = check_op(kind, seed, None).unwrap();
        prop_assert!(err <= 1e-5, "{} seed {}: {:e}", kind, seed, err);
    }

    #[test]
    fn clipping_bounds_norm_and_is_idempotent(scale in 0.01f64..100.0, max in 0.1f64..10.0, seed in any::<u64>()) {
        let mut g = ParamMap::new();
        g.insert("a".into(), tensor(3, 2, seed).scale(scale));
        g.insert("b".into(), tensor(1, 4, seed ^ 7).scale(scale));
        let before = global_norm(&g);
        prop_assert_eq!(clip_grad_norm(&mut g, max), before);
        let once = g.clone();
        prop_assert!(global_norm(&g) <= max * (1.0 + 1e-12));
        clip_grad_norm(&mut g, max);
        for (k, t) in &once {
            prop_assert!(t.max_abs_diff(&g[k]) <= 1e-15 * max.max(1.0));
        }
    }

    #[test]
    fn heavy_ball_at_zero_momentum_is_sgd(lr in 1e-3f64..1.0, seed in any::<u64>()) {
        let mut p1 = ParamMap::from([("w".to_string(), tensor(2, 3, seed))]);
        let mut p2 = p1.clone();
        let mut sgd = Optimizer::sgd(lr);
        let mut hb = Optimizer::heavy_ball(lr, 0.0);
        for step in 0..4 {
            let g = ParamMap::from([("w".to_string(), tensor(2, 3, seed ^ (step + 100)))]);
            sgd.step(&mut p1, &g).unwrap();
            hb.step(&mut p2, &g).unwrap();
        }
        prop_assert!(p1["w"].max_abs_diff(&p2["w"]) <= 1e-15);
    }

    #[test]
    fn spectrum_survives_diagonal_similarity(n in 1usize..5, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let a = Tensor::uniform(&[n, n], -1.0, 1.0, &mut rng);
        let d: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0.5..2.0)).collect();
        let b = Tensor::new(
            vec![n, n],
            (0..n * n).map(|e| d[e / n] * a.at(e / n, e % n) / d[e % n]).collect(),
        )
        .unwrap();
        let mut ea = eigenvalues(&a).unwrap();
        let mut eb = eigenvalues(&b).unwrap();
        let key = |z: &num_complex::Complex64| (z.re, z.im);
        ea.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        eb.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        let trace: f64 = (0..n).map(|i| a.at(i, i)).sum();
        let sum: f64 = ea.iter().map(|z| z.re).sum();
        prop_assert!((trace - sum).abs() <= 1e-9);
        for (x, y) in ea.iter().zip(&eb) {
            prop_assert!((x - y).norm() <= 1e-8, "{} vs {}", x, y);
        }
    }

    #[test]
    fn pair_sums_hold_for_random_blocks(n in 1usize..5, gamma in 0.0f64..3.0, dt in 0.001f64..1.0, seed in any::<u64>()) {
        let f = tensor(n, n, seed);
        let j = tensor(n, n, seed ^ 0x5555);
        let report = eigen_pairing_check(&f, &j, gamma, dt).unwrap();
        prop_assert_eq!(report.pairs.len(), n);
        prop_assert!(report.max_pair_residual <= 1e-8, "{:e}", report.max_pair_residual);
    }

    #[test]
    fn recurrent_attention_matches_unrolled(n in 1usize..40, beta in 0.0f64..0.95, gamma in 0.1f64..2.0, seed in any::<u64>()) {
        let (q, k, v) = (tensor(n, 3, seed), tensor(n, 3, seed ^ 1), tensor(n, 2, seed ^ 2));
        let hyper = AttnHyper::new(gamma, beta).unwrap();
        let counter = KvCounter::default();
        let rec = causal_momentum_attention(&q, &k, &v, FeatureMap::EluPlusOne, &hyper, Some(&counter)).unwrap();
        let unr = causal_momentum_unrolled(&q, &k, &v, FeatureMap::EluPlusOne, &hyper, None).unwrap();
        prop_assert!(rec.max_abs_diff(&unr) <= 1e-10);
        prop_assert_eq!(counter.get(), n);
    }

    #[test]
    fn causal_attention_ignores_the_future(n in 2usize..20, cut in 1usize..19, seed in any::<u64>()) {
        let cut = cut.min(n - 1);
        let (q, k, v) = (tensor(n, 3, seed), tensor(n, 3, seed ^ 1), tensor(n, 2, seed ^ 2));
        let shifted = v.data().iter().enumerate().map(|(e, &x)| if e >= cut * 2 { x + 5.0 } else { x }).collect();
        let v2 = Tensor::new(vec![n, 2], shifted).unwrap();
        let a = causal_linear_attention(&q, &k, &v, FeatureMap::EluPlusOne, None).unwrap();
        let b = causal_linear_attention(&q, &k, &v2, FeatureMap::EluPlusOne, None).unwrap();
        prop_assert!(a.data()[..cut * 2] == b.data()[..cut * 2]);
    }

    #[test]
    fn adaptive_momentum_stays_in_range(seed in any::<u64>(), prev in 0.0f64..1.0) {
        let g = tensor(1, 6, seed);
        let h = tensor(1, 6, seed ^ 9);
        let beta = adaptive_momentum(g.data(), h.data(), 1e-3, prev).unwrap();
        prop_assert!((0.0..=1.0 - 1e-3).contains(&beta));
        prop_assert_eq!(adaptive_momentum(g.data(), &[0.0; 6], 1e-3, prev).unwrap(), prev);
    }

    #[test]
    fn momentum_cell_has_a_one_equation_form(mu in 0.0f64..0.95, s in 0.2f64..2.0, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let hyper = MomentumHyper::constant(mu, s);
        let mut model = RecurrentModel::new(CellKind::Momentum, hyper, Activation::Tanh, false, 2, 3, 1, &mut rng).unwrap();
        let cell = RnnParams::new(
            Tensor::uniform(&[3, 3], -0.25, 0.25, &mut rng),
            Tensor::uniform(&[3, 3], -0.25, 0.25, &mut rng),
            Activation::Tanh,
        ).unwrap();
        cell.insert_into("cell", &mut model.params);
        let xs: Vec<Tensor> = (0..10).map(|_| Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let vars = tape.register(&model.params);
        let un = model.unroll(&mut tape, &vars, &xs).unwrap();
        let (mut h1, mut h2) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]));
        for (t, x) in xs.iter().enumerate() {
            let h = tape.value(un.hidden[t]);
            prop_assume!(h.max_abs() < 0.99);
            let next = momentum_step_single_eq(&cell, &hyper, &h1, &h2, &augment(x).unwrap(), t + 1).unwrap();
            prop_assert!(next.max_abs_diff(h) <= 1e-9);
            h2 = std::mem::replace(&mut h1, next);
        }
    }

    #[test]
    fn generators_are_pure_and_respect_regions(seed in any::<u64>()) {
        let a = gen_point_cloud(seed);
        prop_assert_eq!(&a, &gen_point_cloud(seed));
        for (i, &l) in a.labels.iter().enumerate() {
            let p = a.points.row(i);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if l == 0 {
                prop_assert!(r < 0.5);
            } else {
                prop_assert!(r > 0.85 && r < 1.0);
            }
        }
        prop_assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), PointCloud::INNER);
        let s1 = gen_adding_task(20, &mut seeded_rng(seed)).unwrap();
        let s2 = gen_adding_task(20, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(&s1, &s2);
        let markers: Vec<usize> = (0..20).filter(|&t| s1.inputs.at(t, 1) == 1.0).collect();
        prop_assert_eq!(markers.len(), 2);
        prop_assert!(markers[0] < 10 && markers[1] >= 10);
        let spec = CopySpec::new(5);
        let c = gen_copy_task_rnn(&spec, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(c.inputs.rows(), spec.len());
    }
}
