//! Monte Carlo reproductions of the loss every task's trivial predictor
//! should reach, at 1e5 samples and 2% tolerance.

use momentum_core::tasks::{gen_adding_task, gen_copy_task_rnn, gen_copy_task_transformer, gen_point_cloud, CopySpec, Targets};
use momentum_core::{seeded_rng, Tape, Tensor};

const SAMPLES: usize = 100_000;

fn within(observed: f64, expected: f64, rel: f64) -> bool {
    ((observed - expected) / expected).abs() <= rel
}

#[test]
fn adding_task_constant_predictor_mse_is_one_sixth() {
    let mut rng = seeded_rng(0);
    let mut total = 0.0;
    for _ in 0..SAMPLES {
        let Targets::Value(y) = gen_adding_task(10, &mut rng).unwrap().targets else {
            panic!("adding task has a scalar target");
        };
        total += (y - 1.0) * (y - 1.0);
    }
    let mse = total / SAMPLES as f64;
    assert!(within(mse, 1.0 / 6.0, 0.02), "mse {mse}");
}

#[test]
fn copy_task_memoryless_entropy_is_ln_symbols() {
    // The best predictor without memory outputs the marginal of the scored
    // targets; its cross-entropy is that marginal's entropy.
    let spec = CopySpec::new(3);
    let mut rng = seeded_rng(1);
    let mut counts = vec![0usize; spec.classes()];
    let mut scored = 0usize;
    while scored < SAMPLES {
        let s = gen_copy_task_rnn(&spec, &mut rng).unwrap();
        let Targets::Classes(c) = &s.targets else { unreachable!() };
        for (t, &w) in s.mask.as_ref().unwrap().iter().enumerate() {
            if w > 0.0 {
                counts[c[t]] += 1;
                scored += 1;
            }
        }
    }
    let entropy: f64 = counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / scored as f64;
            -p * p.ln()
        })
        .sum();
    let expected = (spec.n_symbols as f64).ln();
    assert!(within(entropy, expected, 0.02), "entropy {entropy} vs {expected}");
}

#[test]
fn transformer_copy_uniform_and_perfect_predictors() {
    let (max_len, n_symbols) = (32, 10);
    let vocab = n_symbols + 1;
    let mut rng = seeded_rng(2);
    let mut uniform_total = 0.0;
    let mut perfect_total = 0.0;
    let mut scored = 0.0;
    while scored < SAMPLES as f64 {
        let ex = gen_copy_task_transformer(max_len, n_symbols, &mut rng).unwrap();
        let n = ex.inputs.len();
        let mut tape = Tape::new();
        let flat = tape.input(Tensor::zeros(&[n, vocab]));
        let uniform = tape.cross_entropy_loss(flat, &ex.targets, Some(&ex.weights)).unwrap();
        let mut sharp = vec![0.0; n * vocab];
        for (p, &y) in ex.targets.iter().enumerate() {
            sharp[p * vocab + y] = 50.0;
        }
        let peaked = tape.input(Tensor::new(vec![n, vocab], sharp).unwrap());
        let perfect = tape.cross_entropy_loss(peaked, &ex.targets, Some(&ex.weights)).unwrap();
        let w: f64 = ex.weights.iter().sum();
        // The loss is a weighted mean, so scale back to a per-token sum.
        uniform_total += tape.value(uniform).item().unwrap() * w;
        perfect_total += tape.value(perfect).item().unwrap() * w;
        scored += w;
    }
    let uniform = uniform_total / scored;
    assert!(within(uniform, (vocab as f64).ln(), 0.02), "uniform {uniform}");
    assert!(perfect_total / scored < 1e-12);
}

#[test]
fn inner_disk_mean_radius_is_one_third() {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut seed = 0;
    while n < SAMPLES {
        let cloud = gen_point_cloud(seed);
        for (i, &l) in cloud.labels.iter().enumerate() {
            if l == 0 {
                let p = cloud.points.row(i);
                total += (p[0] * p[0] + p[1] * p[1]).sqrt();
                n += 1;
            }
        }
        seed += 1;
    }
    let mean = total / n as f64;
    assert!(within(mean, 1.0 / 3.0, 0.02), "mean radius {mean}");
}
