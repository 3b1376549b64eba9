//! Acceptance criteria 1-10, run one after another so the wall-clock limits
//! are measured without other tests competing for the CPU.
//!
//! Each criterion prints one `criterion N: PASS|FAIL` line. Pass criterion
//! numbers as arguments to run a subset (`cargo test --test acceptance -- 3 9`).
//! Criteria 6-8 are training outcomes: their verdict is printed but does not
//! fail the binary. Everything else is a correctness property and does.

use std::time::{Duration, Instant};

use momentum_core::ode::{OdeFamily, SolverOptions};
use momentum_core::tasks::gen_point_cloud;
use momentum_harness::compare::median;
use momentum_harness::config::ExperimentConfig;
use momentum_harness::experiments::{run_seed, train_point_cloud_model, SeedRun};
use momentum_harness::metrics;
use momentum_harness::verify::{run_suite, Report, Suite, VerifyOptions};

/// Iterations of the copy-transformer comparison; also the task default.
const COPY_BUDGET: usize = 3000;

struct Verdict {
    pass: bool,
    detail: String,
    /// Training outcomes are reported without failing the run.
    enforced: bool,
}

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text).unwrap_or_else(|e| panic!("config `{text}`: {e}"))
}

fn run_all(text: &str) -> Vec<SeedRun> {
    let c = cfg(text);
    c.seeds.iter().map(|&s| run_seed(&c, s).unwrap()).collect()
}

/// Every listed property is present and passed; returns the failures.
fn require(report: &Report, properties: &[&str]) -> Vec<String> {
    let mut bad = Vec::new();
    for p in properties {
        match report.find(p) {
            Some(c) if c.passed() => {}
            Some(c) => bad.push(format!("{p} (worst {:e} > {:e})", c.worst, c.tolerance)),
            None => bad.push(format!("{p} (missing)")),
        }
    }
    bad
}

fn suite_verdict(report: &Report, properties: &[&str], elapsed: Duration, limit: Option<Duration>) -> Verdict {
    let mut bad = require(report, properties);
    if let Some(limit) = limit {
        if elapsed > limit {
            bad.push(format!("runtime {elapsed:.1?} > {limit:?}"));
        }
    }
    Verdict {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} checks in {elapsed:.1?}", properties.len())
        } else {
            bad.join("; ")
        },
        enforced: true,
    }
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let opts = VerifyOptions::default();
    let mut report = run_suite(Suite::Gradients, &opts);
    report.checks.extend(run_suite(Suite::Adjoints, &opts).checks);
    report.checks.extend(run_suite(Suite::Attention, &opts).checks);
    let elapsed = t.elapsed();
    let props: Vec<String> = report
        .checks
        .iter()
        .filter(|c| c.property.contains("gradient"))
        .map(|c| c.property.clone())
        .collect();
    let props: Vec<&str> = props.iter().map(String::as_str).collect();
    let mut v = suite_verdict(&report, &props, elapsed, Some(Duration::from_secs(180)));
    for c in report.checks.iter().filter(|c| c.property.contains("gradient")) {
        let want = if c.property.contains("adjoint") { 1e-4 } else { 1e-5 };
        if c.tolerance > want {
            v.pass = false;
            v.detail = format!("{} checked at {:e}, needs {want:e}", c.property, c.tolerance);
        }
    }
    v
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let report = run_suite(Suite::Equivalences, &VerifyOptions::default());
    suite_verdict(&report, &["momentum cell = one-equation form"], t.elapsed(), None)
}

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let report = run_suite(Suite::Attention, &VerifyOptions::default());
    suite_verdict(
        &report,
        &[
            "causal recurrent = unrolled = brute force (N<=64)",
            "beta=0,gamma=1 recurrent = linear = brute force",
        ],
        t.elapsed(),
        Some(Duration::from_secs(60)),
    )
}

fn criterion_4() -> Verdict {
    let t = Instant::now();
    let report = run_suite(Suite::Eigenpairs, &VerifyOptions::default());
    suite_verdict(&report, &["spectrum pair sums = -dt*gamma (100 trials)"], t.elapsed(), None)
}

fn criterion_5() -> Verdict {
    let t = Instant::now();
    let report = run_suite(Suite::Equivalences, &VerifyOptions::default());
    suite_verdict(
        &report,
        &[
            "ghbnode(xi=0,identity) = hbnode",
            "momentum attention(beta=0,gamma=1) = linear",
            "momentum-rnn(mu=0,s=1) = rnn",
        ],
        t.elapsed(),
        None,
    )
}

fn per_epoch_median_bwd(runs: &[SeedRun], epochs: usize) -> Vec<f64> {
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.records.get(e).and_then(|x| x.backward_nfe))
                .collect();
            median(&v)
        })
        .collect()
}

fn criterion_6() -> Verdict {
    let t = Instant::now();
    let hb = run_all("task = pointcloud\nmodel = hbnode\nseeds = 0..10");
    let node = run_all("task = pointcloud\nmodel = node\nseeds = 0..10");
    let elapsed = t.elapsed();
    let fitted = hb
        .iter()
        .filter(|r| r.halted.is_none() && r.records.last().is_some_and(|x| x.train_loss < 0.05))
        .count();
    // Matched epochs: only epochs every run of both models reached.
    let epochs = hb.iter().chain(&node).map(|r| r.records.len()).min().unwrap_or(0);
    let hb_series = per_epoch_median_bwd(&hb, epochs);
    let node_series = per_epoch_median_bwd(&node, epochs);
    let (hb_med, node_med) = (median(&hb_series), median(&node_series));
    let fewer = hb_series.iter().zip(&node_series).filter(|(a, b)| a < b).count();
    let a = fitted >= 8;
    let b = epochs > 0 && hb_med < node_med;
    let time_ok = elapsed <= Duration::from_secs(30 * 60);
    Verdict {
        pass: a && b && time_ok,
        detail: format!(
            "(a) {} {fitted}/10 seeds below 0.05; (b) {} backward NFE median hbnode {hb_med:.1} vs node {node_med:.1} \
             over {epochs} epochs, hbnode lower in {fewer}/{epochs}; {elapsed:.0?}",
            if a { "PASS" } else { "FAIL" },
            if b { "PASS" } else { "FAIL" },
        ),
        enforced: false,
    }
}

fn criterion_7() -> Verdict {
    let base = "task = adding\nseq_len = 100\nseeds = 0..5\nbudget = 500\ngrad_norm_every = 500\nlog_every = 500\n";
    let first_grad = |runs: &[SeedRun]| -> Vec<f64> {
        runs.iter()
            .map(|r| {
                r.records
                    .iter()
                    .find(|x| x.step == 500)
                    .and_then(|x| x.grad_norms.first().copied())
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let rnn = first_grad(&run_all(&format!("{base}model = rnn")));
    let mom = first_grad(&run_all(&format!("{base}model = momentum-rnn\ncell.mu = 0.9")));
    let ratios: Vec<f64> = mom.iter().zip(&rnn).map(|(m, r)| m / r).collect();
    let med = median(&ratios);
    let each: Vec<String> = ratios.iter().map(|r| format!("{r:.2e}")).collect();
    Verdict {
        pass: med > 1.0,
        detail: format!("median ratio {med:.3e} (per seed {})", each.join(" ")),
        enforced: false,
    }
}

fn criterion_8() -> Verdict {
    let t = Instant::now();
    let base = format!("task = copy-transformer\nseeds = 0..5\nbudget = {COPY_BUDGET}\n");
    let final_loss = |runs: &[SeedRun]| -> Vec<f64> {
        runs.iter()
            .map(|r| r.records.last().and_then(|x| x.eval_loss).unwrap_or(f64::NAN))
            .collect()
    };
    let lin = final_loss(&run_all(&format!("{base}model = linear")));
    let mom = final_loss(&run_all(&format!("{base}model = momentum")));
    let elapsed = t.elapsed();
    let wins = mom.iter().zip(&lin).filter(|(m, l)| m <= l).count();
    let time_ok = elapsed <= Duration::from_secs(20 * 60);
    Verdict {
        pass: wins >= 4 && time_ok,
        detail: format!("momentum <= linear in {wins}/5 seeds (momentum {mom:.3?}, linear {lin:.3?}); {elapsed:.0?}"),
        enforced: false,
    }
}

fn criterion_9() -> Verdict {
    const TOLS: [f64; 3] = [1e-3, 1e-5, 1e-7];
    let mut bad = Vec::new();
    let mut shown = Vec::new();
    for (family, name) in [(OdeFamily::Hbnode, "hbnode"), (OdeFamily::Node, "node")] {
        let c = cfg(&format!("task = pointcloud\nmodel = {name}\nbudget = 20\nseeds = 0..3"));
        for &seed in &c.seeds {
            let (model, _) = train_point_cloud_model(&c, family, seed).unwrap();
            let cloud = gen_point_cloud(seed);
            let nfe: Vec<usize> = TOLS
                .iter()
                .map(|&tol| model.evaluate(&cloud.points, &cloud.labels, &SolverOptions::dopri(tol)).unwrap().forward_nfe)
                .collect();
            if !nfe.windows(2).all(|w| w[0] < w[1]) {
                bad.push(format!("{name} seed {seed} {nfe:?}"));
            }
            shown.push(format!("{name}/{seed} {nfe:?}"));
        }
    }
    Verdict {
        pass: bad.is_empty(),
        detail: if bad.is_empty() { shown.join(", ") } else { format!("not increasing: {}", bad.join(", ")) },
        enforced: true,
    }
}

fn criterion_10() -> Verdict {
    let configs = [
        "task = pointcloud\nmodel = ghbnode\nbudget = 3\nseeds = 4",
        "task = adding\nmodel = momentum-lstm\nseq_len = 20\nbudget = 5\ngrad_norm_every = 5\nseeds = 1",
        "task = copy-rnn\nmodel = adam-rnn\nseq_len = 15\nbudget = 5\nseeds = 2",
        "task = copy-transformer\nmodel = adaptive-momentum\nbudget = 5\neval_every = 5\nseeds = 3",
    ];
    let mut bad = Vec::new();
    for text in configs {
        let c = cfg(text);
        let seed = c.seeds[0];
        let a = metrics::render(&run_seed(&c, seed).unwrap().records);
        let b = metrics::render(&run_seed(&c, seed).unwrap().records);
        if a != b || a.is_empty() {
            bad.push(format!("{}/{} metrics differ", c.task, c.model.name()));
        }
        match ExperimentConfig::parse(&c.manifest()) {
            Ok(back) if back == c => {}
            Ok(_) => bad.push(format!("{}/{} manifest round trip changed the config", c.task, c.model.name())),
            Err(e) => bad.push(format!("{}/{} manifest does not parse: {e}", c.task, c.model.name())),
        }
    }
    Verdict {
        pass: bad.is_empty(),
        detail: if bad.is_empty() { "4 task configs byte-identical and round-tripped".into() } else { bad.join("; ") },
        enforced: true,
    }
}

fn main() {
    let criteria: [fn() -> Verdict; 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // `cargo test -- --list` and similar probes should not train anything.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    for (i, run) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let v = run();
        let verdict = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && !v.enforced { " [reported, not enforced]" } else { "" };
        println!("criterion {n}: {verdict}{note} {}", v.detail);
        if !v.pass && v.enforced {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
