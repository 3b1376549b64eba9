use std::path::Path;
use std::process::{Command, Output};

fn momentum(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momentum"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn train_writes_manifest_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.cfg"), "task = adding\nmodel = momentum-rnn\nseq_len = 10\nbudget = 3\n").unwrap();
    let o = momentum(&["train", "--config", "a.cfg", "--seed", "0,1", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("run/manifest.txt")).unwrap();
    assert!(manifest.contains("seeds = 0,1"));
    for s in [0, 1] {
        let m = std::fs::read_to_string(dir.path().join(format!("run/metrics-seed{s}.tsv"))).unwrap();
        assert_eq!(m.lines().count(), 4, "header plus 3 steps:\n{m}");
    }

    let o = momentum(&["compare", "run", "--quantity", "loss", "--out", "loss.dat"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plot = std::fs::read_to_string(dir.path().join("loss.dat")).unwrap();
    assert!(plot.lines().any(|l| l.starts_with("# x momentum-rnn_median")));
}

#[test]
fn zero_budget_keeps_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.cfg"), "task = pointcloud\nmodel = node\nbudget = 0\n").unwrap();
    let o = momentum(&["train", "--config", "p.cfg", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/manifest.txt").exists());
    let m = std::fs::read_to_string(dir.path().join("run/metrics-seed0.tsv")).unwrap();
    assert_eq!(m.lines().count(), 1);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "task = adding\nmodel = hbnode\n").unwrap();
    std::fs::write(dir.path().join("ok.cfg"), "task = adding\nmodel = rnn\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["train", "--config", "bad.cfg"],
        &["train", "--config", "missing.cfg"],
        &["train", "--config", "ok.cfg", "--set", "lr"],
        &["verify", "--suite", "nonsense"],
        &["verify", "--suite", "eigenpairs", "--inject-fault", "nonsense"],
        &["compare", "ok.cfg", "--quantity", "loss"],
    ];
    for args in cases {
        let o = momentum(args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn compare_needs_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.cfg"), "task = copy-rnn\nmodel = rnn\nseq_len = 8\nbudget = 2\n").unwrap();
    assert_eq!(code(&momentum(&["train", "--config", "a.cfg", "--out", "run"], dir.path())), 0);
    let o = momentum(&["compare", "run"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("need"));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = momentum(&["verify", "--suite", "eigenpairs", "--out", "report.tsv"], dir.path());
    assert_eq!(code(&o), 0);
    let report = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    assert!(report.lines().skip(1).all(|l| l.ends_with("PASS")));

    let o = momentum(&["verify", "--suite", "gradients", "--inject-fault", "tanh"], dir.path());
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.contains("op tanh gradient") && l.contains("FAIL")));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.cfg"), "task = copy-transformer\nmodel = linear\nbatch = 2\n").unwrap();
    for out in ["d1", "d2"] {
        let o = momentum(&["gen-data", "--config", "t.cfg", "--seed", "5", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("d1/copy-transformer-seed5.txt")).unwrap();
    let b = std::fs::read(dir.path().join("d2/copy-transformer-seed5.txt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(String::from_utf8_lossy(&a).contains("# sample 1"));
}
