//! Cross-run summaries: per-step median and quartiles of one quantity,
//! grouped by model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use crate::metrics::{self, MetricRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    TrainLoss,
    EvalLoss,
    EvalAcc,
    ForwardNfe,
    BackwardNfe,
    /// Per-timestep `‖∂L/∂h_t‖` from the last record that carries it; the
    /// x column is the timestep rather than the training step.
    GradNorm,
    /// Adjoint norm at each checkpoint of the last logged record.
    AdjointNorm,
}

impl FromStr for Quantity {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "loss" | "train_loss" => Self::TrainLoss,
            "eval_loss" => Self::EvalLoss,
            "eval_acc" | "accuracy" => Self::EvalAcc,
            "forward_nfe" | "nfe" => Self::ForwardNfe,
            "backward_nfe" => Self::BackwardNfe,
            "grad_norm" => Self::GradNorm,
            "adjoint_norm" => Self::AdjointNorm,
            other => bail!(
                "unknown quantity `{other}`; expected loss, eval_loss, eval_acc, forward_nfe, backward_nfe, grad_norm or adjoint_norm"
            ),
        })
    }
}

impl Quantity {
    fn per_step(self, r: &MetricRecord) -> Option<f64> {
        match self {
            Quantity::TrainLoss => Some(r.train_loss),
            Quantity::EvalLoss => r.eval_loss,
            Quantity::EvalAcc => r.eval_acc,
            Quantity::ForwardNfe => r.forward_nfe,
            Quantity::BackwardNfe => r.backward_nfe,
            Quantity::GradNorm | Quantity::AdjointNorm => None,
        }
    }

    /// `(x, value)` points of one run.
    fn series(self, run: &[MetricRecord]) -> Vec<(usize, f64)> {
        let profile = |pick: fn(&MetricRecord) -> &Vec<f64>| {
            run.iter()
                .rev()
                .find(|r| !pick(r).is_empty())
                .map(|r| pick(r).iter().enumerate().map(|(i, &v)| (i + 1, v)).collect())
                .unwrap_or_default()
        };
        match self {
            Quantity::GradNorm => profile(|r| &r.grad_norms),
            Quantity::AdjointNorm => profile(|r| &r.adjoint_norms),
            _ => run.iter().filter_map(|r| self.per_step(r).map(|v| (r.step, v))).collect(),
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub task: String,
    pub models: Vec<String>,
    /// x → per model `(median, q25, q75, runs)`.
    pub rows: BTreeMap<usize, Vec<Option<(f64, f64, f64, usize)>>>,
}

impl Summary {
    /// Whitespace-separated columns with a `#` header line.
    pub fn to_plot_data(&self, quantity: &str) -> String {
        let mut out = format!("# task {} quantity {quantity}\n# x", self.task);
        for m in &self.models {
            let _ = write!(out, " {m}_median {m}_q25 {m}_q75");
        }
        out.push('\n');
        for (x, cells) in &self.rows {
            let _ = write!(out, "{x}");
            for c in cells {
                match c {
                    Some((m, lo, hi, _)) => {
                        let _ = write!(out, " {m} {lo} {hi}");
                    }
                    None => out.push_str(" nan nan nan"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Groups runs by model and reduces each x position across runs.
pub fn summarize(runs: &[Vec<MetricRecord>], quantity: Quantity) -> Result<Summary> {
    if runs.len() < 2 {
        bail!("need ≥ 2 runs, got {}", runs.len());
    }
    let mut task: Option<&str> = None;
    let mut by_model: BTreeMap<&str, Vec<&[MetricRecord]>> = BTreeMap::new();
    for run in runs {
        let first = run.first().context("empty metrics file")?;
        match task {
            None => task = Some(&first.task),
            Some(t) if t != first.task => bail!("mismatched tasks: {t} vs {}", first.task),
            _ => {}
        }
        by_model.entry(&first.model).or_default().push(run);
    }
    let models: Vec<String> = by_model.keys().map(|m| m.to_string()).collect();
    let mut rows: BTreeMap<usize, Vec<Option<(f64, f64, f64, usize)>>> = BTreeMap::new();
    for (mi, group) in by_model.values().enumerate() {
        let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for run in group {
            for (x, v) in quantity.series(run) {
                at.entry(x).or_default().push(v);
            }
        }
        for (x, mut vals) in at {
            vals.sort_by(f64::total_cmp);
            let cell = (quantile(&vals, 0.5), quantile(&vals, 0.25), quantile(&vals, 0.75), vals.len());
            rows.entry(x).or_insert_with(|| vec![None; models.len()])[mi] = Some(cell);
        }
    }
    Ok(Summary {
        task: task.unwrap_or_default().to_string(),
        models,
        rows,
    })
}

/// Expands directories to the metrics files inside them.
pub fn collect_metric_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("metrics-") && n.ends_with(".tsv"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub fn compare_files(inputs: &[PathBuf], quantity: Quantity) -> Result<Summary> {
    let files = collect_metric_files(inputs)?;
    let runs = files
        .iter()
        .map(|f| metrics::read(f))
        .collect::<Result<Vec<_>>>()?;
    summarize(&runs, quantity)
}

/// Human-readable table: the final x position per model.
pub fn summary_table(s: &Summary) -> String {
    let mut out = String::from("model\truns\tx\tmedian\tq25\tq75\n");
    for (mi, m) in s.models.iter().enumerate() {
        if let Some((x, Some((med, lo, hi, n)))) = s.rows.iter().rev().find_map(|(x, c)| c[mi].map(|c| (x, Some(c)))) {
            let _ = writeln!(out, "{m}\t{n}\t{x}\t{med}\t{lo}\t{hi}");
        }
    }
    out
}

pub fn write_plot_data(path: &Path, s: &Summary, quantity: &str) -> Result<()> {
    std::fs::write(path, s.to_plot_data(quantity)).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(model: &str, task: &str, seed: u64, losses: &[f64]) -> Vec<MetricRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| MetricRecord {
                run_id: format!("{task}-{model}-s{seed}"),
                task: task.into(),
                model: model.into(),
                seed,
                step: i + 1,
                train_loss: l,
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn medians_per_step_and_model() {
        let runs = vec![
            run("node", "pointcloud", 0, &[1.0, 0.5]),
            run("node", "pointcloud", 1, &[3.0, 0.7]),
            run("node", "pointcloud", 2, &[2.0, 0.6]),
            run("hbnode", "pointcloud", 0, &[1.0, 0.1]),
        ];
        let s = summarize(&runs, Quantity::TrainLoss).unwrap();
        assert_eq!(s.models, vec!["hbnode", "node"]);
        assert_eq!(s.rows[&1][1], Some((2.0, 1.5, 2.5, 3)));
        assert_eq!(s.rows[&2][0], Some((0.1, 0.1, 0.1, 1)));
        let text = s.to_plot_data("loss");
        assert!(text.lines().nth(1).unwrap().starts_with("# x hbnode_median"));
    }

    #[test]
    fn single_run_and_mixed_tasks_rejected() {
        let e = summarize(&[run("node", "pointcloud", 0, &[1.0])], Quantity::TrainLoss).unwrap_err();
        assert!(e.to_string().contains("need ≥ 2 runs"));
        let e = summarize(
            &[run("node", "pointcloud", 0, &[1.0]), run("rnn", "adding", 0, &[1.0])],
            Quantity::TrainLoss,
        )
        .unwrap_err();
        assert!(e.to_string().contains("mismatched tasks"));
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert!("bogus".parse::<Quantity>().is_err());
    }
}
