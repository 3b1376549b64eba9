//! Tab-separated metric records with a fixed header.
//!
//! Wall-clock time is kept out of these files (it goes to a separate timing
//! file) so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const HEADER: &str = "run_id\ttask\tmodel\tseed\tstep\ttrain_loss\teval_loss\teval_acc\tforward_nfe\tbackward_nfe\tgrad_norms\tadjoint_norms";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub task: String,
    pub model: String,
    pub seed: u64,
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub forward_nfe: Option<f64>,
    pub backward_nfe: Option<f64>,
    /// `‖∂L/∂h_t‖` for every step of one sequence pass.
    pub grad_norms: Vec<f64>,
    /// `‖a(t)‖` at the adjoint checkpoints, terminal time first.
    pub adjoint_norms: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

fn list(v: &[f64]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        Ok(None)
    } else {
        Ok(Some(s.parse()?))
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| Ok(x.parse()?)).collect()
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.run_id,
            self.task,
            self.model,
            self.seed,
            self.step,
            self.train_loss,
            opt(self.eval_loss),
            opt(self.eval_acc),
            opt(self.forward_nfe),
            opt(self.backward_nfe),
            list(&self.grad_norms),
            list(&self.adjoint_norms),
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 12 {
            bail!("expected 12 columns, found {}", f.len());
        }
        Ok(Self {
            run_id: f[0].into(),
            task: f[1].into(),
            model: f[2].into(),
            seed: f[3].parse()?,
            step: f[4].parse()?,
            train_loss: f[5].parse()?,
            eval_loss: parse_opt(f[6])?,
            eval_acc: parse_opt(f[7])?,
            forward_nfe: parse_opt(f[8])?,
            backward_nfe: parse_opt(f[9])?,
            grad_norms: parse_list(f[10])?,
            adjoint_norms: parse_list(f[11])?,
        })
    }
}

pub fn render(records: &[MetricRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.to_line());
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        _ => bail!("missing metrics header"),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| MetricRecord::from_line(l).with_context(|| format!("metrics line {}", i + 2)))
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("parsing {}", path.display()))
}
