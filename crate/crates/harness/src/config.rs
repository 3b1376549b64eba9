//! Flat `key = value` experiment configs and run manifests.
//!
//! Every field has a default; `render` writes all of them, so a manifest
//! records the fully resolved config and parses back to the same value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use momentum_core::attention::{AttnHyper, TransformerConfig, TransformerVariant};
use momentum_core::cells::{Activation, CellKind, MomentumHyper, Parameterization, Schedule};
use momentum_core::ode::{ClassifierConfig, DampingParams, MomentumActivation, OdeFamily};
use momentum_core::optim::OptimizerKind;
use thiserror::Error;

/// Version string written into manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    PointCloud,
    Adding,
    CopyRnn,
    CopyTransformer,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::PointCloud, Task::Adding, Task::CopyRnn, Task::CopyTransformer];

    pub fn name(self) -> &'static str {
        match self {
            Task::PointCloud => "pointcloud",
            Task::Adding => "adding",
            Task::CopyRnn => "copy-rnn",
            Task::CopyTransformer => "copy-transformer",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("expected one of pointcloud, adding, copy-rnn, copy-transformer"))
    }
}

/// The model column of a config, interpreted per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Ode(OdeFamily),
    Cell(CellKind),
    Transformer(TransformerVariant),
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ode(f) => f.name(),
            ModelKind::Cell(c) => c.name(),
            ModelKind::Transformer(v) => v.name(),
        }
    }

    fn parse(task: Task, s: &str) -> Result<Self, String> {
        let r = match task {
            Task::PointCloud => s.parse().map(ModelKind::Ode),
            Task::Adding | Task::CopyRnn => s.parse().map(ModelKind::Cell),
            Task::CopyTransformer => s.parse().map(ModelKind::Transformer),
        };
        r.map_err(|e| format!("{e} (task {task})"))
    }
}

fn schedule_name(s: Schedule) -> String {
    match s {
        Schedule::Constant => "constant".into(),
        Schedule::Nesterov => "nesterov".into(),
        Schedule::ScheduledRestart(f) => format!("restart:{f}"),
    }
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "constant" => Ok(Schedule::Constant),
        "nesterov" => Ok(Schedule::Nesterov),
        _ => s
            .strip_prefix("restart:")
            .and_then(|f| f.parse().ok())
            .filter(|&f: &usize| f > 0)
            .map(Schedule::ScheduledRestart)
            .ok_or_else(|| "expected constant, nesterov or restart:<period>".into()),
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub optimizer_momentum: f64,
    /// Iteration (or epoch, for the point cloud) after which `lr` is
    /// multiplied by `lr_decay`; 0 disables.
    pub lr_decay_at: usize,
    pub lr_decay: f64,
    pub batch: usize,
    /// Epochs for the point cloud, iterations otherwise.
    pub budget: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: usize,
    /// Steps at which per-timestep gradient norms are recorded
    /// (multiples of this value); 0 disables.
    pub grad_norm_every: usize,
    pub eval_every: usize,
    pub eval_size: usize,

    // Recurrent tasks.
    pub hidden: usize,
    pub seq_len: usize,
    pub copy_len: usize,
    pub n_symbols: usize,
    pub full_loss: bool,
    pub cell_activation: Activation,
    pub forget_gate: bool,
    pub mu: f64,
    pub s: f64,
    pub schedule: Schedule,
    pub parameterization: Parameterization,
    pub adam_beta: f64,
    pub adam_eps: f64,

    // ODE task.
    pub tol: f64,
    pub t1: f64,
    pub omega: f64,
    pub gamma_cap: f64,
    pub chi: f64,
    pub momentum_activation: MomentumActivation,
    pub augment: usize,
    pub adjoint_clip: f64,

    // Transformer task.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub attn_gamma: f64,
    pub attn_beta: f64,
    pub beta_conn: f64,
    pub delta: f64,
}

impl ExperimentConfig {
    /// Defaults for a task/model pair.
    pub fn defaults(task: Task, model: ModelKind) -> Self {
        let hyper = MomentumHyper::default();
        let damping = DampingParams::default();
        let (lr, batch, budget, hidden, seq_len) = match task {
            Task::PointCloud => (0.01, 50, 200, 20, 0),
            Task::Adding => (1e-3, 32, 1000, 64, 100),
            Task::CopyRnn => (1e-3, 32, 1000, 64, 100),
            Task::CopyTransformer => (1e-3, 16, 3000, 0, 0),
        };
        Self {
            task,
            model,
            seeds: vec![0],
            optimizer: OptimizerKind::Adam,
            lr,
            optimizer_momentum: 0.9,
            lr_decay_at: if task == Task::CopyTransformer { 3000 } else { 0 },
            lr_decay: 0.1,
            batch,
            budget,
            grad_clip: 0.0,
            log_every: 1,
            grad_norm_every: 0,
            eval_every: if task == Task::CopyTransformer { 50 } else { 0 },
            eval_size: 128,
            hidden,
            seq_len,
            copy_len: 10,
            n_symbols: if task == Task::CopyTransformer { 10 } else { 8 },
            full_loss: false,
            cell_activation: Activation::Tanh,
            forget_gate: false,
            mu: hyper.mu,
            s: hyper.s,
            schedule: hyper.schedule,
            parameterization: hyper.parameterization,
            adam_beta: hyper.beta,
            adam_eps: hyper.eps,
            tol: 1e-7,
            t1: 1.0,
            omega: damping.omega,
            gamma_cap: damping.cap,
            chi: damping.chi,
            momentum_activation: MomentumActivation::Tanh,
            augment: 0,
            adjoint_clip: 100.0,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_len: 32,
            attn_gamma: 1.0,
            attn_beta: 0.6,
            beta_conn: 0.6,
            delta: 1e-3,
        }
    }

    pub fn momentum_hyper(&self) -> MomentumHyper {
        MomentumHyper {
            mu: self.mu,
            s: self.s,
            schedule: self.schedule,
            parameterization: self.parameterization,
            beta: self.adam_beta,
            eps: self.adam_eps,
        }
    }

    pub fn classifier_config(&self, family: OdeFamily) -> ClassifierConfig {
        let mut c = ClassifierConfig::new(family, 2, 2);
        c.augment = self.augment;
        c.hidden = self.hidden;
        c.t1 = self.t1;
        c.damping = DampingParams {
            omega: self.omega,
            cap: self.gamma_cap,
            chi: self.chi,
        };
        c.activation = self.momentum_activation;
        c
    }

    pub fn transformer_config(&self, variant: TransformerVariant) -> TransformerConfig {
        let mut c = TransformerConfig::new(variant, self.n_symbols + 1);
        c.d_model = self.d_model;
        c.layers = self.layers;
        c.heads = self.heads;
        c.ff_dim = self.ff_dim;
        c.max_len = self.max_len;
        c.attn = AttnHyper {
            gamma: self.attn_gamma,
            beta: self.attn_beta,
        };
        c.beta_conn = self.beta_conn;
        c.delta = self.delta;
        c
    }

    /// Every field, one `key = value` line each, in a fixed order.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("task", self.task.to_string()),
            ("model", self.model.name().to_string()),
            ("seeds", seeds),
            ("optimizer", self.optimizer.to_string()),
            ("lr", self.lr.to_string()),
            ("optimizer.momentum", self.optimizer_momentum.to_string()),
            ("lr_decay_at", self.lr_decay_at.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("batch", self.batch.to_string()),
            ("budget", self.budget.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("log_every", self.log_every.to_string()),
            ("grad_norm_every", self.grad_norm_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("hidden", self.hidden.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("copy_len", self.copy_len.to_string()),
            ("n_symbols", self.n_symbols.to_string()),
            ("full_loss", self.full_loss.to_string()),
            ("cell.activation", self.cell_activation.to_string()),
            ("cell.forget_gate", self.forget_gate.to_string()),
            ("cell.mu", self.mu.to_string()),
            ("cell.s", self.s.to_string()),
            ("cell.schedule", schedule_name(self.schedule)),
            (
                "cell.parameterization",
                match self.parameterization {
                    Parameterization::V => "v",
                    Parameterization::U => "u",
                }
                .to_string(),
            ),
            ("cell.adam_beta", self.adam_beta.to_string()),
            ("cell.adam_eps", self.adam_eps.to_string()),
            ("ode.tol", self.tol.to_string()),
            ("ode.t1", self.t1.to_string()),
            ("ode.omega", self.omega.to_string()),
            ("ode.gamma_cap", self.gamma_cap.to_string()),
            ("ode.chi", self.chi.to_string()),
            ("ode.momentum_activation", self.momentum_activation.to_string()),
            ("ode.augment", self.augment.to_string()),
            ("ode.adjoint_clip", self.adjoint_clip.to_string()),
            ("attn.d_model", self.d_model.to_string()),
            ("attn.layers", self.layers.to_string()),
            ("attn.heads", self.heads.to_string()),
            ("attn.ff_dim", self.ff_dim.to_string()),
            ("attn.max_len", self.max_len.to_string()),
            ("attn.gamma", self.attn_gamma.to_string()),
            ("attn.beta", self.attn_beta.to_string()),
            ("attn.beta_conn", self.beta_conn.to_string()),
            ("attn.delta", self.delta.to_string()),
        ]
    }

    /// Parses config text. `task` and `model` are required; everything
    /// else falls back to the defaults for that pair.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(ConfigError::Duplicate(k));
            }
        }
        Self::from_map(map)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        // Manifest-only key.
        map.remove("code_version");
        let required = |map: &BTreeMap<String, String>, key: &str| {
            map.get(key).cloned().ok_or_else(|| ConfigError::Value {
                key: key.into(),
                value: String::new(),
                reason: "required".into(),
            })
        };
        let task_s = required(&map, "task")?;
        let task: Task = task_s.parse().map_err(|reason| ConfigError::Value {
            key: "task".into(),
            value: task_s.clone(),
            reason,
        })?;
        let model_s = required(&map, "model")?;
        let model = ModelKind::parse(task, &model_s).map_err(|reason| ConfigError::Value {
            key: "model".into(),
            value: model_s.clone(),
            reason,
        })?;
        let mut cfg = Self::defaults(task, model);
        for (key, value) in &map {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                value: value.into(),
                reason: e.to_string(),
            })
        }
        let v = value;
        match key {
            // Already resolved by `from_map`.
            "task" | "model" => {}
            "seeds" => self.seeds = parse_seeds(v).map_err(|reason| value_err(key, v, reason))?,
            "optimizer" => self.optimizer = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "optimizer.momentum" => self.optimizer_momentum = p(key, v)?,
            "lr_decay_at" => self.lr_decay_at = p(key, v)?,
            "lr_decay" => self.lr_decay = p(key, v)?,
            "batch" => self.batch = p(key, v)?,
            "budget" => self.budget = p(key, v)?,
            "grad_clip" => self.grad_clip = p(key, v)?,
            "log_every" => self.log_every = p(key, v)?,
            "grad_norm_every" => self.grad_norm_every = p(key, v)?,
            "eval_every" => self.eval_every = p(key, v)?,
            "eval_size" => self.eval_size = p(key, v)?,
            "hidden" => self.hidden = p(key, v)?,
            "seq_len" => self.seq_len = p(key, v)?,
            "copy_len" => self.copy_len = p(key, v)?,
            "n_symbols" => self.n_symbols = p(key, v)?,
            "full_loss" => self.full_loss = p(key, v)?,
            "cell.activation" => self.cell_activation = p(key, v)?,
            "cell.forget_gate" => self.forget_gate = p(key, v)?,
            "cell.mu" => self.mu = p(key, v)?,
            "cell.s" => self.s = p(key, v)?,
            "cell.schedule" => self.schedule = parse_schedule(v).map_err(|reason| value_err(key, v, reason))?,
            "cell.parameterization" => {
                self.parameterization = match v {
                    "v" => Parameterization::V,
                    "u" => Parameterization::U,
                    _ => return Err(value_err(key, v, "expected v or u".into())),
                }
            }
            "cell.adam_beta" => self.adam_beta = p(key, v)?,
            "cell.adam_eps" => self.adam_eps = p(key, v)?,
            "ode.tol" => self.tol = p(key, v)?,
            "ode.t1" => self.t1 = p(key, v)?,
            "ode.omega" => self.omega = p(key, v)?,
            "ode.gamma_cap" => self.gamma_cap = p(key, v)?,
            "ode.chi" => self.chi = p(key, v)?,
            "ode.momentum_activation" => self.momentum_activation = p(key, v)?,
            "ode.augment" => self.augment = p(key, v)?,
            "ode.adjoint_clip" => self.adjoint_clip = p(key, v)?,
            "attn.d_model" => self.d_model = p(key, v)?,
            "attn.layers" => self.layers = p(key, v)?,
            "attn.heads" => self.heads = p(key, v)?,
            "attn.ff_dim" => self.ff_dim = p(key, v)?,
            "attn.max_len" => self.max_len = p(key, v)?,
            "attn.gamma" => self.attn_gamma = p(key, v)?,
            "attn.beta" => self.attn_beta = p(key, v)?,
            "attn.beta_conn" => self.beta_conn = p(key, v)?,
            "attn.delta" => self.delta = p(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Range checks, named by key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(value_err(key, &value, reason.into()))
            }
        };
        check(!self.seeds.is_empty(), "seeds", String::new(), "need at least one seed")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", self.lr.to_string(), "must be > 0")?;
        check(
            (0.0..1.0).contains(&self.optimizer_momentum),
            "optimizer.momentum",
            self.optimizer_momentum.to_string(),
            "must lie in [0, 1)",
        )?;
        check(self.lr_decay > 0.0, "lr_decay", self.lr_decay.to_string(), "must be > 0")?;
        check(self.batch > 0, "batch", self.batch.to_string(), "must be > 0")?;
        check(self.grad_clip >= 0.0, "grad_clip", self.grad_clip.to_string(), "must be ≥ 0")?;
        check(self.log_every > 0, "log_every", self.log_every.to_string(), "must be > 0")?;
        check(self.eval_size > 0, "eval_size", self.eval_size.to_string(), "must be > 0")?;
        match self.task {
            Task::PointCloud => {
                check(self.hidden > 0, "hidden", self.hidden.to_string(), "must be > 0")?;
                check(self.tol > 0.0, "ode.tol", self.tol.to_string(), "must be > 0")?;
                check(self.t1 > 0.0, "ode.t1", self.t1.to_string(), "must be > 0")?;
                check(self.gamma_cap > 0.0, "ode.gamma_cap", self.gamma_cap.to_string(), "must be > 0")?;
                check(self.adjoint_clip >= 0.0, "ode.adjoint_clip", self.adjoint_clip.to_string(), "must be ≥ 0")?;
            }
            Task::Adding | Task::CopyRnn => {
                check(self.hidden > 0, "hidden", self.hidden.to_string(), "must be > 0")?;
                let min_len = if self.task == Task::Adding { 2 } else { 0 };
                check(self.seq_len >= min_len, "seq_len", self.seq_len.to_string(), "too short")?;
                check(self.copy_len > 0, "copy_len", self.copy_len.to_string(), "must be > 0")?;
                check(self.n_symbols >= 2, "n_symbols", self.n_symbols.to_string(), "must be ≥ 2")?;
                self.momentum_hyper()
                    .validate()
                    .map_err(|e| value_err("cell.mu", &self.mu.to_string(), e.to_string()))?;
            }
            Task::CopyTransformer => {
                let ModelKind::Transformer(variant) = self.model else {
                    unreachable!("model parsed per task")
                };
                check(self.max_len >= 4, "attn.max_len", self.max_len.to_string(), "must be ≥ 4")?;
                self.transformer_config(variant)
                    .validate()
                    .map_err(|e| value_err("attn", "", e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Manifest text: the rendered config plus the code version.
    pub fn manifest(&self) -> String {
        format!("code_version = {CODE_VERSION}\n{}", self.render())
    }
}

fn value_err(key: &str, value: &str, reason: String) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason,
    }
}

/// `3`, `0,1,2` or `0..5` (exclusive end).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        if b <= a {
            return Err("empty seed range".into());
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("bad seed `{x}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_pair_round_trips() {
        let pairs = [
            (Task::PointCloud, "hbnode"),
            (Task::Adding, "momentum-rnn"),
            (Task::CopyRnn, "lstm"),
            (Task::CopyTransformer, "adaptive-momentum"),
        ];
        for (task, model) in pairs {
            let cfg = ExperimentConfig::defaults(task, ModelKind::parse(task, model).unwrap());
            let back = ExperimentConfig::parse(&cfg.manifest()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.render(), cfg.render());
        }
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut cfg = ExperimentConfig::defaults(Task::PointCloud, ModelKind::Ode(OdeFamily::Node));
        cfg.lr = 0.1 + 0.2;
        cfg.tol = 1e-300;
        cfg.omega = -1.0 / 3.0;
        cfg.seeds = vec![4, 9, u64::MAX];
        cfg.schedule = Schedule::ScheduledRestart(7);
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let e = ExperimentConfig::parse("task = adding\nmodel = rnn\nlr = -1\n").unwrap_err();
        assert!(e.to_string().contains("`lr`"), "{e}");
        let e = ExperimentConfig::parse("task = adding\nmodel = hbnode\n").unwrap_err();
        assert!(e.to_string().contains("`model`"), "{e}");
        let e = ExperimentConfig::parse("task = adding\nmodel = rnn\nwidth = 3\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey(_)));
        let e = ExperimentConfig::parse("task = adding\nmodel = rnn\nlr = 1\nlr = 2\n").unwrap_err();
        assert!(matches!(e, ConfigError::Duplicate(_)));
        assert!(ExperimentConfig::parse("model = rnn\n").is_err());
        assert!(ExperimentConfig::parse("just text\n").is_err());
    }

    #[test]
    fn comments_and_seed_forms() {
        let cfg = ExperimentConfig::parse("# pointcloud run\ntask = pointcloud # inline\nmodel = node\nseeds = 2..5\n").unwrap();
        assert_eq!(cfg.seeds, vec![2, 3, 4]);
        assert_eq!(parse_seeds("1, 3").unwrap(), vec![1, 3]);
        assert!(parse_seeds("5..5").is_err());
    }
}
