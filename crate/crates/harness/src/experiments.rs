//! Training loops for the four tasks and the on-disk run layout.
//!
//! A run directory holds `manifest.txt`, one `metrics-seed<N>.tsv` per seed
//! and a matching `timing-seed<N>.tsv` with wall-clock seconds per step.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use momentum_core::attention::{TokenExample, Transformer, TransformerVariant};
use momentum_core::cells::{bptt_gradient_norms, CellKind, RecurrentModel};
use momentum_core::ode::{AdjointOptions, OdeClassifier, OdeFamily, SolverOptions};
use momentum_core::optim::{clip_grad_norm, Optimizer};
use momentum_core::tasks::{gen_adding_task, gen_copy_task_rnn, gen_copy_task_transformer, gen_point_cloud, stack_samples, CopySpec, StepTargets};
use momentum_core::{seeded_rng, Tape, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ModelKind, Task};
use crate::metrics::{self, MetricRecord};

/// Times at which the adjoint norm is sampled during ODE training.
const ADJOINT_CHECKPOINTS: [f64; 3] = [0.25, 0.5, 0.75];

/// Outcome of one seed.
#[derive(Clone, Debug, Default)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    /// `(step, seconds since start)` for every logged record.
    pub timing: Vec<(usize, f64)>,
    /// Set when training stopped early on a non-finite loss.
    pub halted: Option<String>,
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-{}-s{seed}", cfg.task, cfg.model.name())
}

/// Separate streams for model initialization and data so changing one
/// never shifts the other.
fn init_rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed)
}

fn data_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

fn current_lr(cfg: &ExperimentConfig, step: usize) -> f64 {
    if cfg.lr_decay_at > 0 && step > cfg.lr_decay_at {
        cfg.lr * cfg.lr_decay
    } else {
        cfg.lr
    }
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    run: SeedRun,
    start: Instant,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a ExperimentConfig, seed: u64) -> Self {
        Self {
            cfg,
            run: SeedRun {
                seed,
                ..Default::default()
            },
            start: Instant::now(),
        }
    }

    fn base(&self, step: usize, train_loss: f64) -> MetricRecord {
        MetricRecord {
            run_id: run_id(self.cfg, self.run.seed),
            task: self.cfg.task.to_string(),
            model: self.cfg.model.name().to_string(),
            seed: self.run.seed,
            step,
            train_loss,
            ..Default::default()
        }
    }

    fn push(&mut self, rec: MetricRecord) {
        self.run.timing.push((rec.step, self.start.elapsed().as_secs_f64()));
        self.run.records.push(rec);
    }

    fn halt(mut self, step: usize, what: &str) -> SeedRun {
        self.run.halted = Some(format!("non-finite {what} at step {step}"));
        self.run
    }
}

/// Trains one seed of any task.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    match (cfg.task, cfg.model) {
        (Task::PointCloud, ModelKind::Ode(f)) => train_point_cloud(cfg, f, seed),
        (Task::Adding, ModelKind::Cell(c)) | (Task::CopyRnn, ModelKind::Cell(c)) => train_recurrent(cfg, c, seed),
        (Task::CopyTransformer, ModelKind::Transformer(v)) => train_transformer(cfg, v, seed),
        (task, model) => bail!("model {} does not apply to task {task}", model.name()),
    }
}

fn train_point_cloud(cfg: &ExperimentConfig, family: OdeFamily, seed: u64) -> Result<SeedRun> {
    Ok(train_point_cloud_model(cfg, family, seed)?.1)
}

/// Point-cloud training that also hands back the trained classifier.
pub fn train_point_cloud_model(cfg: &ExperimentConfig, family: OdeFamily, seed: u64) -> Result<(OdeClassifier, SeedRun)> {
    let cloud = gen_point_cloud(seed);
    let mut rng = init_rng(seed);
    let mut model = OdeClassifier::new(cfg.classifier_config(family), &mut rng)?;
    let mut shuffle = data_rng(seed, 1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.optimizer_momentum);
    let opts = AdjointOptions {
        solver: SolverOptions::dopri(cfg.tol),
        checkpoints: ADJOINT_CHECKPOINTS.iter().map(|c| c * cfg.t1).collect(),
        clip: (cfg.adjoint_clip > 0.0).then_some(cfg.adjoint_clip),
    };
    let n = cloud.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rec = Recorder::new(cfg, seed);
    for epoch in 1..=cfg.budget {
        opt.step_size = current_lr(cfg, epoch);
        order.shuffle(&mut shuffle);
        let (mut fwd, mut bwd, mut batches) = (0usize, 0usize, 0usize);
        let mut adjoint_norms = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let mut x = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                x.extend_from_slice(cloud.points.row(i));
            }
            let x = Tensor::new(vec![chunk.len(), 2], x)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| cloud.labels[i]).collect();
            let step = match model.loss_and_grad(&x, &labels, &opts) {
                Ok(s) => s,
                Err(e) => return Ok((model, rec.halt(epoch, &format!("solve ({e})")))),
            };
            if !step.loss.is_finite() {
                return Ok((model, rec.halt(epoch, "loss")));
            }
            let mut grads = step.grads;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            let mut params = model.params();
            opt.step(&mut params, &grads)?;
            model.set_params(&params)?;
            fwd += step.forward_nfe;
            bwd += step.backward_nfe;
            batches += 1;
            adjoint_norms = step.adjoint_norms;
        }
        if epoch % cfg.log_every != 0 && epoch != cfg.budget {
            continue;
        }
        let eval = match model.evaluate(&cloud.points, &cloud.labels, &opts.solver) {
            Ok(e) => e,
            Err(e) => return Ok((model, rec.halt(epoch, &format!("solve ({e})")))),
        };
        if !eval.loss.is_finite() {
            return Ok((model, rec.halt(epoch, "loss")));
        }
        let mut r = rec.base(epoch, eval.loss);
        r.eval_acc = Some(eval.accuracy);
        r.forward_nfe = Some(fwd as f64 / batches as f64);
        r.backward_nfe = Some(bwd as f64 / batches as f64);
        r.adjoint_norms = adjoint_norms;
        rec.push(r);
    }
    Ok((model, rec.run))
}

fn train_recurrent(cfg: &ExperimentConfig, kind: CellKind, seed: u64) -> Result<SeedRun> {
    let copy = CopySpec {
        blanks: cfg.seq_len,
        n_symbols: cfg.n_symbols,
        copy_len: cfg.copy_len,
        full_loss: cfg.full_loss,
    };
    let (input_dim, output_dim) = match cfg.task {
        Task::Adding => (2, 1),
        _ => (copy.input_dim(), copy.classes()),
    };
    let mut rng = init_rng(seed);
    let mut model = RecurrentModel::new(
        kind,
        cfg.momentum_hyper(),
        cfg.cell_activation,
        cfg.forget_gate,
        input_dim,
        cfg.hidden,
        output_dim,
        &mut rng,
    )?;
    let mut data = data_rng(seed, 1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.optimizer_momentum);
    let mut rec = Recorder::new(cfg, seed);
    for it in 1..=cfg.budget {
        opt.step_size = current_lr(cfg, it);
        let samples = (0..cfg.batch)
            .map(|_| match cfg.task {
                Task::Adding => gen_adding_task(cfg.seq_len, &mut data),
                _ => gen_copy_task_rnn(&copy, &mut data),
            })
            .collect::<momentum_core::Result<Vec<_>>>()?;
        let batch = stack_samples(&samples)?;
        let mut tape = Tape::new();
        let vars = tape.register(&model.params);
        let unrolled = model.unroll(&mut tape, &vars, &batch.steps)?;
        let loss = match &batch.targets {
            StepTargets::Final(y) => {
                let last = *unrolled.hidden.last().expect("non-empty sequence");
                let out = model.readout(&mut tape, &vars, last)?;
                tape.mse_loss(out, y)?
            }
            StepTargets::PerStep(per_step) => {
                let mut logits = Vec::with_capacity(per_step.len());
                let (mut targets, mut weights) = (Vec::new(), Vec::new());
                for (h, (t, w)) in unrolled.hidden.iter().zip(per_step) {
                    logits.push(model.readout(&mut tape, &vars, *h)?);
                    targets.extend_from_slice(t);
                    weights.extend_from_slice(w);
                }
                let all = tape.concat(&logits, 0)?;
                tape.cross_entropy_loss(all, &targets, Some(&weights))?
            }
        };
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Ok(rec.halt(it, "loss"));
        }
        let grads = tape.backward(loss)?;
        let norms = (cfg.grad_norm_every > 0 && it % cfg.grad_norm_every == 0)
            .then(|| bptt_gradient_norms(&tape, &unrolled, &grads));
        let mut g = grads.into_params();
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut g, cfg.grad_clip);
        }
        opt.step(&mut model.params, &g)?;
        if it % cfg.log_every == 0 || it == cfg.budget || norms.is_some() {
            let mut r = rec.base(it, loss_value);
            r.grad_norms = norms.unwrap_or_default();
            rec.push(r);
        }
    }
    Ok(rec.run)
}

fn copy_examples(cfg: &ExperimentConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenExample>> {
    (0..count)
        .map(|_| Ok(gen_copy_task_transformer(cfg.max_len, cfg.n_symbols, rng)?))
        .collect()
}

fn train_transformer(cfg: &ExperimentConfig, variant: TransformerVariant, seed: u64) -> Result<SeedRun> {
    let mut rng = init_rng(seed);
    let mut model = Transformer::new(cfg.transformer_config(variant), &mut rng)?;
    let mut data = data_rng(seed, 1);
    let eval_set = copy_examples(cfg, cfg.eval_size, &mut data_rng(seed, 2))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.optimizer_momentum);
    let mut rec = Recorder::new(cfg, seed);
    for it in 1..=cfg.budget {
        opt.step_size = current_lr(cfg, it);
        let batch = copy_examples(cfg, cfg.batch, &mut data)?;
        let (loss, mut grads) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Ok(rec.halt(it, "loss"));
        }
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        model.observe_gradient(&grads)?;
        opt.step(model.params_mut(), &grads)?;
        let eval_now = it == cfg.budget || (cfg.eval_every > 0 && it % cfg.eval_every == 0);
        if it % cfg.log_every == 0 || eval_now {
            let mut r = rec.base(it, loss);
            if eval_now {
                r.eval_loss = Some(model.loss(&eval_set)?);
            }
            rec.push(r);
        }
    }
    Ok(rec.run)
}

/// Trains every seed and writes the run directory. Returns the seed runs.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SeedRun>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("manifest.txt"), &cfg.manifest())?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        write(&metrics_path(out, seed), &metrics::render(&run.records))?;
        let mut timing = String::from("step\tseconds\n");
        for (step, secs) in &run.timing {
            let _ = writeln!(timing, "{step}\t{secs:.6}");
        }
        write(&out.join(format!("timing-seed{seed}.tsv")), &timing)?;
        runs.push(run);
    }
    Ok(runs)
}

pub fn metrics_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("metrics-seed{seed}.tsv"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}


/// Columnar dump of the task data a seed trains on. Sequence tasks write
/// the first `batch` samples of the training stream, each after a
/// `# sample k` line.
pub fn gen_data(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    if cfg.task == Task::PointCloud {
        return Ok(gen_point_cloud(seed).to_columns());
    }
    let mut data = data_rng(seed, 1);
    let mut out = String::new();
    for k in 0..cfg.batch {
        out.push_str(&format!("# sample {k}\n"));
        match cfg.task {
            Task::Adding => out.push_str(&gen_adding_task(cfg.seq_len, &mut data)?.to_columns()),
            Task::CopyRnn => {
                let copy = CopySpec {
                    blanks: cfg.seq_len,
                    n_symbols: cfg.n_symbols,
                    copy_len: cfg.copy_len,
                    full_loss: cfg.full_loss,
                };
                out.push_str(&gen_copy_task_rnn(&copy, &mut data)?.to_columns());
            }
            _ => {
                let ex = gen_copy_task_transformer(cfg.max_len, cfg.n_symbols, &mut data)?;
                out.push_str("t input target weight\n");
                for (t, ((i, y), w)) in ex.inputs.iter().zip(&ex.targets).zip(&ex.weights).enumerate() {
                    out.push_str(&format!("{t} {i} {y} {w}\n"));
                }
            }
        }
    }
    Ok(out)
}
