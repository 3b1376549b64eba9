//! Seeded generators for the synthetic benchmarks: adding, copy (recurrent
//! and transformer forms) and two-class planar point clouds.

use std::fmt::Write as _;

use rand::Rng;

use crate::attention::TokenExample;
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class per step.
    Classes(Vec<usize>),
    /// A single regression value read after the last step.
    Value(f64),
}

/// One sequence: `inputs` is `[T, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub inputs: Tensor,
    pub targets: Targets,
    /// Per-step loss weight; `None` means every step counts.
    pub mask: Option<Vec<f64>>,
}

impl SequenceSample {
    /// One row per step: inputs, then target and mask when per-step.
    pub fn to_columns(&self) -> String {
        let mut out = String::new();
        let d = self.inputs.cols();
        let mut header = String::from("t");
        for i in 0..d {
            let _ = write!(header, " x{i}");
        }
        if matches!(self.targets, Targets::Classes(_)) {
            header.push_str(" target mask");
        }
        out.push_str(&header);
        out.push('\n');
        for t in 0..self.inputs.rows() {
            let _ = write!(out, "{t}");
            for x in self.inputs.row(t) {
                let _ = write!(out, " {x}");
            }
            if let Targets::Classes(c) = &self.targets {
                let m = self.mask.as_ref().map_or(1.0, |m| m[t]);
                let _ = write!(out, " {} {m}", c[t]);
            }
            out.push('\n');
        }
        if let Targets::Value(v) = self.targets {
            let _ = writeln!(out, "# target {v}");
        }
        out
    }
}

/// `T` steps of `(value, marker)`; two markers, one per half; the target is
/// the sum of the marked values.
pub fn gen_adding_task<R: Rng + ?Sized>(t_len: usize, rng: &mut R) -> Result<SequenceSample> {
    if t_len < 2 {
        return Err(Error::InvalidArgument(format!("adding task needs T ≥ 2, got {t_len}")));
    }
    let half = t_len / 2;
    let first = rng.gen_range(0..half);
    let second = rng.gen_range(half..t_len);
    let mut data = Vec::with_capacity(2 * t_len);
    let mut target = 0.0;
    for t in 0..t_len {
        let value: f64 = rng.gen();
        let marked = t == first || t == second;
        if marked {
            target += value;
        }
        data.push(value);
        data.push(if marked { 1.0 } else { 0.0 });
    }
    Ok(SequenceSample {
        inputs: Tensor::new(vec![t_len, 2], data)?,
        targets: Targets::Value(target),
        mask: None,
    })
}

/// Layout of the recurrent copy task. Symbols `0..n_symbols` carry data,
/// `n_symbols` is the blank and `n_symbols + 1` the go marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopySpec {
    pub blanks: usize,
    pub n_symbols: usize,
    pub copy_len: usize,
    /// Score every step instead of only the final `copy_len`.
    pub full_loss: bool,
}

impl CopySpec {
    pub fn new(blanks: usize) -> Self {
        Self {
            blanks,
            n_symbols: 8,
            copy_len: 10,
            full_loss: false,
        }
    }

    pub fn len(&self) -> usize {
        2 * self.copy_len + self.blanks + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank(&self) -> usize {
        self.n_symbols
    }

    pub fn marker(&self) -> usize {
        self.n_symbols + 1
    }

    /// One-hot width of the inputs.
    pub fn input_dim(&self) -> usize {
        self.n_symbols + 2
    }

    /// Output classes: data symbols plus the blank.
    pub fn classes(&self) -> usize {
        self.n_symbols + 1
    }

    fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 || self.copy_len == 0 {
            return Err(Error::InvalidArgument(format!("invalid copy task {self:?}")));
        }
        Ok(())
    }

    /// Input tokens, target classes and loss weights.
    pub fn tokens<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
        self.validate()?;
        let len = self.len();
        let data: Vec<usize> = (0..self.copy_len).map(|_| rng.gen_range(0..self.n_symbols)).collect();
        let mut inputs = data.clone();
        inputs.extend(std::iter::repeat(self.blank()).take(self.blanks));
        inputs.push(self.marker());
        inputs.extend(std::iter::repeat(self.blank()).take(self.copy_len));
        let mut targets = vec![self.blank(); len - self.copy_len];
        targets.extend_from_slice(&data);
        let weights = (0..len)
            .map(|t| if self.full_loss || t >= len - self.copy_len { 1.0 } else { 0.0 })
            .collect();
        Ok((inputs, targets, weights))
    }
}

pub fn gen_copy_task_rnn<R: Rng + ?Sized>(spec: &CopySpec, rng: &mut R) -> Result<SequenceSample> {
    let (inputs, targets, weights) = spec.tokens(rng)?;
    let d = spec.input_dim();
    let mut onehot = vec![0.0; inputs.len() * d];
    for (t, &s) in inputs.iter().enumerate() {
        onehot[t * d + s] = 1.0;
    }
    Ok(SequenceSample {
        inputs: Tensor::new(vec![inputs.len(), d], onehot)?,
        targets: Targets::Classes(targets),
        mask: Some(weights),
    })
}

/// `0 w 0 w` with symbols `1..=n_symbols` and `|w|` uniform in
/// `1..=(max_len − 2)/2`; predicts the next token, scored on the second `w`.
pub fn gen_copy_task_transformer<R: Rng + ?Sized>(max_len: usize, n_symbols: usize, rng: &mut R) -> Result<TokenExample> {
    if max_len < 4 || n_symbols < 1 {
        return Err(Error::InvalidArgument(format!(
            "transformer copy task needs max_len ≥ 4 and a symbol, got {max_len}, {n_symbols}"
        )));
    }
    let w_len = rng.gen_range(1..=(max_len - 2) / 2);
    let w: Vec<usize> = (0..w_len).map(|_| rng.gen_range(1..=n_symbols)).collect();
    let mut seq = vec![0];
    seq.extend_from_slice(&w);
    seq.push(0);
    seq.extend_from_slice(&w);
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = seq[1..].to_vec();
    // Target position p + 1 lies in the second copy when p + 1 ≥ |w| + 2.
    let weights = (0..inputs.len()).map(|p| if p + 1 > w_len + 1 { 1.0 } else { 0.0 }).collect();
    Ok(TokenExample { inputs, targets, weights })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `[120, 2]`.
    pub points: Tensor,
    pub labels: Vec<usize>,
}

impl PointCloud {
    pub const INNER: usize = 40;
    pub const OUTER: usize = 80;

    pub fn to_columns(&self) -> String {
        let mut out = String::from("x y label\n");
        for (i, l) in self.labels.iter().enumerate() {
            let p = self.points.row(i);
            let _ = writeln!(out, "{} {} {l}", p[0], p[1]);
        }
        out
    }
}

/// Uniform point in the annulus `lo < r < hi` (a disk when `lo = 0`).
fn annulus_point<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> [f64; 2] {
    loop {
        let u: f64 = rng.gen();
        let r = (lo * lo + u * (hi * hi - lo * lo)).sqrt();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        // Endpoints of the open interval are resampled.
        if r > lo && r < hi {
            return [r * theta.cos(), r * theta.sin()];
        }
    }
}

/// 40 class-0 points in `r < 0.5` followed by 80 class-1 points in
/// `0.85 < r < 1`.
pub fn gen_point_cloud(seed: u64) -> PointCloud {
    let mut rng = seeded_rng(seed);
    let mut data = Vec::with_capacity(2 * (PointCloud::INNER + PointCloud::OUTER));
    let mut labels = Vec::with_capacity(PointCloud::INNER + PointCloud::OUTER);
    for _ in 0..PointCloud::INNER {
        data.extend(annulus_point(0.0, 0.5, &mut rng));
        labels.push(0);
    }
    for _ in 0..PointCloud::OUTER {
        data.extend(annulus_point(0.85, 1.0, &mut rng));
        labels.push(1);
    }
    PointCloud {
        points: Tensor::from_parts(vec![labels.len(), 2], data),
        labels,
    }
}

/// Step-major batch for recurrent models: `steps[t]` is `[B, d]`.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub steps: Vec<Tensor>,
    pub targets: StepTargets,
}

#[derive(Clone, Debug)]
pub enum StepTargets {
    /// `[B, 1]` regression targets read after the last step.
    Final(Tensor),
    /// Per step: classes and loss weights for every row.
    PerStep(Vec<(Vec<usize>, Vec<f64>)>),
}

/// Transposes samples of equal length into step-major form.
pub fn stack_samples(samples: &[SequenceSample]) -> Result<StepBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (t_len, d) = (first.inputs.rows(), first.inputs.cols());
    if samples.iter().any(|s| s.inputs.shape() != first.inputs.shape()) {
        return Err(Error::InvalidArgument("samples differ in shape".into()));
    }
    let b = samples.len();
    let steps = (0..t_len)
        .map(|t| {
            let mut rows = Vec::with_capacity(b * d);
            for s in samples {
                rows.extend_from_slice(s.inputs.row(t));
            }
            Tensor::from_parts(vec![b, d], rows)
        })
        .collect();
    let targets = match &first.targets {
        Targets::Value(_) => {
            let mut vals = Vec::with_capacity(b);
            for s in samples {
                match s.targets {
                    Targets::Value(v) => vals.push(v),
                    Targets::Classes(_) => return Err(Error::InvalidArgument("mixed target kinds".into())),
                }
            }
            StepTargets::Final(Tensor::from_parts(vec![b, 1], vals))
        }
        Targets::Classes(_) => {
            let mut per_step = vec![(Vec::with_capacity(b), Vec::with_capacity(b)); t_len];
            for s in samples {
                let Targets::Classes(c) = &s.targets else {
                    return Err(Error::InvalidArgument("mixed target kinds".into()));
                };
                for t in 0..t_len {
                    per_step[t].0.push(c[t]);
                    per_step[t].1.push(s.mask.as_ref().map_or(1.0, |m| m[t]));
                }
            }
            StepTargets::PerStep(per_step)
        }
    };
    Ok(StepBatch { steps, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adding_target_is_sum_of_marked_values() {
        let s = gen_adding_task(10, &mut seeded_rng(1)).unwrap();
        let mut sum = 0.0;
        let mut marks = vec![];
        for t in 0..10 {
            if s.inputs.at(t, 1) == 1.0 {
                sum += s.inputs.at(t, 0);
                marks.push(t);
            }
        }
        assert_eq!(marks.len(), 2);
        assert!(marks[0] < 5 && marks[1] >= 5);
        assert_eq!(s.targets, Targets::Value(sum));
        assert!(gen_adding_task(1, &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn copy_rnn_layout() {
        let spec = CopySpec {
            blanks: 3,
            n_symbols: 4,
            copy_len: 2,
            full_loss: false,
        };
        let (inputs, targets, weights) = spec.tokens(&mut seeded_rng(2)).unwrap();
        assert_eq!(inputs.len(), 8);
        assert_eq!(&inputs[2..], &[4, 4, 4, 5, 4, 4]);
        assert_eq!(&targets[6..], &inputs[..2]);
        assert_eq!(weights, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn transformer_copy_shortest_word() {
        let mut rng = seeded_rng(0);
        let ex = (0..200)
            .map(|_| gen_copy_task_transformer(32, 10, &mut rng).unwrap())
            .find(|e| e.inputs.len() == 3)
            .unwrap();
        // 0 a 0 a: inputs 0 a 0, targets a 0 a, only the last scored.
        assert_eq!(ex.inputs[0], 0);
        assert_eq!(ex.inputs[2], 0);
        assert_eq!(ex.targets[2], ex.inputs[1]);
        assert_eq!(ex.weights, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn point_cloud_regions_and_determinism() {
        let pc = gen_point_cloud(5);
        assert_eq!(pc, gen_point_cloud(5));
        for (i, &l) in pc.labels.iter().enumerate() {
            let r = pc.points.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if l == 0 {
                assert!(r < 0.5);
            } else {
                assert!(r > 0.85 && r < 1.0);
            }
        }
        assert_eq!(pc.labels.iter().filter(|&&l| l == 0).count(), 40);
    }

    #[test]
    fn stacking_transposes_steps() {
        let mut rng = seeded_rng(3);
        let samples: Vec<_> = (0..3).map(|_| gen_adding_task(4, &mut rng).unwrap()).collect();
        let batch = stack_samples(&samples).unwrap();
        assert_eq!(batch.steps.len(), 4);
        assert_eq!(batch.steps[2].row(1), samples[1].inputs.row(2));
        let StepTargets::Final(t) = batch.targets else { panic!() };
        assert_eq!(t.shape(), &[3, 1]);
    }
}
