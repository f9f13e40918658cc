//! AdamW training loop, held-out evaluation and the loss decomposition by
//! occurrence count.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{ModelConfig, ModelState};
use crate::seeds::rng_for;
use crate::tasks::{Split, TaskSample, TaskSpec};
use crate::tensor::{Graph, Tensor};

/// Largest occurrence count reported as its own column in curve CSVs.
pub const CSV_MAX_K: u32 = 19;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// Streamed fresh batches every step, or repeated passes over a fixed set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Duration {
    Steps { steps: usize },
    Epochs { epochs: usize, dataset_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub duration: Duration,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Global-norm clip threshold; non-positive disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Evaluate every this many steps; defaults to max(1, steps/40).
    #[serde(default)]
    pub eval_every: Option<usize>,
}

fn default_clip() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_samples() -> usize {
    512
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            duration: Duration::Steps { steps: 1000 },
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 0,
            schedule: Schedule::Cosine,
            grad_clip: default_clip(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            eval_samples: default_eval_samples(),
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn steps(steps: usize) -> Self {
        Self { duration: Duration::Steps { steps }, ..Self::default() }
    }

    pub fn total_steps(&self) -> usize {
        match self.duration {
            Duration::Steps { steps } => steps,
            Duration::Epochs { epochs, dataset_size } => epochs * dataset_size.div_ceil(self.batch_size.max(1)),
        }
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or(self.total_steps() / 40).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and ≥ 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.total_steps() == 0 {
            return bad("training needs at least one step");
        }
        if self.warmup_steps > self.total_steps() {
            return bad("warmup_steps exceeds total steps");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and ≥ 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0,1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be ≥ 1");
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`: linear warmup then constant or
    /// cosine decay to zero at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps();
        let w = self.warmup_steps;
        if step < w {
            return self.lr * (step + 1) as f64 / w as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (total - w).max(1) as f64;
                let frac = ((step - w) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_targets: usize,
    #[serde(rename = "L_new")]
    pub l_new: Option<f64>,
    #[serde(rename = "L_second")]
    pub l_second: Option<f64>,
    #[serde(rename = "L_rep")]
    pub l_rep: Option<f64>,
    /// L_new − L_second.
    pub gap: Option<f64>,
    pub loss_by_k: BTreeMap<u32, f64>,
}

/// Per-target losses and hits for `samples`, in sample then position order.
pub fn score(model: &ModelState, samples: &[TaskSample]) -> Result<(Vec<f64>, Vec<bool>)> {
    const CHUNK: usize = 64;
    let mut losses = Vec::new();
    let mut hits = Vec::new();
    for chunk in samples.chunks(CHUNK) {
        let (tokens, b, t, rows, targets) = flatten_batch(chunk)?;
        let g = Graph::new();
        let p = model.frozen_vars(&g)?;
        let logits = model.forward_graph(&g, &p, &tokens, b, t, Some(&rows), None, None)?;
        let (_, per_row) = logits.cross_entropy_logits(&targets)?;
        let v = model.config().vocab;
        let values = logits.value();
        for (r, &y) in targets.iter().enumerate() {
            let row = &values[r * v..(r + 1) * v];
            hits.push(argmax(row) == y);
        }
        losses.extend(per_row);
    }
    Ok((losses, hits))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, mean loss and loss decomposition over every supervised
/// position of `samples`.
pub fn evaluate(model: &ModelState, samples: &[TaskSample]) -> Result<EvalReport> {
    if samples.iter().all(|s| s.targets.is_empty()) {
        return Err(LabError::NoInput("no supervised positions to evaluate".into()));
    }
    let (losses, hits) = score(model, samples)?;
    let ks: Vec<u32> = samples.iter().flat_map(|s| s.occurrence_count.iter().copied()).collect();
    Ok(decompose(&losses, &hits, &ks))
}

/// Bucket statistics from aligned per-target losses, hits and counts.
pub fn decompose(losses: &[f64], hits: &[bool], ks: &[u32]) -> EvalReport {
    let n = losses.len();
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mut by_k: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&l, &k) in losses.iter().zip(ks) {
        by_k.entry(k).or_default().push(l);
    }
    let rep: Vec<f64> = losses.iter().zip(ks).filter(|(_, &k)| k >= 1).map(|(&l, _)| l).collect();
    let l_new = by_k.get(&0).and_then(|v| mean(v));
    let l_second = by_k.get(&1).and_then(|v| mean(v));
    EvalReport {
        accuracy: hits.iter().filter(|&&h| h).count() as f64 / n.max(1) as f64,
        mean_loss: mean(losses).unwrap_or(f64::NAN),
        n_targets: n,
        l_new,
        l_second,
        l_rep: mean(&rep),
        gap: l_new.zip(l_second).map(|(a, b)| a - b),
        loss_by_k: by_k.iter().map(|(&k, v)| (k, mean(v).expect("bucket non-empty"))).collect(),
    }
}

type FlatBatch = (Vec<u32>, usize, usize, Vec<usize>, Vec<usize>);

/// Flattened tokens plus flat row indices and targets of every supervised
/// position.
fn flatten_batch(samples: &[TaskSample]) -> Result<FlatBatch> {
    let t = samples.first().map(|s| s.tokens.len()).ok_or_else(|| LabError::NoInput("empty batch".into()))?;
    let mut tokens = Vec::with_capacity(samples.len() * t);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.tokens.len() != t {
            return Err(LabError::Dimension(format!("sequence lengths {} and {}", t, s.tokens.len())));
        }
        tokens.extend_from_slice(&s.tokens);
        rows.extend(s.target_positions.iter().map(|&p| i * t + p));
        targets.extend(s.targets.iter().map(|&y| y as usize));
    }
    Ok((tokens, samples.len(), t, rows, targets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous record; at step
    /// 0 the held-out loss of the initial model.
    pub train_loss: f64,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub seed: u64,
    pub param_count: usize,
    pub curves: Vec<CurvePoint>,
    #[serde(rename = "final")]
    pub final_metrics: EvalReport,
    /// Kept out of the serialized result so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl RunResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| LabError::io(path, e))
    }

    /// Curves as CSV; absent statistics are empty fields.
    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header: Vec<String> =
            ["step", "train_loss", "accuracy", "L_new", "L_second", "L_rep", "gap"].map(String::from).to_vec();
        header.extend((0..=CSV_MAX_K).map(|k| format!("k{k}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.curves {
            let e = &c.eval;
            let mut rec = vec![
                c.step.to_string(),
                c.train_loss.to_string(),
                e.accuracy.to_string(),
                opt(e.l_new),
                opt(e.l_second),
                opt(e.l_rep),
                opt(e.gap),
            ];
            rec.extend((0..=CSV_MAX_K).map(|k| opt(e.loss_by_k.get(&k).copied())));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, std::io::Error::other(e))
}

/// Trains a fresh model and reports the curves.
pub fn train(model_config: &ModelConfig, task: &TaskSpec, cfg: &TrainConfig) -> Result<RunResult> {
    Ok(train_model(model_config, task, cfg)?.1)
}

/// Like [`train`] but also hands back the trained model.
pub fn train_model(model_config: &ModelConfig, task: &TaskSpec, cfg: &TrainConfig) -> Result<(ModelState, RunResult)> {
    cfg.validate()?;
    task.validate()?;
    if model_config.vocab < task.vocab_size() {
        return Err(LabError::Config(format!(
            "model vocab {} smaller than task vocab {}",
            model_config.vocab,
            task.vocab_size()
        )));
    }
    if model_config.max_seq < task.seq_len() {
        return Err(LabError::Config(format!(
            "model max_seq {} shorter than task sequences {}",
            model_config.max_seq,
            task.seq_len()
        )));
    }
    let start = Instant::now();
    let mut model = ModelState::build(model_config.clone())?;
    let mut split = Split::new(task, cfg.seed, cfg.eval_samples)?;
    let test = std::mem::take(&mut split.test);
    let mut batches = BatchSource::new(&mut split, cfg)?;
    let mut opt = AdamW::new(model.params(), cfg);
    let mut dropout_rng = (model_config.dropout > 0.0).then(|| rng_for(cfg.seed, "dropout"));

    let total = cfg.total_steps();
    let every = cfg.eval_interval();
    let initial = evaluate(&model, &test)?;
    let mut curves = vec![CurvePoint { step: 0, train_loss: initial.mean_loss, eval: initial }];
    let mut window = Vec::new();
    for step in 0..total {
        let batch = batches.next(&mut split)?;
        let diverged = |e| match e {
            LabError::NonFinite(_) => LabError::Diverged { step, loss: f64::NAN },
            other => other,
        };
        let (loss, mut grads) = loss_and_grads(&model, &batch, dropout_rng.as_mut()).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(LabError::Diverged { step, loss });
        }
        window.push(loss);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(model.params_mut(), &grads, cfg.lr_at(step));
        if model.params().iter().any(|p| p.data().iter().any(|x| !x.is_finite())) {
            return Err(LabError::Diverged { step, loss: f64::NAN });
        }
        let done = step + 1;
        if done % every == 0 || done == total {
            let eval = evaluate(&model, &test).map_err(diverged)?;
            let train_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            curves.push(CurvePoint { step: done, train_loss, eval });
        }
    }
    let final_metrics = curves.last().expect("at least one record").eval.clone();
    let param_count = model.param_count();
    let result = RunResult {
        model: model_config.clone(),
        task: task.clone(),
        train: cfg.clone(),
        seed: cfg.seed,
        param_count,
        curves,
        final_metrics,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, result))
}

/// Mean loss over the batch's supervised positions and one gradient
/// vector per parameter tensor.
pub fn loss_and_grads(
    model: &ModelState,
    batch: &[TaskSample],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (tokens, b, t, rows, targets) = flatten_batch(batch)?;
    let g = Graph::new();
    let p: Vec<_> = model.params().iter().map(|x| g.param(x)).collect();
    let logits = model.forward_graph(&g, &p, &tokens, b, t, Some(&rows), dropout_rng, None)?;
    let (loss, _) = logits.cross_entropy_logits(&targets)?;
    let value = loss.item()?;
    let grads = g.backward(loss)?;
    Ok((value, p.iter().map(|&v| grads.wrt(v)).collect()))
}

enum BatchSource {
    Stream { batch: usize },
    Epochs { data: Vec<TaskSample>, order: Vec<usize>, cursor: usize, batch: usize, rng: ChaCha8Rng },
}

impl BatchSource {
    fn new(split: &mut Split, cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.duration {
            Duration::Steps { .. } => BatchSource::Stream { batch: cfg.batch_size },
            Duration::Epochs { dataset_size, .. } => BatchSource::Epochs {
                data: split.train_batch(dataset_size)?,
                order: Vec::new(),
                cursor: 0,
                batch: cfg.batch_size,
                rng: rng_for(cfg.seed, "epoch-order"),
            },
        })
    }

    fn next(&mut self, split: &mut Split) -> Result<Vec<TaskSample>> {
        match self {
            BatchSource::Stream { batch } => split.train_batch(*batch),
            BatchSource::Epochs { data, order, cursor, batch, rng } => {
                if *cursor >= order.len() {
                    *order = (0..data.len()).collect();
                    order.shuffle(rng);
                    *cursor = 0;
                }
                let end = (*cursor + *batch).min(order.len());
                let out = order[*cursor..end].iter().map(|&i| data[i].clone()).collect();
                *cursor = end;
                Ok(out)
            }
        }
    }
}

/// Midpoint of the steepest accuracy transition. Ties go to the earliest
/// interval; slopes within a relative 1e-9 of the maximum count as ties.
pub fn detect_critical_gamma(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(LabError::Contract(format!("need ≥ 3 sweep points, got {}", points.len())));
    }
    if points.iter().any(|(g, a)| !g.is_finite() || !a.is_finite()) {
        return Err(LabError::NonFinite("critical gamma input".into()));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(LabError::Contract("gamma values must be strictly ascending".into()));
    }
    let slopes: Vec<f64> = points.windows(2).map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs()).collect();
    let max = slopes.iter().cloned().fold(0.0, f64::max);
    if max < 1e-6 {
        return Err(LabError::NoTransition { max_slope: max });
    }
    let i = slopes.iter().position(|&s| s >= max * (1.0 - 1e-9)).expect("max is attained");
    Ok(0.5 * (points[i].0 + points[i + 1].0))
}
