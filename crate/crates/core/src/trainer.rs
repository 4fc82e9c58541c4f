//! Training loop for the denoiser.
//!
//! Each step samples windows from the corpus, draws one `t ~ U[0,1)` per
//! sequence and Dirichlet noise per position, builds `x_t` on the KL
//! geodesic, and takes an Adam step on the mean cross-entropy of the clean
//! tokens. Gradients are reduced over fixed chunks in a fixed order, so a run
//! is fully determined by `(seed, configs, corpus)` regardless of the thread
//! count.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::denoiser::transformer::{loss_and_grad, Example};
use crate::denoiser::{save_checkpoint, CheckpointMetadata, Params, Scalar, TransformerConfig};
use crate::rng::{self, Rng};
use crate::simplex::{sample_dirichlet_logits, SequenceState, SmoothingConfig, DEFAULT_BETA};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TDistribution {
    #[default]
    Uniform,
    /// With probability `weight` uniform on `[low, high)`, otherwise
    /// uniform on `[0, 1)`. Any `weight < 1` keeps full support, so the
    /// per-`t` minimiser is unchanged; only the effort spent at each `t` moves.
    Focused { low: f64, high: f64, weight: f64 },
}

impl TDistribution {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            Self::Uniform => rng.random(),
            Self::Focused { low, high, weight } => {
                let focus = rng.random::<f64>() < weight;
                let u: f64 = rng.random();
                if focus {
                    low + (high - low) * u
                } else {
                    u
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Uniform => Ok(()),
            Self::Focused { low, high, weight } if (0.0..1.0).contains(&low) && low < high && high <= 1.0 && (0.0..=1.0).contains(&weight) => Ok(()),
            Self::Focused { .. } => Err(Error::config("t_distribution", "focused needs 0 <= low < high <= 1 and weight in [0, 1]")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_warmup_steps: usize,
    pub beta: f64,
    pub t_distribution: TDistribution,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Weight each sequence's loss by `min(1/(1-t), max_importance_weight)`.
    pub importance_weighting: bool,
    pub max_importance_weight: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Sequences per gradient chunk (the unit of parallel work).
    pub grad_chunk: usize,
    /// A batch loss above this (nats per token) counts as divergence.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            lr: 3e-4,
            lr_warmup_steps: 100,
            beta: DEFAULT_BETA,
            t_distribution: TDistribution::Uniform,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 100,
            importance_weighting: false,
            max_importance_weight: 100.0,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_chunk: 16,
            max_loss: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.t_distribution.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("beta", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.grad_chunk == 0 {
            return Err(Error::config("grad_chunk", "must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(self.max_loss > 0.0) {
            return Err(Error::config("max_loss", "must be positive"));
        }
        if !(self.max_importance_weight >= 1.0) {
            return Err(Error::config("max_importance_weight", "must be at least 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.lr_warmup_steps {
            self.lr * (step + 1) as f64 / self.lr_warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// `x_t` for clean `tokens` at a given `t`, drawing `V` exponentials per
/// position for the Dirichlet noise.
pub fn make_training_example_at(tokens: &[usize], t: f64, smoothing: &SmoothingConfig, rng: &mut Rng) -> Result<(SequenceState, Vec<usize>)> {
    let v = smoothing.vocab_size();
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if let Some(bad) = tokens.iter().find(|&&x| x >= v) {
        return Err(Error::input(format!("token {bad} out of range for V={v}")));
    }
    let (hi, lo) = (smoothing.log_high(), smoothing.log_low());
    let mut logits = Array2::zeros((tokens.len(), v));
    for (k, &tok) in tokens.iter().enumerate() {
        let l0 = sample_dirichlet_logits(v, rng)?;
        for (j, &n) in l0.as_slice().iter().enumerate() {
            let l1 = if j == tok { hi } else { lo };
            logits[[k, j]] = (1.0 - t) * n + t * l1;
        }
    }
    Ok((SequenceState::new(logits, t)?, tokens.to_vec()))
}

/// Draws `t ~ U[0,1)` first, then the noise.
pub fn make_training_example(tokens: &[usize], smoothing: &SmoothingConfig, rng: &mut Rng) -> Result<(SequenceState, Vec<usize>)> {
    let t: f64 = rng.random();
    make_training_example_at(tokens, t, smoothing, rng)
}

/// A batch of examples: `batch_size` windows chosen uniformly with replacement.
pub fn sample_batch(corpus: &CorpusStore, cfg: &TrainConfig, smoothing: &SmoothingConfig, rng: &mut Rng) -> Result<Vec<Example>> {
    (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.random_range(0..corpus.len());
            let t = cfg.t_distribution.sample(rng);
            let (state, targets) = make_training_example_at(corpus.window(idx), t, smoothing, rng)?;
            let weight = if cfg.importance_weighting {
                (1.0 / (1.0 - state.t())).min(cfg.max_importance_weight)
            } else {
                1.0
            };
            Ok(Example { state, targets, weight })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str = "step,loss,lr,wall_ms";

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainSinks {
    pub checkpoint: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    /// Copied into the checkpoint metadata.
    pub extra: std::collections::BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: Params<T>,
    pub metrics: Vec<MetricRow>,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            *p = T::of(p.f64() - update);
        }
    }
}

fn metadata(model: &TransformerConfig, cfg: &TrainConfig, step: usize, sinks: &TrainSinks) -> CheckpointMetadata {
    let mut extra = sinks.extra.clone();
    extra.insert("beta".into(), serde_json::json!(cfg.beta));
    CheckpointMetadata {
        config: model.clone(),
        step,
        seed: cfg.seed,
        extra,
    }
}

fn append_metric(path: &Path, row: &MetricRow) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{},{},{},{}", row.step, row.loss, row.lr, row.wall_ms)?;
    Ok(())
}

/// Train from freshly initialised parameters.
pub fn train<T: Scalar>(corpus: &CorpusStore, cfg: &TrainConfig, model: &TransformerConfig, sinks: &TrainSinks) -> Result<TrainOutcome<T>> {
    model.validate()?;
    let params = Params::<T>::init(model, cfg.seed)?;
    train_from(params, corpus, cfg, sinks)
}

/// Train starting from `params`.
pub fn train_from<T: Scalar>(mut params: Params<T>, corpus: &CorpusStore, cfg: &TrainConfig, sinks: &TrainSinks) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = params.config().clone();
    if corpus.is_empty() {
        return Err(Error::input("corpus has no windows"));
    }
    if corpus.vocab_size() != model.vocab_size {
        return Err(Error::config("vocab_size", format!("model has V={}, corpus has V={}", model.vocab_size, corpus.vocab_size())));
    }
    if corpus.seq_len() > model.max_seq_len {
        return Err(Error::config("max_seq_len", format!("corpus windows have length {} > {}", corpus.seq_len(), model.max_seq_len)));
    }
    let smoothing = SmoothingConfig::new(cfg.beta, model.vocab_size)?;
    if let Some(path) = &sinks.metrics_csv {
        std::fs::write(path, format!("{METRICS_HEADER}\n"))?;
    }
    // Data and parameter initialisation use separate streams.
    let mut data_rng = rng::stream(cfg.seed, 1);
    let mut adam = Adam::new(params.len());
    let mut last_good: Option<PathBuf> = None;
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let start = Instant::now();

    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg, &smoothing, &mut data_rng)?;
        let (loss, grad) = match loss_and_grad(&params, &batch, corpus.pad(), cfg.grad_chunk) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                log::error!("step {step}: {e}");
                return Err(Error::Diverged { step, last_good });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > cfg.max_loss {
            log::error!("step {step}: loss {loss}");
            return Err(Error::Diverged { step, last_good });
        }
        losses.push(loss);
        let mut grad: Vec<f64> = grad.into_iter().map(|g| g.f64()).collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = cfg.lr_at(step);
        adam.step(params.data_mut(), &grad, lr, cfg);
        if params.data().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, last_good });
        }

        let last = step + 1 == cfg.steps;
        if step % cfg.eval_every == 0 || last {
            let row = MetricRow {
                step,
                loss,
                lr,
                wall_ms: start.elapsed().as_millis(),
            };
            info!("step {step} loss {loss:.5} lr {lr:.2e}");
            if let Some(path) = &sinks.metrics_csv {
                append_metric(path, &row)?;
            }
            metrics.push(row);
        }
        if let Some(path) = &sinks.checkpoint {
            if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) || last {
                save_checkpoint(&params, &metadata(&model, cfg, step + 1, sinks), path)?;
                last_good = Some(path.clone());
            }
        }
    }
    Ok(TrainOutcome { params, metrics, losses })
}

/// Mean held-out loss of examples whose `t` is drawn uniformly from `[lo, hi)`.
pub fn held_out_loss<T: Scalar>(params: &Params<T>, corpus: &CorpusStore, beta: f64, lo: f64, hi: f64, samples: usize, seed: u64) -> Result<f64> {
    let smoothing = SmoothingConfig::new(beta, params.config().vocab_size)?;
    let mut r = rng::seeded(seed);
    let examples = (0..samples)
        .map(|i| {
            let t = lo + (hi - lo) * r.random::<f64>();
            let (state, targets) = make_training_example_at(corpus.window(i % corpus.len()), t, &smoothing, &mut r)?;
            Ok(Example { state, targets, weight: 1.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs = crate::denoiser::transformer::forward(params, &examples.iter().map(|e| e.state.clone()).collect::<Vec<_>>())?;
    let mut total = 0.0;
    for (o, e) in outputs.iter().zip(&examples) {
        total += crate::denoiser::denoising_loss(o, &e.targets, corpus.pad())?;
    }
    Ok(total / samples as f64)
}
