//! Denoisers: maps from a noisy [`SequenceState`] to per-position logits over
//! the clean tokens.
//!
//! Two implementations share the [`Denoiser`] trait: a bidirectional
//! transformer with hand-written backpropagation ([`transformer`]) and a
//! counting estimator for tiny instances ([`tabular`]).

pub mod checkpoint;
pub mod scalar;
pub mod tabular;
pub mod transformer;

use ndarray::Array2;

use crate::simplex::{log_softmax, softmax, SequenceState};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointMetadata};
pub use scalar::Scalar;
pub use tabular::TabularDenoiser;
pub use transformer::{Params, TimeConditioning, TransformerConfig, TransformerDenoiser};

/// Unnormalised log-probabilities of the clean token at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub logits1: Array2<f64>,
}

impl DenoiserOutput {
    pub fn new(logits1: Array2<f64>) -> Result<Self> {
        if logits1.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::input("denoiser logits must be finite or -inf"));
        }
        Ok(Self { logits1 })
    }

    /// Row-wise softmax: predicted marginals `p(x1^(k) | x_t)`.
    pub fn probs(&self) -> Array2<f64> {
        let mut out = self.logits1.clone();
        for mut row in out.rows_mut() {
            let p = softmax(row.as_slice().expect("standard layout"));
            row.as_slice_mut().expect("standard layout").copy_from_slice(&p);
        }
        out
    }
}

/// Anything that predicts clean-token marginals from a noisy state.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    /// Predictions for a batch of states sharing one sequence length.
    fn denoise_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>>;

    fn denoise(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        let mut out = self.denoise_batch(std::slice::from_ref(state))?;
        Ok(out.pop().expect("one output per state"))
    }
}

/// Mean over positions of `-log softmax(row)[target]`.
///
/// Positions whose target equals `ignore` (padding) are skipped; if every
/// position is skipped the loss is zero.
pub fn denoising_loss(output: &DenoiserOutput, targets: &[usize], ignore: Option<usize>) -> Result<f64> {
    check_targets(output, targets)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &target) in output.logits1.rows().into_iter().zip(targets) {
        if Some(target) == ignore {
            continue;
        }
        let logp = log_softmax(row.as_slice().expect("standard layout"));
        total -= logp[target];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Gradient of [`denoising_loss`] with respect to the output logits:
/// `(softmax(row) - onehot(target)) / count` on counted rows, zero elsewhere.
pub fn loss_logit_gradient(output: &DenoiserOutput, targets: &[usize], ignore: Option<usize>) -> Result<Array2<f64>> {
    check_targets(output, targets)?;
    let count = targets.iter().filter(|&&t| Some(t) != ignore).count().max(1) as f64;
    let mut grad = Array2::zeros(output.logits1.raw_dim());
    for ((mut g, row), &target) in grad.rows_mut().into_iter().zip(output.logits1.rows()).zip(targets) {
        if Some(target) == ignore {
            continue;
        }
        let p = softmax(row.as_slice().expect("standard layout"));
        for (j, pj) in p.into_iter().enumerate() {
            g[j] = (pj - if j == target { 1.0 } else { 0.0 }) / count;
        }
    }
    Ok(grad)
}

fn check_targets(output: &DenoiserOutput, targets: &[usize]) -> Result<()> {
    let (s, v) = output.logits1.dim();
    if targets.len() != s {
        return Err(Error::input(format!("{} targets for {s} positions", targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::input(format!("target {bad} out of range for V={v}")));
    }
    Ok(())
}
