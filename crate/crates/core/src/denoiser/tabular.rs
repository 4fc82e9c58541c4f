//! Counting estimator of the clean-token marginals on tiny instances.
//!
//! A state is mapped to a cell by discretising each position's simplex point
//! (`floor(x_i * R)` for the first `V-1` coordinates) together with a time
//! bucket `floor(t * B)`. Each cell keeps per-position target counts.

use std::collections::HashMap;

use ndarray::Array2;

use super::{Denoiser, DenoiserOutput};
use crate::simplex::SequenceState;
use crate::{Error, Result};

pub const MAX_VOCAB: usize = 4;
pub const MAX_SEQ: usize = 2;

#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    vocab_size: usize,
    seq_len: usize,
    grid_resolution: usize,
    time_buckets: usize,
    table: HashMap<Vec<u32>, Vec<u64>>,
}

impl TabularDenoiser {
    pub fn new(vocab_size: usize, seq_len: usize, grid_resolution: usize, time_buckets: usize) -> Result<Self> {
        if !(2..=MAX_VOCAB).contains(&vocab_size) {
            return Err(Error::config("vocab_size", format!("tabular denoiser needs 2 <= V <= {MAX_VOCAB}, got {vocab_size}")));
        }
        if !(1..=MAX_SEQ).contains(&seq_len) {
            return Err(Error::config("seq_len", format!("tabular denoiser needs 1 <= S <= {MAX_SEQ}, got {seq_len}")));
        }
        if grid_resolution == 0 {
            return Err(Error::config("grid_resolution", "must be at least 1"));
        }
        if time_buckets == 0 {
            return Err(Error::config("time_buckets", "must be at least 1"));
        }
        Ok(Self {
            vocab_size,
            seq_len,
            grid_resolution,
            time_buckets,
            table: HashMap::new(),
        })
    }

    /// Fit from an iterator of `(state, targets)` samples.
    pub fn fit<I>(samples: I, vocab_size: usize, seq_len: usize, grid_resolution: usize, time_buckets: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (SequenceState, Vec<usize>)>,
    {
        let mut tab = Self::new(vocab_size, seq_len, grid_resolution, time_buckets)?;
        for (state, targets) in samples {
            tab.observe(&state, &targets)?;
        }
        Ok(tab)
    }

    pub fn observe(&mut self, state: &SequenceState, targets: &[usize]) -> Result<()> {
        if targets.len() != self.seq_len || targets.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::input(format!("targets {targets:?} invalid for S={}, V={}", self.seq_len, self.vocab_size)));
        }
        let key = self.cell(state)?;
        let (s, v) = (self.seq_len, self.vocab_size);
        let counts = self.table.entry(key).or_insert_with(|| vec![0; s * v]);
        for (k, &tok) in targets.iter().enumerate() {
            counts[k * v + tok] += 1;
        }
        Ok(())
    }

    pub fn grid_resolution(&self) -> usize {
        self.grid_resolution
    }

    pub fn time_buckets(&self) -> usize {
        self.time_buckets
    }

    pub fn visited_cells(&self) -> usize {
        self.table.len()
    }

    /// Cell key: one time bucket followed by `V-1` grid indices per position.
    pub fn cell(&self, state: &SequenceState) -> Result<Vec<u32>> {
        if state.seq_len() != self.seq_len || state.vocab_size() != self.vocab_size {
            return Err(Error::input(format!(
                "state is {}x{}, table expects {}x{}",
                state.seq_len(),
                state.vocab_size(),
                self.seq_len,
                self.vocab_size
            )));
        }
        let bucket = |x: f64, n: usize| ((x * n as f64).floor() as usize).min(n - 1) as u32;
        let mut key = Vec::with_capacity(1 + self.seq_len * (self.vocab_size - 1));
        key.push(bucket(state.t(), self.time_buckets));
        let probs = state.probs();
        for row in probs.rows() {
            for &x in row.iter().take(self.vocab_size - 1) {
                key.push(bucket(x, self.grid_resolution));
            }
        }
        Ok(key)
    }

    /// Empirical marginals for the state's cell; uniform if never visited.
    pub fn marginals(&self, state: &SequenceState) -> Result<Array2<f64>> {
        let (s, v) = (self.seq_len, self.vocab_size);
        let key = self.cell(state)?;
        let mut out = Array2::from_elem((s, v), 1.0 / v as f64);
        if let Some(counts) = self.table.get(&key) {
            for k in 0..s {
                let row = &counts[k * v..(k + 1) * v];
                let total: u64 = row.iter().sum();
                if total > 0 {
                    for j in 0..v {
                        out[[k, j]] = row[j] as f64 / total as f64;
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Denoiser for TabularDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn denoise_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
        states
            .iter()
            .map(|s| DenoiserOutput::new(self.marginals(s)?.mapv(f64::ln)))
            .collect()
    }
}
