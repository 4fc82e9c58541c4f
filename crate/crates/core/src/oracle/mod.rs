//! Ground truth on tiny instances.
//!
//! # Transition density
//!
//! Fix a clean token `j` with smoothed logits `l1`, a time `t ∈ (0,1)` and
//! draw `x0 ~ Dir(1,...,1)`. The noisy point is `l_t = (1-t) l0 + t l1` up to
//! a constant. Inverting, `x0 = softmax((l_t - t l1) / (1-t))`.
//!
//! In centred-logit coordinates the map `l0 -> l_t` is linear with
//! determinant `(1-t)^(V-1)`, and the change of variables between the first
//! `V-1` simplex coordinates and centred logits has Jacobian proportional to
//! `1 / Π x_i`. With the Dirichlet density `(V-1)!` this gives
//!
//! ```text
//! p(x_t | j) = (V-1)! (1-t)^-(V-1) Π_i x0_i / Π_i x_t,i
//! ```
//!
//! Positions are independent given the clean sequence, so the posterior over
//! clean sequences is `p1(x1) Π_k p(x_t^(k) | x1^(k))`, normalised. Only the
//! `Π x0_i` factor depends on `j`, so the posterior needs nothing else.
//! [`QuadratureGrid`] integrates the density to check the constant.

pub mod quadrature;

use std::fmt;

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserOutput, TabularDenoiser};
use crate::rng::{self, Rng};
use crate::simplex::{categorical, log_softmax, logsumexp, sample_dirichlet_logits, total_variation, SequenceState, SmoothingConfig};
use crate::trainer::make_training_example;
use crate::{Error, Result};

pub use quadrature::QuadratureGrid;

pub const MAX_VOCAB: usize = 4;
pub const MAX_SEQ: usize = 2;

/// An explicit joint law over the `V^S` clean sequences.
///
/// Sequence `(s_0, ..., s_{S-1})` has index `Σ s_k V^(S-1-k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "S")]
    pub seq_len: usize,
    pub p1: Vec<f64>,
    pub beta: f64,
}

impl fmt::Display for TinyInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V={} S={} beta={} p1={:?}", self.vocab_size, self.seq_len, self.beta, self.p1)
    }
}

impl TinyInstance {
    pub fn new(vocab_size: usize, seq_len: usize, p1: Vec<f64>, beta: f64) -> Result<Self> {
        let inst = Self {
            vocab_size,
            seq_len,
            p1,
            beta,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_VOCAB).contains(&self.vocab_size) {
            return Err(Error::config("V", format!("tiny instances need 2 <= V <= {MAX_VOCAB}")));
        }
        if !(1..=MAX_SEQ).contains(&self.seq_len) {
            return Err(Error::config("S", format!("tiny instances need 1 <= S <= {MAX_SEQ}")));
        }
        let n = self.num_sequences();
        if self.p1.len() != n {
            return Err(Error::config("p1", format!("expected {n} probabilities, got {}", self.p1.len())));
        }
        if self.p1.iter().any(|p| !p.is_finite() || *p < 0.0) || (self.p1.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("p1", "must be a probability vector"));
        }
        SmoothingConfig::new(self.beta, self.vocab_size)?;
        Ok(())
    }

    pub fn num_sequences(&self) -> usize {
        self.vocab_size.pow(self.seq_len as u32)
    }

    pub fn smoothing(&self) -> SmoothingConfig {
        SmoothingConfig::new(self.beta, self.vocab_size).expect("validated")
    }

    pub fn sequence(&self, index: usize) -> Vec<usize> {
        let mut seq = vec![0; self.seq_len];
        let mut rest = index;
        for k in (0..self.seq_len).rev() {
            seq[k] = rest % self.vocab_size;
            rest /= self.vocab_size;
        }
        seq
    }

    pub fn index(&self, seq: &[usize]) -> usize {
        seq.iter().fold(0, |acc, &s| acc * self.vocab_size + s)
    }

    /// Per-position marginals of `p1`.
    pub fn marginals(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.seq_len, self.vocab_size));
        for (i, &p) in self.p1.iter().enumerate() {
            for (k, s) in self.sequence(i).into_iter().enumerate() {
                m[[k, s]] += p;
            }
        }
        m
    }

    pub fn sample_sequence(&self, rng: &mut Rng) -> Vec<usize> {
        self.sequence(categorical(&self.p1, rng.random::<f64>()))
    }

    /// A draw of `(x_t, x1)` from the training process.
    pub fn sample_example(&self, rng: &mut Rng) -> Result<(SequenceState, Vec<usize>)> {
        let seq = self.sample_sequence(rng);
        make_training_example(&seq, &self.smoothing(), rng)
    }

    /// A draw of `x_t` at a fixed `t`.
    pub fn sample_state_at(&self, t: f64, rng: &mut Rng) -> Result<SequenceState> {
        let seq = self.sample_sequence(rng);
        let sm = self.smoothing();
        let mut logits = Array2::zeros((self.seq_len, self.vocab_size));
        for (k, &tok) in seq.iter().enumerate() {
            let l0 = sample_dirichlet_logits(self.vocab_size, rng)?;
            for j in 0..self.vocab_size {
                let l1 = if j == tok { sm.log_high() } else { sm.log_low() };
                logits[[k, j]] = (1.0 - t) * l0.as_slice()[j] + t * l1;
            }
        }
        SequenceState::new(logits, t)
    }
}

/// `Σ_i log x0_i` where `x0 = softmax((l_t - t l1_j) / (1-t))`: the part of
/// `log p(x_t | j)` that depends on `j`.
pub fn log_kernel(row: &[f64], token: usize, t: f64, smoothing: &SmoothingConfig) -> f64 {
    let scale = 1.0 / (1.0 - t);
    let shifted: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let l1 = if i == token { smoothing.log_high() } else { smoothing.log_low() };
            (l - t * l1) * scale
        })
        .collect();
    log_softmax(&shifted).iter().sum()
}

/// Normalised density of `x_t` given clean token `token`, with respect to
/// Lebesgue measure on the first `V-1` coordinates.
pub fn transition_density(x_t: &[f64], token: usize, t: f64, smoothing: &SmoothingConfig) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::domain(format!("transition density needs 0 <= t < 1, got {t}")));
    }
    if x_t.iter().any(|&x| x <= 0.0) {
        return Err(Error::domain("transition density needs an interior point"));
    }
    let v = x_t.len();
    let logs: Vec<f64> = x_t.iter().map(|x| x.ln()).collect();
    let log_fact: f64 = (1..v).map(|i| (i as f64).ln()).sum();
    let log_density = log_fact - (v - 1) as f64 * (1.0 - t).ln() + log_kernel(&logs, token, t, smoothing) - logs.iter().sum::<f64>();
    Ok(log_density.exp())
}

/// Exact clean-token marginals `p(x1^(k) | x_t)`.
///
/// `t = 0` returns the data marginals; `t = 1` returns a point mass on the
/// supported sequence whose smoothed one-hot the state matches best.
pub fn exact_posterior(inst: &TinyInstance, x_t: &SequenceState) -> Result<Array2<f64>> {
    check_state(inst, x_t)?;
    let mut out = Array2::zeros((inst.seq_len, inst.vocab_size));
    posterior_into(inst, x_t.logits(), x_t.t(), &mut out);
    Ok(out)
}

fn posterior_into(inst: &TinyInstance, logits: &Array2<f64>, t: f64, out: &mut Array2<f64>) {
    let (s, v) = (inst.seq_len, inst.vocab_size);
    if t == 0.0 {
        out.assign(&inst.marginals());
        return;
    }
    out.fill(0.0);
    if t == 1.0 {
        // Supported sequence whose smoothed one-hot best matches the state.
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &p) in inst.p1.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let score: f64 = inst.sequence(i).iter().enumerate().map(|(k, &j)| logits[[k, j]]).sum();
            if score > best.0 {
                best = (score, i);
            }
        }
        for (k, j) in inst.sequence(best.1).into_iter().enumerate() {
            out[[k, j]] = 1.0;
        }
        return;
    }
    let sm = inst.smoothing();
    let mut kernel = [[0.0f64; MAX_VOCAB]; MAX_SEQ];
    for k in 0..s {
        let row = logits.row(k);
        let row = row.as_slice().expect("standard layout");
        for (j, slot) in kernel[k].iter_mut().enumerate().take(v) {
            *slot = log_kernel(row, j, t, &sm);
        }
    }
    let n = inst.num_sequences();
    let mut logw = Vec::with_capacity(n);
    for (i, &p) in inst.p1.iter().enumerate() {
        if p == 0.0 {
            logw.push(f64::NEG_INFINITY);
            continue;
        }
        let mut lw = p.ln();
        let mut rest = i;
        for k in (0..s).rev() {
            lw += kernel[k][rest % v];
            rest /= v;
        }
        logw.push(lw);
    }
    let lse = logsumexp(&logw);
    for (i, lw) in logw.into_iter().enumerate() {
        let w = (lw - lse).exp();
        if w == 0.0 {
            continue;
        }
        let mut rest = i;
        for k in (0..s).rev() {
            out[[k, rest % v]] += w;
            rest /= v;
        }
    }
}

/// Posterior with each token's transition density normalised numerically
/// on `grid` rather than by the analytic constant.
pub fn posterior_by_quadrature(inst: &TinyInstance, x_t: &SequenceState, grid: &QuadratureGrid) -> Result<Array2<f64>> {
    check_state(inst, x_t)?;
    if grid.vocab_size() != inst.vocab_size {
        return Err(Error::input("quadrature grid and instance disagree on V"));
    }
    let t = x_t.t();
    if t == 0.0 || t == 1.0 {
        return exact_posterior(inst, x_t);
    }
    let sm = inst.smoothing();
    let v = inst.vocab_size;
    // log Z_j = log ∫ Π x0_i / Π x_i dx over the grid.
    let log_z: Vec<f64> = (0..v)
        .map(|j| {
            grid.integrate(|x| {
                let logs: Vec<f64> = x.iter().map(|p| p.ln()).collect();
                (log_kernel(&logs, j, t, &sm) - logs.iter().sum::<f64>()).exp()
            })
            .ln()
        })
        .collect();
    let (s, n) = (inst.seq_len, inst.num_sequences());
    let mut logw = vec![f64::NEG_INFINITY; n];
    for (i, lw) in logw.iter_mut().enumerate() {
        if inst.p1[i] == 0.0 {
            continue;
        }
        *lw = inst.p1[i].ln();
        for (k, &j) in inst.sequence(i).iter().enumerate() {
            let row = x_t.logits().row(k).to_vec();
            *lw += log_kernel(&row, j, t, &sm) - log_z[j];
        }
    }
    let lse = logsumexp(&logw);
    let mut out = Array2::zeros((s, v));
    for (i, lw) in logw.into_iter().enumerate() {
        for (k, j) in inst.sequence(i).into_iter().enumerate() {
            out[[k, j]] += (lw - lse).exp();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactVelocity {
    /// `E[l1 | x_t]` per position, using smoothed one-hot logits.
    pub expected_l1: Array2<f64>,
    /// `(E[l1] - l_t) / (1 - t)`.
    pub velocity: Array2<f64>,
}

pub fn exact_velocity(inst: &TinyInstance, x_t: &SequenceState) -> Result<ExactVelocity> {
    if x_t.t() >= 1.0 {
        return Err(Error::domain("velocity is undefined at t = 1"));
    }
    let post = exact_posterior(inst, x_t)?;
    let expected_l1 = expected_logits(&post, &inst.smoothing());
    let velocity = (&expected_l1 - x_t.logits()) / (1.0 - x_t.t());
    Ok(ExactVelocity { expected_l1, velocity })
}

/// `w log(1 - β + β/V) + (1 - w) log(β/V)` entrywise.
pub fn expected_logits(weights: &Array2<f64>, smoothing: &SmoothingConfig) -> Array2<f64> {
    let (hi, lo) = (smoothing.log_high(), smoothing.log_low());
    weights.mapv(|w| w * hi + (1.0 - w) * lo)
}

/// Euler integration of the exact-velocity ODE from `x0` (at `t = 0`) with
/// `N` uniform steps. The last step has factor `h / (1-t) = 1` exactly.
pub fn integrate_exact_ode(inst: &TinyInstance, x0: &SequenceState, steps: usize) -> Result<SequenceState> {
    check_state(inst, x0)?;
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    let sm = inst.smoothing();
    let mut l = x0.logits().clone();
    let mut post = Array2::zeros(l.raw_dim());
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        posterior_into(inst, &l, t, &mut post);
        let target = expected_logits(&post, &sm);
        let factor = 1.0 / (steps - i) as f64;
        l.zip_mut_with(&target, |a, &b| *a += factor * (b - *a));
    }
    SequenceState::new(l, 1.0)
}

/// Decoded-sequence distribution of `trajectories` exact-ODE runs from
/// Dirichlet starts, indexed like `p1`.
pub fn ode_decoded_distribution(inst: &TinyInstance, steps: usize, trajectories: usize, seed: u64) -> Result<Vec<f64>> {
    let counts = (0..trajectories)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut r = rng::stream(seed, i as u64);
            let rows = (0..inst.seq_len)
                .map(|_| sample_dirichlet_logits(inst.vocab_size, &mut r))
                .collect::<Result<Vec<_>>>()?;
            let end = integrate_exact_ode(inst, &SequenceState::from_rows(&rows, 0.0)?, steps)?;
            Ok(inst.index(&end.argmax_tokens()))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut dist = vec![0.0; inst.num_sequences()];
    for c in counts {
        dist[c] += 1.0 / trajectories as f64;
    }
    Ok(dist)
}

/// Evaluation points: `per_time` draws of `x_t` from the training process
/// at each of `times` midpoints `t = (i + 0.5) / times`.
pub fn proposition1_grid(inst: &TinyInstance, times: usize, per_time: usize, seed: u64) -> Result<Vec<SequenceState>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(times * per_time);
    for i in 0..times {
        let t = (i as f64 + 0.5) / times as f64;
        for _ in 0..per_time {
            out.push(inst.sample_state_at(t, &mut r)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposition1Report {
    pub points: usize,
    pub mean_tv: f64,
    pub max_tv: f64,
}

/// TV between the denoiser's marginals and `reference` at every point,
/// averaged over positions.
pub fn validate_proposition1<D, F>(denoiser: &D, points: &[SequenceState], reference: F) -> Result<Proposition1Report>
where
    D: Denoiser + ?Sized,
    F: Fn(&SequenceState) -> Result<Array2<f64>>,
{
    if points.is_empty() {
        return Err(Error::input("no evaluation points"));
    }
    let mut tvs = Vec::with_capacity(points.len());
    for p in points {
        let model = denoiser.denoise(p)?.probs();
        let exact = reference(p)?;
        let tv: f64 = model
            .rows()
            .into_iter()
            .zip(exact.rows())
            .map(|(a, b)| total_variation(a.as_slice().expect("layout"), &b.to_vec()))
            .sum::<f64>()
            / p.seq_len() as f64;
        tvs.push(tv);
    }
    Ok(Proposition1Report {
        points: tvs.len(),
        mean_tv: tvs.iter().sum::<f64>() / tvs.len() as f64,
        max_tv: tvs.iter().copied().fold(0.0, f64::max),
    })
}

/// Denoiser that returns the exact posterior.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    pub instance: TinyInstance,
}

impl Denoiser for ExactDenoiser {
    fn vocab_size(&self) -> usize {
        self.instance.vocab_size
    }

    fn denoise_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
        states
            .iter()
            .map(|s| DenoiserOutput::new(exact_posterior(&self.instance, s)?.mapv(f64::ln)))
            .collect()
    }
}

/// Settings for the end-to-end oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleCheckConfig {
    pub instance: TinyInstance,
    pub samples: usize,
    pub grid_resolution: usize,
    pub time_buckets: usize,
    pub resolution: usize,
    pub eval_times: usize,
    pub eval_per_time: usize,
    pub ode_steps: usize,
    pub ode_trajectories: usize,
    pub seed: u64,
    pub max_mean_tv: f64,
    pub max_max_tv: f64,
    pub max_ode_tv: f64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            instance: TinyInstance {
                vocab_size: 3,
                seq_len: 1,
                p1: vec![0.5, 0.3, 0.2],
                beta: crate::simplex::DEFAULT_BETA,
            },
            samples: 1_000_000,
            grid_resolution: 20,
            time_buckets: 10,
            resolution: 200,
            eval_times: 10,
            eval_per_time: 20,
            ode_steps: 256,
            ode_trajectories: 100_000,
            seed: 0,
            max_mean_tv: 0.05,
            max_max_tv: 0.15,
            max_ode_tv: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instance: TinyInstance,
    pub resolution: usize,
    pub mean_tv: f64,
    pub max_tv: f64,
    pub ode_tv: f64,
    pub pass: bool,
}

/// Fit a tabular denoiser on samples from the instance, compare it with the
/// quadrature posterior, and run the exact ODE.
pub fn fit_tabular(inst: &TinyInstance, samples: usize, grid_resolution: usize, time_buckets: usize, seed: u64) -> Result<TabularDenoiser> {
    let mut tab = TabularDenoiser::new(inst.vocab_size, inst.seq_len, grid_resolution, time_buckets)?;
    let mut r = rng::seeded(seed);
    for _ in 0..samples {
        let (state, targets) = inst.sample_example(&mut r)?;
        tab.observe(&state, &targets)?;
    }
    Ok(tab)
}

pub fn oracle_check(cfg: &OracleCheckConfig) -> Result<OracleReport> {
    let inst = &cfg.instance;
    inst.validate()?;
    let tab = fit_tabular(inst, cfg.samples, cfg.grid_resolution, cfg.time_buckets, cfg.seed)?;
    let points = proposition1_grid(inst, cfg.eval_times, cfg.eval_per_time, cfg.seed.wrapping_add(1))?;
    let prop1 = if inst.vocab_size <= 3 {
        let grid = QuadratureGrid::new(inst.vocab_size, cfg.resolution)?;
        validate_proposition1(&tab, &points, |s| posterior_by_quadrature(inst, s, &grid))?
    } else {
        validate_proposition1(&tab, &points, |s| exact_posterior(inst, s))?
    };
    let decoded = ode_decoded_distribution(inst, cfg.ode_steps, cfg.ode_trajectories, cfg.seed.wrapping_add(2))?;
    let ode_tv = total_variation(&decoded, &inst.p1);
    Ok(OracleReport {
        instance: inst.clone(),
        resolution: cfg.resolution,
        mean_tv: prop1.mean_tv,
        max_tv: prop1.max_tv,
        ode_tv,
        pass: prop1.mean_tv <= cfg.max_mean_tv && prop1.max_tv <= cfg.max_max_tv && ode_tv <= cfg.max_ode_tv,
    })
}

fn check_state(inst: &TinyInstance, x_t: &SequenceState) -> Result<()> {
    if x_t.seq_len() != inst.seq_len || x_t.vocab_size() != inst.vocab_size {
        return Err(Error::input(format!(
            "state is {}x{}, instance is {}x{}",
            x_t.seq_len(),
            x_t.vocab_size(),
            inst.seq_len,
            inst.vocab_size
        )));
    }
    Ok(())
}
