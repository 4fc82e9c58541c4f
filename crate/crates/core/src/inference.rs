//! Generation by integrating the learned flow.
//!
//! All schemes start from `x0 ~ Dir(1,...,1)` per position and walk the
//! uniform grid `t_i = i h`, `i = 0..N-1`:
//!
//! * **basic**: `l <- l + h/(1-t) (l̄1 - l)` with the smoothed mean logit
//!   `l̄1 = w log(1-β+β/V) + (1-w) log(β/V)` and `w` the predicted marginals;
//! * **semi-sampling**: as basic, with `l̄1` replaced by the smoothed one-hot
//!   logits of a token sampled from the prediction;
//! * **sampling**: sample clean tokens and fresh noise, then jump to
//!   `l_{t+h} = (1-t-h) log x0 + (t+h) log x1`;
//! * **hybrid**: basic while `t < t*`, sampling afterwards.
//!
//! Sampled tokens come from the top-k truncated, renormalised prediction.
//! Per step, each trajectory consumes one uniform per position (in position
//! order) when it samples tokens, then `V` exponentials per position when it
//! draws fresh noise. Trajectory `i` uses RNG stream `i` of `seed`, so
//! results do not depend on how trajectories are batched.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::rng::{self, Rng};
use crate::simplex::{argmax, sample_dirichlet_logits, SequenceState, SmoothingConfig, DEFAULT_BETA};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Basic,
    SemiSampling,
    Sampling,
    Hybrid,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Self::Basic),
            "semi_sampling" | "semi-sampling" => Ok(Self::SemiSampling),
            "sampling" => Ok(Self::Sampling),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::config("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Basic => "basic",
            Self::SemiSampling => "semi_sampling",
            Self::Sampling => "sampling",
            Self::Hybrid => "hybrid",
        }
    }
}

/// Denominator of the uniform smoothing mass in the mean-logit formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingDenominator {
    /// `β / V`, matching the smoothing of the training targets.
    #[default]
    Vocab,
    /// `β / N`, with `N` the number of steps.
    Steps,
}

pub const DEFAULT_T_STAR: f64 = 0.28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub scheme: Scheme,
    pub steps: usize,
    /// Defaults to `1 / steps`.
    pub step_size: Option<f64>,
    pub beta: f64,
    pub top_k: usize,
    pub t_star: f64,
    pub seed: u64,
    pub seq_len: usize,
    pub smoothing_denominator: SmoothingDenominator,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Sampling,
            steps: 32,
            step_size: None,
            beta: DEFAULT_BETA,
            top_k: 1,
            t_star: DEFAULT_T_STAR,
            seed: 0,
            seq_len: 16,
            smoothing_denominator: SmoothingDenominator::Vocab,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if let Some(h) = self.step_size {
            if !(h > 0.0) || h * self.steps as f64 > 1.0 + 1e-12 {
                return Err(Error::config("step_size", format!("need 0 < h and h*N <= 1, got h={h}, N={}", self.steps)));
            }
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::config("top_k", format!("need 1 <= k <= V={vocab_size}, got {}", self.top_k)));
        }
        // t* > 1 is allowed and simply never switches.
        if self.t_star.is_nan() || self.t_star < 0.0 {
            return Err(Error::config("t_star", "must be >= 0"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be at least 1"));
        }
        SmoothingConfig::new(self.beta, vocab_size.max(2))?;
        Ok(())
    }

    /// Grid time of step `i`.
    pub fn time(&self, i: usize) -> f64 {
        match self.step_size {
            None => i as f64 / self.steps as f64,
            Some(h) => i as f64 * h,
        }
    }

    /// `h / (1 - t_i)`; exactly `1 / (N - i)` on the default grid.
    pub fn basic_factor(&self, i: usize) -> f64 {
        match self.step_size {
            None => 1.0 / (self.steps - i) as f64,
            Some(h) => h / (1.0 - i as f64 * h),
        }
    }

    fn uses_sampling_step(&self, i: usize) -> bool {
        match self.scheme {
            Scheme::Basic | Scheme::SemiSampling => false,
            Scheme::Sampling => true,
            Scheme::Hybrid => self.time(i) >= self.t_star,
        }
    }

    fn mean_logit_values(&self, vocab_size: usize) -> (f64, f64) {
        let denom = match self.smoothing_denominator {
            SmoothingDenominator::Vocab => vocab_size as f64,
            SmoothingDenominator::Steps => self.steps as f64,
        };
        let low = self.beta / denom;
        ((1.0 - self.beta + low).ln(), low.ln())
    }
}

/// Positions held at fixed tokens during generation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampMask {
    pub fixed: BTreeMap<usize, usize>,
}

impl ClampMask {
    pub fn new(fixed: BTreeMap<usize, usize>) -> Self {
        Self { fixed }
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn validate(&self, seq_len: usize, vocab_size: usize) -> Result<()> {
        for (&pos, &tok) in &self.fixed {
            if pos >= seq_len {
                return Err(Error::input(format!("clamp position {pos} out of range for S={seq_len}")));
            }
            if tok >= vocab_size {
                return Err(Error::input(format!("clamp token {tok} out of range for V={vocab_size}")));
            }
        }
        Ok(())
    }

    /// Parse `pos:tok,pos:tok,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut fixed = BTreeMap::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (p, t) = part.split_once(':').ok_or_else(|| Error::input(format!("bad clamp entry `{part}`")))?;
            let p: usize = p.trim().parse().map_err(|_| Error::input(format!("bad clamp position `{p}`")))?;
            let t: usize = t.trim().parse().map_err(|_| Error::input(format!("bad clamp token `{t}`")))?;
            fixed.insert(p, t);
        }
        Ok(Self { fixed })
    }
}

/// Overwrite clamped rows with smoothed one-hot logits.
pub fn apply_clamp(logits: &mut Array2<f64>, mask: &ClampMask, smoothing: &SmoothingConfig) {
    let (hi, lo) = (smoothing.log_high(), smoothing.log_low());
    for (&pos, &tok) in &mask.fixed {
        let mut row = logits.row_mut(pos);
        row.fill(lo);
        row[tok] = hi;
    }
}

/// Index drawn from the `k` most probable entries (ties to the lower index),
/// renormalised, using the single uniform `u`.
pub fn sample_top_k(probs: &[f64], k: usize, u: f64) -> usize {
    let k = k.clamp(1, probs.len());
    if k == 1 {
        return argmax(ndarray::ArrayView1::from(probs));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if k < probs.len() {
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    let weights: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
    order[crate::simplex::categorical(&weights, u)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(t, state)` pairs, starting at `t = 0`. Only the first and last are
    /// kept unless intermediate recording was requested.
    pub states: Vec<(f64, SequenceState)>,
    /// Per-position argmax of the final state.
    pub tokens: Vec<usize>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SequenceState {
        &self.states.last().expect("non-empty trajectory").1
    }

    /// CSV rows `step,t,position,argmax_token,argmax_prob` followed by a
    /// `# decoded: ...` line.
    pub fn write_csv<W: Write>(&self, mut w: W, decoded: &str) -> Result<()> {
        writeln!(w, "step,t,position,argmax_token,argmax_prob")?;
        for (step, (t, state)) in self.states.iter().enumerate() {
            let probs = state.probs();
            for (k, row) in probs.rows().into_iter().enumerate() {
                let j = argmax(row);
                writeln!(w, "{step},{t},{k},{j},{}", row[j])?;
            }
        }
        writeln!(w, "# decoded: {decoded}")?;
        Ok(())
    }
}

struct Walker {
    rng: Rng,
    logits: Array2<f64>,
    states: Vec<(f64, SequenceState)>,
}

/// Trajectories per lockstep batch.
const BLOCK: usize = 256;

/// Run `count` trajectories of `cfg.scheme`. Trajectory `i` is seeded by
/// stream `first_index + i`.
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &InferenceConfig,
    clamp: &ClampMask,
    count: usize,
    record: bool,
) -> Result<Vec<Trajectory>> {
    generate_from(model, cfg, clamp, 0, count, record)
}

pub fn generate_from<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &InferenceConfig,
    clamp: &ClampMask,
    first_index: u64,
    count: usize,
    record: bool,
) -> Result<Vec<Trajectory>> {
    let v = model.vocab_size();
    cfg.validate(v)?;
    clamp.validate(cfg.seq_len, v)?;
    let smoothing = SmoothingConfig::new(cfg.beta, v)?;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + BLOCK).min(count);
        let ids: Vec<u64> = (start..end).map(|i| first_index + i as u64).collect();
        out.extend(run_block(model, cfg, clamp, &smoothing, &ids, record)?);
        start = end;
    }
    Ok(out)
}

fn initial_logits(seq_len: usize, v: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    let mut l = Array2::zeros((seq_len, v));
    for mut row in l.rows_mut() {
        let noise = sample_dirichlet_logits(v, rng)?;
        row.iter_mut().zip(noise.as_slice()).for_each(|(a, b)| *a = *b);
    }
    Ok(l)
}

fn run_block<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &InferenceConfig,
    clamp: &ClampMask,
    smoothing: &SmoothingConfig,
    ids: &[u64],
    record: bool,
) -> Result<Vec<Trajectory>> {
    let (s, v) = (cfg.seq_len, model.vocab_size());
    let (mean_hi, mean_lo) = cfg.mean_logit_values(v);
    let mut walkers = ids
        .iter()
        .map(|&i| {
            let mut rng = rng::stream(cfg.seed, i);
            let mut logits = initial_logits(s, v, &mut rng)?;
            apply_clamp(&mut logits, clamp, smoothing);
            let state = SequenceState::new(logits, 0.0)?;
            let logits = state.logits().clone();
            Ok(Walker {
                rng,
                logits,
                states: vec![(0.0, state)],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for i in 0..cfg.steps {
        let t_next = if cfg.step_size.is_none() { (i + 1) as f64 / cfg.steps as f64 } else { cfg.time(i + 1) };
        let inputs: Vec<SequenceState> = walkers.iter().map(|w| w.states.last().expect("state").1.clone()).collect();
        let outputs = model.denoise_batch(&inputs)?;
        for (w, out) in walkers.iter_mut().zip(outputs) {
            if out.logits1.dim() != (s, v) {
                return Err(Error::input(format!("denoiser returned {:?}, expected ({s}, {v})", out.logits1.dim())));
            }
            let probs = out.probs();
            if cfg.uses_sampling_step(i) {
                let tokens: Vec<usize> = probs
                    .rows()
                    .into_iter()
                    .map(|r| sample_top_k(r.as_slice().expect("layout"), cfg.top_k, w.rng.random::<f64>()))
                    .collect();
                let (hi, lo) = (smoothing.log_high(), smoothing.log_low());
                for (k, &tok) in tokens.iter().enumerate() {
                    let noise = sample_dirichlet_logits(v, &mut w.rng)?;
                    for j in 0..v {
                        let l1 = if j == tok { hi } else { lo };
                        w.logits[[k, j]] = (1.0 - t_next) * noise.as_slice()[j] + t_next * l1;
                    }
                }
            } else {
                let target = match cfg.scheme {
                    Scheme::SemiSampling => {
                        let mut target = Array2::from_elem((s, v), smoothing.log_low());
                        for (k, r) in probs.rows().into_iter().enumerate() {
                            let tok = sample_top_k(r.as_slice().expect("layout"), cfg.top_k, w.rng.random::<f64>());
                            target[[k, tok]] = smoothing.log_high();
                        }
                        target
                    }
                    _ => probs.mapv(|p| p * mean_hi + (1.0 - p) * mean_lo),
                };
                let factor = cfg.basic_factor(i);
                w.logits.zip_mut_with(&target, |l, &b| *l += factor * (b - *l));
            }
            apply_clamp(&mut w.logits, clamp, smoothing);
            let state = SequenceState::new(w.logits.clone(), t_next.min(1.0))?;
            w.logits.assign(state.logits());
            if !record && w.states.len() > 1 {
                w.states.pop();
            }
            w.states.push((t_next, state));
        }
    }
    Ok(walkers
        .into_iter()
        .map(|w| {
            let tokens = w.states.last().expect("state").1.argmax_tokens();
            Trajectory { states: w.states, tokens }
        })
        .collect())
}

fn single<D: Denoiser + ?Sized>(model: &D, cfg: &InferenceConfig, scheme: Scheme, clamp: &ClampMask) -> Result<Trajectory> {
    if cfg.scheme != scheme {
        return Err(Error::config("scheme", format!("expected {}, got {}", scheme.as_str(), cfg.scheme.as_str())));
    }
    Ok(generate(model, cfg, clamp, 1, true)?.remove(0))
}

pub fn infer_basic<D: Denoiser + ?Sized>(model: &D, cfg: &InferenceConfig) -> Result<Trajectory> {
    single(model, cfg, Scheme::Basic, &ClampMask::default())
}

pub fn infer_semi_sampling<D: Denoiser + ?Sized>(model: &D, cfg: &InferenceConfig) -> Result<Trajectory> {
    single(model, cfg, Scheme::SemiSampling, &ClampMask::default())
}

pub fn infer_sampling<D: Denoiser + ?Sized>(model: &D, cfg: &InferenceConfig) -> Result<Trajectory> {
    single(model, cfg, Scheme::Sampling, &ClampMask::default())
}

pub fn infer_hybrid<D: Denoiser + ?Sized>(model: &D, cfg: &InferenceConfig) -> Result<Trajectory> {
    single(model, cfg, Scheme::Hybrid, &ClampMask::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserOutput;
    use crate::simplex::{smooth_onehot_logits, softmax, total_variation};

    /// Returns fixed logits for every position regardless of the state.
    struct Fixed {
        rows: Vec<Vec<f64>>,
    }

    impl Denoiser for Fixed {
        fn vocab_size(&self) -> usize {
            self.rows[0].len()
        }

        fn denoise_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
            states
                .iter()
                .map(|s| {
                    let v = self.vocab_size();
                    let mut a = Array2::zeros((s.seq_len(), v));
                    for k in 0..s.seq_len() {
                        a.row_mut(k).assign(&ndarray::ArrayView1::from(&self.rows[k % self.rows.len()][..]));
                    }
                    DenoiserOutput::new(a)
                })
                .collect()
        }
    }

    /// Mildly state-dependent model, so trajectories depend on the path.
    struct Wobbly;

    impl Denoiser for Wobbly {
        fn vocab_size(&self) -> usize {
            4
        }

        fn denoise_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
            states
                .iter()
                .map(|s| {
                    let mut a = s.probs() * 2.0;
                    a.mapv_inplace(|x| x + s.t());
                    a[[0, 1]] += 0.5;
                    DenoiserOutput::new(a)
                })
                .collect()
        }
    }

    fn cfg(scheme: Scheme, steps: usize, seq_len: usize) -> InferenceConfig {
        InferenceConfig {
            scheme,
            steps,
            seq_len,
            seed: 11,
            top_k: 4,
            ..InferenceConfig::default()
        }
    }

    fn onehot_model(tokens: &[usize], v: usize) -> Fixed {
        Fixed {
            rows: tokens
                .iter()
                .map(|&j| (0..v).map(|i| if i == j { 0.0 } else { f64::NEG_INFINITY }).collect())
                .collect(),
        }
    }

    #[test]
    fn basic_with_onehot_model_decodes_token() {
        let m = onehot_model(&[2, 0, 3], 4);
        for n in [1, 2, 32] {
            let tr = infer_basic(&m, &cfg(Scheme::Basic, n, 3)).unwrap();
            assert_eq!(tr.tokens, vec![2, 0, 3]);
            assert_eq!(tr.states.len(), n + 1);
            assert!((tr.states.last().unwrap().0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_basic_step_lands_on_mean_logit() {
        let m = Fixed { rows: vec![vec![0.3, -0.2, 1.1]] };
        let c = InferenceConfig { top_k: 1, ..cfg(Scheme::Basic, 1, 1) };
        let tr = infer_basic(&m, &c).unwrap();
        let w = softmax(&[0.3, -0.2, 1.1]);
        let sm = SmoothingConfig::new(c.beta, 3).unwrap();
        let mut expect: Vec<f64> = w.iter().map(|p| p * sm.log_high() + (1.0 - p) * sm.log_low()).collect();
        crate::simplex::canonicalize(&mut expect);
        for (a, b) in tr.final_state().logits().row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_prediction_ties_break_low() {
        let m = Fixed { rows: vec![vec![0.0; 5]] };
        let tr = infer_basic(&m, &cfg(Scheme::Basic, 4, 2)).unwrap();
        assert_eq!(tr.tokens, vec![0, 0]);
    }

    #[test]
    fn final_basic_factor_is_exactly_one() {
        for n in [1usize, 2, 32] {
            let c = cfg(Scheme::Basic, n, 1);
            assert_eq!(c.basic_factor(n - 1), 1.0);
            assert_eq!(c.time(n - 1) + 1.0 / n as f64, 1.0);
        }
    }

    #[test]
    fn semi_sampling_equals_basic_for_onehot_model() {
        let m = onehot_model(&[1, 3], 4);
        let a = generate(&m, &cfg(Scheme::Basic, 8, 2), &ClampMask::default(), 3, true).unwrap();
        let b = generate(&m, &cfg(Scheme::SemiSampling, 8, 2), &ClampMask::default(), 3, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_one_semi_sampling_is_deterministic_given_x0() {
        let c = InferenceConfig {
            top_k: 1,
            ..cfg(Scheme::SemiSampling, 6, 3)
        };
        let a = infer_semi_sampling(&Wobbly, &c).unwrap();
        let b = infer_semi_sampling(&Wobbly, &InferenceConfig { seed: c.seed, ..c.clone() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_final_step_is_smoothed_onehot() {
        let c = cfg(Scheme::Sampling, 5, 3);
        let tr = infer_sampling(&Wobbly, &c).unwrap();
        let sm = SmoothingConfig::new(c.beta, 4).unwrap();
        for (k, &tok) in tr.tokens.iter().enumerate() {
            let expect = smooth_onehot_logits(tok, &sm).unwrap();
            for (a, b) in tr.final_state().logits().row(k).iter().zip(expect.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(tr, infer_sampling(&Wobbly, &c).unwrap());
    }

    #[test]
    fn hybrid_degenerates_bitwise() {
        for n in [1, 7, 16] {
            let s = generate(&Wobbly, &cfg(Scheme::Sampling, n, 3), &ClampMask::default(), 5, true).unwrap();
            let h0 = generate(&Wobbly, &InferenceConfig { t_star: 0.0, ..cfg(Scheme::Hybrid, n, 3) }, &ClampMask::default(), 5, true).unwrap();
            assert_eq!(s, h0);
            let b = generate(&Wobbly, &cfg(Scheme::Basic, n, 3), &ClampMask::default(), 5, true).unwrap();
            let h1 = generate(&Wobbly, &InferenceConfig { t_star: 1.0, ..cfg(Scheme::Hybrid, n, 3) }, &ClampMask::default(), 5, true).unwrap();
            assert_eq!(b, h1);
        }
        assert_eq!(InferenceConfig::default().t_star, 0.28);
    }

    #[test]
    fn hybrid_switches_at_threshold() {
        let c = InferenceConfig { t_star: 0.5, ..cfg(Scheme::Hybrid, 4, 1) };
        let used: Vec<bool> = (0..4).map(|i| c.uses_sampling_step(i)).collect();
        assert_eq!(used, vec![false, false, true, true]);
    }

    #[test]
    fn top_k_full_matches_categorical() {
        let probs = softmax(&[0.2, -1.0, 1.3, 0.0, 0.5]);
        let mut r = rng::seeded(4);
        let n = 100_000;
        let mut freq = vec![0.0; 5];
        for _ in 0..n {
            freq[sample_top_k(&probs, 5, r.random())] += 1.0 / n as f64;
        }
        assert!(total_variation(&freq, &probs) < 0.01);
    }

    #[test]
    fn top_k_truncates() {
        let probs = [0.1, 0.4, 0.1, 0.4];
        assert_eq!(sample_top_k(&probs, 1, 0.99), 1);
        for u in [0.0, 0.3, 0.49, 0.51, 0.999] {
            let j = sample_top_k(&probs, 2, u);
            assert!(j == 1 || j == 3);
        }
        // Ties at the cut go to the lower index.
        assert_eq!(sample_top_k(&[0.25; 4], 2, 0.9), 1);
    }

    #[test]
    fn positions_are_sampled_independently() {
        // Product-form model: correlation between two positions' samples ~ 0.
        let m = Fixed { rows: vec![vec![0.0, 0.0]] };
        let c = InferenceConfig { top_k: 2, ..cfg(Scheme::Sampling, 1, 2) };
        let tr = generate(&m, &c, &ClampMask::default(), 100_000, false).unwrap();
        let n = tr.len() as f64;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        for t in &tr {
            let (a, b) = (t.tokens[0] as f64, t.tokens[1] as f64);
            sa += a;
            sb += b;
            sab += a * b;
        }
        let (ma, mb) = (sa / n, sb / n);
        let corr = (sab / n - ma * mb) / ((ma * (1.0 - ma)) * (mb * (1.0 - mb))).sqrt();
        assert!(corr.abs() < 0.01, "{corr}");
    }

    #[test]
    fn clamping() {
        let c = cfg(Scheme::Sampling, 6, 4);
        let all = ClampMask::parse("0:3,1:2,2:1,3:0").unwrap();
        let tr = generate(&Wobbly, &c, &all, 3, true).unwrap();
        assert!(tr.iter().all(|t| t.tokens == vec![3, 2, 1, 0]));
        let part = ClampMask::parse("1:2").unwrap();
        for t in generate(&Wobbly, &c, &part, 4, true).unwrap() {
            let first = t.states[0].1.logits().row(1).to_owned();
            assert!(t.states.iter().all(|(_, s)| s.logits().row(1) == first));
        }
        let free = generate(&Wobbly, &c, &ClampMask::default(), 4, true).unwrap();
        assert_eq!(free, generate(&Wobbly, &c, &ClampMask::parse("").unwrap(), 4, true).unwrap());
        assert!(ClampMask::parse("9:0").unwrap().validate(4, 4).is_err());
        assert!(ClampMask::parse("x").is_err());
    }

    #[test]
    fn batching_does_not_change_trajectories() {
        let c = cfg(Scheme::Hybrid, 5, 3);
        let all = generate(&Wobbly, &c, &ClampMask::default(), 300, false).unwrap();
        let tail = generate_from(&Wobbly, &c, &ClampMask::default(), 290, 10, false).unwrap();
        assert_eq!(&all[290..], &tail[..]);
    }

    #[test]
    fn states_stay_on_simplex() {
        for scheme in [Scheme::Basic, Scheme::SemiSampling, Scheme::Sampling, Scheme::Hybrid] {
            for t in generate(&Wobbly, &cfg(scheme, 9, 3), &ClampMask::default(), 3, true).unwrap() {
                let ts: Vec<f64> = t.states.iter().map(|s| s.0).collect();
                assert!(ts.windows(2).all(|w| w[0] < w[1]) && ts[0] == 0.0);
                for (_, s) in &t.states {
                    for row in s.probs().rows() {
                        assert!((row.sum() - 1.0).abs() < 1e-9 && row.iter().all(|&p| p > 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(Scheme::Basic, 0, 3).validate(4).is_err());
        assert!(InferenceConfig { top_k: 5, ..cfg(Scheme::Basic, 3, 3) }.validate(4).is_err());
        assert!(InferenceConfig { step_size: Some(0.5), ..cfg(Scheme::Basic, 3, 3) }.validate(4).is_err());
        InferenceConfig { step_size: Some(0.25), ..cfg(Scheme::Basic, 4, 3) }.validate(4).unwrap();
        assert!(matches!("nope".parse::<Scheme>(), Err(Error::Config { .. })));
        assert!(infer_basic(&Wobbly, &cfg(Scheme::Sampling, 3, 3)).is_err());
    }

    #[test]
    fn literal_smoothing_denominator() {
        let c = InferenceConfig {
            smoothing_denominator: SmoothingDenominator::Steps,
            ..cfg(Scheme::Basic, 10, 1)
        };
        let (hi, lo) = c.mean_logit_values(4);
        assert_eq!(lo, (0.01f64 / 10.0).ln());
        assert_eq!(hi, (1.0 - 0.01 + 0.001f64).ln());
    }

    #[test]
    fn trajectory_csv() {
        let tr = infer_basic(&Wobbly, &cfg(Scheme::Basic, 2, 2)).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, "ab").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2 + 1);
        assert!(text.ends_with("# decoded: ab\n"));
    }
}
