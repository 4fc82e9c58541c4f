//! Geometry of the probability simplex under the KL geodesic.
//!
//! A point `x` on the simplex is a categorical distribution over `V` tokens.
//! Its logits `l = log x` are defined up to an additive constant; the KL
//! geodesic between `x0` and `x1`
//!
//! ```text
//! x_t = C * x0^(1-t) * x1^t  =  softmax((1-t) l0 + t l1)
//! ```
//!
//! is therefore a straight line in logit space, and the logit velocity
//! `d l_t / dt = l1 - l0` is constant along it.
//!
//! All math here runs in `f64` and keeps values in logit space; simplex
//! points are only materialised at the edges (sampling, metrics). Taking a
//! logarithm of an entry at or below [`MIN_INTERIOR`] is a hard error rather
//! than a silent clamp: it means an unsmoothed one-hot reached a log.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::{Error, Result};

/// Smallest probability that may be passed to a logarithm.
pub const MIN_INTERIOR: f64 = 1e-300;

/// Tolerance on `sum(probs) == 1`.
pub const SUM_TOL: f64 = 1e-9;

/// Default label-smoothing coefficient.
pub const DEFAULT_BETA: f64 = 0.01;

/// A categorical distribution over `V` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

/// Log-probabilities, defined modulo an additive constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl SimplexPoint {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::input("simplex point needs at least 2 entries"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::input("simplex entries must be finite and >= 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::input(format!("simplex entries sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&p| p > MIN_INTERIOR)
    }

    /// Exact log-probabilities. Fails on any entry at or below [`MIN_INTERIOR`].
    pub fn logits(&self) -> Result<LogitVector> {
        Ok(LogitVector(checked_log(&self.0)?))
    }
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Self {
        Self(logits)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Shifted so that `exp` of the entries sums to one.
    pub fn canonical(&self) -> Self {
        let mut v = self.0.clone();
        canonicalize(&mut v);
        Self(v)
    }

    pub fn to_simplex(&self) -> SimplexPoint {
        SimplexPoint(softmax(&self.0))
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self(self.0.iter().map(|l| l + c).collect())
    }
}

/// Label-smoothing parameters: `x1 = (1 - beta) * onehot + beta / V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    beta: f64,
    vocab_size: usize,
}

impl SmoothingConfig {
    pub fn new(beta: f64, vocab_size: usize) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config("beta", format!("must lie in (0,1), got {beta}")));
        }
        if vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        Ok(Self { beta, vocab_size })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Probability mass on the smoothed token.
    pub fn high(&self) -> f64 {
        1.0 - self.beta + self.beta / self.vocab_size as f64
    }

    /// Probability mass on every other token.
    pub fn low(&self) -> f64 {
        self.beta / self.vocab_size as f64
    }

    pub fn log_high(&self) -> f64 {
        self.high().ln()
    }

    pub fn log_low(&self) -> f64 {
        self.low().ln()
    }
}

/// Smoothed one-hot `(1 - beta) δ_token + (beta / V) 1`.
pub fn smooth_onehot(token: usize, cfg: &SmoothingConfig) -> Result<SimplexPoint> {
    check_token(token, cfg.vocab_size)?;
    let mut probs = vec![cfg.low(); cfg.vocab_size];
    probs[token] = cfg.high();
    Ok(SimplexPoint(probs))
}

/// Logits of [`smooth_onehot`]; already canonical since the point sums to one.
pub fn smooth_onehot_logits(token: usize, cfg: &SmoothingConfig) -> Result<LogitVector> {
    check_token(token, cfg.vocab_size)?;
    let mut logits = vec![cfg.log_low(); cfg.vocab_size];
    logits[token] = cfg.log_high();
    Ok(LogitVector(logits))
}

/// A draw from Dirichlet(1, ..., 1), the uniform distribution on the simplex.
pub fn sample_dirichlet_uniform<R: Rng + ?Sized>(vocab_size: usize, rng: &mut R) -> Result<SimplexPoint> {
    Ok(sample_dirichlet_logits(vocab_size, rng)?.to_simplex())
}

/// Canonical logits of a Dirichlet(1, ..., 1) draw.
///
/// Uses normalised unit exponentials; the logs are taken on the exponentials
/// directly so that tiny coordinates keep full relative precision.
/// Consumes exactly `vocab_size` exponential draws.
pub fn sample_dirichlet_logits<R: Rng + ?Sized>(vocab_size: usize, rng: &mut R) -> Result<LogitVector> {
    if vocab_size < 2 {
        return Err(Error::input("Dirichlet sample needs V >= 2"));
    }
    let draws: Vec<f64> = (0..vocab_size).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let logs = checked_log(&draws)?;
    let log_total = total.ln();
    Ok(LogitVector(logs.into_iter().map(|l| l - log_total).collect()))
}

/// Point at time `t` on the KL geodesic from `x0` to `x1`.
pub fn kl_geodesic(x0: &SimplexPoint, x1: &SimplexPoint, t: f64) -> Result<SimplexPoint> {
    check_time(t)?;
    check_same_dim(x0.dim(), x1.dim())?;
    let l0 = x0.logits()?;
    let l1 = x1.logits()?;
    Ok(logit_interp(&l0, &l1, t)?.to_simplex())
}

/// `(1 - t) l0 + t l1`, componentwise and without canonicalisation.
pub fn logit_interp(l0: &LogitVector, l1: &LogitVector, t: f64) -> Result<LogitVector> {
    check_time(t)?;
    check_same_dim(l0.dim(), l1.dim())?;
    Ok(LogitVector(
        l0.0.iter().zip(&l1.0).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
    ))
}

/// Tangent of the geodesic on the simplex at `x_t`:
/// `(diag(x_t) - x_t x_tᵀ)(l1 - l0)`.
///
/// This is the derivative of `softmax` applied to the constant logit
/// velocity, so it sums to zero.
pub fn path_velocity_simplex(x_t: &SimplexPoint, l0: &LogitVector, l1: &LogitVector) -> Result<Vec<f64>> {
    if !x_t.is_interior() {
        return Err(Error::domain("path velocity needs an interior point"));
    }
    check_same_dim(x_t.dim(), l0.dim())?;
    check_same_dim(l0.dim(), l1.dim())?;
    let diff: Vec<f64> = l1.0.iter().zip(&l0.0).map(|(b, a)| b - a).collect();
    let mean: f64 = x_t.0.iter().zip(&diff).map(|(x, d)| x * d).sum();
    Ok(x_t.0.iter().zip(&diff).map(|(x, d)| x * (d - mean)).collect())
}

/// `l1 - l0`, the constant logit velocity of the geodesic.
pub fn logit_velocity(l0: &LogitVector, l1: &LogitVector) -> Result<LogitVector> {
    check_same_dim(l0.dim(), l1.dim())?;
    Ok(LogitVector(l1.0.iter().zip(&l0.0).map(|(b, a)| b - a).collect()))
}

/// `S × V` logits (one simplex point per position) plus the flow time.
///
/// Rows are kept canonical: each row's `exp` sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    logits: Array2<f64>,
    t: f64,
}

impl SequenceState {
    pub fn new(mut logits: Array2<f64>, t: f64) -> Result<Self> {
        check_time(t)?;
        if logits.ncols() < 2 || logits.nrows() == 0 {
            return Err(Error::input(format!("state shape {:?} is degenerate", logits.dim())));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::input("state logits must be finite"));
        }
        for mut row in logits.rows_mut() {
            canonicalize(row.as_slice_mut().expect("standard layout"));
        }
        Ok(Self { logits, t })
    }

    pub fn from_rows(rows: &[LogitVector], t: f64) -> Result<Self> {
        let v = rows.first().map(|r| r.dim()).unwrap_or(0);
        if rows.iter().any(|r| r.dim() != v) {
            return Err(Error::input("rows have different vocabulary sizes"));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        let logits = Array2::from_shape_vec((rows.len(), v), flat).map_err(|e| Error::input(e.to_string()))?;
        Self::new(logits, t)
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn seq_len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.ncols()
    }

    pub fn row(&self, k: usize) -> LogitVector {
        LogitVector(self.logits.row(k).to_vec())
    }

    /// Row-wise softmax.
    pub fn probs(&self) -> Array2<f64> {
        let mut p = self.logits.clone();
        for mut row in p.rows_mut() {
            let s = row.as_slice_mut().expect("standard layout");
            let out = softmax(s);
            s.copy_from_slice(&out);
        }
        p
    }

    /// Per-position argmax, ties broken toward the lowest token id.
    pub fn argmax_tokens(&self) -> Vec<usize> {
        self.logits.axis_iter(Axis(0)).map(|r| argmax(r)).collect()
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let lse = logsumexp(values);
    values.iter().map(|v| v - lse).collect()
}

/// Subtract the log-sum-exp in place.
pub fn canonicalize(values: &mut [f64]) {
    let lse = logsumexp(values);
    values.iter_mut().for_each(|v| *v -= lse);
}

/// Total-variation distance `0.5 * Σ|p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Inverse-CDF draw from unnormalised non-negative weights given `u ∈ [0,1)`.
/// Zero-weight entries are never returned.
pub fn categorical(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

fn checked_log(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if v > MIN_INTERIOR {
                Ok(v.ln())
            } else {
                Err(Error::domain(format!("log of non-interior entry {v:e}")))
            }
        })
        .collect()
}

fn check_token(token: usize, vocab_size: usize) -> Result<()> {
    if token >= vocab_size {
        return Err(Error::input(format!("token {token} out of range for V={vocab_size}")));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("time {t} outside [0,1]")));
    }
    Ok(())
}

fn check_same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::input(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn point(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn smooth_onehot_values() {
        let cfg = SmoothingConfig::new(0.01, 4).unwrap();
        let x = smooth_onehot(2, &cfg).unwrap();
        assert!(max_abs_diff(x.probs(), &[0.0025, 0.0025, 0.9925, 0.0025]) < 1e-15);

        let cfg = SmoothingConfig::new(0.5, 2).unwrap();
        assert_eq!(smooth_onehot(0, &cfg).unwrap().probs(), &[0.75, 0.25]);

        let cfg = SmoothingConfig::new(0.3, 2).unwrap();
        let x = smooth_onehot(0, &cfg).unwrap();
        assert!(max_abs_diff(x.probs(), &[1.0 - 0.15, 0.15]) < 1e-15);
        assert!((x.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_onehot_rejects_bad_token() {
        let cfg = SmoothingConfig::new(0.01, 4).unwrap();
        assert!(matches!(smooth_onehot(4, &cfg), Err(Error::Input(_))));
        assert!(SmoothingConfig::new(0.0, 4).is_err());
        assert!(SmoothingConfig::new(1.0, 4).is_err());
        assert!(SmoothingConfig::new(0.1, 1).is_err());
    }

    #[test]
    fn dirichlet_uniform_means() {
        let mut rng = rng::seeded(7);
        let n = 100_000;
        for v in [2usize, 3] {
            let mut mean = vec![0.0; v];
            for _ in 0..n {
                let x = sample_dirichlet_uniform(v, &mut rng).unwrap();
                assert!(x.is_interior());
                for (m, p) in mean.iter_mut().zip(x.probs()) {
                    *m += p / n as f64;
                }
            }
            for m in mean {
                assert!((m - 1.0 / v as f64).abs() < 0.01, "V={v} mean {m}");
            }
        }
    }

    #[test]
    fn dirichlet_two_marginal_is_uniform() {
        // Dirichlet(1,1) first coordinate ~ Uniform(0,1); KS against the CDF u.
        let mut rng = rng::seeded(11);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_dirichlet_uniform(2, &mut rng).unwrap().probs()[0])
            .collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn geodesic_endpoints_and_midpoint() {
        let x0 = point(&[0.5, 0.5]);
        let x1 = point(&[0.9, 0.1]);
        assert!(max_abs_diff(kl_geodesic(&x0, &x1, 0.0).unwrap().probs(), x0.probs()) < 1e-12);
        assert!(max_abs_diff(kl_geodesic(&x0, &x1, 1.0).unwrap().probs(), x1.probs()) < 1e-12);
        // sqrt(.45) / (sqrt(.45) + sqrt(.05)) = 0.75
        let mid = kl_geodesic(&x0, &x1, 0.5).unwrap();
        assert!(max_abs_diff(mid.probs(), &[0.75, 0.25]) < 1e-12);
    }

    #[test]
    fn geodesic_rejects_boundary_points() {
        let x0 = point(&[1.0, 0.0]);
        let x1 = point(&[0.5, 0.5]);
        assert!(matches!(kl_geodesic(&x0, &x1, 0.3), Err(Error::Domain(_))));
    }

    #[test]
    fn logit_interp_examples() {
        let l0 = LogitVector::new(vec![0.0, 0.0]);
        let l1 = LogitVector::new(vec![2.0, -2.0]);
        assert_eq!(logit_interp(&l0, &l1, 0.5).unwrap().as_slice(), &[1.0, -1.0]);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(logit_interp(&l0, &l0, t).unwrap(), l0);
        }
        let a = logit_interp(&l0, &l1, 0.4).unwrap().to_simplex();
        let b = logit_interp(&l0.shifted(3.0), &l1, 0.4).unwrap().to_simplex();
        assert!(max_abs_diff(a.probs(), b.probs()) < 1e-12);
    }

    #[test]
    fn logit_velocity_examples() {
        let l0 = LogitVector::new(vec![0.0, 0.0, 0.0]);
        let l1 = LogitVector::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(logit_velocity(&l0, &l1).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert!(logit_velocity(&l1, &l1).unwrap().as_slice().iter().all(|&v| v == 0.0));

        let l0 = LogitVector::new(vec![0.25, -1.0, 0.5]);
        let l1 = LogitVector::new(vec![-0.5, 2.0, 0.75]);
        let a = logit_interp(&l0, &l1, 0.7).unwrap();
        let b = logit_interp(&l0, &l1, 0.2).unwrap();
        let fd: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) / 0.5).collect();
        let v = logit_velocity(&l0, &l1).unwrap();
        assert!(max_abs_diff(&fd, v.as_slice()) < 1e-14);
    }

    #[test]
    fn path_velocity_matches_finite_difference() {
        let x0 = point(&[0.5, 0.5]);
        let x1 = point(&[0.9, 0.1]);
        let (l0, l1) = (x0.logits().unwrap(), x1.logits().unwrap());
        let t = 0.3;
        let h = 1e-6;
        let xt = kl_geodesic(&x0, &x1, t).unwrap();
        let v = path_velocity_simplex(&xt, &l0, &l1).unwrap();
        let up = kl_geodesic(&x0, &x1, t + h).unwrap();
        let dn = kl_geodesic(&x0, &x1, t - h).unwrap();
        let fd: Vec<f64> = up.probs().iter().zip(dn.probs()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(max_abs_diff(&fd, &v) < 1e-6);
        assert!(v.iter().sum::<f64>().abs() < 1e-10);

        let zero = path_velocity_simplex(&xt, &l0, &l0).unwrap();
        assert!(zero.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn sequence_state_canonicalizes_rows() {
        let logits = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = SequenceState::new(logits, 0.5).unwrap();
        for row in s.probs().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.argmax_tokens(), vec![2, 0]);
        assert!(SequenceState::new(Array2::zeros((1, 3)), 1.5).is_err());
    }

    fn interior_point(v: usize) -> impl Strategy<Value = SimplexPoint> {
        prop::collection::vec(0.01f64..10.0, v).prop_map(|w| {
            let s: f64 = w.iter().sum();
            SimplexPoint::new(w.iter().map(|x| x / s).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn shift_invariance(x0 in interior_point(4), x1 in interior_point(4), t in 0.0f64..=1.0, c in -50.0f64..50.0) {
            let l0 = x0.logits().unwrap();
            let l1 = x1.logits().unwrap();
            let a = logit_interp(&l0, &l1, t).unwrap().to_simplex();
            let b = logit_interp(&l0.shifted(c), &l1, t).unwrap().to_simplex();
            let d = logit_interp(&l0, &l1.shifted(c), t).unwrap().to_simplex();
            prop_assert!(max_abs_diff(a.probs(), b.probs()) < 1e-12);
            prop_assert!(max_abs_diff(a.probs(), d.probs()) < 1e-12);
        }

        #[test]
        fn semigroup(x0 in interior_point(3), x1 in interior_point(3), s in 0.0f64..0.99, frac in 0.0f64..=1.0) {
            let t = s + (1.0 - s) * frac;
            let xs = kl_geodesic(&x0, &x1, s).unwrap();
            let lhs = kl_geodesic(&xs, &x1, (t - s) / (1.0 - s)).unwrap();
            let rhs = kl_geodesic(&x0, &x1, t).unwrap();
            prop_assert!(max_abs_diff(lhs.probs(), rhs.probs()) < 1e-10);
        }

        #[test]
        fn geodesic_stays_on_simplex(x0 in interior_point(5), x1 in interior_point(5), t in 0.0f64..=1.0) {
            let xt = kl_geodesic(&x0, &x1, t).unwrap();
            prop_assert!((xt.probs().iter().sum::<f64>() - 1.0).abs() < SUM_TOL);
            prop_assert!(xt.is_interior());
        }
    }
}
