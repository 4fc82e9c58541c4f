//! The counting estimator against the exact posterior of a known process.

use klflow::oracle::{exact_posterior, fit_tabular, TinyInstance};
use klflow::rng;

/// Mixing weight that keeps empty-cell rows finite when scoring.
const EPS: f64 = 1e-3;

struct Score {
    achieved: f64,
    achieved_se: f64,
    entropy: f64,
    kl: f64,
}

#[test]
fn tabular_loss_is_bounded_by_posterior_entropy_and_approaches_it() {
    let inst = TinyInstance::new(2, 1, vec![0.7, 0.3], 0.01).unwrap();
    let mut r = rng::seeded(99);
    let held: Vec<_> = (0..20_000).map(|_| inst.sample_example(&mut r).unwrap()).collect();

    let mut scores = Vec::new();
    for (i, n) in [1_000usize, 10_000, 100_000, 1_000_000].into_iter().enumerate() {
        let tab = fit_tabular(&inst, n, 20, 10, 1000 + i as u64).unwrap();
        let (mut diffs, mut achieved, mut entropy, mut kl) = (Vec::new(), 0.0, 0.0, 0.0);
        for (state, targets) in &held {
            let q: Vec<f64> = tab.marginals(state).unwrap().row(0).iter().map(|&q| (1.0 - EPS) * q + EPS / 2.0).collect();
            let p = exact_posterior(&inst, state).unwrap();
            let p = p.row(0);
            let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            let ce = -q[targets[0]].ln();
            achieved += ce;
            entropy += h;
            kl += p.iter().zip(&q).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
            diffs.push(ce - h);
        }
        let m = held.len() as f64;
        let mean = diffs.iter().sum::<f64>() / m;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        scores.push(Score {
            achieved: achieved / m,
            achieved_se: (var / m).sqrt(),
            entropy: entropy / m,
            kl: kl / m,
        });
    }
    for (n, s) in [1e3, 1e4, 1e5, 1e6].iter().zip(&scores) {
        eprintln!("n={n:e}: loss {:.5} (se {:.5}), posterior entropy {:.5}, kl {:.5}", s.achieved, s.achieved_se, s.entropy, s.kl);
        assert!(s.achieved >= s.entropy - 3.0 * s.achieved_se);
        assert!(s.kl >= 0.0);
    }
    for w in scores.windows(2) {
        assert!(w[1].kl <= w[0].kl + 0.005, "gap grew: {} -> {}", w[0].kl, w[1].kl);
    }
    assert!(scores[3].kl < 0.5 * scores[0].kl);
}
