//! Corpus-level metrics for generated text.
//!
//! Entropy is the Shannon entropy (nats) of the pooled unigram frequencies.
//! Perplexity is measured under an order-2 add-one Markov model fit on real
//! data. Distribution distances are total variation between empirical n-gram
//! frequencies, counted within windows and ignoring padding.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entropy_nats: f64,
    pub ref_perplexity: f64,
    pub unigram_tv: f64,
    pub bigram_tv: f64,
    pub num_sequences: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "num_sequences,entropy_nats,ref_perplexity,unigram_tv,bigram_tv";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.num_sequences, self.entropy_nats, self.ref_perplexity, self.unigram_tv, self.bigram_tv
        )
    }

    /// Append one row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", Self::CSV_HEADER)?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Full report of `generated` against `real`, with `reference` fit on real data.
pub fn evaluate(generated: &CorpusStore, real: &CorpusStore, reference: &ReferenceModel) -> Result<EvalReport> {
    Ok(EvalReport {
        entropy_nats: unigram_entropy(generated)?,
        ref_perplexity: reference_perplexity(generated, reference)?,
        unigram_tv: distribution_tv(generated, real, 1)?,
        bigram_tv: distribution_tv(generated, real, 2)?,
        num_sequences: generated.len(),
    })
}

pub fn unigram_entropy(corpus: &CorpusStore) -> Result<f64> {
    let dist = ngram_distribution(corpus, 1)?;
    Ok(-dist.values().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Empirical distribution of n-grams (`order` 1 or 2) inside windows.
pub fn ngram_distribution(corpus: &CorpusStore, order: usize) -> Result<HashMap<Vec<usize>, f64>> {
    if !(1..=2).contains(&order) {
        return Err(Error::input(format!("n-gram order must be 1 or 2, got {order}")));
    }
    let mut counts: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut total = 0.0;
    for w in corpus.windows() {
        for gram in w.windows(order) {
            if gram.iter().any(|&t| Some(t) == corpus.pad()) {
                continue;
            }
            *counts.entry(gram.to_vec()).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::input(format!("corpus has no {order}-grams")));
    }
    counts.values_mut().for_each(|c| *c /= total);
    Ok(counts)
}

pub fn tv_between(p: &HashMap<Vec<usize>, f64>, q: &HashMap<Vec<usize>, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, a) in p {
        sum += (a - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, b) in q {
        if !p.contains_key(k) {
            sum += b;
        }
    }
    (0.5 * sum).min(1.0)
}

pub fn distribution_tv(generated: &CorpusStore, real: &CorpusStore, order: usize) -> Result<f64> {
    Ok(tv_between(&ngram_distribution(generated, order)?, &ngram_distribution(real, order)?))
}

/// TV between the empirical bigrams of `generated` and an exact pair law
/// given as a flat `V*V` array indexed `a * V + b`.
pub fn bigram_tv_to(generated: &CorpusStore, pairs: &[f64]) -> Result<f64> {
    let v = generated.vocab_size();
    if pairs.len() != v * v {
        return Err(Error::input(format!("pair law has {} entries, expected {}", pairs.len(), v * v)));
    }
    let exact = pairs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (vec![i / v, i % v], p))
        .collect();
    Ok(tv_between(&ngram_distribution(generated, 2)?, &exact))
}

/// Order-2 Markov model with add-one smoothing at every order. The first
/// token of a window is scored by the unigram model and the second by the
/// bigram model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    vocab_size: usize,
    unigram: Vec<f64>,
    bigram: Vec<f64>,
    trigram: Vec<f64>,
}

impl ReferenceModel {
    pub fn fit(corpus: &CorpusStore) -> Result<Self> {
        let v = corpus.vocab_size();
        let mut uni = vec![0.0; v];
        let mut bi = vec![0.0; v * v];
        let mut tri = vec![0.0; v * v * v];
        for w in corpus.windows() {
            let w: Vec<usize> = w.iter().copied().filter(|&t| Some(t) != corpus.pad()).collect();
            if let Some(&a) = w.first() {
                uni[a] += 1.0;
            }
            for p in w.windows(2) {
                bi[p[0] * v + p[1]] += 1.0;
            }
            for p in w.windows(3) {
                tri[(p[0] * v + p[1]) * v + p[2]] += 1.0;
            }
        }
        let normalize = |counts: &mut [f64]| {
            for row in counts.chunks_mut(v) {
                let total: f64 = row.iter().sum::<f64>() + v as f64;
                row.iter_mut().for_each(|c| *c = ((*c + 1.0) / total).ln());
            }
        };
        normalize(&mut uni);
        normalize(&mut bi);
        normalize(&mut tri);
        Ok(Self {
            vocab_size: v,
            unigram: uni,
            bigram: bi,
            trigram: tri,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `log P(c | a, b)`.
    pub fn log_prob(&self, a: usize, b: usize, c: usize) -> f64 {
        let v = self.vocab_size;
        self.trigram[(a * v + b) * v + c]
    }

    /// Total log-likelihood and token count of one sequence.
    pub fn score(&self, seq: &[usize]) -> (f64, usize) {
        let v = self.vocab_size;
        let mut ll = 0.0;
        for (i, &tok) in seq.iter().enumerate() {
            ll += match i {
                0 => self.unigram[tok],
                1 => self.bigram[seq[0] * v + tok],
                _ => self.log_prob(seq[i - 2], seq[i - 1], tok),
            };
        }
        (ll, seq.len())
    }
}

/// `exp` of the mean per-token negative log-likelihood under `reference`.
pub fn reference_perplexity(generated: &CorpusStore, reference: &ReferenceModel) -> Result<f64> {
    if generated.vocab_size() != reference.vocab_size() {
        return Err(Error::input("generated corpus and reference model disagree on V"));
    }
    let (mut ll, mut n) = (0.0, 0usize);
    for w in generated.windows() {
        let w: Vec<usize> = w.iter().copied().filter(|&t| Some(t) != generated.pad()).collect();
        let (l, c) = reference.score(&w);
        ll += l;
        n += c;
    }
    if n == 0 {
        return Err(Error::input("no tokens to score"));
    }
    Ok((-ll / n as f64).exp())
}
