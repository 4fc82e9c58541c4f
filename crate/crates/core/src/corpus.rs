//! Tokenisation, fixed-length windows and synthetic Markov languages.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::simplex::categorical;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    Byte,
    Char,
}

/// Bijection between symbols and dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mode: VocabMode,
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
    pad: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    mode: VocabMode,
    #[serde(default)]
    token_to_id: BTreeMap<String, usize>,
    #[serde(default)]
    pad: Option<usize>,
}

impl Vocab {
    /// 256 byte values; id 0 (NUL) doubles as padding.
    pub fn byte() -> Self {
        Self {
            mode: VocabMode::Byte,
            chars: Vec::new(),
            index: BTreeMap::new(),
            pad: Some(0),
        }
    }

    /// Sorted unique code points of `text`.
    pub fn char(text: &str) -> Result<Self> {
        let set: BTreeSet<char> = text.chars().collect();
        if set.is_empty() {
            return Err(Error::input("cannot build a char vocabulary from empty text"));
        }
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    /// First `v` lowercase letters (then further code points); used for toy languages.
    pub fn alphabet(v: usize) -> Result<Self> {
        if v == 0 {
            return Err(Error::input("alphabet needs at least one symbol"));
        }
        let chars = (0..v as u32)
            .map(|i| char::from_u32('a' as u32 + i).ok_or_else(|| Error::input("alphabet too large")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_chars(chars))
    }

    pub fn build(text: &str, mode: VocabMode) -> Result<Self> {
        match mode {
            VocabMode::Byte => Ok(Self::byte()),
            VocabMode::Char => Self::char(text),
        }
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self {
            mode: VocabMode::Char,
            chars,
            index,
            pad: None,
        }
    }

    /// Reserve one extra id (the new `V - 1`) for padding. No-op in byte mode.
    pub fn with_pad(mut self) -> Self {
        if self.mode == VocabMode::Char && self.pad.is_none() {
            self.pad = Some(self.chars.len());
        }
        self
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        match self.mode {
            VocabMode::Byte => 256,
            VocabMode::Char => self.chars.len() + usize::from(self.pad.is_some()),
        }
    }

    pub fn pad(&self) -> Option<usize> {
        self.pad
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self.mode {
            VocabMode::Byte => Ok(text.bytes().map(usize::from).collect()),
            VocabMode::Char => text
                .chars()
                .map(|c| self.index.get(&c).copied().ok_or_else(|| Error::input(format!("character {c:?} not in vocabulary"))))
                .collect(),
        }
    }

    /// Inverse of [`encode`](Self::encode); padding ids are dropped and
    /// invalid UTF-8 (byte mode) is replaced.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let v = self.size();
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::input(format!("token id {bad} out of range for V={v}")));
        }
        let ids = ids.iter().copied().filter(|&i| Some(i) != self.pad);
        Ok(match self.mode {
            VocabMode::Byte => String::from_utf8_lossy(&ids.map(|i| i as u8).collect::<Vec<_>>()).into_owned(),
            VocabMode::Char => ids.map(|i| self.chars[i]).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            mode: self.mode,
            token_to_id: self.chars.iter().enumerate().map(|(i, c)| (c.to_string(), i)).collect(),
            pad: self.pad,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json).map_err(|e| Error::Format(format!("vocab: {e}")))?;
        match file.mode {
            VocabMode::Byte => Ok(Self::byte()),
            VocabMode::Char => {
                let n = file.token_to_id.len();
                let mut chars = vec![None; n];
                for (tok, id) in file.token_to_id {
                    let mut it = tok.chars();
                    let c = match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => return Err(Error::Format(format!("vocab entry {tok:?} is not a single character"))),
                    };
                    match chars.get_mut(id) {
                        Some(slot @ None) => *slot = Some(c),
                        _ => return Err(Error::Format(format!("vocab ids must be dense and unique; bad id {id}"))),
                    }
                }
                let mut vocab = Self::from_chars(chars.into_iter().map(|c| c.expect("dense ids")).collect());
                match file.pad {
                    Some(p) if p == n => vocab.pad = Some(p),
                    Some(p) => return Err(Error::Format(format!("pad id {p} must equal {n}"))),
                    None => {}
                }
                Ok(vocab)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Fixed-length training windows backed by one flat token array.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStore {
    tokens: Vec<usize>,
    seq_len: usize,
    starts: Vec<usize>,
    vocab_size: usize,
    pad: Option<usize>,
}

impl CorpusStore {
    /// Cut each document into consecutive windows of `seq_len`; a trailing
    /// remainder is padded when `pad` is set and dropped otherwise. Windows
    /// never span two documents.
    pub fn from_documents(docs: &[Vec<usize>], seq_len: usize, vocab_size: usize, pad: Option<usize>) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::config("seq_len", "must be at least 1"));
        }
        let mut tokens = Vec::new();
        let mut starts = Vec::new();
        for doc in docs {
            if let Some(bad) = doc.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::input(format!("token {bad} out of range for V={vocab_size}")));
            }
            for chunk in doc.chunks(seq_len) {
                if chunk.len() < seq_len && pad.is_none() {
                    continue;
                }
                starts.push(tokens.len());
                tokens.extend_from_slice(chunk);
                tokens.extend(std::iter::repeat_n(pad.unwrap_or(0), seq_len - chunk.len()));
            }
        }
        Ok(Self {
            tokens,
            seq_len,
            starts,
            vocab_size,
            pad,
        })
    }

    /// Split a token stream on `separator` (which is discarded), then window.
    pub fn from_tokens(
        tokens: &[usize],
        seq_len: usize,
        vocab_size: usize,
        separator: Option<usize>,
        pad: Option<usize>,
    ) -> Result<Self> {
        let docs: Vec<Vec<usize>> = match separator {
            Some(sep) => tokens.split(|&t| t == sep).filter(|d| !d.is_empty()).map(<[usize]>::to_vec).collect(),
            None => vec![tokens.to_vec()],
        };
        Self::from_documents(&docs, seq_len, vocab_size, pad)
    }

    /// Documents are lines of `text` when `line_documents` is set.
    pub fn from_text(text: &str, vocab: &Vocab, seq_len: usize, line_documents: bool) -> Result<Self> {
        let docs = if line_documents {
            text.lines().filter(|l| !l.is_empty()).map(|l| vocab.encode(l)).collect::<Result<Vec<_>>>()?
        } else {
            vec![vocab.encode(text)?]
        };
        Self::from_documents(&docs, seq_len, vocab.size(), vocab.pad())
    }

    /// Every sequence must already have the same length.
    pub fn from_sequences(seqs: &[Vec<usize>], vocab_size: usize) -> Result<Self> {
        let s = seqs.first().map(Vec::len).ok_or_else(|| Error::input("no sequences"))?;
        if seqs.iter().any(|q| q.len() != s) {
            return Err(Error::input("sequences differ in length"));
        }
        Self::from_documents(seqs, s, vocab_size, None)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn pad(&self) -> Option<usize> {
        self.pad
    }

    pub fn window(&self, i: usize) -> &[usize] {
        let s = self.starts[i];
        &self.tokens[s..s + self.seq_len]
    }

    pub fn windows(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(|i| self.window(i))
    }

    /// Non-pad tokens, in order.
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.windows().flatten().copied().filter(|&t| Some(t) != self.pad)
    }

    /// First `n` windows and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let take = |range: std::ops::Range<usize>| {
            let docs: Vec<Vec<usize>> = range.map(|i| self.window(i).to_vec()).collect();
            Self {
                tokens: docs.concat(),
                seq_len: self.seq_len,
                starts: (0..docs.len()).map(|i| i * self.seq_len).collect(),
                vocab_size: self.vocab_size,
                pad: self.pad,
            }
        };
        (take(0..n), take(n..self.len()))
    }
}

/// Order-2 Markov chain: `transitions[a][b][c] = P(next = c | prev2 = a, prev = b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovToyLanguage {
    pub order: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

/// Smallest Dirichlet parameter used by [`MarkovToyLanguage::hierarchical`].
const BACKOFF_FLOOR: f64 = 1e-3;

fn dirichlet_row(alpha: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    let g = alpha
        .iter()
        .map(|&a| {
            let gamma = Gamma::new(a, 1.0).map_err(|e| Error::config("concentration", e.to_string()))?;
            Ok(gamma.sample(rng).max(1e-300))
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = g.iter().sum();
    Ok(g.into_iter().map(|x| x / total).collect())
}

impl MarkovToyLanguage {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, seed: u64) -> Result<Self> {
        let lang = Self {
            order: 2,
            vocab_size: transitions.len(),
            transitions,
            seed,
        };
        lang.validate()?;
        Ok(lang)
    }

    /// Rows drawn from a symmetric Dirichlet(`concentration`); small values
    /// give peaked, low-entropy transitions.
    pub fn random(vocab_size: usize, concentration: f64, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config("V", "toy language needs at least 2 symbols"));
        }
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::config("concentration", e.to_string()))?;
        let mut rng = rng::stream(seed, u64::MAX);
        let transitions = (0..vocab_size)
            .map(|_| {
                (0..vocab_size)
                    .map(|_| {
                        let g: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
                        let total: f64 = g.iter().sum();
                        g.into_iter().map(|x| x / total).collect()
                    })
                    .collect()
            })
            .collect();
        Self::new(transitions, seed)
    }

    /// Backed-off construction: a bigram row `q_b ~ Dirichlet(concentration)`
    /// per previous token, then each `P(. | a, b) ~ Dirichlet(backoff * q_b)`.
    /// Large `backoff` keeps rows close to the bigram; small values let the
    /// token two back matter more.
    pub fn hierarchical(vocab_size: usize, concentration: f64, backoff: f64, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config("V", "toy language needs at least 2 symbols"));
        }
        if !(backoff > 0.0 && backoff.is_finite()) {
            return Err(Error::config("backoff", "must be positive"));
        }
        let mut rng = rng::stream(seed, u64::MAX);
        let alpha = vec![concentration; vocab_size];
        let bigram = (0..vocab_size)
            .map(|_| dirichlet_row(&alpha, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let transitions = (0..vocab_size)
            .map(|_| {
                bigram
                    .iter()
                    .map(|q| {
                        let a: Vec<f64> = q.iter().map(|p| (backoff * p).max(BACKOFF_FLOOR)).collect();
                        dirichlet_row(&a, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(transitions, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != 2 {
            return Err(Error::config("order", format!("only order 2 is supported, got {}", self.order)));
        }
        let v = self.vocab_size;
        if v < 2 || self.transitions.len() != v {
            return Err(Error::config("transitions", format!("expected a {v}x{v}x{v} tensor")));
        }
        for (a, plane) in self.transitions.iter().enumerate() {
            if plane.len() != v {
                return Err(Error::config("transitions", format!("plane {a} has {} rows", plane.len())));
            }
            for (b, row) in plane.iter().enumerate() {
                let total: f64 = row.iter().sum();
                if row.len() != v || row.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config("transitions", format!("row ({a},{b}) is not a distribution")));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let lang: Self = serde_json::from_str(json).map_err(|e| Error::Format(format!("toy language: {e}")))?;
        lang.validate()?;
        Ok(lang)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Stationary distribution over consecutive pairs, flattened as `a * V + b`.
    /// Power iteration on the lazy chain `(I + P) / 2`, which shares the
    /// stationary law but is aperiodic.
    pub fn stationary_pairs(&self) -> Vec<f64> {
        let v = self.vocab_size;
        let mut pi = vec![1.0 / (v * v) as f64; v * v];
        for _ in 0..100_000 {
            let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
            for a in 0..v {
                for b in 0..v {
                    let mass = 0.5 * pi[a * v + b];
                    if mass == 0.0 {
                        continue;
                    }
                    for (c, &p) in self.transitions[a][b].iter().enumerate() {
                        next[b * v + c] += mass * p;
                    }
                }
            }
            let change: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            pi = next;
            if change < 1e-15 {
                break;
            }
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        pi
    }

    /// Stationary single-token marginal.
    pub fn stationary_unigrams(&self) -> Vec<f64> {
        let v = self.vocab_size;
        let pairs = self.stationary_pairs();
        (0..v).map(|a| pairs[a * v..(a + 1) * v].iter().sum()).collect()
    }

    /// Draw `n` sequences of length `seq_len`, starting from the stationary
    /// pair distribution.
    pub fn sample_sequences(&self, n: usize, seq_len: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let v = self.vocab_size;
        let pairs = self.stationary_pairs();
        (0..n)
            .map(|_| {
                let first = categorical(&pairs, rng.random::<f64>());
                let mut seq = vec![first / v, first % v];
                while seq.len() < seq_len {
                    let k = seq.len();
                    seq.push(categorical(&self.transitions[seq[k - 2]][seq[k - 1]], rng.random::<f64>()));
                }
                seq.truncate(seq_len);
                seq
            })
            .collect()
    }
}

/// `num_sequences` windows of length `seq_len` from `lang`, seeded by `lang.seed`.
pub fn sample_toy_corpus(lang: &MarkovToyLanguage, num_sequences: usize, seq_len: usize) -> Result<CorpusStore> {
    if seq_len == 0 || num_sequences == 0 {
        return Err(Error::input("toy corpus needs at least one sequence of length >= 1"));
    }
    let seqs = lang.sample_sequences(num_sequences, seq_len, &mut rng::seeded(lang.seed));
    CorpusStore::from_sequences(&seqs, lang.vocab_size)
}
