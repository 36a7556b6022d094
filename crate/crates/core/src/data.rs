//! Synthetic token sources with known entropy rates, text corpora and
//! tokenizers, and stateless per-step batching.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::batch::TokenBatch;
use crate::error::{config, input, Result};
use crate::rng::{tags, SeedStream};

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    IidUniform,
    /// Row-stochastic transition matrix, `V × V` row-major.
    Bigram(Vec<f64>),
    /// A fixed cycle, entered at a uniformly random phase.
    Periodic(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub vocab: usize,
    pub kind: SyntheticKind,
}

impl SyntheticSource {
    pub fn new(vocab: usize, kind: SyntheticKind) -> Result<Self> {
        if vocab == 0 {
            return Err(config("synthetic vocabulary must be non-empty"));
        }
        match &kind {
            SyntheticKind::IidUniform => {}
            SyntheticKind::Bigram(m) => {
                if m.len() != vocab * vocab {
                    return Err(config("bigram matrix must be V x V"));
                }
                for r in m.chunks(vocab) {
                    if r.iter().any(|p| !(*p >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(config("bigram rows must be probability distributions"));
                    }
                }
            }
            SyntheticKind::Periodic(p) => {
                if p.is_empty() || p.iter().any(|&v| v as usize >= vocab) {
                    return Err(config("periodic pattern must be non-empty and inside the vocabulary"));
                }
            }
        }
        Ok(Self { vocab, kind })
    }

    /// Circulant bigram: `p_next` to `v+1`, `p_skip` to `v+3`, the rest spread evenly over the other tokens.
    pub fn bigram_ring(vocab: usize, p_next: f64, p_skip: f64) -> Result<Self> {
        if vocab < 4 {
            return Err(config("bigram ring needs at least 4 tokens"));
        }
        if !(p_next >= 0.0 && p_skip >= 0.0 && p_next + p_skip <= 1.0) {
            return Err(config("bigram ring probabilities must be nonnegative and sum to at most 1"));
        }
        let rest = (1.0 - p_next - p_skip) / (vocab - 2) as f64;
        let mut m = vec![rest; vocab * vocab];
        for v in 0..vocab {
            m[v * vocab + (v + 1) % vocab] = p_next;
            m[v * vocab + (v + 3) % vocab] = p_skip;
        }
        Self::new(vocab, SyntheticKind::Bigram(m))
    }

    /// Stationary distribution of the chain (power iteration for bigrams).
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab;
        match &self.kind {
            SyntheticKind::IidUniform => vec![1.0 / v as f64; v],
            SyntheticKind::Bigram(m) => {
                let mut pi = vec![1.0 / v as f64; v];
                for _ in 0..10_000 {
                    let mut next = vec![0.0; v];
                    for i in 0..v {
                        for j in 0..v {
                            next[j] += pi[i] * m[i * v + j];
                        }
                    }
                    let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
                    pi = next;
                    if diff < 1e-15 {
                        break;
                    }
                }
                pi
            }
            SyntheticKind::Periodic(p) => {
                let mut pi = vec![0.0; v];
                for &t in p {
                    pi[t as usize] += 1.0 / p.len() as f64;
                }
                pi
            }
        }
    }

    /// Entropy rate in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        let v = self.vocab;
        match &self.kind {
            SyntheticKind::IidUniform => (v as f64).ln(),
            SyntheticKind::Bigram(m) => {
                let pi = self.stationary();
                (0..v)
                    .map(|i| pi[i] * -m[i * v..(i + 1) * v].iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
                    .sum()
            }
            SyntheticKind::Periodic(_) => 0.0,
        }
    }

    /// `n` independent sequences of length `len`.
    pub fn sample(&self, n: usize, len: usize, stream: SeedStream) -> TokenBatch {
        let v = self.vocab;
        let mut ids = Vec::with_capacity(n * len);
        let pi = self.stationary();
        for b in 0..n {
            let mut rng = stream.fork(b as u64).rng();
            match &self.kind {
                SyntheticKind::IidUniform => ids.extend((0..len).map(|_| rng.random_range(0..v as u32))),
                SyntheticKind::Bigram(m) => {
                    let mut cur = categorical(&pi, rng.random());
                    for _ in 0..len {
                        ids.push(cur as u32);
                        cur = categorical(&m[cur * v..(cur + 1) * v], rng.random());
                    }
                }
                SyntheticKind::Periodic(p) => {
                    let phase = rng.random_range(0..p.len());
                    ids.extend((0..len).map(|j| p[(phase + j) % p.len()]));
                }
            }
        }
        TokenBatch { batch: n, len, vocab: v, ids }
    }
}

fn categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|q| *q > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenizerKind {
    #[default]
    Byte,
    Char,
}

impl TokenizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            TokenizerKind::Byte => "byte",
            TokenizerKind::Char => "char",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vocabulary {
    Byte,
    /// Sorted alphabet; token id is the index.
    Char(Vec<char>),
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        match self {
            Vocabulary::Byte => 256,
            Vocabulary::Char(c) => c.len(),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<u32>> {
        match self {
            Vocabulary::Byte => Ok(text.iter().map(|&b| b as u32).collect()),
            Vocabulary::Char(alpha) => {
                let s = std::str::from_utf8(text).map_err(|e| input(format!("corpus is not valid UTF-8: {e}")))?;
                s.chars()
                    .map(|c| {
                        alpha.binary_search(&c).map(|i| i as u32).map_err(|_| input(format!("character {c:?} is not in the vocabulary")))
                    })
                    .collect()
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            Vocabulary::Byte => {
                let bytes: Vec<u8> = ids.iter().map(|&i| i.min(255) as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Vocabulary::Char(alpha) => ids.iter().map(|&i| alpha.get(i as usize).copied().unwrap_or('\u{fffd}')).collect(),
        }
    }

    /// One token per line, index = line number; newline and backslash are escaped.
    pub fn to_vocab_file(&self) -> String {
        let mut out = String::new();
        match self {
            Vocabulary::Byte => (0..256).for_each(|b| writeln!(out, "{b:#04x}").unwrap()),
            Vocabulary::Char(alpha) => {
                for c in alpha {
                    match c {
                        '\n' => out.push_str("\\n\n"),
                        '\r' => out.push_str("\\r\n"),
                        '\\' => out.push_str("\\\\\n"),
                        c => writeln!(out, "{c}").unwrap(),
                    }
                }
            }
        }
        out
    }

    pub fn from_vocab_file(kind: TokenizerKind, text: &str) -> Result<Self> {
        match kind {
            TokenizerKind::Byte => Ok(Vocabulary::Byte),
            TokenizerKind::Char => {
                let mut alpha = Vec::new();
                for line in text.split_terminator('\n') {
                    let c = match line {
                        "\\n" => '\n',
                        "\\r" => '\r',
                        "\\\\" => '\\',
                        l => {
                            let mut it = l.chars();
                            match (it.next(), it.next()) {
                                (Some(c), None) => c,
                                _ => return Err(input(format!("vocab line {line:?} is not a single character"))),
                            }
                        }
                    };
                    alpha.push(c);
                }
                Ok(Vocabulary::Char(alpha))
            }
        }
    }
}

/// A tokenized corpus packed into contiguous windows, split 90/10 into train and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub len: usize,
    pub train: Vec<Vec<u32>>,
    pub validation: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn from_bytes(text: &[u8], tokenizer: TokenizerKind, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(config("sequence length must be positive"));
        }
        if text.is_empty() {
            return Err(input("corpus is empty"));
        }
        let vocab = match tokenizer {
            TokenizerKind::Byte => Vocabulary::Byte,
            TokenizerKind::Char => {
                let s = std::str::from_utf8(text).map_err(|e| input(format!("corpus is not valid UTF-8: {e}")))?;
                let mut alpha: Vec<char> = s.chars().collect();
                alpha.sort_unstable();
                alpha.dedup();
                Vocabulary::Char(alpha)
            }
        };
        let ids = vocab.encode(text)?;
        if ids.len() < len {
            return Err(input("corpus shorter than one window"));
        }
        let windows: Vec<Vec<u32>> = ids.chunks_exact(len).map(|w| w.to_vec()).collect();
        let n_val = if windows.len() >= 2 { (windows.len() / 10).max(1) } else { 0 };
        let split = windows.len() - n_val;
        Ok(Self { vocab, len, validation: windows[split..].to_vec(), train: windows[..split].to_vec() })
    }

    pub fn load(path: &Path, tokenizer: TokenizerKind, len: usize) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| input(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::from_bytes(&text, tokenizer, len)
    }

    pub fn validation_batch(&self) -> Result<TokenBatch> {
        let rows = if self.validation.is_empty() { &self.train } else { &self.validation };
        TokenBatch::from_rows(rows, self.vocab.size())
    }
}

/// Where training batches and the held-out set come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { source: SyntheticSource, len: usize, n_validation: usize },
    Corpus(Corpus),
}

impl DataSource {
    pub fn vocab(&self) -> usize {
        match self {
            DataSource::Synthetic { source, .. } => source.vocab,
            DataSource::Corpus(c) => c.vocab.size(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DataSource::Synthetic { len, .. } => *len,
            DataSource::Corpus(c) => c.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch for `step`; a pure function of `(stream, step)`, so resumed runs see the same data.
    pub fn train_batch(&self, step: u64, batch: usize, stream: SeedStream) -> Result<TokenBatch> {
        let stream = stream.fork(tags::DATA);
        match self {
            DataSource::Synthetic { source, len, .. } => Ok(source.sample(batch, *len, stream.fork(step))),
            DataSource::Corpus(c) => {
                let n = c.train.len();
                let mut rows = Vec::with_capacity(batch);
                for i in 0..batch as u64 {
                    let global = step * batch as u64 + i;
                    let (epoch, offset) = (global / n as u64, (global % n as u64) as usize);
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut stream.fork(u64::MAX).fork(epoch).rng());
                    rows.push(c.train[perm[offset]].clone());
                }
                TokenBatch::from_rows(&rows, c.vocab.size())
            }
        }
    }

    pub fn validation_batch(&self, stream: SeedStream) -> Result<TokenBatch> {
        match self {
            DataSource::Synthetic { source, len, n_validation } => {
                Ok(source.sample(*n_validation, *len, stream.fork(tags::DATA).fork(u64::MAX - 1)))
            }
            DataSource::Corpus(c) => c.validation_batch(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ab_corpus_char_tokenizer() {
        let text = "ab".repeat(1000);
        let c = Corpus::from_bytes(text.as_bytes(), TokenizerKind::Char, 8).unwrap();
        assert_eq!(c.vocab.size(), 2);
        for w in c.train.iter().chain(&c.validation) {
            assert_eq!(w, &vec![0, 1, 0, 1, 0, 1, 0, 1]);
        }
        assert_eq!(c.train.len() + c.validation.len(), 250);
        assert_eq!(c.validation.len(), 25);
    }

    #[test]
    fn short_corpus_is_rejected() {
        let err = Corpus::from_bytes(b"abc", TokenizerKind::Byte, 8).unwrap_err();
        assert!(err.to_string().contains("corpus shorter than one window"));
        assert!(Corpus::from_bytes(b"", TokenizerKind::Byte, 8).is_err());
        assert!(Corpus::from_bytes(&[0xff, 0xfe, 0x00, 0x01], TokenizerKind::Char, 2).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::Char(vec!['\n', ' ', 'a', '\\', 'é']);
        let mut sorted = v.clone();
        if let Vocabulary::Char(a) = &mut sorted {
            a.sort_unstable();
        }
        let text = sorted.to_vocab_file();
        assert_eq!(Vocabulary::from_vocab_file(TokenizerKind::Char, &text).unwrap(), sorted);
    }

    #[test]
    fn ring_entropy_and_stationarity() {
        let s = SyntheticSource::bigram_ring(8, 0.6, 0.2).unwrap();
        let rest = 0.2f64 / 6.0;
        let want = -(0.6f64 * 0.6f64.ln() + 0.2 * 0.2f64.ln() + 6.0 * rest * rest.ln());
        assert!((s.entropy_rate() - want).abs() < 1e-12);
        assert!(s.stationary().iter().all(|p| (p - 0.125).abs() < 1e-12));
        assert_eq!(SyntheticSource::new(4, SyntheticKind::Periodic(vec![0, 1])).unwrap().entropy_rate(), 0.0);
    }

    #[test]
    fn corpus_batches_are_stateless_and_cover_an_epoch() {
        let text: Vec<u8> = (0..=255u8).cycle().take(4000).collect();
        let c = Corpus::from_bytes(&text, TokenizerKind::Byte, 10).unwrap();
        let n = c.train.len();
        let src = DataSource::Corpus(c.clone());
        let s = SeedStream::new(5);
        assert_eq!(src.train_batch(3, 4, s).unwrap(), src.train_batch(3, 4, s).unwrap());
        let mut seen: Vec<Vec<u32>> = Vec::new();
        for step in 0..(n as u64) {
            let b = src.train_batch(step, 1, s).unwrap();
            seen.push(b.ids.clone());
        }
        seen.sort();
        let mut all = c.train.clone();
        all.sort();
        assert_eq!(seen, all);
    }
}
