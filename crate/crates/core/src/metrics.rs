//! Token quality measures: phone-normalized mutual information, codebook
//! usage and reconstruction error.
//!
//! Probabilities are plug-in estimates from counts and logarithms are base 2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tokens::TokenSequence;

/// Sparse phone × token co-occurrence counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    phone_count: usize,
    token_count: u64,
    cells: BTreeMap<(u32, u64), u64>,
    total: u64,
}

impl ContingencyTable {
    /// Empty table over `phone_count` phones and `token_count` tokens.
    pub fn new(phone_count: usize, token_count: u64) -> Self {
        Self {
            phone_count,
            token_count,
            ..Default::default()
        }
    }

    /// Builds a table from dense row-major `P×K` counts.
    pub fn from_dense(phone_count: usize, token_count: usize, counts: &[u64]) -> Result<Self> {
        if counts.len() != phone_count * token_count {
            return Err(Error::Schema(format!(
                "{} counts for a {phone_count}×{token_count} table",
                counts.len()
            )));
        }
        let mut t = Self::new(phone_count, token_count as u64);
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                t.add_count((i / token_count) as u32, (i % token_count) as u64, c);
            }
        }
        Ok(t)
    }

    pub fn add(&mut self, phone: u32, token: u64) {
        self.add_count(phone, token, 1);
    }

    /// Adds `count` co-occurrences, growing the declared alphabets if needed.
    pub fn add_count(&mut self, phone: u32, token: u64, count: u64) {
        if count == 0 {
            return;
        }
        self.phone_count = self.phone_count.max(phone as usize + 1);
        self.token_count = self.token_count.max(token + 1);
        *self.cells.entry((phone, token)).or_insert(0) += count;
        self.total += count;
    }

    /// Adds every count of `other`. Merging is associative and commutative.
    pub fn merge(&mut self, other: &ContingencyTable) {
        self.phone_count = self.phone_count.max(other.phone_count);
        self.token_count = self.token_count.max(other.token_count);
        for (&(p, k), &c) in &other.cells {
            self.add_count(p, k, c);
        }
    }

    pub fn phone_count(&self) -> usize {
        self.phone_count
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    /// Total number of observations N.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, phone: u32, token: u64) -> u64 {
        self.cells.get(&(phone, token)).copied().unwrap_or(0)
    }

    /// Non-zero cells in (phone, token) order.
    pub fn cells(&self) -> impl Iterator<Item = ((u32, u64), u64)> + '_ {
        self.cells.iter().map(|(&k, &v)| (k, v))
    }

    pub fn phone_marginals(&self) -> BTreeMap<u32, u64> {
        let mut m = BTreeMap::new();
        for (&(p, _), &c) in &self.cells {
            *m.entry(p).or_insert(0) += c;
        }
        m
    }

    pub fn token_marginals(&self) -> BTreeMap<u64, u64> {
        let mut m = BTreeMap::new();
        for (&(_, k), &c) in &self.cells {
            *m.entry(k).or_insert(0) += c;
        }
        m
    }
}

/// `(count / n) · log2(reference / count)`; zero counts contribute nothing.
fn info_term(count: u64, reference: u64, n: u64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    (count as f64 / n as f64) * (reference as f64 / count as f64).log2()
}

/// Entropy in bits of a histogram with total `n`.
fn entropy_bits<I: IntoIterator<Item = u64>>(counts: I, n: u64) -> f64 {
    counts.into_iter().map(|c| info_term(c, n, n)).sum()
}

/// `I(phone; token) / H(phone)`, computed as `1 − H(phone | token) / H(phone)`.
pub fn pnmi(table: &ContingencyTable) -> Result<f64> {
    let n = table.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("PNMI of an empty table".into()));
    }
    let phones = table.phone_marginals();
    let h_phone = entropy_bits(phones.values().copied(), n);
    if h_phone <= 0.0 {
        return Err(Error::UndefinedMetric(
            "PNMI needs at least two phone classes with non-zero counts".into(),
        ));
    }
    let tokens = table.token_marginals();
    let h_cond: f64 = table
        .cells()
        .map(|((_, k), c)| info_term(c, tokens[&k], n))
        .sum();
    Ok(((h_phone - h_cond) / h_phone).clamp(0.0, 1.0))
}

/// Counts (phone, token) pairs frame by frame for one token stream.
pub fn build_contingency(tokens: &TokenSequence, stream: usize, phones: &[u32]) -> Result<ContingencyTable> {
    check_stream(tokens, stream)?;
    check_alignment(tokens, phones)?;
    let mut t = ContingencyTable::new(0, u64::from(tokens.vocab_sizes()[stream]));
    for (&tok, &p) in tokens.stream(stream).iter().zip(phones) {
        t.add(p, u64::from(tok));
    }
    Ok(t)
}

/// One table per stream.
pub fn build_contingencies(tokens: &TokenSequence, phones: &[u32]) -> Result<Vec<ContingencyTable>> {
    (0..tokens.num_streams())
        .map(|s| build_contingency(tokens, s, phones))
        .collect()
}

/// Contingency over the product alphabet of all streams: frame `t` maps to
/// the mixed-radix number of its tokens. Fails when the product alphabet
/// exceeds `max_alphabet`.
pub fn build_joint_contingency(
    tokens: &TokenSequence,
    phones: &[u32],
    max_alphabet: u64,
) -> Result<ContingencyTable> {
    check_alignment(tokens, phones)?;
    let alphabet = tokens
        .vocab_sizes()
        .iter()
        .try_fold(1u64, |acc, &v| acc.checked_mul(u64::from(v)))
        .filter(|&a| a <= max_alphabet)
        .ok_or_else(|| {
            Error::Config(format!(
                "joint alphabet of vocabularies {:?} exceeds cap {max_alphabet}",
                tokens.vocab_sizes()
            ))
        })?;
    let mut t = ContingencyTable::new(0, alphabet);
    for (f, &p) in phones.iter().enumerate() {
        let id = tokens
            .streams()
            .iter()
            .zip(tokens.vocab_sizes())
            .fold(0u64, |acc, (s, &v)| acc * u64::from(v) + u64::from(s[f]));
        t.add(p, id);
    }
    Ok(t)
}

fn check_stream(tokens: &TokenSequence, stream: usize) -> Result<()> {
    if stream >= tokens.num_streams() {
        return Err(Error::Range(format!(
            "stream {stream} of a {}-stream sequence",
            tokens.num_streams()
        )));
    }
    Ok(())
}

fn check_alignment(tokens: &TokenSequence, phones: &[u32]) -> Result<()> {
    if phones.len() != tokens.frames() {
        return Err(Error::Schema(format!(
            "{} phone labels for {} frames",
            phones.len(),
            tokens.frames()
        )));
    }
    Ok(())
}

/// Token usage counts for one stream, mergeable across utterances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenHistogram {
    counts: Vec<u64>,
}

impl TokenHistogram {
    pub fn new(vocab: u32) -> Self {
        Self {
            counts: vec![0; vocab as usize],
        }
    }

    pub fn from_stream(tokens: &TokenSequence, stream: usize) -> Result<Self> {
        check_stream(tokens, stream)?;
        let mut h = Self::new(tokens.vocab_sizes()[stream]);
        for &t in tokens.stream(stream) {
            h.counts[t as usize] += 1;
        }
        Ok(h)
    }

    pub fn merge(&mut self, other: &TokenHistogram) {
        if other.counts.len() > self.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn stats(&self) -> Result<CodebookStats> {
        let n = self.total();
        if n == 0 {
            return Err(Error::UndefinedMetric("codebook statistics of zero frames".into()));
        }
        let distinct = self.counts.iter().filter(|&&c| c > 0).count();
        let entropy = entropy_bits(self.counts.iter().copied(), n);
        Ok(CodebookStats {
            vocab: self.counts.len(),
            distinct,
            utilization: distinct as f64 / self.counts.len() as f64,
            entropy_bits: entropy,
            perplexity: entropy.exp2(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub vocab: usize,
    pub distinct: usize,
    /// Fraction of the vocabulary that occurs.
    pub utilization: f64,
    pub entropy_bits: f64,
    /// `2^entropy`: the effective number of codes in use.
    pub perplexity: f64,
}

pub fn codebook_stats(tokens: &TokenSequence, stream: usize) -> Result<CodebookStats> {
    TokenHistogram::from_stream(tokens, stream)?.stats()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionError {
    pub mse: f64,
    /// `+∞` when the reconstruction is exact, written as `"inf"` in JSON.
    #[serde(with = "inf_sentinel")]
    pub snr_db: f64,
}

/// Running signal and error energy, mergeable across utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorEnergy {
    pub signal: f64,
    pub error: f64,
    pub elements: u64,
}

impl ErrorEnergy {
    pub fn accumulate(&mut self, original: &EmbeddingMatrix, reconstructed: &EmbeddingMatrix) -> Result<()> {
        if original.dim() != reconstructed.dim() || original.frames() != reconstructed.frames() {
            return Err(Error::Schema(format!(
                "shapes differ: {}×{} vs {}×{}",
                original.frames(),
                original.dim(),
                reconstructed.frames(),
                reconstructed.dim()
            )));
        }
        let (signal, error) = original
            .data()
            .iter()
            .zip(reconstructed.data())
            .fold((0f64, 0f64), |(s, e), (&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                (s + f64::from(x) * f64::from(x), e + d * d)
            });
        self.signal += signal;
        self.error += error;
        self.elements += original.data().len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &ErrorEnergy) {
        self.signal += other.signal;
        self.error += other.error;
        self.elements += other.elements;
    }

    pub fn finish(&self) -> Result<ReconstructionError> {
        if self.signal == 0.0 {
            return Err(Error::UndefinedMetric("SNR of a zero-energy signal".into()));
        }
        let mse = self.error / self.elements as f64;
        let snr_db = if self.error == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (self.signal / self.error).log10()
        };
        Ok(ReconstructionError { mse, snr_db })
    }
}

pub fn reconstruction_error(original: &EmbeddingMatrix, reconstructed: &EmbeddingMatrix) -> Result<ReconstructionError> {
    let mut acc = ErrorEnergy::default();
    acc.accumulate(original, reconstructed)?;
    acc.finish()
}

mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnmi_hand_table() {
        let t = ContingencyTable::from_dense(2, 2, &[2, 0, 1, 1]).unwrap();
        let v = pnmi(&t).unwrap();
        assert!((v - 0.311_278_124_459_132_8).abs() < 1e-9, "{v}");
    }

    #[test]
    fn pnmi_extremes_are_exact() {
        let bij = ContingencyTable::from_dense(3, 3, &[0, 4, 0, 0, 0, 7, 2, 0, 0]).unwrap();
        assert_eq!(pnmi(&bij).unwrap(), 1.0);
        let constant = ContingencyTable::from_dense(3, 1, &[5, 2, 9]).unwrap();
        assert_eq!(pnmi(&constant).unwrap(), 0.0);
    }

    #[test]
    fn pnmi_undefined() {
        assert!(matches!(pnmi(&ContingencyTable::new(2, 2)), Err(Error::UndefinedMetric(_))));
        let one_phone = ContingencyTable::from_dense(1, 2, &[3, 4]).unwrap();
        assert!(matches!(pnmi(&one_phone), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn contingency_from_tokens() {
        let toks = TokenSequence::single(vec![0, 0, 1], 2, 50.0).unwrap();
        let t = build_contingency(&toks, 0, &[0, 0, 1]).unwrap();
        assert_eq!(t.get(0, 0), 2);
        assert_eq!(t.get(1, 1), 1);
        assert_eq!(t.get(0, 1), 0);
        assert_eq!(t.total(), 3);

        let empty = TokenSequence::single(vec![], 2, 50.0).unwrap();
        assert_eq!(build_contingency(&empty, 0, &[]).unwrap().total(), 0);
        assert!(matches!(build_contingency(&toks, 0, &[0]), Err(Error::Schema(_))));
    }

    #[test]
    fn joint_contingency_and_cap() {
        let toks = TokenSequence::new(vec![vec![0, 1, 1], vec![2, 0, 2]], vec![2, 3], 100.0).unwrap();
        let t = build_joint_contingency(&toks, &[0, 1, 1], 100).unwrap();
        assert_eq!(t.get(0, 2), 1);
        assert_eq!(t.get(1, 3), 1);
        assert_eq!(t.get(1, 5), 1);
        assert!(matches!(build_joint_contingency(&toks, &[0, 1, 1], 5), Err(Error::Config(_))));
    }

    #[test]
    fn merge_is_additive() {
        let mut a = ContingencyTable::from_dense(2, 2, &[1, 0, 0, 2]).unwrap();
        let b = ContingencyTable::from_dense(3, 1, &[1, 1, 1]).unwrap();
        a.merge(&b);
        assert_eq!(a.total(), 6);
        assert_eq!(a.get(0, 0), 2);
        assert_eq!(a.phone_count(), 3);
    }

    #[test]
    fn stats_examples() {
        let uniform = TokenSequence::single((0..64).map(|i| i % 8).collect(), 8, 50.0).unwrap();
        let s = codebook_stats(&uniform, 0).unwrap();
        assert_eq!(s.utilization, 1.0);
        assert!((s.perplexity - 8.0).abs() < 1e-9);

        let single = TokenSequence::single(vec![3; 10], 8, 50.0).unwrap();
        assert_eq!(codebook_stats(&single, 0).unwrap().perplexity, 1.0);

        let mixed = TokenSequence::single(vec![0, 0, 1, 2], 4, 50.0).unwrap();
        let s = codebook_stats(&mixed, 0).unwrap();
        assert!((s.entropy_bits - 1.5).abs() < 1e-12);
        assert!((s.perplexity - 2f64.powf(1.5)).abs() < 1e-9);
        assert_eq!(s.utilization, 0.75);

        let empty = TokenSequence::single(vec![], 4, 50.0).unwrap();
        assert!(matches!(codebook_stats(&empty, 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn reconstruction_examples() {
        let x = EmbeddingMatrix::new(vec![1.0, 0.0, 0.0, 0.0], 2, 50.0).unwrap();
        let r = reconstruction_error(&x, &x).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.snr_db, f64::INFINITY);

        let zero = EmbeddingMatrix::zeros(2, 2, 50.0).unwrap();
        let r = reconstruction_error(&x, &zero).unwrap();
        assert_eq!(r.snr_db, 0.0);
        assert_eq!(r.mse, 0.25);

        assert!(matches!(reconstruction_error(&zero, &x), Err(Error::UndefinedMetric(_))));
        let other = EmbeddingMatrix::zeros(1, 2, 50.0).unwrap();
        assert!(matches!(reconstruction_error(&x, &other), Err(Error::Schema(_))));
    }

    #[test]
    fn energy_merge_matches_concatenation() {
        let a = EmbeddingMatrix::new(vec![1.0, 2.0], 2, 50.0).unwrap();
        let ar = EmbeddingMatrix::new(vec![1.0, 1.0], 2, 50.0).unwrap();
        let b = EmbeddingMatrix::new(vec![0.0, 3.0, 1.0, 1.0], 2, 50.0).unwrap();
        let br = EmbeddingMatrix::zeros(2, 2, 50.0).unwrap();
        let (mut x, mut y) = (ErrorEnergy::default(), ErrorEnergy::default());
        x.accumulate(&a, &ar).unwrap();
        y.accumulate(&b, &br).unwrap();
        x.merge(&y);
        let ab = EmbeddingMatrix::new(vec![1.0, 2.0, 0.0, 3.0, 1.0, 1.0], 2, 50.0).unwrap();
        let abr = EmbeddingMatrix::new(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0], 2, 50.0).unwrap();
        assert_eq!(x.finish().unwrap(), reconstruction_error(&ab, &abr).unwrap());
    }

    #[test]
    fn infinite_snr_json_sentinel() {
        let r = ReconstructionError { mse: 0.0, snr_db: f64::INFINITY };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"mse":0.0,"snr_db":"inf"}"#);
        assert_eq!(serde_json::from_str::<ReconstructionError>(&s).unwrap(), r);
        let finite: ReconstructionError = serde_json::from_str(r#"{"mse":1.0,"snr_db":3.5}"#).unwrap();
        assert_eq!(finite.snr_db, 3.5);
    }
}
