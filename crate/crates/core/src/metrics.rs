//! Generation-quality metrics, confidence/overlap diagnostics, and the
//! frequency-bucket analysis.
//!
//! BLEU comes in two forms. Sentence BLEU applies add-1 smoothing to the
//! n≥2 precisions so that candidate ranking stays stable on short texts;
//! corpus BLEU aggregates clipped counts across examples and uses no
//! smoothing. Both apply the brevity penalty exp(1−|ref|/|hyp|) when the
//! hypothesis is shorter than the reference and scale to [0,100]. ROUGE and
//! Distinct stay in [0,1].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;

/// Which metric plays the role of the candidate-quality score Δ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    /// Sentence/corpus BLEU with max n = 4.
    Bleu,
    /// Mean of BLEU-1 and BLEU-2.
    B12Mean,
    /// Mean of ROUGE-1, ROUGE-2 and ROUGE-L F1.
    R12lMean,
    /// Mean of Distinct-1 and Distinct-2; reference-free, corpus-level only.
    D12Mean,
}

impl DeltaKind {
    pub fn parse(s: &str) -> Result<Self, MetricsError> {
        match s {
            "bleu" => Ok(DeltaKind::Bleu),
            "b12_mean" => Ok(DeltaKind::B12Mean),
            "r12l_mean" => Ok(DeltaKind::R12lMean),
            "d12_mean" => Ok(DeltaKind::D12Mean),
            other => Err(MetricsError::UnknownKind(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeltaKind::Bleu => "bleu",
            DeltaKind::B12Mean => "b12_mean",
            DeltaKind::R12lMean => "r12l_mean",
            DeltaKind::D12Mean => "d12_mean",
        }
    }

    pub fn is_corpus_only(self) -> bool {
        matches!(self, DeltaKind::D12Mean)
    }

    /// Upper bound of the kind's natural scale, for normalizing to [0,1].
    pub fn scale(self) -> f64 {
        match self {
            DeltaKind::Bleu | DeltaKind::B12Mean => 100.0,
            DeltaKind::R12lMean | DeltaKind::D12Mean => 1.0,
        }
    }
}

/// One metric over a split: corpus-level value plus per-example values where
/// the metric has them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub kind: String,
    pub value: f64,
    pub per_example: Vec<f64>,
}

impl ScoreReport {
    pub fn new(kind: &str, value: f64, per_example: Vec<f64>) -> Self {
        ScoreReport { kind: kind.to_string(), value, per_example }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], u32> {
    let mut counts: BTreeMap<&[String], u32> = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total hypothesis n-grams.
fn clipped_matches(hyp: &[String], reference: &[String], n: usize) -> (u32, u32) {
    let ref_counts = ngram_counts(reference, n);
    let hyp_counts = ngram_counts(hyp, n);
    let mut matches = 0;
    for (gram, c) in &hyp_counts {
        matches += (*c).min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    let total = if hyp.len() >= n { (hyp.len() - n + 1) as u32 } else { 0 };
    (matches, total)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    }
}

/// Sentence BLEU in [0,100] with `max_n` orders of n-gram precision.
/// Add-1 smoothing on orders ≥ 2; an empty hypothesis scores 0.
pub fn sentence_bleu_max_n(hyp: &[String], reference: &[String], max_n: usize) -> f64 {
    debug_assert!(!reference.is_empty(), "reference must be non-empty");
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped_matches(hyp, reference, n);
        let p = if n == 1 {
            if m == 0 {
                return 0.0;
            }
            f64::from(m) / f64::from(t)
        } else {
            f64::from(m + 1) / f64::from(t + 1)
        };
        log_sum += libm::log(p);
    }
    100.0 * brevity_penalty(hyp.len(), reference.len()) * libm::exp(log_sum / max_n as f64)
}

/// Sentence BLEU-4.
pub fn sentence_bleu(hyp: &[String], reference: &[String]) -> f64 {
    sentence_bleu_max_n(hyp, reference, 4)
}

/// Corpus BLEU in [0,100]: clipped counts aggregated over all pairs, no
/// smoothing, brevity penalty over total lengths.
pub fn corpus_bleu_max_n(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    debug_assert_eq!(hyps.len(), refs.len());
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let (m, t) = clipped_matches(hyp, reference, n);
            matches[n - 1] += u64::from(m);
            totals[n - 1] += u64::from(t);
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            return 0.0;
        }
        log_sum += libm::log(matches[n] as f64 / totals[n] as f64);
    }
    100.0 * brevity_penalty(hyp_len, ref_len) * libm::exp(log_sum / max_n as f64)
}

/// Corpus BLEU-4.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    corpus_bleu_max_n(hyps, refs, 4)
}

/// ROUGE-N F1 in [0,1]: clipped n-gram overlap.
pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> f64 {
    let (m, hyp_total) = clipped_matches(hyp, reference, n);
    let ref_total = if reference.len() >= n { (reference.len() - n + 1) as u32 } else { 0 };
    if m == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = f64::from(m) / f64::from(hyp_total);
    let r = f64::from(m) / f64::from(ref_total);
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for av in a {
        for (j, bv) in b.iter().enumerate() {
            cur[j + 1] = if av == bv { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 in [0,1]: longest common subsequence.
pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Distinct-n in [0,1]: unique n-grams over total n-grams across the whole
/// hypothesis set.
pub fn distinct_n(hyps: &[Vec<String>], n: usize) -> f64 {
    let mut unique: BTreeSet<&[String]> = BTreeSet::new();
    let mut total = 0usize;
    for hyp in hyps {
        if hyp.len() >= n {
            for i in 0..=hyp.len() - n {
                unique.insert(&hyp[i..i + n]);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Per-sentence Δ. `d12_mean` has no per-sentence form.
pub fn delta_sentence(
    kind: DeltaKind,
    candidate: &[String],
    reference: &[String],
) -> Result<f64, MetricsError> {
    match kind {
        DeltaKind::Bleu => Ok(sentence_bleu(candidate, reference)),
        DeltaKind::B12Mean => Ok((sentence_bleu_max_n(candidate, reference, 1)
            + sentence_bleu_max_n(candidate, reference, 2))
            / 2.0),
        DeltaKind::R12lMean => Ok((rouge_n(candidate, reference, 1)
            + rouge_n(candidate, reference, 2)
            + rouge_l(candidate, reference))
            / 3.0),
        DeltaKind::D12Mean => Err(MetricsError::CorpusOnlyKind(kind)),
    }
}

/// Corpus-level Δ over aligned hypothesis/reference lists. ROUGE kinds are
/// averaged per example; `d12_mean` ignores references.
pub fn delta_corpus(
    kind: DeltaKind,
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<f64, MetricsError> {
    if !kind.is_corpus_only() && hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch);
    }
    match kind {
        DeltaKind::Bleu => Ok(corpus_bleu(hyps, refs)),
        DeltaKind::B12Mean => {
            Ok((corpus_bleu_max_n(hyps, refs, 1) + corpus_bleu_max_n(hyps, refs, 2)) / 2.0)
        }
        DeltaKind::R12lMean => {
            if hyps.is_empty() {
                return Ok(0.0);
            }
            let sum: f64 = hyps
                .iter()
                .zip(refs)
                .map(|(h, r)| (rouge_n(h, r, 1) + rouge_n(h, r, 2) + rouge_l(h, r)) / 3.0)
                .sum();
            Ok(sum / hyps.len() as f64)
        }
        DeltaKind::D12Mean => Ok((distinct_n(hyps, 1) + distinct_n(hyps, 2)) / 2.0),
    }
}

/// Mean token probability over a set of positions.
pub fn set_confidence(probs: &[f64]) -> Result<f64, MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    debug_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Token-set comparison of reference, retrieved memory and beam memory.
///
/// The gain set holds reference tokens the beam memory covers but the
/// retrieved memory does not. Confidence is averaged over the reference
/// positions whose token falls in the respective set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapAnalysis {
    pub reference: BTreeSet<String>,
    pub retrieved: BTreeSet<String>,
    pub beam: BTreeSet<String>,
    pub gain: BTreeSet<String>,
    pub psi_reference: f64,
    pub psi_gain: Option<f64>,
}

/// `token_probs[i]` is the model probability of reference token `i` given the
/// source and the preceding reference tokens.
pub fn overlap_analysis(
    reference: &[String],
    retrieved_memory: &[String],
    beam_memory: &[String],
    token_probs: &[f64],
) -> Result<OverlapAnalysis, MetricsError> {
    if token_probs.len() != reference.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let r: BTreeSet<String> = reference.iter().cloned().collect();
    let m: BTreeSet<String> = retrieved_memory.iter().cloned().collect();
    let b: BTreeSet<String> = beam_memory.iter().cloned().collect();
    // (R ∩ B) − (R ∩ M)
    let gain: BTreeSet<String> =
        r.intersection(&b).filter(|t| !m.contains(*t)).cloned().collect();

    let psi_reference = set_confidence(token_probs)?;
    let gain_probs: Vec<f64> = reference
        .iter()
        .zip(token_probs)
        .filter(|(t, _)| gain.contains(*t))
        .map(|(_, &p)| p)
        .collect();
    let psi_gain = set_confidence(&gain_probs).ok();
    Ok(OverlapAnalysis { reference: r, retrieved: m, beam: b, gain, psi_reference, psi_gain })
}

/// 1-gram F1 per training-frequency bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketF1 {
    pub label: String,
    /// Inclusive train-frequency range covered by the bucket.
    pub min_freq: u64,
    pub max_freq: u64,
    /// Absent when neither side has a token in the bucket.
    pub f1: Option<f64>,
    pub hyp_tokens: u64,
    pub ref_tokens: u64,
}

/// Bucket hypothesis/reference tokens by train frequency (4 quantile bins
/// over seen tokens, plus an "unseen" bin) and report clipped bag-of-token F1
/// per bucket.
pub fn freq_bucket_f1(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    vocab: &Vocabulary,
    bins: usize,
) -> Vec<BucketF1> {
    assert!(bins >= 1);
    assert_eq!(hyps.len(), refs.len());
    // Quantile edges over the distinct seen-token frequencies.
    let mut seen: Vec<u64> = (0..vocab.len() as u32)
        .map(|i| vocab.freq(i))
        .filter(|&f| f > 0)
        .collect();
    seen.sort_unstable();
    let edge = |k: usize| -> u64 {
        if seen.is_empty() {
            0
        } else {
            let pos = (k * seen.len()).div_ceil(bins);
            seen[pos.saturating_sub(1).min(seen.len() - 1)]
        }
    };
    let edges: Vec<u64> = (1..=bins).map(edge).collect();

    let bucket_of = |token: &str| -> usize {
        let f = vocab.freq_of(token);
        if f == 0 {
            return 0; // unseen
        }
        for (i, &e) in edges.iter().enumerate() {
            if f <= e {
                return i + 1;
            }
        }
        bins
    };

    let n_buckets = bins + 1;
    let mut matched = vec![0u64; n_buckets];
    let mut hyp_totals = vec![0u64; n_buckets];
    let mut ref_totals = vec![0u64; n_buckets];
    for (hyp, reference) in hyps.iter().zip(refs) {
        let mut hyp_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for t in hyp {
            *hyp_counts.entry(t.as_str()).or_insert(0) += 1;
            hyp_totals[bucket_of(t)] += 1;
        }
        let mut ref_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for t in reference {
            *ref_counts.entry(t.as_str()).or_insert(0) += 1;
            ref_totals[bucket_of(t)] += 1;
        }
        for (t, hc) in &hyp_counts {
            let rc = ref_counts.get(t).copied().unwrap_or(0);
            matched[bucket_of(t)] += (*hc).min(rc);
        }
    }

    let mut out = Vec::with_capacity(n_buckets);
    for i in 0..n_buckets {
        let (label, min_freq, max_freq) = if i == 0 {
            ("unseen".to_string(), 0, 0)
        } else {
            let lo = if i == 1 { 1 } else { edges[i - 2] + 1 };
            (format!("q{i}"), lo, edges[i - 1])
        };
        let f1 = if hyp_totals[i] == 0 && ref_totals[i] == 0 {
            None
        } else if matched[i] == 0 {
            Some(0.0)
        } else {
            let p = matched[i] as f64 / hyp_totals[i] as f64;
            let r = matched[i] as f64 / ref_totals[i] as f64;
            Some(2.0 * p * r / (p + r))
        };
        out.push(BucketF1 {
            label,
            min_freq,
            max_freq,
            f1,
            hyp_tokens: hyp_totals[i],
            ref_tokens: ref_totals[i],
        });
    }
    out
}

/// Spearman rank correlation with average ranks on ties. `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(core::cmp::Ordering::Equal));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return None;
    }
    Some(cov / libm::sqrt(var_x * var_y))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    UnknownKind(String),
    CorpusOnlyKind(DeltaKind),
    EmptySet,
    LengthMismatch,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::UnknownKind(k) => write!(f, "unknown delta kind: {k}"),
            MetricsError::CorpusOnlyKind(k) => {
                write!(f, "delta kind {} is corpus-level only", k.as_str())
            }
            MetricsError::EmptySet => write!(f, "confidence over an empty position set"),
            MetricsError::LengthMismatch => write!(f, "aligned inputs differ in length"),
        }
    }
}

impl core::error::Error for MetricsError {}
