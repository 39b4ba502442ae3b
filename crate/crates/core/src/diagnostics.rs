//! Corpus-level diagnostics: centroid similarity of selected sub-corpora,
//! BLEU / chrF2 scoring, and paired bootstrap significance testing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::ops::AddAssign;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingMatrix;
use crate::error::{Error, IoContext, Result};

/// Per-dimension mean of a set of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroid(pub Vec<f64>);

impl Centroid {
    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Centroid) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::DimsMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok(dot / (na * nb))
    }
}

pub fn centroid(matrix: &EmbeddingMatrix) -> Result<Centroid> {
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut sum = vec![0.0f64; matrix.dims()];
    for row in matrix.iter_rows() {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    let n = matrix.rows() as f64;
    Ok(Centroid(sum.into_iter().map(|s| s / n).collect()))
}

/// Cosine between each sub-corpus centroid and the test-set centroid, as
/// `(rank, score)` with ranks counted from 1 in input order.
pub fn centroid_similarity(sub_corpora: &[EmbeddingMatrix], test_set: &EmbeddingMatrix) -> Result<Vec<(usize, f64)>> {
    let reference = centroid(test_set)?;
    sub_corpora
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.dims() != test_set.dims() {
                return Err(Error::DimsMismatch {
                    expected: test_set.dims(),
                    actual: m.dims(),
                });
            }
            Ok((i + 1, centroid(m)?.cosine(&reference)?))
        })
        .collect()
}

pub fn write_centroids_tsv(path: impl AsRef<Path>, scores: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("rank\tscore\n");
    for (rank, score) in scores {
        let _ = writeln!(out, "{rank}\t{score:.6}");
    }
    fs::write(path, out).at(path)
}

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::LengthMismatch { left: hyps, right: refs });
    }
    if hyps == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn count_ngrams<T: Hash + Eq>(items: &[T], n: usize) -> HashMap<&[T], u32> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> u64 {
    let refs = count_ngrams(reference, n);
    count_ngrams(hyp, n)
        .into_iter()
        .map(|(g, c)| u64::from(c.min(refs.get(g).copied().unwrap_or(0))))
        .sum()
}

/// Accumulable statistics from which a corpus-level score is computed.
pub trait MetricStats: Clone + Default + Send + Sync + for<'a> AddAssign<&'a Self> {
    fn score(&self) -> f64;
}

pub const BLEU_ORDER: usize = 4;

/// Clipped n-gram matches and totals for orders 1..=4, plus lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; BLEU_ORDER],
    pub totals: [u64; BLEU_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    /// Lower-cased, whitespace-tokenized statistics for one sentence.
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h: Vec<String> = hyp.to_lowercase().split_whitespace().map(str::to_owned).collect();
        let r: Vec<String> = reference.to_lowercase().split_whitespace().map(str::to_owned).collect();
        let mut s = BleuStats {
            hyp_len: h.len() as u64,
            ref_len: r.len() as u64,
            ..Default::default()
        };
        for n in 1..=BLEU_ORDER {
            s.matches[n - 1] = clipped_matches(&h, &r, n);
            s.totals[n - 1] = (h.len() + 1).saturating_sub(n) as u64;
        }
        s
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// Add-one smoothing on orders 2..=4.
    pub fn smoothed_score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..BLEU_ORDER {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / BLEU_ORDER as f64).exp()
    }
}

impl AddAssign<&BleuStats> for BleuStats {
    fn add_assign(&mut self, o: &BleuStats) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

impl MetricStats for BleuStats {
    /// Unsmoothed BLEU; zero if any order has no match.
    fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..BLEU_ORDER {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / BLEU_ORDER as f64).exp()
    }
}

/// Case-insensitive corpus BLEU over whitespace tokens, in `[0, 100]`.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total += &BleuStats::sentence(h.as_ref(), r.as_ref());
    }
    Ok(total.score())
}

pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    BleuStats::sentence(hypothesis, reference).smoothed_score()
}

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Character n-gram matches and counts for orders 1..=6; whitespace is
/// removed before extracting n-grams.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChrfStats {
    pub matches: [u64; CHRF_ORDER],
    pub hyp_counts: [u64; CHRF_ORDER],
    pub ref_counts: [u64; CHRF_ORDER],
}

impl ChrfStats {
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        let mut s = ChrfStats::default();
        for n in 1..=CHRF_ORDER {
            s.matches[n - 1] = clipped_matches(&h, &r, n);
            s.hyp_counts[n - 1] = (h.len() + 1).saturating_sub(n) as u64;
            s.ref_counts[n - 1] = (r.len() + 1).saturating_sub(n) as u64;
        }
        s
    }
}

impl AddAssign<&ChrfStats> for ChrfStats {
    fn add_assign(&mut self, o: &ChrfStats) {
        for n in 0..CHRF_ORDER {
            self.matches[n] += o.matches[n];
            self.hyp_counts[n] += o.hyp_counts[n];
            self.ref_counts[n] += o.ref_counts[n];
        }
    }
}

impl MetricStats for ChrfStats {
    /// Precision and recall averaged over the orders present on both sides,
    /// combined as F-beta with beta = 2.
    fn score(&self) -> f64 {
        let (mut p, mut r, mut orders) = (0.0, 0.0, 0usize);
        for n in 0..CHRF_ORDER {
            if self.hyp_counts[n] > 0 && self.ref_counts[n] > 0 {
                p += self.matches[n] as f64 / self.hyp_counts[n] as f64;
                r += self.matches[n] as f64 / self.ref_counts[n] as f64;
                orders += 1;
            }
        }
        if orders == 0 {
            return 0.0;
        }
        let (p, r) = (p / orders as f64, r / orders as f64);
        let b2 = CHRF_BETA * CHRF_BETA;
        let denom = b2 * p + r;
        if denom == 0.0 {
            0.0
        } else {
            100.0 * (1.0 + b2) * p * r / denom
        }
    }
}

pub fn chrf2<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut total = ChrfStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total += &ChrfStats::sentence(h.as_ref(), r.as_ref());
    }
    Ok(total.score())
}

/// Externally computed per-sentence scores (e.g. TER); the corpus score is
/// their mean.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeanStats {
    pub sum: f64,
    pub count: u64,
}

impl AddAssign<&MeanStats> for MeanStats {
    fn add_assign(&mut self, o: &MeanStats) {
        self.sum += o.sum;
        self.count += o.count;
    }
}

impl MetricStats for MeanStats {
    fn score(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Bleu,
    Chrf2,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Bleu => "bleu",
            MetricKind::Chrf2 => "chrf2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub iterations: usize,
    pub sample_size: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            iterations: 1000,
            sample_size: 100,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub metric: String,
    pub iterations: usize,
    pub sample_size: usize,
    pub alpha: f64,
    pub score_a: f64,
    pub score_b: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: bool,
}

/// Paired bootstrap resampling over sentence indices.
pub fn paired_bootstrap<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    hyp_a: &[H],
    hyp_b: &[H],
    refs: &[R],
    metric: MetricKind,
    opts: BootstrapOptions,
) -> Result<SignificanceResult> {
    check_lengths(hyp_a.len(), refs.len())?;
    check_lengths(hyp_b.len(), refs.len())?;
    match metric {
        MetricKind::Bleu => {
            let a: Vec<BleuStats> = hyp_a.par_iter().zip(refs).map(|(h, r)| BleuStats::sentence(h.as_ref(), r.as_ref())).collect();
            let b: Vec<BleuStats> = hyp_b.par_iter().zip(refs).map(|(h, r)| BleuStats::sentence(h.as_ref(), r.as_ref())).collect();
            bootstrap_stats(metric.name(), &a, &b, opts)
        }
        MetricKind::Chrf2 => {
            let a: Vec<ChrfStats> = hyp_a.par_iter().zip(refs).map(|(h, r)| ChrfStats::sentence(h.as_ref(), r.as_ref())).collect();
            let b: Vec<ChrfStats> = hyp_b.par_iter().zip(refs).map(|(h, r)| ChrfStats::sentence(h.as_ref(), r.as_ref())).collect();
            bootstrap_stats(metric.name(), &a, &b, opts)
        }
    }
}

/// Paired bootstrap over externally supplied per-sentence scores.
pub fn paired_bootstrap_scores(name: &str, scores_a: &[f64], scores_b: &[f64], opts: BootstrapOptions) -> Result<SignificanceResult> {
    check_lengths(scores_a.len(), scores_b.len())?;
    let wrap = |s: &[f64]| -> Vec<MeanStats> { s.iter().map(|&v| MeanStats { sum: v, count: 1 }).collect() };
    bootstrap_stats(name, &wrap(scores_a), &wrap(scores_b), opts)
}

/// Core resampling loop. Iteration `i` draws from its own ChaCha stream so
/// results do not depend on how iterations are scheduled.
pub fn bootstrap_stats<S: MetricStats>(name: &str, a: &[S], b: &[S], opts: BootstrapOptions) -> Result<SignificanceResult> {
    check_lengths(a.len(), b.len())?;
    if opts.iterations == 0 {
        return Err(Error::Validation("bootstrap needs at least one iteration".into()));
    }
    if opts.sample_size == 0 || opts.sample_size > a.len() {
        return Err(Error::Validation(format!(
            "sample size {} must be in 1..={}",
            opts.sample_size,
            a.len()
        )));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Validation(format!("alpha {} must be in (0, 1)", opts.alpha)));
    }
    let total = |s: &[S]| {
        let mut acc = S::default();
        s.iter().for_each(|x| acc += x);
        acc.score()
    };
    let score_a = total(a);
    let score_b = total(b);
    let delta = score_a - score_b;

    let mut diffs: Vec<f64> = (0..opts.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let (mut sa, mut sb) = (S::default(), S::default());
            for _ in 0..opts.sample_size {
                let j = rng.gen_range(0..a.len());
                sa += &a[j];
                sb += &b[j];
            }
            sa.score() - sb.score()
        })
        .collect();

    let (p_value, significant) = if delta == 0.0 {
        (1.0, false)
    } else {
        let contradicting = diffs.iter().filter(|&&d| d * delta.signum() <= 0.0).count();
        let p = contradicting as f64 / opts.iterations as f64;
        (p, p < opts.alpha)
    };

    diffs.sort_by(f64::total_cmp);
    let last = diffs.len() - 1;
    let lo = ((opts.alpha / 2.0) * diffs.len() as f64).floor() as usize;
    let hi = ((1.0 - opts.alpha / 2.0) * diffs.len() as f64).ceil() as usize;
    Ok(SignificanceResult {
        metric: name.to_owned(),
        iterations: opts.iterations,
        sample_size: opts.sample_size,
        alpha: opts.alpha,
        score_a,
        score_b,
        p_value,
        ci_low: diffs[lo.min(last)],
        ci_high: diffs[hi.saturating_sub(1).min(last)],
        significant,
    })
}

pub fn write_significance_tsv(path: impl AsRef<Path>, results: &[SignificanceResult]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("metric\tsample_size\tp_value\tci_low\tci_high\tsignificant\n");
    for r in results {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            r.metric, r.sample_size, r.p_value, r.ci_low, r.ci_high, r.significant
        );
    }
    fs::write(path, out).at(path)
}

/// One float per line.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|_| Error::Malformed {
                what: "score file",
                detail: format!("{}:{}: not a number: {l:?}", path.display(), i + 1),
            })
        })
        .collect()
}
