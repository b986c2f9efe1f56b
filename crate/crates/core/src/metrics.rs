//! Evaluation metrics: macro classification scores, saliency mIoU and the
//! BLEU-4 / ROUGE-L / CIDEr caption scores.
//!
//! Text metrics work on any token type with equality, so they depend only on
//! which tokens match and never on their ids or spelling.

use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, DefaultHasher, Hash};

use crate::error::{MeglError, Result};
use crate::types::{Normalization, SaliencyMap};

// Fixed-key hashing: iteration order, and with it every floating-point sum
// over n-grams, is the same on every run.
type FixedState = BuildHasherDefault<DefaultHasher>;
type Map<K, V> = HashMap<K, V, FixedState>;
type Set<K> = HashSet<K, FixedState>;

/// `C x C` counts, rows indexed by the true class, columns by the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        ConfusionAccumulator { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(MeglError::ShapeMismatch(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionAccumulator { classes, counts })
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        assert!(truth < self.classes && pred < self.classes, "class index out of range");
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus macro precision, recall and F1. Per-class 0/0 counts as 0.
pub fn classification_report(acc: &ConfusionAccumulator) -> Result<ClassificationReport> {
    let total = acc.total();
    if total == 0 {
        return Err(MeglError::EmptyAccumulator);
    }
    let c = acc.classes;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let tp = acc.count(k, k);
        let predicted: u64 = (0..c).map(|t| acc.count(t, k)).sum();
        let actual: u64 = (0..c).map(|p| acc.count(k, p)).sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    Ok(ClassificationReport {
        accuracy: ratio(acc.trace(), total),
        macro_precision: p_sum / c as f64,
        macro_recall: r_sum / c as f64,
        macro_f1: f_sum / c as f64,
    })
}

/// Intersection over union after binarizing both min-max maps at `v >= threshold`.
/// Two empty masks agree perfectly and score 1.
pub fn miou(pred: &SaliencyMap, truth: &SaliencyMap, threshold: f64) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(MeglError::ShapeMismatch(format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    for m in [pred, truth] {
        if m.normalization() != Normalization::MinMax {
            return Err(MeglError::NormalizationMismatch {
                expected: Normalization::MinMax.to_string(),
                found: m.normalization().to_string(),
            });
        }
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.grid().iter().zip(truth.grid()) {
        let (a, b) = (*a >= threshold, *b >= threshold);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn ngram_counts<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> Map<&[T], usize> {
    let mut m = Map::default();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU-4 with uniform weights and the brevity penalty against the closest
/// reference length (the shorter one on ties).
///
/// Without smoothing the score is 0 whenever some n-gram order has no match.
/// With smoothing, orders 2 to 4 get one added to both matched and total counts.
pub fn bleu4<T: Hash + Eq + Clone>(candidate: &[T], references: &[Vec<T>], smoothing: bool) -> Result<f64> {
    if candidate.is_empty() {
        return Err(MeglError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(MeglError::EmptyInput);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: Map<&[T], usize> = Map::default();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1);
        let (m, t) = if smoothing && n > 1 { (matched + 1, total + 1) } else { (matched, total) };
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by(|a, b| (*a as f64 - c).abs().total_cmp(&(*b as f64 - c).abs()).then(a.cmp(b)))
        .unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with recall weighted by `beta = 1.2`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MeglError::EmptyInput);
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Document frequencies of 1- to 4-grams over a reference corpus, where each
/// document is the reference set of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats<T: Hash + Eq> {
    df: Map<Vec<T>, usize>,
    docs: usize,
}

impl<T: Hash + Eq + Clone> CorpusStats<T> {
    pub fn new(reference_sets: &[Vec<Vec<T>>]) -> Self {
        let mut df: Map<Vec<T>, usize> = Map::default();
        for refs in reference_sets {
            let mut seen: Set<&[T]> = Set::default();
            for r in refs {
                for n in 1..=4 {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        CorpusStats { df, docs: reference_sets.len() }
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn idf(&self, gram: &[T]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        (self.docs as f64 / df as f64).ln()
    }
}

fn tfidf<'a, T: Hash + Eq + Clone>(tokens: &'a [T], n: usize, stats: &CorpusStats<T>) -> Map<&'a [T], f64> {
    ngram_counts(tokens, n).into_iter().map(|(g, c)| (g, c as f64 * stats.idf(g))).collect()
}

fn cosine<T: Hash + Eq>(a: &Map<&[T], f64>, b: &Map<&[T], f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// TF-IDF n-gram cosine similarity averaged over references and n = 1..4, times 10.
pub fn cider<T: Hash + Eq + Clone>(candidate: &[T], references: &[Vec<T>], stats: Option<&CorpusStats<T>>) -> Result<f64> {
    let stats = stats.ok_or(MeglError::MissingCorpusStats)?;
    if candidate.is_empty() {
        return Err(MeglError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(MeglError::EmptyInput);
    }
    let mut score = 0.0;
    for n in 1..=4 {
        let c = tfidf(candidate, n, stats);
        let s: f64 = references.iter().map(|r| cosine(&c, &tfidf(r, n, stats))).sum();
        score += s / references.len() as f64;
    }
    Ok(10.0 * score / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// Mean sentence-level scores over a corpus. ROUGE-L takes the best reference;
/// document frequencies come from `references` itself. Empty candidates
/// score 0 on every metric.
pub fn text_scores<T: Hash + Eq + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], smoothing: bool) -> Result<TextScores> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(MeglError::EmptyInput);
    }
    let stats = CorpusStats::new(references);
    let (mut b, mut r, mut c) = (0.0, 0.0, 0.0);
    for (cand, refs) in candidates.iter().zip(references) {
        if cand.is_empty() {
            continue;
        }
        b += bleu4(cand, refs, smoothing)?;
        let mut best = 0.0f64;
        for x in refs {
            best = best.max(rouge_l(cand, x)?);
        }
        r += best;
        c += cider(cand, refs, Some(&stats))?;
    }
    let n = candidates.len() as f64;
    Ok(TextScores { bleu4: b / n, rouge_l: r / n, cider: c / n })
}
