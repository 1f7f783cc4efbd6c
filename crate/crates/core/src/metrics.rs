//! Diversity and quality measures over sets of token sequences.
//!
//! Texts are slices of any hashable, ordered symbol type, so the same
//! functions serve surface tokens, ids and POS tags. Rates are fractions in
//! `[0, 1]`; BLEU scores are on the 0..100 scale.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedCorpus, PosPartition};
use crate::decode::generation_rng;
use crate::heads::{self, HeadKind};
use crate::net::{self, Mode, Model, NetError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} texts, got {got}")]
    TooFewTexts { needed: usize, got: usize },
    #[error("text {0} is empty")]
    EmptyText(usize),
    #[error("no text has {0} or more symbols")]
    TooShort(usize),
    #[error("inputs have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation is undefined for a constant input")]
    ZeroVariance,
    #[error("non-finite log-probability at target {0}")]
    NonFinite(usize),
    #[error("the POS head needs a partition")]
    MissingPartition,
    #[error(transparent)]
    Net(#[from] NetError),
}

fn check_texts<T>(texts: &[Vec<T>], needed: usize) -> Result<(), MetricsError> {
    if texts.len() < needed {
        return Err(MetricsError::TooFewTexts {
            needed,
            got: texts.len(),
        });
    }
    match texts.iter().position(|t| t.is_empty()) {
        Some(i) => Err(MetricsError::EmptyText(i)),
        None => Ok(()),
    }
}

fn ngram_counts<T: Hash + Eq>(text: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if text.len() >= n {
        for g in text.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// N-gram counts of one text for orders `1..=max_n`.
struct NgramProfile<'a, T> {
    len: usize,
    counts: Vec<HashMap<&'a [T], usize>>,
}

impl<'a, T: Hash + Eq> NgramProfile<'a, T> {
    fn new(text: &'a [T], max_n: usize) -> Self {
        Self {
            len: text.len(),
            counts: (1..=max_n).map(|n| ngram_counts(text, n)).collect(),
        }
    }
}

fn bleu_profiles<T: Hash + Eq>(hyp: &NgramProfile<'_, T>, refs: &[&NgramProfile<'_, T>], max_n: usize) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hc = &hyp.counts[n - 1];
        let total = hyp.len.saturating_sub(n - 1) as f64;
        let matched: usize = hc
            .iter()
            .map(|(g, &c)| {
                let best = refs.iter().map(|r| r.counts[n - 1].get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(best)
            })
            .sum();
        let precision = if matched > 0 {
            matched as f64 / total
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total + 1.0)
        };
        log_sum += precision.ln();
    }
    // Closest reference length, shorter on ties.
    let c = hyp.len as f64;
    let r = refs
        .iter()
        .map(|p| p.len)
        .min_by_key(|&l| ((l as i64 - hyp.len as i64).abs(), l))
        .unwrap_or(0) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

/// Sentence BLEU: clipped n-gram precisions for `n = 1..=max_n`, geometric
/// mean, closest-length brevity penalty. A zero precision at `n >= 2` becomes
/// `1 / (c + 1)` for `c` hypothesis n-grams; no unigram overlap scores 0.
pub fn bleu<T: Hash + Eq>(hypothesis: &[T], references: &[&[T]], max_n: usize) -> f64 {
    assert!(max_n >= 1 && !hypothesis.is_empty() && !references.is_empty());
    let hyp = NgramProfile::new(hypothesis, max_n);
    let refs: Vec<NgramProfile<'_, T>> = references.iter().map(|r| NgramProfile::new(r, max_n)).collect();
    bleu_profiles(&hyp, &refs.iter().collect::<Vec<_>>(), max_n)
}

/// Reference subsampling for Self-BLEU on large sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleuOptions {
    pub max_n: usize,
    /// With more texts than this, each hypothesis is scored against a uniform
    /// sample of this many other texts.
    pub max_references: usize,
    pub seed: u64,
}

impl Default for SelfBleuOptions {
    fn default() -> Self {
        Self {
            max_n: 4,
            max_references: 500,
            seed: 0,
        }
    }
}

/// Mean BLEU of each text against all the others.
pub fn self_bleu<T: Hash + Eq + Sync>(texts: &[Vec<T>], options: &SelfBleuOptions) -> Result<f64, MetricsError> {
    check_texts(texts, 2)?;
    let profiles: Vec<NgramProfile<'_, T>> = texts.iter().map(|t| NgramProfile::new(t, options.max_n)).collect();
    let n = texts.len();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<usize> = if n - 1 > options.max_references {
                let mut rng = generation_rng(options.seed, i as u64);
                sample(&mut rng, n - 1, options.max_references)
                    .into_iter()
                    .map(|j| if j >= i { j + 1 } else { j })
                    .collect()
            } else {
                (0..n).filter(|&j| j != i).collect()
            };
            let refs: Vec<&NgramProfile<'_, T>> = others.iter().map(|&j| &profiles[j]).collect();
            bleu_profiles(&profiles[i], &refs, options.max_n)
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Unique n-grams over total n-grams, pooled across the set.
pub fn distinct_n<T: Hash + Eq>(texts: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for t in texts.iter().filter(|t| t.len() >= n) {
        for g in t.windows(n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::TooShort(n));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Distinct n-grams of POS tag sequences.
pub fn distinct_npos<T: Hash + Eq>(pos_sequences: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    distinct_n(pos_sequences, n)
}

/// Number of distinct symbols across all texts.
pub fn uniq<T: Hash + Eq>(texts: &[Vec<T>]) -> usize {
    texts.iter().flatten().collect::<HashSet<_>>().len()
}

/// Whether `text` ends with at least `min_repeats` back-to-back copies of
/// some phrase of length `1..=max_phrase`.
pub fn ends_in_loop<T: Eq>(text: &[T], max_phrase: usize, min_repeats: usize) -> bool {
    let len = text.len();
    (1..=max_phrase).any(|l| {
        let span = l * min_repeats;
        span <= len && (len - span..len - l).all(|i| text[i] == text[i + l])
    })
}

/// Fraction of texts ending in a repetition loop.
pub fn rep<T: Eq + Sync>(texts: &[Vec<T>], max_phrase: usize, min_repeats: usize) -> Result<f64, MetricsError> {
    check_texts(texts, 1)?;
    let loops = texts.par_iter().filter(|t| ends_in_loop(t, max_phrase, min_repeats)).count();
    Ok(loops as f64 / texts.len() as f64)
}

fn unigram_counts<T: Hash + Eq + Ord>(texts: &[Vec<T>]) -> BTreeMap<&T, usize> {
    let mut counts = BTreeMap::new();
    for w in texts.iter().flatten() {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// `KL(P_ref || P_gen)` over the union of observed symbols, each
/// distribution smoothed by adding one to every count.
pub fn kld_unigram<T: Hash + Eq + Ord>(generated: &[Vec<T>], reference: &[Vec<T>]) -> Result<f64, MetricsError> {
    check_texts(generated, 1)?;
    check_texts(reference, 1)?;
    let g = unigram_counts(generated);
    let r = unigram_counts(reference);
    let support: std::collections::BTreeSet<&T> = g.keys().chain(r.keys()).copied().collect();
    let k = support.len() as f64;
    let ng: usize = g.values().sum();
    let nr: usize = r.values().sum();
    let kl = support
        .iter()
        .map(|w| {
            let p = (r.get(w).copied().unwrap_or(0) as f64 + 1.0) / (nr as f64 + k);
            let q = (g.get(w).copied().unwrap_or(0) as f64 + 1.0) / (ng as f64 + k);
            p * (p / q).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

fn relative_ngram_freqs<T: Hash + Eq>(texts: &[Vec<T>], n: usize) -> HashMap<&[T], f64> {
    let mut counts: HashMap<&[T], f64> = HashMap::new();
    let mut total = 0.0;
    for t in texts.iter().filter(|t| t.len() >= n) {
        for g in t.windows(n) {
            *counts.entry(g).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    counts.values_mut().for_each(|c| *c /= total);
    counts
}

// Hash iteration order varies between processes; sorting first keeps sums reproducible.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `sum_g min(f_gen, f_ref) / sum_g max(f_gen, f_ref)` over relative n-gram frequencies.
pub fn ms_jaccard<T: Hash + Eq>(generated: &[Vec<T>], reference: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    let g = relative_ngram_freqs(generated, n);
    let r = relative_ngram_freqs(reference, n);
    if g.is_empty() || r.is_empty() {
        return Err(MetricsError::TooShort(n));
    }
    let mut lo = Vec::with_capacity(g.len());
    let mut hi = Vec::with_capacity(g.len() + r.len());
    for (gram, &fg) in &g {
        let fr = r.get(gram).copied().unwrap_or(0.0);
        lo.push(fg.min(fr));
        hi.push(fg.max(fr));
    }
    hi.extend(r.iter().filter(|(gram, _)| !g.contains_key(*gram)).map(|(_, &f)| f));
    let (lo, hi) = (ordered_sum(lo), ordered_sum(hi));
    Ok(lo / hi)
}

/// Pearson's r.
pub fn ppmcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFewTexts { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `exp` of the mean negative log-likelihood of every target in the
/// `BOS .. EOS`-wrapped test sequences. The POS head is scored by its
/// marginal token distribution.
pub fn perplexity(model: &Model, partition: Option<&PosPartition>, test: &EncodedCorpus) -> Result<f64, MetricsError> {
    if model.head == HeadKind::Posg && partition.is_none() {
        return Err(MetricsError::MissingPartition);
    }
    let windows = net::make_windows(test, model.config.context_len);
    let per_window: Vec<Result<Vec<f64>, MetricsError>> = windows
        .par_iter()
        .map(|w| {
            let hidden = net::forward(&model.params, &model.config, &w.inputs, Mode::Eval)?;
            w.targets
                .iter()
                .enumerate()
                .map(|(t, &x)| {
                    let h = hidden.row(t);
                    let p = match (model.head, partition) {
                        (HeadKind::Posg, Some(part)) => {
                            let joint = heads::joint_distribution(&model.params, part, h).map_err(NetError::from)?;
                            heads::marginal_token_distribution(&joint).prob(x)
                        }
                        _ => heads::mle_distribution(&model.params, h).map_err(NetError::from)?.prob(x),
                    };
                    Ok(p.ln())
                })
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for w in per_window {
        for lp in w? {
            if !lp.is_finite() {
                return Err(MetricsError::NonFinite(count));
            }
            total -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::TooShort(1));
    }
    Ok((total / count as f64).exp())
}

/// How each reported number was computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSettings {
    pub ngram_orders: Vec<usize>,
    pub bleu_max_n: usize,
    pub bleu_smoothing: String,
    pub self_bleu_max_references: usize,
    pub self_bleu_seed: u64,
    pub distinct: String,
    pub kld: String,
    pub ms_jaccard: String,
    pub rep_max_phrase: usize,
    pub rep_min_repeats: usize,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            ngram_orders: vec![1, 2, 3],
            bleu_max_n: 4,
            bleu_smoothing: "add-one on zero precisions for n >= 2".into(),
            self_bleu_max_references: 500,
            self_bleu_seed: 0,
            distinct: "pooled over the set".into(),
            kld: "KL(reference || generated), unigram, add-one over the union support".into(),
            ms_jaccard: "sum min / sum max of relative n-gram frequencies, per n".into(),
            rep_max_phrase: 10,
            rep_min_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub settings: MetricsSettings,
    pub texts: usize,
}

/// Texts and optional aligned tag sequences.
pub struct TextSet<'a> {
    pub texts: &'a [Vec<String>],
    pub pos: Option<&'a [Vec<String>]>,
}

// Orders longer than every text are left out of the report.
fn put(m: &mut BTreeMap<String, f64>, key: String, value: Result<f64, MetricsError>) -> Result<(), MetricsError> {
    match value {
        Ok(v) => {
            m.insert(key, v);
            Ok(())
        }
        Err(MetricsError::TooShort(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

/// Generation metrics: `self_bleu`, `distinct_n`, `uniq`, `rep`, and, given
/// references, `self_bleu_vs_reference` (each text scored against the whole
/// reference set), `kld` and `ms_jaccard_n`; `distinct_n_pos` when tags are present.
pub fn evaluate_texts(
    generated: &TextSet<'_>,
    reference: Option<&TextSet<'_>>,
    settings: &MetricsSettings,
) -> Result<MetricsReport, MetricsError> {
    let texts = generated.texts;
    check_texts(texts, 1)?;
    let mut m = BTreeMap::new();
    if texts.len() >= 2 {
        let options = SelfBleuOptions {
            max_n: settings.bleu_max_n,
            max_references: settings.self_bleu_max_references,
            seed: settings.self_bleu_seed,
        };
        m.insert("self_bleu".into(), self_bleu(texts, &options)?);
    }
    for &n in &settings.ngram_orders {
        put(&mut m, format!("distinct_{n}"), distinct_n(texts, n))?;
        if let Some(pos) = generated.pos {
            put(&mut m, format!("distinct_{n}_pos"), distinct_npos(pos, n))?;
        }
    }
    m.insert("uniq".into(), uniq(texts) as f64);
    m.insert("rep".into(), rep(texts, settings.rep_max_phrase, settings.rep_min_repeats)?);
    if let Some(r) = reference {
        check_texts(r.texts, 1)?;
        let refs: Vec<&[String]> = r.texts.iter().map(Vec::as_slice).collect();
        let scores: Vec<f64> = texts.par_iter().map(|t| bleu(t, &refs, settings.bleu_max_n)).collect();
        let total: f64 = scores.iter().sum();
        m.insert("self_bleu_vs_reference".into(), total / texts.len() as f64);
        m.insert("kld".into(), kld_unigram(texts, r.texts)?);
        for &n in &settings.ngram_orders {
            put(&mut m, format!("ms_jaccard_{n}"), ms_jaccard(texts, r.texts, n))?;
        }
    }
    Ok(MetricsReport {
        metrics: m,
        settings: settings.clone(),
        texts: texts.len(),
    })
}
