//! Output heads: the plain softmax over the vocabulary and the POS-factorized
//! head, where `p(x, rho | ctx) = p(rho | ctx) * p(x | rho, ctx)` and the
//! token factor is a softmax restricted to the cell `V_rho`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PosPartition;
use crate::net::{HiddenStates, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("hidden state has dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("hidden state contains a non-finite value")]
    NonFinite,
    #[error("POS id {0} is out of range")]
    BadPos(usize),
    #[error("POS {0} has an empty cell")]
    EmptyCell(usize),
    #[error("position {position}: token {token} is not in the cell of POS {pos}")]
    GoldInconsistent { position: usize, token: usize, pos: usize },
    #[error("gold sequences have lengths {tokens} and {pos}, hidden states {hidden}")]
    Length { tokens: usize, pos: usize, hidden: usize },
    #[error("invalid distribution: {0}")]
    Distribution(String),
}

/// Which output layer a model is trained and decoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mle,
    Posg,
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mle" => Ok(Self::Mle),
            "posg" => Ok(Self::Posg),
            _ => Err(format!("unknown head {s:?} (expected mle or posg)")),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mle => "mle",
            Self::Posg => "posg",
        })
    }
}

/// A normalized probability vector over a sorted, duplicate-free support.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    support: Vec<usize>,
    probs: Vec<f64>,
}

pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

impl CategoricalDist {
    pub fn new(support: Vec<usize>, probs: Vec<f64>) -> Result<Self, HeadError> {
        let bad = |m: &str| Err(HeadError::Distribution(m.into()));
        if support.len() != probs.len() {
            return bad("support and probabilities differ in length");
        }
        if support.is_empty() {
            return bad("empty support");
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return bad("support is not strictly increasing");
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("probabilities must be finite and non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(HeadError::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { support, probs })
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn from_weights(support: Vec<usize>, weights: Vec<f64>) -> Result<Self, HeadError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(HeadError::Distribution(format!("weights sum to {total}")));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Self::new(support, probs)
    }

    /// Softmax of `logits` (max-subtracted).
    pub fn from_logits(support: Vec<usize>, logits: &[f64]) -> Result<Self, HeadError> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        Self::from_weights(support, exps)
    }

    /// Uniform over `0..n`.
    pub fn uniform(n: usize) -> Self {
        Self {
            support: (0..n).collect(),
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(id: usize) -> Self {
        Self {
            support: vec![id],
            probs: vec![1.0],
        }
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    /// Probability of `id`; zero outside the support.
    pub fn prob(&self, id: usize) -> f64 {
        self.support.binary_search(&id).map_or(0.0, |i| self.probs[i])
    }

    pub fn contains(&self, id: usize) -> bool {
        self.support.binary_search(&id).is_ok()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Most probable id, lowest id on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        self.support[best]
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (id, p) in self.iter() {
            acc += p;
            if u < acc {
                return id;
            }
        }
        // Rounding left `u` past the accumulated mass; take the last item with mass.
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(self.len() - 1);
        self.support[last]
    }
}

/// `p(rho)` together with `p(x | rho)` for every tag with positive mass.
/// Conditionals are stored per cell, never as a dense tag-by-token table.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    pos_dist: CategoricalDist,
    conditionals: Vec<Option<CategoricalDist>>,
}

impl JointDist {
    /// `conditionals` is indexed by POS id and must have an entry for every tag
    /// with positive probability.
    pub fn new(pos_dist: CategoricalDist, conditionals: Vec<Option<CategoricalDist>>) -> Result<Self, HeadError> {
        for (rho, p) in pos_dist.iter() {
            if rho >= conditionals.len() {
                return Err(HeadError::BadPos(rho));
            }
            if p > 0.0 && conditionals[rho].is_none() {
                return Err(HeadError::EmptyCell(rho));
            }
        }
        Ok(Self { pos_dist, conditionals })
    }

    pub fn pos_dist(&self) -> &CategoricalDist {
        &self.pos_dist
    }

    pub fn conditional(&self, pos: usize) -> Option<&CategoricalDist> {
        self.conditionals.get(pos).and_then(Option::as_ref)
    }

    pub fn pos_count(&self) -> usize {
        self.conditionals.len()
    }

    /// `p(x, rho)`, zero when `x` is outside the cell.
    pub fn joint_prob(&self, token: usize, pos: usize) -> f64 {
        let p = self.pos_dist.prob(pos);
        if p == 0.0 {
            return 0.0;
        }
        self.conditional(pos).map_or(0.0, |c| p * c.prob(token))
    }
}

fn check_hidden(params: &ModelParams, h: ArrayView1<f64>) -> Result<(), HeadError> {
    let d = params.d_model();
    if h.len() != d {
        return Err(HeadError::Dimension {
            expected: d,
            found: h.len(),
        });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(HeadError::NonFinite);
    }
    Ok(())
}

/// `h^T w_x` for every token.
pub fn token_logits(params: &ModelParams, h: ArrayView1<f64>) -> Vec<f64> {
    params.token_output.dot(&h).to_vec()
}

/// `h^T o_rho` for every tag.
pub fn pos_logits(params: &ModelParams, h: ArrayView1<f64>) -> Vec<f64> {
    params.pos_output.dot(&h).to_vec()
}

/// The standard softmax head over the full vocabulary.
pub fn mle_distribution(params: &ModelParams, h: ArrayView1<f64>) -> Result<CategoricalDist, HeadError> {
    check_hidden(params, h)?;
    let logits = token_logits(params, h);
    CategoricalDist::from_logits((0..logits.len()).collect(), &logits)
}

pub fn pos_distribution(params: &ModelParams, h: ArrayView1<f64>) -> Result<CategoricalDist, HeadError> {
    check_hidden(params, h)?;
    let logits = pos_logits(params, h);
    CategoricalDist::from_logits((0..logits.len()).collect(), &logits)
}

fn cell_distribution(partition: &PosPartition, logits: &[f64], pos: usize) -> Result<CategoricalDist, HeadError> {
    if pos >= partition.pos_count() {
        return Err(HeadError::BadPos(pos));
    }
    let members = partition.members(pos);
    if members.is_empty() {
        return Err(HeadError::EmptyCell(pos));
    }
    let cell: Vec<f64> = members.iter().map(|&x| logits[x]).collect();
    CategoricalDist::from_logits(members.to_vec(), &cell)
}

/// Token softmax renormalized within `V_pos`; support is exactly the cell.
pub fn token_distribution_given_pos(
    params: &ModelParams,
    partition: &PosPartition,
    h: ArrayView1<f64>,
    pos: usize,
) -> Result<CategoricalDist, HeadError> {
    check_hidden(params, h)?;
    let logits = token_logits(params, h);
    cell_distribution(partition, &logits, pos)
}

pub fn joint_distribution(
    params: &ModelParams,
    partition: &PosPartition,
    h: ArrayView1<f64>,
) -> Result<JointDist, HeadError> {
    let pos_dist = pos_distribution(params, h)?;
    let logits = token_logits(params, h);
    let conditionals = (0..partition.pos_count())
        .map(|rho| cell_distribution(partition, &logits, rho).map(Some))
        .collect::<Result<Vec<_>, _>>()?;
    JointDist::new(pos_dist, conditionals)
}

/// `p(x) = sum_rho p(rho) p(x | rho)` over the union of the cells.
pub fn marginal_token_distribution(joint: &JointDist) -> CategoricalDist {
    mixture(joint.pos_dist.iter().filter_map(|(rho, p)| {
        let cond = joint.conditional(rho)?;
        (p > 0.0).then_some((p, cond))
    }))
}

/// Exact mixture of weighted component distributions; weights must sum to one.
pub(crate) fn mixture<'a>(components: impl Iterator<Item = (f64, &'a CategoricalDist)>) -> CategoricalDist {
    let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (w, dist) in components {
        for (x, p) in dist.iter() {
            *acc.entry(x).or_insert(0.0) += w * p;
        }
    }
    let (support, probs): (Vec<usize>, Vec<f64>) = acc.into_iter().unzip();
    let total: f64 = probs.iter().sum();
    CategoricalDist {
        support,
        probs: probs.into_iter().map(|p| p / total).collect(),
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean per-token negative log-likelihood under the plain softmax head.
pub fn mle_loss(params: &ModelParams, hidden: &HiddenStates, gold_tokens: &[usize]) -> Result<f64, HeadError> {
    if gold_tokens.len() != hidden.len() {
        return Err(HeadError::Length {
            tokens: gold_tokens.len(),
            pos: gold_tokens.len(),
            hidden: hidden.len(),
        });
    }
    let mut total = 0.0;
    for (t, &x) in gold_tokens.iter().enumerate() {
        let h = hidden.row(t);
        check_hidden(params, h)?;
        let logits = token_logits(params, h);
        total += log_sum_exp(logits.iter().copied()) - logits[x];
    }
    Ok(total / gold_tokens.len() as f64)
}

/// Mean per-token `-[log p(rho_t) + log p(x_t | rho_t)]`.
pub fn posg_loss(
    params: &ModelParams,
    partition: &PosPartition,
    hidden: &HiddenStates,
    gold_tokens: &[usize],
    gold_pos: &[usize],
) -> Result<f64, HeadError> {
    if gold_tokens.len() != hidden.len() || gold_pos.len() != hidden.len() {
        return Err(HeadError::Length {
            tokens: gold_tokens.len(),
            pos: gold_pos.len(),
            hidden: hidden.len(),
        });
    }
    let mut total = 0.0;
    for (t, (&x, &rho)) in gold_tokens.iter().zip(gold_pos).enumerate() {
        if rho >= partition.pos_count() {
            return Err(HeadError::BadPos(rho));
        }
        if !partition.contains(rho, x) {
            return Err(HeadError::GoldInconsistent {
                position: t,
                token: x,
                pos: rho,
            });
        }
        let h = hidden.row(t);
        check_hidden(params, h)?;
        let pl = pos_logits(params, h);
        let tl = token_logits(params, h);
        let cell = partition.members(rho).iter().map(|&y| tl[y]);
        total += log_sum_exp(pl.iter().copied()) - pl[rho] + log_sum_exp(cell) - tl[x];
    }
    Ok(total / gold_tokens.len() as f64)
}

/// Summed head loss over the rows of `hidden`, plus gradients with respect to
/// the hidden states and the output embeddings (accumulated into `grads`).
pub(crate) fn head_loss_and_grads(
    params: &ModelParams,
    partition: Option<&PosPartition>,
    kind: HeadKind,
    hidden: ArrayView2<f64>,
    targets: &[(usize, usize)],
    scale: f64,
    grads: &mut ModelParams,
) -> Result<(f64, Array2<f64>), HeadError> {
    let t_len = hidden.nrows();
    let tok_logits = hidden.dot(&params.token_output.t());
    let mut d_tok = Array2::<f64>::zeros(tok_logits.raw_dim());
    let mut loss = 0.0;
    let mut d_pos = None;

    match kind {
        HeadKind::Mle => {
            for t in 0..t_len {
                let (x, _) = targets[t];
                let row = tok_logits.row(t);
                let lse = log_sum_exp(row.iter().copied());
                loss += lse - row[x];
                let mut drow = d_tok.row_mut(t);
                for (d, &l) in drow.iter_mut().zip(row.iter()) {
                    *d = (l - lse).exp() * scale;
                }
                drow[x] -= scale;
            }
        }
        HeadKind::Posg => {
            let partition = partition.expect("POS head needs a partition");
            let p_logits = hidden.dot(&params.pos_output.t());
            let mut dp = Array2::<f64>::zeros(p_logits.raw_dim());
            for t in 0..t_len {
                let (x, rho) = targets[t];
                if !partition.contains(rho, x) {
                    return Err(HeadError::GoldInconsistent {
                        position: t,
                        token: x,
                        pos: rho,
                    });
                }
                let prow = p_logits.row(t);
                let lse = log_sum_exp(prow.iter().copied());
                loss += lse - prow[rho];
                let mut drow = dp.row_mut(t);
                for (d, &l) in drow.iter_mut().zip(prow.iter()) {
                    *d = (l - lse).exp() * scale;
                }
                drow[rho] -= scale;

                let trow = tok_logits.row(t);
                let cell = partition.members(rho);
                let clse = log_sum_exp(cell.iter().map(|&y| trow[y]));
                loss += clse - trow[x];
                let mut drow = d_tok.row_mut(t);
                for &y in cell {
                    drow[y] = (trow[y] - clse).exp() * scale;
                }
                drow[x] -= scale;
            }
            grads.pos_output += &dp.t().dot(&hidden);
            d_pos = Some(dp);
        }
    }
    grads.token_output += &d_tok.t().dot(&hidden);
    let mut d_hidden = d_tok.dot(&params.token_output);
    if let Some(dp) = d_pos {
        d_hidden += &dp.dot(&params.pos_output);
    }
    if !loss.is_finite() {
        return Err(HeadError::NonFinite);
    }
    Ok((loss, d_hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ModelConfig, ModelParams};
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn config(vocab: usize, pos: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 6,
            d_ff: 8,
            context_len: 4,
            vocab_size: vocab,
            pos_count: pos,
            dropout_rate: 0.0,
            seed: 9,
        }
    }

    fn random_h(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn overlapping_partition(vocab: usize, pos: usize) -> PosPartition {
        // Token x belongs to tag x % pos, and every third token also to the next tag.
        let sets = (0..vocab)
            .map(|x| {
                let mut s = vec![x % pos];
                if x % 3 == 0 && pos > 1 {
                    s.push((x + 1) % pos);
                }
                s
            })
            .collect();
        PosPartition::from_tag_sets(sets, pos).unwrap()
    }

    #[test]
    fn zero_embeddings_give_uniform() {
        let mut p = ModelParams::init(&config(10, 3));
        p.token_output.fill(0.0);
        p.pos_output.fill(0.0);
        let h = Array1::from_elem(6, 0.7);
        let d = mle_distribution(&p, h.view()).unwrap();
        assert!(d.probs().iter().all(|&q| (q - 0.1).abs() < 1e-15));
        let d = pos_distribution(&p, h.view()).unwrap();
        assert!(d.probs().iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn forced_two_token_arithmetic() {
        let mut p = ModelParams::init(&config(2, 1));
        p.token_output.fill(0.0);
        p.token_output[[1, 0]] = 3f64.ln();
        let mut h = Array1::zeros(6);
        h[0] = 1.0;
        let d = mle_distribution(&p, h.view()).unwrap();
        assert!((d.probs()[0] - 0.25).abs() < 1e-15);
        assert!((d.probs()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mle_matches_exhaustive_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = config(50, 4);
        for trial in 0..20 {
            cfg.seed = trial;
            let p = ModelParams::init_with_scale(&cfg, 0.5);
            let h = random_h(&mut rng, 6);
            let d = mle_distribution(&p, h.view()).unwrap();
            let scores: Vec<f64> = (0..50)
                .map(|x| (0..6).map(|j| h[j] * p.token_output[[x, j]]).sum::<f64>().exp())
                .collect();
            let z: f64 = scores.iter().sum();
            for x in 0..50 {
                assert!((d.probs()[x] - scores[x] / z).abs() < 1e-12);
            }
            let pd = pos_distribution(&p, h.view()).unwrap();
            let scores: Vec<f64> = (0..4)
                .map(|r| (0..6).map(|j| h[j] * p.pos_output[[r, j]]).sum::<f64>().exp())
                .collect();
            let z: f64 = scores.iter().sum();
            for r in 0..4 {
                assert!((pd.probs()[r] - scores[r] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pos_support_matches_inventory_size() {
        let p = ModelParams::init(&config(60, 46));
        let d = pos_distribution(&p, Array1::from_elem(6, 0.1).view()).unwrap();
        assert_eq!(d.len(), 46);
    }

    #[test]
    fn singleton_cell_is_point_mass() {
        let partition = PosPartition::from_tag_sets(vec![vec![0], vec![0], vec![1]], 2).unwrap();
        let p = ModelParams::init_with_scale(&config(3, 2), 1.0);
        let d = token_distribution_given_pos(&p, &partition, Array1::from_elem(6, 0.3).view(), 1).unwrap();
        assert_eq!(d.support(), &[2]);
        assert_eq!(d.probs(), &[1.0]);
    }

    #[test]
    fn full_cell_equals_mle() {
        let partition = PosPartition::from_tag_sets(vec![vec![0]; 12], 1).unwrap();
        let p = ModelParams::init_with_scale(&config(12, 1), 1.0);
        let h = Array1::from_elem(6, 0.4);
        let a = token_distribution_given_pos(&p, &partition, h.view(), 0).unwrap();
        let b = mle_distribution(&p, h.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_matches_mask_and_renormalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let partition = overlapping_partition(40, 5);
        let mut cfg = config(40, 5);
        for trial in 0..20 {
            cfg.seed = 100 + trial;
            let p = ModelParams::init_with_scale(&cfg, 0.7);
            let h = random_h(&mut rng, 6);
            let full = mle_distribution(&p, h.view()).unwrap();
            for rho in 0..5 {
                let c = token_distribution_given_pos(&p, &partition, h.view(), rho).unwrap();
                let z: f64 = partition.members(rho).iter().map(|&x| full.prob(x)).sum();
                for x in 0..40 {
                    let expected = if partition.contains(rho, x) { full.prob(x) / z } else { 0.0 };
                    assert!((c.prob(x) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_symmetry_and_multi_pos() {
        let partition = overlapping_partition(9, 3);
        let mut p = ModelParams::init(&config(9, 3));
        p.token_output.fill(0.0);
        p.pos_output.fill(0.0);
        let joint = joint_distribution(&p, &partition, Array1::from_elem(6, 1.0).view()).unwrap();
        let mut total = 0.0;
        for rho in 0..3 {
            let size = partition.members(rho).len() as f64;
            for x in 0..9 {
                let expected = if partition.contains(rho, x) { 1.0 / 3.0 / size } else { 0.0 };
                assert!((joint.joint_prob(x, rho) - expected).abs() < 1e-15);
                total += joint.joint_prob(x, rho);
            }
        }
        assert!((total - 1.0).abs() < 1e-9);
        // Token 0 is in cells 0 and 1.
        assert!(joint.joint_prob(0, 0) > 0.0 && joint.joint_prob(0, 1) > 0.0);
    }

    #[test]
    fn marginal_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let partition = overlapping_partition(30, 4);
        let mut cfg = config(30, 4);
        for trial in 0..30 {
            cfg.seed = 500 + trial;
            let p = ModelParams::init_with_scale(&cfg, 0.8);
            let joint = joint_distribution(&p, &partition, random_h(&mut rng, 6).view()).unwrap();
            let m = marginal_token_distribution(&joint);
            let mut brute = vec![0.0; 30];
            for rho in 0..4 {
                for (x, b) in brute.iter_mut().enumerate() {
                    *b += joint.joint_prob(x, rho);
                }
            }
            let dev = (0..30).map(|x| (m.prob(x) - brute[x]).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-12);
            assert!((m.total() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_marginal_is_scaled_concatenation() {
        let sets = (0..12).map(|x| vec![x / 4]).collect();
        let partition = PosPartition::from_tag_sets(sets, 3).unwrap();
        let p = ModelParams::init_with_scale(&config(12, 3), 1.0);
        let h = Array1::from_elem(6, -0.2);
        let joint = joint_distribution(&p, &partition, h.view()).unwrap();
        let m = marginal_token_distribution(&joint);
        for x in 0..12 {
            let rho = x / 4;
            let expected = joint.pos_dist().prob(rho) * joint.conditional(rho).unwrap().prob(x);
            assert!((m.prob(x) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn single_pos_marginal_equals_mle() {
        let partition = PosPartition::from_tag_sets(vec![vec![0]; 20], 1).unwrap();
        let p = ModelParams::init_with_scale(&config(20, 1), 1.0);
        let h = Array1::from_elem(6, 0.25);
        let joint = joint_distribution(&p, &partition, h.view()).unwrap();
        let m = marginal_token_distribution(&joint);
        let mle = mle_distribution(&p, h.view()).unwrap();
        for x in 0..20 {
            assert!((m.prob(x) - mle.prob(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn posg_loss_cases() {
        let partition = overlapping_partition(12, 3);
        let mut p = ModelParams::init(&config(12, 3));
        p.token_output.fill(0.0);
        p.pos_output.fill(0.0);
        let hidden = HiddenStates::from_array(Array2::from_elem((1, 6), 0.5));
        let loss = posg_loss(&p, &partition, &hidden, &[4], &[1]).unwrap();
        let expected = 3f64.ln() + (partition.members(1).len() as f64).ln();
        assert!((loss - expected).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init_with_scale(&config(12, 3), 0.9);
        let rows: Vec<f64> = (0..4 * 6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hidden = HiddenStates::from_array(Array2::from_shape_vec((4, 6), rows).unwrap());
        let tokens = [0, 4, 7, 9];
        let pos = [1, 1, 1, 0];
        let loss = posg_loss(&p, &partition, &hidden, &tokens, &pos).unwrap();
        let mut oracle = 0.0;
        for t in 0..4 {
            let joint = joint_distribution(&p, &partition, hidden.row(t)).unwrap();
            oracle -= joint.joint_prob(tokens[t], pos[t]).ln();
        }
        assert!((loss - oracle / 4.0).abs() < 1e-10);

        let err = posg_loss(&p, &partition, &hidden, &[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, HeadError::GoldInconsistent { position: 1, .. }));
    }

    #[test]
    fn single_pos_loss_equals_mle_loss() {
        let partition = PosPartition::from_tag_sets(vec![vec![0]; 15], 1).unwrap();
        let p = ModelParams::init_with_scale(&config(15, 1), 1.0);
        let hidden = HiddenStates::from_array(Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - j as f64) * 0.3));
        let toks = [1, 5, 9, 14, 0];
        let a = posg_loss(&p, &partition, &hidden, &toks, &[0; 5]).unwrap();
        let b = mle_loss(&p, &hidden, &toks).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn shared_embedding_drives_every_cell_of_a_token() {
        let partition = overlapping_partition(12, 3);
        let p = ModelParams::init_with_scale(&config(12, 3), 0.6);
        let h = Array1::from_elem(6, 0.9);
        let x = 3; // cells 0 and 1
        let before: Vec<f64> = partition
            .tags_of(x)
            .iter()
            .map(|&r| token_distribution_given_pos(&p, &partition, h.view(), r).unwrap().prob(x))
            .collect();
        let mut q = p.clone();
        q.token_output[[x, 0]] += 0.5;
        for (i, &r) in partition.tags_of(x).iter().enumerate() {
            let after = token_distribution_given_pos(&q, &partition, h.view(), r).unwrap().prob(x);
            assert!(after > before[i]);
        }
    }

    #[test]
    fn cell_shift_invariance() {
        let partition = overlapping_partition(12, 3);
        let p = ModelParams::init_with_scale(&config(12, 3), 0.6);
        let h = Array1::from_elem(6, 0.9);
        let logits = token_logits(&p, h.view());
        let shifted: Vec<f64> = logits.iter().map(|l| l + 17.25).collect();
        for rho in 0..3 {
            let a = cell_distribution(&partition, &logits, rho).unwrap();
            let b = cell_distribution(&partition, &shifted, rho).unwrap();
            for (pa, pb) in a.probs().iter().zip(b.probs()) {
                assert!((pa - pb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_hidden_is_rejected() {
        let p = ModelParams::init(&config(5, 2));
        let mut h = Array1::zeros(6);
        h[2] = f64::NAN;
        assert_eq!(mle_distribution(&p, h.view()), Err(HeadError::NonFinite));
        assert!(matches!(
            mle_distribution(&p, Array1::zeros(3).view()),
            Err(HeadError::Dimension { .. })
        ));
    }

    #[test]
    fn distribution_validation() {
        assert!(CategoricalDist::new(vec![0, 0], vec![0.5, 0.5]).is_err());
        assert!(CategoricalDist::new(vec![0, 1], vec![0.5, 0.6]).is_err());
        assert!(CategoricalDist::new(vec![1, 4], vec![0.25, 0.75]).is_ok());
        let d = CategoricalDist::new(vec![1, 4, 6], vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(d.argmax(), 1);
        assert_eq!(d.prob(5), 0.0);
    }
}
