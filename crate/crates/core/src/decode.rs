//! Truncation operators, two-stage POS-guided sampling, POS control and
//! autoregressive generation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedCorpus, Lexicon, PosPartition, Vocabulary};
use crate::heads::{self, mixture, CategoricalDist, HeadError, HeadKind, JointDist};
use crate::net::{self, Mode, Model, NetError};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("prefix of length {len} exceeds the context length {context_len}")]
    PrefixTooLong { len: usize, context_len: usize },
    #[error("the POS head needs a partition")]
    MissingPartition,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// One stage of a sampler. Written as `pure`, `greedy`, `top_k:K`,
/// `nucleus:ALPHA` or `temperature:TAU`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StageStrategy {
    Pure,
    Greedy,
    TopK(usize),
    Nucleus(f64),
    Temperature(f64),
}

impl StageStrategy {
    pub fn validate(&self) -> Result<(), DecodeError> {
        match *self {
            Self::TopK(0) => Err(DecodeError::Config("top_k needs k >= 1".into())),
            Self::Nucleus(a) if !(a > 0.0 && a <= 1.0) => {
                Err(DecodeError::Config(format!("nucleus needs 0 < alpha <= 1, got {a}")))
            }
            Self::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(DecodeError::Config(format!("temperature needs tau > 0, got {t}")))
            }
            _ => Ok(()),
        }
    }

    /// The truncated (or reshaped) distribution this stage samples from.
    pub fn apply(&self, dist: &CategoricalDist) -> CategoricalDist {
        match *self {
            Self::Pure => dist.clone(),
            Self::Greedy => CategoricalDist::point_mass(greedy(dist)),
            Self::TopK(k) => truncate_top_k(dist, k),
            Self::Nucleus(a) => truncate_nucleus(dist, a),
            Self::Temperature(t) => apply_temperature(dist, t),
        }
    }
}

impl fmt::Display for StageStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Pure => write!(f, "pure"),
            Self::Greedy => write!(f, "greedy"),
            Self::TopK(k) => write!(f, "top_k:{k}"),
            Self::Nucleus(a) => write!(f, "nucleus:{a}"),
            Self::Temperature(t) => write!(f, "temperature:{t}"),
        }
    }
}

impl FromStr for StageStrategy {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DecodeError::Config(format!("cannot parse strategy {s:?}"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let strategy = match (name.to_ascii_lowercase().as_str(), arg) {
            ("pure", None) => Self::Pure,
            ("greedy", None) => Self::Greedy,
            ("top_k" | "topk", Some(a)) => Self::TopK(a.parse().map_err(|_| bad())?),
            ("nucleus" | "top_p", Some(a)) => Self::Nucleus(a.parse().map_err(|_| bad())?),
            ("temperature", Some(a)) => Self::Temperature(a.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl TryFrom<String> for StageStrategy {
    type Error = DecodeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StageStrategy> for String {
    fn from(s: StageStrategy) -> Self {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub pos_stage: StageStrategy,
    pub token_stage: StageStrategy,
    /// POS id to multiplier; absent tags keep multiplier 1.
    #[serde(default)]
    pub control: BTreeMap<usize, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pos_stage: StageStrategy::TopK(20),
            token_stage: StageStrategy::Nucleus(0.5),
            control: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        self.pos_stage.validate()?;
        self.token_stage.validate()?;
        if let Some((pos, m)) = self.control.iter().find(|(_, m)| !(**m > 0.0 && m.is_finite())) {
            return Err(DecodeError::Config(format!("multiplier for POS {pos} must be positive, got {m}")));
        }
        Ok(())
    }
}

/// Item indices in descending probability, lower id first on ties.
fn descending(dist: &CategoricalDist) -> Vec<usize> {
    let probs = dist.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Support is sorted by id, so a stable sort keeps lower ids first.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order
}

fn keep(dist: &CategoricalDist, mut indices: Vec<usize>) -> CategoricalDist {
    indices.sort_unstable();
    let support = indices.iter().map(|&i| dist.support()[i]).collect();
    let weights = indices.iter().map(|&i| dist.probs()[i]).collect();
    CategoricalDist::from_weights(support, weights).expect("kept mass is positive")
}

/// The `k` most probable items, renormalized.
pub fn truncate_top_k(dist: &CategoricalDist, k: usize) -> CategoricalDist {
    if k >= dist.len() {
        return dist.clone();
    }
    let mut order = descending(dist);
    order.truncate(k.max(1));
    keep(dist, order)
}

/// The shortest probability-descending prefix whose mass reaches `alpha`,
/// including the item that crosses it, renormalized.
pub fn truncate_nucleus(dist: &CategoricalDist, alpha: f64) -> CategoricalDist {
    if alpha >= 1.0 {
        return dist.clone();
    }
    let order = descending(dist);
    let mut mass = 0.0;
    let mut n = order.len();
    for (i, &j) in order.iter().enumerate() {
        mass += dist.probs()[j];
        if mass >= alpha {
            n = i + 1;
            break;
        }
    }
    keep(dist, order[..n].to_vec())
}

/// `p^(1/tau)`, renormalized.
pub fn apply_temperature(dist: &CategoricalDist, tau: f64) -> CategoricalDist {
    let logs: Vec<f64> = dist.probs().iter().map(|p| p.ln() / tau).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = logs.iter().map(|l| (l - max).exp()).collect();
    CategoricalDist::from_weights(dist.support().to_vec(), weights).expect("positive mass")
}

pub fn greedy(dist: &CategoricalDist) -> usize {
    dist.argmax()
}

/// `p'(rho) = m_rho p(rho) / sum_sigma m_sigma p(sigma)`.
pub fn apply_pos_control(pos_dist: &CategoricalDist, control: &BTreeMap<usize, f64>) -> CategoricalDist {
    if control.is_empty() {
        return pos_dist.clone();
    }
    let weights = pos_dist
        .iter()
        .map(|(rho, p)| p * control.get(&rho).copied().unwrap_or(1.0))
        .collect();
    CategoricalDist::from_weights(pos_dist.support().to_vec(), weights).expect("positive multipliers")
}

/// The POS-stage distribution after control and truncation.
pub fn truncated_pos_distribution(joint: &JointDist, config: &SamplingConfig) -> CategoricalDist {
    config.pos_stage.apply(&apply_pos_control(joint.pos_dist(), &config.control))
}

fn truncated_cell(joint: &JointDist, config: &SamplingConfig, rho: usize) -> CategoricalDist {
    let cell = joint.conditional(rho).expect("tags with mass have a cell");
    config.token_stage.apply(cell)
}

/// Exact token law of two-stage sampling:
/// `sum over kept rho of p'(rho) p'(x | rho)`.
pub fn posg_truncated_marginal(joint: &JointDist, config: &SamplingConfig) -> CategoricalDist {
    let pos = truncated_pos_distribution(joint, config);
    let cells: Vec<(f64, CategoricalDist)> = pos
        .iter()
        .filter(|&(_, w)| w > 0.0)
        .map(|(rho, w)| (w, truncated_cell(joint, config, rho)))
        .collect();
    mixture(cells.iter().map(|(w, d)| (*w, d)))
}

/// Draws a tag from the truncated POS stage, then a token from that tag's
/// truncated cell.
pub fn posg_step<R: rand::Rng + ?Sized>(joint: &JointDist, config: &SamplingConfig, rng: &mut R) -> (usize, usize) {
    let rho = truncated_pos_distribution(joint, config).sample(rng);
    let x = truncated_cell(joint, config, rho).sample(rng);
    (rho, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prefix: Vec<usize>,
    pub continuation: Vec<usize>,
    /// Tag chosen at each step; absent for the plain softmax head.
    pub sampled_pos: Option<Vec<usize>>,
    /// `log p'(x_t)` of each chosen token under the exact truncated law.
    pub step_logprobs: Vec<f64>,
}

/// Independent stream for generation `index` under `seed`.
pub fn generation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Continues `prefix` by `length` tokens using stream 0 of `config.seed`.
pub fn generate(
    model: &Model,
    partition: Option<&PosPartition>,
    prefix: &[usize],
    length: usize,
    config: &SamplingConfig,
) -> Result<GenerationRecord, DecodeError> {
    generate_with_rng(model, partition, prefix, length, config, &mut generation_rng(config.seed, 0))
}

/// Once the history outgrows the window, the model sees the most recent
/// `context_len - 1` tokens.
pub fn generate_with_rng(
    model: &Model,
    partition: Option<&PosPartition>,
    prefix: &[usize],
    length: usize,
    config: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GenerationRecord, DecodeError> {
    config.validate()?;
    let context_len = model.config.context_len;
    if prefix.is_empty() {
        return Err(DecodeError::EmptyPrefix);
    }
    if prefix.len() > context_len {
        return Err(DecodeError::PrefixTooLong {
            len: prefix.len(),
            context_len,
        });
    }
    let partition = match model.head {
        HeadKind::Posg => Some(partition.ok_or(DecodeError::MissingPartition)?),
        HeadKind::Mle => None,
    };
    let mut history = prefix.to_vec();
    let mut continuation = Vec::with_capacity(length);
    let mut sampled_pos = partition.map(|_| Vec::with_capacity(length));
    let mut step_logprobs = Vec::with_capacity(length);
    for _ in 0..length {
        let start = if history.len() > context_len {
            history.len() - (context_len - 1).max(1)
        } else {
            0
        };
        let hidden = net::forward(&model.params, &model.config, &history[start..], Mode::Eval)?;
        let h = hidden.last();
        let (x, p) = match partition {
            Some(part) => {
                let joint = heads::joint_distribution(&model.params, part, h)?;
                let law = posg_truncated_marginal(&joint, config);
                let (rho, x) = posg_step(&joint, config, rng);
                sampled_pos.as_mut().expect("POS head").push(rho);
                (x, law.prob(x))
            }
            None => {
                let dist = config.token_stage.apply(&heads::mle_distribution(&model.params, h)?);
                let x = dist.sample(rng);
                (x, dist.prob(x))
            }
        };
        history.push(x);
        continuation.push(x);
        step_logprobs.push(p.ln());
    }
    Ok(GenerationRecord {
        prefix: prefix.to_vec(),
        continuation,
        sampled_pos,
        step_logprobs,
    })
}

/// Generates one continuation per prefix in parallel; record `i` uses stream `i`.
pub fn generate_batch(
    model: &Model,
    partition: Option<&PosPartition>,
    prefixes: &[Vec<usize>],
    length: usize,
    config: &SamplingConfig,
) -> Result<Vec<GenerationRecord>, DecodeError> {
    prefixes
        .par_iter()
        .enumerate()
        .map(|(i, prefix)| {
            let mut rng = generation_rng(config.seed, i as u64);
            generate_with_rng(model, partition, prefix, length, config, &mut rng)
        })
        .collect()
}

/// A prefix to continue and the text that actually followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub prefix: Vec<usize>,
    pub reference: Vec<usize>,
    pub reference_pos: Vec<usize>,
}

/// `BOS` plus the first `prefix_len` tokens of each sequence longer than
/// `prefix_len`; the reference is the next `continuation_len` tokens.
pub fn prompts_from_corpus(corpus: &EncodedCorpus, prefix_len: usize, continuation_len: usize) -> Vec<Prompt> {
    corpus
        .sequences
        .iter()
        .filter(|s| s.tokens.len() > prefix_len)
        .map(|s| {
            let end = (prefix_len + continuation_len).min(s.tokens.len());
            let mut prefix = Vec::with_capacity(prefix_len + 1);
            prefix.push(Vocabulary::BOS);
            prefix.extend_from_slice(&s.tokens[..prefix_len]);
            Prompt {
                prefix,
                reference: s.tokens[prefix_len..end].to_vec(),
                reference_pos: s.pos[prefix_len..end].to_vec(),
            }
        })
        .collect()
}

/// One output line of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub prefix: Vec<String>,
    pub continuation: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampled_pos: Option<Vec<String>>,
    pub step_logprobs: Vec<f64>,
    /// The text that followed the prefix in the source corpus, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference: Option<Vec<String>>,
    pub config: SamplingConfig,
}

impl GenerationLine {
    pub fn from_record(record: &GenerationRecord, lexicon: &Lexicon, config: &SamplingConfig) -> Self {
        let words = |ids: &[usize]| ids.iter().map(|&i| lexicon.vocab.token(i).to_string()).collect();
        Self {
            prefix: words(&record.prefix),
            continuation: words(&record.continuation),
            sampled_pos: record
                .sampled_pos
                .as_ref()
                .map(|p| p.iter().map(|&r| lexicon.inventory.tag(r).to_string()).collect()),
            step_logprobs: record.step_logprobs.clone(),
            reference: None,
            config: config.clone(),
        }
    }
}
