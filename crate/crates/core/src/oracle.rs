//! Entropy of one- and two-stage truncated sampling on small enumerable
//! joints, with the lower bounds that compare them.
//!
//! Notation: `V_k` is the global top-`k` of the marginal, `Z_k` its mass,
//! `V_{k,rho}` the members of `V_k` tagged `rho`, `V_{rho,k}` the top-`k` of
//! cell `rho` under `p(x | rho)`, and `Z2_rho` that set's conditional mass.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{generation_rng, posg_truncated_marginal, truncate_top_k, SamplingConfig, StageStrategy};
use crate::heads::{self, CategoricalDist, JointDist};

/// Slack for floating-point comparisons of bounds.
pub const BOUND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid toy joint: {0}")]
    Joint(String),
    #[error("invalid parameters: {0}")]
    Parameters(String),
}

/// Natural-log entropy; `0 log 0 = 0`.
pub fn entropy(dist: &CategoricalDist) -> f64 {
    -dist.probs().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn entropy_topk(dist: &CategoricalDist, k: usize) -> f64 {
    entropy(&truncate_top_k(dist, k))
}

/// Entropy of two-stage sampling with a pure POS stage and top-`k` within each cell.
pub fn entropy_posg(joint: &ToyJoint, k: usize) -> f64 {
    let config = SamplingConfig {
        pos_stage: StageStrategy::Pure,
        token_stage: StageStrategy::TopK(k),
        ..Default::default()
    };
    entropy(&posg_truncated_marginal(&joint.joint_dist(), &config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSumCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `sum a_i ln(a_i / b_i) >= (sum a) ln(sum a / sum b)` for `a >= 0`, `b > 0`.
pub fn log_sum_inequality_check(a: &[f64], b: &[f64]) -> Result<LogSumCheck, OracleError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(OracleError::Parameters(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || b.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(OracleError::Parameters("need a >= 0 and b > 0".into()));
    }
    let term = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    let lhs = a.iter().zip(b).map(|(&x, &y)| term(x, y)).sum();
    let rhs = term(a.iter().sum(), b.iter().sum());
    Ok(LogSumCheck {
        lhs,
        rhs,
        holds: lhs >= rhs - BOUND_TOLERANCE,
    })
}

/// A joint `p(x, rho) = p(rho) p(x | rho)` with explicit cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyJoint {
    pub pos_probs: Vec<f64>,
    /// `(token, p(token | rho))` sorted by token, one list per tag.
    pub cells: Vec<Vec<(usize, f64)>>,
}

impl ToyJoint {
    pub fn new(pos_probs: Vec<f64>, cells: Vec<Vec<(usize, f64)>>) -> Result<Self, OracleError> {
        let bad = |m: String| Err(OracleError::Joint(m));
        if pos_probs.is_empty() || pos_probs.len() != cells.len() {
            return bad(format!("{} tags but {} cells", pos_probs.len(), cells.len()));
        }
        if (pos_probs.iter().sum::<f64>() - 1.0).abs() > BOUND_TOLERANCE || pos_probs.iter().any(|p| *p < 0.0) {
            return bad("tag probabilities are not a distribution".into());
        }
        for (rho, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return bad(format!("cell {rho} is empty"));
            }
            if cell.windows(2).any(|w| w[0].0 >= w[1].0) {
                return bad(format!("cell {rho} is not sorted by token"));
            }
            let total: f64 = cell.iter().map(|c| c.1).sum();
            if (total - 1.0).abs() > BOUND_TOLERANCE || cell.iter().any(|c| c.1 < 0.0) {
                return bad(format!("cell {rho} is not a distribution"));
            }
        }
        Ok(Self { pos_probs, cells })
    }

    pub fn pos_count(&self) -> usize {
        self.pos_probs.len()
    }

    pub fn joint_dist(&self) -> JointDist {
        let pos = CategoricalDist::new((0..self.pos_count()).collect(), self.pos_probs.clone()).expect("validated");
        let conds = self
            .cells
            .iter()
            .map(|c| {
                let (s, p): (Vec<usize>, Vec<f64>) = c.iter().copied().unzip();
                Some(CategoricalDist::new(s, p).expect("validated"))
            })
            .collect();
        JointDist::new(pos, conds).expect("validated")
    }

    pub fn marginal(&self) -> CategoricalDist {
        heads::marginal_token_distribution(&self.joint_dist())
    }

    pub fn joint_prob(&self, x: usize, rho: usize) -> f64 {
        self.cells[rho]
            .binary_search_by_key(&x, |c| c.0)
            .map_or(0.0, |i| self.pos_probs[rho] * self.cells[rho][i].1)
    }

    pub fn cells_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.cells.iter().flatten().all(|(x, _)| seen.insert(*x))
    }

    /// Dirichlet(1) tag probabilities and cell conditionals. Cells are
    /// disjoint blocks of `cell_size` ids unless `overlap`, in which case each
    /// cell draws `cell_size` distinct ids from a vocabulary half as large.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, pos_count: usize, cell_size: usize, overlap: bool) -> Self {
        let vocab = (pos_count * cell_size / 2).max(cell_size);
        let cells = (0..pos_count)
            .map(|rho| {
                let mut ids: Vec<usize> = if overlap {
                    rand::seq::index::sample(rng, vocab, cell_size).into_vec()
                } else {
                    (rho * cell_size..(rho + 1) * cell_size).collect()
                };
                ids.sort_unstable();
                ids.into_iter().zip(dirichlet1(rng, cell_size)).collect()
            })
            .collect();
        Self::new(dirichlet1(rng, pos_count), cells).expect("normalized by construction")
    }

    /// Disjoint cells of `cell_size` where only `k` tokens in total carry
    /// mass, at least one per tag. Then `V_k` holds all the mass and
    /// `Z2_rho = Z_k = 1` for every tag. Needs `pos_count <= k <= pos_count * cell_size`.
    pub fn random_with_z2_equal_zk<R: Rng + ?Sized>(
        rng: &mut R,
        pos_count: usize,
        cell_size: usize,
        k: usize,
    ) -> Result<Self, OracleError> {
        if pos_count > k || k > pos_count * cell_size {
            return Err(OracleError::Parameters(format!(
                "need {pos_count} <= k <= {}",
                pos_count * cell_size
            )));
        }
        let mut live = vec![1usize; pos_count];
        for _ in pos_count..k {
            let open: Vec<usize> = (0..pos_count).filter(|&r| live[r] < cell_size).collect();
            live[open[rng.random_range(0..open.len())]] += 1;
        }
        let cells = (0..pos_count)
            .map(|rho| {
                let weights = dirichlet1(rng, live[rho]);
                let chosen = rand::seq::index::sample(rng, cell_size, live[rho]).into_vec();
                let mut probs = vec![0.0; cell_size];
                for (i, w) in chosen.into_iter().zip(weights) {
                    probs[i] = w;
                }
                (0..cell_size).map(|i| (rho * cell_size + i, probs[i])).collect()
            })
            .collect();
        Self::new(dirichlet1(rng, pos_count), cells)
    }
}

/// Symmetric Dirichlet(1) via normalized unit exponentials.
fn dirichlet1<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn neg_xlogx(a: f64) -> f64 {
    if a > 0.0 {
        -a * a.ln()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundChain {
    pub h_topk: f64,
    pub lb_topk: f64,
    pub h_posg: f64,
    pub lb_posg: f64,
    /// `lb_posg` with every `Z2_rho` replaced by `Z_k`.
    pub lb_posg_at_zk: f64,
    pub z_k: f64,
    pub z2: Vec<f64>,
    pub z2_mean: f64,
    pub cells_disjoint: bool,
    /// Whether `Z2_rho == Z_k` for every tag, up to rounding.
    pub z2_equals_zk: bool,
    pub topk_bound_holds: bool,
    pub posg_bound_holds: bool,
    /// `lb_posg >= lb_topk`; evaluated only when `z2_equals_zk`.
    pub bound_order_exact: Option<bool>,
    /// `lb_posg_at_zk >= lb_topk`; evaluated only on disjoint cells.
    pub bound_order_at_zk: Option<bool>,
}

impl BoundChain {
    /// Every verdict that follows from the definitions alone.
    pub fn hard_checks_hold(&self) -> bool {
        self.topk_bound_holds
            && self.posg_bound_holds
            && self.bound_order_exact.unwrap_or(true)
            && self.bound_order_at_zk.unwrap_or(true)
    }
}

/// Entropies of top-`k` and pure/top-`k` two-stage sampling with their lower bounds.
pub fn bound_chain_report(joint: &ToyJoint, k: usize) -> Result<BoundChain, OracleError> {
    if k == 0 {
        return Err(OracleError::Parameters("k must be at least 1".into()));
    }
    let log_p = (joint.pos_count() as f64).ln();
    let marginal = joint.marginal();
    let topk = truncate_top_k(&marginal, k);
    let z_k: f64 = topk.support().iter().map(|&x| marginal.prob(x)).sum();
    let h_topk = entropy(&topk);

    let mut lb_topk = -log_p;
    let mut lb_posg = -log_p;
    let mut lb_posg_at_zk = -log_p;
    let mut z2 = Vec::with_capacity(joint.pos_count());
    for (rho, cell) in joint.cells.iter().enumerate() {
        for &x in topk.support() {
            lb_topk += neg_xlogx(joint.joint_prob(x, rho) / z_k);
        }
        let (s, p): (Vec<usize>, Vec<f64>) = cell.iter().copied().unzip();
        let cell_top = truncate_top_k(&CategoricalDist::new(s, p).expect("validated"), k);
        let z2_rho: f64 = cell_top.support().iter().map(|&x| cell.iter().find(|c| c.0 == x).unwrap().1).sum();
        for &x in cell_top.support() {
            let pj = joint.joint_prob(x, rho);
            lb_posg += neg_xlogx(pj / z2_rho);
            lb_posg_at_zk += neg_xlogx(pj / z_k);
        }
        z2.push(z2_rho);
    }
    let h_posg = entropy_posg(joint, k);
    let cells_disjoint = joint.cells_disjoint();
    let z2_equals_zk = z2.iter().all(|&z| (z - z_k).abs() <= BOUND_TOLERANCE);
    Ok(BoundChain {
        h_topk,
        lb_topk,
        h_posg,
        lb_posg,
        lb_posg_at_zk,
        z_k,
        z2_mean: z2.iter().sum::<f64>() / z2.len() as f64,
        z2,
        cells_disjoint,
        z2_equals_zk,
        topk_bound_holds: h_topk >= lb_topk - BOUND_TOLERANCE,
        posg_bound_holds: h_posg >= lb_posg - BOUND_TOLERANCE,
        bound_order_exact: z2_equals_zk.then_some(lb_posg >= lb_topk - BOUND_TOLERANCE),
        bound_order_at_zk: cells_disjoint.then_some(lb_posg_at_zk >= lb_topk - BOUND_TOLERANCE),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCheckConfig {
    pub trials: usize,
    pub pos_count: usize,
    pub cell_size: usize,
    pub k: usize,
    pub seed: u64,
    /// Draw overlapping cells instead of disjoint blocks.
    pub overlap: bool,
    /// Random log-sum instances checked per trial.
    pub log_sum_instances: usize,
}

impl Default for EntropyCheckConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            pos_count: 5,
            cell_size: 20,
            k: 5,
            seed: 0,
            overlap: false,
            log_sum_instances: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub random: BoundChain,
    /// A joint built so that `Z2_rho = Z_k`; absent when `k < pos_count`.
    pub constructed: Option<BoundChain>,
    pub log_sum_all_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean_h_topk: f64,
    pub mean_h_posg: f64,
    pub mean_difference: f64,
    /// Standard error of the per-trial difference `h_posg - h_topk`.
    pub difference_std_error: f64,
    /// Share of trials with `h_posg >= h_topk`; reported, not required.
    pub fraction_posg_not_lower: f64,
    pub mean_z_k: f64,
    pub mean_z2: f64,
    pub topk_bound_failures: usize,
    pub posg_bound_failures: usize,
    pub bound_order_failures: usize,
    pub log_sum_instances: usize,
    pub log_sum_failures: usize,
    pub all_hard_checks_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCheckReport {
    pub config: EntropyCheckConfig,
    pub summary: EntropySummary,
    pub trials: Vec<TrialReport>,
}

/// Runs the sweep; trial `i` draws from stream `i` of `config.seed`.
pub fn entropy_check(config: &EntropyCheckConfig) -> Result<EntropyCheckReport, OracleError> {
    if config.trials == 0 || config.pos_count == 0 || config.cell_size == 0 || config.k == 0 {
        return Err(OracleError::Parameters("trials, pos_count, cell_size and k must be positive".into()));
    }
    let trials: Vec<TrialReport> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = generation_rng(config.seed, i as u64);
            let joint = ToyJoint::random(&mut rng, config.pos_count, config.cell_size, config.overlap);
            let random = bound_chain_report(&joint, config.k)?;
            let constructed = if config.pos_count <= config.k && config.k <= config.pos_count * config.cell_size {
                let forced = ToyJoint::random_with_z2_equal_zk(&mut rng, config.pos_count, config.cell_size, config.k)?;
                Some(bound_chain_report(&forced, config.k)?)
            } else {
                None
            };
            let mut log_sum_all_hold = true;
            for _ in 0..config.log_sum_instances {
                let n = rng.random_range(1..=12);
                let a: Vec<f64> = (0..n)
                    .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() * 10.0 })
                    .collect();
                let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 + 1e-9).collect();
                log_sum_all_hold &= log_sum_inequality_check(&a, &b)?.holds;
            }
            Ok(TrialReport {
                trial: i,
                random,
                constructed,
                log_sum_all_hold,
            })
        })
        .collect::<Result<_, OracleError>>()?;

    let n = trials.len() as f64;
    let diffs: Vec<f64> = trials.iter().map(|t| t.random.h_posg - t.random.h_topk).collect();
    let mean_difference = diffs.iter().sum::<f64>() / n;
    let variance = if trials.len() > 1 {
        diffs.iter().map(|d| (d - mean_difference).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let chains = || trials.iter().flat_map(|t| std::iter::once(&t.random).chain(t.constructed.as_ref()));
    let topk_bound_failures = chains().filter(|c| !c.topk_bound_holds).count();
    let posg_bound_failures = chains().filter(|c| !c.posg_bound_holds).count();
    let bound_order_failures = chains()
        .filter(|c| c.bound_order_exact == Some(false) || c.bound_order_at_zk == Some(false))
        .count();
    let log_sum_failures = trials.iter().filter(|t| !t.log_sum_all_hold).count();
    let summary = EntropySummary {
        mean_h_topk: trials.iter().map(|t| t.random.h_topk).sum::<f64>() / n,
        mean_h_posg: trials.iter().map(|t| t.random.h_posg).sum::<f64>() / n,
        mean_difference,
        difference_std_error: (variance / n).sqrt(),
        fraction_posg_not_lower: diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / n,
        mean_z_k: trials.iter().map(|t| t.random.z_k).sum::<f64>() / n,
        mean_z2: trials.iter().map(|t| t.random.z2_mean).sum::<f64>() / n,
        topk_bound_failures,
        posg_bound_failures,
        bound_order_failures,
        log_sum_instances: config.trials * config.log_sum_instances,
        log_sum_failures,
        all_hard_checks_hold: topk_bound_failures + posg_bound_failures + bound_order_failures + log_sum_failures == 0,
    };
    Ok(EntropyCheckReport {
        config: config.clone(),
        summary,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_closed_forms() {
        for m in [1, 2, 7, 100] {
            assert!((entropy(&CategoricalDist::uniform(m)) - (m as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(entropy(&CategoricalDist::point_mass(3)), 0.0);
        let with_zero = CategoricalDist::new(vec![0, 1, 2], vec![0.5, 0.0, 0.5]).unwrap();
        assert!((entropy(&with_zero) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_topk_closed_forms() {
        assert!((entropy_topk(&CategoricalDist::uniform(4), 2) - 2f64.ln()).abs() < 1e-12);
        let d = CategoricalDist::new(vec![0, 1, 2], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(entropy_topk(&d, 1), 0.0);
        assert!((entropy_topk(&d, 3) - entropy(&d)).abs() < 1e-15);
    }

    #[test]
    fn log_sum_examples() {
        let c = log_sum_inequality_check(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert!(c.lhs.abs() < 1e-15 && c.rhs.abs() < 1e-15 && c.holds);
        let c = log_sum_inequality_check(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(c.lhs, 0.0);
        assert!((c.rhs - 0.5f64.ln()).abs() < 1e-15);
        assert!(c.holds);
        assert!(log_sum_inequality_check(&[1.0], &[0.0]).is_err());
        assert!(log_sum_inequality_check(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn toy_joint_validation() {
        assert!(ToyJoint::new(vec![1.0], vec![vec![(0, 0.5)]]).is_err());
        assert!(ToyJoint::new(vec![0.5, 0.5], vec![vec![(0, 1.0)]]).is_err());
        assert!(ToyJoint::new(vec![1.0], vec![vec![(1, 0.5), (0, 0.5)]]).is_err());
        let j = ToyJoint::new(vec![0.25, 0.75], vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)]]).unwrap();
        assert!(!j.cells_disjoint());
        assert!((j.marginal().prob(0) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn single_tag_collapses_the_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let j = ToyJoint::random(&mut rng, 1, 15, false);
            let c = bound_chain_report(&j, 4).unwrap();
            assert!((c.lb_posg - c.lb_topk).abs() < 1e-12);
            assert!((c.h_posg - c.h_topk).abs() < 1e-12);
            assert!((entropy_posg(&j, 4) - entropy_topk(&j.marginal(), 4)).abs() < 1e-12);
            assert!(c.z2_equals_zk && c.hard_checks_hold());
        }
    }

    #[test]
    fn small_cells_leave_the_marginal_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = ToyJoint::random(&mut rng, 4, 3, false);
        assert!((entropy_posg(&j, 3) - entropy(&j.marginal())).abs() < 1e-12);
    }

    #[test]
    fn z2_equal_zk_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let j = ToyJoint::random_with_z2_equal_zk(&mut rng, 5, 20, 7).unwrap();
            let c = bound_chain_report(&j, 7).unwrap();
            assert!(c.z2_equals_zk, "{:?} vs {}", c.z2, c.z_k);
            assert_eq!(c.bound_order_exact, Some(true));
        }
        assert!(ToyJoint::random_with_z2_equal_zk(&mut rng, 5, 20, 4).is_err());
    }

    #[test]
    fn overlapping_cells_skip_the_disjoint_only_verdict() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j = ToyJoint::random(&mut rng, 5, 20, true);
        let c = bound_chain_report(&j, 5).unwrap();
        assert!(!c.cells_disjoint);
        assert_eq!(c.bound_order_at_zk, None);
        assert!(c.topk_bound_holds && c.posg_bound_holds);
    }

    #[test]
    fn entropy_check_is_reproducible() {
        let cfg = EntropyCheckConfig {
            trials: 3,
            seed: 9,
            ..Default::default()
        };
        let a = serde_json::to_string(&entropy_check(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&entropy_check(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(entropy_check(&EntropyCheckConfig { k: 0, ..cfg }).is_err());
    }
}
