//! Potential-based reward shaping for step-wise group-relative optimization.
//!
//! The potential of a medication set scores correctness against the ground
//! truth minus DDI and refusal penalties. A trajectory's list reward is the net
//! potential change over the episode; step rewards are consecutive potential
//! differences, so with `gamma = 1` they telescope to the list reward.

use serde::{Deserialize, Serialize};

use crate::domain::{ddi_rate, jaccard, refusal_rate, DdiGraph, MedicationSet, MetricWeights};
use crate::error::{Error, Result};
use crate::vocab::{step_of_token, Trajectory};

/// Guard added to the group standard deviation.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub weights: MetricWeights,
    /// Weight of the shaped term in token advantages.
    pub lambda: f64,
    /// Shaping discount; 1 means every step counts equally.
    pub gamma: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            weights: MetricWeights::default(),
            lambda: 5.0,
            gamma: 1.0,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// How per-token advantages are formed from a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    /// Every token carries the normalized list reward.
    Outcome,
    /// Normalized list reward plus the lambda-weighted potential change of the token's step.
    StepWise,
}

/// What a potential is measured against for one episode.
#[derive(Debug, Clone, Copy)]
pub struct RewardContext<'a> {
    pub ground_truth: &'a MedicationSet,
    pub candidates: &'a MedicationSet,
    pub ddi: &'a DdiGraph,
}

impl<'a> RewardContext<'a> {
    pub fn potential(&self, m: &MedicationSet, w: &MetricWeights) -> Result<f64> {
        potential(m, self.ground_truth, self.candidates, self.ddi, w)
    }
}

/// `jaccard(m, gt) - alpha * ddi(m) - beta_refusal * refusal(m, c)`.
pub fn potential(
    m: &MedicationSet,
    gt: &MedicationSet,
    c: &MedicationSet,
    d: &DdiGraph,
    w: &MetricWeights,
) -> Result<f64> {
    Ok(jaccard(m, gt) - w.alpha * ddi_rate(m, d)? - w.beta_refusal * refusal_rate(m, c))
}

fn potentials(traj: &Trajectory, ctx: &RewardContext<'_>, w: &MetricWeights) -> Result<Vec<f64>> {
    traj.states.iter().map(|m| ctx.potential(m, w)).collect()
}

/// `gamma * phi(M_n) - phi(M_{n-1})` for `n = 1..N`.
pub fn step_rewards(
    traj: &Trajectory,
    ctx: &RewardContext<'_>,
    cfg: &ShapingConfig,
) -> Result<Vec<f64>> {
    let phi = potentials(traj, ctx, &cfg.weights)?;
    Ok(phi.windows(2).map(|p| cfg.gamma * p[1] - p[0]).collect())
}

/// `phi(M_N) - phi(M_0)`.
pub fn list_reward(traj: &Trajectory, ctx: &RewardContext<'_>, cfg: &ShapingConfig) -> Result<f64> {
    let first = ctx.potential(&traj.states[0], &cfg.weights)?;
    let last = ctx.potential(traj.final_state(), &cfg.weights)?;
    Ok(last - first)
}

/// Group-relative normalization with the population standard deviation.
/// A group whose rewards are all equal maps to zeros.
pub fn normalize_group(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group reward".into()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let denom = var.sqrt() + NORM_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Per-token advantages of one trajectory.
///
/// In step-wise mode a token inside step `n` (or the separator closing it)
/// gets `r̃ + lambda * (phi(n) - phi(n-1))`. `EOS` and positions credited to
/// step 0 receive no shaped term.
pub fn token_advantages(
    traj: &Trajectory,
    normalized_reward: f64,
    ctx: &RewardContext<'_>,
    cfg: &ShapingConfig,
    mode: AdvantageMode,
    eos_index: Option<usize>,
) -> Result<Vec<f64>> {
    let n_tokens = traj.tokens.len();
    match mode {
        AdvantageMode::Outcome => Ok(vec![normalized_reward; n_tokens]),
        AdvantageMode::StepWise => {
            let phi = potentials(traj, ctx, &cfg.weights)?;
            let stop = eos_index.unwrap_or(n_tokens);
            Ok((0..n_tokens)
                .map(|t| {
                    let n = step_of_token(t, &traj.step_spans);
                    let shaped = if t >= stop || n == 0 {
                        0.0
                    } else {
                        cfg.gamma * phi[n] - phi[n - 1]
                    };
                    normalized_reward + cfg.lambda * shaped
                })
                .collect())
        }
    }
}

/// The trajectories sampled for one prompt with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub normalized: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
}

impl GroupBatch {
    /// Scores a group. `eos` is the end-of-sequence token id, used to exclude
    /// the terminal token from the shaped term.
    pub fn score(
        trajectories: Vec<Trajectory>,
        ctx: &RewardContext<'_>,
        cfg: &ShapingConfig,
        mode: AdvantageMode,
        eos: crate::vocab::Token,
    ) -> Result<Self> {
        let rewards = trajectories
            .iter()
            .map(|t| list_reward(t, ctx, cfg))
            .collect::<Result<Vec<_>>>()?;
        let normalized = normalize_group(&rewards)?;
        let advantages = trajectories
            .iter()
            .zip(&normalized)
            .map(|(t, &r)| {
                let eos_index = t.tokens.iter().position(|&x| x == eos);
                token_advantages(t, r, ctx, cfg, mode, eos_index)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trajectories,
            rewards,
            normalized,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DrugId, Entry};
    use crate::vocab::{build_trajectory, EditKind, Vocab, VocabConfig};

    fn set(ids: &[u32]) -> MedicationSet {
        MedicationSet::from_drugs(ids.iter().map(|&i| DrugId(i)))
    }

    fn vocab() -> Vocab {
        Vocab::new(
            10,
            VocabConfig {
                n_symbols: 5,
                name_len: 2,
                seed: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn potential_examples() {
        let gt = set(&[0, 1]);
        let c = set(&[0, 1, 2]);
        let none = DdiGraph::empty(3);
        let w = MetricWeights::new(7.0, 0.5).unwrap();
        assert_eq!(potential(&gt, &gt, &c, &none, &w).unwrap(), 1.0);
        let edge = DdiGraph::from_edges(3, &[(0, 1)]).unwrap();
        let w2 = MetricWeights::new(2.0, 0.5).unwrap();
        assert_eq!(potential(&gt, &gt, &c, &edge, &w2).unwrap(), -1.0);
        assert_eq!(potential(&set(&[]), &gt, &c, &edge, &w2).unwrap(), 0.0);
    }

    #[test]
    fn step_rewards_examples() {
        let v = vocab();
        let gt = set(&[3]);
        let c = set(&(0..10).collect::<Vec<_>>());
        let ddi = DdiGraph::empty(10);
        let ctx = RewardContext {
            ground_truth: &gt,
            candidates: &c,
            ddi: &ddi,
        };
        let cfg = ShapingConfig {
            weights: MetricWeights::new(1.0, 0.5).unwrap(),
            lambda: 5.0,
            gamma: 1.0,
        };
        let t = build_trajectory(
            EditKind::Add,
            v.encode_list(&[DrugId(3)]).unwrap(),
            &v,
            &c,
            MedicationSet::new(),
        );
        assert_eq!(step_rewards(&t, &ctx, &cfg).unwrap(), vec![1.0]);
        let dup = build_trajectory(
            EditKind::Add,
            v.encode_list(&[DrugId(3), DrugId(3)]).unwrap(),
            &v,
            &c,
            MedicationSet::new(),
        );
        assert_eq!(step_rewards(&dup, &ctx, &cfg).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn list_reward_examples() {
        let v = vocab();
        let gt = set(&[1, 2]);
        let c = set(&(0..10).collect::<Vec<_>>());
        let ddi = DdiGraph::empty(10);
        let ctx = RewardContext {
            ground_truth: &gt,
            candidates: &c,
            ddi: &ddi,
        };
        let cfg = ShapingConfig {
            weights: MetricWeights::new(0.0, 0.5).unwrap(),
            lambda: 5.0,
            gamma: 1.0,
        };
        let empty = build_trajectory(EditKind::Add, vec![v.eos()], &v, &c, MedicationSet::new());
        assert_eq!(list_reward(&empty, &ctx, &cfg).unwrap(), 0.0);
        // Two correct drugs then a garbled one-symbol name.
        let mut toks = v.encode_list(&[DrugId(1), DrugId(2)]).unwrap();
        toks.pop();
        toks.extend([crate::vocab::Token(0), v.eos()]);
        let t = build_trajectory(EditKind::Add, toks, &v, &c, MedicationSet::new());
        assert!(matches!(t.actions[2].target, Entry::Refusal(_)));
        let r = list_reward(&t, &ctx, &cfg).unwrap();
        // The refusal entry joins the union: J = 2/3, refusal rate = 1/3.
        assert!((r - (2.0 / 3.0 - 0.5 / 3.0)).abs() < 1e-15);
        let sum: f64 = step_rewards(&t, &ctx, &cfg).unwrap().iter().sum();
        assert!((sum - r).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let z = normalize_group(&[1.0, 2.0, 3.0]).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in z.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert!((z[0] + 1.224744871391589).abs() < 1e-7);
        assert_eq!(normalize_group(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(normalize_group(&[0.1; 3]).unwrap(), vec![0.0; 3]);
        let two = normalize_group(&[0.0, 1.0]).unwrap();
        assert!((two[0] + 1.0).abs() < 1e-7 && (two[1] - 1.0).abs() < 1e-7);
        assert!(matches!(
            normalize_group(&[1.0]),
            Err(Error::GroupTooSmall(1))
        ));
    }

    fn two_step_setup() -> (Vocab, MedicationSet, MedicationSet, DdiGraph) {
        // Drug 1 interacts with drug 2; both are in the ground truth.
        let gt = set(&[1, 2, 3]);
        let c = set(&(0..10).collect::<Vec<_>>());
        let ddi = DdiGraph::from_edges(10, &[(1, 2)]).unwrap();
        (vocab(), gt, c, ddi)
    }

    #[test]
    fn zero_lambda_matches_outcome_mode() {
        let (v, gt, c, ddi) = two_step_setup();
        let ctx = RewardContext {
            ground_truth: &gt,
            candidates: &c,
            ddi: &ddi,
        };
        let cfg = ShapingConfig {
            weights: MetricWeights::new(2.0, 0.5).unwrap(),
            lambda: 0.0,
            gamma: 1.0,
        };
        let t = build_trajectory(
            EditKind::Add,
            v.encode_list(&[DrugId(1), DrugId(2)]).unwrap(),
            &v,
            &c,
            MedicationSet::new(),
        );
        let eos = Some(t.tokens.len() - 1);
        let a = token_advantages(&t, 0.3, &ctx, &cfg, AdvantageMode::StepWise, eos).unwrap();
        let b = token_advantages(&t, 0.3, &ctx, &cfg, AdvantageMode::Outcome, eos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_broadcasts_one_delta() {
        let (v, gt, c, ddi) = two_step_setup();
        let ctx = RewardContext {
            ground_truth: &gt,
            candidates: &c,
            ddi: &ddi,
        };
        let cfg = ShapingConfig {
            weights: MetricWeights::new(2.0, 0.5).unwrap(),
            lambda: 5.0,
            gamma: 1.0,
        };
        let t = build_trajectory(
            EditKind::Add,
            v.encode_list(&[DrugId(3)]).unwrap(),
            &v,
            &c,
            MedicationSet::new(),
        );
        let adv = token_advantages(&t, -0.2, &ctx, &cfg, AdvantageMode::StepWise, Some(3)).unwrap();
        let delta = 1.0 / 3.0;
        assert_eq!(adv.len(), 4);
        for a in &adv[..3] {
            assert!((a - (-0.2 + 5.0 * delta)).abs() < 1e-15);
        }
        assert_eq!(adv[3], -0.2);
    }

    #[test]
    fn interacting_step_gets_less_credit() {
        let (v, gt, c, ddi) = two_step_setup();
        let ctx = RewardContext {
            ground_truth: &gt,
            candidates: &c,
            ddi: &ddi,
        };
        let cfg = ShapingConfig {
            weights: MetricWeights::new(2.0, 0.5).unwrap(),
            lambda: 5.0,
            gamma: 1.0,
        };
        let t = build_trajectory(
            EditKind::Add,
            v.encode_list(&[DrugId(1), DrugId(2)]).unwrap(),
            &v,
            &c,
            MedicationSet::new(),
        );
        let adv = token_advantages(&t, 0.0, &ctx, &cfg, AdvantageMode::StepWise, Some(6)).unwrap();
        let step1 = &adv[0..3];
        let step2 = &adv[3..6];
        assert!(step2.iter().all(|b| step1.iter().all(|a| b < a)));
    }
}
