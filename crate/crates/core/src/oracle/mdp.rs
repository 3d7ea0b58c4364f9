//! Exact finite-horizon solving of small set-editing MDPs under an outcome
//! reward and a potential-shaped reward built from the same potential.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use super::naive::NaiveWorld;
use crate::domain::{DrugId, Entry};
use crate::seed;

pub const MAX_UNIVERSE: usize = 6;
pub const MAX_HORIZON: usize = 4;
/// Q-values within this distance of the best are tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MdpAction {
    Add(usize),
    Remove(usize),
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RewardScheme {
    /// Zero per edit; stopping pays the potential of the current set.
    Terminal,
    /// `gamma * phi(s') - phi(s)` per edit; stopping pays 0.
    Shaped,
}

/// A non-potential bonus added to the shaped reward of one action, used to
/// show the checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mutation {
    pub action: MdpAction,
    pub bonus: f64,
}

/// Sets over a universe of drugs `0..n` (bitmasks) with a step counter.
#[derive(Debug, Clone)]
pub struct TinyMdp {
    pub n: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub initial: u32,
    pub world: NaiveWorld,
    pub mutation: Option<Mutation>,
}

/// Values and greedy tie-sets indexed by `[t][mask]`.
#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<Vec<f64>>,
    pub greedy: Vec<Vec<Vec<MdpAction>>>,
}

impl TinyMdp {
    pub fn entries(&self, mask: u32) -> Vec<Entry> {
        (0..self.n)
            .filter(|k| mask & (1 << k) != 0)
            .map(|k| Entry::Known(DrugId(k as u32)))
            .collect()
    }

    pub fn phi(&self, mask: u32) -> f64 {
        self.world.potential(&self.entries(mask))
    }

    pub fn actions(&self, mask: u32, t: usize) -> Vec<MdpAction> {
        let mut out = Vec::new();
        if t < self.horizon {
            for k in 0..self.n {
                out.push(if mask & (1 << k) == 0 {
                    MdpAction::Add(k)
                } else {
                    MdpAction::Remove(k)
                });
            }
        }
        out.push(MdpAction::Stop);
        out
    }

    /// `None` for Stop (the absorbing state).
    pub fn next(mask: u32, a: MdpAction) -> Option<u32> {
        match a {
            MdpAction::Add(k) => Some(mask | (1 << k)),
            MdpAction::Remove(k) => Some(mask & !(1 << k)),
            MdpAction::Stop => None,
        }
    }

    fn reward(&self, scheme: RewardScheme, mask: u32, a: MdpAction, phi: &[f64]) -> f64 {
        let base = match (scheme, Self::next(mask, a)) {
            (RewardScheme::Terminal, None) => phi[mask as usize],
            (RewardScheme::Terminal, Some(_)) => 0.0,
            (RewardScheme::Shaped, None) => 0.0,
            (RewardScheme::Shaped, Some(s)) => self.gamma * phi[s as usize] - phi[mask as usize],
        };
        match (scheme, self.mutation) {
            (RewardScheme::Shaped, Some(m)) if m.action == a => base + m.bonus,
            _ => base,
        }
    }

    /// Backward induction over `t = horizon .. 0`.
    pub fn solve(&self, scheme: RewardScheme) -> Solution {
        let n_masks = 1usize << self.n;
        let phi: Vec<f64> = (0..n_masks as u32).map(|m| self.phi(m)).collect();
        let mut values = vec![vec![0.0; n_masks]; self.horizon + 1];
        let mut greedy = vec![vec![Vec::new(); n_masks]; self.horizon + 1];
        for t in (0..=self.horizon).rev() {
            for mask in 0..n_masks as u32 {
                let qs: Vec<(MdpAction, f64)> = self
                    .actions(mask, t)
                    .into_iter()
                    .map(|a| {
                        let future = match Self::next(mask, a) {
                            Some(s) => self.gamma * values[t + 1][s as usize],
                            None => 0.0,
                        };
                        (a, self.reward(scheme, mask, a, &phi) + future)
                    })
                    .collect();
                let best = qs.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
                values[t][mask as usize] = best;
                greedy[t][mask as usize] = qs
                    .iter()
                    .filter(|q| q.1 >= best - TIE_TOL)
                    .map(|q| q.0)
                    .collect();
            }
        }
        Solution { values, greedy }
    }

    /// `(t, mask)` pairs reachable from the initial state.
    pub fn reachable(&self) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        let mut frontier = vec![self.initial];
        for t in 0..=self.horizon {
            frontier.sort_unstable();
            frontier.dedup();
            out.extend(frontier.iter().map(|&m| (t, m)));
            frontier = frontier
                .iter()
                .flat_map(|&m| {
                    self.actions(m, t)
                        .into_iter()
                        .filter_map(move |a| Self::next(m, a))
                })
                .collect();
        }
        out
    }
}

/// One checked instance.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub index: usize,
    pub n_drugs: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub beta_refusal: f64,
    pub gamma: f64,
    pub n_states: usize,
    pub mismatches: usize,
    /// Largest `|V_shaped - (V_terminal - phi)|` over reachable states.
    pub value_gap: f64,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Compares greedy tie-sets of both schemes at every reachable state.
pub fn check_instance(mdp: &TinyMdp, index: usize) -> InstanceReport {
    let terminal = mdp.solve(RewardScheme::Terminal);
    let shaped = mdp.solve(RewardScheme::Shaped);
    let states = mdp.reachable();
    let mut mismatches = 0;
    let mut value_gap: f64 = 0.0;
    for &(t, m) in &states {
        if terminal.greedy[t][m as usize] != shaped.greedy[t][m as usize] {
            mismatches += 1;
        }
        let expected = terminal.values[t][m as usize] - mdp.phi(m);
        value_gap = value_gap.max((shaped.values[t][m as usize] - expected).abs());
    }
    InstanceReport {
        index,
        n_drugs: mdp.n,
        horizon: mdp.horizon,
        alpha: mdp.world.alpha,
        beta_refusal: mdp.world.beta_refusal,
        gamma: mdp.gamma,
        n_states: states.len(),
        mismatches,
        value_gap,
    }
}

/// A random instance: universe of 1..=6 drugs, horizon 0..=4, random ground
/// truth, candidate set, interaction edges and starting set.
pub fn random_instance<R: Rng>(rng: &mut R, gamma: f64) -> TinyMdp {
    let n = rng.random_range(1..=MAX_UNIVERSE);
    let horizon = rng.random_range(0..=MAX_HORIZON);
    let all: Vec<Entry> = (0..n as u32).map(|k| Entry::Known(DrugId(k))).collect();
    let pick = |rng: &mut R, p: f64| -> Vec<Entry> {
        all.iter()
            .filter(|_| rng.random::<f64>() < p)
            .cloned()
            .collect()
    };
    let ground_truth = pick(rng, 0.5);
    // Every ground-truth drug is admissible; other drugs may be refusals.
    let mut candidates = ground_truth.clone();
    candidates.extend(
        all.iter()
            .filter(|e| !ground_truth.contains(e) && rng.random::<f64>() < 0.6)
            .cloned(),
    );
    let mut edges = Vec::new();
    for a in 0..n as u32 {
        for b in a + 1..n as u32 {
            if rng.random::<f64>() < 0.35 {
                edges.push((a, b));
            }
        }
    }
    let alpha = *[0.0, 2.0, 5.0].choose(rng).unwrap();
    let beta_refusal = *[0.0, 0.5].choose(rng).unwrap();
    let initial = rng.random_range(0..1u32 << n);
    TinyMdp {
        n,
        horizon,
        gamma,
        initial,
        world: NaiveWorld {
            ground_truth,
            candidates,
            edges,
            alpha,
            beta_refusal,
        },
        mutation: None,
    }
}

/// The planted counterexample: from `{0}` with ground truth `{0}`, adding
/// drug 1 and removing it again ties with stopping, so a bonus on `Add(1)`
/// changes the greedy set.
pub fn planted_instance(bonus: f64) -> TinyMdp {
    let d0 = Entry::Known(DrugId(0));
    let d1 = Entry::Known(DrugId(1));
    TinyMdp {
        n: 2,
        horizon: 2,
        gamma: 1.0,
        initial: 0b01,
        world: NaiveWorld {
            ground_truth: vec![d0.clone()],
            candidates: vec![d0, d1],
            edges: Vec::new(),
            alpha: 0.0,
            beta_refusal: 0.0,
        },
        mutation: Some(Mutation {
            action: MdpAction::Add(1),
            bonus,
        }),
    }
}

/// Outcome of a theorem check over many instances.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub instances: Vec<InstanceReport>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.instances.iter().all(InstanceReport::passed)
    }

    pub fn n_failed(&self) -> usize {
        self.instances.iter().filter(|r| !r.passed()).count()
    }
}

/// Checks `n_instances` random instances. With `mutate`, every instance gets a
/// non-potential bonus of 0.1 on `Add(0)` and the planted counterexample is
/// appended, so the report must fail.
pub fn verify_theorem(seed: u64, n_instances: usize, gamma: f64, mutate: bool) -> TheoremReport {
    let mut instances: Vec<InstanceReport> = (0..n_instances)
        .map(|i| {
            let mut rng = seed::stream(seed, "tiny-mdp", i as u64);
            let mut mdp = random_instance(&mut rng, gamma);
            if mutate {
                mdp.mutation = Some(Mutation {
                    action: MdpAction::Add(0),
                    bonus: 0.1,
                });
            }
            check_instance(&mdp, i)
        })
        .collect();
    if mutate {
        let mut planted = planted_instance(0.1);
        planted.gamma = gamma;
        instances.push(check_instance(&planted, n_instances));
    }
    TheoremReport { instances }
}
