//! Randomized self-checks shared by the `verify` command and the test suites.
//! Each check compares production code against an oracle on seeded cases.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::finite_diff::{finite_diff_grad, max_relative_error};
use super::naive::{
    brute_force_reward, naive_ddi, naive_f1, naive_jaccard, naive_refusal, NaiveWorld,
};
use crate::domain::{
    ddi_rate, jaccard, precision_recall_f1, refusal_rate, DdiGraph, DrugId, Entry, MedicationSet,
    MetricWeights, PatientRecord,
};
use crate::policy::{Policy, PolicyDims, PolicyParams, Prompt, Tensor};
use crate::seed::{self, StreamRng};
use crate::shaping::{list_reward, normalize_group, step_rewards, RewardContext, ShapingConfig};
use crate::vocab::{build_trajectory, EditKind, Token, Vocab, VocabConfig};

/// Outcome of one randomized check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error (meaning depends on the check).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// A small random world: vocabulary, graph, one patient and parameters with
/// every learnable tensor away from zero.
pub struct SmallWorld {
    pub vocab: Vocab,
    pub ddi: DdiGraph,
    pub patient: PatientRecord,
    pub params: PolicyParams,
}

pub fn small_dims(n_drugs: usize, n_symbols: usize, name_len: usize) -> PolicyDims {
    PolicyDims {
        n_drugs,
        n_symbols,
        name_len,
        feature_dim: 3,
        token_dim: 3,
        text_dim: 3,
        collab_dim: 2,
        proj_dim: 2,
        hidden: 5,
        max_tokens: 12,
    }
}

fn random_graph(rng: &mut StreamRng, n_drugs: usize, p: f64) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for a in 0..n_drugs as u32 {
        for b in a + 1..n_drugs as u32 {
            if rng.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Six drugs, four symbols, two-symbol names, ground truth `{0, 2}`, and a
/// candidate set that excludes drug 5 so its name parses as a refusal.
pub fn small_world(s: u64) -> SmallWorld {
    let mut rng = seed::stream(s, "fixture", 0);
    let n_drugs = 6;
    let dims = small_dims(n_drugs, 4, 2);
    let vocab = Vocab::new(
        n_drugs,
        VocabConfig {
            n_symbols: 4,
            name_len: 2,
            seed: s,
        },
    )
    .expect("valid small vocabulary");
    let edges = random_graph(&mut rng, n_drugs, 0.4);
    let ddi = DdiGraph::from_edges(n_drugs, &edges).expect("edges within range");
    let features: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let history = if rng.random::<bool>() {
        Some((0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
    } else {
        None
    };
    let candidates = MedicationSet::from_drugs((0..n_drugs as u32 - 1).map(DrugId));
    let gt = MedicationSet::from_drugs([DrugId(0), DrugId(2)]);
    let patient = PatientRecord::new(s, features, history, gt, candidates).expect("valid patient");
    let collab = Tensor {
        shape: vec![n_drugs, 2],
        data: (0..n_drugs * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    };
    let mut params = PolicyParams::init(dims, collab, &mut rng).expect("valid dims");
    let flat: Vec<f64> = params
        .learnable_flat()
        .iter()
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    params.set_learnable_flat(&flat);
    SmallWorld {
        vocab,
        ddi,
        patient,
        params,
    }
}

/// A random token sequence mixing real names, junk runs and separators.
pub fn random_tokens<R: Rng>(vocab: &Vocab, rng: &mut R, len: usize) -> Vec<Token> {
    let mut out = Vec::new();
    while out.len() < len {
        match rng.random_range(0..4) {
            0 | 1 => {
                let id = DrugId(rng.random_range(0..vocab.n_drugs() as u32));
                out.extend(vocab.encode_drug_name(id).expect("id within vocabulary"));
                out.push(vocab.sep());
            }
            2 => out.push(Token(rng.random_range(0..vocab.size() as u16))),
            _ => out.push(vocab.sep()),
        }
    }
    out.truncate(len);
    out
}

fn random_subset(rng: &mut StreamRng, universe: &[Entry], max_len: usize) -> Vec<Entry> {
    let k = rng.random_range(0..=max_len.min(universe.len()));
    let mut out: Vec<Entry> = universe.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..out.len());
        out.swap(i, j);
    }
    out.truncate(k);
    out
}

/// Fast-path metrics against pairwise-loop implementations, compared with
/// exact equality on random sets of at most 12 entries (refusals included).
pub fn check_metrics(seed_value: u64, cases: usize) -> CheckReport {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seed::stream(seed_value, "metric-case", case as u64);
        let n_drugs = rng.random_range(1..=16usize);
        let mut universe: Vec<Entry> = (0..n_drugs as u32)
            .map(|k| Entry::Known(DrugId(k)))
            .collect();
        universe.extend(["zz", "q?"].map(|s| Entry::Refusal(s.to_string())));
        let density = rng.random::<f64>();
        let edges = random_graph(&mut rng, n_drugs, density);
        let graph = DdiGraph::from_edges(n_drugs, &edges).expect("edges within range");
        let (a, b, c) = (
            random_subset(&mut rng, &universe, 12),
            random_subset(&mut rng, &universe, 12),
            random_subset(&mut rng, &universe, 16),
        );
        let set = |v: &[Entry]| v.iter().cloned().collect::<MedicationSet>();
        let (sa, sb, sc) = (set(&a), set(&b), set(&c));
        let fast = [
            jaccard(&sa, &sb),
            precision_recall_f1(&sa, &sb).2,
            ddi_rate(&sa, &graph).expect("known ids in range"),
            refusal_rate(&sa, &sc),
        ];
        let slow = [
            naive_jaccard(&a, &b),
            naive_f1(&a, &b),
            naive_ddi(&a, &edges),
            naive_refusal(&a, &c),
        ];
        let err = fast
            .iter()
            .zip(&slow)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        if fast != slow {
            failures += 1;
        }
    }
    CheckReport {
        name: "metric-oracle".into(),
        cases,
        failures,
        worst,
        tolerance: 0.0,
    }
}

/// Fuzzed edit trajectories: the undiscounted step rewards must sum to the
/// list reward, which must match a vector-based replay of the actions.
pub fn check_telescoping(seed_value: u64, cases: usize) -> CheckReport {
    const TOL: f64 = 1e-9;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seed::stream(seed_value, "telescoping-case", case as u64);
        let n_drugs = rng.random_range(2..=10usize);
        let name_len = rng.random_range(2..=3usize);
        let vocab = Vocab::new(
            n_drugs,
            VocabConfig {
                n_symbols: 6,
                name_len,
                seed: case as u64,
            },
        )
        .expect("6^name_len covers 10 drugs");
        let edges = random_graph(&mut rng, n_drugs, 0.3);
        let graph = DdiGraph::from_edges(n_drugs, &edges).expect("edges within range");
        let pick = |rng: &mut StreamRng, p: f64| {
            MedicationSet::from_drugs(
                (0..n_drugs as u32)
                    .filter(|_| rng.random::<f64>() < p)
                    .map(DrugId),
            )
        };
        let gt = pick(&mut rng, 0.5);
        let candidates = gt.union(&pick(&mut rng, 0.6));
        let m0 = pick(&mut rng, 0.4);
        let instruction = if rng.random::<bool>() {
            EditKind::Add
        } else {
            EditKind::Remove
        };
        let len = rng.random_range(0..=30usize);
        let tokens = random_tokens(&vocab, &mut rng, len);
        let traj = build_trajectory(instruction, tokens, &vocab, &candidates, m0.clone());
        let cfg = ShapingConfig {
            weights: MetricWeights {
                alpha: rng.random_range(0.0..10.0),
                beta_refusal: rng.random_range(0.0..1.0),
            },
            lambda: 1.0,
            gamma: 1.0,
        };
        let ctx = RewardContext {
            ground_truth: &gt,
            candidates: &candidates,
            ddi: &graph,
        };
        let sum: f64 = step_rewards(&traj, &ctx, &cfg)
            .expect("valid trajectory")
            .iter()
            .sum();
        let total = list_reward(&traj, &ctx, &cfg).expect("valid trajectory");
        let world = NaiveWorld {
            ground_truth: gt.iter().cloned().collect(),
            candidates: candidates.iter().cloned().collect(),
            edges,
            alpha: cfg.weights.alpha,
            beta_refusal: cfg.weights.beta_refusal,
        };
        let actions: Vec<(EditKind, Entry)> = traj
            .actions
            .iter()
            .map(|a| (a.kind, a.target.clone()))
            .collect();
        let initial: Vec<Entry> = m0.iter().cloned().collect();
        let brute = brute_force_reward(&world, &initial, &actions);
        let err = (sum - total).abs().max((total - brute).abs());
        worst = worst.max(err);
        if err >= TOL {
            failures += 1;
        }
    }
    CheckReport {
        name: "telescoping".into(),
        cases,
        failures,
        worst,
        tolerance: TOL,
    }
}

/// Spread below which the additive `1e-8` guard moves the normalized
/// standard deviation away from 1 by more than `1e-6`.
pub const NORMALIZATION_MIN_SPREAD: f64 = 1e-2;

/// Group normalization on random non-constant vectors with standard normal
/// entries, and on constant vectors (all zeros). Every output must have zero
/// mean and population std `sigma / (sigma + 1e-8)`; whenever the input spread
/// is at least [`NORMALIZATION_MIN_SPREAD`] that std must be within `1e-6`
/// of 1. `worst` is the largest `|std - 1|` among those vectors.
pub fn check_normalization(seed_value: u64, cases: usize) -> CheckReport {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seed::stream(seed_value, "normalization-case", case as u64);
        let g = rng.random_range(2..=16usize);
        let mut r: Vec<f64> = (0..g).map(|_| rng.sample(StandardNormal)).collect();
        if r.iter().all(|&x| x == r[0]) {
            r[0] += 1.0;
        }
        let pop_std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (
                m,
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt(),
            )
        };
        let (_, sigma) = pop_std(&r);
        let z = normalize_group(&r).expect("finite rewards");
        let (mean, std) = pop_std(&z);
        let guarded = sigma / (sigma + 1e-8);
        let c = rng.random_range(-5.0..5.0);
        let constant_ok = normalize_group(&vec![c; g])
            .expect("finite rewards")
            .iter()
            .all(|&x| x == 0.0);
        let mut ok = mean.abs() < 1e-9 && (std - guarded).abs() < 1e-12 && constant_ok;
        if sigma >= NORMALIZATION_MIN_SPREAD {
            worst = worst.max((std - 1.0).abs());
            ok &= (std - 1.0).abs() < 1e-6;
        }
        if !ok {
            failures += 1;
        }
    }
    CheckReport {
        name: "group-normalization".into(),
        cases,
        failures,
        worst,
        tolerance: 1e-6,
    }
}

/// Number of vectors in [`check_normalization`] whose spread is below
/// [`NORMALIZATION_MIN_SPREAD`].
pub fn normalization_low_spread(seed_value: u64, cases: usize) -> usize {
    (0..cases)
        .filter(|&case| {
            let mut rng = seed::stream(seed_value, "normalization-case", case as u64);
            let g = rng.random_range(2..=16usize);
            let r: Vec<f64> = (0..g).map(|_| rng.sample(StandardNormal)).collect();
            let m = r.iter().sum::<f64>() / g as f64;
            let sigma = (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g as f64).sqrt();
            sigma < NORMALIZATION_MIN_SPREAD
        })
        .count()
}

/// Analytic gradients of the sequence log-probability against central
/// finite differences on small random configurations.
pub fn check_gradients(seed_value: u64, cases: usize) -> CheckReport {
    const TOL: f64 = 1e-4;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let w = small_world(seed::derive_seed(seed_value, "gradient-world", case as u64));
        let mut rng = seed::stream(seed_value, "gradient-tokens", case as u64);
        let len = rng.random_range(1..=10usize);
        let tokens = random_tokens(&w.vocab, &mut rng, len);
        let instruction = if case % 2 == 0 {
            EditKind::Add
        } else {
            EditKind::Remove
        };
        let m0 = MedicationSet::from_drugs((0..6u32).filter(|_| rng.random::<bool>()).map(DrugId));
        let prompt = Prompt {
            patient: &w.patient,
            instruction,
            m0: &m0,
        };
        let policy = Policy::new(&w.params, &w.vocab, &w.ddi).expect("finite params");
        let analytic = policy
            .grad_logprob_sequence(prompt, &tokens)
            .expect("valid tokens");
        let numeric = finite_diff_grad(
            |x| {
                let mut p = w.params.clone();
                p.set_learnable_flat(x);
                let pol = Policy::new(&p, &w.vocab, &w.ddi).expect("finite params");
                pol.logprob_sequence(prompt, &tokens)
                    .expect("valid tokens")
                    .iter()
                    .sum()
            },
            &w.params.learnable_flat(),
            1e-5,
        );
        let err = max_relative_error(&analytic.learnable_flat(), &numeric, 1e-3);
        worst = worst.max(err);
        if !(err < TOL) {
            failures += 1;
        }
    }
    CheckReport {
        name: "gradient".into(),
        cases,
        failures,
        worst,
        tolerance: TOL,
    }
}
