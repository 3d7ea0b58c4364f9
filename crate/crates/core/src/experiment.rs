//! End-to-end runs: data preparation, supervised fine-tuning of both roles,
//! RL of the list editor, evaluation and the penalty sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    build_collab_embeddings, gen_cohort, oracle_edit_targets, split_cohort, CohortConfig,
};
use crate::domain::{Entry, MedicationSet, PatientRecord};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::pipeline::{evaluate, filter_stage, EvalSummary, Recommendation};
use crate::policy::{
    train_classifier, train_list, Policy, PolicyConfig, PolicyDims, PolicyParams, Prompt,
    SftConfig, SftExample,
};
use crate::seed;
use crate::shaping::AdvantageMode;
use crate::trainer::{train, RlPrompt, TrainContext, TrainOutcome, TrainerConfig};
use crate::vocab::{EditKind, Vocab, VocabConfig};

/// Perturbation of the classifier's lists when building edit-stage training
/// prompts. The classifier fits its training patients closely, so the
/// perturbed copies expose the editor to errors like those it meets on
/// unseen patients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptNoise {
    /// Probability of dropping each listed drug.
    pub drop: f64,
    /// Expected number of spurious drugs added.
    pub add: f64,
    /// Perturbed copies per training patient, besides the unperturbed list.
    pub copies: usize,
}

impl Default for PromptNoise {
    fn default() -> Self {
        Self {
            drop: 0.15,
            add: 3.0,
            copies: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub vocab: VocabConfig,
    pub policy: PolicyConfig,
    pub collab_dim: usize,
    pub sft: SftConfig,
    pub noise: PromptNoise,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::seeded(0)
    }
}

impl RunConfig {
    /// Defaults with every component seed derived from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            cohort: CohortConfig::default(),
            vocab: VocabConfig::default(),
            policy: PolicyConfig::default(),
            collab_dim: 8,
            sft: SftConfig::default(),
            noise: PromptNoise::default(),
            trainer: TrainerConfig::default(),
        };
        cfg.reseed(seed);
        cfg
    }

    /// A small configuration for fast end-to-end runs: 150 patients, short
    /// fine-tuning, and 50 RL updates on 4 prompts with groups of 4.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = Self::seeded(seed);
        cfg.cohort.n_patients = 150;
        cfg.sft.cls_epochs = 5;
        cfg.sft.list_epochs = 2;
        cfg.noise.copies = 0;
        cfg.trainer.group_size = 4;
        cfg.trainer.batch_prompts = 4;
        cfg.trainer.max_updates = 50;
        cfg
    }

    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.cohort.seed = seed::derive_seed(seed, "cohort", 0);
        self.vocab.seed = seed::derive_seed(seed, "vocab", 0);
        self.sft.seed = seed::derive_seed(seed, "sft", 0);
        self.trainer.seed = seed::derive_seed(seed, "rl", 0);
    }
}

/// Generates the cohort, splits it 4:1:1, and factorizes training
/// co-prescriptions.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let cohort = gen_cohort(&cfg.cohort)?;
    let splits = split_cohort(
        cohort.patients.len(),
        [4, 1, 1],
        seed::derive_seed(cfg.seed, "split", 0),
    )?;
    let train: Vec<&PatientRecord> = splits.train.iter().map(|&i| &cohort.patients[i]).collect();
    let collab = build_collab_embeddings(&train, cfg.cohort.n_drugs, cfg.collab_dim)?;
    Ok(Dataset {
        patients: cohort.patients,
        ddi: cohort.ddi,
        splits,
        collab,
    })
}

pub fn build_vocab(cfg: &RunConfig, n_drugs: usize) -> Result<Vocab> {
    Vocab::new(n_drugs, cfg.vocab)
}

pub fn policy_dims(cfg: &RunConfig, ds: &Dataset, vocab: &Vocab) -> Result<PolicyDims> {
    let feature_dim = ds
        .patients
        .first()
        .map(|p| p.features.len())
        .ok_or_else(|| Error::Data("empty cohort".into()))?;
    let dims = PolicyDims {
        n_drugs: vocab.n_drugs(),
        n_symbols: vocab.n_symbols(),
        name_len: vocab.name_len(),
        feature_dim,
        token_dim: cfg.policy.token_dim,
        text_dim: cfg.policy.text_dim,
        collab_dim: ds.collab.shape.get(1).copied().unwrap_or(0),
        proj_dim: cfg.policy.proj_dim,
        hidden: cfg.policy.hidden,
        max_tokens: cfg.policy.max_tokens,
    };
    dims.validate()?;
    Ok(dims)
}

/// Both supervised models.
#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub cls: PolicyParams,
    pub list: PolicyParams,
    /// Edit-stage starting lists, reused as RL prompts.
    pub starts: Vec<(usize, MedicationSet)>,
    pub cls_losses: Vec<f64>,
    pub list_losses: Vec<f64>,
}

/// Classifier lists for `patients`.
pub fn filter_lists(
    cls: &PolicyParams,
    vocab: &Vocab,
    ds: &Dataset,
    patients: &[usize],
) -> Result<Vec<MedicationSet>> {
    let policy = Policy::new(cls, vocab, &ds.ddi)?;
    patients
        .iter()
        .map(|&i| filter_stage(&ds.patients[i], &policy))
        .collect()
}

/// Starting lists for edit-stage training: each training patient's
/// classifier list followed by its perturbed copies.
pub fn edit_starts(
    cls: &PolicyParams,
    vocab: &Vocab,
    ds: &Dataset,
    noise: &PromptNoise,
    seed_value: u64,
) -> Result<Vec<(usize, MedicationSet)>> {
    if !(0.0..=1.0).contains(&noise.drop) || !(noise.add >= 0.0) {
        return Err(Error::Config(format!("invalid prompt noise {noise:?}")));
    }
    let lists = filter_lists(cls, vocab, ds, &ds.splits.train)?;
    let mut out = Vec::with_capacity(lists.len() * (noise.copies + 1));
    for (k, (&pi, m_p)) in ds.splits.train.iter().zip(lists).enumerate() {
        let candidates = &ds.patients[pi].candidate_set;
        let p_add = noise.add / (candidates.len() - m_p.len()).max(1) as f64;
        for c in 0..noise.copies {
            let mut rng = seed::stream(seed_value, "prompt-noise", (k * noise.copies + c) as u64);
            let m: MedicationSet = candidates
                .drugs()
                .filter(|&d| {
                    let u = rng.random::<f64>();
                    if m_p.contains_drug(d) {
                        u >= noise.drop
                    } else {
                        u < p_add
                    }
                })
                .map(Entry::Known)
                .collect();
            out.push((pi, m));
        }
        out.push((pi, m_p));
    }
    Ok(out)
}

/// Edit-stage SFT examples: both instructions per start, targeting the exact
/// edits to the ground truth.
pub fn list_examples<'a>(
    ds: &'a Dataset,
    vocab: &Vocab,
    starts: &'a [(usize, MedicationSet)],
) -> Result<Vec<SftExample<'a>>> {
    let mut out = Vec::with_capacity(2 * starts.len());
    for (pi, m0) in starts {
        let patient = &ds.patients[*pi];
        let (add, remove) = oracle_edit_targets(patient, m0);
        for (instruction, list) in [(EditKind::Add, add), (EditKind::Remove, remove)] {
            out.push(SftExample {
                prompt: Prompt {
                    patient,
                    instruction,
                    m0,
                },
                target: vocab.encode_list(&list)?,
            });
        }
    }
    Ok(out)
}

/// Fine-tunes the classifier, then the list editor initialized from it.
pub fn supervised(ds: &Dataset, vocab: &Vocab, cfg: &RunConfig) -> Result<SftOutcome> {
    let dims = policy_dims(cfg, ds, vocab)?;
    let mut rng = seed::stream(cfg.seed, "init", 0);
    let init = PolicyParams::init(dims, ds.collab.clone(), &mut rng)?;
    let train = ds.split(&ds.splits.train);
    let (cls, cls_losses) = train_classifier(init, vocab, &ds.ddi, &train, &cfg.sft)?;

    let starts = edit_starts(
        &cls,
        vocab,
        ds,
        &cfg.noise,
        seed::derive_seed(cfg.seed, "prompt-noise", 0),
    )?;
    let examples = list_examples(ds, vocab, &starts)?;
    let list_init = PolicyParams::list_from_classifier(&cls, &mut rng);
    let (list, list_losses) = train_list(list_init, vocab, &ds.ddi, &examples, &cfg.sft)?;
    Ok(SftOutcome {
        cls,
        list,
        starts,
        cls_losses,
        list_losses,
    })
}

/// RL prompts: both instructions for every edit-stage start.
pub fn rl_prompts(sft: &SftOutcome) -> Vec<RlPrompt> {
    sft.starts
        .iter()
        .flat_map(|(patient, m0)| {
            EditKind::ALL.map(|instruction| RlPrompt {
                patient: *patient,
                instruction,
                m0: m0.clone(),
            })
        })
        .collect()
}

/// RL of the list editor from its fine-tuned state, evaluating on the
/// validation split every `trainer.eval_every` updates.
pub fn reinforce(
    ds: &Dataset,
    vocab: &Vocab,
    sft: &SftOutcome,
    prompts: &[RlPrompt],
    trainer: &TrainerConfig,
) -> Result<TrainOutcome> {
    let filter = Policy::new(&sft.cls, vocab, &ds.ddi)?;
    let ctx = TrainContext {
        vocab,
        ddi: &ds.ddi,
        patients: &ds.patients,
        filter: &filter,
        eval_patients: &ds.splits.valid,
    };
    train(&ctx, sft.list.clone(), prompts, trainer)
}

/// Two-stage evaluation on a split; `list = None` skips editing.
pub fn evaluate_models(
    ds: &Dataset,
    vocab: &Vocab,
    cls: &PolicyParams,
    list: Option<&PolicyParams>,
    split: &[usize],
) -> Result<(EvalSummary, Vec<Recommendation>)> {
    let filter = Policy::new(cls, vocab, &ds.ddi)?;
    let patients = ds.split(split);
    match list {
        Some(p) => {
            let editor = Policy::new(p, vocab, &ds.ddi)?;
            evaluate(&patients, &filter, Some(&editor), &ds.ddi)
        }
        None => evaluate(&patients, &filter, None, &ds.ddi),
    }
}

/// One point of the penalty sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub ddi: f64,
}

/// Trains and evaluates (test split) once per `alpha`, sharing the
/// supervised models and every seed.
pub fn sweep_alpha(
    ds: &Dataset,
    vocab: &Vocab,
    sft: &SftOutcome,
    prompts: &[RlPrompt],
    trainer: &TrainerConfig,
    alphas: &[f64],
) -> Result<Vec<SweepRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut cfg = *trainer;
            cfg.shaping.weights.alpha = alpha;
            let out = reinforce(ds, vocab, sft, prompts, &cfg)?;
            let (eval, _) =
                evaluate_models(ds, vocab, &sft.cls, Some(&out.params), &ds.splits.test)?;
            Ok(SweepRow {
                alpha,
                jaccard: eval.jaccard,
                f1: eval.f1,
                ddi: eval.ddi,
            })
        })
        .collect()
}

pub fn tradeoff_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,jaccard,f1,ddi\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.alpha, r.jaccard, r.f1, r.ddi));
    }
    out
}

/// Parses `--algo` values.
pub fn parse_algo(s: &str) -> Result<AdvantageMode> {
    match s {
        "grpo" => Ok(AdvantageMode::Outcome),
        "step-grpo" => Ok(AdvantageMode::StepWise),
        other => Err(Error::Config(format!(
            "unknown algorithm {other:?}; expected grpo or step-grpo"
        ))),
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
    }
}
