//! Group-relative policy optimization of the list editor, with outcome or
//! step-wise advantages, ratio clipping and a KL penalty toward a frozen
//! reference.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DdiGraph, MedicationSet, PatientRecord};
use crate::error::{Error, Result};
use crate::optim::{Adam, Direction};
use crate::pipeline::{evaluate, DrugFilter};
use crate::policy::{Policy, PolicyParams, Prompt, TensorRole};
use crate::seed;
use crate::shaping::{AdvantageMode, GroupBatch, RewardContext, ShapingConfig};
use crate::vocab::{EditKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub beta_kl: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub inner_epochs: usize,
    pub batch_prompts: usize,
    pub max_updates: usize,
    pub mode: AdvantageMode,
    pub shaping: ShapingConfig,
    pub seed: u64,
    /// Rollout sampling temperature.
    pub temperature: f64,
    pub max_grad_norm: Option<f64>,
    /// Evaluate and record a curve point every this many updates; the final
    /// update is always recorded and 0 records only it.
    pub eval_every: usize,
    /// Record elapsed seconds in the curve; off keeps curves reproducible.
    pub wall_clock: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta_kl: 0.04,
            clip_epsilon: 0.2,
            learning_rate: 0.002,
            inner_epochs: 1,
            batch_prompts: 16,
            max_updates: 50,
            mode: AdvantageMode::StepWise,
            shaping: ShapingConfig::default(),
            seed: 0,
            temperature: 1.0,
            max_grad_norm: Some(1.0),
            eval_every: 1,
            wall_clock: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "clip_epsilon must be > 0, got {}",
                self.clip_epsilon
            )));
        }
        if !(self.beta_kl >= 0.0) || !(self.learning_rate >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config(
                "beta_kl and learning_rate must be >= 0 and temperature > 0".into(),
            ));
        }
        if self.batch_prompts == 0 || self.inner_epochs == 0 {
            return Err(Error::Config(
                "batch_prompts and inner_epochs must be positive".into(),
            ));
        }
        self.shaping.validate()
    }
}

/// An RL prompt: a patient (by index), an instruction and the starting list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlPrompt {
    pub patient: usize,
    pub instruction: EditKind,
    pub m0: MedicationSet,
}

impl RlPrompt {
    pub fn bind<'a>(&'a self, patients: &'a [PatientRecord]) -> Prompt<'a> {
        Prompt {
            patient: &patients[self.patient],
            instruction: self.instruction,
            m0: &self.m0,
        }
    }
}

/// `k3(x) = x - ln x - 1`, non-negative, zero at 1.
pub fn k3(x: f64) -> f64 {
    x - x.ln() - 1.0
}

/// Samples `G` trajectories from `old` at the configured temperature and
/// scores them.
pub fn sample_group<R: rand::Rng>(
    prompt: Prompt<'_>,
    old: &Policy<'_>,
    ddi: &DdiGraph,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<GroupBatch> {
    if cfg.group_size < 2 {
        return Err(Error::GroupTooSmall(cfg.group_size));
    }
    let max_tokens = old.params().dims.max_tokens;
    let trajs = (0..cfg.group_size)
        .map(|_| old.sample_sequence(prompt, cfg.temperature, max_tokens, rng))
        .collect::<Result<Vec<_>>>()?;
    let ctx = RewardContext {
        ground_truth: &prompt.patient.ground_truth,
        candidates: &prompt.patient.candidate_set,
        ddi,
    };
    GroupBatch::score(trajs, &ctx, &cfg.shaping, cfg.mode, old.vocab().eos())
}

/// Surrogate value, its gradient, and the mean per-token KL estimate.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub objective: f64,
    pub grad: PolicyParams,
    pub mean_kl: f64,
    pub n_tokens: usize,
}

/// Clipped surrogate for one group:
/// `(1/G) sum_i (1/|o_i|) sum_t [min(rho A, clip(rho) A) - beta_kl k3(pi_ref/pi_theta)]`,
/// with `rho = pi_theta / pi_old`. `clip_epsilon = None` drops clipping.
/// `ref_logprobs[i]` are the reference log-probabilities of trajectory `i`.
pub fn surrogate_and_grad(
    batch: &GroupBatch,
    prompt: Prompt<'_>,
    theta: &Policy<'_>,
    ref_logprobs: &[Vec<f64>],
    beta_kl: f64,
    clip_epsilon: Option<f64>,
) -> Result<Surrogate> {
    let g = batch.len();
    let mut grad = theta.params().zeros_like();
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut n_tokens = 0;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let len = traj.tokens.len();
        if len == 0 {
            continue;
        }
        let adv = &batch.advantages[i];
        let scale = 1.0 / (g as f64 * len as f64);
        let mut term = 0.0;
        theta.weighted_pass(
            prompt,
            &traj.tokens,
            |t, lp| {
                let rho = (lp - traj.logprobs_old[t]).exp();
                let x = (ref_logprobs[i][t] - lp).exp();
                let a = adv[t];
                let (value, active) = match clip_epsilon {
                    Some(eps) => {
                        let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
                        let active =
                            !((a > 0.0 && rho > 1.0 + eps) || (a < 0.0 && rho < 1.0 - eps));
                        ((rho * a).min(clipped * a), active)
                    }
                    None => (rho * a, true),
                };
                let kl = k3(x);
                kl_sum += kl;
                term += value - beta_kl * kl;
                scale * (if active { rho * a } else { 0.0 } - beta_kl * (1.0 - x))
            },
            Some(&mut grad),
        )?;
        objective += scale * term;
        n_tokens += len;
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite(format!("surrogate objective {objective}")));
    }
    Ok(Surrogate {
        objective,
        grad,
        mean_kl: kl_sum / n_tokens.max(1) as f64,
        n_tokens,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub update: usize,
    pub mean_reward: f64,
    pub eval_jaccard: f64,
    pub eval_f1: f64,
    pub eval_ddi: f64,
    pub mean_kl: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<CurveRecord>,
}

impl TrainingCurve {
    pub const CSV_HEADER: &'static str =
        "update,mean_reward,eval_jaccard,eval_f1,eval_ddi,mean_kl,seconds";

    pub fn push(&mut self, r: CurveRecord) {
        if let Some(last) = self.records.last() {
            assert!(r.update > last.update, "curve updates must increase");
        }
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.update,
                r.mean_reward,
                r.eval_jaccard,
                r.eval_f1,
                r.eval_ddi,
                r.mean_kl,
                r.seconds
            );
        }
        out
    }

    /// First update whose eval Jaccard reaches `threshold`.
    pub fn first_reaching(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.eval_jaccard >= threshold)
            .map(|r| r.update)
    }

    pub fn last(&self) -> Option<&CurveRecord> {
        self.records.last()
    }
}

/// Read-only inputs shared by every update.
pub struct TrainContext<'a> {
    pub vocab: &'a Vocab,
    pub ddi: &'a DdiGraph,
    pub patients: &'a [PatientRecord],
    /// Classifier used to build eval lists.
    pub filter: &'a dyn DrugFilter,
    /// Patients (indices) for the per-update evaluation.
    pub eval_patients: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub curve: TrainingCurve,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

/// Tensors RL may change: the trunk, embeddings and list heads. The
/// projection and classifier bias stay at their fine-tuned values.
pub fn rl_trainable(role: TensorRole) -> bool {
    matches!(role, TensorRole::Shared | TensorRole::ListOnly)
}

pub fn train(
    ctx: &TrainContext<'_>,
    initial: PolicyParams,
    prompts: &[RlPrompt],
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prompts.is_empty() && cfg.max_updates > 0 {
        return Err(Error::Data("no training prompts".into()));
    }
    let start = Instant::now();
    let reference = initial.clone();
    let ref_policy = Policy::new(&reference, ctx.vocab, ctx.ddi)?;
    let mut params = initial;
    let mut opt = Adam::new(cfg.learning_rate);
    opt.max_grad_norm = cfg.max_grad_norm;
    let mut curve = TrainingCurve::default();
    let eval_set: Vec<&PatientRecord> = ctx
        .eval_patients
        .iter()
        .map(|&i| &ctx.patients[i])
        .collect();

    for update in 1..=cfg.max_updates {
        let mut pick = seed::stream(cfg.seed, "prompts", update as u64);
        let chosen: Vec<&RlPrompt> = prompts
            .choose_multiple(&mut pick, cfg.batch_prompts.min(prompts.len()))
            .collect();

        let old = params.clone();
        let groups = {
            let old_policy = Policy::new(&old, ctx.vocab, ctx.ddi)?;
            chosen
                .par_iter()
                .enumerate()
                .map(|(j, p)| {
                    let prompt = p.bind(ctx.patients);
                    let idx = (update as u64) * 1_000_003 + j as u64;
                    let mut rng = seed::stream(cfg.seed, "rollout", idx);
                    let batch = sample_group(prompt, &old_policy, ctx.ddi, cfg, &mut rng)?;
                    let refs = batch
                        .trajectories
                        .iter()
                        .map(|t| ref_policy.logprob_sequence(prompt, &t.tokens))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((batch, refs))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let mean_reward = groups
            .iter()
            .flat_map(|(b, _)| b.rewards.iter())
            .sum::<f64>()
            / groups.iter().map(|(b, _)| b.rewards.len()).sum::<usize>() as f64;

        let mut mean_kl = 0.0;
        for epoch in 0..cfg.inner_epochs {
            let parts = {
                let theta = Policy::new(&params, ctx.vocab, ctx.ddi)?;
                chosen
                    .par_iter()
                    .zip(groups.par_iter())
                    .map(|(p, (batch, refs))| {
                        surrogate_and_grad(
                            batch,
                            p.bind(ctx.patients),
                            &theta,
                            refs,
                            cfg.beta_kl,
                            Some(cfg.clip_epsilon),
                        )
                    })
                    .collect::<Vec<_>>()
            };
            let mut grad = params.zeros_like();
            let mut objective = 0.0;
            let mut kl = 0.0;
            let mut tokens = 0usize;
            for part in parts {
                let s = match part {
                    Ok(s) => s,
                    Err(Error::NonFinite(msg)) => {
                        log::warn!("update {update}: halting, {msg}");
                        return Ok(TrainOutcome {
                            params,
                            curve,
                            halted: Some(msg),
                        });
                    }
                    Err(e) => return Err(e),
                };
                objective += s.objective;
                kl += s.mean_kl * s.n_tokens as f64;
                tokens += s.n_tokens;
                grad.axpy(1.0, &s.grad);
            }
            grad.scale(1.0 / chosen.len() as f64);
            if epoch == 0 {
                mean_kl = kl / tokens.max(1) as f64;
            }
            log::debug!(
                "update {update} epoch {epoch}: objective {:.6}",
                objective / chosen.len() as f64
            );
            opt.step(&mut params, &grad, Direction::Ascend, rl_trainable);
            if !params.is_finite() {
                let msg = format!("non-finite parameters after update {update}");
                log::warn!("{msg}");
                return Ok(TrainOutcome {
                    params: old,
                    curve,
                    halted: Some(msg),
                });
            }
        }

        let due = update == cfg.max_updates || (cfg.eval_every > 0 && update % cfg.eval_every == 0);
        if !due {
            continue;
        }
        let (eval, _) = {
            let list = Policy::new(&params, ctx.vocab, ctx.ddi)?;
            evaluate(&eval_set, ctx.filter, Some(&list), ctx.ddi)?
        };
        let rec = CurveRecord {
            update,
            mean_reward,
            eval_jaccard: eval.jaccard,
            eval_f1: eval.f1,
            eval_ddi: eval.ddi,
            mean_kl,
            seconds: if cfg.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "update {update}: reward {:.4} jaccard {:.4} ddi {:.4} kl {:.5}",
            rec.mean_reward,
            rec.eval_jaccard,
            rec.eval_ddi,
            rec.mean_kl
        );
        curve.push(rec);
    }
    Ok(TrainOutcome {
        params,
        curve,
        halted: None,
    })
}
