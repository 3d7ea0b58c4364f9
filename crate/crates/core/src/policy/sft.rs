use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{sigmoid, Policy, Prompt};
use super::params::{PolicyParams, TensorRole};
use crate::domain::{DdiGraph, PatientRecord};
use crate::error::{Error, Result};
use crate::optim::{Adam, Direction};
use crate::seed;
use crate::vocab::{Token, Vocab};

/// A teacher-forced target completion for one prompt.
#[derive(Debug, Clone)]
pub struct SftExample<'a> {
    pub prompt: Prompt<'a>,
    pub target: Vec<Token>,
}

const CHUNK: usize = 8;

/// Mean token-level negative log-likelihood and its gradient.
pub fn sft_loss_and_grad(
    policy: &Policy<'_>,
    examples: &[SftExample<'_>],
) -> Result<(f64, PolicyParams)> {
    let parts = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = policy.params().zeros_like();
            let mut sum = 0.0;
            let mut n = 0usize;
            for ex in chunk {
                let lp = policy.weighted_pass(ex.prompt, &ex.target, |_, _| 1.0, Some(&mut g))?;
                sum += lp.iter().sum::<f64>();
                n += lp.len();
            }
            Ok((sum, n, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = policy.params().zeros_like();
    let (mut sum, mut n) = (0.0, 0usize);
    for (s, k, g) in parts {
        sum += s;
        n += k;
        grad.axpy(1.0, &g);
    }
    if n == 0 {
        return Ok((0.0, grad));
    }
    grad.scale(-1.0 / n as f64);
    Ok((-sum / n as f64, grad))
}

/// One full-batch gradient-descent step on the mean token NLL. Returns the
/// updated parameters and the loss before the step.
pub fn sft_update(
    params: &PolicyParams,
    vocab: &Vocab,
    ddi: &DdiGraph,
    examples: &[SftExample<'_>],
    learning_rate: f64,
) -> Result<(PolicyParams, f64)> {
    if !(learning_rate >= 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be >= 0, got {learning_rate}"
        )));
    }
    let policy = Policy::new(params, vocab, ddi)?;
    let (loss, grad) = sft_loss_and_grad(&policy, examples)?;
    let mut next = params.clone();
    for ((_, role, p), (_, _, g)) in next.tensors_mut().into_iter().zip(grad.tensors()) {
        if role == TensorRole::Frozen {
            continue;
        }
        for (x, gx) in p.data.iter_mut().zip(&g.data) {
            *x -= learning_rate * gx;
        }
    }
    Ok((next, loss))
}

/// Mean binary cross-entropy of the classifier over every (patient,
/// candidate) pair, labels from ground truth, and its gradient.
pub fn classifier_loss_and_grad(
    policy: &Policy<'_>,
    patients: &[&PatientRecord],
) -> Result<(f64, PolicyParams)> {
    let n_pairs: usize = patients.iter().map(|p| p.candidate_set.len()).sum();
    let parts = patients
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = policy.params().zeros_like();
            let mut loss = 0.0;
            for patient in chunk {
                let logits = policy.classifier_logits(patient)?;
                let mut dl = Vec::with_capacity(logits.len());
                for (id, z) in logits {
                    let y = f64::from(patient.ground_truth.contains_drug(id));
                    // log(1 + e^z) - y z, computed stably.
                    loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                    dl.push((id, sigmoid(z) - y));
                }
                policy.classifier_backward(patient, &dl, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = policy.params().zeros_like();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.axpy(1.0, &g);
    }
    if n_pairs == 0 {
        return Ok((0.0, grad));
    }
    grad.scale(1.0 / n_pairs as f64);
    Ok((loss / n_pairs as f64, grad))
}

/// Minibatch Adam settings for supervised fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub cls_epochs: usize,
    pub list_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            cls_epochs: 20,
            list_epochs: 15,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn epoch_order(n: usize, seed: u64, name: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed, name, epoch as u64));
    idx
}

/// Trains the classifier head, trunk, embeddings and projection. Returns the
/// parameters and the mean loss of each epoch.
pub fn train_classifier(
    params: PolicyParams,
    vocab: &Vocab,
    ddi: &DdiGraph,
    patients: &[&PatientRecord],
    cfg: &SftConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    let mut params = params;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.cls_epochs);
    for epoch in 0..cfg.cls_epochs {
        let order = epoch_order(patients.len(), cfg.seed, "sft-cls", epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let chosen: Vec<&PatientRecord> = batch.iter().map(|&i| patients[i]).collect();
            let (loss, grad) = {
                let policy = Policy::new(&params, vocab, ddi)?;
                classifier_loss_and_grad(&policy, &chosen)?
            };
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grad, Direction::Descend, |role| {
                role != TensorRole::ListOnly
            });
        }
        let mean = total / patients.len().max(1) as f64;
        log::debug!("classifier epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok((params, losses))
}

/// Teacher-forced training of the list editor on edit targets.
pub fn train_list(
    params: PolicyParams,
    vocab: &Vocab,
    ddi: &DdiGraph,
    examples: &[SftExample<'_>],
    cfg: &SftConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    let mut params = params;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.list_epochs);
    for epoch in 0..cfg.list_epochs {
        let order = epoch_order(examples.len(), cfg.seed, "sft-list", epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let chosen: Vec<SftExample<'_>> = batch.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = {
                let policy = Policy::new(&params, vocab, ddi)?;
                sft_loss_and_grad(&policy, &chosen)?
            };
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grad, Direction::Descend, |role| {
                role != TensorRole::ClassifierOnly
            });
        }
        let mean = total / examples.len().max(1) as f64;
        log::debug!("list epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok((params, losses))
}
