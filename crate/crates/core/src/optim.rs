//! Adam over [`PolicyParams`], with per-role freezing.

use crate::policy::{PolicyParams, TensorRole};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap applied before the moment update.
    pub max_grad_norm: Option<f64>,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Step direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_max_grad_norm(mut self, cap: f64) -> Self {
        self.max_grad_norm = Some(cap);
        self
    }

    /// Updates every tensor whose role passes `trainable`; the frozen
    /// collaborative table is never touched.
    pub fn step(
        &mut self,
        params: &mut PolicyParams,
        grad: &PolicyParams,
        dir: Direction,
        trainable: impl Fn(TensorRole) -> bool,
    ) {
        let active = |role: TensorRole| role != TensorRole::Frozen && trainable(role);
        if self.m.is_empty() {
            self.m = grad
                .tensors()
                .iter()
                .map(|(_, _, t)| vec![0.0; t.data.len()])
                .collect();
            self.v = self.m.clone();
        }
        let norm = grad
            .tensors()
            .iter()
            .filter(|(_, role, _)| active(*role))
            .flat_map(|(_, _, t)| t.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = match self.max_grad_norm {
            Some(cap) if norm > cap => cap / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let sign = match dir {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        };
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, role, p), (_, _, g)), (m, v)) in tensors {
            if !active(role) {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] += sign * self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
