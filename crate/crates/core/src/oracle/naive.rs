//! Deliberately naive metric code: plain vectors and pairwise loops. Shares
//! no logic with the fast path so the two can check each other.

use crate::domain::Entry;
use crate::vocab::EditKind;

fn dedup(items: &[Entry]) -> Vec<Entry> {
    let mut out: Vec<Entry> = Vec::new();
    for x in items {
        if !out.iter().any(|y| y == x) {
            out.push(x.clone());
        }
    }
    out
}

fn count_common(a: &[Entry], b: &[Entry]) -> usize {
    let mut n = 0;
    for x in a {
        for y in b {
            if x == y {
                n += 1;
            }
        }
    }
    n
}

pub fn naive_jaccard(a: &[Entry], b: &[Entry]) -> f64 {
    let (a, b) = (dedup(a), dedup(b));
    let common = count_common(&a, &b);
    let mut union = a.clone();
    for y in &b {
        if !a.iter().any(|x| x == y) {
            union.push(y.clone());
        }
    }
    if union.is_empty() {
        return 1.0;
    }
    common as f64 / union.len() as f64
}

pub fn naive_f1(pred: &[Entry], gt: &[Entry]) -> f64 {
    let (pred, gt) = (dedup(pred), dedup(gt));
    let tp = count_common(&pred, &gt);
    let p = if pred.is_empty() {
        0.0
    } else {
        tp as f64 / pred.len() as f64
    };
    let r = if gt.is_empty() {
        0.0
    } else {
        tp as f64 / gt.len() as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Interacting unordered pairs over all unordered pairs of distinct entries.
pub fn naive_ddi(m: &[Entry], edges: &[(u32, u32)]) -> f64 {
    let m = dedup(m);
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for i in 0..m.len() {
        for j in 0..m.len() {
            if i >= j {
                continue;
            }
            pairs += 1;
            if let (Entry::Known(a), Entry::Known(b)) = (&m[i], &m[j]) {
                if edges
                    .iter()
                    .any(|&(x, y)| (x == a.0 && y == b.0) || (x == b.0 && y == a.0))
                {
                    hits += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        hits as f64 / pairs as f64
    }
}

pub fn naive_refusal(m: &[Entry], candidates: &[Entry]) -> f64 {
    let m = dedup(m);
    if m.is_empty() {
        return 0.0;
    }
    let outside = m
        .iter()
        .filter(|x| !candidates.iter().any(|c| c == *x))
        .count();
    outside as f64 / m.len() as f64
}

/// Scoring inputs for the naive potential.
#[derive(Debug, Clone)]
pub struct NaiveWorld {
    pub ground_truth: Vec<Entry>,
    pub candidates: Vec<Entry>,
    pub edges: Vec<(u32, u32)>,
    pub alpha: f64,
    pub beta_refusal: f64,
}

impl NaiveWorld {
    pub fn potential(&self, m: &[Entry]) -> f64 {
        naive_jaccard(m, &self.ground_truth)
            - self.alpha * naive_ddi(m, &self.edges)
            - self.beta_refusal * naive_refusal(m, &self.candidates)
    }
}

/// Replays the edit actions from `initial` with vector operations and returns
/// the net potential change.
pub fn brute_force_reward(
    world: &NaiveWorld,
    initial: &[Entry],
    actions: &[(EditKind, Entry)],
) -> f64 {
    let mut m = dedup(initial);
    for (kind, e) in actions {
        match kind {
            EditKind::Add => {
                if !m.iter().any(|x| x == e) {
                    m.push(e.clone());
                }
            }
            EditKind::Remove => m.retain(|x| x != e),
        }
    }
    world.potential(&m) - world.potential(initial)
}
