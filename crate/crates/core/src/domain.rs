//! Core entities: drugs, medication sets, the drug-drug interaction graph,
//! patient records, and the set metrics used by rewards and evaluation.
//!
//! All metric functions are pure and total. Empty-set conventions:
//! `jaccard(∅, ∅) = 1`, precision of an empty prediction is 0, recall against
//! an empty ground truth is 0, and both the DDI rate and refusal rate of an
//! empty set are 0.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a drug in the medication vocabulary `[0, n_drugs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DrugId(pub u32);

impl DrugId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DrugId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// One member of a medication set.
///
/// `Refusal` carries the literal name of something the model emitted that is
/// not an admissible candidate drug (a garbled name, or a real drug outside
/// the candidate set). Serialized untagged: a number or a string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Known(DrugId),
    Refusal(String),
}

impl Entry {
    pub fn drug(&self) -> Option<DrugId> {
        match self {
            Entry::Known(id) => Some(*id),
            Entry::Refusal(_) => None,
        }
    }
}

/// A set of medication entries without duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MedicationSet(BTreeSet<Entry>);

impl MedicationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_drugs<I: IntoIterator<Item = DrugId>>(ids: I) -> Self {
        Self(ids.into_iter().map(Entry::Known).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, entry: &Entry) -> bool {
        self.0.contains(entry)
    }

    pub fn contains_drug(&self, id: DrugId) -> bool {
        self.0.contains(&Entry::Known(id))
    }

    /// Returns `true` if the entry was not already present.
    pub fn insert(&mut self, entry: Entry) -> bool {
        self.0.insert(entry)
    }

    pub fn remove(&mut self, entry: &Entry) -> bool {
        self.0.remove(entry)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry> {
        self.0.iter()
    }

    /// Known drug members in ascending id order.
    pub fn drugs(&self) -> impl Iterator<Item = DrugId> + '_ {
        self.0.iter().filter_map(Entry::drug)
    }

    pub fn n_refusals(&self) -> usize {
        self.0
            .iter()
            .filter(|e| matches!(e, Entry::Refusal(_)))
            .count()
    }

    pub fn union(&self, other: &MedicationSet) -> MedicationSet {
        Self(self.0.union(&other.0).cloned().collect())
    }

    pub fn difference(&self, other: &MedicationSet) -> MedicationSet {
        Self(self.0.difference(&other.0).cloned().collect())
    }

    pub fn intersection_len(&self, other: &MedicationSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter(|e| large.0.contains(e)).count()
    }

    pub fn is_subset(&self, other: &MedicationSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl FromIterator<Entry> for MedicationSet {
    fn from_iter<I: IntoIterator<Item = Entry>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a MedicationSet {
    type Item = &'a Entry;
    type IntoIter = std::collections::btree_set::Iter<'a, Entry>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Symmetric binary adjacency over the drug vocabulary with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DdiGraph {
    n_drugs: usize,
    adjacency: Vec<bool>,
}

impl DdiGraph {
    pub fn empty(n_drugs: usize) -> Self {
        Self {
            n_drugs,
            adjacency: vec![false; n_drugs * n_drugs],
        }
    }

    /// Builds the graph from an undirected edge list. Self-loops and
    /// out-of-range endpoints are rejected; duplicate edges are harmless.
    pub fn from_edges(n_drugs: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut g = Self::empty(n_drugs);
        for &(i, j) in edges {
            g.check(DrugId(i))?;
            g.check(DrugId(j))?;
            if i == j {
                return Err(Error::Data(format!("self-interaction on drug {i}")));
            }
            g.set(DrugId(i), DrugId(j), true);
        }
        Ok(g)
    }

    pub fn complete(n_drugs: usize) -> Self {
        let mut g = Self::empty(n_drugs);
        for i in 0..n_drugs as u32 {
            for j in (i + 1)..n_drugs as u32 {
                g.set(DrugId(i), DrugId(j), true);
            }
        }
        g
    }

    pub fn n_drugs(&self) -> usize {
        self.n_drugs
    }

    /// Sets both orientations of an edge. Panics on diagonal writes.
    pub fn set(&mut self, a: DrugId, b: DrugId, value: bool) {
        assert_ne!(a, b, "the interaction graph has no self-loops");
        let (a, b) = (a.index(), b.index());
        self.adjacency[a * self.n_drugs + b] = value;
        self.adjacency[b * self.n_drugs + a] = value;
    }

    #[inline]
    pub fn interacts(&self, a: DrugId, b: DrugId) -> bool {
        self.adjacency[a.index() * self.n_drugs + b.index()]
    }

    pub fn check(&self, id: DrugId) -> Result<()> {
        if id.index() < self.n_drugs {
            Ok(())
        } else {
            Err(Error::DrugOutOfRange {
                id: id.0,
                n_drugs: self.n_drugs,
            })
        }
    }

    /// Unordered edge list with `i < j`.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for i in 0..self.n_drugs {
            for j in (i + 1)..self.n_drugs {
                if self.adjacency[i * self.n_drugs + j] {
                    out.push((i as u32, j as u32));
                }
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&x| x).count() / 2
    }

    pub fn degree(&self, id: DrugId) -> usize {
        let row = id.index() * self.n_drugs;
        self.adjacency[row..row + self.n_drugs]
            .iter()
            .filter(|&&x| x)
            .count()
    }
}

/// One patient visit: the observation the recommender acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub features: Vec<f64>,
    pub history: Option<Vec<f64>>,
    pub ground_truth: MedicationSet,
    pub candidate_set: MedicationSet,
}

impl PatientRecord {
    pub fn new(
        patient_id: u64,
        features: Vec<f64>,
        history: Option<Vec<f64>>,
        ground_truth: MedicationSet,
        candidate_set: MedicationSet,
    ) -> Result<Self> {
        let record = Self {
            patient_id,
            features,
            history,
            ground_truth,
            candidate_set,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ground_truth.n_refusals() > 0 || self.candidate_set.n_refusals() > 0 {
            return Err(Error::Data(format!(
                "patient {}: ground truth and candidates must be known drugs",
                self.patient_id
            )));
        }
        if !self.ground_truth.is_subset(&self.candidate_set) {
            return Err(Error::Data(format!(
                "patient {}: ground truth is not contained in the candidate set",
                self.patient_id
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.features) || !self.history.as_deref().is_none_or(finite) {
            return Err(Error::NonFinite(format!(
                "patient {} features",
                self.patient_id
            )));
        }
        Ok(())
    }
}

/// Penalty weights of the potential function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    /// DDI penalty.
    pub alpha: f64,
    /// Penalty on entries outside the candidate set.
    pub beta_refusal: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta_refusal: 0.5,
        }
    }
}

impl MetricWeights {
    pub fn new(alpha: f64, beta_refusal: f64) -> Result<Self> {
        let w = Self {
            alpha,
            beta_refusal,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta_refusal", self.beta_refusal)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn jaccard(a: &MedicationSet, b: &MedicationSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Returns `(precision, recall, f1)`.
pub fn precision_recall_f1(pred: &MedicationSet, gt: &MedicationSet) -> (f64, f64, f64) {
    let tp = pred.intersection_len(gt);
    let precision = if pred.is_empty() {
        0.0
    } else {
        tp as f64 / pred.len() as f64
    };
    let recall = if gt.is_empty() {
        0.0
    } else {
        tp as f64 / gt.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Fraction of unordered member pairs that interact. Refusal entries count
/// toward the pair denominator but carry no edges.
pub fn ddi_rate(m: &MedicationSet, d: &DdiGraph) -> Result<f64> {
    let n = m.len();
    let known: Vec<DrugId> = m.drugs().collect();
    for &id in &known {
        d.check(id)?;
    }
    if n < 2 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &a) in known.iter().enumerate() {
        hits += known[i + 1..]
            .iter()
            .filter(|&&b| d.interacts(a, b))
            .count();
    }
    Ok(hits as f64 / (n * (n - 1) / 2) as f64)
}

/// Fraction of entries of `m` that are not admissible candidates.
pub fn refusal_rate(m: &MedicationSet, c: &MedicationSet) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let outside = m.iter().filter(|e| !c.contains(e)).count();
    outside as f64 / m.len() as f64
}

/// All evaluation metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SetMetrics {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ddi: f64,
    pub refusal: f64,
    pub n_med: usize,
}

impl SetMetrics {
    pub fn compute(
        pred: &MedicationSet,
        gt: &MedicationSet,
        candidates: &MedicationSet,
        ddi: &DdiGraph,
    ) -> Result<Self> {
        let (precision, recall, f1) = precision_recall_f1(pred, gt);
        Ok(Self {
            jaccard: jaccard(pred, gt),
            precision,
            recall,
            f1,
            ddi: ddi_rate(pred, ddi)?,
            refusal: refusal_rate(pred, candidates),
            n_med: pred.len(),
        })
    }
}
