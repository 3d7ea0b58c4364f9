//! Two-stage inference: the classifier filters candidates into `m_p`, then
//! the list editor proposes additions and removals, applied as
//! `(m_p ∪ Δadd) \ Δremove`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::oracle_edit_targets;
use crate::domain::{
    refusal_rate, DdiGraph, DrugId, Entry, MedicationSet, PatientRecord, SetMetrics,
};
use crate::error::{Error, Result};
use crate::policy::{decide, Policy, Prompt};
use crate::seed;
use crate::vocab::{parse_step, segment, EditKind, Token, Vocab};

/// Per-candidate inclusion probabilities.
pub trait DrugFilter: Sync {
    fn probabilities(&self, patient: &PatientRecord) -> Result<Vec<(DrugId, f64)>>;
}

/// Produces an edit completion for a list.
pub trait ListEditor: Sync {
    fn vocab(&self) -> &Vocab;
    fn decode(
        &self,
        patient: &PatientRecord,
        instruction: EditKind,
        m_p: &MedicationSet,
    ) -> Result<Vec<Token>>;
}

impl DrugFilter for Policy<'_> {
    fn probabilities(&self, patient: &PatientRecord) -> Result<Vec<(DrugId, f64)>> {
        Ok(self
            .classifier_logits(patient)?
            .into_iter()
            .map(|(d, z)| (d, crate::policy::sigmoid(z)))
            .collect())
    }
}

impl ListEditor for Policy<'_> {
    fn vocab(&self) -> &Vocab {
        Policy::vocab(self)
    }

    /// Greedy decoding; the RNG is never consulted at temperature 0.
    fn decode(
        &self,
        patient: &PatientRecord,
        instruction: EditKind,
        m_p: &MedicationSet,
    ) -> Result<Vec<Token>> {
        let prompt = Prompt {
            patient,
            instruction,
            m0: m_p,
        };
        let mut rng = seed::stream(0, "greedy", 0);
        Ok(self
            .sample_sequence(prompt, 0.0, self.params().dims.max_tokens, &mut rng)?
            .tokens)
    }
}

/// Emits the exact edits that turn `m_p` into the ground truth.
pub struct TeacherEditor<'a> {
    pub vocab: &'a Vocab,
}

impl ListEditor for TeacherEditor<'_> {
    fn vocab(&self) -> &Vocab {
        self.vocab
    }

    fn decode(
        &self,
        patient: &PatientRecord,
        instruction: EditKind,
        m_p: &MedicationSet,
    ) -> Result<Vec<Token>> {
        let (add, remove) = oracle_edit_targets(patient, m_p);
        let list = match instruction {
            EditKind::Add => add,
            EditKind::Remove => remove,
        };
        self.vocab.encode_list(&list)
    }
}

/// Stops immediately.
pub struct NoEditEditor<'a> {
    pub vocab: &'a Vocab,
}

impl ListEditor for NoEditEditor<'_> {
    fn vocab(&self) -> &Vocab {
        self.vocab
    }

    fn decode(&self, _: &PatientRecord, _: EditKind, _: &MedicationSet) -> Result<Vec<Token>> {
        Ok(vec![self.vocab.eos()])
    }
}

/// `{ m in candidates : p(m) > 0.5 }`.
pub fn filter_stage(patient: &PatientRecord, filter: &dyn DrugFilter) -> Result<MedicationSet> {
    if patient.candidate_set.is_empty() {
        return Err(Error::Data(format!(
            "patient {} has no candidates",
            patient.patient_id
        )));
    }
    let probs = filter.probabilities(patient)?;
    Ok(probs
        .into_iter()
        .filter(|&(d, p)| decide(p) && patient.candidate_set.contains_drug(d))
        .map(|(d, _)| Entry::Known(d))
        .collect())
}

/// Parsed edit targets. Refusals are kept apart and never dispensed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditOutcome {
    pub delta: MedicationSet,
    pub refusals: Vec<String>,
}

pub fn edit_stage(
    patient: &PatientRecord,
    m_p: &MedicationSet,
    editor: &dyn ListEditor,
    instruction: EditKind,
) -> Result<EditOutcome> {
    let vocab = editor.vocab();
    let tokens = editor.decode(patient, instruction, m_p)?;
    let mut out = EditOutcome::default();
    for span in segment(&tokens, vocab) {
        match parse_step(
            &tokens[span.begin..=span.end],
            vocab,
            &patient.candidate_set,
        ) {
            Entry::Known(d) => {
                out.delta.insert(Entry::Known(d));
            }
            Entry::Refusal(raw) => {
                log::debug!(
                    "patient {}: dropped unrecognized {instruction:?} target {raw:?}",
                    patient.patient_id
                );
                out.refusals.push(raw);
            }
        }
    }
    Ok(out)
}

/// `(m_p ∪ add) \ remove`.
pub fn compose(m_p: &MedicationSet, add: &MedicationSet, remove: &MedicationSet) -> MedicationSet {
    m_p.union(add).difference(remove)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub patient_id: u64,
    pub m_p: MedicationSet,
    pub delta_add: MedicationSet,
    pub delta_remove: MedicationSet,
    #[serde(rename = "final")]
    pub final_set: MedicationSet,
    /// Unrecognized names the editor emitted, in order.
    pub refusals: Vec<String>,
    pub metrics: SetMetrics,
}

impl Recommendation {
    /// The composition identity every recommendation satisfies.
    pub fn is_consistent(&self) -> bool {
        self.final_set == compose(&self.m_p, &self.delta_add, &self.delta_remove)
            && self
                .final_set
                .iter()
                .all(|e| !matches!(e, Entry::Refusal(_)))
    }
}

/// Runs both stages. `editor = None` skips list editing.
pub fn recommend(
    patient: &PatientRecord,
    filter: &dyn DrugFilter,
    editor: Option<&dyn ListEditor>,
    ddi: &DdiGraph,
) -> Result<Recommendation> {
    let m_p = filter_stage(patient, filter)?;
    let (add, remove) = match editor {
        Some(e) => (
            edit_stage(patient, &m_p, e, EditKind::Add)?,
            edit_stage(patient, &m_p, e, EditKind::Remove)?,
        ),
        None => (EditOutcome::default(), EditOutcome::default()),
    };
    let final_set = compose(&m_p, &add.delta, &remove.delta);
    let mut metrics = SetMetrics::compute(
        &final_set,
        &patient.ground_truth,
        &patient.candidate_set,
        ddi,
    )?;
    // Refusals are reported against the list as emitted, before they are dropped.
    let mut emitted = final_set.clone();
    for r in &add.refusals {
        emitted.insert(Entry::Refusal(r.clone()));
    }
    metrics.refusal = refusal_rate(&emitted, &patient.candidate_set);
    let mut refusals = add.refusals;
    refusals.extend(remove.refusals);
    Ok(Recommendation {
        patient_id: patient.patient_id,
        m_p,
        delta_add: add.delta,
        delta_remove: remove.delta,
        final_set,
        refusals,
        metrics,
    })
}

/// Cohort-level means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub jaccard: f64,
    pub f1: f64,
    pub ddi: f64,
    pub refusal: f64,
    pub mean_med: f64,
    pub n_patients: usize,
}

impl EvalSummary {
    pub fn from_recommendations(recs: &[Recommendation]) -> Self {
        let n = recs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&SetMetrics) -> f64| {
            recs.iter().map(|r| f(&r.metrics)).sum::<f64>() / n as f64
        };
        Self {
            jaccard: mean(&|m| m.jaccard),
            f1: mean(&|m| m.f1),
            ddi: mean(&|m| m.ddi),
            refusal: mean(&|m| m.refusal),
            mean_med: mean(&|m| m.n_med as f64),
            n_patients: n,
        }
    }
}

/// Recommends for every patient (in parallel, results in input order).
pub fn evaluate(
    patients: &[&PatientRecord],
    filter: &dyn DrugFilter,
    editor: Option<&dyn ListEditor>,
    ddi: &DdiGraph,
) -> Result<(EvalSummary, Vec<Recommendation>)> {
    let recs = patients
        .par_iter()
        .map(|p| recommend(p, filter, editor, ddi))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalSummary::from_recommendations(&recs), recs))
}

/// One JSON object per line.
pub fn recommendations_jsonl(recs: &[Recommendation]) -> Result<String> {
    let mut out = String::new();
    for r in recs {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
