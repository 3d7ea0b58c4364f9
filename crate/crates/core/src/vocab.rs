//! Token vocabulary, multi-token drug names, and the segmentation of a
//! generated sequence into drug-by-drug decision steps.
//!
//! A drug name is a fixed-length run of name symbols. Steps are separated by
//! `SEP` and the sequence ends at `EOS`. Each maximal run of name symbols is
//! one step; the separator that closes a run belongs to that step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::{DrugId, Entry, MedicationSet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Edit instruction of an episode, and the kind of every action in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditKind {
    Add,
    Remove,
}

impl EditKind {
    pub const ALL: [EditKind; 2] = [EditKind::Add, EditKind::Remove];

    pub fn index(self) -> usize {
        match self {
            EditKind::Add => 0,
            EditKind::Remove => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub n_symbols: u16,
    pub name_len: usize,
    pub seed: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            n_symbols: 32,
            name_len: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    config: VocabConfig,
    names: Vec<Vec<u16>>,
    lookup: HashMap<Vec<u16>, DrugId>,
}

impl Vocab {
    /// Assigns every drug a distinct random name of `name_len` symbols.
    pub fn new(n_drugs: usize, config: VocabConfig) -> Result<Self> {
        if config.n_symbols == 0 || config.name_len == 0 {
            return Err(Error::Config(
                "vocabulary needs at least one symbol and name_len >= 1".into(),
            ));
        }
        let space = (config.n_symbols as u128)
            .checked_pow(config.name_len as u32)
            .unwrap_or(u128::MAX);
        if space < n_drugs as u128 {
            return Err(Error::Config(format!(
                "{} symbols of length {} cannot name {} drugs",
                config.n_symbols, config.name_len, n_drugs
            )));
        }
        let mut rng = seed::stream(config.seed, "vocab", 0);
        // Rejection sampling keeps this cheap even when the code space is huge.
        let mut names = Vec::with_capacity(n_drugs);
        let mut lookup = HashMap::with_capacity(n_drugs);
        while names.len() < n_drugs {
            let name: Vec<u16> = (0..config.name_len)
                .map(|_| rand::Rng::random_range(&mut rng, 0..config.n_symbols))
                .collect();
            if lookup.contains_key(&name) {
                continue;
            }
            lookup.insert(name.clone(), DrugId(names.len() as u32));
            names.push(name);
        }
        Ok(Self {
            config,
            names,
            lookup,
        })
    }

    pub fn config(&self) -> VocabConfig {
        self.config
    }

    pub fn n_drugs(&self) -> usize {
        self.names.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.config.n_symbols as usize
    }

    pub fn name_len(&self) -> usize {
        self.config.name_len
    }

    /// Total number of tokens: name symbols plus `SEP` and `EOS`.
    pub fn size(&self) -> usize {
        self.n_symbols() + 2
    }

    pub fn sep(&self) -> Token {
        Token(self.config.n_symbols)
    }

    pub fn eos(&self) -> Token {
        Token(self.config.n_symbols + 1)
    }

    #[inline]
    pub fn is_symbol(&self, t: Token) -> bool {
        t.0 < self.config.n_symbols
    }

    /// Name symbols of a drug.
    pub fn name(&self, id: DrugId) -> Result<&[u16]> {
        self.names
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(Error::DrugOutOfRange {
                id: id.0,
                n_drugs: self.names.len(),
            })
    }

    pub fn encode_drug_name(&self, id: DrugId) -> Result<Vec<Token>> {
        Ok(self.name(id)?.iter().map(|&s| Token(s)).collect())
    }

    pub fn decode_name(&self, symbols: &[u16]) -> Option<DrugId> {
        self.lookup.get(symbols).copied()
    }

    /// Encodes an edit list as `name SEP name SEP ... EOS`.
    pub fn encode_list(&self, drugs: &[DrugId]) -> Result<Vec<Token>> {
        let mut out = Vec::with_capacity(drugs.len() * (self.name_len() + 1) + 1);
        for &d in drugs {
            out.extend(self.encode_drug_name(d)?);
            out.push(self.sep());
        }
        out.push(self.eos());
        Ok(out)
    }

    /// Literal rendering of a symbol run, used for refusal entries.
    pub fn literal(symbols: &[u16]) -> String {
        symbols
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Token span `[begin, end]` (inclusive, 0-based positions) of step `step` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpan {
    pub step: usize,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: EditKind,
    pub target: Entry,
}

/// One sampled completion and the medication-set sequence it induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction: EditKind,
    pub tokens: Vec<Token>,
    pub step_spans: Vec<StepSpan>,
    pub actions: Vec<Action>,
    /// `M_0 .. M_N`.
    pub states: Vec<MedicationSet>,
    pub logprobs_old: Vec<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.actions.len()
    }

    pub fn final_state(&self) -> &MedicationSet {
        self.states
            .last()
            .expect("a trajectory always holds its initial state")
    }
}

/// Splits a token sequence into name runs. Scanning stops at the first `EOS`;
/// runs are delimited by `SEP`, and empty runs produce no step.
pub fn segment(tokens: &[Token], vocab: &Vocab) -> Vec<StepSpan> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (pos, &t) in tokens.iter().enumerate() {
        if vocab.is_symbol(t) {
            run_start.get_or_insert(pos);
            continue;
        }
        if let Some(begin) = run_start.take() {
            spans.push(StepSpan {
                step: spans.len() + 1,
                begin,
                end: pos - 1,
            });
        }
        if t == vocab.eos() {
            return spans;
        }
    }
    if let Some(begin) = run_start {
        spans.push(StepSpan {
            step: spans.len() + 1,
            begin,
            end: tokens.len() - 1,
        });
    }
    spans
}

/// Step index a token is credited to: the span containing it, otherwise the
/// latest span that ended before it (separators bind left). Positions after
/// the last span, including `EOS`, map to the final step `N`; positions
/// before the first span map to 0.
pub fn step_of_token(t: usize, spans: &[StepSpan]) -> usize {
    match spans.iter().rposition(|s| s.begin <= t) {
        Some(i) => spans[i].step,
        None => 0,
    }
}

/// Interprets one step's symbols. An exact name of a candidate drug is that
/// drug; anything else becomes a refusal carrying the literal symbols.
pub fn parse_step(symbols: &[Token], vocab: &Vocab, candidates: &MedicationSet) -> Entry {
    let raw: Vec<u16> = symbols.iter().map(|t| t.0).collect();
    match vocab.decode_name(&raw) {
        Some(id) if candidates.contains_drug(id) => Entry::Known(id),
        _ => Entry::Refusal(Vocab::literal(&raw)),
    }
}

pub fn apply_action(m: &MedicationSet, a: &Action) -> MedicationSet {
    let mut next = m.clone();
    match a.kind {
        EditKind::Add => {
            next.insert(a.target.clone());
        }
        EditKind::Remove => {
            next.remove(&a.target);
        }
    }
    next
}

/// Segments, parses and replays a token sequence from `m0`.
pub fn build_trajectory(
    instruction: EditKind,
    tokens: Vec<Token>,
    vocab: &Vocab,
    candidates: &MedicationSet,
    m0: MedicationSet,
) -> Trajectory {
    let step_spans = segment(&tokens, vocab);
    let mut actions = Vec::with_capacity(step_spans.len());
    let mut states = Vec::with_capacity(step_spans.len() + 1);
    states.push(m0);
    for span in &step_spans {
        let target = parse_step(&tokens[span.begin..=span.end], vocab, candidates);
        let action = Action {
            kind: instruction,
            target,
        };
        let next = apply_action(states.last().unwrap(), &action);
        actions.push(action);
        states.push(next);
    }
    Trajectory {
        instruction,
        tokens,
        step_spans,
        actions,
        states,
        logprobs_old: Vec::new(),
    }
}
