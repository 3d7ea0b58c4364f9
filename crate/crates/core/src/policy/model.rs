use rand::Rng;

use super::params::{InputLayout, PolicyParams};
use crate::domain::{DdiGraph, DrugId, Entry, MedicationSet, PatientRecord};
use crate::error::{Error, Result};
use crate::vocab::{apply_action, build_trajectory, Action, EditKind, Token, Trajectory, Vocab};

const CLASSIFY: usize = 2;

/// One conditioning prompt: patient, edit instruction and the starting list.
#[derive(Debug, Clone, Copy)]
pub struct Prompt<'a> {
    pub patient: &'a PatientRecord,
    pub instruction: EditKind,
    pub m0: &'a MedicationSet,
}

/// `e_text[id] ++ (P * e_collab[id] + b)`.
pub fn fuse_embeddings(id: DrugId, p: &PolicyParams) -> Result<Vec<f64>> {
    let d = p.dims;
    if id.index() >= d.n_drugs {
        return Err(Error::DrugOutOfRange {
            id: id.0,
            n_drugs: d.n_drugs,
        });
    }
    let mut out = Vec::with_capacity(d.fused_dim());
    out.extend_from_slice(p.text_emb.row(id.index()));
    let c = p.collab.row(id.index());
    for r in 0..d.proj_dim {
        out.push(p.proj_b.data[r] + dot(p.proj_w.row(r), c));
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Parameters bound to a vocabulary and interaction graph, with the fused
/// embedding table cached. Read-only, so rollouts may share it across threads.
pub struct Policy<'a> {
    params: &'a PolicyParams,
    vocab: &'a Vocab,
    ddi: &'a DdiGraph,
    fused: Vec<f64>,
    layout: InputLayout,
}

/// Autoregressive decoding state: everything the context vector is built from.
#[derive(Clone)]
struct DecodeState {
    inst: usize,
    candidates: Vec<DrugId>,
    set: MedicationSet,
    members: Vec<usize>,
    inset: Vec<f64>,
    ddi_feat: Vec<f64>,
    pooled: Vec<f64>,
    run: Vec<u16>,
    tok_sum: Vec<f64>,
    n_emitted: usize,
}

/// Forward activations of one position, kept for the backward pass.
struct StepCache {
    x: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
    logp: Vec<f64>,
    /// `(symbol, drug, affinity, score)` for every candidate whose name
    /// continues the current run.
    matches: Vec<(u16, usize, f64, f64)>,
    /// Per-symbol `(max score, sum of exp(score - max))`; count 0 means off-name.
    group_max: Vec<f64>,
    group_sum: Vec<f64>,
    group_count: Vec<usize>,
}

impl<'a> Policy<'a> {
    pub fn new(params: &'a PolicyParams, vocab: &'a Vocab, ddi: &'a DdiGraph) -> Result<Self> {
        let d = params.dims;
        if vocab.n_symbols() != d.n_symbols
            || vocab.name_len() != d.name_len
            || vocab.n_drugs() != d.n_drugs
        {
            return Err(Error::Config(
                "vocabulary does not match policy dimensions".into(),
            ));
        }
        if ddi.n_drugs() != d.n_drugs {
            return Err(Error::Config(
                "interaction graph does not match policy dimensions".into(),
            ));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("policy parameter".into()));
        }
        let mut fused = Vec::with_capacity(d.n_drugs * d.fused_dim());
        for i in 0..d.n_drugs {
            fused.extend(fuse_embeddings(DrugId(i as u32), params)?);
        }
        Ok(Self {
            params,
            vocab,
            ddi,
            fused,
            layout: d.layout(),
        })
    }

    pub fn params(&self) -> &PolicyParams {
        self.params
    }

    pub fn vocab(&self) -> &Vocab {
        self.vocab
    }

    #[inline]
    fn fused_row(&self, i: usize) -> &[f64] {
        let k = self.params.dims.fused_dim();
        &self.fused[i * k..(i + 1) * k]
    }

    fn check_patient(&self, patient: &PatientRecord) -> Result<()> {
        let f = self.params.dims.feature_dim;
        if patient.features.len() != f || patient.history.as_ref().is_some_and(|h| h.len() != f) {
            return Err(Error::Data(format!(
                "patient {} features do not have width {f}",
                patient.patient_id
            )));
        }
        for id in patient.candidate_set.drugs() {
            self.ddi.check(id)?;
        }
        Ok(())
    }

    fn start(
        &self,
        patient: &PatientRecord,
        inst: usize,
        m0: &MedicationSet,
    ) -> Result<DecodeState> {
        self.check_patient(patient)?;
        let d = self.params.dims;
        let mut st = DecodeState {
            inst,
            candidates: patient.candidate_set.drugs().collect(),
            set: m0.clone(),
            members: Vec::new(),
            inset: vec![0.0; d.n_drugs],
            ddi_feat: vec![0.0; d.n_drugs],
            pooled: vec![0.0; d.fused_dim()],
            run: Vec::with_capacity(d.name_len + 1),
            tok_sum: vec![0.0; d.token_dim],
            n_emitted: 0,
        };
        for id in m0.drugs() {
            self.ddi.check(id)?;
        }
        self.refresh_set_features(&mut st);
        Ok(st)
    }

    fn refresh_set_features(&self, st: &mut DecodeState) {
        st.members = st.set.drugs().map(|id| id.index()).collect();
        st.inset.iter_mut().for_each(|x| *x = 0.0);
        st.pooled.iter_mut().for_each(|x| *x = 0.0);
        for &m in &st.members {
            st.inset[m] = 1.0;
        }
        if !st.members.is_empty() {
            let w = 1.0 / st.members.len() as f64;
            for &m in &st.members {
                axpy(&mut st.pooled, w, self.fused_row(m));
            }
        }
        let denom = st.members.len().max(1) as f64;
        for &c in &st.candidates {
            let hits = st
                .members
                .iter()
                .filter(|&&m| m != c.index() && self.ddi.interacts(DrugId(m as u32), c))
                .count();
            st.ddi_feat[c.index()] = hits as f64 / denom;
        }
    }

    /// Consumes one emitted token. A separator closing a non-empty run applies
    /// the parsed action to the current set.
    fn push(&self, st: &mut DecodeState, tok: Token) {
        let kind = match st.inst {
            0 => EditKind::Add,
            _ => EditKind::Remove,
        };
        if self.vocab.is_symbol(tok) {
            st.run.push(tok.0);
        } else if tok == self.vocab.sep() && !st.run.is_empty() {
            let target = match self.vocab.decode_name(&st.run) {
                Some(id) if st.candidates.binary_search(&id).is_ok() => Entry::Known(id),
                _ => Entry::Refusal(Vocab::literal(&st.run)),
            };
            let next = apply_action(&st.set, &Action { kind, target });
            st.run.clear();
            if next != st.set {
                st.set = next;
                self.refresh_set_features(st);
            }
        }
        axpy(&mut st.tok_sum, 1.0, self.params.tok_emb.row(tok.index()));
        st.n_emitted += 1;
    }

    fn build_input(&self, patient: &PatientRecord, st: &DecodeState, x: &mut [f64]) {
        let d = self.params.dims;
        let l = self.layout;
        x.iter_mut().for_each(|v| *v = 0.0);
        x[l.features..l.features + d.feature_dim].copy_from_slice(&patient.features);
        if let Some(h) = &patient.history {
            x[l.history..l.history + d.feature_dim].copy_from_slice(h);
            x[l.has_history] = 1.0;
        }
        x[l.instruction + st.inst] = 1.0;
        x[l.pooled..l.pooled + d.fused_dim()].copy_from_slice(&st.pooled);
        x[l.set_size] = st.set.len() as f64 / d.n_drugs as f64;
        x[l.slot + st.run.len().min(d.name_len)] = 1.0;
        if st.n_emitted > 0 {
            let inv = 1.0 / st.n_emitted as f64;
            for (dst, s) in x[l.token_mean..l.token_mean + d.token_dim]
                .iter_mut()
                .zip(&st.tok_sum)
            {
                *dst = s * inv;
            }
        }
        x[l.position] = st.n_emitted as f64 / d.max_tokens as f64;
    }

    fn trunk(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.params;
        let d = p.dims;
        let h: Vec<f64> = (0..d.hidden)
            .map(|r| (p.b1.data[r] + dot(p.w1.row(r), x)).tanh())
            .collect();
        let u: Vec<f64> = (0..d.fused_dim())
            .map(|r| p.bd.data[r] + dot(p.wd.row(r), &h))
            .collect();
        (h, u)
    }

    fn forward(&self, patient: &PatientRecord, st: &DecodeState) -> StepCache {
        let p = self.params;
        let d = p.dims;
        let v = d.vocab_size();
        let mut x = vec![0.0; self.layout.len];
        self.build_input(patient, st, &mut x);
        let (h, u) = self.trunk(&x);
        let mut logits: Vec<f64> = (0..v)
            .map(|k| p.bo.data[k] + dot(p.wo.row(k), &h))
            .collect();

        let slot = st.run.len();
        let mut matches = Vec::new();
        let mut group_max = vec![f64::NEG_INFINITY; d.n_symbols];
        let mut group_sum = vec![0.0; d.n_symbols];
        let mut group_count = vec![0usize; d.n_symbols];
        if slot < d.name_len {
            let i = st.inst;
            let (kappa, rho, delta) = (
                p.inst_scale.data[i],
                p.inst_inset.data[i],
                p.inst_ddi.data[i],
            );
            for &c in &st.candidates {
                let name = self
                    .vocab
                    .name(c)
                    .expect("candidate checked against vocabulary");
                if name[..slot] != st.run[..] {
                    continue;
                }
                let ci = c.index();
                let a = dot(&u, self.fused_row(ci));
                let s = kappa * a + rho * st.inset[ci] + delta * st.ddi_feat[ci];
                let sym = name[slot];
                group_max[sym as usize] = group_max[sym as usize].max(s);
                group_count[sym as usize] += 1;
                matches.push((sym, ci, a, s));
            }
            for &(sym, _, _, s) in &matches {
                group_sum[sym as usize] += (s - group_max[sym as usize]).exp();
            }
        }
        let offname = p.offname.data[0];
        for k in 0..d.n_symbols {
            logits[k] += if group_count[k] > 0 {
                group_max[k] + (group_sum[k] / group_count[k] as f64).ln()
            } else {
                offname
            };
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let logp = logits.iter().map(|l| l - lse).collect();
        StepCache {
            x,
            h,
            u,
            logp,
            matches,
            group_max,
            group_sum,
            group_count,
        }
    }

    /// Backpropagates `dlogit` (gradient w.r.t. the logits of one position).
    /// Fused-embedding gradients go to `dfused`; the gradient w.r.t. the token
    /// running mean is returned so the caller can spread it over earlier tokens.
    fn backward(
        &self,
        st: &DecodeState,
        cache: &StepCache,
        dlogit: &[f64],
        grad: &mut PolicyParams,
        dfused: &mut [f64],
    ) -> Vec<f64> {
        let p = self.params;
        let d = p.dims;
        let k_dim = d.fused_dim();
        let mut dh = vec![0.0; d.hidden];
        for (k, &g) in dlogit.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bo.data[k] += g;
            axpy(grad.wo.row_mut(k), g, &cache.h);
            axpy(&mut dh, g, p.wo.row(k));
        }
        for k in 0..d.n_symbols {
            if cache.group_count[k] == 0 {
                grad.offname.data[0] += dlogit[k];
            }
        }
        let mut du = vec![0.0; k_dim];
        let i = st.inst;
        let kappa = p.inst_scale.data[i];
        for &(sym, ci, a, s) in &cache.matches {
            let k = sym as usize;
            let w = (s - cache.group_max[k]).exp() / cache.group_sum[k];
            let ds = dlogit[k] * w;
            if ds == 0.0 {
                continue;
            }
            grad.inst_scale.data[i] += ds * a;
            grad.inst_inset.data[i] += ds * st.inset[ci];
            grad.inst_ddi.data[i] += ds * st.ddi_feat[ci];
            let da = ds * kappa;
            axpy(&mut du, da, self.fused_row(ci));
            axpy(&mut dfused[ci * k_dim..(ci + 1) * k_dim], da, &cache.u);
        }
        let dx = self.backward_trunk(cache, &du, &mut dh, grad);
        let l = self.layout;
        if !st.members.is_empty() {
            let w = 1.0 / st.members.len() as f64;
            let dpool = &dx[l.pooled..l.pooled + k_dim];
            for &m in &st.members {
                axpy(&mut dfused[m * k_dim..(m + 1) * k_dim], w, dpool);
            }
        }
        let mut dmean = dx[l.token_mean..l.token_mean + d.token_dim].to_vec();
        if st.n_emitted > 0 {
            let inv = 1.0 / st.n_emitted as f64;
            dmean.iter_mut().for_each(|g| *g *= inv);
        }
        dmean
    }

    /// Trunk backward from `du` and the partial `dh`; returns `dx`.
    fn backward_trunk(
        &self,
        cache: &StepCache,
        du: &[f64],
        dh: &mut [f64],
        grad: &mut PolicyParams,
    ) -> Vec<f64> {
        let p = self.params;
        let d = p.dims;
        for (r, &g) in du.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bd.data[r] += g;
            axpy(grad.wd.row_mut(r), g, &cache.h);
            axpy(dh, g, p.wd.row(r));
        }
        let mut dx = vec![0.0; cache.x.len()];
        for r in 0..d.hidden {
            let g = dh[r] * (1.0 - cache.h[r] * cache.h[r]);
            if g == 0.0 {
                continue;
            }
            grad.b1.data[r] += g;
            axpy(grad.w1.row_mut(r), g, &cache.x);
            axpy(&mut dx, g, p.w1.row(r));
        }
        dx
    }

    /// Chain rule from fused embeddings into the text table and projection.
    fn backward_fused(&self, dfused: &[f64], grad: &mut PolicyParams) {
        let d = self.params.dims;
        let k_dim = d.fused_dim();
        for i in 0..d.n_drugs {
            let g = &dfused[i * k_dim..(i + 1) * k_dim];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            axpy(grad.text_emb.row_mut(i), 1.0, &g[..d.text_dim]);
            let c = self.params.collab.row(i);
            for r in 0..d.proj_dim {
                let gr = g[d.text_dim + r];
                grad.proj_b.data[r] += gr;
                axpy(grad.proj_w.row_mut(r), gr, c);
            }
        }
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next_token_logprobs(&self, prompt: Prompt<'_>, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut st = self.start(prompt.patient, prompt.instruction.index(), prompt.m0)?;
        for &t in prefix {
            self.check_token(t)?;
            self.push(&mut st, t);
        }
        Ok(self.forward(prompt.patient, &st).logp)
    }

    fn check_token(&self, t: Token) -> Result<()> {
        if t.index() >= self.vocab.size() {
            return Err(Error::Data(format!(
                "token {} outside vocabulary of size {}",
                t.0,
                self.vocab.size()
            )));
        }
        Ok(())
    }

    /// Teacher-forced pass over `tokens`. For every position `t`, `weight(t,
    /// log p(o_t))` gives the coefficient `c_t`; when `grad` is present the
    /// gradient of `sum_t c_t * log p(o_t)` is added to it (coefficients are
    /// treated as constants). Returns the per-token log-probabilities.
    pub fn weighted_pass(
        &self,
        prompt: Prompt<'_>,
        tokens: &[Token],
        mut weight: impl FnMut(usize, f64) -> f64,
        mut grad: Option<&mut PolicyParams>,
    ) -> Result<Vec<f64>> {
        let d = self.params.dims;
        let mut st = self.start(prompt.patient, prompt.instruction.index(), prompt.m0)?;
        let mut logps = Vec::with_capacity(tokens.len());
        let mut dfused = if grad.is_some() {
            vec![0.0; d.n_drugs * d.fused_dim()]
        } else {
            Vec::new()
        };
        let mut dmeans: Vec<Vec<f64>> = Vec::new();
        for (t, &tok) in tokens.iter().enumerate() {
            self.check_token(tok)?;
            let cache = self.forward(prompt.patient, &st);
            let lp = cache.logp[tok.index()];
            logps.push(lp);
            let c = weight(t, lp);
            if let Some(g) = grad.as_deref_mut() {
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient coefficient at token {t}"
                    )));
                }
                let dlogit: Vec<f64> = cache
                    .logp
                    .iter()
                    .enumerate()
                    .map(|(k, l)| c * (f64::from(k == tok.index()) - l.exp()))
                    .collect();
                let dmean = if c == 0.0 {
                    vec![0.0; d.token_dim]
                } else {
                    self.backward(&st, &cache, &dlogit, g, &mut dfused)
                };
                dmeans.push(dmean);
            }
            self.push(&mut st, tok);
        }
        if let Some(g) = grad {
            // Token j feeds the running mean at every later position.
            let mut suffix = vec![0.0; d.token_dim];
            for j in (0..tokens.len()).rev() {
                axpy(g.tok_emb.row_mut(tokens[j].index()), 1.0, &suffix);
                axpy(&mut suffix, 1.0, &dmeans[j]);
            }
            self.backward_fused(&dfused, g);
        }
        Ok(logps)
    }

    pub fn logprob_sequence(&self, prompt: Prompt<'_>, tokens: &[Token]) -> Result<Vec<f64>> {
        self.weighted_pass(prompt, tokens, |_, _| 0.0, None)
    }

    /// Gradient of `sum_t log p(o_t)`.
    pub fn grad_logprob_sequence(
        &self,
        prompt: Prompt<'_>,
        tokens: &[Token],
    ) -> Result<PolicyParams> {
        let mut g = self.params.zeros_like();
        self.weighted_pass(prompt, tokens, |_, _| 1.0, Some(&mut g))?;
        Ok(g)
    }

    /// Samples until `EOS` or `max_tokens`. Temperature 0 is argmax decoding
    /// with the lowest index winning ties.
    pub fn sample_sequence<R: Rng>(
        &self,
        prompt: Prompt<'_>,
        temperature: f64,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if !(temperature >= 0.0) || max_tokens == 0 {
            return Err(Error::Config(
                "sampling needs temperature >= 0 and max_tokens >= 1".into(),
            ));
        }
        let mut st = self.start(prompt.patient, prompt.instruction.index(), prompt.m0)?;
        let eos = self.vocab.eos();
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        while tokens.len() < max_tokens {
            let logp = self.forward(prompt.patient, &st).logp;
            let k = if temperature == 0.0 {
                argmax(&logp)
            } else {
                sample_tempered(&logp, temperature, rng)
            };
            let tok = Token(k as u16);
            tokens.push(tok);
            logps.push(logp[k]);
            self.push(&mut st, tok);
            if tok == eos {
                break;
            }
        }
        let mut traj = build_trajectory(
            prompt.instruction,
            tokens,
            self.vocab,
            &prompt.patient.candidate_set,
            prompt.m0.clone(),
        );
        traj.logprobs_old = logps;
        Ok(traj)
    }

    fn classify_cache(&self, patient: &PatientRecord) -> Result<(DecodeState, StepCache)> {
        let st = self.start(patient, CLASSIFY, &MedicationSet::new())?;
        let mut x = vec![0.0; self.layout.len];
        self.build_input(patient, &st, &mut x);
        let (h, u) = self.trunk(&x);
        let cache = StepCache {
            x,
            h,
            u,
            logp: Vec::new(),
            matches: Vec::new(),
            group_max: Vec::new(),
            group_sum: Vec::new(),
            group_count: Vec::new(),
        };
        Ok((st, cache))
    }

    /// Classifier logits for every candidate of `patient`, in id order.
    pub fn classifier_logits(&self, patient: &PatientRecord) -> Result<Vec<(DrugId, f64)>> {
        let (st, cache) = self.classify_cache(patient)?;
        let b = self.params.cls_bias.data[0];
        Ok(st
            .candidates
            .iter()
            .map(|&c| (c, b + dot(&cache.u, self.fused_row(c.index()))))
            .collect())
    }

    /// Probability that `id` belongs in the patient's list.
    pub fn classifier_predict(&self, patient: &PatientRecord, id: DrugId) -> Result<f64> {
        self.ddi.check(id)?;
        let (_, cache) = self.classify_cache(patient)?;
        let z = self.params.cls_bias.data[0] + dot(&cache.u, self.fused_row(id.index()));
        Ok(sigmoid(z))
    }

    /// Adds `sum_d dlogit_d * d(logit_d)/d(theta)` to `grad`.
    pub fn classifier_backward(
        &self,
        patient: &PatientRecord,
        dlogits: &[(DrugId, f64)],
        grad: &mut PolicyParams,
    ) -> Result<()> {
        let d = self.params.dims;
        let k_dim = d.fused_dim();
        let (_, cache) = self.classify_cache(patient)?;
        let mut du = vec![0.0; k_dim];
        let mut dfused = vec![0.0; d.n_drugs * k_dim];
        for &(id, g) in dlogits {
            self.ddi.check(id)?;
            let i = id.index();
            grad.cls_bias.data[0] += g;
            axpy(&mut du, g, self.fused_row(i));
            axpy(&mut dfused[i * k_dim..(i + 1) * k_dim], g, &cache.u);
        }
        let mut dh = vec![0.0; d.hidden];
        self.backward_trunk(&cache, &du, &mut dh, grad);
        self.backward_fused(&dfused, grad);
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Yes iff the probability is strictly above one half.
pub fn decide(prob: f64) -> bool {
    prob > 0.5
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_tempered<R: Rng>(logp: &[f64], temperature: f64, rng: &mut R) -> usize {
    let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp
        .iter()
        .map(|l| ((l - mx) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if r < wi {
            return i;
        }
        r -= wi;
    }
    // Rounding left a sliver past the last bucket.
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}
