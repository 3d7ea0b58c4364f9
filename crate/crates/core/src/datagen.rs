//! Synthetic cohorts: latent conditions drive both patient features and
//! ground-truth medications, and a sampled interaction graph is calibrated so
//! ground-truth lists carry a realistic interaction rate.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ddi_rate, DdiGraph, DrugId, MedicationSet, PatientRecord};
use crate::error::{Error, Result};
use crate::policy::Tensor;
use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub n_drugs: usize,
    pub n_conditions: usize,
    /// Mean of the per-patient condition count (Poisson, at least 1).
    pub conditions_per_patient: f64,
    pub drugs_per_condition: usize,
    /// Zipf exponent of drug popularity when drawing indications; 0 is uniform.
    pub indication_skew: f64,
    /// Probability an indicated drug is left out of the ground truth.
    pub gt_dropout: f64,
    pub ddi_density: f64,
    /// Sampling weight of co-indicated pairs relative to other pairs.
    pub ddi_coindication_bias: f64,
    pub feature_dim: usize,
    pub noise_scale: f64,
    /// Fraction of patients with a history vector.
    pub history_fraction: f64,
    /// Accepted band for the cohort mean ground-truth interaction rate.
    pub ddi_band: (f64, f64),
    pub seed: u64,
}

const SKEW: f64 = 0.7;

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 600,
            n_drugs: 151,
            n_conditions: 40,
            conditions_per_patient: 4.0,
            drugs_per_condition: 8,
            indication_skew: SKEW,
            gt_dropout: 0.15,
            ddi_density: 0.08,
            ddi_coindication_bias: 3.0,
            feature_dim: 32,
            noise_scale: 0.5,
            history_fraction: 0.5,
            ddi_band: (0.10, 0.17),
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_patients == 0
            || self.n_drugs < 2
            || self.n_conditions == 0
            || self.feature_dim == 0
        {
            return bad("cohort sizes must be positive and n_drugs >= 2");
        }
        if self.drugs_per_condition == 0 || self.drugs_per_condition > self.n_drugs {
            return bad("drugs_per_condition must lie in 1..=n_drugs");
        }
        for (name, v) in [
            ("gt_dropout", self.gt_dropout),
            ("ddi_density", self.ddi_density),
            ("history_fraction", self.history_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.indication_skew >= 0.0)
            || !(self.conditions_per_patient > 0.0)
            || !(self.noise_scale >= 0.0)
            || !(self.ddi_coindication_bias > 0.0)
        {
            return bad(
                "conditions_per_patient and ddi_coindication_bias must be > 0, noise_scale >= 0",
            );
        }
        let (lo, hi) = self.ddi_band;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("ddi_band must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: CohortConfig,
    pub patients: Vec<PatientRecord>,
    pub ddi: DdiGraph,
    /// Drugs indicated for each condition.
    pub indications: Vec<Vec<DrugId>>,
    /// Number of ground-truth drug swaps the calibration made.
    pub calibration_swaps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_patients: usize,
    pub n_drugs: usize,
    pub n_edges: usize,
    pub mean_gt_size: f64,
    pub mean_gt_ddi: f64,
    pub history_fraction: f64,
    pub calibration_swaps: usize,
}

impl Cohort {
    pub fn stats(&self) -> Result<CohortStats> {
        let n = self.patients.len() as f64;
        let mean_gt_size = self
            .patients
            .iter()
            .map(|p| p.ground_truth.len() as f64)
            .sum::<f64>()
            / n;
        Ok(CohortStats {
            n_patients: self.patients.len(),
            n_drugs: self.ddi.n_drugs(),
            n_edges: self.ddi.n_edges(),
            mean_gt_size,
            mean_gt_ddi: mean_gt_ddi(&self.patients, &self.ddi)?,
            history_fraction: self.patients.iter().filter(|p| p.history.is_some()).count() as f64
                / n,
            calibration_swaps: self.calibration_swaps,
        })
    }
}

fn mean_gt_ddi(patients: &[PatientRecord], ddi: &DdiGraph) -> Result<f64> {
    let mut total = 0.0;
    for p in patients {
        total += ddi_rate(&p.ground_truth, ddi)?;
    }
    Ok(total / patients.len().max(1) as f64)
}

fn normal_vec(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn gen_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let n = cfg.n_drugs;
    let all: Vec<u32> = (0..n as u32).collect();

    let mut rng = seed::stream(cfg.seed, "datagen-indications", 0);
    let mut by_popularity = all.clone();
    by_popularity.shuffle(&mut rng);
    let mut weight = vec![0.0; n];
    for (rank, &d) in by_popularity.iter().enumerate() {
        weight[d as usize] = (rank as f64 + 1.0).powf(-cfg.indication_skew);
    }
    let mut indications = Vec::with_capacity(cfg.n_conditions);
    for _ in 0..cfg.n_conditions {
        let mut d: Vec<DrugId> = all
            .choose_multiple_weighted(&mut rng, cfg.drugs_per_condition, |&i| weight[i as usize])
            .map_err(|e| Error::Config(e.to_string()))?
            .map(|&i| DrugId(i))
            .collect();
        d.sort();
        indications.push(d);
    }

    // Feature map: one column per condition.
    let mut rng = seed::stream(cfg.seed, "datagen-features", 0);
    let col_scale = 1.0 / (cfg.conditions_per_patient.max(1.0)).sqrt();
    let columns: Vec<Vec<f64>> = (0..cfg.n_conditions)
        .map(|_| normal_vec(&mut rng, cfg.feature_dim, col_scale))
        .collect();
    let embed = |conds: &[usize], rng: &mut StreamRng| -> Vec<f64> {
        let mut x = normal_vec(rng, cfg.feature_dim, cfg.noise_scale);
        for &c in conds {
            for (xi, a) in x.iter_mut().zip(&columns[c]) {
                *xi += a;
            }
        }
        x
    };

    let mut rng = seed::stream(cfg.seed, "datagen-patients", 0);
    let poisson =
        Poisson::new(cfg.conditions_per_patient).map_err(|e| Error::Config(e.to_string()))?;
    let candidates = MedicationSet::from_drugs(all.iter().map(|&i| DrugId(i)));
    let conds_all: Vec<usize> = (0..cfg.n_conditions).collect();
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for pid in 0..cfg.n_patients {
        let k = (poisson.sample(&mut rng) as usize).clamp(1, cfg.n_conditions);
        let mut conds: Vec<usize> = conds_all.choose_multiple(&mut rng, k).copied().collect();
        conds.sort_unstable();
        let mut gt = MedicationSet::new();
        for &c in &conds {
            for &d in &indications[c] {
                if rng.random::<f64>() >= cfg.gt_dropout {
                    gt.insert(crate::domain::Entry::Known(d));
                }
            }
        }
        if gt.is_empty() {
            gt.insert(crate::domain::Entry::Known(indications[conds[0]][0]));
        }
        let features = embed(&conds, &mut rng);
        let history = if rng.random::<f64>() < cfg.history_fraction {
            // Earlier visit: a random subset of the current conditions.
            let prev: Vec<usize> = conds
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() < 0.7)
                .collect();
            Some(embed(&prev, &mut rng))
        } else {
            None
        };
        patients.push(PatientRecord::new(
            pid as u64,
            features,
            history,
            gt,
            candidates.clone(),
        )?);
    }

    let ddi = sample_graph(cfg, &indications)?;
    let mut cohort = Cohort {
        config: *cfg,
        patients,
        ddi,
        indications,
        calibration_swaps: 0,
    };
    calibrate(&mut cohort)?;
    Ok(cohort)
}

/// Weighted sampling without replacement of `density * C(n, 2)` edges;
/// co-indicated pairs are favoured.
fn sample_graph(cfg: &CohortConfig, indications: &[Vec<DrugId>]) -> Result<DdiGraph> {
    let n = cfg.n_drugs;
    let mut co = vec![false; n * n];
    for ind in indications {
        for &a in ind {
            for &b in ind {
                co[a.index() * n + b.index()] = true;
            }
        }
    }
    let mut rng = seed::stream(cfg.seed, "datagen-ddi", 0);
    let mut keyed: Vec<(f64, u32, u32)> = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let w = if co[a * n + b] {
                cfg.ddi_coindication_bias
            } else {
                1.0
            };
            // Efraimidis-Spirakis keys: u^(1/w); the largest keys win.
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            keyed.push((u.powf(1.0 / w), a as u32, b as u32));
        }
    }
    let n_edges = (cfg.ddi_density * keyed.len() as f64).round() as usize;
    keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let edges: Vec<(u32, u32)> = keyed[..n_edges].iter().map(|&(_, a, b)| (a, b)).collect();
    DdiGraph::from_edges(n, &edges)
}

/// Moves the mean ground-truth interaction rate into the configured band by
/// swapping one ground-truth drug at a time for a drug with more (or fewer)
/// interactions with the rest of that patient's list.
fn calibrate(cohort: &mut Cohort) -> Result<()> {
    let (lo, hi) = cohort.config.ddi_band;
    let center = 0.5 * (lo + hi);
    let n = cohort.config.n_drugs;
    let mut rng = seed::stream(cohort.config.seed, "datagen-calibrate", 0);
    let max_swaps = 20 * cohort.patients.len();
    let mut rates: Vec<f64> = cohort
        .patients
        .iter()
        .map(|p| ddi_rate(&p.ground_truth, &cohort.ddi))
        .collect::<Result<_>>()?;
    let n_pat = rates.len() as f64;
    let mut mean = rates.iter().sum::<f64>() / n_pat;
    if (lo..=hi).contains(&mean) {
        return Ok(());
    }
    let raise = mean < lo;
    let mut swaps = 0;
    // Swap until the mean reaches the band center, so it lands well inside.
    while if raise { mean < center } else { mean > center } {
        if swaps >= max_swaps {
            if (lo..=hi).contains(&mean) {
                break;
            }
            return Err(Error::Calibration(format!(
                "mean ground-truth DDI rate {mean:.4} still outside [{lo}, {hi}] after {swaps} swaps"
            )));
        }
        let pi = rng.random_range(0..cohort.patients.len());
        let p = &mut cohort.patients[pi];
        let members: Vec<DrugId> = p.ground_truth.drugs().collect();
        if members.len() < 2 {
            swaps += 1;
            continue;
        }
        let links = |d: DrugId| {
            members
                .iter()
                .filter(|&&m| m != d && cohort.ddi.interacts(m, d))
                .count() as i64
        };
        let out_key = |d: &DrugId| if raise { links(*d) } else { -links(*d) };
        let victim = *members.iter().min_by_key(|d| (out_key(d), d.0)).unwrap();
        let replacement = (0..n as u32)
            .map(DrugId)
            .filter(|d| !p.ground_truth.contains_drug(*d))
            .max_by_key(|d| {
                (
                    if raise { links(*d) } else { -links(*d) },
                    std::cmp::Reverse(d.0),
                )
            });
        swaps += 1;
        let Some(replacement) = replacement else {
            continue;
        };
        if out_key(&replacement) <= out_key(&victim) {
            continue;
        }
        p.ground_truth.remove(&crate::domain::Entry::Known(victim));
        p.ground_truth
            .insert(crate::domain::Entry::Known(replacement));
        let new_rate = ddi_rate(&p.ground_truth, &cohort.ddi)?;
        mean += (new_rate - rates[pi]) / n_pat;
        rates[pi] = new_rate;
    }
    cohort.calibration_swaps = swaps;
    Ok(())
}

/// Patient indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then sizes by largest-remainder rounding of the ratios
/// (ties go to the earlier split).
pub fn split_cohort(n_patients: usize, ratios: [u32; 3], seed: u64) -> Result<Splits> {
    if ratios.contains(&0) {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let mut sizes = [0usize; 3];
    let mut rema = [(0u64, 0usize); 3];
    for i in 0..3 {
        let q = n_patients as u64 * u64::from(ratios[i]);
        sizes[i] = (q / total) as usize;
        rema[i] = (q % total, i);
    }
    let mut left = n_patients - sizes.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &rema {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    let mut idx: Vec<usize> = (0..n_patients).collect();
    idx.shuffle(&mut seed::stream(seed, "split", 0));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let valid = idx.split_off(sizes[0]);
    let mut s = Splits {
        train: idx,
        valid,
        test,
    };
    s.train.sort_unstable();
    s.valid.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

/// Symmetric factorization of the co-prescription count matrix: the top
/// `dim` eigenvectors scaled by the square roots of their eigenvalues. Each
/// vector's sign is fixed so its largest-magnitude entry is positive.
pub fn build_collab_embeddings(
    train: &[&PatientRecord],
    n_drugs: usize,
    dim: usize,
) -> Result<Tensor> {
    if dim > n_drugs {
        return Err(Error::Config(format!(
            "embedding dim {dim} exceeds drug count {n_drugs}"
        )));
    }
    if train.is_empty() {
        return Err(Error::Data(
            "collaborative embeddings need a nonempty training split".into(),
        ));
    }
    let mut counts = DMatrix::<f64>::zeros(n_drugs, n_drugs);
    for p in train {
        let ids: Vec<usize> = p.ground_truth.drugs().map(|d| d.index()).collect();
        for &a in &ids {
            if a >= n_drugs {
                return Err(Error::DrugOutOfRange {
                    id: a as u32,
                    n_drugs,
                });
            }
            for &b in &ids {
                counts[(a, b)] += 1.0;
            }
        }
    }
    let eig = SymmetricEigen::new(counts);
    let mut order: Vec<usize> = (0..n_drugs).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let mut out = Tensor::zeros(&[n_drugs, dim]);
    for (c, &k) in order.iter().take(dim).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        let pivot = (0..n_drugs)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n_drugs {
            out.data[r * dim + c] = sign * scale * v[r];
        }
    }
    Ok(out)
}

/// `(gt \ m_p, m_p \ gt)`, each sorted by id.
pub fn oracle_edit_targets(
    patient: &PatientRecord,
    m_p: &MedicationSet,
) -> (Vec<DrugId>, Vec<DrugId>) {
    let add = patient.ground_truth.difference(m_p).drugs().collect();
    let remove = m_p.difference(&patient.ground_truth).drugs().collect();
    (add, remove)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> MedicationSet {
        MedicationSet::from_drugs(ids.iter().map(|&i| DrugId(i)))
    }

    #[test]
    fn split_sizes_use_largest_remainders() {
        let s = split_cohort(600, [4, 1, 1], 3).unwrap();
        assert_eq!(
            (s.train.len(), s.valid.len(), s.test.len()),
            (400, 100, 100)
        );
        let s = split_cohort(7, [4, 1, 1], 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (5, 1, 1));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(split_cohort(7, [4, 0, 1], 3).is_err());
    }

    #[test]
    fn edit_targets_close_the_gap() {
        let p = PatientRecord::new(0, vec![0.0], None, set(&[1, 2]), set(&[0, 1, 2, 3])).unwrap();
        assert_eq!(
            oracle_edit_targets(&p, &set(&[0, 1])),
            (vec![DrugId(2)], vec![DrugId(0)])
        );
        assert_eq!(oracle_edit_targets(&p, &set(&[1, 2])), (vec![], vec![]));
        assert_eq!(
            oracle_edit_targets(&p, &set(&[])),
            (vec![DrugId(1), DrugId(2)], vec![])
        );
    }

    #[test]
    fn smoke_cohort_is_valid_and_reproducible() {
        let cfg = CohortConfig {
            n_patients: 20,
            n_drugs: 10,
            n_conditions: 4,
            drugs_per_condition: 3,
            ddi_band: (0.0, 1.0),
            ..CohortConfig::default()
        };
        let a = gen_cohort(&cfg).unwrap();
        let b = gen_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        for p in &a.patients {
            p.validate().unwrap();
            assert!(!p.ground_truth.is_empty());
        }
    }

    fn small_cfg() -> CohortConfig {
        CohortConfig {
            n_patients: 60,
            n_drugs: 30,
            n_conditions: 8,
            drugs_per_condition: 6,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn calibration_swaps_reach_the_band() {
        let cfg = CohortConfig {
            ddi_band: (0.18, 0.22),
            ..small_cfg()
        };
        let c = gen_cohort(&cfg).unwrap();
        let s = c.stats().unwrap();
        assert!(s.calibration_swaps > 0);
        assert!((0.18..=0.22).contains(&s.mean_gt_ddi), "{s:?}");
        for p in &c.patients {
            p.validate().unwrap();
        }
        let cfg = CohortConfig {
            ddi_band: (0.0, 0.01),
            ..small_cfg()
        };
        let s = gen_cohort(&cfg).unwrap().stats().unwrap();
        assert!(s.mean_gt_ddi <= 0.01, "{s:?}");
    }

    #[test]
    fn infeasible_band_is_a_calibration_error() {
        let cfg = CohortConfig {
            ddi_band: (0.99, 1.0),
            ..small_cfg()
        };
        assert!(matches!(gen_cohort(&cfg), Err(Error::Calibration(_))));
    }

    fn patient(id: u64, gt: &[u32]) -> PatientRecord {
        PatientRecord::new(id, vec![0.0], None, set(gt), set(&[0, 1, 2, 3, 4, 5])).unwrap()
    }

    #[test]
    fn co_prescribed_drugs_embed_together() {
        let ps = [
            patient(0, &[0, 1, 2]),
            patient(1, &[0, 1]),
            patient(2, &[0, 1, 3]),
            patient(3, &[2, 3]),
            patient(4, &[3, 4]),
        ];
        let refs: Vec<&PatientRecord> = ps.iter().collect();
        let e = build_collab_embeddings(&refs, 6, 3).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
                * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        assert!(cos(e.row(0), e.row(1)) > 0.9);
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(e.row(5)) < 1e-9);
        for d in 0..5 {
            assert!(norm(e.row(5)) <= norm(e.row(d)));
        }
        assert_eq!(build_collab_embeddings(&refs, 6, 3).unwrap(), e);
        assert!(build_collab_embeddings(&refs, 6, 7).is_err());
    }
}
