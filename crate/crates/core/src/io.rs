//! On-disk formats.
//!
//! Checkpoints are a flat list of named `f64` arrays:
//! `b"MRCK"`, `u32` version, `u32` metadata length + UTF-8 JSON metadata,
//! `u32` array count, then per array: `u32` name length + UTF-8 name,
//! `u32` rank, `u64` per dimension, and the little-endian data.
//!
//! Cohorts are `cohort.jsonl` (one patient per line), `ddi.json`,
//! `splits.json`, and `embeddings.bin` holding the `collab` array.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Splits;
use crate::domain::{DdiGraph, DrugId, MedicationSet, PatientRecord};
use crate::error::{Error, Result};
use crate::policy::{PolicyDims, PolicyParams, Tensor};

const MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_arrays<W: Write>(w: &mut W, meta: &str, arrays: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "array {name} has inconsistent shape"
            )));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Returns the metadata string and the named arrays in file order.
pub fn read_arrays<R: Read>(r: &mut R) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = read_u32(r)? as usize;
    let meta = read_string(r, meta_len)?;
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    Ok((meta, out))
}

pub fn save_params(path: &Path, p: &PolicyParams) -> Result<()> {
    let meta = serde_json::to_string(&p.dims)?;
    let tensors = p.tensors();
    let arrays: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, _, t)| (*n, *t)).collect();
    let mut buf = Vec::new();
    write_arrays(&mut buf, &meta, &arrays)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let (meta, arrays) = read_arrays(&mut BufReader::new(fs::File::open(path)?))?;
    let dims: PolicyDims = serde_json::from_str(&meta)?;
    let collab = arrays
        .iter()
        .find(|(n, _)| n == "collab")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks the collab array".into()))?;
    let mut p = PolicyParams::zeros(dims, collab)?;
    for (name, _, t) in p.tensors_mut() {
        let (_, src) = arrays
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks array {name}")))?;
        if src.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                src.shape, t.shape
            )));
        }
        t.data.clone_from(&src.data);
    }
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    Ok(p)
}

#[derive(Debug, Serialize, Deserialize)]
struct PatientLine {
    patient_id: u64,
    features: Vec<f64>,
    gt: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    history: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DdiFile {
    n_drugs: usize,
    edges: Vec<[u32; 2]>,
}

/// A cohort as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    pub ddi: DdiGraph,
    pub splits: Splits,
    pub collab: Tensor,
}

impl Dataset {
    pub fn split(&self, idx: &[usize]) -> Vec<&PatientRecord> {
        idx.iter().map(|&i| &self.patients[i]).collect()
    }
}

pub fn cohort_jsonl(patients: &[PatientRecord]) -> Result<String> {
    let mut out = String::new();
    for p in patients {
        let line = PatientLine {
            patient_id: p.patient_id,
            features: p.features.clone(),
            gt: p.ground_truth.drugs().map(|d| d.0).collect(),
            history: p.history.clone(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("cohort.jsonl"), cohort_jsonl(&ds.patients)?)?;
    let ddi = DdiFile {
        n_drugs: ds.ddi.n_drugs(),
        edges: ds.ddi.edges().into_iter().map(|(a, b)| [a, b]).collect(),
    };
    fs::write(dir.join("ddi.json"), serde_json::to_string(&ddi)?)?;
    fs::write(dir.join("splits.json"), serde_json::to_string(&ds.splits)?)?;
    let mut buf = Vec::new();
    write_arrays(&mut buf, "{}", &[("collab", &ds.collab)])?;
    fs::write(dir.join("embeddings.bin"), buf)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ddi: DdiFile = serde_json::from_str(&fs::read_to_string(dir.join("ddi.json"))?)?;
    let edges: Vec<(u32, u32)> = ddi.edges.iter().map(|e| (e[0], e[1])).collect();
    let graph = DdiGraph::from_edges(ddi.n_drugs, &edges)?;
    let candidates = MedicationSet::from_drugs((0..ddi.n_drugs as u32).map(DrugId));
    let mut patients = Vec::new();
    for line in BufReader::new(fs::File::open(dir.join("cohort.jsonl"))?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PatientLine = serde_json::from_str(&line)?;
        for &d in &p.gt {
            graph.check(DrugId(d))?;
        }
        let gt = MedicationSet::from_drugs(p.gt.into_iter().map(DrugId));
        patients.push(PatientRecord::new(
            p.patient_id,
            p.features,
            p.history,
            gt,
            candidates.clone(),
        )?);
    }
    let splits: Splits = serde_json::from_str(&fs::read_to_string(dir.join("splits.json"))?)?;
    for &i in splits.train.iter().chain(&splits.valid).chain(&splits.test) {
        if i >= patients.len() {
            return Err(Error::Data(format!(
                "split index {i} beyond {} patients",
                patients.len()
            )));
        }
    }
    let (_, arrays) = read_arrays(&mut BufReader::new(fs::File::open(
        dir.join("embeddings.bin"),
    )?))?;
    let collab = arrays
        .into_iter()
        .find(|(n, _)| n == "collab")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint("embeddings file lacks the collab array".into()))?;
    Ok(Dataset {
        patients,
        ddi: graph,
        splits,
        collab,
    })
}
