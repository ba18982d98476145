//! Prediction records: the submission CSV and the raw-output sidecar used for
//! ensembling.
//!
//! Raw layout (little-endian): magic `AFPR`, u32 version = 1, u32 record count,
//! u32 values per record (22); per record a u16 id byte-length, the UTF-8 id,
//! then 12 AU logits, 8 expression logits and 2 VA values as f32.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io_util::{read_u16, read_u32, Checked};
use crate::model::{N_AU, N_EXPR, N_QUERIES, N_VA};

use super::LABEL_HEADER;

const MAGIC: &[u8; 4] = b"AFPR";
const VERSION: u32 = 1;

/// Pre-threshold outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub au_logits: [f32; N_AU],
    pub expr_logits: [f32; N_EXPR],
    pub va: [f32; N_VA],
}

impl PredictionRecord {
    /// AU decisions at sigmoid ≥ 0.5, i.e. logit ≥ 0.
    pub fn au_decisions(&self) -> [bool; N_AU] {
        self.au_logits.map(|l| l >= 0.0)
    }

    /// Arg-max class; ties go to the lower index.
    pub fn expr_class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.expr_logits.iter().enumerate() {
            if v > self.expr_logits[best] {
                best = i;
            }
        }
        best
    }

    fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.au_logits
            .iter()
            .chain(&self.expr_logits)
            .chain(&self.va)
            .copied()
    }
}

pub fn raw_sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".raw");
    PathBuf::from(s)
}

pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate id {id:?}")));
        }
    }
    Ok(())
}

/// Writes the thresholded submission CSV.
pub fn write_prediction_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LABEL_HEADER)?;
    for r in records {
        let mut row = Vec::with_capacity(LABEL_HEADER.len());
        row.push(r.id.clone());
        row.push(format!("{:.4}", r.va[0]));
        row.push(format!("{:.4}", r.va[1]));
        row.push(r.expr_class().to_string());
        row.extend(r.au_decisions().iter().map(|&b| u8::from(b).to_string()));
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_raw_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    for v in [VERSION, records.len() as u32, N_QUERIES as u32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for r in records {
        w.write_all(&(r.id.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(r.id.as_bytes()).map_err(io)?;
        for v in r.values() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_raw_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Checked::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(r.error("bad magic, not a raw prediction file"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "record count")? as usize;
    let width = read_u32(&mut r, "values per record")? as usize;
    if width != N_QUERIES {
        return Err(r.error(format!("expected {N_QUERIES} values per record, found {width}")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = read_u16(&mut r, &format!("record {i} id length"))? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id, &format!("record {i} id"))?;
        let id = String::from_utf8(id).map_err(|_| r.error(format!("record {i}: id is not UTF-8")))?;
        let mut raw = [0u8; N_QUERIES * 4];
        r.read_exact(&mut raw, &format!("record {i} values"))?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut rec = PredictionRecord {
            id,
            au_logits: [0.0; N_AU],
            expr_logits: [0.0; N_EXPR],
            va: [0.0; N_VA],
        };
        rec.au_logits.copy_from_slice(&vals[..N_AU]);
        rec.expr_logits.copy_from_slice(&vals[N_AU..N_AU + N_EXPR]);
        rec.va.copy_from_slice(&vals[N_AU + N_EXPR..]);
        out.push(rec);
    }
    let mut b = [0u8; 1];
    if r.inner().read(&mut b).map_err(|e| Error::io(path, e))? != 0 {
        return Err(r.error("trailing bytes after last record"));
    }
    Ok(out)
}

/// Writes the CSV and its raw sidecar; returns the sidecar path.
pub fn write_predictions(csv_path: &Path, records: &[PredictionRecord]) -> Result<PathBuf> {
    ensure_unique_ids(records.iter().map(|r| r.id.as_str()))?;
    write_prediction_csv(csv_path, records)?;
    let raw = raw_sidecar_path(csv_path);
    write_raw_predictions(&raw, records)?;
    Ok(raw)
}
