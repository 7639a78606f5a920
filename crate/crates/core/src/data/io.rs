//! Dataset files: one JSON object per line.
//!
//! ```text
//! {"domain_id":0,"labels":[3,1,7],"frames":[[f, f, ...], [f, f, ...], ...]}
//! ```
//!
//! `frames` is the raw `[T × F]` matrix, one array per frame. Floats are
//! written in shortest round-trip decimal form and parsed back exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::ctc::LabelSequence;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    domain_id: u8,
    labels: LabelSequence,
    frames: Vec<Vec<f64>>,
}

pub fn write_split<S: Scalar>(path: impl AsRef<Path>, split: &[FeatureSequence<S>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in split {
        let rec = Record {
            domain_id: u.domain_id,
            labels: u.labels.clone(),
            frames: (0..u.frames.rows())
                .map(|r| u.frames.row(r).iter().map(|x| x.as_f64()).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::format("dataset", e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<FeatureSequence<S>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", n + 1)))?;
        let rows: Vec<Vec<S>> = rec
            .frames
            .iter()
            .map(|r| r.iter().map(|&x| S::lit(x)).collect())
            .collect();
        if rows.is_empty() {
            return Err(Error::format("dataset", format!("line {}: no frames", n + 1)));
        }
        out.push(FeatureSequence {
            frames: Tensor::from_rows(&rows)?,
            labels: rec.labels,
            domain_id: rec.domain_id,
        });
    }
    Ok(out)
}
