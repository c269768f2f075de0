//! Dataset file: one JSON case per line, plus the vocabulary sidecar.

use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::sample::CaseRecord;
use super::splits::Splits;
use crate::error::{Error, Result};

pub fn write_dataset<W: Write>(mut w: W, splits: &Splits) -> Result<()> {
    for c in splits.all() {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn dataset_bytes(splits: &Splits) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, splits).expect("writing to memory");
    buf
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Splits> {
    let mut records = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", n + 1)))?;
        records.push(rec);
    }
    Splits::from_records(records)
}

/// 64-bit identity of a dataset: the leading bytes of the SHA-256 of its file form.
pub fn dataset_id(splits: &Splits) -> u64 {
    let d = Sha256::digest(dataset_bytes(splits));
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
