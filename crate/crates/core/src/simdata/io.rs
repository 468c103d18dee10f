//! JSON-lines datasets and the rig sidecar file.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::StereoRig;

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses JSONL text; `origin` labels errors. Blank lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), path)
}

/// `d.jsonl` -> `d.rig.json`.
pub fn rig_sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("rig.json")
}

pub fn write_rig(rig: &StereoRig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rig)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_rig(path: &Path) -> Result<StereoRig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rig: StereoRig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    rig.validate()?;
    Ok(rig)
}
