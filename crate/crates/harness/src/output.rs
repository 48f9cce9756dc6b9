//! Output files. Every file starts with a `#` line naming the seed and
//! config hash that produced it; the rest is the data section.

use crate::HarnessError;
use serde::Serialize;
use std::path::Path;

pub fn header(seed: u64, config_hash: &str) -> String {
    format!("# seed={seed} config_hash={config_hash}\n")
}

/// CSV text for `rows` (header row from the field names).
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Sim(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Sim(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Writes `header + body` to `dir/name`, creating `dir` if needed.
pub fn write_file(dir: &Path, name: &str, seed: u64, config_hash: &str, body: &str) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", dir.join(name).display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join(name), header(seed, config_hash) + body).map_err(io)
}

/// Drops `#` lines, leaving the data section.
pub fn data_section(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect()
}
