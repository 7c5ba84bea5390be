//! Append-only JSONL run logs: one header line, then metric rows with
//! strictly increasing steps, flushed on every append so a crash loses at
//! most the in-flight row.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Unix seconds at run start. The only field exempt from the
    /// determinism contract.
    pub timestamp: u64,
}

impl RunHeader {
    pub fn new(config_hash: String, seed: u64) -> Self {
        RunHeader {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

pub struct RunLogWriter {
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl RunLogWriter {
    pub fn create(path: &Path, header: &RunHeader) -> anyhow::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(RunLogWriter {
            out,
            last_step: None,
        })
    }

    /// Append one row; `step` must strictly increase across calls.
    pub fn append<T: Serialize>(&mut self, step: u64, row: &T) -> anyhow::Result<()> {
        if let Some(last) = self.last_step {
            anyhow::ensure!(step > last, "run log steps must strictly increase ({last} -> {step})");
        }
        self.last_step = Some(step);
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// A parsed log: header plus rows as generic JSON objects (experiments log
/// different row schemas; aggregation only needs the numeric fields).
#[derive(Debug, Clone)]
pub struct RunLog {
    pub header: RunHeader,
    pub rows: Vec<serde_json::Map<String, serde_json::Value>>,
}

pub fn read_log(path: &Path) -> anyhow::Result<RunLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{}: empty log", path.display()))??;
    let header: RunHeader = serde_json::from_str(&header_line)
        .map_err(|e| anyhow::anyhow!("{}: bad header: {e}", path.display()))?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(RunLog { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_must_increase() {
        let dir = std::env::temp_dir().join("lop_runlog_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.jsonl");
        let mut w =
            RunLogWriter::create(&path, &RunHeader::new("abc".into(), 0)).unwrap();
        w.append(0, &serde_json::json!({"step": 0, "loss": 1.0})).unwrap();
        w.append(100, &serde_json::json!({"step": 100, "loss": 0.5})).unwrap();
        assert!(w.append(100, &serde_json::json!({"step": 100})).is_err());
        drop(w);
        let log = read_log(&path).unwrap();
        assert_eq!(log.header.seed, 0);
        assert_eq!(log.rows.len(), 2);
        assert_eq!(log.rows[1]["loss"], serde_json::json!(0.5));
    }
}
