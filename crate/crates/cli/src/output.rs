//! CSV and JSONL writers. Every file carries the schema version and the
//! full configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

/// Writes `rows` with a header row. Row types start with a
/// `schema_version` column and end with the JSON-encoded config.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per line. The first line is a header holding the
/// schema version and the config.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create<C: Serialize>(path: &Path, command: &str, config: &C) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = JsonlWriter { out: BufWriter::new(file) };
        w.write(&serde_json::json!({
            "kind": "header",
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config": config,
        }))?;
        Ok(w)
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> anyhow::Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
