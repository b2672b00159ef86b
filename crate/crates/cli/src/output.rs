//! Output files. Every data file starts with the same metadata record; the
//! wall-clock timestamp lives only in `run.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::SCHEMA_VERSION;
use crate::CliError;

pub const TOOL: &str = concat!("stomech ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub spec: Value,
    pub grids: Value,
}

impl Meta {
    pub fn new(command: &'static str, seed: u64, spec: &impl Serialize, grids: Value) -> Self {
        Meta {
            tool: TOOL,
            schema_version: SCHEMA_VERSION,
            command,
            seed,
            spec: serde_json::to_value(spec).expect("spec serializes"),
            grids,
        }
    }

    fn header_lines(&self) -> Vec<String> {
        vec![
            format!("# tool: {}", self.tool),
            format!("# schema_version: {}", self.schema_version),
            format!("# command: {}", self.command),
            format!("# seed: {}", self.seed),
            format!("# spec: {}", self.spec),
            format!("# grids: {}", self.grids),
        ]
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub struct Outputs {
    pub dir: PathBuf,
    pub written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn open(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| io(&path, e))?;
        self.written.push(name.to_string());
        Ok((path, BufWriter::new(f)))
    }

    /// CSV with `# key: value` metadata lines, a header row and `rows`.
    pub fn csv(&mut self, name: &str, meta: &Meta, columns: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
        let (path, mut w) = self.open(name)?;
        let go = || -> std::io::Result<()> {
            for l in meta.header_lines() {
                writeln!(w, "{l}")?;
            }
            writeln!(w, "{}", columns.join(","))?;
            for r in rows {
                writeln!(w, "{}", r.join(","))?;
            }
            w.flush()
        };
        go().map_err(|e| io(&path, e))
    }

    /// Pretty JSON object `{"meta": ..., <body fields>}`.
    pub fn json(&mut self, name: &str, meta: &Meta, body: Value) -> Result<(), CliError> {
        let mut obj = serde_json::Map::new();
        obj.insert("meta".into(), serde_json::to_value(meta).expect("meta serializes"));
        match body {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("data".into(), other);
            }
        }
        let (path, mut w) = self.open(name)?;
        let text = serde_json::to_string_pretty(&Value::Object(obj)).expect("json serializes");
        writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| io(&path, e))
    }

    /// NDJSON: a `meta` record, then one line per item.
    pub fn ndjson(&mut self, name: &str, meta: &Meta, records: impl Iterator<Item = Value>) -> Result<(), CliError> {
        let (path, mut w) = self.open(name)?;
        let go = || -> std::io::Result<()> {
            let mut head = serde_json::to_value(meta).expect("meta serializes");
            head["record"] = json!("meta");
            writeln!(w, "{head}")?;
            for r in records {
                writeln!(w, "{r}")?;
            }
            w.flush()
        };
        go().map_err(|e| io(&path, e))
    }

    /// Run manifest: metadata, file list and the timestamp.
    pub fn finish(mut self, meta: &Meta, extra: Value) -> Result<Vec<String>, CliError> {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let files = self.written.clone();
        self.json("run.json", meta, json!({ "timestamp_unix": started, "files": files, "summary": extra }))?;
        Ok(self.written)
    }
}

/// Shortest round-trip formatting (exponent form for very small or large values).
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
