//! Deterministic file outputs: CSV payloads at 17 significant digits with an
//! embedded config hash, plus a JSON manifest carrying seeds and provenance.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// 17 significant digits: round-trip exact for f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV writer with a leading `# config_hash=` comment; payload bytes are a
/// pure function of the rows.
pub struct CsvFile {
    path: PathBuf,
    buf: String,
}

impl CsvFile {
    pub fn create(dir: &Path, name: &str, config_hash: &str, header: &str) -> Self {
        let mut buf = String::new();
        buf.push_str(&format!("# config_hash={config_hash}\n"));
        buf.push_str(header);
        buf.push('\n');
        Self {
            path: dir.join(name),
            buf,
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut f = fs::File::create(&self.path)
            .map_err(|e| CliError::Numeric(format!("cannot create {}: {e}", self.path.display())))?;
        f.write_all(self.buf.as_bytes())
            .map_err(|e| CliError::Numeric(format!("write {}: {e}", self.path.display())))?;
        Ok(self.path)
    }
}

/// Run manifest: everything needed to reproduce the outputs. The timestamp is
/// the only field allowed to differ between identical runs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub created_unix_ms: u128,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, name: &str, value: impl ToString) {
        self.inputs.insert(name.to_string(), value.to_string());
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics.insert(
            name.to_string(),
            serde_json::to_value(value).expect("serializable metric"),
        );
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Numeric(format!("manifest serialize: {e}")))?;
        fs::write(&path, text)
            .map_err(|e| CliError::Numeric(format!("write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Hex FNV-1a of the raw config text; embedded in every output file.
pub fn config_hash(text: &str) -> String {
    let mut h = hsgd_core::util::Fnv1a::new();
    h.write_bytes(text.as_bytes());
    format!("{:016x}", h.finish())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create output dir {}: {e}", dir.display())))
}

/// Compact, filename-safe float (for σ/α tags in file names).
pub fn tag(x: f64) -> String {
    let mut s = format!("{x}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s.replace('.', "p").replace('-', "m")
}
