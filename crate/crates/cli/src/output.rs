use std::path::{Path, PathBuf};

use serde::Serialize;
use tasc_core::{Result, TascError};

/// Embedded in every artifact so any file can be regenerated.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: String, seed: u64) -> Self {
        Self { tool: "tasc", version: env!("CARGO_PKG_VERSION"), command, seed }
    }

    fn csv_preamble(&self) -> String {
        format!("# {} {}\n# command: {}\n# seed: {}\n", self.tool, self.version, self.command, self.seed)
    }
}

/// A file to be written once the command has fully succeeded.
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

/// CSV with the provenance as leading `#` lines.
pub fn csv_artifact(path: PathBuf, prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<Artifact> {
    let mut w = csv::Writer::from_writer(prov.csv_preamble().into_bytes());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| TascError::Io(std::io::Error::other(e.to_string())))?;
    Ok(Artifact { path, bytes })
}

/// CSV produced by a writer callback, preceded by the provenance lines.
pub fn csv_artifact_with(path: PathBuf, prov: &Provenance, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Artifact> {
    let mut bytes = prov.csv_preamble().into_bytes();
    write(&mut bytes)?;
    Ok(Artifact { path, bytes })
}

/// Pretty JSON object with a `provenance` member added (keys are sorted).
pub fn json_artifact(path: PathBuf, prov: &Provenance, body: impl Serialize) -> Result<Artifact> {
    let mut value = serde_json::to_value(body)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| TascError::Config("JSON artifact body must be an object".into()))?;
    let mut out = serde_json::Map::new();
    out.insert("provenance".into(), serde_json::to_value(prov)?);
    out.append(obj);
    let mut bytes = serde_json::to_vec_pretty(&serde_json::Value::Object(out))?;
    bytes.push(b'\n');
    Ok(Artifact { path, bytes })
}

/// `out.csv` + `weights` + `csv` → `out.weights.csv`.
pub fn sibling(path: &Path, tag: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

/// Shortest round-trip form (exponent notation for very large or small
/// magnitudes); non-finite values become empty cells.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

pub fn write_all(artifacts: &[Artifact]) -> Result<()> {
    for a in artifacts {
        if let Some(dir) = a.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&a.path, &a.bytes)?;
        log::info!("wrote {}", a.path.display());
    }
    Ok(())
}
