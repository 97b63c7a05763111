//! Run directories, the artifact manifest and CSV helpers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub producer: String,
    pub sha256: String,
    pub bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let text = read_artifact(dir, MANIFEST)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{MANIFEST}: {e}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

/// Output directory that records every file it writes.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Starts a fresh manifest in `path`, creating the directory if needed.
    pub fn create(path: &Path, config_hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest: Manifest {
                config_hash,
                artifacts: Vec::new(),
            },
        })
    }

    /// Continues the manifest of an existing run.
    pub fn open(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.to_path_buf(),
            manifest: Manifest::load(path)?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, producer: &str, seed: Option<u64>, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.path.join(name), bytes)?;
        let entry = ArtifactEntry {
            name: name.to_string(),
            producer: producer.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
            seed,
        };
        let list = &mut self.manifest.artifacts;
        match list.iter_mut().find(|a| a.name == name) {
            Some(slot) => *slot = entry,
            None => list.push(entry),
        }
        Ok(())
    }

    /// Writes the manifest with artifacts sorted by name.
    pub fn finish(mut self) -> Result<Manifest, CliError> {
        self.manifest.artifacts.sort_by(|a, b| a.name.cmp(&b.name));
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(self.path.join(MANIFEST), text)?;
        Ok(self.manifest)
    }
}

pub fn read_artifact(dir: &Path, name: &str) -> Result<String, CliError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(CliError::MissingArtifact(path));
    }
    Ok(fs::read_to_string(path)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text.into_bytes()
}

/// Comma-joined row; `Display` on `f64` is the shortest exact round-trip form.
pub fn csv_row<I: IntoIterator<Item = f64>>(lead: f64, values: I) -> String {
    let mut row = lead.to_string();
    for v in values {
        row.push(',');
        row.push_str(&v.to_string());
    }
    row.push('\n');
    row
}

/// Parses a numeric table with a header line, dropping the leading time column.
pub fn parse_table(text: &str, source: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| CliError::Config(format!("{source}, line {}: {e}", i + 1)))?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(CliError::Config(format!("{source}, line {}: ragged row", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_exactly() {
        let values = [0.1, -1.0 / 3.0, 1e-300, 123456.789];
        let line = csv_row(0.5, values);
        let parsed = parse_table(&format!("t,a,b,c,d\n{line}"), "table").unwrap();
        assert_eq!(parsed, vec![values.to_vec()]);
    }

    #[test]
    fn bad_cells_report_line() {
        let err = parse_table("t,a\n0,1\n0.01,x\n", "controls.csv").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn manifest_replaces_entries() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), "abc".into()).unwrap();
        run.write("b.csv", "optimize", None, b"1").unwrap();
        run.write("a.csv", "optimize", None, b"2").unwrap();
        run.finish().unwrap();
        let mut run = RunDir::open(dir.path()).unwrap();
        run.write("b.csv", "validate", Some(7), b"333").unwrap();
        let m = run.finish().unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert_eq!(m.artifacts[0].name, "a.csv");
        let b = m.entry("b.csv").unwrap();
        assert_eq!((b.bytes, b.seed, b.producer.as_str()), (3, Some(7), "validate"));
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn missing_artifact_has_exit_code_four() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_artifact(dir.path(), "controls.csv").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
