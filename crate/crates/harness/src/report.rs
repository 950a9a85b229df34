//! Run reports: what a command produced, how long it took and what to
//! look at. Wall-clock time lives only here, so every other output is
//! reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::output::{OutputDir, WrittenFile};
use crate::persist::{embedded_digest, sha256_hex, PersistError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<serde_json::Value>>,
}

impl MetricTable {
    pub fn new(columns: &[&str]) -> Self {
        MetricTable { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<serde_json::Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

impl From<&WrittenFile> for FileEntry {
    fn from(w: &WrittenFile) -> Self {
        FileEntry { path: w.path.clone(), sha256: w.sha256.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub kind: String,
    pub manifest_digest: String,
    pub wall_clock_seconds: f64,
    pub tables: BTreeMap<String, MetricTable>,
    pub warnings: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl RunReport {
    pub fn new(command: &str, kind: &str, digest: &str) -> Self {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            kind: kind.to_string(),
            manifest_digest: digest.to_string(),
            wall_clock_seconds: 0.0,
            tables: BTreeMap::new(),
            warnings: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("run_report_{command}.json")
    }

    /// Records the files written so far and saves the report next to them.
    pub fn finish(mut self, out: &mut OutputDir) -> Result<RunReport, PersistError> {
        self.files = out.written().iter().map(FileEntry::from).collect();
        let mut bytes = serde_json::to_vec_pretty(&self).expect("report serializes");
        bytes.push(b'\n');
        let path = out.path(&Self::file_name(&self.command))?;
        fs::write(&path, bytes).map_err(|e| PersistError::io(&path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<RunReport, PersistError> {
        let bytes = fs::read(path).map_err(|e| PersistError::io(path, e))?;
        let what = format!("report {}", path.display());
        let v: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| PersistError::CorruptFile { what: what.clone(), reason: e.to_string() })?;
        let version = v.get("schema_version").and_then(|s| s.as_u64());
        if version != Some(REPORT_SCHEMA_VERSION as u64) {
            let found = version.map_or("missing".to_string(), |n| n.to_string());
            return Err(PersistError::SchemaVersionMismatch { what, found, expected: REPORT_SCHEMA_VERSION.to_string() });
        }
        serde_json::from_value(v).map_err(|e| PersistError::CorruptFile { what, reason: e.to_string() })
    }

    /// Checks that every listed file exists under `root`, has the recorded
    /// hash and carries this report's manifest digest. Returns one message
    /// per problem.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for f in &self.files {
            let path = root.join(&f.path);
            match fs::read(&path) {
                Err(e) => problems.push(format!("{}: {e}", f.path)),
                Ok(bytes) => {
                    if sha256_hex(&bytes) != f.sha256 {
                        problems.push(format!("{}: content differs from the recorded hash", f.path));
                    }
                    match embedded_digest(&path) {
                        Ok(Some(d)) if d == self.manifest_digest => {}
                        Ok(Some(d)) => problems.push(format!("{}: carries digest {d}", f.path)),
                        Ok(None) => problems.push(format!("{}: no manifest digest", f.path)),
                        Err(e) => problems.push(format!("{}: {e}", f.path)),
                    }
                }
            }
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "abc").unwrap();
        out.write_text("a.txt", "hello\n").unwrap();
        out.write_json("b.json", &vec![1, 2]).unwrap();
        let mut r = RunReport::new("simulate", "trace-gen", "abc");
        let mut t = MetricTable::new(&["x"]);
        t.push(vec![1.5.into()]);
        r.tables.insert("t".into(), t);
        let r = r.finish(&mut out).unwrap();
        let back = RunReport::load(&dir.path().join("run_report_simulate.json")).unwrap();
        assert_eq!(back, r);
        assert!(back.verify(dir.path()).is_empty());
        fs::write(dir.path().join("a.txt"), "# manifest_digest=abc\nhellO\n").unwrap();
        assert_eq!(back.verify(dir.path()).len(), 1);
    }

    #[test]
    fn other_report_versions_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        fs::write(&p, r#"{"schema_version": 9}"#).unwrap();
        assert!(matches!(RunReport::load(&p), Err(PersistError::SchemaVersionMismatch { .. })));
        fs::write(&p, r#"{"schema_version": 1, "command": "x"}"#).unwrap();
        assert!(matches!(RunReport::load(&p), Err(PersistError::CorruptFile { .. })));
    }
}
