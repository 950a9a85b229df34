//! Writer confined to one output directory.
//!
//! Paths are relative and may not climb out with `..`. Files are written
//! to a temporary name and renamed into place, so a crashed run never
//! leaves a half-written output behind under the final name.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;

use crate::persist::{digest_line, sha256_hex, PersistError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WrittenFile {
    /// Relative to the output directory, with `/` separators.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    digest: String,
    written: Vec<WrittenFile>,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest_digest: &'a str,
    data: &'a T,
}

impl OutputDir {
    pub fn create(root: &Path, digest: &str) -> Result<Self, PersistError> {
        fs::create_dir_all(root).map_err(|e| PersistError::io(root, e))?;
        Ok(OutputDir { root: root.to_path_buf(), digest: digest.to_string(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Files written so far, in write order.
    pub fn written(&self) -> &[WrittenFile] {
        &self.written
    }

    /// Resolves `rel` under the root, refusing anything that would land
    /// outside it.
    pub fn path(&self, rel: &str) -> Result<PathBuf, PersistError> {
        let p = Path::new(rel);
        let ok = !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
        if !ok {
            return Err(PersistError::OutsideOutput(p.to_path_buf()));
        }
        Ok(self.root.join(p))
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, PersistError> {
        let path = self.path(rel)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PersistError::io(dir, e))?;
        }
        let name = path.file_name().expect("normal final component").to_string_lossy();
        let tmp = path.with_file_name(format!(".{name}.partial"));
        fs::write(&tmp, bytes).map_err(|e| PersistError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| PersistError::io(&path, e))?;
        let entry = WrittenFile { path: rel.replace('\\', "/"), sha256: sha256_hex(bytes) };
        match self.written.iter_mut().find(|w| w.path == entry.path) {
            Some(w) => *w = entry,
            None => self.written.push(entry),
        }
        Ok(path)
    }

    /// Text file with the digest line prepended.
    pub fn write_text(&mut self, rel: &str, body: &str) -> Result<PathBuf, PersistError> {
        self.write_bytes(rel, (digest_line(&self.digest) + body).as_bytes())
    }

    /// CSV with a header row taken from the record type, preceded by the
    /// digest line and any `# key=value` comment lines.
    pub fn write_csv<T: Serialize>(&mut self, rel: &str, comments: &[(&str, String)], rows: &[T]) -> Result<PathBuf, PersistError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| PersistError::CorruptFile { what: rel.to_string(), reason: e.to_string() })?;
        }
        let bytes = w.into_inner().map_err(|e| PersistError::CorruptFile { what: rel.to_string(), reason: e.to_string() })?;
        let mut body = String::new();
        for (k, v) in comments {
            body.push_str(&format!("# {k}={v}\n"));
        }
        body.push_str(std::str::from_utf8(&bytes).expect("csv output is UTF-8"));
        self.write_text(rel, &body)
    }

    /// JSON object `{"manifest_digest": ..., "data": value}`.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, PersistError> {
        let stamped = Stamped { manifest_digest: &self.digest, data: value };
        let mut bytes = serde_json::to_vec_pretty(&stamped).expect("serializable value");
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u32,
        b: f64,
    }

    #[test]
    fn rejects_paths_that_leave_the_root() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "d").unwrap();
        for bad in ["../x", "a/../../x", "/etc/x", ""] {
            assert!(matches!(out.write_text(bad, "x"), Err(PersistError::OutsideOutput(_))), "{bad}");
        }
        assert!(out.write_text("a/b/c.txt", "x").is_ok());
        assert_eq!(fs::read_to_string(dir.path().join("a/b/c.txt")).unwrap(), "# manifest_digest=d\nx");
    }

    #[test]
    fn csv_has_digest_comments_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "d").unwrap();
        out.write_csv("t.csv", &[("seeds", "0 1".into())], &[Row { a: 1, b: 0.5 }]).unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "# manifest_digest=d\n# seeds=0 1\na,b\n1,0.5\n");
        assert_eq!(out.written().len(), 1);
        assert_eq!(out.written()[0].sha256, sha256_hex(text.as_bytes()));
    }

    #[test]
    fn rewriting_a_file_keeps_one_entry() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "d").unwrap();
        out.write_text("x", "1").unwrap();
        out.write_text("x", "2").unwrap();
        assert_eq!(out.written().len(), 1);
        assert!(!dir.path().join(".x.partial").exists());
    }
}
