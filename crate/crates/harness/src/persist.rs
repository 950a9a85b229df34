//! File formats owned by the harness and loaders for everything it writes.
//!
//! Text outputs start with a `# manifest_digest=<hex>` line. Loaders either
//! return a complete value or an error; nothing is half-read.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nettwin_core::msgcodec::{dataset_from_text, dataset_to_text, MessageDataset, PolicyDataset, StateActionSample};
use nettwin_core::nncore::{Checkpoint, NnError};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DIGEST_PREFIX: &str = "# manifest_digest=";
pub const POLICY_DATASET_HEADER: &str = "# policy-dataset v1";
/// Checkpoint metadata key holding the manifest digest.
pub const DIGEST_KEY: &str = "manifest_digest";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{what}: schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { what: String, found: String, expected: String },
    #[error("corrupt {what}: {reason}")]
    CorruptFile { what: String, reason: String },
    #[error("{0} is outside the output directory")]
    OutsideOutput(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl PersistError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        PersistError::Io { path: path.to_path_buf(), source }
    }

    fn corrupt(what: &str, reason: impl Into<String>) -> Self {
        PersistError::CorruptFile { what: what.to_string(), reason: reason.into() }
    }
}

fn from_nn(path: &Path, e: NnError) -> PersistError {
    let what = format!("checkpoint {}", path.display());
    match e {
        NnError::SchemaVersionMismatch { found, expected } => {
            PersistError::SchemaVersionMismatch { what, found: found.to_string(), expected: expected.to_string() }
        }
        NnError::Io(e) => PersistError::io(path, e),
        other => PersistError::CorruptFile { what, reason: other.to_string() },
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_line(digest: &str) -> String {
    format!("{DIGEST_PREFIX}{digest}\n")
}

/// Splits off a leading digest line, returning the digest and the rest.
pub fn split_digest(text: &str) -> (Option<&str>, &str) {
    match text.strip_prefix(DIGEST_PREFIX) {
        Some(rest) => {
            let (d, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (Some(d.trim_end_matches('\r')), body)
        }
        None => (None, text),
    }
}

fn read_text(path: &Path) -> Result<String, PersistError> {
    fs::read_to_string(path).map_err(|e| PersistError::io(path, e))
}

pub fn message_dataset_text(ds: &MessageDataset) -> String {
    dataset_to_text(ds)
}

pub fn parse_message_dataset(text: &str) -> Result<(MessageDataset, Option<String>), PersistError> {
    let (digest, body) = split_digest(text);
    if !body.starts_with("# message-dataset ") {
        return Err(PersistError::corrupt("message dataset", "missing header"));
    }
    if !body.starts_with("# message-dataset v1 ") {
        let found = body.split_whitespace().nth(2).unwrap_or("?").to_string();
        return Err(PersistError::SchemaVersionMismatch { what: "message dataset".into(), found, expected: "v1".into() });
    }
    let ds = dataset_from_text(body).map_err(|e| PersistError::corrupt("message dataset", e.to_string()))?;
    Ok((ds, digest.map(str::to_string)))
}

pub fn load_message_dataset(path: &Path) -> Result<(MessageDataset, Option<String>), PersistError> {
    parse_message_dataset(&read_text(path)?)
}

/// Header `# policy-dataset v1 samples=<n> state_dim=<d> unrepresentable=<u>`,
/// then one sample per line: action id, a tab, space-separated state
/// features. Features print in Rust's shortest round-trip form, so loading
/// restores them exactly.
pub fn policy_dataset_text(ds: &PolicyDataset) -> String {
    let dim = ds.samples.first().map_or(0, |s| s.state_vec.len());
    let mut out = format!(
        "{POLICY_DATASET_HEADER} samples={} state_dim={dim} unrepresentable={}\n",
        ds.samples.len(),
        ds.unrepresentable
    );
    for s in &ds.samples {
        out.push_str(&s.action_id.to_string());
        out.push('\t');
        let feats: Vec<String> = s.state_vec.iter().map(|v| v.to_string()).collect();
        out.push_str(&feats.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_policy_dataset(text: &str) -> Result<(PolicyDataset, Option<String>), PersistError> {
    const WHAT: &str = "policy dataset";
    let (digest, body) = split_digest(text);
    let mut lines = body.lines();
    let header = lines.next().ok_or_else(|| PersistError::corrupt(WHAT, "empty file"))?;
    let Some(fields) = header.strip_prefix("# policy-dataset ") else {
        return Err(PersistError::corrupt(WHAT, "missing header"));
    };
    let mut fields = fields.split_whitespace();
    let version = fields.next().unwrap_or("");
    if version != "v1" {
        return Err(PersistError::SchemaVersionMismatch { what: WHAT.into(), found: version.into(), expected: "v1".into() });
    }
    let (mut n, mut dim, mut unrepresentable) = (None, None, None);
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| PersistError::corrupt(WHAT, format!("bad header field {f}")))?;
        let v: usize = v.parse().map_err(|_| PersistError::corrupt(WHAT, format!("bad header field {f}")))?;
        match k {
            "samples" => n = Some(v),
            "state_dim" => dim = Some(v),
            "unrepresentable" => unrepresentable = Some(v),
            _ => return Err(PersistError::corrupt(WHAT, format!("unknown header field {k}"))),
        }
    }
    let (Some(n), Some(dim), Some(unrepresentable)) = (n, dim, unrepresentable) else {
        return Err(PersistError::corrupt(WHAT, "incomplete header"));
    };
    let mut samples = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let bad = |r: &str| PersistError::corrupt(WHAT, format!("line {}: {r}", i + 2));
        let (a, feats) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let action_id = a.parse().map_err(|_| bad("bad action id"))?;
        let state_vec = feats.split(' ').map(|t| t.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad feature"))?;
        if state_vec.len() != dim {
            return Err(bad("wrong feature count"));
        }
        samples.push(StateActionSample { state_vec, action_id });
    }
    if samples.len() != n {
        return Err(PersistError::corrupt(WHAT, format!("header promises {n} samples, file has {}", samples.len())));
    }
    Ok((PolicyDataset { samples, unrepresentable }, digest.map(str::to_string)))
}

pub fn load_policy_dataset(path: &Path) -> Result<(PolicyDataset, Option<String>), PersistError> {
    parse_policy_dataset(&read_text(path)?)
}

/// Checkpoint bytes with the manifest digest added to the metadata.
pub fn stamped_checkpoint(mut ckpt: Checkpoint, digest: &str) -> Vec<u8> {
    ckpt.metadata.insert(DIGEST_KEY.to_string(), digest.to_string());
    ckpt.to_bytes()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PersistError> {
    let bytes = fs::read(path).map_err(|e| PersistError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| from_nn(path, e))
}

/// Digest a written file carries, whatever its format.
pub fn embedded_digest(path: &Path) -> Result<Option<String>, PersistError> {
    let bytes = fs::read(path).map_err(|e| PersistError::io(path, e))?;
    if bytes.starts_with(nettwin_core::nncore::checkpoint::MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| from_nn(path, e))?;
        return Ok(ckpt.metadata.get(DIGEST_KEY).cloned());
    }
    let text = String::from_utf8_lossy(&bytes);
    if let (Some(d), _) = split_digest(&text) {
        return Ok(Some(d.to_string()));
    }
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| PersistError::corrupt(&path.display().to_string(), e.to_string()))?;
        return Ok(v.get(DIGEST_KEY).and_then(|d| d.as_str()).map(str::to_string));
    }
    Ok(None)
}
