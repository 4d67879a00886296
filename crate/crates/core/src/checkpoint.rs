//! Versioned text checkpoint for policy parameters.
//!
//! Layout, one item per line:
//!
//! ```text
//! DASD-CHECKPOINT
//! {"format_version":1, "vocab":{..}, "window":3, "step":..., "rng":{..}, "rows":[..]}
//! sha256:<hex digest of the JSON line>
//! ```
//!
//! Floats are written with round-trip precision so a load reproduces every
//! logit bit for bit. A missing magic line, a digest mismatch or malformed
//! JSON are reported as corruption; an unknown `format_version` as a
//! version mismatch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{ContextKey, PolicyParams, Token};

pub const MAGIC: &str = "DASD-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// Vocabulary description stored alongside the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabDescription {
    pub size: usize,
    pub bos: u8,
    pub eos: u8,
    /// Human-readable token names, index-aligned.
    pub names: Vec<String>,
}

/// Position of the training stream: every draw after `next_update` is a
/// pure function of `master_seed` and the update index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_update: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub params: PolicyParams,
    pub names: Vec<String>,
    pub rng: RngState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    w: Vec<u8>,
    p: Option<u8>,
    z: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Body {
    format_version: u32,
    vocab: VocabDescription,
    window: usize,
    step: u64,
    rng: RngState,
    rows: Vec<Row>,
}

impl PolicyCheckpoint {
    pub fn new(params: PolicyParams, names: Vec<String>, rng: RngState, step: u64) -> Self {
        Self {
            params,
            names,
            rng,
            step,
        }
    }

    /// Serializes to the textual container.
    pub fn to_text(&self) -> Result<String> {
        let p = &self.params;
        let body = Body {
            format_version: FORMAT_VERSION,
            vocab: VocabDescription {
                size: p.vocab_size(),
                bos: p.bos().0,
                eos: p.eos().0,
                names: self.names.clone(),
            },
            window: p.window(),
            step: self.step,
            rng: self.rng,
            rows: p
                .rows()
                .iter()
                .map(|(k, z)| Row {
                    w: k.window().to_vec(),
                    p: k.privileged().map(|t| t.0),
                    z: z.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&body).map_err(|e| Error::Serde(e.to_string()))?;
        let digest = hex::encode(Sha256::digest(json.as_bytes()));
        Ok(format!("{MAGIC}\n{json}\nsha256:{digest}\n"))
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("missing checkpoint header"));
        }
        let json = lines.next().ok_or_else(|| corrupt("missing body"))?;
        let digest_line = lines.next().ok_or_else(|| corrupt("missing digest"))?;
        if lines.any(|l| !l.is_empty()) {
            return Err(corrupt("trailing content"));
        }
        let expected = digest_line
            .strip_prefix("sha256:")
            .ok_or_else(|| corrupt("malformed digest line"))?;
        if hex::encode(Sha256::digest(json.as_bytes())) != expected {
            return Err(corrupt("digest mismatch"));
        }
        let value: serde_json::Value = serde_json::from_str(json).map_err(|e| corrupt(&e.to_string()))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::VersionMismatch {
                found: version.map_or_else(|| "none".to_string(), |v| v.to_string()),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let body: Body = serde_json::from_value(value).map_err(|e| corrupt(&e.to_string()))?;
        let mut params = PolicyParams::with_specials(
            body.vocab.size,
            body.window,
            Token(body.vocab.bos),
            Token(body.vocab.eos),
        )
        .map_err(|e| corrupt(&e.to_string()))?;
        for row in body.rows {
            if row.w.len() != body.window {
                return Err(corrupt("row window length differs from header"));
            }
            if row.w.iter().chain(row.p.iter()).any(|&t| t as usize >= body.vocab.size) {
                return Err(corrupt("row references a token outside the vocabulary"));
            }
            let key = ContextKey::from_parts(&row.w, row.p)?;
            params.set_row(key, row.z).map_err(|e| corrupt(&e.to_string()))?;
        }
        Ok(Self {
            params,
            names: body.vocab.names,
            rng: body.rng,
            step: body.step,
        })
    }

    /// SHA-256 of the serialized checkpoint, handy for equality checks.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_text()?.as_bytes())))
    }
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(checkpoint: &PolicyCheckpoint, path: &Path) -> Result<()> {
    let text = checkpoint.to_text()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PolicyCheckpoint::from_text(&text, path)
}
