//! Result envelopes and tabular output.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Config keys that never influence results and so stay out of the digest.
pub const DIGEST_EXCLUDED: [&str; 3] = ["workers", "out", "output"];

/// SHA-256 of the config's canonical JSON (sorted keys, no whitespace),
/// ignoring the top-level keys in [`DIGEST_EXCLUDED`].
pub fn config_digest(config: &Value) -> String {
    let mut v = config.clone();
    if let Value::Object(map) = &mut v {
        for k in DIGEST_EXCLUDED {
            map.remove(k);
        }
    }
    // serde_json's default map is ordered, so this text is canonical
    let text = serde_json::to_string(&v).expect("a JSON value always serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, Serialize)]
pub struct Envelope<T: Serialize> {
    pub schema_version: u32,
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub pass: bool,
    pub result: T,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(command: &str, config: &Value, seed: u64, pass: bool, result: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_digest: config_digest(config),
            seed,
            pass,
            result,
            generated_at: None,
        }
    }

    pub fn stamped(mut self) -> Self {
        self.generated_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes a header and rows with standard CSV quoting.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Formats a point as `a;b;c` so it fits in one CSV cell.
pub fn point_cell(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}
