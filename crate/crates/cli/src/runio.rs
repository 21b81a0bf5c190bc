//! Run directories, manifests, config digests, and small CSV helpers.
//!
//! Every run that targets an output directory writes exactly one `run.json`
//! manifest plus `config.json`, the effective configuration; replaying a run
//! with `--config config.json` reproduces the outputs byte for byte (wall
//! time excluded).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ardiff_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA: &str = "ardiff/1";

#[derive(Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema: String,
    pub command: String,
    pub seed: u64,
    pub params: Value,
}

/// Content hash of a JSON value. serde_json maps are ordered (BTreeMap), so
/// the digest is stable under key reordering of the source document.
pub fn digest_value(v: &Value) -> String {
    let canonical = serde_json::to_string(v).expect("json");
    let d = Sha256::digest(canonical.as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolve the effective (params, seed): either the command-line values or,
/// when `--config` is given, the stored run configuration.
pub fn effective_params<P: Serialize + DeserializeOwned + Clone>(
    config: Option<&PathBuf>,
    command: &str,
    cli_params: &P,
    cli_seed: u64,
) -> Result<(P, u64, Value)> {
    let (params, seed) = match config {
        None => (cli_params.clone(), cli_seed),
        Some(path) => {
            let raw = fs::read_to_string(path)?;
            let file: ConfigFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
                what: "config file",
                why: e.to_string(),
            })?;
            if file.schema != SCHEMA {
                return Err(Error::Parse {
                    what: "config file",
                    why: format!("schema {} (expected {SCHEMA})", file.schema),
                });
            }
            if file.command != command {
                return Err(Error::Parse {
                    what: "config file",
                    why: format!("command {} does not match {command}", file.command),
                });
            }
            let params = serde_json::from_value(file.params).map_err(|e| Error::Parse {
                what: "config params",
                why: e.to_string(),
            })?;
            (params, file.seed)
        }
    };
    let value = serde_json::json!({
        "schema": SCHEMA,
        "command": command,
        "seed": seed,
        "params": serde_json::to_value(&params).expect("params"),
    });
    Ok((params, seed, value))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    schema: &'a str,
    command: &'a str,
    config_digest: &'a str,
    seed: u64,
    version: &'a str,
    wall_time_ms: u128,
    outputs: &'a [String],
    #[serde(skip_serializing_if = "Value::is_null")]
    extra: Value,
}

/// Collects outputs for one run and writes the manifest on `finish`.
pub struct RunContext {
    pub out_dir: Option<PathBuf>,
    command: String,
    config: Value,
    digest: String,
    seed: u64,
    started: Instant,
    outputs: Vec<String>,
    extra: Value,
}

impl RunContext {
    pub fn new(out_dir: Option<PathBuf>, command: &str, config: Value, seed: u64) -> Result<Self> {
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir)?;
        }
        let digest = digest_value(&config);
        Ok(Self {
            out_dir,
            command: command.to_string(),
            config,
            digest,
            seed,
            started: Instant::now(),
            outputs: Vec::new(),
            extra: Value::Null,
        })
    }

    pub fn set_extra(&mut self, extra: Value) {
        self.extra = extra;
    }

    /// Write a file into the run directory (no-op path if the run has no
    /// directory: the caller prints to stdout instead).
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            None => Ok(None),
            Some(dir) => {
                let path = dir.join(name);
                fs::write(&path, bytes)?;
                self.outputs.push(name.to_string());
                Ok(Some(path))
            }
        }
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<Option<PathBuf>> {
        let body = serde_json::to_string_pretty(value).expect("json");
        self.write_bytes(name, body.as_bytes())
    }

    /// Write `config.json` and `run.json`; call once, at the end.
    pub fn finish(mut self) -> Result<()> {
        if self.out_dir.is_none() {
            return Ok(());
        }
        let config = serde_json::to_string_pretty(&self.config).expect("json");
        self.write_bytes("config.json", config.as_bytes())?;
        let manifest = RunManifest {
            schema: SCHEMA,
            command: &self.command,
            config_digest: &self.digest,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            wall_time_ms: self.started.elapsed().as_millis(),
            outputs: &self.outputs,
            extra: self.extra.clone(),
        };
        let body = serde_json::to_string_pretty(&manifest).expect("json");
        let dir = self.out_dir.as_ref().expect("checked");
        fs::write(dir.join("run.json"), body)?;
        Ok(())
    }
}

/// CSV with comma separator, '.' decimal point, LF line endings, header row.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            buf: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn row_f64(&mut self, fields: &[f64]) {
        let cells: Vec<String> = fields.iter().map(|v| format!("{v}")).collect();
        self.row(&cells);
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}

/// Read a two-or-more-column CSV with a header, returning the named column.
pub fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw.lines();
    let header = lines.next().ok_or(Error::Parse {
        what: "csv",
        why: "empty file".into(),
    })?;
    let idx = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| Error::Parse {
            what: "csv",
            why: format!("no column {column} in {header}"),
        })?;
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(idx)
                .ok_or(Error::Parse {
                    what: "csv",
                    why: "short row".into(),
                })?
                .parse()
                .map_err(|e| Error::Parse {
                    what: "csv",
                    why: format!("{e}"),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_under_key_reordering() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": 3}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": 3, "y": 2}, "b": 1}"#).unwrap();
        assert_eq!(digest_value(&a), digest_value(&b));
        let c: Value = serde_json::from_str(r#"{"a": {"x": 3, "y": 2}, "b": 2}"#).unwrap();
        assert_ne!(digest_value(&a), digest_value(&c));
    }
}
