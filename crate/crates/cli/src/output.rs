//! Output writers: fingerprinted CSV and JSON files.
//!
//! Every output file carries the configuration fingerprint. Re-running into
//! the same directory with a different configuration refuses to overwrite
//! the mismatched file unless `--force` is given.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// FNV-1a over the canonical (sorted-key) JSON encoding of the config.
pub fn fingerprint(config: &impl Serialize) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&value)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{hash:016x}"))
}

pub struct OutputDir {
    dir: PathBuf,
    fingerprint: String,
    force: bool,
}

impl OutputDir {
    pub fn new(dir: impl Into<PathBuf>, fingerprint: String, force: bool) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutputDir {
            dir,
            fingerprint,
            force,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if self.force || !path.exists() {
            return Ok(());
        }
        let existing = read_fingerprint(path)?;
        match existing {
            Some(fp) if fp != self.fingerprint => bail!(
                "{} was written by a different configuration (fingerprint {fp} != {}); \
                 use --force to overwrite",
                path.display(),
                self.fingerprint
            ),
            _ => Ok(()),
        }
    }

    /// Write a CSV with a leading `# config_fingerprint=...` comment line.
    pub fn write_csv<R>(
        &self,
        name: &str,
        headers: &[&str],
        rows: impl IntoIterator<Item = R>,
    ) -> Result<PathBuf>
    where
        R: IntoIterator<Item = String>,
    {
        let path = self.path(name);
        self.guard(&path)?;
        let mut file = fs::File::create(&path)?;
        writeln!(file, "# config_fingerprint={}", self.fingerprint)?;
        let mut wtr = csv::Writer::from_writer(file);
        wtr.write_record(headers)?;
        for row in rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(path)
    }

    /// Write pretty JSON with an injected `config_fingerprint` field.
    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.path(name);
        self.guard(&path)?;
        let mut value = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert(
                "config_fingerprint".into(),
                serde_json::Value::String(self.fingerprint.clone()),
            );
        } else {
            value = serde_json::json!({
                "config_fingerprint": self.fingerprint,
                "value": value,
            });
        }
        let text = serde_json::to_string_pretty(&value)?;
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Extract the fingerprint recorded in an existing output file.
pub fn read_fingerprint(path: &Path) -> Result<Option<String>> {
    let file = fs::File::open(path)?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    if let Some(rest) = first.trim().strip_prefix("# config_fingerprint=") {
        return Ok(Some(rest.to_string()));
    }
    // JSON outputs carry the fingerprint as a field.
    let text = fs::read_to_string(path)?;
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&text) {
        if let Some(serde_json::Value::String(fp)) = map.get("config_fingerprint") {
            return Ok(Some(fp.clone()));
        }
    }
    Ok(None)
}

/// Format a float so CSV output round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        let mut buf = ryu_like(x);
        if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") {
            buf.push_str(".0");
        }
        buf
    } else {
        x.to_string()
    }
}

fn ryu_like(x: f64) -> String {
    // f64::to_string uses the shortest round-trip representation.
    x.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_stable_and_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x": 1, "y": [1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y": [1,2], "x": 1}"#).unwrap();
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        let c: serde_json::Value = serde_json::from_str(r#"{"x": 2, "y": [1,2]}"#).unwrap();
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&c).unwrap());
    }

    #[test]
    fn guard_refuses_mismatched_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let out1 = OutputDir::new(dir.path(), "aaaa".into(), false).unwrap();
        out1.write_csv("t.csv", &["a"], vec![vec!["1".to_string()]])
            .unwrap();
        let out2 = OutputDir::new(dir.path(), "bbbb".into(), false).unwrap();
        assert!(out2
            .write_csv("t.csv", &["a"], vec![vec!["2".to_string()]])
            .is_err());
        let forced = OutputDir::new(dir.path(), "bbbb".into(), true).unwrap();
        forced
            .write_csv("t.csv", &["a"], vec![vec!["2".to_string()]])
            .unwrap();
    }

    #[test]
    fn json_outputs_carry_the_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::new(dir.path(), "cafe".into(), false).unwrap();
        let path = out
            .write_json("r.json", &serde_json::json!({"k": 1}))
            .unwrap();
        assert_eq!(read_fingerprint(&path).unwrap(), Some("cafe".into()));
    }
}
