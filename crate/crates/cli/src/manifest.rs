//! Run manifests and the output files that carry their hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nce_core::Result;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Argument fields holding file paths. Their contents enter the hash through
/// `inputs`, so a run moved to another directory keeps its hash.
const PATH_FIELDS: [&str; 4] = ["out", "problem", "dataset", "corpus"];

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Value,
    pub seed: Option<u64>,
    /// SHA-256 of each input file, keyed by its argument name.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub version: String,
    /// Hash over everything above except outputs and wall-clock.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects a run's identity and the files it writes.
pub struct Run {
    command: String,
    args: Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    out: PathBuf,
    outputs: Vec<String>,
    started: Instant,
    hash: Option<String>,
}

impl Run {
    pub fn new(command: &str, args: Value, out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let seed = args.get("seed").and_then(Value::as_u64);
        Ok(Self {
            command: command.to_string(),
            args,
            seed,
            inputs: BTreeMap::new(),
            out: out.to_path_buf(),
            outputs: Vec::new(),
            started: Instant::now(),
            hash: None,
        })
    }

    /// Reads an input file and records its hash.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        assert!(self.hash.is_none(), "inputs are recorded before the first output");
        let bytes = fs::read(path)?;
        self.inputs.insert(role.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Records an input that is not a file, such as a bundled corpus.
    pub fn record_input(&mut self, role: &str, bytes: &[u8]) {
        assert!(self.hash.is_none(), "inputs are recorded before the first output");
        self.inputs.insert(role.to_string(), sha256_hex(bytes));
    }

    pub fn hash(&mut self) -> String {
        if let Some(h) = &self.hash {
            return h.clone();
        }
        let mut args = self.args.clone();
        if let Some(map) = args.as_object_mut() {
            for f in PATH_FIELDS {
                map.remove(f);
            }
        }
        let identity = serde_json::json!({
            "command": self.command,
            "args": args,
            "seed": self.seed,
            "inputs": self.inputs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let h = sha256_hex(identity.to_string().as_bytes());
        self.hash = Some(h.clone());
        h
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `header` and `rows` after a `# manifest: <hash>` line.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf> {
        let mut text = format!("# manifest: {}\n{header}\n", self.hash());
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    /// Writes a JSON object with a leading `manifest` field.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        let body = match v.as_object_mut() {
            Some(map) => {
                let mut out = serde_json::Map::new();
                out.insert("manifest".into(), Value::String(self.hash()));
                out.append(map);
                Value::Object(out)
            }
            None => serde_json::json!({ "manifest": self.hash(), "value": v }),
        };
        let mut text = serde_json::to_string_pretty(&body)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes a file verbatim, for formats defined elsewhere.
    pub fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.hash();
        self.write(name, bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    /// Writes `manifest.json` and returns the manifest.
    pub fn finish(mut self) -> Result<RunManifest> {
        let hash = self.hash();
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            hash,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.out.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_paths_but_not_contents() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let input = a.path().join("p.json");
        fs::write(&input, b"{}").unwrap();
        let args = |out: &Path| serde_json::json!({"seed": 3, "n": 10, "out": out, "problem": input});
        let mut r1 = Run::new("fit", args(a.path()), a.path()).unwrap();
        r1.read_input("problem", &input).unwrap();
        let mut r2 = Run::new("fit", args(b.path()), b.path()).unwrap();
        r2.read_input("problem", &input).unwrap();
        assert_eq!(r1.hash(), r2.hash());
        let mut r3 = Run::new("fit", args(b.path()), b.path()).unwrap();
        r3.record_input("problem", b"[]");
        assert_ne!(r1.hash(), r3.hash());
    }

    #[test]
    fn csv_starts_with_manifest_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new("synth", serde_json::json!({"seed": 1}), dir.path()).unwrap();
        let path = run.write_csv("x.csv", "a,b", &["1,2".into()]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let hash = run.hash();
        assert_eq!(text, format!("# manifest: {hash}\na,b\n1,2\n"));
        let m = run.finish().unwrap();
        assert_eq!(m.outputs, vec!["x.csv"]);
        assert_eq!(m.seed, Some(1));
    }
}
