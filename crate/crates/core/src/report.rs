//! Report bundles: plot-ready CSV tables and JSON grids.
//!
//! Every emitted file starts with (or embeds) the generating config hash
//! and seed, and the bundle closes with a manifest listing content
//! hashes, so reruns can be compared byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable float formatting for tables.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    written: BTreeMap<String, String>, // file name -> content hash
}

impl ReportBundle {
    pub fn create(dir: &Path, config_hash: &str, seed: u64) -> Result<ReportBundle> {
        fs::create_dir_all(dir)?;
        Ok(ReportBundle {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            seed,
            written: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Write a CSV table: a provenance comment line, a header, rows.
    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<PathBuf> {
        let mut out = String::new();
        out.push_str(&format!("# config={} seed={}\n", self.config_hash, self.seed));
        out.push_str(&header.join(","));
        out.push('\n');
        for row in rows {
            debug_assert_eq!(row.len(), header.len(), "ragged row in {name}");
            out.push_str(&row.join(","));
            out.push('\n');
        }
        self.write_file(&format!("{name}.csv"), out.as_bytes())
    }

    /// Write a JSON grid with provenance fields injected at the top level.
    pub fn write_json(&mut self, name: &str, value: serde_json::Value) -> Result<PathBuf> {
        let wrapped = serde_json::json!({
            "config": self.config_hash,
            "seed": self.seed,
            "data": value,
        });
        let mut text = serde_json::to_string_pretty(&wrapped)?;
        text.push('\n');
        self.write_file(&format!("{name}.json"), text.as_bytes())
    }

    fn write_file(&mut self, file_name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(file_name);
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        self.written.insert(file_name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Close the bundle: write manifest.json with per-file hashes and a
    /// bundle hash over them.
    pub fn finish(mut self) -> Result<(PathBuf, String)> {
        let mut concat = String::new();
        for (name, hash) in &self.written {
            concat.push_str(name);
            concat.push(':');
            concat.push_str(hash);
            concat.push('\n');
        }
        let bundle_hash = sha256_hex(concat.as_bytes());
        let manifest = serde_json::json!({
            "config": self.config_hash,
            "seed": self.seed,
            "bundle_hash": bundle_hash,
            "files": self.written,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text)?;
        let _ = &mut self.written;
        Ok((path, bundle_hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_content_gives_identical_bundle_hash() {
        let make = |dir: &Path| -> String {
            let mut b = ReportBundle::create(dir, "abc123", 7).unwrap();
            b.write_csv(
                "t",
                &["a", "b"],
                &[vec!["1".into(), fmt_f64(0.5)], vec!["2".into(), fmt_f64(1.0 / 3.0)]],
            )
            .unwrap();
            b.write_json("g", serde_json::json!({"rows": [1, 2, 3]})).unwrap();
            b.finish().unwrap().1
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(make(d1.path()), make(d2.path()));
        // And the files themselves are byte-identical.
        let a = std::fs::read(d1.path().join("t.csv")).unwrap();
        let b = std::fs::read(d2.path().join("t.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_carries_provenance_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ReportBundle::create(dir.path(), "deadbeef", 3).unwrap();
        let path = b.write_csv("x", &["c"], &[vec!["9".into()]]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("# config=deadbeef seed=3\n"));
    }
}
