//! Output bundle: artifact files plus a manifest carrying the configuration
//! echo, the seed, a content hash over every artifact, and the wall time.
//! Artifacts are byte-deterministic for a fixed configuration and seed; the
//! manifest is the only file carrying timing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub struct OutputBundle {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    started: Instant,
}

impl OutputBundle {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_json(&mut self, name: &str, value: &serde_json::Value) {
        let mut text = serde_json::to_string_pretty(value).expect("json serialization");
        text.push('\n');
        self.add(name, text.into_bytes());
    }

    fn content_hash(&self) -> String {
        let mut sorted: Vec<&(String, Vec<u8>)> = self.files.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, bytes) in sorted {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(bytes);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes every artifact plus `manifest.json`, returning the content hash.
    pub fn write(
        self,
        config: &RunConfig,
        seed: u64,
        regime: &str,
        rules: &[&'static str],
    ) -> Result<String, CliError> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory: {e}")))?;
        for (name, bytes) in &self.files {
            fs::write(self.dir.join(name), bytes)
                .map_err(|e| CliError::Config(format!("cannot write {name}: {e}")))?;
        }
        let hash = self.content_hash();
        let manifest = serde_json::json!({
            "config": config,
            "seed": seed,
            "regime": regime,
            "validation_rules": rules,
            "content_hash": hash,
            "files": self.files.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)
            .map_err(|e| CliError::Config(format!("cannot write manifest.json: {e}")))?;
        Ok(hash)
    }
}
