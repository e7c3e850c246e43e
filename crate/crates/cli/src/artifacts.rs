//! Output directory handling. Every CSV row and every JSON document carries
//! the config hash and master seed; wall-clock times go to the manifest only.

use crate::Failure;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub struct Artifacts {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    written: Vec<String>,
    started: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Artifacts {
    pub fn create(dir: &Path, config_hash: String, seed: u64) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| {
            Failure::config(anyhow::anyhow!("cannot create output directory {}: {e}", dir.display()))
        })?;
        Ok(Artifacts { dir: dir.to_path_buf(), config_hash, seed, written: Vec::new(), started: unix_now() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| Failure::config(anyhow::anyhow!("cannot write {}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Appends `config_hash,seed` columns to a CSV with a header row.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<(), Failure> {
        let mut out = String::with_capacity(body.len() + 80 * body.lines().count());
        for (i, line) in body.lines().enumerate() {
            out.push_str(line);
            if i == 0 {
                out.push_str(",config_hash,seed\n");
            } else {
                out.push_str(&format!(",{},{}\n", self.config_hash, self.seed));
            }
        }
        self.write(name, &out)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let mut doc = json!({ "config_hash": self.config_hash, "seed": self.seed });
        doc["content"] = serde_json::to_value(value).map_err(|e| Failure::config(e.into()))?;
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::config(e.into()))?;
        self.write(name, &(text + "\n"))
    }

    /// Writes the run manifest. The only file with timestamps.
    pub fn finish(mut self, command: &str, config: Value, exit_code: u8) -> Result<(), Failure> {
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": config,
            "exit_code": exit_code,
            "artifacts": self.written,
            "started_unix": self.started,
            "finished_unix": unix_now(),
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::config(e.into()))?;
        self.write("manifest.json", &(text + "\n"))
    }
}
