use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Contents of `run.json`.
#[derive(Debug, Serialize)]
pub struct Provenance {
    command: String,
    args: Vec<String>,
    /// SHA-256 of the effective configuration as compact JSON.
    config_sha256: Option<String>,
    config: Option<serde_json::Value>,
    seed: Option<u64>,
    versions: Versions,
    started_unix_s: u64,
    wall_time_s: f64,
    status: &'static str,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Versions {
    ugss: &'static str,
    ugss_cli: &'static str,
}

impl Provenance {
    pub fn start(command: &str) -> Self {
        Provenance {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_sha256: None,
            config: None,
            seed: None,
            versions: Versions {
                ugss: ugss::VERSION,
                ugss_cli: env!("CARGO_PKG_VERSION"),
            },
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_time_s: 0.0,
            status: "running",
            error: None,
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T, seed: Option<u64>) {
        let value = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        let compact = value.to_string();
        self.config_sha256 = Some(hex::encode(Sha256::digest(compact.as_bytes())));
        self.config = Some(value);
        self.seed = seed;
    }

    pub fn finish(&mut self, elapsed: Duration, error: Option<&anyhow::Error>) {
        self.wall_time_s = elapsed.as_secs_f64();
        self.status = if error.is_some() { "failed" } else { "ok" };
        self.error = error.map(|e| format!("{e:#}"));
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        ugss::data::write_json(path, self)?;
        Ok(())
    }
}
