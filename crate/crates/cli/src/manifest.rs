use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::Failure;

/// `run.json`: what ran, with which settings, and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Timestamps>,
}

#[derive(Debug, Serialize)]
pub struct Timestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_clock_seconds: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Collects written files so the manifest can list them.
pub struct Outputs {
    root: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(root)
            .map_err(|e| Failure::Data(format!("cannot create {}: {e}", root.display())))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Failure::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
        mvtt::io_util::write_atomic(&p, bytes)?;
        self.written.push(rel.to_string());
        Ok(())
    }

    pub fn finish(
        mut self,
        command: &'static str,
        seed: u64,
        config: serde_json::Value,
        started: Option<f64>,
    ) -> Result<(), Failure> {
        let timestamps = started.map(|s| {
            let f = now_unix();
            Timestamps {
                started_unix: s,
                finished_unix: f,
                wall_clock_seconds: f - s,
            }
        });
        self.written.sort();
        let m = RunManifest {
            tool: "mvtt",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            artifacts: self.written.clone(),
            timestamps,
        };
        let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serialises");
        bytes.push(b'\n');
        let p = self.root.join("run.json");
        mvtt::io_util::write_atomic(&p, &bytes)?;
        Ok(())
    }
}
