use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Result files, relative to the run directory.
    pub outputs: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects result files for one command and writes the manifest last.
/// Without an output directory nothing touches the disk.
pub struct Run {
    dir: Option<PathBuf>,
    started_at: String,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(dir: Option<&Path>) -> Result<Self, CliError> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| CliError::new(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Run {
            dir: dir.map(Path::to_path_buf),
            started_at: now(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            std::fs::write(&p, contents).map_err(|e| CliError::new(format!("cannot write {}: {e}", p.display())))?;
            self.outputs.push(name.to_string());
        }
        Ok(())
    }

    pub fn finish(self, command: &str, config: &impl Serialize, seeds: &[(&str, u64)]) -> Result<(), CliError> {
        let Some(d) = self.dir else {
            return Ok(());
        };
        let manifest = RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: now(),
            outputs: self.outputs,
        };
        let p = d.join(MANIFEST_FILE);
        std::fs::write(&p, to_json(&manifest)?).map_err(|e| CliError::new(format!("cannot write {}: {e}", p.display())))
    }
}

pub fn to_json(v: &impl Serialize) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}
