//! The JSON record every command leaves behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Container;
use crate::repro::config_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// Full configuration with every default filled in.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub master_seed: u64,
    /// Named derived streams, for replaying parts of a run.
    pub seeds: BTreeMap<String, u64>,
    pub wall_time_secs: f64,
    pub artifacts: Vec<PathBuf>,
    pub results: serde_json::Value,
}

impl RunReport {
    pub fn new<C: Serialize>(command: &str, config: &C, master_seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config),
            master_seed,
            seeds: BTreeMap::new(),
            wall_time_secs: 0.0,
            artifacts: Vec::new(),
            results: serde_json::Value::Null,
        })
    }

    pub fn set_results<R: Serialize>(&mut self, results: &R) -> Result<()> {
        self.results = serde_json::to_value(results)?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Every listed artifact exists and parses according to its extension.
    pub fn verify_artifacts(&self) -> Result<()> {
        for a in &self.artifacts {
            if !a.is_file() {
                return Err(Error::Load {
                    path: a.clone(),
                    reason: "artifact is missing".into(),
                });
            }
            match a.extension().and_then(|e| e.to_str()) {
                Some("dmc") => {
                    Container::read(a)?;
                }
                Some("json") => {
                    serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(a)?)?;
                }
                Some("png") => {
                    image::open(a)?;
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunReport::new("eval", &serde_json::json!({"a": 1}), 0).unwrap();
        r.artifacts.push(dir.path().join("nope.dmc"));
        assert!(r.verify_artifacts().is_err());
        let bad = dir.path().join("bad.dmc");
        std::fs::write(&bad, b"DMC2").unwrap();
        r.artifacts = vec![bad];
        assert!(matches!(r.verify_artifacts(), Err(Error::Format(_))));
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunReport::new("nas", &serde_json::json!({"k": [1, 2]}), 7).unwrap();
        r.seeds.insert("eval".into(), 99);
        r.set_results(&vec![1.5, 2.5]).unwrap();
        let p = dir.path().join("report.json");
        r.write(&p).unwrap();
        assert_eq!(RunReport::read(&p).unwrap(), r);
    }
}
