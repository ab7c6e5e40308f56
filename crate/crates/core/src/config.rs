//! Tool configuration: defaults, `nbtest.config.json`, command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::mutation::MutationRates;

pub const CONFIG_FILE: &str = "nbtest.config.json";
pub const DEFAULT_EXECUTOR: &str = "python3 -m nbtest.driver";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolConfig {
    pub iterations: usize,
    pub confidence: f64,
    pub runs: usize,
    pub timeout_seconds: u64,
    pub jobs: usize,
    pub catalog_path: Option<PathBuf>,
    pub seed: u64,
    pub executor: String,
    pub mutation: MutationRates,
    /// Where each field's value came from: "default", "file" or "flag".
    pub sources: BTreeMap<String, String>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            iterations: 30,
            confidence: 0.99,
            runs: 30,
            timeout_seconds: 600,
            jobs: 1,
            catalog_path: None,
            seed: 0,
            executor: DEFAULT_EXECUTOR.into(),
            mutation: MutationRates::default(),
            sources: BTreeMap::new(),
        }
    }
}

/// Partial configuration; used for both the file and the flags layer.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub iterations: Option<usize>,
    pub confidence: Option<f64>,
    pub runs: Option<usize>,
    pub timeout_seconds: Option<u64>,
    pub jobs: Option<usize>,
    pub catalog_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub executor: Option<String>,
    pub mutation: Option<MutationRates>,
}

impl ConfigLayer {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("{CONFIG_FILE}: {e}")))
    }

    /// Reads `path`; a missing file is an empty layer. Relative catalog
    /// paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut layer = Self::from_json(&bytes)?;
        if let (Some(cat), Some(dir)) = (&layer.catalog_path, path.parent()) {
            if cat.is_relative() {
                layer.catalog_path = Some(dir.join(cat));
            }
        }
        Ok(layer)
    }
}

impl ToolConfig {
    /// Flags override the file, the file overrides defaults.
    pub fn resolve(file: &ConfigLayer, flags: &ConfigLayer) -> Result<Self> {
        let mut cfg = ToolConfig::default();
        let mut sources = BTreeMap::new();
        macro_rules! pick {
            ($field:ident) => {{
                let (value, source) = match (&flags.$field, &file.$field) {
                    (Some(v), _) => (Some(v.clone()), "flag"),
                    (None, Some(v)) => (Some(v.clone()), "file"),
                    (None, None) => (None, "default"),
                };
                if let Some(v) = value {
                    cfg.$field = v.into();
                }
                sources.insert(stringify!($field).to_string(), source.to_string());
            }};
        }
        pick!(iterations);
        pick!(confidence);
        pick!(runs);
        pick!(timeout_seconds);
        pick!(jobs);
        pick!(catalog_path);
        pick!(seed);
        pick!(executor);
        pick!(mutation);
        cfg.sources = sources;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Domain(self.confidence));
        }
        for (name, v) in [("iterations", self.iterations), ("runs", self.runs), ("jobs", self.jobs)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.timeout_seconds == 0 {
            return Err(Error::Config("timeout_seconds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn run_config(&self, workspace: impl Into<PathBuf>) -> RunConfig {
        let mut rc = RunConfig::new(workspace);
        rc.iterations = self.iterations;
        rc.timeout = Duration::from_secs(self.timeout_seconds);
        rc.parallelism = self.jobs;
        rc.base_seed = self.seed as u32;
        rc
    }

    /// One-line summary for report headers.
    pub fn header(&self) -> String {
        let src = |k: &str| self.sources.get(k).map_or("default", String::as_str).to_string();
        format!(
            "nbtest config: iterations={} ({}) confidence={} ({}) runs={} ({}) timeout={}s ({}) jobs={} ({}) seed={} ({}) executor={:?} ({})",
            self.iterations,
            src("iterations"),
            self.confidence,
            src("confidence"),
            self.runs,
            src("runs"),
            self.timeout_seconds,
            src("timeout_seconds"),
            self.jobs,
            src("jobs"),
            self.seed,
            src("seed"),
            self.executor,
            src("executor"),
        )
    }
}
