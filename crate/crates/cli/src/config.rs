use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tsr_core::config::{fingerprint, RecognitionConfig};
use tsr_core::extraction::ExtractionConfig;
use tsr_core::lmm::BackendConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    /// Response cache directory; overrides `backend.cache_dir`.
    pub cache: Option<PathBuf>,
    /// Results log for resumable evaluation.
    pub results: Option<PathBuf>,
    /// Directory for crops and reports.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub trials: usize,
    pub jobs: usize,
    pub subset_size: Option<usize>,
    pub subset_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            trials: 1,
            jobs: 1,
            subset_size: None,
            subset_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub paths: Paths,
    pub backend: BackendConfig,
    pub recognition: RecognitionConfig,
    pub extraction: ExtractionConfig,
    pub eval: EvalSettings,
}

impl RunConfigFile {
    /// Reads `path`, applies `section.key=value` overrides, resolves
    /// relative paths against the file's directory and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfigFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.manifest,
            &mut p.catalog,
            &mut p.groups,
            &mut p.bank,
            &mut p.cache,
            &mut p.results,
            &mut p.output,
            &mut self.backend.cache_dir,
            &mut self.backend.mock_script,
        ] {
            fix(slot);
        }
        if let Some(c) = &self.paths.cache {
            self.backend.cache_dir = Some(c.clone());
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.recognition
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.backend.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.trials < 1 {
            return Err(ConfigError::Invalid("eval.trials must be >= 1".into()));
        }
        if self.eval.jobs < 1 {
            return Err(ConfigError::Invalid("eval.jobs must be >= 1".into()));
        }
        if self.eval.subset_size == Some(0) {
            return Err(ConfigError::Invalid("eval.subset_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn require(&self, slot: &Option<PathBuf>, key: &str) -> Result<PathBuf, ConfigError> {
        slot.clone()
            .ok_or_else(|| ConfigError::Invalid(format!("paths.{key} must be set")))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn fingerprint(&self) -> String {
        self.fingerprint_of(&self.recognition)
    }

    pub fn fingerprint_of(&self, cfg: &RecognitionConfig) -> String {
        fingerprint(cfg, &self.backend.backend_id(), self.backend.temperature)
    }
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(raw.to_string());
    let (key, value) = raw.split_once('=').ok_or_else(bad)?;
    let segments: Vec<&str> = key.trim().split('.').collect();
    if segments.len() < 2 || segments.iter().any(|s| s.is_empty()) {
        return Err(bad());
    }
    let value = parse_value(value.trim());
    let (last, parents) = segments.split_last().expect("at least two segments");
    let mut cur = table;
    for s in parents {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(bad)?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
