//! Settings file for the `boundary` tool.
//!
//! TOML, every key optional:
//!
//! ```toml
//! model = "runs/model"      # bundle directory
//! corpus = "data/synth"     # corpus directory
//! seed = 0
//! train = 300               # leading samples used for training
//! val = 50                  # next samples used for validation; the rest is test
//! host = "127.0.0.1"
//! port = 8080
//! preset = "desk"           # desk | smoke | reference
//!
//! [pipeline]                # full pipeline settings; replaces the preset
//! ```
//!
//! Command-line flags win over the file. `BOUNDARY_MODEL` overrides the
//! model directory unless `--model` is given.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use boundary_engine::pipeline::PipelineConfig;

pub const MODEL_ENV: &str = "BOUNDARY_MODEL";

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub seed: Option<u64>,
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub preset: Option<String>,
    pub pipeline: Option<PipelineConfig>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Flag, then environment, then file, then `model`.
    pub fn model_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| std::env::var_os(MODEL_ENV).map(PathBuf::from))
            .or_else(|| self.model.clone())
            .unwrap_or_else(|| PathBuf::from("model"))
    }

    pub fn corpus_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.corpus.clone())
            .unwrap_or_else(|| PathBuf::from("corpus"))
    }

    pub fn pipeline(&self, preset_flag: Option<&str>, seed_flag: Option<u64>) -> Result<PipelineConfig, String> {
        let base = match (preset_flag, &self.pipeline) {
            (None, Some(p)) => p.clone(),
            _ => preset(preset_flag.or(self.preset.as_deref()).unwrap_or("desk"))?,
        };
        Ok(base.with_seed(seed_flag.or(self.seed).unwrap_or(0)))
    }
}

pub fn preset(name: &str) -> Result<PipelineConfig, String> {
    match name {
        "desk" => Ok(PipelineConfig::desk()),
        "smoke" => Ok(PipelineConfig::smoke()),
        "reference" => Ok(PipelineConfig::default()),
        other => Err(format!("unknown preset `{other}` (desk, smoke, reference)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_overrides() {
        let s: Settings = toml::from_str("seed = 4\npreset = \"smoke\"\nport = 9000").unwrap();
        assert_eq!(s.pipeline(None, None).unwrap().seed, 4);
        assert_eq!(s.pipeline(None, Some(7)).unwrap().mask.seed, 7);
        assert_eq!(s.pipeline(None, None).unwrap().mask.epochs, PipelineConfig::smoke().mask.epochs);
        assert!(toml::from_str::<Settings>("sede = 4").is_err());
        assert!(s.pipeline(Some("huge"), None).is_err());
    }
}
