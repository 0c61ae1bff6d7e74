//! Experiment configuration: JSON with `//` line comments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::probe::ProbeConfig;
use crate::sft::{CotStyle, TeacherConfig};
use crate::tapo::TapoConfig;
use crate::world::WorldSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_tok: usize,
    pub d_h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftStageConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    /// Records per update, `0` for full batch.
    pub batch: usize,
    /// Records per seen category.
    pub cot_count: usize,
    pub style: CotStyle,
    pub teacher: TeacherConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapoStageConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub tapo: TapoConfig,
    /// Steps between resumable checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Test images per category and split.
    pub per_class: usize,
    pub max_len: usize,
    pub grammar_mask: bool,
    /// Sampled decoding at this temperature instead of argmax.
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub enabled: bool,
    pub probe: ProbeConfig,
    /// Worlds (from the first) included in the probe and pair PCA.
    pub probe_worlds: usize,
    pub probe_train_per_class: usize,
    pub probe_test_per_class: usize,
    /// Analysis runs for the first this-many seeds only.
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: String,
    pub worlds: Vec<WorldSpec>,
    pub shots: usize,
    pub seen_fraction: f64,
    pub policy: PolicyConfig,
    pub sft: SftStageConfig,
    pub tapo: TapoStageConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// Removes `//` comments outside string literals.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_str = false;
        let mut escaped = false;
        let mut cut = line.len();
        let bytes = line.as_bytes();
        for i in 0..bytes.len() {
            let b = bytes[i];
            if in_str {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_str = false;
                }
            } else if b == b'"' {
                in_str = true;
            } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                cut = i;
                break;
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

pub fn default_worlds() -> Vec<WorldSpec> {
    (0..6)
        .map(|i| WorldSpec {
            n_super: 6,
            subs_per_super: 8,
            feat_dim: 16,
            intra_sigma: (5 + i) as f64 / 100.0,
            inter_alpha: (50 + 4 * i) as f64 / 100.0,
            seed: 1001 + i as u64,
        })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: "tapo".to_string(),
            worlds: default_worlds(),
            shots: 4,
            seen_fraction: 0.6,
            policy: PolicyConfig { d_tok: 16, d_h: 96 },
            sft: SftStageConfig {
                enabled: true,
                epochs: 60,
                lr: 1e-2,
                batch: 32,
                cot_count: 1,
                style: CotStyle::Full,
                teacher: TeacherConfig {
                    error_rate: 0.1,
                    max_resamples: 8,
                },
            },
            tapo: TapoStageConfig {
                enabled: true,
                tapo: TapoConfig::default(),
                checkpoint_every: 10,
            },
            eval: EvalConfig {
                per_class: 3,
                max_len: 40,
                grammar_mask: true,
                temperature: None,
            },
            analysis: AnalysisConfig {
                enabled: true,
                probe: ProbeConfig::default(),
                probe_worlds: 1,
                probe_train_per_class: 6,
                probe_test_per_class: 4,
                seeds: 1,
            },
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(&strip_comments(text))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.worlds.is_empty() {
            return bad("at least one world is required".into());
        }
        for (i, w) in self.worlds.iter().enumerate() {
            if let Err(e) = w.validate() {
                return bad(format!("world {i}: {e}"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.shots == 0 {
            return bad("shots must be >= 1".into());
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return bad("seen_fraction must lie in (0, 1)".into());
        }
        if self.policy.d_tok == 0 || self.policy.d_h == 0 {
            return bad("policy dims must be positive".into());
        }
        if self.sft.enabled && (self.sft.epochs == 0 || !(self.sft.lr > 0.0) || self.sft.cot_count == 0) {
            return bad("sft needs epochs, lr and cot_count > 0".into());
        }
        if !(0.0..=1.0).contains(&self.sft.teacher.error_rate) {
            return bad("teacher error_rate must lie in [0, 1]".into());
        }
        if let Err(e) = self.tapo.tapo.validate() {
            return bad(format!("tapo: {e}"));
        }
        if self.tapo.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if self.eval.per_class == 0 || self.eval.max_len == 0 {
            return bad("eval per_class and max_len must be positive".into());
        }
        if self.eval.temperature.is_some_and(|t| !(t > 0.0)) {
            return bad("eval temperature must be positive".into());
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn sha256_json<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_are_stripped_outside_strings() {
        let text = "{\n  // note\n  \"a\": \"http://x\", // tail\n  \"b\": 1\n}";
        let v: serde_json::Value = serde_json::from_str(&strip_comments(text)).unwrap();
        assert_eq!(v["a"], "http://x");
        assert_eq!(v["b"], 1);
    }

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.tapo.tapo.eps_hi, 0.28);
        assert_eq!(cfg.tapo.tapo.max_retries, 20);
    }

    #[test]
    fn shipped_default_file_matches_builtin() {
        let text = include_str!("../../../configs/default.jsonc");
        assert_eq!(ExperimentConfig::from_json_str(text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.seen_fraction = 1.0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json_str("{\"variant\": 3}").is_err());
    }
}
