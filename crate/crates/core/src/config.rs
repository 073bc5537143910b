//! Versioned run configuration; every run is reproducible from its config
//! alone, and artifacts embed the config plus its hash.

use crate::classify::llm::Decoding;
use crate::classify::rules::RuleSet;
use crate::encode::DegeneratePolicy;
use crate::ingest::{CaptureFormat, FlowKey};
use crate::labelsplit::{SplitMode, SplitPolicy, SplitRatios};
use crate::types::Partition;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureInput {
    pub path: PathBuf,
    pub format: CaptureFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputsCfg {
    pub captures: Vec<CaptureInput>,
    #[serde(default)]
    pub attack_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowCfg {
    pub merge_gap_s: f64,
    pub tail_s: f64,
}

impl Default for WindowCfg {
    fn default() -> Self {
        WindowCfg {
            merge_gap_s: 60.0,
            tail_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCfg {
    pub mode: SplitMode,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitCfg {
    fn default() -> Self {
        SplitCfg {
            mode: SplitMode::ByTime,
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinsCfg {
    pub version: u64,
    pub degenerate_policy: DegeneratePolicy,
}

impl Default for BinsCfg {
    fn default() -> Self {
        BinsCfg {
            version: 1,
            degenerate_policy: DegeneratePolicy::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Llm,
    Rule,
    Baseline,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Llm => "llm",
            Backend::Rule => "rule",
            Backend::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCfg {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub prompt_dir: PathBuf,
    pub decoding: Decoding,
    pub max_attempts: u32,
}

impl Default for LlmCfg {
    fn default() -> Self {
        LlmCfg {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "MODAUDIT_API_KEY".into(),
            prompt_dir: PathBuf::from("prompts"),
            decoding: Decoding::default(),
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineCfg {
    pub epochs: u32,
    pub learning_rate: f64,
}

impl Default for BaselineCfg {
    fn default() -> Self {
        BaselineCfg {
            epochs: 300,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub resamples: u32,
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            resamples: 1000,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbesCfg {
    pub epsilon_grid: Vec<f64>,
    pub bootstrap: BootstrapSettings,
}

impl Default for ProbesCfg {
    fn default() -> Self {
        ProbesCfg {
            epsilon_grid: vec![0.0, 0.005, 0.01, 0.02, 0.05, 0.1],
            bootstrap: BootstrapSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricesCfg {
    pub input_per_m: f64,
    pub output_per_m: f64,
    pub overhead_tokens_low: u64,
    pub overhead_tokens_high: u64,
}

impl Default for PricesCfg {
    fn default() -> Self {
        PricesCfg {
            input_per_m: 2.50,
            output_per_m: 10.00,
            overhead_tokens_low: 0,
            overhead_tokens_high: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedsCfg {
    pub pipeline: u64,
}

impl Default for SeedsCfg {
    fn default() -> Self {
        SeedsCfg { pipeline: 1 }
    }
}

fn default_parallelism() -> usize {
    8
}

fn default_modbus_port() -> u16 {
    502
}

fn default_flow_key() -> FlowKey {
    FlowKey::PerDirectionPair
}

fn default_eval_partition() -> Partition {
    Partition::Test
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// The full run configuration. Serialized into every artifact header; two
/// runs with equal configs and inputs produce byte-identical non-network
/// artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub inputs: InputsCfg,
    #[serde(default = "default_modbus_port")]
    pub modbus_port: u16,
    #[serde(default = "default_flow_key")]
    pub flow_key: FlowKey,
    #[serde(default)]
    pub windows: WindowCfg,
    #[serde(default)]
    pub split: SplitCfg,
    #[serde(default)]
    pub bins: BinsCfg,
    pub backend: Backend,
    #[serde(default)]
    pub rules: RuleSet,
    #[serde(default)]
    pub llm: LlmCfg,
    #[serde(default)]
    pub baseline: BaselineCfg,
    #[serde(default)]
    pub probes: ProbesCfg,
    #[serde(default)]
    pub prices: PricesCfg,
    #[serde(default = "default_eval_partition")]
    pub eval_partition: Partition,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default)]
    pub seeds: SeedsCfg,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.split_policy()
            .ratios
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.llm.decoding.temperature != 0.0 {
            return Err(ConfigError::Invalid(
                "llm.decoding.temperature must be 0".into(),
            ));
        }
        if self.inputs.captures.is_empty() {
            return Err(ConfigError::Invalid("inputs.captures is empty".into()));
        }
        let grid = &self.probes.epsilon_grid;
        if grid.is_empty()
            || grid.windows(2).any(|w| w[0] >= w[1])
            || grid.iter().any(|e| !(0.0..=1.0).contains(e))
        {
            return Err(ConfigError::Invalid(
                "probes.epsilon_grid must be ascending values in [0, 1]".into(),
            ));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if self.prices.overhead_tokens_low > self.prices.overhead_tokens_high {
            return Err(ConfigError::Invalid(
                "prices.overhead_tokens_low exceeds overhead_tokens_high".into(),
            ));
        }
        Ok(())
    }

    pub fn split_policy(&self) -> SplitPolicy {
        SplitPolicy {
            mode: self.split.mode,
            ratios: SplitRatios {
                train: self.split.train,
                validation: self.split.validation,
                test: self.split.test,
            },
            merge_gap_s: self.windows.merge_gap_s,
            tail_s: self.windows.tail_s,
        }
    }

    /// Hash of the canonical JSON serialization; also names the run
    /// directory so artifacts are append-only per configuration.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..16])
    }

    /// Run directory for this configuration: `<run_dir>/<hash12>`.
    pub fn artifact_dir(&self) -> PathBuf {
        self.run_dir.join(&self.config_hash()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_config() -> RunConfig {
        RunConfig {
            version: 1,
            inputs: InputsCfg {
                captures: vec![CaptureInput {
                    path: PathBuf::from("capture.pcap"),
                    format: CaptureFormat::Pcap,
                }],
                attack_log: None,
            },
            modbus_port: 502,
            flow_key: FlowKey::PerDirectionPair,
            windows: WindowCfg::default(),
            split: SplitCfg::default(),
            bins: BinsCfg::default(),
            backend: Backend::Rule,
            rules: RuleSet::default(),
            llm: LlmCfg::default(),
            baseline: BaselineCfg::default(),
            probes: ProbesCfg::default(),
            prices: PricesCfg::default(),
            eval_partition: Partition::Test,
            parallelism: 8,
            run_dir: PathBuf::from("runs"),
            seeds: SeedsCfg::default(),
        }
    }

    #[test]
    fn hash_is_deterministic_and_config_sensitive() {
        let a = minimal_config();
        let mut b = minimal_config();
        assert_eq!(a.config_hash(), b.config_hash());
        b.modbus_port = 5020;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn validation_catches_bad_settings() {
        let mut cfg = minimal_config();
        cfg.split.train = 0.9;
        assert!(cfg.validate().is_err());

        let mut cfg = minimal_config();
        cfg.llm.decoding.temperature = 0.7;
        assert!(cfg.validate().is_err());

        let mut cfg = minimal_config();
        cfg.probes.epsilon_grid = vec![0.1, 0.05];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = minimal_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut value = serde_json::to_value(minimal_config()).unwrap();
        value["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(value).is_err());
    }
}
