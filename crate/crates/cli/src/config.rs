//! Run configuration: one TOML schema shared by every subcommand, with
//! `--set section.key=value` overrides applied before typed validation.

use serde::{Deserialize, Serialize};

use fhvae_core::corpus::{FrontendConfig, SynthConfig};
use fhvae_core::eval::EvalConfig;
use fhvae_core::experiment::ExperimentConfig;
use fhvae_core::model::ModelConfig;
use fhvae_core::trainer::TrainingConfig;

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. When set it replaces the seed of every section.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub pretrain: TrainingConfig,
    pub finetune: TrainingConfig,
    pub eval: EvalConfig,
    /// Settings for `reproduce-synth`.
    pub reproduce: ExperimentConfig,
}

impl RunConfig {
    /// Push the root seed into every section.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.pretrain.seed = s;
            self.finetune.seed = s;
            self.reproduce.pretrain.seed = s;
            self.reproduce.finetune.seed = s;
        }
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), UsageError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects key=value, got {spec:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("--set: bad key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("--set: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// File contents (if any) plus overrides, validated against the schema.
pub fn load(file_text: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, UsageError> {
    let mut root: toml::Table = match file_text {
        Some(t) => t.parse().map_err(|e| UsageError(format!("config file: {e}")))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = root.try_into().map_err(|e| UsageError(format!("config: {e}")))?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.resolve_seed();
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config is always serializable")
}
