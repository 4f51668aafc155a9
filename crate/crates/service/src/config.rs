//! Service configuration, read from TOML.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use syncer_core::dispatcher::RetryPolicy;
use syncer_core::journal::Durability;
use syncer_core::sync::SchedulerConfig;

use crate::node::NodeOptions;
use crate::simulation::{ChainDef, EmitterDef};

pub const CONFIG_ENV: &str = "SYNCER_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ApiConfig {
    /// Serves both the API and the metrics endpoint.
    pub bind: SocketAddr,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimulatorConfig {
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_path: Option<PathBuf>,
    #[serde(default)]
    pub durability: Durability,
    #[serde(default)]
    pub api: ApiConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub delivery: RetryPolicy,
    #[serde(default = "default_webhook_timeout")]
    pub webhook_timeout_ms: u64,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(default)]
    pub chains: Vec<ChainDef>,
    #[serde(default)]
    pub emitters: Vec<EmitterDef>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("./data")
}

fn default_webhook_timeout() -> u64 {
    10_000
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: default_data_dir(),
            store_path: None,
            queue_path: None,
            durability: Durability::default(),
            api: ApiConfig::default(),
            scheduler: SchedulerConfig::default(),
            delivery: RetryPolicy::default(),
            webhook_timeout_ms: default_webhook_timeout(),
            simulator: SimulatorConfig::default(),
            chains: Vec::new(),
            emitters: Vec::new(),
        }
    }
}

pub(crate) fn validate_retry(field: &str, p: &RetryPolicy) -> Result<(), ConfigError> {
    if p.base_ms == 0 {
        return Err(invalid(format!("{field}.baseMs"), "must be positive"));
    }
    if p.factor == 0 {
        return Err(invalid(format!("{field}.factor"), "must be positive"));
    }
    if p.max_attempts == 0 {
        return Err(invalid(format!("{field}.maxAttempts"), "must be positive"));
    }
    Ok(())
}

pub(crate) fn validate_scheduler(s: &SchedulerConfig) -> Result<(), ConfigError> {
    if s.worker_count == 0 {
        return Err(invalid("scheduler.workerCount", "must be positive"));
    }
    if s.tick_interval_ms == 0 {
        return Err(invalid("scheduler.tickIntervalMs", "must be positive"));
    }
    if s.partition_size == Some(0) {
        return Err(invalid("scheduler.partitionSize", "must be positive"));
    }
    validate_retry("scheduler.jobRetry", &s.job_retry)
}

pub(crate) fn validate_chains(chains: &[ChainDef], emitters: &[EmitterDef]) -> Result<(), ConfigError> {
    let mut seen = BTreeSet::new();
    for (i, c) in chains.iter().enumerate() {
        if !seen.insert(&c.id) {
            return Err(invalid(format!("chains[{i}].id"), format!("duplicate chain {}", c.id)));
        }
        if c.max_batch == 0 {
            return Err(invalid(format!("chains[{i}].maxBatch"), "must be positive"));
        }
        if c.block_time == Some(0) {
            return Err(invalid(format!("chains[{i}].blockTime"), "must be positive"));
        }
        if c.sporks.is_some() && c.reorg_max_depth > 0 {
            return Err(invalid(format!("chains[{i}].reorgMaxDepth"), "sporked chains do not reorg"));
        }
        if let Err(e) = c.spec() {
            return Err(invalid(format!("chains[{i}].sporks"), e.to_string()));
        }
    }
    for (i, e) in emitters.iter().enumerate() {
        if !seen.contains(&e.chain) {
            return Err(invalid(format!("emitters[{i}].chain"), format!("unknown chain {}", e.chain)));
        }
        if !(e.rate.is_finite() && e.rate >= 0.0) {
            return Err(invalid(format!("emitters[{i}].rate"), "must be a non-negative number"));
        }
    }
    Ok(())
}

impl ServiceConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chains.is_empty() {
            return Err(invalid("chains", "at least one chain is required"));
        }
        validate_chains(&self.chains, &self.emitters)?;
        validate_scheduler(&self.scheduler)?;
        validate_retry("delivery", &self.delivery)?;
        if self.webhook_timeout_ms == 0 {
            return Err(invalid("webhookTimeoutMs", "must be positive"));
        }
        Ok(())
    }

    /// Creates the data directories and checks they accept writes.
    pub fn prepare_paths(&self) -> Result<(), ConfigError> {
        let dirs = [
            ("dataDir", Some(&self.data_dir)),
            ("storePath", self.store_path.as_ref()),
            ("queuePath", self.queue_path.as_ref()),
        ];
        for (field, dir) in dirs {
            let Some(dir) = dir else { continue };
            let probe = dir.join(".write-probe");
            std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(&probe, b""))
                .and_then(|_| std::fs::remove_file(&probe))
                .map_err(|e| invalid(field, format!("{} is not writable: {e}", dir.display())))?;
        }
        Ok(())
    }

    pub fn node_options(&self) -> NodeOptions {
        NodeOptions {
            data_dir: Some(self.data_dir.clone()),
            store_path: self.store_path.clone(),
            queue_path: self.queue_path.clone(),
            durability: self.durability,
            scheduler: self.scheduler.clone(),
            delivery: self.delivery,
            http_timeout: Duration::from_millis(self.webhook_timeout_ms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        dataDir = "/tmp/syncer"
        [api]
        bind = "127.0.0.1:9000"
        [scheduler]
        workerCount = 2
        tickIntervalMs = 500
        [[chains]]
        id = "eth"
        maxBatch = 100
        confirmationDepth = 6
        [[chains]]
        id = "flow"
        maxBatch = 200
        confirmationDepth = 0
        sporks = [{ start = 0, endpoint = "flow-1" }, { start = 1000, endpoint = "flow-2" }]
    "#;

    fn parse(text: &str) -> ServiceConfig {
        ServiceConfig::from_toml(text, Path::new("test.toml")).unwrap()
    }

    #[test]
    fn sample_parses_and_validates() {
        let c = parse(SAMPLE);
        c.validate().unwrap();
        assert_eq!(c.scheduler.worker_count, 2);
        assert_eq!(c.delivery, RetryPolicy::default());
        assert_eq!(c.api.bind.port(), 9000);
    }

    #[test]
    fn zero_workers_names_the_field() {
        let c = parse(&SAMPLE.replace("workerCount = 2", "workerCount = 0"));
        let err = c.validate().unwrap_err().to_string();
        assert!(err.starts_with("scheduler.workerCount"), "{err}");
    }

    #[test]
    fn duplicate_chain_and_bad_batch_are_rejected() {
        let c = parse(&SAMPLE.replace("id = \"flow\"", "id = \"eth\""));
        assert!(c.validate().unwrap_err().to_string().starts_with("chains[1].id"));
        let c = parse(&SAMPLE.replace("maxBatch = 100", "maxBatch = 0"));
        assert!(c.validate().unwrap_err().to_string().starts_with("chains[0].maxBatch"));
    }

    #[test]
    fn unknown_keys_fail_to_parse() {
        let err = ServiceConfig::from_toml("bogus = 1", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
