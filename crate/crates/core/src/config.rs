//! Run configuration: a flat `key = value` file plus overrides.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::hbm::Topology;
use crate::model::ModelConfig;
use crate::ssd::StoreConfig;
use crate::transport::{LatencyModel, RetryPolicy};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Cache capacity: fixed, or derived from the first batch's working set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capacity {
    Auto,
    Fixed(usize),
}

impl Capacity {
    pub fn resolve(self, working_set: usize, factor: usize) -> usize {
        match self {
            Capacity::Fixed(n) => n,
            Capacity::Auto => (working_set * factor).max(1),
        }
    }
}

impl std::fmt::Display for Capacity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Capacity::Auto => f.write_str("auto"),
            Capacity::Fixed(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub nodes: u32,
    pub devices: u32,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub minibatches: usize,
    pub lru_capacity: Capacity,
    pub lfu_capacity: Capacity,
    pub store_dir: PathBuf,
    pub file_capacity: usize,
    pub usage_threshold: f64,
    pub background_compaction: bool,
    pub durable: bool,
    /// Capacities of the ingest→prepare, prepare→train and train→collect
    /// queues.
    pub queue_depths: [usize; 3],
    pub deterministic: bool,
    pub latency_us: u64,
    pub latency_per_byte_ns: u64,
    /// Extra time spent in ingest, prepare, train and collect per batch.
    pub stage_delays_ms: [u64; 4],
    pub rpc_timeout_ms: u64,
    pub max_retries: u32,
    pub holdout: f64,
    /// Fault injection: replica 0 drops the dense update of this
    /// synchronization (global minibatch index).
    pub skip_sync_at: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            nodes: 1,
            devices: 1,
            model: ModelConfig::default(),
            batch_size: 512,
            minibatches: 4,
            lru_capacity: Capacity::Auto,
            lfu_capacity: Capacity::Auto,
            store_dir: PathBuf::from("hps-store"),
            file_capacity: 4096,
            usage_threshold: 1.5,
            background_compaction: false,
            durable: true,
            queue_depths: [2, 2, 2],
            deterministic: false,
            latency_us: 0,
            latency_per_byte_ns: 0,
            stage_delays_ms: [0; 4],
            rpc_timeout_ms: 30_000,
            max_retries: 3,
            holdout: 0.1,
            skip_sync_at: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "nodes",
    "devices",
    "embedding_width",
    "layer_dims",
    "lr",
    "seed",
    "init_range",
    "batch_size",
    "minibatches",
    "lru_capacity",
    "lfu_capacity",
    "store_dir",
    "file_capacity",
    "usage_threshold",
    "background_compaction",
    "durable",
    "queue_depths",
    "deterministic",
    "latency_us",
    "latency_per_byte_ns",
    "stage_delays_ms",
    "rpc_timeout_ms",
    "max_retries",
    "holdout",
    "skip_sync_at",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), msg: e.to_string() })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_array<T: std::str::FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N], ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items = parse_list::<T>(key, v)?;
    items
        .try_into()
        .map_err(|_| ConfigError::Value { key: key.into(), msg: format!("expected {N} comma-separated values") })
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse a config file body on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key = value, got {raw:?}") })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "nodes" => self.nodes = parse(key, v)?,
            "devices" => self.devices = parse(key, v)?,
            "embedding_width" => self.model.embedding_width = parse(key, v)?,
            "layer_dims" => self.model.layer_dims = parse_list(key, v)?,
            "lr" => self.model.lr = parse(key, v)?,
            "seed" => self.model.seed = parse(key, v)?,
            "init_range" => self.model.init_range = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "minibatches" => self.minibatches = parse(key, v)?,
            "lru_capacity" | "lfu_capacity" => {
                let c = if v == "auto" { Capacity::Auto } else { Capacity::Fixed(parse(key, v)?) };
                if key == "lru_capacity" {
                    self.lru_capacity = c;
                } else {
                    self.lfu_capacity = c;
                }
            }
            "store_dir" => self.store_dir = PathBuf::from(v),
            "file_capacity" => self.file_capacity = parse(key, v)?,
            "usage_threshold" => self.usage_threshold = parse(key, v)?,
            "background_compaction" => self.background_compaction = parse(key, v)?,
            "durable" => self.durable = parse(key, v)?,
            "queue_depths" => self.queue_depths = parse_array(key, v)?,
            "deterministic" => self.deterministic = parse(key, v)?,
            "latency_us" => self.latency_us = parse(key, v)?,
            "latency_per_byte_ns" => self.latency_per_byte_ns = parse(key, v)?,
            "stage_delays_ms" => self.stage_delays_ms = parse_array(key, v)?,
            "rpc_timeout_ms" => self.rpc_timeout_ms = parse(key, v)?,
            "max_retries" => self.max_retries = parse(key, v)?,
            "holdout" => self.holdout = parse(key, v)?,
            "skip_sync_at" => self.skip_sync_at = if v == "none" { None } else { Some(parse(key, v)?) },
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: 0, msg: format!("override {o:?} is not key=value") })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "nodes" => self.nodes.to_string(),
            "devices" => self.devices.to_string(),
            "embedding_width" => self.model.embedding_width.to_string(),
            "layer_dims" => join(&self.model.layer_dims),
            "lr" => self.model.lr.to_string(),
            "seed" => self.model.seed.to_string(),
            "init_range" => self.model.init_range.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "minibatches" => self.minibatches.to_string(),
            "lru_capacity" => self.lru_capacity.to_string(),
            "lfu_capacity" => self.lfu_capacity.to_string(),
            "store_dir" => self.store_dir.display().to_string(),
            "file_capacity" => self.file_capacity.to_string(),
            "usage_threshold" => self.usage_threshold.to_string(),
            "background_compaction" => self.background_compaction.to_string(),
            "durable" => self.durable.to_string(),
            "queue_depths" => join(&self.queue_depths),
            "deterministic" => self.deterministic.to_string(),
            "latency_us" => self.latency_us.to_string(),
            "latency_per_byte_ns" => self.latency_per_byte_ns.to_string(),
            "stage_delays_ms" => join(&self.stage_delays_ms),
            "rpc_timeout_ms" => self.rpc_timeout_ms.to_string(),
            "max_retries" => self.max_retries.to_string(),
            "holdout" => self.holdout.to_string(),
            "skip_sync_at" => self.skip_sync_at.map_or("none".into(), |v| v.to_string()),
            _ => return None,
        })
    }

    /// Every key with its current value, in file syntax.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).unwrap()));
        }
        out
    }

    /// The defaults, annotated.
    pub fn reference() -> String {
        let mut out = String::from("# hps run configuration (defaults)\n");
        out.push_str("# capacities accept \"auto\": 2x (lru) and 8x (lfu) the first batch's working set\n");
        out.push_str(&RunConfig::default().to_kv());
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        Topology::new(self.nodes, self.devices).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch_size == 0 || self.minibatches == 0 {
            return bad("batch_size and minibatches must be positive".into());
        }
        for (name, c) in [("lru_capacity", self.lru_capacity), ("lfu_capacity", self.lfu_capacity)] {
            if c == Capacity::Fixed(0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.queue_depths.contains(&0) {
            return bad("queue depths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must be in [0, 1)".into());
        }
        if self.rpc_timeout_ms == 0 {
            return bad("rpc_timeout_ms must be positive".into());
        }
        self.store_config(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.nodes, self.devices).expect("validated topology")
    }

    pub fn latency(&self) -> LatencyModel {
        LatencyModel {
            constant: Duration::from_micros(self.latency_us),
            per_byte_nanos: self.latency_per_byte_ns as f64,
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            timeout: Duration::from_millis(self.rpc_timeout_ms),
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }

    pub fn node_dir(&self, node: u32) -> PathBuf {
        self.store_dir.join(format!("node{node}"))
    }

    pub fn store_config(&self, node: u32) -> StoreConfig {
        let mut c = StoreConfig::new(self.node_dir(node), self.model.embedding_width);
        c.file_capacity = self.file_capacity;
        c.usage_threshold = self.usage_threshold;
        c.background_compaction = self.background_compaction;
        c.durable = self.durable;
        c
    }
}
