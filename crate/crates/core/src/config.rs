//! Run configuration: one JSON document, every field defaulting to the
//! calibrated reference setup.
//!
//! A user document is deep-merged over the defaults, `--set a.b=v` style
//! overrides are applied on top, and the result is deserialized strictly so
//! misspelled keys fail with their full path.

use crate::cascade::CascadeConfig;
use crate::channel::{DriftModel, FiberConfig, LcvrStack, DEFAULT_LCVR_AXES_DEG};
use crate::photonsim::{DetectorConfig, SourceConfig};
use crate::timing::{ClockModel, SyncParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn at(path: &str, message: impl ToString) -> Self {
        ConfigError::Invalid {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detectors {
    pub alice: DetectorConfig,
    pub bob: DetectorConfig,
}

impl Default for Detectors {
    fn default() -> Self {
        Self {
            alice: DetectorConfig::reference_alice(),
            bob: DetectorConfig::reference_bob(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    #[serde(flatten)]
    pub model: DriftModel,
    /// Hours since the drift origin at the start of the run.
    pub start_h: f64,
    /// Identity fiber rotation; the drift parameters are ignored.
    pub disabled: bool,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            model: DriftModel::default(),
            start_h: 0.0,
            disabled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcvrConfig {
    pub axes_deg: [f64; 4],
    pub retardances_rad: [f64; 4],
    /// Solve for the retardances against the fiber rotation at run start,
    /// then hold them fixed.
    pub auto_compensate: bool,
}

impl Default for LcvrConfig {
    fn default() -> Self {
        Self {
            axes_deg: DEFAULT_LCVR_AXES_DEG,
            retardances_rad: [0.0; 4],
            auto_compensate: true,
        }
    }
}

impl LcvrConfig {
    pub fn stack(&self) -> LcvrStack {
        LcvrStack::new(self.axes_deg, self.retardances_rad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaConfig {
    pub margin_bits: usize,
}

impl Default for PaConfig {
    fn default() -> Self {
        Self { margin_bits: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub block_s: f64,
    /// Half-width of the coincidence window in ticks.
    pub window_ticks: u64,
    /// Choose the window per block from `candidate_windows` instead.
    pub optimize_window: bool,
    pub candidate_windows: Vec<u64>,
    /// Blocks with fewer sifted bits are aborted.
    pub min_sifted: usize,
    pub sync: SyncParams,
    pub cascade: CascadeConfig,
    pub pa: PaConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            block_s: 25.0,
            window_ticks: 4,
            optimize_window: false,
            candidate_windows: (1..=12).collect(),
            min_sifted: crate::cascade::MIN_KEY_LEN,
            sync: SyncParams::default(),
            cascade: CascadeConfig::default(),
            pa: PaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Bob listens here.
    pub listen: String,
    /// Alice connects here.
    pub peer: String,
    /// Status API address; empty disables it.
    pub http: String,
    pub max_backoff_ms: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7700".into(),
            peer: "127.0.0.1:7700".into(),
            http: String::new(),
            max_backoff_ms: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: SourceConfig,
    pub fiber: FiberConfig,
    pub detectors: Detectors,
    pub clock: ClockModel,
    pub drift: DriftConfig,
    pub lcvr: LcvrConfig,
    pub protocol: ProtocolConfig,
    pub net: NetConfig,
    pub seed: u64,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets `path` (dot separated) to `raw`, parsed as JSON when possible and
/// as a plain string otherwise.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::at(path, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::at(&here, "not an object"))?;
        if !obj.contains_key(*part) {
            return Err(ConfigError::at(&here, "unknown field"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).unwrap();
    }
    unreachable!()
}

impl RunConfig {
    /// Builds a config from an optional JSON document and `key=value` overrides.
    pub fn from_json_with(doc: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(doc) = doc {
            let user: Value = serde_json::from_str(doc).map_err(|e| ConfigError::Syntax(e.to_string()))?;
            if !user.is_object() {
                return Err(ConfigError::at("", "top level must be an object"));
            }
            merge(&mut value, user);
        }
        for (k, v) in overrides {
            set_path(&mut value, k, v)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(doc: &str) -> Result<Self, ConfigError> {
        Self::from_json_with(Some(doc), &[])
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let doc = path
            .map(|p| {
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })
            })
            .transpose()?;
        Self::from_json_with(doc.as_deref(), overrides)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.source.validate().map_err(|e| ConfigError::at("source", e))?;
        self.fiber.validate().map_err(|e| ConfigError::at("fiber", e))?;
        self.detectors
            .alice
            .validate()
            .map_err(|e| ConfigError::at("detectors.alice", e))?;
        self.detectors
            .bob
            .validate()
            .map_err(|e| ConfigError::at("detectors.bob", e))?;
        self.clock.validate().map_err(|e| ConfigError::at("clock", e))?;
        if !self.drift.disabled {
            self.drift.model.validate().map_err(|e| ConfigError::at("drift", e))?;
        }
        if !self.drift.start_h.is_finite() || self.drift.start_h < 0.0 {
            return Err(ConfigError::at("drift.start_h", "must be >= 0"));
        }
        if self.lcvr.axes_deg.iter().chain(&self.lcvr.retardances_rad).any(|x| !x.is_finite()) {
            return Err(ConfigError::at("lcvr", "angles must be finite"));
        }
        let p = &self.protocol;
        if !(p.block_s > 0.0 && p.block_s <= 600.0) {
            return Err(ConfigError::at("protocol.block_s", "must be in (0, 600]"));
        }
        if p.window_ticks == 0 || p.window_ticks > 10_000 {
            return Err(ConfigError::at("protocol.window_ticks", "must be in [1, 10000]"));
        }
        if p.optimize_window && p.candidate_windows.is_empty() {
            return Err(ConfigError::at("protocol.candidate_windows", "must not be empty"));
        }
        if p.min_sifted < crate::cascade::MIN_KEY_LEN {
            return Err(ConfigError::at(
                "protocol.min_sifted",
                format!("must be >= {}", crate::cascade::MIN_KEY_LEN),
            ));
        }
        if p.sync.coarse_bin_ticks == 0 || p.sync.span_ticks == 0 || p.sync.analysis_ticks == 0 {
            return Err(ConfigError::at("protocol.sync", "span, bin and analysis length must be > 0"));
        }
        p.cascade
            .validate()
            .map_err(|e| ConfigError::at("protocol.cascade", e))?;
        Ok(())
    }

    /// Digest of everything both peers must share: all but `net`.
    pub fn peer_digest(&self) -> u64 {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().unwrap().remove("net");
        crate::bits::fnv1a64(v.to_string().into_bytes())
    }
}

/// Splits `a.b.c=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(ConfigError::at(s, "override must look like path.to.field=value")),
    }
}
