//! Request and response bodies of the operations service, shared by the
//! server and its clients.

use crate::channel::LcvrStack;
use crate::config::{parse_override, ConfigError, RunConfig};
use crate::metrics::{BlockMetrics, Stage};
use crate::timing::{CorrelationHistogram, SyncParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFiles {
    pub alice_key: PathBuf,
    pub bob_key: PathBuf,
    pub alice_metrics: PathBuf,
    pub bob_metrics: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alice_tags: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bob_tags: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub blocks: u32,
    pub block_s: f64,
    pub seed: u64,
    /// Bob's rows.
    pub rows: Vec<BlockMetrics>,
    pub blocks_done: u32,
    pub mean_coincidence_rate: f64,
    pub mean_sifted_rate: f64,
    /// Over blocks that reached reconciliation; `None` if none did.
    pub mean_qber: Option<f64>,
    /// Over all blocks, aborted ones counting as zero.
    pub mean_final_rate: f64,
    pub final_bits_total: u64,
    pub keys_identical: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<OutputFiles>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisQber {
    pub hv: f64,
    pub da: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub from_h: f64,
    pub to_h: f64,
    pub step_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t_h: f64,
    pub qber: BasisQber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensateReport {
    pub t_h: f64,
    pub before: BasisQber,
    pub after: BasisQber,
    pub floor: BasisQber,
    pub stack: LcvrStack,
    pub evaluations: usize,
    /// Residual QBER over time with the stack found at `t_h` held fixed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramParams {
    pub bin_ticks: u64,
    pub half_range_ticks: u64,
    pub sync: SyncParams,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self {
            bin_ticks: 1,
            half_range_ticks: 80,
            sync: SyncParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub offset_ticks: i64,
    pub fwhm_ps: f64,
    pub fwhm_ns: f64,
    pub histogram: CorrelationHistogram,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub role: String,
    pub connected: bool,
    pub current_block: Option<u32>,
    pub blocks_done: u32,
    pub blocks_aborted: u32,
    pub final_bits_total: u64,
    pub sessions: u32,
    pub last_error: Option<String>,
    pub history: Vec<BlockMetrics>,
}

impl NodeStatus {
    pub fn record(&mut self, m: &BlockMetrics) {
        match m.stage {
            Stage::Done => self.blocks_done += 1,
            _ => self.blocks_aborted += 1,
        }
        self.final_bits_total += m.final_bits;
        self.history.push(m.clone());
    }
}

/// Config as sent over the wire: a partial document merged over the
/// defaults, then dotted `path=value` overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigSpec {
    pub config: Option<Value>,
    pub set: Vec<String>,
}

impl ConfigSpec {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        let doc = self.config.as_ref().map(Value::to_string);
        RunConfig::from_json_with(doc.as_deref(), &overrides)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    #[serde(flatten)]
    pub spec: ConfigSpec,
    pub duration_s: f64,
    /// Directory on the server for key files and metrics.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dump_tags: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensateRequest {
    #[serde(flatten)]
    pub spec: ConfigSpec,
    #[serde(default)]
    pub t_h: f64,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramRequest {
    pub alice_tags: PathBuf,
    pub bob_tags: PathBuf,
    #[serde(default)]
    pub params: HistogramParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}
