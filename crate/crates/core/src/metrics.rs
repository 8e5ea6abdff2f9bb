//! Per-block pipeline state and the metrics CSV.

use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Collecting,
    Syncing,
    Sifting,
    Reconciling,
    Amplifying,
    Done,
    Aborted,
}

impl Stage {
    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Done | Stage::Aborted)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("block {block_id}: cannot move from {from:?} to {to:?}")]
    BadTransition { block_id: u32, from: Stage, to: Stage },
    #[error("block {0} is not in a terminal stage")]
    NotTerminal(u32),
    #[error("block ids must increase: {prev} then {next}")]
    OutOfOrder { prev: u32, next: u32 },
    #[error("csv: {0}")]
    Csv(String),
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BlockMetrics {
    pub block_id: u32,
    pub t_start: f64,
    pub singles_a: u64,
    pub singles_b: u64,
    pub coincidences: u64,
    pub accidental_estimate: f64,
    pub sifted: u64,
    pub qber: f64,
    pub leaked: u64,
    pub final_bits: u64,
    /// final_bits over the block duration.
    pub final_rate: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPipelineState {
    pub block_id: u32,
    pub duration_s: f64,
    pub metrics: BlockMetrics,
}

impl BlockPipelineState {
    pub fn new(block_id: u32, t_start: f64, duration_s: f64) -> Self {
        Self {
            block_id,
            duration_s,
            metrics: BlockMetrics {
                block_id,
                t_start,
                ..Default::default()
            },
        }
    }

    pub fn stage(&self) -> Stage {
        self.metrics.stage
    }

    /// Moves forward; abort is allowed from any non-terminal stage.
    pub fn advance(&mut self, to: Stage) -> Result<(), MetricsError> {
        let from = self.metrics.stage;
        let ok = !from.is_terminal() && (to == Stage::Aborted || to > from);
        if !ok {
            return Err(MetricsError::BadTransition {
                block_id: self.block_id,
                from,
                to,
            });
        }
        self.metrics.stage = to;
        if to == Stage::Aborted {
            self.metrics.final_bits = 0;
            self.metrics.final_rate = 0.0;
        }
        Ok(())
    }

    pub fn set_final_bits(&mut self, m: u64) {
        self.metrics.final_bits = m;
        self.metrics.final_rate = if self.duration_s > 0.0 {
            m as f64 / self.duration_s
        } else {
            0.0
        };
    }
}

/// Append-only CSV writer; rows must come in increasing block order.
pub struct MetricsLog<W: Write> {
    writer: csv::Writer<W>,
    last: Option<u32>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(out),
            last: None,
        }
    }

    pub fn append(&mut self, state: &BlockPipelineState) -> Result<(), MetricsError> {
        if !state.stage().is_terminal() {
            return Err(MetricsError::NotTerminal(state.block_id));
        }
        if let Some(prev) = self.last {
            if state.block_id <= prev {
                return Err(MetricsError::OutOfOrder {
                    prev,
                    next: state.block_id,
                });
            }
        }
        self.writer
            .serialize(&state.metrics)
            .and_then(|_| self.writer.flush().map_err(Into::into))
            .map_err(|e| MetricsError::Csv(e.to_string()))?;
        self.last = Some(state.block_id);
        Ok(())
    }

    pub fn into_inner(self) -> Result<W, MetricsError> {
        self.writer.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))
    }
}

pub fn read_metrics<R: std::io::Read>(r: R) -> Result<Vec<BlockMetrics>, MetricsError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| MetricsError::Csv(e.to_string()))
}
