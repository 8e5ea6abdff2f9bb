//! Key file and metrics CSV of one node.

use crate::error::NodeError;
use plink_core::metrics::{BlockMetrics, BlockPipelineState, MetricsLog};
use plink_core::wire::{write_key_record, KeyRecord, Role};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Outputs {
    key_path: Option<PathBuf>,
    metrics: Option<MetricsLog<File>>,
    pub keys: Vec<KeyRecord>,
    pub rows: Vec<BlockMetrics>,
}

pub fn role_name(role: Role) -> &'static str {
    match role {
        Role::Alice => "alice",
        Role::Bob => "bob",
    }
}

pub fn key_file(dir: &Path, role: Role) -> PathBuf {
    dir.join(format!("{}.key", role_name(role)))
}

pub fn metrics_file(dir: &Path, role: Role) -> PathBuf {
    dir.join(format!("{}_metrics.csv", role_name(role)))
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> NodeError {
    NodeError::Output(format!("{}: {e}", path.display()))
}

impl Outputs {
    pub fn in_memory() -> Self {
        Self {
            key_path: None,
            metrics: None,
            keys: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Starts fresh `<role>.key` and `<role>_metrics.csv` files in `dir`.
    pub fn files(dir: &Path, role: Role) -> Result<Self, NodeError> {
        fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
        let key_path = key_file(dir, role);
        File::create(&key_path).map_err(|e| out_err(&key_path, e))?;
        let mpath = metrics_file(dir, role);
        let m = File::create(&mpath).map_err(|e| out_err(&mpath, e))?;
        Ok(Self {
            key_path: Some(key_path),
            metrics: Some(MetricsLog::new(m)),
            keys: Vec::new(),
            rows: Vec::new(),
        })
    }

    pub fn last_committed(&self) -> Option<u32> {
        self.keys.last().map(|k| k.block_id)
    }

    pub fn commit_key(&mut self, rec: &KeyRecord) -> Result<(), NodeError> {
        if let Some(p) = &self.key_path {
            let mut f = OpenOptions::new().append(true).open(p).map_err(|e| out_err(p, e))?;
            write_key_record(&mut f, rec)
                .and_then(|_| f.flush())
                .map_err(|e| out_err(p, e))?;
        }
        self.keys.push(rec.clone());
        Ok(())
    }

    pub fn log_block(&mut self, st: &BlockPipelineState) -> Result<(), NodeError> {
        if let Some(m) = &mut self.metrics {
            m.append(st).map_err(|e| NodeError::Output(e.to_string()))?;
        }
        self.rows.push(st.metrics.clone());
        Ok(())
    }
}
