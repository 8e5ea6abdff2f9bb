//! Where a node's detections come from.

use plink_core::config::RunConfig;
use plink_core::photonsim::{BlockSpec, SimError, TimeTag};
use plink_core::scenario::Scenario;
use plink_core::wire::Role;
use std::collections::HashMap;
use std::sync::Mutex;

pub trait TagSource: Send + Sync {
    fn block(&self, role: Role, block_id: u32) -> Result<(BlockSpec, Vec<TimeTag>), SimError>;
}

/// Regenerates the shared simulated link per block and keeps one side.
/// Two nodes with the same config see the two halves of the same run.
pub struct SimulatedSource {
    scenario: Scenario,
}

impl SimulatedSource {
    pub fn new(cfg: &RunConfig) -> Result<Self, SimError> {
        Ok(Self {
            scenario: Scenario::new(cfg)?,
        })
    }
}

impl TagSource for SimulatedSource {
    fn block(&self, role: Role, block_id: u32) -> Result<(BlockSpec, Vec<TimeTag>), SimError> {
        let b = self.scenario.block(block_id)?;
        Ok(match role {
            Role::Alice => (b.spec, b.alice),
            Role::Bob => (b.spec, b.bob),
        })
    }
}

type Halves = (Option<Vec<TimeTag>>, Option<Vec<TimeTag>>);

/// Generates each block once for two in-process nodes.
pub struct SharedSimSource {
    scenario: Scenario,
    cache: Mutex<HashMap<u32, (BlockSpec, Halves)>>,
}

impl SharedSimSource {
    pub fn new(cfg: &RunConfig) -> Result<Self, SimError> {
        Ok(Self {
            scenario: Scenario::new(cfg)?,
            cache: Mutex::new(HashMap::new()),
        })
    }
}

impl TagSource for SharedSimSource {
    fn block(&self, role: Role, block_id: u32) -> Result<(BlockSpec, Vec<TimeTag>), SimError> {
        let mut cache = self.cache.lock().unwrap();
        if !cache.contains_key(&block_id) {
            let b = self.scenario.block(block_id)?;
            cache.insert(block_id, (b.spec, (Some(b.alice), Some(b.bob))));
        }
        let (spec, halves) = cache.get_mut(&block_id).unwrap();
        let spec = *spec;
        let mine = match role {
            Role::Alice => halves.0.take(),
            Role::Bob => halves.1.take(),
        };
        if halves.0.is_none() && halves.1.is_none() {
            cache.remove(&block_id);
        }
        match mine {
            Some(tags) => Ok((spec, tags)),
            // asked twice, e.g. after a reconnect
            None => self.scenario.block(block_id).map(|b| match role {
                Role::Alice => (b.spec, b.alice),
                Role::Bob => (b.spec, b.bob),
            }),
        }
    }
}
