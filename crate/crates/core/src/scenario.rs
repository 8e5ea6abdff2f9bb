//! Turns a [`RunConfig`] into simulated detection blocks.

use crate::channel::{self, compensate, LcvrStack};
use crate::config::RunConfig;
use crate::photonsim::{generate_block, BlockSpec, SimBlock, SimError, SimParams};
use crate::qstate::PolarizationUnitary;

/// A configured link with its compensation setting fixed at run start.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub lcvr: LcvrStack,
}

impl Scenario {
    pub fn new(config: &RunConfig) -> Result<Self, SimError> {
        let lcvr = if config.lcvr.auto_compensate {
            let state = config
                .source
                .base_state()?
                .depolarize(config.fiber.link_visibility)?;
            compensate(&fiber_rotation(config, 0.0), config.lcvr.axes_deg, &state)?.stack
        } else {
            config.lcvr.stack()
        };
        Ok(Self {
            config: config.clone(),
            lcvr,
        })
    }

    pub fn block_spec(&self, index: u32) -> BlockSpec {
        let d = self.config.protocol.block_s;
        BlockSpec {
            index,
            start_s: index as f64 * d,
            duration_s: d,
        }
    }

    pub fn params_at(&self, t_s: f64) -> SimParams {
        let c = &self.config;
        SimParams {
            source: c.source.clone(),
            fiber: c.fiber.clone(),
            drift_u: fiber_rotation(c, t_s / 3600.0),
            lcvr: self.lcvr.clone(),
            det_a: c.detectors.alice.clone(),
            det_b: c.detectors.bob.clone(),
            clock: c.clock,
        }
    }

    /// Block `index`, with the fiber rotation frozen at the block start.
    pub fn block(&self, index: u32) -> Result<SimBlock, SimError> {
        let spec = self.block_spec(index);
        generate_block(&self.params_at(spec.start_s), spec, self.config.seed)
    }

    /// Offset a perfect sync would report: Alice's clock offset plus the
    /// fiber delay, in ticks.
    pub fn true_offset_ticks(&self) -> i64 {
        let delay = (channel::propagation_delay(&self.config.fiber) / crate::photonsim::TICK_PS).round() as i64;
        self.config.clock.offset_ticks + delay
    }
}

/// Fiber rotation `t_h` hours into the run.
pub fn fiber_rotation(config: &RunConfig, t_h: f64) -> PolarizationUnitary {
    if config.drift.disabled {
        PolarizationUnitary::identity()
    } else {
        channel::fiber_unitary(&config.drift.model, config.drift.start_h + t_h)
    }
}
