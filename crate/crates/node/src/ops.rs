//! Operator operations: single-process simulation, compensation report and
//! coincidence-peak histogram. Shared by the HTTP service and the CLI.

use crate::error::NodeError;
use crate::output::{key_file, metrics_file, Outputs};
use crate::protocol::{Faults, Peer};
use crate::source::{SharedSimSource, TagSource};
use crate::transport::{Direction, Recorder, Transport};
pub use plink_core::api::{
    BasisQber, CompensateReport, HistogramParams, HistogramReport, OutputFiles, SimulateReport, Sweep, SweepPoint,
};
use plink_core::bits::BitString;
use plink_core::channel::compensate as run_compensation;
use plink_core::channel::{compensation_objective, LcvrStack};
use plink_core::config::{ConfigError, RunConfig};
use plink_core::metrics::{BlockMetrics, Stage};
use plink_core::photonsim::TimeTag;
use plink_core::qstate::{Basis, PolarizationUnitary, Side};
use plink_core::scenario::{fiber_rotation, Scenario};
use plink_core::timing::{correlation_histogram, estimate_offset, peak_fwhm};
use plink_core::wire::{read_timetags, write_timetags, Frame, KeyRecord, Role};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Key files, metrics CSVs and tag dumps go here; nothing is written otherwise.
    pub out_dir: Option<PathBuf>,
    /// Also write block 0's raw tags as `alice.tags` and `bob.tags`.
    pub dump_tags: bool,
    pub record_transcript: bool,
    pub capture_secrets: bool,
    pub faults: Faults,
}

/// A simulation with the in-process artifacts the report leaves out.
pub struct SimulateRun {
    pub report: SimulateReport,
    pub alice_keys: Vec<KeyRecord>,
    pub bob_keys: Vec<KeyRecord>,
    pub alice_rows: Vec<BlockMetrics>,
    pub transcript: Vec<(Direction, Frame)>,
    pub secrets: Vec<BitString>,
}

pub fn block_count(cfg: &RunConfig, duration_s: f64) -> Result<u32, ConfigError> {
    let n = (duration_s / cfg.protocol.block_s + 1e-9).floor();
    if !(n >= 1.0) || !duration_s.is_finite() {
        return Err(ConfigError::Invalid {
            path: "duration".into(),
            message: format!("{duration_s} s is shorter than one {} s block", cfg.protocol.block_s),
        });
    }
    Ok(n.min(u32::MAX as f64) as u32)
}

fn write_tags(path: &Path, tags: &[TimeTag]) -> Result<(), NodeError> {
    let io = |e: std::io::Error| NodeError::Output(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_timetags(&mut w, tags).and_then(|_| w.flush()).map_err(io)
}

/// Runs both nodes in one process over an in-memory stream.
pub async fn simulate(cfg: &RunConfig, duration_s: f64, opts: SimulateOptions) -> Result<SimulateRun, NodeError> {
    cfg.validate()?;
    let blocks = block_count(cfg, duration_s)?;
    let source: Arc<dyn TagSource> = Arc::new(SharedSimSource::new(cfg)?);

    let mut files = None;
    let (out_a, out_b) = match &opts.out_dir {
        Some(dir) => {
            let mut f = OutputFiles {
                alice_key: key_file(dir, Role::Alice),
                bob_key: key_file(dir, Role::Bob),
                alice_metrics: metrics_file(dir, Role::Alice),
                bob_metrics: metrics_file(dir, Role::Bob),
                alice_tags: None,
                bob_tags: None,
            };
            let outs = (Outputs::files(dir, Role::Alice)?, Outputs::files(dir, Role::Bob)?);
            if opts.dump_tags {
                let b = Scenario::new(cfg)?.block(0)?;
                let (pa, pb) = (dir.join("alice.tags"), dir.join("bob.tags"));
                write_tags(&pa, &b.alice)?;
                write_tags(&pb, &b.bob)?;
                f.alice_tags = Some(pa);
                f.bob_tags = Some(pb);
            }
            files = Some(f);
            outs
        }
        None => (Outputs::in_memory(), Outputs::in_memory()),
    };

    let cfg = Arc::new(cfg.clone());
    let recorder = opts.record_transcript.then(Recorder::default);
    let mut alice = Peer::new(Role::Alice, cfg.clone(), source.clone(), out_a);
    let mut bob = Peer::new(Role::Bob, cfg.clone(), source, out_b);
    bob.faults = opts.faults.clone();
    if opts.capture_secrets {
        alice.captured_secrets = Some(Vec::new());
        bob.captured_secrets = Some(Vec::new());
    }
    let (sa, sb) = tokio::io::duplex(1 << 20);
    let ta = Transport::new(sa, recorder.clone());
    let tb = Transport::new(sb, None);
    // Each side owns its end so a failure closes the stream for the other.
    let run = |mut peer: Peer, mut t: Transport<tokio::io::DuplexStream>| async move {
        let r = peer.session(&mut t, Some(blocks)).await;
        t.shutdown().await;
        drop(t);
        (peer, r)
    };
    let ((mut alice, ra), (mut bob, rb)) = tokio::join!(run(alice, ta), run(bob, tb));
    ra?;
    rb?;

    let rows = bob.out.rows.clone();
    let keys_identical = alice.out.keys == bob.out.keys
        && match &files {
            Some(f) => std::fs::read(&f.alice_key).ok() == std::fs::read(&f.bob_key).ok(),
            None => true,
        };
    let n = rows.len().max(1) as f64;
    let bs = cfg.protocol.block_s;
    let reconciled: Vec<f64> = rows.iter().filter(|r| r.stage == Stage::Done).map(|r| r.qber).collect();
    let report = SimulateReport {
        blocks,
        block_s: bs,
        seed: cfg.seed,
        blocks_done: reconciled.len() as u32,
        mean_coincidence_rate: rows.iter().map(|r| r.coincidences as f64 / bs).sum::<f64>() / n,
        mean_sifted_rate: rows.iter().map(|r| r.sifted as f64 / bs).sum::<f64>() / n,
        mean_qber: (!reconciled.is_empty()).then(|| reconciled.iter().sum::<f64>() / reconciled.len() as f64),
        mean_final_rate: rows.iter().map(|r| r.final_rate).sum::<f64>() / n,
        final_bits_total: rows.iter().map(|r| r.final_bits).sum(),
        keys_identical,
        files,
        rows,
    };
    let mut secrets = alice.captured_secrets.take().unwrap_or_default();
    secrets.extend(bob.captured_secrets.take().unwrap_or_default());
    Ok(SimulateRun {
        report,
        alice_keys: alice.out.keys.clone(),
        bob_keys: bob.out.keys.clone(),
        alice_rows: alice.out.rows.clone(),
        transcript: recorder.map(|r| r.frames()).unwrap_or_default(),
        secrets,
    })
}

fn qbers(fiber_u: &PolarizationUnitary, stack: &LcvrStack, cfg: &RunConfig) -> Result<BasisQber, NodeError> {
    let state = cfg.source.base_state().map_err(plink_core::photonsim::SimError::from)?;
    let u = plink_core::channel::lcvr_unitary(stack).then_after(fiber_u);
    let s = state.apply_local(&u, Side::Alice);
    Ok(BasisQber {
        hv: s.qber_prediction(Basis::HV),
        da: s.qber_prediction(Basis::DA),
    })
}

/// Compensates the fiber rotation `t_h` hours into the run for the source state.
pub fn compensate(cfg: &RunConfig, t_h: f64, sweep: Option<Sweep>) -> Result<CompensateReport, NodeError> {
    cfg.validate()?;
    let state = cfg.source.base_state().map_err(plink_core::photonsim::SimError::from)?;
    let fiber_u = fiber_rotation(cfg, t_h);
    let c = run_compensation(&fiber_u, cfg.lcvr.axes_deg, &state).map_err(plink_core::photonsim::SimError::from)?;
    debug_assert!(compensation_objective(&fiber_u, &c.stack, &state) <= c.uncompensated + 1e-12);
    let idle = LcvrStack::new(cfg.lcvr.axes_deg, [0.0; 4]);
    let mut points = Vec::new();
    if let Some(s) = sweep {
        if !(s.step_h > 0.0) || !(s.to_h >= s.from_h) || !s.from_h.is_finite() || !s.to_h.is_finite() {
            return Err(ConfigError::Invalid {
                path: "sweep".into(),
                message: "need from_h <= to_h and step_h > 0".into(),
            }
            .into());
        }
        let steps = ((s.to_h - s.from_h) / s.step_h + 1e-9).floor() as usize;
        if steps > 100_000 {
            return Err(ConfigError::Invalid {
                path: "sweep".into(),
                message: format!("{} points is too many", steps + 1),
            }
            .into());
        }
        for i in 0..=steps {
            let t = s.from_h + i as f64 * s.step_h;
            points.push(SweepPoint {
                t_h: t,
                qber: qbers(&fiber_rotation(cfg, t), &c.stack, cfg)?,
            });
        }
    }
    Ok(CompensateReport {
        t_h,
        before: qbers(&fiber_u, &idle, cfg)?,
        after: qbers(&fiber_u, &c.stack, cfg)?,
        floor: qbers(&PolarizationUnitary::identity(), &idle, cfg)?,
        stack: c.stack,
        evaluations: c.evaluations,
        sweep: points,
    })
}

pub fn histogram(tags_a: &[TimeTag], tags_b: &[TimeTag], p: &HistogramParams) -> Result<HistogramReport, NodeError> {
    if tags_a.is_empty() || tags_b.is_empty() {
        return Err(NodeError::Analysis("tag stream is empty".into()));
    }
    if p.bin_ticks == 0 || p.half_range_ticks == 0 {
        return Err(ConfigError::Invalid {
            path: "bin_ticks".into(),
            message: "bin and range must be positive".into(),
        }
        .into());
    }
    let sync = estimate_offset(tags_a, tags_b, &p.sync).map_err(|e| NodeError::Analysis(e.to_string()))?;
    let hist = correlation_histogram(tags_a, tags_b, sync.offset_ticks, p.half_range_ticks, p.bin_ticks);
    let fwhm_ps = peak_fwhm(&hist).map_err(|e| NodeError::Analysis(e.to_string()))?;
    Ok(HistogramReport {
        offset_ticks: sync.offset_ticks,
        fwhm_ps,
        fwhm_ns: fwhm_ps / 1000.0,
        histogram: hist,
    })
}

pub fn read_tag_file(path: &Path) -> Result<Vec<TimeTag>, NodeError> {
    let f = File::open(path).map_err(|e| NodeError::Analysis(format!("{}: {e}", path.display())))?;
    read_timetags(&mut BufReader::new(f)).map_err(|e| NodeError::Analysis(format!("{}: {e}", path.display())))
}

pub fn histogram_files(alice: &Path, bob: &Path, p: &HistogramParams) -> Result<HistogramReport, NodeError> {
    let a = read_tag_file(alice)?;
    let b = read_tag_file(bob)?;
    if a.is_empty() || b.is_empty() {
        let which = if a.is_empty() { alice } else { bob };
        return Err(NodeError::Analysis(format!("{}: no time tags", which.display())));
    }
    histogram(&a, &b, p)
}
