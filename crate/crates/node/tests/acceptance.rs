//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p plink-node --test acceptance`

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use oracles::*;
use plink_core::bits::BitString;
use plink_core::cascade::{reconcile, CascadeConfig};
use plink_core::channel::{compensate, DEFAULT_LCVR_AXES_DEG};
use plink_core::config::RunConfig;
use plink_core::metrics::Stage;
use plink_core::privamp::{h2, secure_length, toeplitz_hash, PaSeed};
use plink_core::qstate::{Basis, PolarizationUnitary, Side, TwoQubitPolarizationState};
use plink_core::scenario::Scenario;
use plink_core::timing::{estimate_offset, find_coincidences, SyncParams, TimingError};
use plink_core::wire::{read_key_file, Role};
use plink_node::audit::audit_transcript;
use plink_node::node::{run_node, NodeOptions};
use plink_node::ops::{histogram_files, simulate, HistogramParams, SimulateOptions, SimulateReport};
use plink_node::output::key_file;
use plink_node::source::SimulatedSource;
use plink_node::transport::Recorder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio::net::TcpListener;
use tokio::sync::watch;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

async fn rate_chain(out: &mut Vec<Outcome>) -> Result<(), String> {
    let cfg = RunConfig::default();
    let t = Instant::now();
    let r = simulate(&cfg, 300.0, SimulateOptions::default())
        .await
        .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let rep: &SimulateReport = &r.report;

    let sifted = rep.mean_sifted_rate;
    out.push(outcome(
        "rate chain",
        (310.0..=360.0).contains(&sifted) && secs < 120.0 && rep.blocks == 12,
        format!(
            "coincidences {:.1}/s, sifted {sifted:.1}/s (want 310..360), {} blocks in {secs:.1} s (want < 120)",
            rep.mean_coincidence_rate, rep.blocks
        ),
    ));

    let q = rep.mean_qber.unwrap_or(f64::NAN);
    out.push(outcome(
        "qber band",
        (0.05..=0.08).contains(&q),
        format!("mean block QBER {q:.4} (want 0.05..0.08)"),
    ));

    let fr = rep.mean_final_rate;
    let exact = 340.0 * (1.0 - 2.0 * h2(0.063).unwrap());
    let n = 340 * 25;
    let leak = (n as f64 * h2(0.063).unwrap()).round() as usize;
    let via_len = secure_length(n, 0.063, leak, 0) as f64 / 25.0;
    out.push(outcome(
        "final rate",
        (85.0..=135.0).contains(&fr) && (via_len - 109.5).abs() <= 1.0,
        format!(
            "mean final rate {fr:.1} bits/s (want 85..135); secure_length at idealized leakage {via_len:.2} bits/s vs 109.5 (closed form {exact:.2})"
        ),
    ));
    Ok(())
}

async fn peak_width(out: &mut Vec<Outcome>) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = SimulateOptions {
        out_dir: Some(dir.path().into()),
        dump_tags: true,
        ..Default::default()
    };
    let r = simulate(&RunConfig::default(), 25.0, opts)
        .await
        .map_err(|e| e.to_string())?;
    let f = r.report.files.ok_or("no files")?;
    let h = histogram_files(
        &f.alice_tags.ok_or("no tag dump")?,
        &f.bob_tags.ok_or("no tag dump")?,
        &HistogramParams::default(),
    )
    .map_err(|e| e.to_string())?;
    out.push(outcome(
        "coincidence peak width",
        (1.7..=2.1).contains(&h.fwhm_ns),
        format!("FWHM {:.3} ns (want 1.7..2.1)", h.fwhm_ns),
    ));
    Ok(())
}

fn oracles(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut matcher_ok = 0;
    let mut largest = 0;
    for k in 0..200 {
        let (a, b, off, w) = if k % 10 == 0 {
            let n_a = rng.gen_range(2_000..=8_000);
            matcher_instance_sized(&mut rng, n_a, 10_000 - n_a)
        } else {
            matcher_instance(&mut rng, 1_000)
        };
        largest = largest.max(a.len() + b.len());
        let fast: Vec<_> = find_coincidences(&a, &b, off, w)
            .iter()
            .map(|p| (p.a_index, p.b_index))
            .collect();
        if fast == brute_force_coincidences(&a, &b, off, w) {
            matcher_ok += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut toeplitz_ok = 0;
    let sizes = [(100, 40), (4096, 1300), (33_333, 4001), (100_000, 1500)];
    for (n, m) in sizes {
        let x = BitString::random(n, &mut rng);
        let seed = PaSeed::random(n, m, &mut rng);
        if toeplitz_hash(&x, &seed, m).ok() == Some(naive_toeplitz(&x, &seed.bits, m)) {
            toeplitz_ok += 1;
        }
    }

    let cfg = CascadeConfig::default();
    let mut cascade_ok = 0;
    for t in 0..100u64 {
        let (a, b, _) = planted_errors(4096, 0.063, 500 + t);
        if let Ok((ra, rb)) = reconcile(&a, &b, &cfg, 0.063, t) {
            if ra.corrected_bits == rb.corrected_bits && rb.corrected_bits == a {
                cascade_ok += 1;
            }
        }
    }
    out.push(outcome(
        "oracle equivalences",
        matcher_ok == 200 && toeplitz_ok == sizes.len() && cascade_ok == 100,
        format!(
            "matcher {matcher_ok}/200 (up to {largest} tags), toeplitz {toeplitz_ok}/{} (up to n=100000), cascade {cascade_ok}/100",
            sizes.len()
        ),
    ));
}

fn sync(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ok = 0;
    let mut min_car = f64::INFINITY;
    for seed in 0..100u64 {
        let mut cfg = RunConfig::default();
        cfg.protocol.block_s = 6.0;
        cfg.clock.offset_ticks = rng.gen_range(-8_000_000_000i64..=8_000_000_000);
        cfg.seed = seed;
        let Ok(sc) = Scenario::new(&cfg) else { continue };
        // block 1 so that a negative offset cannot clip Alice's stream
        let Ok(b) = sc.block(1) else { continue };
        let w = cfg.protocol.window_ticks;
        let d = b.spec.duration_s;
        let acc = plink_core::timing::accidental_estimate(&b.alice, &b.bob, sc.true_offset_ticks(), w);
        min_car = min_car.min(b.truth.len() as f64 / acc.max(1.0 / d));
        if let Ok(e) = estimate_offset(&b.alice, &b.bob, &SyncParams::default()) {
            if (e.offset_ticks - sc.true_offset_ticks()).abs() <= 2 {
                ok += 1;
            }
        }
    }
    let mut cfg = RunConfig::default();
    cfg.protocol.block_s = 5.0;
    cfg.source.generated_pair_rate_hz = 0.0;
    let pair_free = Scenario::new(&cfg)
        .and_then(|s| s.block(0))
        .map(|b| matches!(estimate_offset(&b.alice, &b.bob, &SyncParams::default()), Err(TimingError::SyncFailed(_))))
        .unwrap_or(false);
    out.push(outcome(
        "sync robustness",
        ok >= 99 && min_car >= 10.0 && pair_free,
        format!("{ok}/100 offsets within 2 ticks (want >= 99), min CAR {min_car:.0}, pair-free streams fail: {pair_free}"),
    ));
}

fn compensation(out: &mut Vec<Outcome>) {
    let state = TwoQubitPolarizationState::werner(0.98).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = 0;
    let mut before = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let u = PolarizationUnitary::random(&mut rng);
        let raw = state.apply_local(&u, Side::Alice);
        before.push((raw.qber_prediction(Basis::HV) + raw.qber_prediction(Basis::DA)) / 2.0);
        if let Ok(c) = compensate(&u, DEFAULT_LCVR_AXES_DEG, &state) {
            let s = state.apply_local(&plink_core::channel::lcvr_unitary(&c.stack).then_after(&u), Side::Alice);
            let q = s.qber_prediction(Basis::HV).max(s.qber_prediction(Basis::DA));
            worst = worst.max(q);
            if q <= 0.011 {
                ok += 1;
            }
        }
    }
    let m = mean(&before);
    out.push(outcome(
        "compensation",
        ok >= 99 && m > 0.05,
        format!("{ok}/100 compensated to <= 0.011 in both bases (worst {worst:.5}), uncompensated mean {m:.3} (want > 0.05)"),
    ));
}

async fn end_to_end(out: &mut Vec<Outcome>) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let listener = TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.net.peer = listener.local_addr().unwrap().to_string();
    let (_tx, rx) = watch::channel(false);
    let recorder = Recorder::default();
    let opts = |rx| {
        let mut o = NodeOptions::new(rx);
        o.blocks = Some(12);
        o.out_dir = Some(dir.path().into());
        o.capture_secrets = true;
        o
    };
    let mut oa = opts(rx.clone());
    oa.recorder = Some(recorder.clone());
    let mut ob = opts(rx);
    ob.listener = Some(listener);
    let sa = Arc::new(SimulatedSource::new(&cfg).map_err(|e| e.to_string())?);
    let sb = Arc::new(SimulatedSource::new(&cfg).map_err(|e| e.to_string())?);
    let (a, b) = tokio::time::timeout(
        Duration::from_secs(600),
        async { tokio::join!(run_node(Role::Alice, cfg.clone(), sa, oa), run_node(Role::Bob, cfg.clone(), sb, ob)) },
    )
    .await
    .map_err(|_| "nodes timed out".to_string())?;
    let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);

    let ka = std::fs::read(key_file(dir.path(), Role::Alice)).map_err(|e| e.to_string())?;
    let kb = std::fs::read(key_file(dir.path(), Role::Bob)).map_err(|e| e.to_string())?;
    let identical = !ka.is_empty() && ka == kb;
    let records = read_key_file(&mut ka.as_slice()).map_err(|e| e.to_string())?;
    let all_done = a.rows.len() == 12 && a.rows.iter().chain(&b.rows).all(|r| r.stage == Stage::Done && r.final_bits > 0);

    let mut secrets = a.secrets;
    secrets.extend(b.secrets);
    let audit = audit_transcript(&recorder.frames(), &secrets);

    let bits: usize = records.iter().map(|r| r.key.len()).sum();
    let ones: usize = records.iter().map(|r| r.key.count_ones()).sum();
    let dev = (ones as f64 / bits as f64 - 0.5).abs();
    let bound = 3.0 / (bits as f64).sqrt();
    out.push(outcome(
        "end-to-end identity",
        identical && all_done && audit.clean() && records.len() == 12 && dev < bound,
        format!(
            "key files identical: {identical} ({} records, {bits} bits), all 12 blocks done: {all_done}, audit of {} frames: {} violations, monobit |{:.5}| < {bound:.5}",
            records.len(),
            audit.frames,
            audit.violations.len(),
            dev
        ),
    ));
    Ok(())
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("runtime");
    let mut out = Vec::new();
    let failed = |name: &'static str, e: String| outcome(name, false, format!("error: {e}"));
    if let Err(e) = rt.block_on(rate_chain(&mut out)) {
        for n in ["rate chain", "qber band", "final rate"] {
            out.push(failed(n, e.clone()));
        }
    }
    if let Err(e) = rt.block_on(peak_width(&mut out)) {
        out.push(failed("coincidence peak width", e));
    }
    oracles(&mut out);
    sync(&mut out);
    compensation(&mut out);
    if let Err(e) = rt.block_on(end_to_end(&mut out)) {
        out.push(failed("end-to-end identity", e));
    }

    println!();
    for o in &out {
        println!("{} {:<24} {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let bad = out.iter().filter(|o| !o.pass).count();
    println!("\nacceptance: {} passed, {bad} failed", out.len() - bad);
    if bad > 0 {
        std::process::exit(1);
    }
}
