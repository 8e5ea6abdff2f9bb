use serde_json::Value;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

const FAST: [&str; 2] = ["--set", "protocol.block_s=5"];

fn plink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plink")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = plink(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut a = args.to_vec();
    a.push("--json");
    serde_json::from_str(&ok(&a)).unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn config_prints_the_shipped_preset() {
    let printed: Value = serde_json::from_str(&ok(&["config"])).unwrap();
    let shipped: Value =
        serde_json::from_str(&std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets/reference.json")).unwrap())
            .unwrap();
    assert_eq!(printed, shipped);

    // print, reload, print again
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, ok(&["config", "--seed", "9"])).unwrap();
    let again: Value = serde_json::from_str(&ok(&["config", "--config", p.to_str().unwrap()])).unwrap();
    assert_eq!(again["seed"], 9);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"protocol": {"block_s": "long"}}"#).unwrap();
    let o = plink(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("protocol.block_s"));

    assert_eq!(plink(&["simulate", "--set", "fiber.lenght_km=3"]).status.code(), Some(2));
    assert_eq!(plink(&["simulate", "--duration", "1"]).status.code(), Some(2));
    assert_eq!(plink(&["simulate", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(plink(&["config", "--set", "source.visibility=1.5"]).status.code(), Some(2));

    let empty = dir.path().join("empty.tags");
    std::fs::write(&empty, b"").unwrap();
    let e = empty.to_str().unwrap();
    let o = plink(&["histogram", e, e]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no time tags"));
    assert_eq!(plink(&["histogram", "/nonexistent/a", "/nonexistent/b"]).status.code(), Some(1));
}

#[test]
fn simulate_is_reproducible_and_dumps_a_usable_peak() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&d1, &d2] {
        let mut a = vec!["simulate", "--duration", "10", "--seed", "4", "--dump-tags", "--out", d.path().to_str().unwrap()];
        a.extend(FAST);
        let out = ok(&a);
        assert!(out.contains("keys identical    true"), "{out}");
    }
    for f in ["alice.key", "bob.key", "alice_metrics.csv", "bob_metrics.csv", "alice.tags", "bob.tags"] {
        assert_eq!(read(d1.path(), f), read(d2.path(), f), "{f}");
    }
    assert_eq!(read(d1.path(), "alice.key"), read(d1.path(), "bob.key"));
    let report: Value = serde_json::from_slice(&read(d1.path(), "report.json")).unwrap();
    assert_eq!(report["blocks"], 2);

    let csv = d1.path().join("peak.csv");
    let a = d1.path().join("alice.tags");
    let b = d1.path().join("bob.tags");
    let o = plink(&["histogram", a.to_str().unwrap(), b.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("FWHM"));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("bin_start_ps,counts\n"));
    assert_eq!(table.lines().count(), 1 + 161);
    let h = json(&["histogram", a.to_str().unwrap(), b.to_str().unwrap()]);
    let fwhm = h["fwhm_ns"].as_f64().unwrap();
    assert!((1.7..=2.1).contains(&fwhm), "{fwhm}");
}

#[test]
fn zero_jitter_peak_is_at_the_quantization_floor() {
    let d = tempfile::tempdir().unwrap();
    let mut a = vec![
        "simulate", "--duration", "5", "--dump-tags", "--out", d.path().to_str().unwrap(),
        "--set", "detectors.alice.jitter_sigma_ps=0", "--set", "detectors.bob.jitter_sigma_ps=0",
    ];
    a.extend(FAST);
    ok(&a);
    let h = json(&[
        "histogram",
        d.path().join("alice.tags").to_str().unwrap(),
        d.path().join("bob.tags").to_str().unwrap(),
    ]);
    assert!(h["fwhm_ps"].as_f64().unwrap() <= 250.0, "{}", h["fwhm_ps"]);
}

#[test]
fn zero_pair_rate_aborts_all_blocks() {
    let mut a = vec!["simulate", "--duration", "10", "--set", "source.generated_pair_rate_hz=0"];
    a.extend(FAST);
    let r = json(&a);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|m| m["stage"] == "aborted" && m["final_bits"] == 0));
}

#[test]
fn compensate_reports() {
    let r = json(&["compensate", "--set", "drift.disabled=true"]);
    assert_eq!(r["before"], r["after"]);
    assert_eq!(r["after"], r["floor"]);

    let r = json(&["compensate", "--t-h", "5"]);
    for b in ["hv", "da"] {
        assert!(r["after"][b].as_f64().unwrap() <= 0.011);
    }
    assert!(r["before"]["hv"].as_f64().unwrap() + r["before"]["da"].as_f64().unwrap() > 0.05);

    let r = json(&["compensate", "--sweep", "0:48:2", "--set", "drift.walk_step_rad=0"]);
    let sweep = r["sweep"].as_array().unwrap();
    assert_eq!(sweep.len(), 25);
    for i in 0..13 {
        for b in ["hv", "da"] {
            let (x, y) = (sweep[i]["qber"][b].as_f64().unwrap(), sweep[i + 12]["qber"][b].as_f64().unwrap());
            assert!((x - y).abs() < 1e-9, "t={} {b}: {x} vs {y}", sweep[i]["t_h"]);
        }
    }
    assert!(sweep.iter().any(|p| p["qber"]["hv"].as_f64().unwrap() > 0.05), "drift never re-emerges");
    assert_eq!(plink(&["compensate", "--sweep", "0:1"]).status.code(), Some(2));
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn term(child: &Child) {
    Command::new("kill").arg("-TERM").arg(child.id().to_string()).status().unwrap();
}

#[test]
fn server_mode_matches_local_runs() {
    let mut server = Killed(
        Command::new(env!("CARGO_BIN_EXE_plink"))
            .args(["serve", "--listen", "127.0.0.1:0"])
            .stderr(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut line = String::new();
    BufReader::new(server.0.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("serving on ").unwrap().to_string();

    let mut a = vec!["simulate", "--duration", "10", "--seed", "5"];
    a.extend(FAST);
    let local = json(&a);
    a.extend(["--server", &url]);
    let remote = json(&a);
    assert_eq!(local, remote);

    let o = plink(&["simulate", "--server", &url, "--set", "nope=1"]);
    assert_eq!(o.status.code(), Some(2));
    let c = json(&["compensate", "--server", &url, "--set", "drift.disabled=true"]);
    assert_eq!(c["before"], c["floor"]);
    assert_eq!(plink(&["histogram", "/nonexistent/a", "/nonexistent/b", "--server", &url]).status.code(), Some(1));

    term(&server.0);
    let st = server.0.wait().unwrap();
    assert!(st.success());
}

#[test]
fn two_node_processes_agree() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let listen = format!("net.listen=127.0.0.1:{port}");
    let peer = format!("net.peer=127.0.0.1:{port}");
    let http = format!("net.http=127.0.0.1:{}", free_port());
    let out = dir.path().to_str().unwrap();
    let spawn = |role: &str, extra: &[&str]| {
        let mut args = vec!["node", "--role", role, "--duration", "60", "--out", out];
        args.extend(FAST);
        args.extend(extra);
        Killed(Command::new(env!("CARGO_BIN_EXE_plink")).args(args).stderr(Stdio::null()).spawn().unwrap())
    };
    // Alice first: she has to retry until Bob is up.
    let mut alice = spawn("alice", &["--set", &peer]);
    std::thread::sleep(Duration::from_millis(300));
    let mut bob = spawn("bob", &["--set", &listen, "--set", &http]);
    assert!(alice.0.wait().unwrap().success());
    assert!(bob.0.wait().unwrap().success());
    let (ka, kb) = (read(dir.path(), "alice.key"), read(dir.path(), "bob.key"));
    assert!(!ka.is_empty());
    assert_eq!(ka, kb);
    let csv = String::from_utf8(read(dir.path(), "bob_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn node_without_peer_exits_cleanly_on_signal() {
    let peer = format!("net.peer=127.0.0.1:{}", free_port());
    let dir = tempfile::tempdir().unwrap();
    let mut alice = Killed(
        Command::new(env!("CARGO_BIN_EXE_plink"))
            .args(["node", "--role", "alice", "--set", &peer, "--set", "net.max_backoff_ms=200"])
            .current_dir(dir.path())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    std::thread::sleep(Duration::from_millis(800));
    assert!(alice.0.try_wait().unwrap().is_none(), "gave up instead of retrying");
    term(&alice.0);
    assert!(alice.0.wait().unwrap().success());
}

#[test]
fn mismatched_nodes_fail_at_hello() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let out = dir.path().to_str().unwrap();
    let spawn = |args: &[&str]| {
        let mut a = vec!["node", "--out", out, "--blocks", "2"];
        a.extend(args);
        Killed(Command::new(env!("CARGO_BIN_EXE_plink")).args(a).stderr(Stdio::null()).spawn().unwrap())
    };
    let mut bob = spawn(&["--role", "bob", "--set", &format!("net.listen=127.0.0.1:{port}")]);
    std::thread::sleep(Duration::from_millis(200));
    let mut alice = spawn(&[
        "--role",
        "alice",
        "--set",
        &format!("net.peer=127.0.0.1:{port}"),
        "--set",
        "protocol.block_s=10",
    ]);
    assert_eq!(alice.0.wait().unwrap().code(), Some(1));
    assert_eq!(bob.0.wait().unwrap().code(), Some(1));
}
