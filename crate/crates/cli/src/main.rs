//! `plink`: operator command line for the QKD link.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use plink_client::{Client, ClientError};
use plink_core::api::*;
use plink_core::config::{parse_override, ConfigError, RunConfig};
use plink_core::wire::Role;
use plink_node::api::{serve, AppState};
use plink_node::node::{run_node, NodeOptions};
use plink_node::ops::{self, SimulateOptions};
use plink_node::source::SimulatedSource;
use plink_node::NodeError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use tokio::sync::watch;

#[derive(Parser)]
#[command(name = "plink", version, about = "Entanglement-based QKD link: simulation, nodes and analysis")]
struct Cli {
    #[command(flatten)]
    args: ConfigArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config; missing fields take the calibrated defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any field by dotted path, e.g. --set protocol.block_s=5
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Send the work to an operations service instead of running it here
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,
    /// Print the machine-readable report
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run Alice and Bob in one process over an in-memory link
    Simulate {
        #[arg(long, default_value_t = 300.0, value_name = "SECONDS")]
        duration: f64,
        /// Write key files, metrics CSVs and the report here
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Also dump block 0's raw time tags for `plink histogram`
        #[arg(long)]
        dump_tags: bool,
    },
    /// Run one networked node until interrupted
    Node {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
        /// Stop after this many blocks
        #[arg(long)]
        blocks: Option<u32>,
        /// Stop after this many seconds of link time (whole blocks)
        #[arg(long, value_name = "SECONDS")]
        duration: Option<f64>,
    },
    /// Compensate the fiber rotation and report QBER before and after
    Compensate {
        /// Hours into the drift model
        #[arg(long, default_value_t = 0.0)]
        t_h: f64,
        /// Hold the stack fixed and sample the drift, FROM:TO:STEP in hours
        #[arg(long, value_name = "FROM:TO:STEP")]
        sweep: Option<String>,
    },
    /// Coincidence-peak histogram and FWHM from two time tag dumps
    Histogram {
        alice: PathBuf,
        bob: PathBuf,
        #[arg(long, default_value_t = 1, value_name = "TICKS")]
        bin: u64,
        /// Half-width of the histogram around the peak
        #[arg(long, default_value_t = 80, value_name = "TICKS")]
        range: u64,
        /// Write the histogram CSV here instead of stdout
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Serve the operations over HTTP/JSON
    Serve {
        #[arg(long, default_value = "127.0.0.1:7800")]
        listen: String,
    },
    /// Print the fully resolved configuration
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Alice,
    Bob,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut ov = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = self.seed {
            ov.push(("seed".into(), s.to_string()));
        }
        Ok(ov)
    }

    fn resolve(&self) -> Result<RunConfig, Failure> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides()?)?)
    }

    /// The same configuration in the form the service accepts.
    fn spec(&self) -> Result<ConfigSpec, Failure> {
        let config = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                Some(serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let mut set = self.set.clone();
        if let Some(s) = self.seed {
            set.push(format!("seed={s}"));
        }
        Ok(ConfigSpec { config, set })
    }

    fn client(&self) -> Option<Client> {
        self.server.as_deref().map(Client::new)
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(runtime)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn print_simulation(r: &SimulateReport) {
    println!("block  t_start  coinc  sifted    qber  leaked  final  stage");
    for m in &r.rows {
        println!(
            "{:>5} {:>8.0} {:>6} {:>7} {:>7.4} {:>7} {:>6}  {:?}",
            m.block_id, m.t_start, m.coincidences, m.sifted, m.qber, m.leaked, m.final_bits, m.stage
        );
    }
    println!();
    println!("blocks            {} of {} done ({} s each)", r.blocks_done, r.blocks, r.block_s);
    println!("coincidence rate  {:.1} /s", r.mean_coincidence_rate);
    println!("sifted rate       {:.1} /s", r.mean_sifted_rate);
    match r.mean_qber {
        Some(q) => println!("mean QBER         {:.4}", q),
        None => println!("mean QBER         n/a"),
    }
    println!("final key rate    {:.1} bits/s ({} bits)", r.mean_final_rate, r.final_bits_total);
    println!("keys identical    {}", r.keys_identical);
    if let Some(f) = &r.files {
        println!("key files         {} {}", f.alice_key.display(), f.bob_key.display());
        println!("metrics           {} {}", f.alice_metrics.display(), f.bob_metrics.display());
        if let (Some(a), Some(b)) = (&f.alice_tags, &f.bob_tags) {
            println!("time tags         {} {}", a.display(), b.display());
        }
    }
}

fn print_qber(label: &str, q: &BasisQber) {
    println!("{label:<8} HV {:.5}  DA {:.5}", q.hv, q.da);
}

fn parse_sweep(s: &str) -> Result<Sweep, Failure> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Config(format!("--sweep {s}: {e}")))?;
    match parts[..] {
        [from_h, to_h, step_h] => Ok(Sweep { from_h, to_h, step_h }),
        _ => Err(Failure::Config(format!("--sweep {s}: expected FROM:TO:STEP"))),
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn run(cmd: Cmd, args: ConfigArgs) -> Result<(), Failure> {
    match cmd {
        Cmd::Simulate { duration, out, dump_tags } => {
            let report = match args.client() {
                Some(c) => {
                    let out_dir = out.as_deref().map(absolute).transpose()?;
                    let req = SimulateRequest {
                        spec: args.spec()?,
                        duration_s: duration,
                        out_dir,
                        dump_tags,
                    };
                    c.simulate(&req).await?
                }
                None => {
                    let cfg = args.resolve()?;
                    let opts = SimulateOptions {
                        out_dir: out.clone(),
                        dump_tags,
                        ..Default::default()
                    };
                    ops::simulate(&cfg, duration, opts).await?.report
                }
            };
            if let Some(dir) = &out {
                let text = serde_json::to_string_pretty(&report).expect("serializable");
                std::fs::write(dir.join("report.json"), text + "\n").map_err(runtime)?;
            }
            if args.json {
                print_json(&report);
            } else {
                print_simulation(&report);
            }
            if !report.keys_identical {
                return Err(Failure::Runtime("key files differ".into()));
            }
            Ok(())
        }
        Cmd::Node { role, out, blocks, duration } => {
            let cfg = args.resolve()?;
            let role = match role {
                RoleArg::Alice => Role::Alice,
                RoleArg::Bob => Role::Bob,
            };
            let blocks = match (blocks, duration) {
                (Some(b), _) => Some(b),
                (None, Some(d)) => Some(ops::block_count(&cfg, d)?),
                (None, None) => None,
            };
            let (tx, rx) = watch::channel(false);
            let mut opts = NodeOptions::new(rx);
            opts.blocks = blocks;
            opts.out_dir = Some(out);
            let status = opts.status.clone();
            if !cfg.net.http.is_empty() {
                let l = tokio::net::TcpListener::bind(&cfg.net.http).await.map_err(runtime)?;
                let mut stop = tx.subscribe();
                let state = AppState { node: Some(status) };
                tokio::spawn(serve(l, state, async move {
                    let _ = stop.wait_for(|s| *s).await;
                }));
            }
            tokio::spawn(async move {
                shutdown_signal().await;
                let _ = tx.send(true);
            });
            let source = Arc::new(SimulatedSource::new(&cfg).map_err(NodeError::from)?);
            let s = run_node(role, cfg, source, opts).await?;
            let bits: usize = s.keys.iter().map(|k| k.key.len()).sum();
            eprintln!("{} blocks logged, {} keys, {bits} bits, {} sessions", s.rows.len(), s.keys.len(), s.sessions);
            Ok(())
        }
        Cmd::Compensate { t_h, sweep } => {
            let sweep = sweep.as_deref().map(parse_sweep).transpose()?;
            let r = match args.client() {
                Some(c) => {
                    let req = CompensateRequest {
                        spec: args.spec()?,
                        t_h,
                        sweep,
                    };
                    c.compensate(&req).await?
                }
                None => {
                    let cfg = args.resolve()?;
                    tokio::task::spawn_blocking(move || ops::compensate(&cfg, t_h, sweep))
                        .await
                        .map_err(runtime)??
                }
            };
            if args.json {
                print_json(&r);
                return Ok(());
            }
            println!("fiber rotation at t = {} h", r.t_h);
            print_qber("before", &r.before);
            print_qber("after", &r.after);
            print_qber("floor", &r.floor);
            let ret = r.stack.retardances_rad.map(|x| format!("{x:.4}")).join(" ");
            println!("retardances rad  {ret}  (axes {:?} deg)", r.stack.axes_deg);
            if !r.sweep.is_empty() {
                println!("\nt_h,qber_hv,qber_da");
                for p in &r.sweep {
                    println!("{},{:.6},{:.6}", p.t_h, p.qber.hv, p.qber.da);
                }
            }
            Ok(())
        }
        Cmd::Histogram { alice, bob, bin, range, csv } => {
            let params = HistogramParams {
                bin_ticks: bin,
                half_range_ticks: range,
                ..Default::default()
            };
            let r = match args.client() {
                Some(c) => {
                    let req = HistogramRequest {
                        alice_tags: absolute(&alice)?,
                        bob_tags: absolute(&bob)?,
                        params,
                    };
                    c.histogram(&req).await?
                }
                None => tokio::task::spawn_blocking(move || ops::histogram_files(&alice, &bob, &params))
                    .await
                    .map_err(runtime)??,
            };
            if args.json {
                print_json(&r);
                return Ok(());
            }
            let table = r.histogram.to_csv();
            match &csv {
                Some(p) => std::fs::write(p, table).map_err(runtime)?,
                None => print!("{table}"),
            }
            eprintln!("offset {} ticks, FWHM {:.3} ns", r.offset_ticks, r.fwhm_ns);
            Ok(())
        }
        Cmd::Serve { listen } => {
            let l = tokio::net::TcpListener::bind(&listen).await.map_err(runtime)?;
            eprintln!("serving on http://{}", l.local_addr().map_err(runtime)?);
            serve(l, AppState::default(), shutdown_signal()).await.map_err(runtime)
        }
        Cmd::Config => {
            let cfg = args.resolve()?;
            cfg.validate()?;
            println!("{}", cfg.to_json_pretty());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.cmd, Cmd::Node { .. } | Cmd::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();

    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(cli.cmd, cli.args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
