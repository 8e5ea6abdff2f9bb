//! Long-running Alice/Bob service over TCP with reconnect.

use crate::error::NodeError;
use crate::output::Outputs;
use crate::protocol::{Faults, Peer};
use crate::source::TagSource;
use crate::status::SharedStatus;
use crate::transport::{Recorder, Transport};
use plink_core::bits::BitString;
use plink_core::config::RunConfig;
use plink_core::metrics::BlockMetrics;
use plink_core::wire::{KeyRecord, Role};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tracing::{info, warn};

pub struct NodeOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many blocks; run until shutdown otherwise.
    pub blocks: Option<u32>,
    pub shutdown: watch::Receiver<bool>,
    pub recorder: Option<Recorder>,
    pub faults: Faults,
    pub status: SharedStatus,
    /// Pre-bound listener for Bob; `net.listen` is bound otherwise.
    pub listener: Option<TcpListener>,
    /// Keep sifted and reconciled keys for transcript audits.
    pub capture_secrets: bool,
}

impl NodeOptions {
    pub fn new(shutdown: watch::Receiver<bool>) -> Self {
        Self {
            out_dir: None,
            blocks: None,
            shutdown,
            recorder: None,
            faults: Faults::default(),
            status: SharedStatus::default(),
            listener: None,
            capture_secrets: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeSummary {
    pub keys: Vec<KeyRecord>,
    pub rows: Vec<BlockMetrics>,
    pub sessions: u32,
    pub secrets: Vec<BitString>,
}

async fn shutdown_requested(rx: &mut watch::Receiver<bool>) {
    loop {
        if *rx.borrow_and_update() {
            return;
        }
        if rx.changed().await.is_err() {
            std::future::pending::<()>().await;
        }
    }
}

async fn connect(role: Role, peer: &str, listener: Option<&TcpListener>) -> std::io::Result<TcpStream> {
    let s = match (role, listener) {
        (Role::Bob, Some(l)) => l.accept().await?.0,
        _ => TcpStream::connect(peer).await?,
    };
    s.set_nodelay(true)?;
    Ok(s)
}

pub async fn run_node(
    role: Role,
    cfg: RunConfig,
    source: Arc<dyn TagSource>,
    mut opts: NodeOptions,
) -> Result<NodeSummary, NodeError> {
    cfg.validate()?;
    let cfg = Arc::new(cfg);
    let out = match &opts.out_dir {
        Some(d) => Outputs::files(d, role)?,
        None => Outputs::in_memory(),
    };
    let status = opts.status.clone();
    status.write().unwrap().role = crate::output::role_name(role).into();
    let mut peer = Peer::new(role, cfg.clone(), source, out).with_status(status.clone());
    peer.faults = opts.faults.clone();
    if opts.capture_secrets {
        peer.captured_secrets = Some(Vec::new());
    }
    let listener = match (role, opts.listener.take()) {
        (Role::Bob, Some(l)) => Some(l),
        (Role::Bob, None) => Some(TcpListener::bind(&cfg.net.listen).await?),
        _ => None,
    };

    let min_backoff = Duration::from_millis(50);
    let max_backoff = Duration::from_millis(cfg.net.max_backoff_ms.max(50));
    let mut backoff = min_backoff;
    let mut sessions = 0u32;
    let mut settle = false;
    let mut shutdown = opts.shutdown.clone();
    loop {
        let finished = opts.blocks.is_some_and(|n| peer.next_block() >= n);
        if finished && !settle {
            break;
        }
        let stream = tokio::select! {
            s = connect(role, &cfg.net.peer, listener.as_ref()) => s,
            _ = shutdown_requested(&mut shutdown) => break,
        };
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!(?role, error = %e, ?backoff, "peer unreachable, retrying");
                tokio::select! {
                    _ = tokio::time::sleep(backoff) => {}
                    _ = shutdown_requested(&mut shutdown) => break,
                }
                backoff = (backoff * 2).min(max_backoff);
                continue;
            }
        };
        backoff = min_backoff;
        sessions += 1;
        {
            let mut s = status.write().unwrap();
            s.connected = true;
            s.sessions = sessions;
        }
        info!(?role, session = sessions, "peer connected");
        let mut t = Transport::new(stream, opts.recorder.clone());
        let r = tokio::select! {
            r = peer.session(&mut t, opts.blocks) => r,
            _ = shutdown_requested(&mut shutdown) => Err(NodeError::Shutdown),
        };
        t.shutdown().await;
        status.write().unwrap().connected = false;
        match r {
            Ok(()) => settle = false,
            Err(NodeError::Shutdown) => break,
            Err(e) if e.is_fatal() => {
                status.write().unwrap().last_error = Some(e.to_string());
                peer.abandon_pending()?;
                return Err(e);
            }
            Err(e) => {
                warn!(?role, error = %e, "session lost, reconnecting");
                status.write().unwrap().last_error = Some(e.to_string());
                settle = true;
            }
        }
    }
    peer.abandon_pending()?;
    Ok(NodeSummary {
        keys: peer.out.keys.clone(),
        rows: peer.out.rows.clone(),
        sessions,
        secrets: peer.captured_secrets.take().unwrap_or_default(),
    })
}
