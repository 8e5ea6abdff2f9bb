#![allow(dead_code)]

use plink_core::config::{parse_override, RunConfig};
use plink_core::wire::{Header, KeyDigest, MsgType, HEADER_LEN};
use plink_node::node::{run_node, NodeOptions, NodeSummary};
use plink_node::source::SimulatedSource;
use plink_node::NodeError;
use plink_core::wire::Role;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;

/// Default setup with short blocks so network tests stay fast.
pub fn cfg(extra: &[&str]) -> RunConfig {
    let mut ov = vec![parse_override("protocol.block_s=5").unwrap()];
    ov.extend(extra.iter().map(|s| parse_override(s).unwrap()));
    RunConfig::from_json_with(None, &ov).unwrap()
}

/// Where the proxy drops a connection instead of forwarding a frame.
#[derive(Debug, Clone, Copy)]
pub struct Cut {
    pub from_bob: bool,
    pub msg: MsgType,
    pub block: u32,
    pub digest_stage: Option<u8>,
}

impl Cut {
    fn hits(&self, from_bob: bool, h: &Header, payload: &[u8]) -> bool {
        self.from_bob == from_bob
            && h.msg_type == self.msg
            && h.block_id == self.block
            && self
                .digest_stage
                .map_or(true, |s| KeyDigest::decode(payload).is_ok_and(|d| d.stage as u8 == s))
    }
}

async fn pump<R, W>(mut r: R, mut w: W, from_bob: bool, cut: Option<Cut>, armed: Arc<AtomicBool>)
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    loop {
        let mut hb = [0u8; HEADER_LEN];
        if r.read_exact(&mut hb).await.is_err() {
            return;
        }
        let Ok(h) = Header::parse(&hb) else { return };
        let mut payload = vec![0u8; h.payload_len as usize];
        if r.read_exact(&mut payload).await.is_err() {
            return;
        }
        if let Some(c) = cut {
            if c.hits(from_bob, &h, &payload) && armed.swap(false, Ordering::SeqCst) {
                return;
            }
        }
        if w.write_all(&hb).await.is_err() || w.write_all(&payload).await.is_err() {
            return;
        }
    }
}

/// Frame-aware TCP proxy that kills the first connection at `cut` and
/// forwards everything afterwards.
pub async fn proxy(upstream: SocketAddr, cut: Option<Cut>) -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    let armed = Arc::new(AtomicBool::new(true));
    tokio::spawn(async move {
        while let Ok((a, _)) = l.accept().await {
            let Ok(b) = TcpStream::connect(upstream).await else { continue };
            let armed = armed.clone();
            tokio::spawn(async move {
                let (ar, aw) = a.into_split();
                let (br, bw) = b.into_split();
                tokio::select! {
                    _ = pump(ar, bw, false, cut, armed.clone()) => {}
                    _ = pump(br, aw, true, cut, armed) => {}
                }
            });
        }
    });
    addr
}

pub struct Pair {
    pub alice: Result<NodeSummary, NodeError>,
    pub bob: Result<NodeSummary, NodeError>,
}

/// Runs Alice and Bob over loopback TCP, optionally through a cutting proxy.
pub async fn run_pair(mut a: RunConfig, b: RunConfig, blocks: u32, dir: Option<&Path>, cut: Option<Cut>) -> Pair {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let bob_addr = listener.local_addr().unwrap();
    let target = match cut {
        Some(_) => proxy(bob_addr, cut).await,
        None => bob_addr,
    };
    a.net.peer = target.to_string();
    a.net.max_backoff_ms = 200;
    let (_tx, rx) = watch::channel(false);
    let opts = |rx: watch::Receiver<bool>| {
        let mut o = NodeOptions::new(rx);
        o.blocks = Some(blocks);
        o.out_dir = dir.map(Path::to_path_buf);
        o
    };
    let mut ob = opts(rx.clone());
    ob.listener = Some(listener);
    let oa = opts(rx);
    let sa = Arc::new(SimulatedSource::new(&a).unwrap());
    let sb = Arc::new(SimulatedSource::new(&b).unwrap());
    let run = async {
        tokio::join!(
            run_node(Role::Alice, a, sa, oa),
            run_node(Role::Bob, b, sb, ob)
        )
    };
    let (alice, bob) = tokio::time::timeout(Duration::from_secs(120), run)
        .await
        .expect("nodes did not finish");
    Pair { alice, bob }
}
