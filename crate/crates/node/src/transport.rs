//! Framed transport over any ordered byte stream, with optional recording
//! of every frame for transcript audits.

use crate::error::NodeError;
use plink_core::wire::{Frame, Header, HEADER_LEN};
use std::sync::{Arc, Mutex};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, Default)]
pub struct Recorder(Arc<Mutex<Vec<(Direction, Frame)>>>);

impl Recorder {
    pub fn frames(&self) -> Vec<(Direction, Frame)> {
        self.0.lock().unwrap().clone()
    }

    fn push(&self, d: Direction, f: &Frame) {
        self.0.lock().unwrap().push((d, f.clone()));
    }
}

pub struct Transport<S> {
    stream: BufStream<S>,
    recorder: Option<Recorder>,
}

impl<S: AsyncRead + AsyncWrite + Unpin + Send> Transport<S> {
    pub fn new(stream: S, recorder: Option<Recorder>) -> Self {
        Self {
            stream: BufStream::with_capacity(1 << 16, 1 << 16, stream),
            recorder,
        }
    }

    pub async fn send(&mut self, frame: Frame) -> Result<(), NodeError> {
        if let Some(r) = &self.recorder {
            r.push(Direction::Sent, &frame);
        }
        self.stream.write_all(&frame.header_bytes()).await?;
        self.stream.write_all(&frame.payload).await?;
        self.stream.flush().await?;
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<Frame, NodeError> {
        let mut h = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut h).await?;
        let h = Header::parse(&h)?;
        let mut payload = vec![0u8; h.payload_len as usize];
        self.stream.read_exact(&mut payload).await?;
        let frame = Frame::new(h.msg_type, h.block_id, payload);
        if let Some(r) = &self.recorder {
            r.push(Direction::Received, &frame);
        }
        Ok(frame)
    }

    pub async fn shutdown(&mut self) {
        let _ = self.stream.shutdown().await;
    }
}
