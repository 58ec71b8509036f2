//! Reliable ordered frame transport over TCP.
//!
//! Transport frames wrap the envelope wire format with a kind byte and a
//! length so that control traffic (subscriptions, acks, diagnostics) can
//! share the connection:
//!
//! ```text
//! [1 kind][4 BE body len][body]
//!   0x01 HELLO        body = [8 conn_id]                     router -> peer
//!   0x02 PUBLISH      body = envelope wire frame             both ways
//!   0x03 SUBSCRIBE    body = [8 req_id][sealed subscription] peer -> router
//!   0x04 UNSUBSCRIBE  body = [8 req_id][8 sub_id]            peer -> router
//!   0x05 ACK          body = [8 req_id][8 sub_id][1 status]  router -> peer
//!   0x06 STATS_REQ    body = empty                           peer -> router
//!   0x07 STATS        body = JSON diagnostics (plaintext)    router -> peer
//! ```

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::wire::{Reader, WireError};

pub const MAX_FRAME: usize = 256 << 20;

pub mod kind {
    pub const HELLO: u8 = 0x01;
    pub const PUBLISH: u8 = 0x02;
    pub const SUBSCRIBE: u8 = 0x03;
    pub const UNSUBSCRIBE: u8 = 0x04;
    pub const ACK: u8 = 0x05;
    pub const STATS_REQ: u8 = 0x06;
    pub const STATS: u8 = 0x07;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AckStatus {
    Ok = 0,
    Rejected = 1,
    NotFound = 2,
}

impl AckStatus {
    fn from_code(c: u8) -> Result<Self, WireError> {
        match c {
            0 => Ok(AckStatus::Ok),
            1 => Ok(AckStatus::Rejected),
            2 => Ok(AckStatus::NotFound),
            _ => Err(WireError::ParseFailure(format!("bad ack status {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello { conn_id: u64 },
    /// Raw envelope bytes, forwarded untouched by the router.
    Publish(Arc<Vec<u8>>),
    Subscribe { req_id: u64, sealed: Vec<u8> },
    Unsubscribe { req_id: u64, sub_id: u64 },
    Ack { req_id: u64, sub_id: u64, status: AckStatus },
    StatsRequest,
    Stats(String),
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::Hello { .. } => kind::HELLO,
            Frame::Publish(_) => kind::PUBLISH,
            Frame::Subscribe { .. } => kind::SUBSCRIBE,
            Frame::Unsubscribe { .. } => kind::UNSUBSCRIBE,
            Frame::Ack { .. } => kind::ACK,
            Frame::StatsRequest => kind::STATS_REQ,
            Frame::Stats(_) => kind::STATS,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Frame::Hello { conn_id } => body.extend_from_slice(&conn_id.to_be_bytes()),
            Frame::Publish(bytes) => body.extend_from_slice(bytes),
            Frame::Subscribe { req_id, sealed } => {
                body.extend_from_slice(&req_id.to_be_bytes());
                body.extend_from_slice(sealed);
            }
            Frame::Unsubscribe { req_id, sub_id } => {
                body.extend_from_slice(&req_id.to_be_bytes());
                body.extend_from_slice(&sub_id.to_be_bytes());
            }
            Frame::Ack { req_id, sub_id, status } => {
                body.extend_from_slice(&req_id.to_be_bytes());
                body.extend_from_slice(&sub_id.to_be_bytes());
                body.push(*status as u8);
            }
            Frame::StatsRequest => {}
            Frame::Stats(json) => body.extend_from_slice(json.as_bytes()),
        }
        let mut out = Vec::with_capacity(5 + body.len());
        out.push(self.kind());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(kind: u8, body: Vec<u8>) -> Result<Frame, WireError> {
        let mut r = Reader::new(&body);
        let frame = match kind {
            kind::HELLO => Frame::Hello { conn_id: r.u64()? },
            kind::PUBLISH => return Ok(Frame::Publish(Arc::new(body))),
            kind::SUBSCRIBE => {
                let req_id = r.u64()?;
                Frame::Subscribe { req_id, sealed: r.rest().to_vec() }
            }
            kind::UNSUBSCRIBE => Frame::Unsubscribe { req_id: r.u64()?, sub_id: r.u64()? },
            kind::ACK => Frame::Ack {
                req_id: r.u64()?,
                sub_id: r.u64()?,
                status: AckStatus::from_code(r.u8()?)?,
            },
            kind::STATS_REQ => Frame::StatsRequest,
            kind::STATS => {
                let s = String::from_utf8(r.rest().to_vec())
                    .map_err(|_| WireError::ParseFailure("stats not utf-8".into()))?;
                Frame::Stats(s)
            }
            k => return Err(WireError::ParseFailure(format!("unknown transport frame kind {k:#04x}"))),
        };
        r.finish()?;
        Ok(frame)
    }
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut head = [0u8; 5];
    match r.read_exact(&mut head[..1]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut head[1..])?;
    let len = u32::from_be_bytes(head[1..5].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds size limit"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some((head[0], body)))
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("router unreachable: {0}")]
    RouterUnreachable(#[source] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

/// Client side of a router connection: a writer plus a reader thread
/// feeding an inbox.
pub struct Connection {
    conn_id: u64,
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    inbox: Receiver<Frame>,
}

impl Connection {
    /// Connects, retrying for up to `patience`, and waits for HELLO.
    pub fn connect(addr: impl ToSocketAddrs + Clone, patience: Duration) -> Result<Self, TransportError> {
        let deadline = Instant::now() + patience;
        let stream = loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => break s,
                Err(e) if Instant::now() >= deadline => return Err(TransportError::RouterUnreachable(e)),
                Err(_) => thread::sleep(Duration::from_millis(25)),
            }
        };
        stream.set_nodelay(true)?;
        let reader_stream = stream.try_clone()?;
        let (tx, inbox) = mpsc::channel();
        thread::Builder::new()
            .name("sealmr-conn-reader".into())
            .spawn(move || {
                let mut r = BufReader::with_capacity(1 << 16, reader_stream);
                while let Ok(Some((k, body))) = read_frame(&mut r) {
                    match Frame::decode(k, body) {
                        Ok(f) => {
                            if tx.send(f).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            log::warn!("dropping undecodable frame: {e}");
                        }
                    }
                }
            })?;
        let mut conn = Connection {
            conn_id: 0,
            writer: Mutex::new(BufWriter::with_capacity(1 << 16, stream.try_clone()?)),
            stream,
            inbox,
        };
        match conn.inbox.recv_timeout(patience.max(Duration::from_secs(5))) {
            Ok(Frame::Hello { conn_id }) => {
                conn.conn_id = conn_id;
                Ok(conn)
            }
            Ok(other) => Err(TransportError::Protocol(format!("expected HELLO, got kind {:#04x}", other.kind()))),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout("HELLO")),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    pub fn conn_id(&self) -> u64 {
        self.conn_id
    }

    pub fn send(&self, frame: &Frame) -> Result<(), TransportError> {
        self.send_all(std::iter::once(frame))
    }

    /// Writes frames back to back and flushes once.
    pub fn send_all<'a>(&self, frames: impl IntoIterator<Item = &'a Frame>) -> Result<(), TransportError> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        for f in frames {
            w.write_all(&f.encode())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn recv(&self) -> Result<Frame, TransportError> {
        self.inbox.recv().map_err(|_| TransportError::Closed)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Frame>, TransportError> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    pub fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}

/// One-shot diagnostics query against a router.
pub fn query_stats(addr: impl ToSocketAddrs + Clone, timeout: Duration) -> Result<serde_json::Value, TransportError> {
    let conn = Connection::connect(addr, timeout)?;
    conn.send(&Frame::StatsRequest)?;
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match conn.recv_timeout(left)? {
            Some(Frame::Stats(s)) => {
                return serde_json::from_str(&s).map_err(|e| TransportError::Protocol(e.to_string()))
            }
            Some(_) => continue,
            None => return Err(TransportError::Timeout("STATS")),
        }
    }
}
