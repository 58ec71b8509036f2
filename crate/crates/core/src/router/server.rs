//! TCP front end of the router.
//!
//! One event loop owns the sealed subscription store; every connection has a
//! reader thread feeding that loop and a writer thread draining its own
//! outbox, so delivery is reliable and FIFO per connection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{ConnId, SubId, SubscriptionRequest, SubscriptionStore};
use crate::region::{toggle, RegionError, RegionFault, RegionKeys, RegionMetrics, SealMode, SealedContext};
use crate::transport::{kind, read_frame, AckStatus, Frame};
use crate::wire::{Envelope, MessageType, WireError};

#[derive(Debug, Clone)]
pub struct RouterConfig {
    pub listen: String,
    pub mode: SealMode,
    pub keys: RegionKeys,
    /// Keep every frame crossing the router in memory (tests, leak checks).
    pub capture: bool,
    /// Also append captured frames to this file.
    pub capture_file: Option<PathBuf>,
}

impl RouterConfig {
    pub fn new(listen: impl Into<String>, mode: SealMode, keys: RegionKeys) -> Self {
        RouterConfig { listen: listen.into(), mode, keys: keys.router_only(), capture: false, capture_file: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    In,
    Out,
}

/// A frame as seen on the router's sockets.
#[derive(Debug, Clone)]
pub struct CapturedFrame {
    pub at: Duration,
    pub dir: Direction,
    pub conn: ConnId,
    pub kind: u8,
    /// Transport frame body (for PUBLISH: the envelope wire frame).
    pub body: Arc<Vec<u8>>,
}

impl CapturedFrame {
    /// Plaintext framing tag of a PUBLISH frame.
    pub fn msg_type(&self) -> Option<MessageType> {
        if self.kind != kind::PUBLISH {
            return None;
        }
        self.body.first().and_then(|c| MessageType::from_code(*c).ok())
    }
}

#[derive(Default)]
pub struct Capture {
    frames: Mutex<Vec<CapturedFrame>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl Capture {
    fn record(&self, frame: CapturedFrame) {
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap_or_else(|e| e.into_inner());
            let mut rec = Vec::with_capacity(22 + frame.body.len());
            rec.extend_from_slice(&(frame.at.as_nanos() as u64).to_be_bytes());
            rec.push(matches!(frame.dir, Direction::Out) as u8);
            rec.extend_from_slice(&frame.conn.0.to_be_bytes());
            rec.push(frame.kind);
            rec.extend_from_slice(&(frame.body.len() as u32).to_be_bytes());
            rec.extend_from_slice(&frame.body);
            if let Err(e) = w.write_all(&rec) {
                log::warn!("capture write failed: {e}");
            }
        }
        self.frames.lock().unwrap_or_else(|e| e.into_inner()).push(frame);
    }

    pub fn snapshot(&self) -> Vec<CapturedFrame> {
        self.frames.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn clear(&self) {
        self.frames.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }

    fn flush(&self) {
        if let Some(sink) = &self.sink {
            let _ = sink.lock().unwrap_or_else(|e| e.into_inner()).flush();
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RouterStats {
    pub mode: String,
    pub connections: u64,
    pub registrations: u64,
    pub unregistrations: u64,
    pub rejected_subscriptions: u64,
    pub active_subscriptions: usize,
    pub publications: u64,
    pub matches: u64,
    pub forwards: u64,
    pub dropped_no_match: u64,
    pub dead_connections: u64,
    pub auth_failures: u64,
    pub parse_failures: u64,
    pub frames_in: BTreeMap<String, u64>,
    pub bytes_in: BTreeMap<String, u64>,
    pub bytes_out: BTreeMap<String, u64>,
    pub region: RegionMetrics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardReport {
    pub delivered: usize,
    pub dead: usize,
}

/// Per-connection outboxes.
#[derive(Default)]
pub struct Switchboard {
    outboxes: HashMap<ConnId, Sender<Arc<Vec<u8>>>>,
}

impl Switchboard {
    pub fn attach(&mut self, conn: ConnId, outbox: Sender<Arc<Vec<u8>>>) {
        self.outboxes.insert(conn, outbox);
    }

    pub fn detach(&mut self, conn: ConnId) -> bool {
        self.outboxes.remove(&conn).is_some()
    }

    pub fn is_live(&self, conn: ConnId) -> bool {
        self.outboxes.contains_key(&conn)
    }

    pub fn send(&mut self, conn: ConnId, frame: Arc<Vec<u8>>) -> bool {
        match self.outboxes.get(&conn) {
            Some(tx) if tx.send(frame).is_ok() => true,
            Some(_) => {
                self.outboxes.remove(&conn);
                false
            }
            None => false,
        }
    }

    /// Hands the same encoded frame to every target. Targets whose
    /// connection is gone are skipped and counted.
    pub fn forward(&mut self, frame: &Arc<Vec<u8>>, targets: &BTreeSet<ConnId>) -> ForwardReport {
        let mut report = ForwardReport::default();
        for t in targets {
            if self.send(*t, Arc::clone(frame)) {
                report.delivered += 1;
            } else {
                report.dead += 1;
            }
        }
        report
    }
}

enum Event {
    Connected { conn: ConnId, outbox: Sender<Arc<Vec<u8>>>, loopback: bool },
    Frame { conn: ConnId, kind: u8, body: Vec<u8> },
    Disconnected { conn: ConnId },
    Shutdown,
}

struct RouterCore {
    ctx: SealedContext<SubscriptionStore>,
    board: Switchboard,
    stats: RouterStats,
    loopback: HashMap<ConnId, bool>,
    capture: Option<Arc<Capture>>,
    started: Instant,
}

impl RouterCore {
    fn capture(&self, dir: Direction, conn: ConnId, kind: u8, body: &Arc<Vec<u8>>) {
        if let Some(c) = &self.capture {
            c.record(CapturedFrame { at: self.started.elapsed(), dir, conn, kind, body: Arc::clone(body) });
        }
    }

    fn reply(&mut self, conn: ConnId, frame: Frame) {
        self.board.send(conn, Arc::new(frame.encode()));
    }

    fn handle(&mut self, conn: ConnId, kind: u8, body: Vec<u8>) {
        let body = Arc::new(body);
        self.capture(Direction::In, conn, kind, &body);
        match kind {
            kind::PUBLISH => self.publish(conn, body),
            kind::SUBSCRIBE | kind::UNSUBSCRIBE | kind::STATS_REQ => {
                match Frame::decode(kind, body.as_ref().clone()) {
                    Ok(Frame::Subscribe { req_id, sealed }) => self.subscribe(conn, req_id, &sealed),
                    Ok(Frame::Unsubscribe { req_id, sub_id }) => self.unsubscribe(conn, req_id, SubId(sub_id)),
                    Ok(Frame::StatsRequest) => {
                        if self.loopback.get(&conn).copied().unwrap_or(false) {
                            let json = serde_json::to_string(&self.snapshot_stats()).expect("stats serialize");
                            self.reply(conn, Frame::Stats(json));
                        }
                    }
                    Ok(_) => unreachable!("decoded kind matches"),
                    Err(e) => {
                        self.stats.parse_failures += 1;
                        log::warn!("{conn}: bad control frame: {e}");
                    }
                }
            }
            other => {
                self.stats.parse_failures += 1;
                log::warn!("{conn}: unexpected frame kind {other:#04x}");
            }
        }
    }

    fn publish(&mut self, conn: ConnId, body: Arc<Vec<u8>>) {
        self.stats.publications += 1;
        let env = match Envelope::from_bytes(&body) {
            Ok(env) => env,
            Err(e) => {
                self.stats.parse_failures += 1;
                log::warn!("{conn}: undecodable publication: {e}");
                return;
            }
        };
        let name = env.msg_type.name().to_owned();
        *self.stats.frames_in.entry(name.clone()).or_default() += 1;
        *self.stats.bytes_in.entry(name.clone()).or_default() += body.len() as u64;
        let targets = match self.ctx.enter_header(&env, |store, header| store.match_header(header)) {
            Ok(t) => t,
            Err(RegionError::Wire(WireError::AuthFailure)) => {
                // drop and count
                self.stats.auth_failures += 1;
                log::warn!("{conn}: publication failed authentication, dropped");
                return;
            }
            Err(e) => {
                self.stats.parse_failures += 1;
                log::warn!("{conn}: publication rejected: {e}");
                return;
            }
        };
        if targets.is_empty() {
            self.stats.dropped_no_match += 1;
            return;
        }
        self.stats.matches += targets.len() as u64;
        let frame = Arc::new(Frame::Publish(Arc::clone(&body)).encode());
        let report = self.board.forward(&frame, &targets);
        self.stats.forwards += report.delivered as u64;
        self.stats.dead_connections += report.dead as u64;
        *self.stats.bytes_out.entry(name).or_default() += (body.len() * report.delivered) as u64;
        if self.capture.is_some() {
            for t in targets.iter().filter(|t| self.board.is_live(**t)) {
                self.capture(Direction::Out, *t, kind::PUBLISH, &body);
            }
        }
    }

    fn subscribe(&mut self, conn: ConnId, req_id: u64, sealed: &[u8]) {
        let board = &self.board;
        let result = self.ctx.enter_control(sealed, |store, plaintext| {
            let req: SubscriptionRequest =
                serde_json::from_slice(plaintext).map_err(|e| RegionFault::new(format!("subscription json: {e}")))?;
            if !board.is_live(req.owner) {
                return Err(RegionFault::new(format!("owner {} is not connected", req.owner)));
            }
            store.register_request(req).map_err(RegionFault::new)
        });
        let (sub_id, status) = match result {
            Ok(id) => {
                self.stats.registrations += 1;
                (id.0, AckStatus::Ok)
            }
            Err(e) => {
                if matches!(e, RegionError::Wire(WireError::AuthFailure)) {
                    self.stats.auth_failures += 1;
                }
                self.stats.rejected_subscriptions += 1;
                log::warn!("{conn}: subscription rejected: {e}");
                (0, AckStatus::Rejected)
            }
        };
        self.reply(conn, Frame::Ack { req_id, sub_id, status });
    }

    fn unsubscribe(&mut self, conn: ConnId, req_id: u64, sub_id: SubId) {
        let removed = self.ctx.update(|store| store.unregister(sub_id).is_some());
        let status = if removed {
            self.stats.unregistrations += 1;
            AckStatus::Ok
        } else {
            AckStatus::NotFound
        };
        self.reply(conn, Frame::Ack { req_id, sub_id: sub_id.0, status });
    }

    fn disconnect(&mut self, conn: ConnId) {
        self.board.detach(conn);
        self.loopback.remove(&conn);
        let dropped = self.ctx.update(|store| store.remove_owner(conn));
        log::debug!("{conn} disconnected, {dropped} subscriptions dropped");
    }

    fn snapshot_stats(&self) -> RouterStats {
        let mut s = self.stats.clone();
        s.active_subscriptions = self.ctx.inspect(|store| store.len());
        s.region = self.ctx.metrics();
        s
    }
}

/// Handle to an in-process router.
pub struct RouterHandle {
    addr: SocketAddr,
    events: Sender<Event>,
    stop: Arc<AtomicBool>,
    capture: Option<Arc<Capture>>,
    streams: Arc<Mutex<HashMap<ConnId, TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl RouterHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn capture(&self) -> Option<Arc<Capture>> {
        self.capture.clone()
    }

    /// Severs a connection as if the peer vanished.
    pub fn kill_connection(&self, conn: ConnId) {
        if let Some(s) = self.streams.lock().unwrap_or_else(|e| e.into_inner()).get(&conn) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    /// Blocks until the router stops (binary entry point).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn stop_threads(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.events.send(Event::Shutdown);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        for (_, s) in self.streams.lock().unwrap_or_else(|e| e.into_inner()).drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(c) = &self.capture {
            c.flush();
        }
    }
}

impl Drop for RouterHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop_threads();
        }
    }
}

pub struct Router;

impl Router {
    /// Binds and starts the router on background threads.
    pub fn spawn(config: RouterConfig) -> io::Result<RouterHandle> {
        let listener = TcpListener::bind(&config.listen)?;
        let addr = listener.local_addr()?;
        let capture = if config.capture || config.capture_file.is_some() {
            let sink = match &config.capture_file {
                Some(p) => Some(Mutex::new(BufWriter::new(File::create(p)?))),
                None => None,
            };
            Some(Arc::new(Capture { frames: Mutex::new(Vec::new()), sink }))
        } else {
            None
        };
        let (events_tx, events_rx) = mpsc::channel::<Event>();
        let stop = Arc::new(AtomicBool::new(false));
        let streams: Arc<Mutex<HashMap<ConnId, TcpStream>>> = Arc::default();

        let core = RouterCore {
            ctx: SealedContext::new(
                "router",
                toggle(config.mode),
                config.keys.router_only(),
                SubscriptionStore::new(),
            ),
            board: Switchboard::default(),
            stats: RouterStats { mode: config.mode.to_string(), ..Default::default() },
            loopback: HashMap::new(),
            capture: capture.clone(),
            started: Instant::now(),
        };
        let streams_for_loop = Arc::clone(&streams);
        let event_loop = thread::Builder::new()
            .name("sealmr-router".into())
            .spawn(move || run_event_loop(core, events_rx, streams_for_loop))?;

        let accept_tx = events_tx.clone();
        let accept_stop = Arc::clone(&stop);
        let accept_streams = Arc::clone(&streams);
        let acceptor = thread::Builder::new()
            .name("sealmr-router-accept".into())
            .spawn(move || accept_loop(listener, accept_tx, accept_stop, accept_streams))?;

        Ok(RouterHandle {
            addr,
            events: events_tx,
            stop,
            capture,
            streams,
            threads: vec![acceptor, event_loop],
        })
    }
}

fn run_event_loop(mut core: RouterCore, events: Receiver<Event>, streams: Arc<Mutex<HashMap<ConnId, TcpStream>>>) {
    while let Ok(ev) = events.recv() {
        match ev {
            Event::Connected { conn, outbox, loopback } => {
                core.stats.connections += 1;
                core.board.attach(conn, outbox);
                core.loopback.insert(conn, loopback);
                core.reply(conn, Frame::Hello { conn_id: conn.0 });
            }
            Event::Frame { conn, kind, body } => core.handle(conn, kind, body),
            Event::Disconnected { conn } => {
                core.disconnect(conn);
                streams.lock().unwrap_or_else(|e| e.into_inner()).remove(&conn);
            }
            Event::Shutdown => break,
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    events: Sender<Event>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<HashMap<ConnId, TcpStream>>>,
) {
    let mut next = 0u64;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        next += 1;
        let conn = ConnId(next);
        if let Err(e) = start_connection(conn, stream, &events, &streams) {
            log::warn!("{conn}: setup failed: {e}");
        }
    }
}

fn start_connection(
    conn: ConnId,
    stream: TcpStream,
    events: &Sender<Event>,
    streams: &Arc<Mutex<HashMap<ConnId, TcpStream>>>,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let loopback = stream.peer_addr().map(|a| a.ip().is_loopback()).unwrap_or(false);
    let (out_tx, out_rx) = mpsc::channel::<Arc<Vec<u8>>>();
    let write_half = stream.try_clone()?;
    let read_half = stream.try_clone()?;
    streams.lock().unwrap_or_else(|e| e.into_inner()).insert(conn, stream);
    // Connected must reach the loop before any frame from this peer.
    let _ = events.send(Event::Connected { conn, outbox: out_tx, loopback });

    thread::Builder::new().name(format!("sealmr-w{}", conn.0)).spawn(move || {
        let mut w = BufWriter::with_capacity(1 << 16, write_half);
        while let Ok(frame) = out_rx.recv() {
            if w.write_all(&frame).is_err() {
                return;
            }
            // drain whatever is queued before flushing
            while let Ok(more) = out_rx.try_recv() {
                if w.write_all(&more).is_err() {
                    return;
                }
            }
            if w.flush().is_err() {
                return;
            }
        }
    })?;

    let events = events.clone();
    thread::Builder::new().name(format!("sealmr-r{}", conn.0)).spawn(move || {
        let mut r = BufReader::with_capacity(1 << 16, read_half);
        while let Ok(Some((kind, body))) = read_frame(&mut r) {
            if events.send(Event::Frame { conn, kind, body }).is_err() {
                return;
            }
        }
        let _ = events.send(Event::Disconnected { conn });
    })?;
    Ok(())
}
