//! Worker process runtime.
//!
//! A worker subscribes to JOB_OPENING, answers openings with a JOB_DETAILS
//! offer while idle, and serves one job at a time once code arrives. All
//! plaintext (code, records, staged pairs) lives in the worker's
//! [`SealedContext`]; only sealed envelopes and coarse progress markers
//! leave it.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::Value as Json;
use thiserror::Error;

use crate::job::{self, stage, CodePackage, Offer, Opening, Record, RoleOffer, Shuffled};
use crate::region::{self, Egress, Emitter, Opened, RegionError, RegionFault, RegionKeys, RegionMetrics, SealMode, SealedContext};
use crate::router::{ConnId, Constraint, SubscriptionRequest};
use crate::script::{Pushes, Role, ScriptError, ScriptHost, DEFAULT_BUDGET};
use crate::transport::{AckStatus, Connection, Frame, TransportError};
use crate::wire::{attr, Envelope, Header, MessageType, WireError};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("invalid code package: {0}")]
    InvalidPackage(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl From<WireError> for TaskError {
    fn from(e: WireError) -> Self {
        TaskError::Protocol(e.to_string())
    }
}

impl From<TaskError> for RegionFault {
    fn from(e: TaskError) -> Self {
        RegionFault::new(e)
    }
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("router rejected the JOB_OPENING subscription")]
    SubscriptionRejected,
    #[error("worker thread panicked")]
    Panicked,
}

/// End-of-stream accounting for one input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EosLedger {
    expected: usize,
    received: usize,
}

impl EosLedger {
    pub fn new(expected: usize) -> Self {
        EosLedger { expected, received: 0 }
    }

    /// Counts one EOS; returns whether the stream is now complete.
    pub fn record(&mut self) -> Result<bool, TaskError> {
        if self.received >= self.expected {
            return Err(TaskError::Protocol(format!(
                "EOS {} of {} expected",
                self.received + 1,
                self.expected
            )));
        }
        self.received += 1;
        Ok(self.is_complete())
    }

    pub fn is_complete(&self) -> bool {
        self.received == self.expected
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    pub fn received(&self) -> usize {
        self.received
    }
}

/// Validates a code package for `role` and loads its script.
pub fn load_code(pkg: &CodePackage, role: Role, budget: u64) -> Result<ScriptHost, TaskError> {
    if pkg.role != role {
        return Err(ScriptError::RoleMismatch(format!("package for {} delivered as {role} code", pkg.role)).into());
    }
    if pkg.peer_count == 0 {
        return Err(TaskError::InvalidPackage("peer_count must be at least 1".into()));
    }
    Ok(ScriptHost::load(&pkg.script, role, pkg.shared_state.as_ref(), budget)?)
}

/// Mapper side of a job: map, optional combine, hash and shuffle.
#[derive(Debug)]
pub struct MapStage {
    job_id: String,
    index: usize,
    peer_count: usize,
    host: ScriptHost,
    staged: BTreeMap<String, Vec<Json>>,
    dests: HashMap<String, usize>,
    ledger: EosLedger,
}

impl MapStage {
    pub fn new(pkg: &CodePackage, budget: u64) -> Result<Self, TaskError> {
        Ok(MapStage {
            job_id: pkg.job_id.clone(),
            index: pkg.index,
            peer_count: pkg.peer_count,
            host: load_code(pkg, Role::Mapper, budget)?,
            staged: BTreeMap::new(),
            dests: HashMap::new(),
            ledger: EosLedger::new(1),
        })
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    /// Reducer index for `key`; the script's hash must be pure, so results
    /// are cached per key.
    pub fn dest_of(&mut self, key: &str) -> Result<usize, TaskError> {
        if let Some(d) = self.dests.get(key) {
            return Ok(*d);
        }
        let d = self.host.call_hash(key, self.peer_count)?;
        self.dests.insert(key.to_owned(), d);
        Ok(d)
    }

    /// Runs `map` on one record and stages every push.
    pub fn run_map(&mut self, record: &Record) -> Result<Vec<(usize, String, Json)>, TaskError> {
        let pushes = self.host.call_map(&record.key, &record.value)?;
        let mut out = Vec::with_capacity(pushes.len());
        for (k, v) in pushes {
            let dest = self.dest_of(&k)?;
            self.staged.entry(k.clone()).or_default().push(v.clone());
            out.push((dest, k, v));
        }
        Ok(out)
    }

    pub fn run_combine(&self, key: &str, grouped: &[Json]) -> Result<Pushes, TaskError> {
        let text = serde_json::to_string(grouped).expect("json list");
        Ok(self.host.call_combine(key, &text)?)
    }

    pub fn record_eos(&mut self) -> Result<bool, TaskError> {
        self.ledger.record()
    }

    /// Drains staged pairs into one REDUCE_DATATYPE publication per key.
    /// With a combine step each key carries combine's pushes; without one
    /// it carries the grouped list unchanged.
    pub fn shuffle_out(&mut self) -> Result<Vec<(Header, Vec<u8>)>, TaskError> {
        if !self.ledger.is_complete() {
            return Err(TaskError::Protocol("shuffle before end of input".into()));
        }
        let staged = std::mem::take(&mut self.staged);
        let grouped = if self.host.has_combine() {
            let mut combined: BTreeMap<String, Vec<Json>> = BTreeMap::new();
            for (key, values) in &staged {
                for (k, v) in self.run_combine(key, values)? {
                    combined.entry(k).or_default().push(v);
                }
            }
            combined
        } else {
            staged
        };
        let mut out = Vec::with_capacity(grouped.len());
        for (key, values) in grouped {
            let dest = self.dest_of(&key)?;
            out.push((job::reduce_data(&self.job_id, dest), job::encode(&Shuffled { key, values })));
        }
        Ok(out)
    }

    /// One EOS per reducer, sent after the shuffle.
    pub fn eos_out(&self) -> Vec<Header> {
        (0..self.peer_count).map(|r| job::eos(&self.job_id, stage::REDUCE, r, self.index)).collect()
    }
}

/// Reducer side of a job.
#[derive(Debug)]
pub struct ReduceStage {
    job_id: String,
    index: usize,
    host: ScriptHost,
    ledger: EosLedger,
    groups: BTreeMap<String, Vec<Json>>,
}

impl ReduceStage {
    pub fn new(pkg: &CodePackage, budget: u64) -> Result<Self, TaskError> {
        Ok(ReduceStage {
            job_id: pkg.job_id.clone(),
            index: pkg.index,
            host: load_code(pkg, Role::Reducer, budget)?,
            ledger: EosLedger::new(pkg.peer_count),
            groups: BTreeMap::new(),
        })
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn ledger(&self) -> EosLedger {
        self.ledger
    }

    /// Appends shuffled values in arrival order.
    pub fn accept(&mut self, s: Shuffled) {
        self.groups.entry(s.key).or_default().extend(s.values);
    }

    pub fn record_eos(&mut self) -> Result<bool, TaskError> {
        self.ledger.record()
    }

    pub fn run_reduce(&self, key: &str, grouped: &[Json]) -> Result<Pushes, TaskError> {
        assert!(!grouped.is_empty(), "key {key:?} reached reduce without values");
        let text = serde_json::to_string(grouped).expect("json list");
        Ok(self.host.call_reduce(key, &text)?)
    }

    /// Reduces every key and returns RESULT publications followed by the
    /// reducer's EOS to the client. Refuses to run before every mapper's
    /// EOS has been counted.
    pub fn finish(&mut self) -> Result<Vec<(Header, Vec<u8>)>, TaskError> {
        if !self.ledger.is_complete() {
            return Err(TaskError::Protocol(format!(
                "reduce requested with {} of {} EOS",
                self.ledger.received(),
                self.ledger.expected()
            )));
        }
        let groups = std::mem::take(&mut self.groups);
        let mut out = Vec::new();
        for (key, values) in &groups {
            for (k, v) in self.run_reduce(key, values)? {
                out.push((job::result(&self.job_id, self.index), job::encode(&Record { key: k, value: v })));
            }
        }
        out.push((job::eos(&self.job_id, stage::RESULT, 0, self.index), Vec::new()));
        Ok(out)
    }
}

#[derive(Debug)]
enum Task {
    Map(MapStage),
    Reduce(ReduceStage),
}

impl Task {
    fn job_id(&self) -> &str {
        match self {
            Task::Map(m) => m.job_id(),
            Task::Reduce(r) => r.job_id(),
        }
    }
}

/// Declassified outcome of handling one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Ignored,
    Deferred,
    Volunteered,
    Hired,
    Progress,
    /// Mapper finished its shuffle; its EOS messages are still pending.
    MapInputDone,
    JobDone,
}

impl Egress for Step {}

struct WorkerState {
    id: u64,
    roles: BTreeSet<Role>,
    budget: u64,
    task: Option<Task>,
    deferred: VecDeque<Opened>,
    abandoned: BTreeSet<String>,
    jobs_done: u64,
    faults: u64,
}

impl WorkerState {
    fn handle(&mut self, opened: Opened, em: &mut Emitter) -> Result<Step, RegionFault> {
        let job = job::job_id_of(&opened.header).map(str::to_owned);
        if job.as_ref().is_some_and(|j| self.abandoned.contains(j)) {
            return Ok(Step::Ignored);
        }
        let result = self.dispatch(opened, em);
        if let Err(e) = &result {
            self.faults += 1;
            if let Some(j) = job {
                if self.task.as_ref().is_some_and(|t| t.job_id() == j) {
                    self.task = None;
                }
                log::error!("worker {}: abandoning job {j}: {e}", self.id);
                self.abandoned.insert(j);
            }
        }
        result.map_err(RegionFault::from)
    }

    fn dispatch(&mut self, opened: Opened, em: &mut Emitter) -> Result<Step, TaskError> {
        let job_id = job::job_id_of(&opened.header)
            .ok_or_else(|| TaskError::Protocol("message without job_id".into()))?
            .to_owned();
        match opened.msg_type() {
            MessageType::JobOpening => {
                if self.task.is_some() {
                    return Ok(Step::Ignored);
                }
                let opening: Opening = job::decode(&opened.payload)?;
                let offers = self
                    .roles
                    .iter()
                    .filter(|r| match r {
                        Role::Mapper => opening.mappers > 0,
                        Role::Reducer => opening.reducers > 0,
                    })
                    .map(|&role| RoleOffer { role, subscriptions: job::role_subscriptions(role, &job_id, self.id) })
                    .collect::<Vec<_>>();
                if offers.is_empty() {
                    return Ok(Step::Ignored);
                }
                let offer = Offer { worker_id: self.id, job_id: job_id.clone(), offers };
                em.emit(job::job_details(&job_id, self.id), job::encode(&offer));
                Ok(Step::Volunteered)
            }
            ty @ (MessageType::MapCodeType | MessageType::ReduceCodeType) => {
                if self.task.is_some() {
                    self.deferred.push_back(opened);
                    return Ok(Step::Deferred);
                }
                let role = if ty == MessageType::MapCodeType { Role::Mapper } else { Role::Reducer };
                if !self.roles.contains(&role) {
                    return Err(ScriptError::RoleMismatch(format!("worker does not serve as {role}")).into());
                }
                let pkg: CodePackage = job::decode(&opened.payload)?;
                if pkg.job_id != job_id {
                    return Err(TaskError::InvalidPackage("job_id differs from header".into()));
                }
                self.task = Some(match role {
                    Role::Mapper => Task::Map(MapStage::new(&pkg, self.budget)?),
                    Role::Reducer => Task::Reduce(ReduceStage::new(&pkg, self.budget)?),
                });
                Ok(Step::Hired)
            }
            MessageType::MapDataType | MessageType::ReduceDataType | MessageType::Eos => {
                if self.task.as_ref().map(Task::job_id) != Some(job_id.as_str()) {
                    self.deferred.push_back(opened);
                    return Ok(Step::Deferred);
                }
                self.on_job_message(opened, em)
            }
            _ => Ok(Step::Ignored),
        }
    }

    fn on_job_message(&mut self, opened: Opened, em: &mut Emitter) -> Result<Step, TaskError> {
        let h = &opened.header;
        let task = self.task.as_mut().expect("caller checked the task");
        match (task, opened.msg_type()) {
            (Task::Map(m), MessageType::MapDataType) => {
                let record: Record = job::decode(&opened.payload)?;
                m.run_map(&record)?;
                Ok(Step::Progress)
            }
            (Task::Map(m), MessageType::Eos) if h.get_str(attr::STAGE) == Some(stage::MAP) => {
                if m.record_eos()? {
                    for (header, payload) in m.shuffle_out()? {
                        em.emit(header, payload);
                    }
                    Ok(Step::MapInputDone)
                } else {
                    Ok(Step::Progress)
                }
            }
            (Task::Reduce(r), MessageType::ReduceDataType) => {
                if h.get_int(attr::DEST_ID) != Some(r.index as i64) {
                    return Err(TaskError::Protocol("shuffled pair addressed to another reducer".into()));
                }
                r.accept(job::decode(&opened.payload)?);
                Ok(Step::Progress)
            }
            (Task::Reduce(r), MessageType::Eos) if h.get_str(attr::STAGE) == Some(stage::REDUCE) => {
                if !r.record_eos()? {
                    return Ok(Step::Progress);
                }
                for (header, payload) in r.finish()? {
                    em.emit(header, payload);
                }
                self.task = None;
                self.jobs_done += 1;
                Ok(Step::JobDone)
            }
            (_, ty) => Err(TaskError::Protocol(format!("unexpected {ty} for the current task"))),
        }
    }

    /// Publishes the pending mapper EOS messages and frees the worker.
    fn close_map(&mut self, em: &mut Emitter) -> Result<Step, RegionFault> {
        match self.task.take() {
            Some(Task::Map(m)) => {
                for h in m.eos_out() {
                    em.emit(h, Vec::new());
                }
                self.jobs_done += 1;
                Ok(Step::JobDone)
            }
            other => {
                self.task = other;
                Err(RegionFault::new("no mapper task to close"))
            }
        }
    }

    fn ready_index(&self) -> Option<usize> {
        self.deferred.iter().position(|o| {
            let job = job::job_id_of(&o.header);
            if job.is_some_and(|j| self.abandoned.contains(j)) {
                return true;
            }
            match &self.task {
                Some(t) => job == Some(t.job_id()),
                None => matches!(o.msg_type(), MessageType::MapCodeType | MessageType::ReduceCodeType),
            }
        })
    }

    fn replay(&mut self, em: &mut Emitter) -> Result<Step, RegionFault> {
        match self.ready_index().and_then(|i| self.deferred.remove(i)) {
            Some(o) => self.handle(o, em),
            None => Ok(Step::Ignored),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub mode: SealMode,
    pub keys: RegionKeys,
    pub roles: BTreeSet<Role>,
    pub budget: u64,
    /// Test hook: hold back a mapper's EOS messages after its shuffle.
    pub eos_delay: Duration,
    pub patience: Duration,
}

impl WorkerConfig {
    pub fn new(mode: SealMode, keys: RegionKeys, roles: impl IntoIterator<Item = Role>) -> Self {
        WorkerConfig {
            mode,
            keys,
            roles: roles.into_iter().collect(),
            budget: DEFAULT_BUDGET,
            eos_delay: Duration::ZERO,
            patience: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerReport {
    pub worker_id: u64,
    pub jobs_done: u64,
    pub faults: u64,
    pub region: RegionMetrics,
}

pub struct Worker {
    conn: Connection,
    ctx: SealedContext<WorkerState>,
    eos_delay: Duration,
}

impl Worker {
    /// Connects to the router and volunteers for job openings.
    pub fn connect(router: &str, cfg: WorkerConfig) -> Result<Self, WorkerError> {
        let conn = Connection::connect(router, cfg.patience)?;
        let id = conn.conn_id();
        let state = WorkerState {
            id,
            roles: cfg.roles,
            budget: cfg.budget,
            task: None,
            deferred: VecDeque::new(),
            abandoned: BTreeSet::new(),
            jobs_done: 0,
            faults: 0,
        };
        let ctx = SealedContext::new(format!("worker-{id}"), region::toggle(cfg.mode), cfg.keys, state);
        let worker = Worker { conn, ctx, eos_delay: cfg.eos_delay };
        worker.volunteer(cfg.patience)?;
        Ok(worker)
    }

    pub fn id(&self) -> u64 {
        self.conn.conn_id()
    }

    fn volunteer(&self, patience: Duration) -> Result<(), WorkerError> {
        let req = SubscriptionRequest {
            owner: ConnId(self.id()),
            constraints: vec![Constraint::msg_type(MessageType::JobOpening)],
        };
        let sealed = self.ctx.seal_control(&serde_json::to_vec(&req).expect("request json"));
        self.conn.send(&Frame::Subscribe { req_id: 1, sealed })?;
        let deadline = Instant::now() + patience;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.conn.recv_timeout(left)? {
                Some(Frame::Ack { req_id: 1, status: AckStatus::Ok, .. }) => return Ok(()),
                Some(Frame::Ack { req_id: 1, .. }) => return Err(WorkerError::SubscriptionRejected),
                Some(_) => continue,
                None => return Err(TransportError::Timeout("JOB_OPENING subscription ack").into()),
            }
        }
    }

    /// Serves jobs until `stop` is raised or the router closes the
    /// connection.
    pub fn run(&self, stop: &AtomicBool) -> Result<WorkerReport, WorkerError> {
        while !stop.load(Ordering::Relaxed) {
            match self.conn.recv_timeout(Duration::from_millis(50)) {
                Ok(Some(Frame::Publish(bytes))) => self.on_publication(&bytes)?,
                Ok(Some(_)) | Ok(None) => {}
                Err(TransportError::Closed) => break,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(self.report())
    }

    pub fn report(&self) -> WorkerReport {
        let (jobs_done, faults) = self.ctx.inspect(|s| (s.jobs_done, s.faults));
        WorkerReport { worker_id: self.id(), jobs_done, faults, region: self.ctx.metrics() }
    }

    fn publish(&self, envs: Vec<Envelope>) -> Result<(), WorkerError> {
        if envs.is_empty() {
            return Ok(());
        }
        let frames: Vec<Frame> = envs.iter().map(|e| Frame::Publish(Arc::new(e.to_bytes()))).collect();
        self.conn.send_all(&frames)?;
        Ok(())
    }

    fn on_publication(&self, bytes: &[u8]) -> Result<(), WorkerError> {
        let env = match Envelope::from_bytes(bytes) {
            Ok(env) => env,
            Err(e) => {
                log::warn!("worker {}: undecodable publication: {e}", self.id());
                return Ok(());
            }
        };
        let r = self.ctx.enter_with(&env, |st, opened, em| st.handle(opened, em));
        self.process(r)?;
        while self.ctx.inspect(|st| st.ready_index().is_some()) {
            let r = self.ctx.call(|st, em| st.replay(em));
            self.process(r)?;
        }
        Ok(())
    }

    fn process(&self, r: Result<(Step, Vec<Envelope>), RegionError>) -> Result<(), WorkerError> {
        match r {
            Ok((step, envs)) => {
                self.publish(envs)?;
                if step == Step::MapInputDone {
                    if !self.eos_delay.is_zero() {
                        thread::sleep(self.eos_delay);
                    }
                    let r = self.ctx.call(|st, em| st.close_map(em));
                    return self.process(r);
                }
                Ok(())
            }
            Err(RegionError::RegionFault(msg)) => {
                log::error!("worker {}: {msg}", self.id());
                Ok(())
            }
            Err(e) => {
                log::warn!("worker {}: dropping publication: {e}", self.id());
                Ok(())
            }
        }
    }
}

/// A worker running on its own thread.
pub struct WorkerHandle {
    id: u64,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<WorkerReport, WorkerError>>>,
}

impl WorkerHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stop(mut self) -> Result<WorkerReport, WorkerError> {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().expect("joined once").join().map_err(|_| WorkerError::Panicked)?
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Connects a worker and runs it on a background thread. Returns once the
/// worker has volunteered.
pub fn spawn(router: impl Into<String>, cfg: WorkerConfig) -> Result<WorkerHandle, WorkerError> {
    let router = router.into();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let (tx, rx) = mpsc::channel();
    let thread = thread::Builder::new()
        .name("sealmr-worker".into())
        .spawn(move || {
            let worker = match Worker::connect(&router, cfg) {
                Ok(w) => {
                    let _ = tx.send(Ok(w.id()));
                    w
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return Ok(WorkerReport { worker_id: 0, jobs_done: 0, faults: 0, region: RegionMetrics::default() });
                }
            };
            worker.run(&flag)
        })
        .map_err(TransportError::Io)?;
    match rx.recv() {
        Ok(Ok(id)) => Ok(WorkerHandle { id, stop, thread: Some(thread) }),
        Ok(Err(e)) => {
            let _ = thread.join();
            Err(e)
        }
        Err(_) => Err(WorkerError::Panicked),
    }
}
