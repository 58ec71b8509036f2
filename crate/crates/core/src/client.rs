//! Client driver: hires workers, provisions code and data, collects
//! results and runs the iterative k-means loop.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::job::{self, stage, CodePackage, Offer, OfferedSubscription, Opening, Record};
use crate::kmeans::{self, BoundingBox, KmeansError, Point, StopRule};
use crate::region::{self, Egress, Emitter, RegionError, RegionFault, RegionKeys, SealMode, SealedContext};
use crate::router::{ConnId, Constraint, SubId, SubscriptionRequest};
use crate::script::Role;
use crate::transport::{query_stats, AckStatus, Connection, Frame, TransportError};
use crate::wire::{attr, Envelope, Header, MessageType};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("hiring timed out with {mappers}/{need_mappers} mappers and {reducers}/{need_reducers} reducers")]
    HiringTimeout { mappers: usize, need_mappers: usize, reducers: usize, need_reducers: usize },
    #[error("results timed out after {received} of {expected} reducer EOS")]
    ResultTimeout { received: usize, expected: usize },
    #[error("key {key:?} produced by reducers {first} and {second}")]
    DuplicateKeyAcrossReducers { key: String, first: usize, second: usize },
    #[error("router rejected subscription request {0}")]
    SubscriptionRejected(u64),
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Kmeans(#[from] KmeansError),
    #[error("unexpected k-means result: {0}")]
    BadResult(String),
}

/// Client-side description of a job.
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub job_id: String,
    pub map_script: String,
    pub reduce_script: String,
    pub n_mappers: usize,
    pub n_reducers: usize,
    /// Line-oriented input; each line becomes one MAP_DATATYPE record.
    pub input: Arc<str>,
    pub iterative: bool,
    pub shared_state: Option<Json>,
}

impl JobSpec {
    pub fn new(
        job_id: impl Into<String>,
        map_script: impl Into<String>,
        reduce_script: impl Into<String>,
        n_mappers: usize,
        n_reducers: usize,
        input: impl Into<Arc<str>>,
    ) -> Self {
        JobSpec {
            job_id: job_id.into(),
            map_script: map_script.into(),
            reduce_script: reduce_script.into(),
            n_mappers,
            n_reducers,
            input: input.into(),
            iterative: false,
            shared_state: None,
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: &str| Err(ClientError::InvalidSpec(m.to_owned()));
        if self.job_id.is_empty() {
            return bad("empty job_id");
        }
        if self.map_script.trim().is_empty() || self.reduce_script.trim().is_empty() {
            return bad("scripts must be non-empty");
        }
        if self.n_mappers == 0 || self.n_reducers == 0 {
            return bad("at least one mapper and one reducer are required");
        }
        if self.iterative != self.shared_state.is_some() {
            return bad("shared_state must be present exactly for iterative jobs");
        }
        Ok(())
    }

    pub fn line_count(&self) -> usize {
        self.input.lines().count()
    }
}

#[derive(Debug, Clone)]
struct Hire {
    worker_id: u64,
    subscriptions: Vec<OfferedSubscription>,
}

/// Live state of an opened job.
#[derive(Debug, Clone)]
pub struct JobRun {
    pub job_id: String,
    pub hired_mappers: Vec<u64>,
    pub hired_reducers: Vec<u64>,
    pub eos_from_reducers: usize,
    subscriptions: Vec<SubId>,
    hires: Vec<(Role, usize, Hire)>,
}

/// Declassified job output.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Results(pub BTreeMap<String, Json>);

impl Egress for Results {}

/// Router-side volume counters and client timing for one job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct JobMetrics {
    pub wall_ms: f64,
    pub split_bytes: u64,
    pub shuffle_bytes: u64,
    pub output_bytes: u64,
    pub bytes_unsealed: u64,
}

impl JobMetrics {
    /// Unsealed bytes per second.
    pub fn cache_proxy(&self) -> f64 {
        if self.wall_ms <= 0.0 {
            0.0
        } else {
            self.bytes_unsealed as f64 / (self.wall_ms / 1000.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub results: Results,
    pub hired_mappers: Vec<u64>,
    pub hired_reducers: Vec<u64>,
    pub metrics: JobMetrics,
}

struct Duplicate {
    key: String,
    first: usize,
    second: usize,
}

impl Egress for Duplicate {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Inbound {
    Ignored,
    Stored,
    ReducerDone(usize),
    Duplicate,
}

impl Egress for Inbound {}

#[derive(Default)]
struct ClientState {
    job: Option<String>,
    results: BTreeMap<String, (Json, usize)>,
    reducers_done: BTreeSet<usize>,
    duplicate: Option<(String, usize, usize)>,
}

impl ClientState {
    fn current(&self, h: &Header) -> bool {
        self.job.is_some() && job::job_id_of(h) == self.job.as_deref()
    }

    fn on_collect(&mut self, h: &Header, payload: &[u8]) -> Result<Inbound, RegionFault> {
        if !self.current(h) {
            return Ok(Inbound::Ignored);
        }
        let source = h.get_int(attr::SOURCE).unwrap_or(-1);
        let source = usize::try_from(source).map_err(|_| RegionFault::new("missing source"))?;
        match h.msg_type() {
            MessageType::Result => {
                let rec: Record = job::decode(payload).map_err(RegionFault::new)?;
                if let Some((_, first)) = self.results.get(&rec.key) {
                    self.duplicate = Some((rec.key.clone(), *first, source));
                    return Ok(Inbound::Duplicate);
                }
                self.results.insert(rec.key, (rec.value, source));
                Ok(Inbound::Stored)
            }
            MessageType::Eos if h.get_str(attr::STAGE) == Some(stage::RESULT) => {
                self.reducers_done.insert(source);
                Ok(Inbound::ReducerDone(source))
            }
            _ => Ok(Inbound::Ignored),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub mode: SealMode,
    pub keys: RegionKeys,
    pub hiring_timeout: Duration,
    pub result_timeout: Duration,
    pub patience: Duration,
    /// Query router diagnostics around each job for volume metrics.
    pub metrics: bool,
}

impl ClientConfig {
    pub fn new(mode: SealMode, keys: RegionKeys) -> Self {
        ClientConfig {
            mode,
            keys,
            hiring_timeout: Duration::from_secs(30),
            result_timeout: Duration::from_secs(300),
            patience: Duration::from_secs(10),
            metrics: true,
        }
    }
}

const SEAL_BATCH: usize = 2048;

pub struct Client {
    router: String,
    conn: Connection,
    ctx: SealedContext<ClientState>,
    cfg: ClientConfig,
    next_req: Cell<u64>,
    backlog: RefCell<VecDeque<Frame>>,
}

impl Client {
    pub fn connect(router: impl Into<String>, cfg: ClientConfig) -> Result<Self, ClientError> {
        let router = router.into();
        let conn = Connection::connect(router.as_str(), cfg.patience)?;
        let ctx = SealedContext::new(
            format!("client-{}", conn.conn_id()),
            region::toggle(cfg.mode),
            cfg.keys.clone(),
            ClientState::default(),
        );
        Ok(Client { router, conn, ctx, cfg, next_req: Cell::new(1), backlog: RefCell::new(VecDeque::new()) })
    }

    pub fn id(&self) -> u64 {
        self.conn.conn_id()
    }

    pub fn mode(&self) -> SealMode {
        self.cfg.mode
    }

    fn next_frame(&self, deadline: Instant) -> Result<Option<Frame>, ClientError> {
        if let Some(f) = self.backlog.borrow_mut().pop_front() {
            return Ok(Some(f));
        }
        let left = deadline.saturating_duration_since(Instant::now());
        Ok(self.conn.recv_timeout(left)?)
    }

    fn send_envelopes(&self, envs: Vec<Envelope>) -> Result<(), ClientError> {
        let frames: Vec<Frame> = envs.iter().map(|e| Frame::Publish(Arc::new(e.to_bytes()))).collect();
        self.conn.send_all(&frames)?;
        Ok(())
    }

    fn publish_with(&self, f: impl FnOnce(&mut Emitter)) -> Result<(), ClientError> {
        let ((), envs) = self.ctx.call(|_, em| {
            f(em);
            Ok(())
        })?;
        self.send_envelopes(envs)
    }

    /// Registers subscriptions and waits for every ack. Publications that
    /// arrive meanwhile are kept for later.
    fn subscribe(&self, requests: &[SubscriptionRequest]) -> Result<Vec<SubId>, ClientError> {
        let mut pending = BTreeMap::new();
        let mut frames = Vec::with_capacity(requests.len());
        for (i, req) in requests.iter().enumerate() {
            let req_id = self.next_req.get();
            self.next_req.set(req_id + 1);
            pending.insert(req_id, i);
            let sealed = self.ctx.seal_control(&serde_json::to_vec(req).expect("request json"));
            frames.push(Frame::Subscribe { req_id, sealed });
        }
        self.conn.send_all(&frames)?;
        let mut ids = vec![SubId(0); requests.len()];
        self.await_acks(pending, |i, sub_id, status| match status {
            AckStatus::Ok => {
                ids[i] = SubId(sub_id);
                Ok(())
            }
            _ => Err(ClientError::SubscriptionRejected(i as u64)),
        })?;
        Ok(ids)
    }

    fn unsubscribe(&self, subs: &[SubId]) -> Result<(), ClientError> {
        let mut pending = BTreeMap::new();
        let mut frames = Vec::with_capacity(subs.len());
        for (i, s) in subs.iter().enumerate() {
            let req_id = self.next_req.get();
            self.next_req.set(req_id + 1);
            pending.insert(req_id, i);
            frames.push(Frame::Unsubscribe { req_id, sub_id: s.0 });
        }
        self.conn.send_all(&frames)?;
        self.await_acks(pending, |_, _, _| Ok(()))
    }

    fn await_acks(
        &self,
        mut pending: BTreeMap<u64, usize>,
        mut on_ack: impl FnMut(usize, u64, AckStatus) -> Result<(), ClientError>,
    ) -> Result<(), ClientError> {
        let deadline = Instant::now() + self.cfg.patience;
        while !pending.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.conn.recv_timeout(left)? {
                Some(Frame::Ack { req_id, sub_id, status }) => {
                    if let Some(i) = pending.remove(&req_id) {
                        on_ack(i, sub_id, status)?;
                    }
                }
                Some(other) => self.backlog.borrow_mut().push_back(other),
                None => return Err(TransportError::Timeout("subscription acks").into()),
            }
        }
        Ok(())
    }

    fn own(&self, constraints: Vec<Constraint>) -> SubscriptionRequest {
        SubscriptionRequest { owner: ConnId(self.id()), constraints }
    }

    /// Publishes JOB_OPENING, hires the first volunteers of each role and
    /// registers their subscriptions on their behalf.
    pub fn open_job(&self, spec: &JobSpec) -> Result<JobRun, ClientError> {
        spec.validate()?;
        let job_id = spec.job_id.clone();
        self.ctx.update(|st| {
            *st = ClientState { job: Some(job_id.clone()), ..ClientState::default() };
        });
        let on_job = |ty| vec![Constraint::msg_type(ty), Constraint::eq(attr::JOB_ID, job_id.as_str())];
        let mut result_eos = on_job(MessageType::Eos);
        result_eos.push(Constraint::eq(attr::STAGE, stage::RESULT));
        let subscriptions = self.subscribe(&[
            self.own(on_job(MessageType::JobDetails)),
            self.own(on_job(MessageType::Result)),
            self.own(result_eos),
        ])?;
        let mut run = JobRun {
            job_id: job_id.clone(),
            hired_mappers: Vec::new(),
            hired_reducers: Vec::new(),
            eos_from_reducers: 0,
            subscriptions,
            hires: Vec::new(),
        };

        let opening = Opening { job_id: job_id.clone(), mappers: spec.n_mappers, reducers: spec.n_reducers };
        self.publish_with(|em| em.emit(job::job_opening(&job_id), job::encode(&opening)))?;

        let deadline = Instant::now() + self.cfg.hiring_timeout;
        while run.hired_mappers.len() < spec.n_mappers || run.hired_reducers.len() < spec.n_reducers {
            let bytes = match self.next_frame(deadline)? {
                Some(Frame::Publish(b)) => b,
                Some(_) => continue,
                None => {
                    let _ = self.unsubscribe(&run.subscriptions);
                    return Err(ClientError::HiringTimeout {
                        mappers: run.hired_mappers.len(),
                        need_mappers: spec.n_mappers,
                        reducers: run.hired_reducers.len(),
                        need_reducers: spec.n_reducers,
                    });
                }
            };
            let Ok(env) = Envelope::from_bytes(&bytes) else { continue };
            let offer = self.ctx.enter_with(&env, |st, o, _| {
                if o.msg_type() != MessageType::JobDetails || !st.current(&o.header) {
                    return Ok(None);
                }
                let offer: Offer = job::decode(&o.payload).map_err(RegionFault::new)?;
                Ok(Some(offer))
            });
            let offer = match offer {
                Ok((Some(offer), _)) => offer,
                Ok((None, _)) => continue,
                Err(e) => {
                    log::warn!("client: ignoring publication during hiring: {e}");
                    continue;
                }
            };
            if offer.job_id != job_id || run.hires.iter().any(|(_, _, h)| h.worker_id == offer.worker_id) {
                continue;
            }
            let pick = [(Role::Mapper, spec.n_mappers), (Role::Reducer, spec.n_reducers)].into_iter().find_map(
                |(role, need)| {
                    let have = match role {
                        Role::Mapper => run.hired_mappers.len(),
                        Role::Reducer => run.hired_reducers.len(),
                    };
                    let ro = offer.role(role)?;
                    (have < need).then(|| (role, have, ro.subscriptions.clone()))
                },
            );
            if let Some((role, index, subscriptions)) = pick {
                match role {
                    Role::Mapper => run.hired_mappers.push(offer.worker_id),
                    Role::Reducer => run.hired_reducers.push(offer.worker_id),
                }
                run.hires.push((role, index, Hire { worker_id: offer.worker_id, subscriptions }));
            }
        }

        let requests: Vec<SubscriptionRequest> = run
            .hires
            .iter()
            .flat_map(|(_, index, hire)| {
                hire.subscriptions.iter().map(move |s| SubscriptionRequest {
                    owner: ConnId(hire.worker_id),
                    constraints: s.resolve(*index),
                })
            })
            .collect();
        let ids = self.subscribe(&requests)?;
        run.subscriptions.extend(ids);
        Ok(run)
    }

    /// Sends code to every hired worker, then the input lines round-robin
    /// over mappers, then one EOS per mapper.
    pub fn provision(&self, run: &JobRun, spec: &JobSpec) -> Result<(), ClientError> {
        let job_id = run.job_id.as_str();
        self.publish_with(|em| {
            for (role, index, hire) in &run.hires {
                let (script, peer_count, shared_state) = match role {
                    Role::Mapper => (&spec.map_script, spec.n_reducers, spec.shared_state.clone()),
                    Role::Reducer => (&spec.reduce_script, spec.n_mappers, None),
                };
                let pkg = CodePackage {
                    job_id: job_id.to_owned(),
                    role: *role,
                    index: *index,
                    script: script.clone(),
                    peer_count,
                    shared_state,
                };
                em.emit(job::code(*role, job_id, hire.worker_id), job::encode(&pkg));
            }
        })?;

        let n = run.hired_mappers.len();
        let mut lines = spec.input.lines().enumerate().peekable();
        while lines.peek().is_some() {
            let batch: Vec<(usize, &str)> = lines.by_ref().take(SEAL_BATCH).collect();
            self.publish_with(|em| {
                for (i, line) in batch {
                    let rec = Record { key: i.to_string(), value: Json::String(line.to_owned()) };
                    em.emit(job::map_data(job_id, i % n), job::encode(&rec));
                }
            })?;
        }
        self.publish_with(|em| {
            for m in 0..n {
                em.emit(job::eos(job_id, stage::MAP, m, 0), Vec::new());
            }
        })
    }

    /// Gathers RESULT pairs until every reducer has sent its EOS, then
    /// drops the job's subscriptions.
    pub fn collect(&self, run: &mut JobRun) -> Result<Results, ClientError> {
        let expected = run.hired_reducers.len();
        let deadline = Instant::now() + self.cfg.result_timeout;
        let mut done = BTreeSet::new();
        let outcome = loop {
            if done.len() == expected {
                break Ok(());
            }
            let bytes = match self.next_frame(deadline)? {
                Some(Frame::Publish(b)) => b,
                Some(_) => continue,
                None => break Err(ClientError::ResultTimeout { received: done.len(), expected }),
            };
            let Ok(env) = Envelope::from_bytes(&bytes) else { continue };
            match self.ctx.enter_with(&env, |st, o, _| st.on_collect(&o.header, &o.payload)) {
                Ok((Inbound::ReducerDone(r), _)) => {
                    done.insert(r);
                    run.eos_from_reducers = done.len();
                }
                Ok((Inbound::Duplicate, _)) => {
                    let d = self
                        .ctx
                        .update(|st| st.duplicate.take().map(|(key, first, second)| Duplicate { key, first, second }))
                        .expect("duplicate recorded");
                    break Err(ClientError::DuplicateKeyAcrossReducers { key: d.key, first: d.first, second: d.second });
                }
                Ok(_) => {}
                Err(e) => log::warn!("client: dropping publication: {e}"),
            }
        };
        let results = self.ctx.update(|st| {
            st.job = None;
            Results(std::mem::take(&mut st.results).into_iter().map(|(k, (v, _))| (k, v)).collect())
        });
        self.unsubscribe(&run.subscriptions)?;
        self.backlog.borrow_mut().clear();
        outcome.map(|()| results)
    }

    fn stats(&self) -> Option<Json> {
        if !self.cfg.metrics {
            return None;
        }
        query_stats(self.router.as_str(), Duration::from_secs(5)).ok()
    }

    /// Hire, provision and collect one job, with volume metrics taken from
    /// the router's diagnostics when available.
    pub fn run_job(&self, spec: &JobSpec) -> Result<JobOutcome, ClientError> {
        let before = self.stats();
        let unsealed_before = self.ctx.metrics().bytes_unsealed;
        let t0 = Instant::now();
        let mut run = self.open_job(spec)?;
        self.provision(&run, spec)?;
        let results = self.collect(&mut run)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1000.0;
        let after = self.stats();
        let mut metrics = JobMetrics { wall_ms, ..JobMetrics::default() };
        metrics.bytes_unsealed = self.ctx.metrics().bytes_unsealed - unsealed_before;
        if let (Some(a), Some(b)) = (&before, &after) {
            let delta = |path: &[&str]| -> u64 {
                let get = |v: &Json| path.iter().try_fold(v, |v, p| v.get(p)).and_then(Json::as_u64);
                get(b).unwrap_or(0).saturating_sub(get(a).unwrap_or(0))
            };
            metrics.split_bytes = delta(&["bytes_in", MessageType::MapDataType.name()]);
            metrics.shuffle_bytes = delta(&["bytes_in", MessageType::ReduceDataType.name()]);
            metrics.output_bytes = delta(&["bytes_in", MessageType::Result.name()]);
            metrics.bytes_unsealed += delta(&["region", "bytes_unsealed"]);
        }
        Ok(JobOutcome { results, hired_mappers: run.hired_mappers, hired_reducers: run.hired_reducers, metrics })
    }
}

/// Parameters of an iterative k-means run.
#[derive(Debug, Clone)]
pub struct KmeansJob {
    pub job_prefix: String,
    pub map_script: String,
    pub reduce_script: String,
    pub n_mappers: usize,
    pub n_reducers: usize,
    /// One `x,y` point per line.
    pub input: Arc<str>,
    pub init_centers: Vec<Point>,
    pub rule: StopRule,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub centers: Vec<Point>,
    pub movement: f64,
    pub metrics: JobMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct KmeansOutcome {
    pub centers: Vec<Point>,
    pub iterations: usize,
    pub diagonal: f64,
    pub history: Vec<IterationRecord>,
}

fn parse_centers(results: &Results, old: &[Point]) -> Result<Vec<Point>, ClientError> {
    let mut next = old.to_vec();
    for (key, value) in &results.0 {
        let idx: usize = key.parse().map_err(|_| ClientError::BadResult(format!("key {key:?}")))?;
        if idx >= next.len() {
            return Err(ClientError::BadResult(format!("center index {idx} out of range")));
        }
        let xy = value
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]))
            .ok_or_else(|| ClientError::BadResult(format!("value {value} for key {key}")))?;
        next[idx] = xy;
    }
    Ok(next)
}

pub fn centers_state(centers: &[Point]) -> Json {
    json!({ "centers": centers })
}

/// Runs map/reduce rounds with the current centers as shared state until
/// the mean center movement drops below the threshold.
pub fn run_iterative_kmeans(client: &Client, job: &KmeansJob) -> Result<KmeansOutcome, ClientError> {
    if job.init_centers.is_empty() {
        return Err(KmeansError::ZeroK.into());
    }
    let points = kmeans::parse_points(&job.input)?;
    let diagonal = BoundingBox::of(&points).ok_or(KmeansError::NoPoints)?.diagonal();
    let mut centers = job.init_centers.clone();
    let mut history = Vec::new();
    loop {
        let iteration = history.len() + 1;
        let spec = JobSpec {
            job_id: format!("{}-{iteration}", job.job_prefix),
            map_script: job.map_script.clone(),
            reduce_script: job.reduce_script.clone(),
            n_mappers: job.n_mappers,
            n_reducers: job.n_reducers,
            input: Arc::clone(&job.input),
            iterative: true,
            shared_state: Some(centers_state(&centers)),
        };
        let outcome = client.run_job(&spec)?;
        let next = parse_centers(&outcome.results, &centers)?;
        let movement = kmeans::mean_movement(&centers, &next);
        centers = next;
        history.push(IterationRecord { iteration, centers: centers.clone(), movement, metrics: outcome.metrics });
        log::info!("k-means iteration {iteration}: mean movement {movement:.6e}");
        if job.rule.converged(movement, diagonal) || iteration >= job.rule.max_iterations {
            break;
        }
    }
    Ok(KmeansOutcome { iterations: history.len(), centers, diagonal, history })
}
