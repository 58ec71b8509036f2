//! Headers and payloads of the job protocol.
//!
//! Session establishment:
//!
//! ```text
//! worker  --sub {JOB_OPENING}------------------------------------> router
//! client  --sub {JOB_DETAILS, job_id}----------------------------> router
//! client  --pub JOB_OPENING {job_id}-----------------------------> workers
//! worker  --pub JOB_DETAILS {job_id, worker_id} + Offer----------> client
//! client  --sub on the worker's behalf (owner = worker)----------> router
//! ```
//!
//! Provisioning then publishes MAP_CODETYPE / REDUCE_CODETYPE addressed by
//! `worker_id`, input lines as MAP_DATATYPE addressed by `dest_id`, and one
//! EOS per mapper. Mappers shuffle REDUCE_DATATYPE to reducers and close
//! each reducer stream with an EOS; reducers publish RESULT pairs followed by
//! one EOS to the client.

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::region::Egress;
use crate::router::Constraint;
use crate::script::Role;
use crate::wire::{attr, Header, MessageType, WireError};

/// Values of the `stage` attribute on EOS messages.
pub mod stage {
    /// Client to mapper: input lines are complete.
    pub const MAP: &str = "map";
    /// Mapper to reducer: shuffle stream is complete.
    pub const REDUCE: &str = "reduce";
    /// Reducer to client: results are complete.
    pub const RESULT: &str = "result";
}

/// Attribute the client binds to the hired index when registering an
/// offered subscription.
pub mod bind {
    pub const DEST_ID: &str = "dest_id";
    pub const TARGET: &str = "target";
}

pub fn job_opening(job_id: &str) -> Header {
    Header::new(MessageType::JobOpening).with(attr::JOB_ID, job_id)
}

pub fn job_details(job_id: &str, worker_id: u64) -> Header {
    Header::new(MessageType::JobDetails).with(attr::JOB_ID, job_id).with(attr::WORKER_ID, worker_id)
}

pub fn code(role: Role, job_id: &str, worker_id: u64) -> Header {
    let ty = match role {
        Role::Mapper => MessageType::MapCodeType,
        Role::Reducer => MessageType::ReduceCodeType,
    };
    Header::new(ty).with(attr::JOB_ID, job_id).with(attr::WORKER_ID, worker_id)
}

pub fn map_data(job_id: &str, dest: usize) -> Header {
    Header::new(MessageType::MapDataType).with(attr::JOB_ID, job_id).with(attr::DEST_ID, dest)
}

pub fn reduce_data(job_id: &str, dest: usize) -> Header {
    Header::new(MessageType::ReduceDataType).with(attr::JOB_ID, job_id).with(attr::DEST_ID, dest)
}

pub fn eos(job_id: &str, stage: &str, target: usize, source: usize) -> Header {
    Header::new(MessageType::Eos)
        .with(attr::JOB_ID, job_id)
        .with(attr::STAGE, stage)
        .with(attr::TARGET, target)
        .with(attr::SOURCE, source)
}

pub fn result(job_id: &str, source: usize) -> Header {
    Header::new(MessageType::Result).with(attr::JOB_ID, job_id).with(attr::SOURCE, source)
}

pub fn job_id_of(h: &Header) -> Option<&str> {
    h.get_str(attr::JOB_ID)
}

/// JOB_OPENING payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opening {
    pub job_id: String,
    pub mappers: usize,
    pub reducers: usize,
}

/// One subscription a worker asks the client to register for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferedSubscription {
    pub constraints: Vec<Constraint>,
    /// When set, the client appends `bind EQ <hired index>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
}

impl OfferedSubscription {
    pub fn fixed(constraints: Vec<Constraint>) -> Self {
        OfferedSubscription { constraints, bind: None }
    }

    pub fn bound(constraints: Vec<Constraint>, bind: &str) -> Self {
        OfferedSubscription { constraints, bind: Some(bind.to_owned()) }
    }

    /// Final constraint list for a worker hired at `index`.
    pub fn resolve(&self, index: usize) -> Vec<Constraint> {
        let mut c = self.constraints.clone();
        if let Some(b) = &self.bind {
            c.push(Constraint::eq(b, index));
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleOffer {
    pub role: Role,
    pub subscriptions: Vec<OfferedSubscription>,
}

/// JOB_DETAILS payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offer {
    pub worker_id: u64,
    pub job_id: String,
    pub offers: Vec<RoleOffer>,
}

impl Egress for Offer {}

impl Offer {
    pub fn role(&self, role: Role) -> Option<&RoleOffer> {
        self.offers.iter().find(|o| o.role == role)
    }
}

/// The subscriptions a worker needs to serve `job_id` in `role`.
pub fn role_subscriptions(role: Role, job_id: &str, worker_id: u64) -> Vec<OfferedSubscription> {
    let (code, data, eos_stage) = match role {
        Role::Mapper => (MessageType::MapCodeType, MessageType::MapDataType, stage::MAP),
        Role::Reducer => (MessageType::ReduceCodeType, MessageType::ReduceDataType, stage::REDUCE),
    };
    vec![
        OfferedSubscription::fixed(vec![
            Constraint::msg_type(code),
            Constraint::eq(attr::JOB_ID, job_id),
            Constraint::eq(attr::WORKER_ID, worker_id),
        ]),
        OfferedSubscription::bound(
            vec![Constraint::msg_type(data), Constraint::eq(attr::JOB_ID, job_id)],
            bind::DEST_ID,
        ),
        OfferedSubscription::bound(
            vec![
                Constraint::msg_type(MessageType::Eos),
                Constraint::eq(attr::JOB_ID, job_id),
                Constraint::eq(attr::STAGE, eos_stage),
            ],
            bind::TARGET,
        ),
    ]
}

/// MAP_CODETYPE / REDUCE_CODETYPE payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodePackage {
    pub job_id: String,
    pub role: Role,
    /// This worker's index among the hired workers of its role.
    pub index: usize,
    pub script: String,
    /// Reducer count for mappers, mapper count for reducers.
    pub peer_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_state: Option<Json>,
}

/// MAP_DATATYPE and RESULT payload: one key and its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    pub value: Json,
}

/// REDUCE_DATATYPE payload: values for one key, concatenated by the
/// reducer with values for the same key from other mappers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shuffled {
    pub key: String,
    pub values: Vec<Json>,
}

pub fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("payload types serialize")
}

pub fn decode<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T, WireError> {
    serde_json::from_slice(bytes).map_err(|e| WireError::ParseFailure(format!("payload: {e}")))
}
