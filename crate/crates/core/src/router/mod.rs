//! Content-based routing: subscriptions, the subscription store and the
//! header matcher. The network server lives in [`server`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::Egress;
use crate::wire::{attr, AttrValue, Header, MessageType};

pub mod server;

pub use server::{Router, RouterConfig, RouterHandle, RouterStats};

/// Router-assigned identity of a connected peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConnId(pub u64);

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conn#{}", self.0)
    }
}

impl Egress for ConnId {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubId(pub u64);

impl Egress for SubId {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "EQ")]
    Eq,
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "LE")]
    Le,
    #[serde(rename = "GT")]
    Gt,
    #[serde(rename = "GE")]
    Ge,
}

impl Op {
    pub const ALL: [Op; 5] = [Op::Eq, Op::Lt, Op::Le, Op::Gt, Op::Ge];

    fn accepts(self, ord: Ordering) -> bool {
        match self {
            Op::Eq => ord == Ordering::Equal,
            Op::Lt => ord == Ordering::Less,
            Op::Le => ord != Ordering::Greater,
            Op::Gt => ord == Ordering::Greater,
            Op::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Constraint {
    pub attr: String,
    pub op: Op,
    pub value: AttrValue,
}

impl Constraint {
    pub fn new(attr: &str, op: Op, value: impl Into<AttrValue>) -> Self {
        Constraint { attr: attr.to_owned(), op, value: value.into() }
    }

    pub fn eq(attr: &str, value: impl Into<AttrValue>) -> Self {
        Self::new(attr, Op::Eq, value)
    }

    pub fn msg_type(ty: MessageType) -> Self {
        Self::eq(attr::MSG_TYPE, ty.code() as i64)
    }

    /// `header.attr op value`; a missing attribute or a type mismatch
    /// never satisfies the constraint.
    pub fn satisfied_by(&self, header: &Header) -> bool {
        let ord = match (header.get(&self.attr), &self.value) {
            (Some(AttrValue::Int(h)), AttrValue::Int(c)) => h.cmp(c),
            (Some(AttrValue::Str(h)), AttrValue::Str(c)) => h.as_str().cmp(c.as_str()),
            _ => return false,
        };
        self.op.accepts(ord)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: SubId,
    pub owner: ConnId,
    pub constraints: Vec<Constraint>,
}

impl Subscription {
    pub fn matches(&self, header: &Header) -> bool {
        self.constraints.iter().all(|c| c.satisfied_by(header))
    }

    fn indexed_type(&self) -> Option<i64> {
        self.constraints.iter().find_map(|c| match (c.attr.as_str(), c.op, &c.value) {
            (attr::MSG_TYPE, Op::Eq, AttrValue::Int(t)) => Some(*t),
            _ => None,
        })
    }
}

/// Wire form of a subscription before the router assigns an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRequest {
    pub owner: ConnId,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouterError {
    #[error("subscription id {0:?} already registered")]
    DuplicateId(SubId),
    #[error("invalid subscription: {0}")]
    InvalidSubscription(String),
}

/// Subscriptions indexed by the `msg_type` they require. Subscriptions
/// without an equality constraint on `msg_type` live in a fallback list.
#[derive(Debug, Default)]
pub struct SubscriptionStore {
    subs: HashMap<SubId, Subscription>,
    by_type: BTreeMap<i64, Vec<SubId>>,
    unindexed: Vec<SubId>,
    next_id: u64,
}

impl SubscriptionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn get(&self, id: SubId) -> Option<&Subscription> {
        self.subs.get(&id)
    }

    /// Allocates an id not currently in use.
    pub fn fresh_id(&mut self) -> SubId {
        loop {
            self.next_id += 1;
            let id = SubId(self.next_id);
            if !self.subs.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn register(&mut self, sub: Subscription) -> Result<SubId, RouterError> {
        if sub.constraints.is_empty() {
            return Err(RouterError::InvalidSubscription("empty constraint list".into()));
        }
        if !sub.constraints.iter().any(|c| c.attr == attr::MSG_TYPE) {
            return Err(RouterError::InvalidSubscription("no msg_type constraint".into()));
        }
        if self.subs.contains_key(&sub.sub_id) {
            return Err(RouterError::DuplicateId(sub.sub_id));
        }
        let id = sub.sub_id;
        match sub.indexed_type() {
            Some(t) => self.by_type.entry(t).or_default().push(id),
            None => self.unindexed.push(id),
        }
        self.subs.insert(id, sub);
        Ok(id)
    }

    pub fn register_request(&mut self, req: SubscriptionRequest) -> Result<SubId, RouterError> {
        let sub_id = self.fresh_id();
        self.register(Subscription { sub_id, owner: req.owner, constraints: req.constraints })
    }

    pub fn unregister(&mut self, id: SubId) -> Option<Subscription> {
        let sub = self.subs.remove(&id)?;
        let list = match sub.indexed_type() {
            Some(t) => self.by_type.get_mut(&t).expect("indexed list exists"),
            None => &mut self.unindexed,
        };
        list.retain(|s| *s != id);
        if let Some(t) = sub.indexed_type() {
            if self.by_type[&t].is_empty() {
                self.by_type.remove(&t);
            }
        }
        Some(sub)
    }

    /// Drops every subscription owned by `owner`; returns how many.
    pub fn remove_owner(&mut self, owner: ConnId) -> usize {
        let ids: Vec<SubId> = self.subs.values().filter(|s| s.owner == owner).map(|s| s.sub_id).collect();
        for id in &ids {
            self.unregister(*id);
        }
        ids.len()
    }

    /// Owners of every subscription whose constraints all hold.
    pub fn match_header(&self, header: &Header) -> BTreeSet<ConnId> {
        let indexed = header
            .get_int(attr::MSG_TYPE)
            .and_then(|t| self.by_type.get(&t))
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        indexed
            .iter()
            .chain(self.unindexed.iter())
            .map(|id| &self.subs[id])
            .filter(|s| s.matches(header))
            .map(|s| s.owner)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Subscription> {
        self.subs.values()
    }
}

/// Matching as a free function over a store.
pub fn match_header(header: &Header, store: &SubscriptionStore) -> BTreeSet<ConnId> {
    store.match_header(header)
}
