//! Minimal pub/sub broker in the spirit of MQTT.
//!
//! Sessions publish into logical partitions (chosen by a stable hash of the
//! publisher) and the dispatcher fans frames out to every connected session
//! holding a matching filter. QoS 1 frames stay pending per session until
//! acknowledged. Unacknowledged frames are resent after the ack timeout and
//! moved to the dead-letter queue once the retry cap is reached.
//!
//! The broker is a plain state machine driven by explicit timestamps, the
//! caller owns the clock. [`net`] exposes it over TCP.

pub mod net;
pub mod topic;
pub mod wire;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Timestamp;

pub use topic::{match_topic, validate_topic, TopicFilter};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("session is not connected")]
    NotConnected,
    #[error("bad topic `{0}`")]
    BadTopic(String),
    #[error("bad topic filter `{0}`")]
    BadFilter(String),
    #[error("authentication refused for `{0}`")]
    AuthRefused(String),
    #[error("`{principal}` may not publish to `{topic}`")]
    Forbidden { principal: String, topic: String },
}

/// Decides whether a node may open a session.
pub trait Authenticator {
    fn authenticate(&self, node_id: &str, credential: &str) -> bool;
}

impl<F: Fn(&str, &str) -> bool> Authenticator for F {
    fn authenticate(&self, node_id: &str, credential: &str) -> bool {
        self(node_id, credential)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Who owns a session. Node sessions are confined by the topic ACL.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Principal {
    Node(String),
    Service(String),
}

impl Principal {
    pub fn name(&self) -> &str {
        match self {
            Principal::Node(n) | Principal::Service(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Qos {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl Qos {
    pub fn from_u8(v: u8) -> Option<Qos> {
        match v {
            0 => Some(Qos::AtMostOnce),
            1 => Some(Qos::AtLeastOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FrameKind {
    Pub,
    Sub,
    Ack,
    Connect,
    Disconnect,
}

/// Identity of a published message: sender plus per-session sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgId {
    pub sender: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub topic: String,
    pub msg_id: MsgId,
    pub qos: Qos,
    pub retain: bool,
    pub ts: Timestamp,
    pub payload: String,
}

#[derive(Debug, Clone, Copy)]
pub struct BrokerConfig {
    pub ack_timeout_ms: i64,
    pub retry_cap: u32,
    pub partitions: usize,
    /// Dispatch synchronously on every publish. When off, frames wait in
    /// their partition until [`Broker::dispatch`].
    pub auto_dispatch: bool,
    /// Confine node sessions to their own topic subtrees.
    pub enforce_acl: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            ack_timeout_ms: 2_000,
            retry_cap: 5,
            partitions: 1,
            auto_dispatch: true,
            enforce_acl: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    frame: Frame,
    delivery_count: u32,
    last_sent: Timestamp,
}

#[derive(Debug)]
struct Session {
    principal: Principal,
    next_seq: u64,
    next_sub: u64,
    filters: BTreeMap<u64, TopicFilter>,
    pending: BTreeMap<u64, Pending>,
    pending_index: HashMap<MsgId, u64>,
    next_pending: u64,
    outbox: VecDeque<Frame>,
}

impl Session {
    fn matches(&self, topic: &str) -> bool {
        self.filters.values().any(|f| f.matches(topic))
    }

    fn deliver(&mut self, frame: &Frame, now: Timestamp) {
        if frame.qos == Qos::AtLeastOnce {
            if self.pending_index.contains_key(&frame.msg_id) {
                // already awaiting an ack for this exact message
                self.outbox.push_back(frame.clone());
                return;
            }
            let slot = self.next_pending;
            self.next_pending += 1;
            self.pending_index.insert(frame.msg_id.clone(), slot);
            self.pending.insert(
                slot,
                Pending {
                    frame: frame.clone(),
                    delivery_count: 1,
                    last_sent: now,
                },
            );
        }
        self.outbox.push_back(frame.clone());
    }
}

#[derive(Debug, Clone)]
struct Retained {
    order: u64,
    frame: Frame,
}

#[derive(Debug, Clone)]
pub struct DeadLetter {
    pub session: SessionId,
    pub principal: String,
    pub frame: Frame,
}

#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    sessions: BTreeMap<SessionId, Session>,
    node_sessions: HashMap<String, SessionId>,
    next_session: u64,
    retained: BTreeMap<String, Retained>,
    retained_clock: u64,
    partitions: Vec<VecDeque<Frame>>,
    dead_letters: Vec<DeadLetter>,
    publish_counts: BTreeMap<String, u64>,
    refused_connects: BTreeMap<String, u64>,
    journal: Option<Vec<Frame>>,
}

impl Default for Broker {
    fn default() -> Self {
        Broker::new(BrokerConfig::default())
    }
}

/// FNV-1a, stable across runs and platforms.
fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Topics a node may publish to.
pub fn node_may_publish(node_id: &str, topic: &str) -> bool {
    let mut parts = topic.splitn(3, '/');
    let (Some(root), Some(node)) = (parts.next(), parts.next()) else {
        return false;
    };
    if node != node_id {
        return false;
    }
    let rest = parts.next();
    match root {
        "data" => rest.is_some_and(|r| !r.is_empty()),
        "twin" => rest == Some("reported"),
        "mgmt" => rest == Some("status"),
        "alerts" => rest.is_none(),
        _ => false,
    }
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        let partitions = config.partitions.max(1);
        Broker {
            config,
            sessions: BTreeMap::new(),
            node_sessions: HashMap::new(),
            next_session: 1,
            retained: BTreeMap::new(),
            retained_clock: 0,
            partitions: (0..partitions).map(|_| VecDeque::new()).collect(),
            dead_letters: Vec::new(),
            publish_counts: BTreeMap::new(),
            refused_connects: BTreeMap::new(),
            journal: None,
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn open(&mut self, principal: Principal) -> SessionId {
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id,
            Session {
                principal,
                next_seq: 1,
                next_sub: 1,
                filters: BTreeMap::new(),
                pending: BTreeMap::new(),
                pending_index: HashMap::new(),
                next_pending: 0,
                outbox: VecDeque::new(),
            },
        );
        id
    }

    /// Opens a node session. An existing session of the same node is taken
    /// over (closed) first.
    pub fn connect_node(&mut self, node_id: &str, credential: &str, auth: &dyn Authenticator) -> Result<SessionId, BusError> {
        if !auth.authenticate(node_id, credential) {
            *self.refused_connects.entry(node_id.to_string()).or_default() += 1;
            return Err(BusError::AuthRefused(node_id.to_string()));
        }
        self.close_node(node_id);
        let id = self.open(Principal::Node(node_id.to_string()));
        self.node_sessions.insert(node_id.to_string(), id);
        Ok(id)
    }

    /// Opens a trusted in-cloud service session, exempt from the ACL.
    pub fn connect_service(&mut self, name: &str) -> SessionId {
        self.open(Principal::Service(name.to_string()))
    }

    /// Drops the session together with its subscriptions and pending frames.
    pub fn disconnect(&mut self, session: SessionId) -> bool {
        match self.sessions.remove(&session) {
            Some(s) => {
                if let Principal::Node(n) = &s.principal {
                    if self.node_sessions.get(n) == Some(&session) {
                        self.node_sessions.remove(n);
                    }
                }
                true
            }
            None => false,
        }
    }

    /// Closes the live session of a node, if any.
    pub fn close_node(&mut self, node_id: &str) -> bool {
        match self.node_sessions.get(node_id).copied() {
            Some(id) => self.disconnect(id),
            None => false,
        }
    }

    pub fn is_connected(&self, session: SessionId) -> bool {
        self.sessions.contains_key(&session)
    }

    pub fn node_session(&self, node_id: &str) -> Option<SessionId> {
        self.node_sessions.get(node_id).copied()
    }

    pub fn principal(&self, session: SessionId) -> Option<&Principal> {
        self.sessions.get(&session).map(|s| &s.principal)
    }

    pub fn publish(
        &mut self,
        session: SessionId,
        topic: &str,
        payload: impl Into<String>,
        qos: Qos,
        retain: bool,
        now: Timestamp,
    ) -> Result<MsgId, BusError> {
        validate_topic(topic)?;
        let enforce = self.config.enforce_acl;
        let s = self.sessions.get_mut(&session).ok_or(BusError::NotConnected)?;
        if let Principal::Node(n) = &s.principal {
            *self.publish_counts.entry(n.clone()).or_default() += 1;
            if enforce && !node_may_publish(n, topic) {
                return Err(BusError::Forbidden {
                    principal: n.clone(),
                    topic: topic.to_string(),
                });
            }
        }
        let msg_id = MsgId {
            sender: s.principal.name().to_string(),
            seq: s.next_seq,
        };
        s.next_seq += 1;
        let frame = Frame {
            kind: FrameKind::Pub,
            topic: topic.to_string(),
            msg_id: msg_id.clone(),
            qos,
            retain,
            ts: now,
            payload: payload.into(),
        };
        let p = (stable_hash(&msg_id.sender) % self.partitions.len() as u64) as usize;
        self.partitions[p].push_back(frame);
        if self.config.auto_dispatch {
            self.dispatch(now);
        }
        Ok(msg_id)
    }

    /// Drains all partitions round-robin, one frame per partition per turn,
    /// fanning each frame out to matching sessions. Returns frames routed.
    pub fn dispatch(&mut self, now: Timestamp) -> usize {
        let mut routed = 0;
        loop {
            let mut progressed = false;
            for p in 0..self.partitions.len() {
                if let Some(frame) = self.partitions[p].pop_front() {
                    self.route(frame, now);
                    routed += 1;
                    progressed = true;
                }
            }
            if !progressed {
                return routed;
            }
        }
    }

    pub fn partition_backlog(&self) -> usize {
        self.partitions.iter().map(VecDeque::len).sum()
    }

    fn route(&mut self, frame: Frame, now: Timestamp) {
        if frame.retain {
            self.retained_clock += 1;
            self.retained.insert(
                frame.topic.clone(),
                Retained {
                    order: self.retained_clock,
                    frame: frame.clone(),
                },
            );
        }
        for s in self.sessions.values_mut() {
            if s.matches(&frame.topic) {
                s.deliver(&frame, now);
            }
        }
        if let Some(j) = &mut self.journal {
            j.push(frame);
        }
    }

    /// Adds a filter. An identical filter already held by the session is
    /// reused. Matching retained frames are delivered at once, least
    /// recently retained first.
    pub fn subscribe(&mut self, session: SessionId, filter: &str, now: Timestamp) -> Result<u64, BusError> {
        let filter = TopicFilter::parse(filter)?;
        let s = self.sessions.get_mut(&session).ok_or(BusError::NotConnected)?;
        if let Some((id, _)) = s.filters.iter().find(|(_, f)| **f == filter) {
            return Ok(*id);
        }
        let id = s.next_sub;
        s.next_sub += 1;
        let mut retained: Vec<&Retained> = self
            .retained
            .values()
            .filter(|r| filter.matches(&r.frame.topic))
            .collect();
        retained.sort_by_key(|r| r.order);
        for r in retained {
            s.deliver(&r.frame, now);
        }
        s.filters.insert(id, filter);
        Ok(id)
    }

    pub fn unsubscribe(&mut self, session: SessionId, subscription: u64) -> bool {
        self.sessions
            .get_mut(&session)
            .is_some_and(|s| s.filters.remove(&subscription).is_some())
    }

    /// Frames delivered to the session since the last poll.
    pub fn poll(&mut self, session: SessionId) -> Vec<Frame> {
        self.sessions
            .get_mut(&session)
            .map(|s| s.outbox.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn ack(&mut self, session: SessionId, msg_id: &MsgId) -> bool {
        let Some(s) = self.sessions.get_mut(&session) else {
            return false;
        };
        match s.pending_index.remove(msg_id) {
            Some(slot) => s.pending.remove(&slot).is_some(),
            None => false,
        }
    }

    pub fn pending_count(&self, session: SessionId) -> usize {
        self.sessions.get(&session).map_or(0, |s| s.pending.len())
    }

    /// Resends every pending frame whose last send is at least the ack
    /// timeout old. Frames already sent `retry_cap` times go to the
    /// dead-letter queue instead.
    pub fn redeliver_pending(&mut self, now: Timestamp) -> usize {
        let timeout = self.config.ack_timeout_ms;
        let cap = self.config.retry_cap;
        let mut redelivered = 0;
        for (id, s) in self.sessions.iter_mut() {
            let due: Vec<u64> = s
                .pending
                .iter()
                .filter(|(_, p)| now.millis() - p.last_sent.millis() >= timeout)
                .map(|(slot, _)| *slot)
                .collect();
            for slot in due {
                let entry = s.pending.get_mut(&slot).expect("slot listed above");
                if entry.delivery_count >= cap {
                    let p = s.pending.remove(&slot).expect("slot listed above");
                    s.pending_index.remove(&p.frame.msg_id);
                    self.dead_letters.push(DeadLetter {
                        session: *id,
                        principal: s.principal.name().to_string(),
                        frame: p.frame,
                    });
                } else {
                    entry.delivery_count += 1;
                    entry.last_sent = now;
                    s.outbox.push_back(entry.frame.clone());
                    redelivered += 1;
                }
            }
        }
        redelivered
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead_letters
    }

    pub fn retained(&self, topic: &str) -> Option<&Frame> {
        self.retained.get(topic).map(|r| &r.frame)
    }

    pub fn retained_frames(&self) -> impl Iterator<Item = &Frame> {
        self.retained.values().map(|r| &r.frame)
    }

    /// Seeds the retained store, e.g. from persisted state.
    pub fn restore_retained(&mut self, frame: Frame) {
        self.retained_clock += 1;
        self.retained.insert(
            frame.topic.clone(),
            Retained {
                order: self.retained_clock,
                frame,
            },
        );
    }

    /// Per-node publish attempts since the last call.
    pub fn take_publish_counts(&mut self) -> BTreeMap<String, u64> {
        std::mem::take(&mut self.publish_counts)
    }

    pub fn refused_connects(&self, node_id: &str) -> u64 {
        self.refused_connects.get(node_id).copied().unwrap_or(0)
    }

    pub fn enable_journal(&mut self) {
        self.journal.get_or_insert_with(Vec::new);
    }

    pub fn journal(&self) -> &[Frame] {
        self.journal.as_deref().unwrap_or(&[])
    }
}
