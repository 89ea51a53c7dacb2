use std::collections::{BTreeMap, VecDeque};

use super::EdgeError;
use crate::msgbus::Qos;
use crate::types::{Reading, Timestamp};

pub const DEFAULT_BUFFER_CAPACITY: usize = 4096;

/// Per-channel circular buffers holding the newest `capacity` readings.
#[derive(Debug, Clone)]
pub struct LocalStore {
    capacity: usize,
    channels: BTreeMap<String, VecDeque<Reading>>,
}

impl LocalStore {
    pub fn new(capacity: usize) -> Self {
        LocalStore {
            capacity: capacity.max(1),
            channels: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn add_channel(&mut self, sensor: &str) {
        self.channels.entry(sensor.to_string()).or_default();
    }

    pub fn push(&mut self, reading: Reading) {
        let ring = self.channels.entry(reading.channel.sensor.clone()).or_default();
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(reading);
    }

    pub fn len(&self, sensor: &str) -> usize {
        self.channels.get(sensor).map_or(0, VecDeque::len)
    }

    /// Buffered readings with `from <= ts < to`, oldest first.
    pub fn query(&self, sensor: &str, from: Timestamp, to: Timestamp) -> Result<Vec<Reading>, EdgeError> {
        if from > to {
            return Err(EdgeError::BadRange);
        }
        let ring = self
            .channels
            .get(sensor)
            .ok_or_else(|| EdgeError::UnknownChannel(sensor.to_string()))?;
        Ok(ring
            .iter()
            .filter(|r| r.ts >= from && r.ts < to)
            .cloned()
            .collect())
    }

    pub fn latest(&self, sensor: &str) -> Option<&Reading> {
        self.channels.get(sensor).and_then(VecDeque::back)
    }
}

/// An encoded frame waiting for the uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedFrame {
    pub topic: String,
    pub payload: String,
    pub qos: Qos,
    pub retain: bool,
    /// Originating sensor and reading seq, for data frames.
    pub origin: Option<(String, u64)>,
}

/// The uplink is gone; the frame that failed stays queued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disconnected;

/// Outbound side of a gateway's broker connection.
pub trait UplinkSession {
    fn is_connected(&self) -> bool;
    fn send(&mut self, frame: &QueuedFrame) -> Result<(), Disconnected>;
}

/// FIFO of frames awaiting publish. Unbounded unless a capacity is set, in
/// which case the oldest frame is dropped to make room.
#[derive(Debug, Clone, Default)]
pub struct UplinkQueue {
    pending: VecDeque<QueuedFrame>,
    capacity: Option<usize>,
    dropped: u64,
}

impl UplinkQueue {
    pub fn new(capacity: Option<usize>) -> Self {
        UplinkQueue {
            pending: VecDeque::new(),
            capacity,
            dropped: 0,
        }
    }

    pub fn push(&mut self, frame: QueuedFrame) {
        if let Some(cap) = self.capacity {
            while self.pending.len() >= cap.max(1) {
                self.pending.pop_front();
                self.dropped += 1;
            }
        }
        self.pending.push_back(frame);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedFrame> {
        self.pending.iter()
    }
}

/// Publishes queued frames in order until the queue is empty or the session
/// drops. Returns the number published.
pub fn flush_uplink(queue: &mut UplinkQueue, session: &mut dyn UplinkSession) -> usize {
    let mut published = 0;
    while session.is_connected() {
        let Some(front) = queue.pending.front() else {
            break;
        };
        if session.send(front).is_err() {
            break;
        }
        queue.pending.pop_front();
        published += 1;
    }
    published
}
