use std::collections::VecDeque;

use super::{ChannelPattern, Emission, Item, StreamError};
use crate::types::Timestamp;

pub const DEFAULT_REPLAY_CAPACITY: usize = 100_000;
pub const DEFAULT_REPLAY_SPAN_MS: i64 = 60_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayEntry {
    Reading(Item),
    Event(Emission),
}

impl ReplayEntry {
    pub fn ts(&self) -> Timestamp {
        match self {
            ReplayEntry::Reading(i) => i.ts,
            ReplayEntry::Event(e) => e.item.ts,
        }
    }

    fn item(&self) -> &Item {
        match self {
            ReplayEntry::Reading(i) => i,
            ReplayEntry::Event(e) => &e.item,
        }
    }
}

/// Time-ordered ring of recent readings and events, bounded by entry
/// count and by the time span between its oldest and newest entries.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    capacity: usize,
    span_ms: i64,
    entries: VecDeque<ReplayEntry>,
}

impl Default for ReplayStore {
    fn default() -> Self {
        Self::new(DEFAULT_REPLAY_CAPACITY, DEFAULT_REPLAY_SPAN_MS)
    }
}

impl ReplayStore {
    pub fn new(capacity: usize, span_ms: i64) -> Self {
        ReplayStore {
            capacity: capacity.max(1),
            span_ms,
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        let ts = entry.ts();
        // after every entry with ts <= this one, so equal stamps keep arrival order
        let at = self.entries.partition_point(|e| e.ts() <= ts);
        self.entries.insert(at, entry);
        let newest = self.entries.back().map(ReplayEntry::ts).unwrap_or(ts);
        while self.entries.len() > self.capacity
            || self.entries.front().is_some_and(|e| newest.0 - e.ts().0 > self.span_ms)
        {
            self.entries.pop_front();
        }
    }

    /// Retained entries with `from <= ts < to` whose channel matches.
    pub fn replay(&self, from: Timestamp, to: Timestamp, selector: Option<&ChannelPattern>) -> Result<Vec<ReplayEntry>, StreamError> {
        if from > to {
            return Err(StreamError::BadRange);
        }
        let start = self.entries.partition_point(|e| e.ts() < from);
        Ok(self
            .entries
            .iter()
            .skip(start)
            .take_while(|e| e.ts() < to)
            .filter(|e| selector.is_none_or(|s| s.matches(&e.item().channel)))
            .cloned()
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }
}
