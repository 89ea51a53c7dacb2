//! Append-optimized per-channel time-series store.
//!
//! Each channel is a run of segments of at most [`SEGMENT_SIZE`] entries.
//! Full segments are sealed with a `(min_ts, max_ts, count)` footer that
//! range queries use to skip them. A store opened on a directory persists
//! every append to `data/<node>/<sensor>/seg-<n>.log` as a length-prefixed
//! JSON line; a store created with [`Tsdb::in_memory`] keeps the same
//! structure without touching disk.

mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::types::{ChannelKey, Reading, Timestamp};

pub use segment::{decode_record, encode_record, Footer, Record};
use segment::{ChannelLog, Segment};

pub const SEGMENT_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum TsdbError {
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("range start is after range end")]
    BadRange,
    #[error("downsample interval must be positive")]
    BadInterval,
    #[error("unknown aggregate `{0}`")]
    UnknownAgg(String),
    #[error("retention max_age must be positive")]
    BadRetention,
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agg {
    Min,
    Max,
    Avg,
    Count,
    First,
    Last,
}

impl FromStr for Agg {
    type Err = TsdbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "min" => Agg::Min,
            "max" => Agg::Max,
            "avg" => Agg::Avg,
            "count" => Agg::Count,
            "first" => Agg::First,
            "last" => Agg::Last,
            other => return Err(TsdbError::UnknownAgg(other.to_string())),
        })
    }
}

impl fmt::Display for Agg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agg::Min => "min",
            Agg::Max => "max",
            Agg::Avg => "avg",
            Agg::Count => "count",
            Agg::First => "first",
            Agg::Last => "last",
        })
    }
}

impl Agg {
    /// Aggregates numeric values given in (ts, seq) order.
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            Agg::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Agg::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Agg::Avg => values.iter().sum::<f64>() / values.len() as f64,
            Agg::Count => values.len() as f64,
            Agg::First => values[0],
            Agg::Last => values[values.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionPolicy {
    pub max_age_ms: i64,
    /// Channels the policy covers; every channel when `None`.
    pub channels: Option<BTreeSet<ChannelKey>>,
}

impl RetentionPolicy {
    pub fn global(max_age_ms: i64) -> Self {
        RetentionPolicy {
            max_age_ms,
            channels: None,
        }
    }

    fn covers(&self, channel: &ChannelKey) -> bool {
        self.channels.as_ref().is_none_or(|c| c.contains(channel))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub segment: u64,
    pub offset: usize,
}

/// Per-channel time-series store with a tag inverted index.
#[derive(Debug)]
pub struct Tsdb {
    root: Option<PathBuf>,
    segment_size: usize,
    channels: BTreeMap<ChannelKey, ChannelLog>,
    /// (tag key, tag value) → channel → number of stored readings with it.
    tags: BTreeMap<(String, String), BTreeMap<ChannelKey, usize>>,
}

impl Tsdb {
    pub fn in_memory() -> Self {
        Self::with_segment_size(None, SEGMENT_SIZE)
    }

    fn with_segment_size(root: Option<PathBuf>, segment_size: usize) -> Self {
        Tsdb {
            root,
            segment_size: segment_size.max(1),
            channels: BTreeMap::new(),
            tags: BTreeMap::new(),
        }
    }

    /// Opens (or creates) a store under `root/data`, recovering every
    /// channel found there. A torn record at the end of an active segment
    /// is cut off.
    pub fn open(root: &Path) -> Result<Self, TsdbError> {
        Self::open_with_segment_size(root, SEGMENT_SIZE)
    }

    pub fn open_with_segment_size(root: &Path, segment_size: usize) -> Result<Self, TsdbError> {
        let data = root.join("data");
        fs::create_dir_all(&data)?;
        let mut db = Self::with_segment_size(Some(root.to_path_buf()), segment_size);
        for node in sorted_dirs(&data)? {
            for sensor in sorted_dirs(&node)? {
                let (Some(n), Some(s)) = (file_name(&node), file_name(&sensor)) else {
                    continue;
                };
                let Ok(key) = ChannelKey::new(n, s) else {
                    continue;
                };
                let log = ChannelLog::recover(key.clone(), &sensor, db.segment_size)?;
                for seg in log.segments() {
                    for r in seg.entries() {
                        index_tags(&mut db.tags, &key, r, 1);
                    }
                }
                db.channels.insert(key, log);
            }
        }
        Ok(db)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn append(&mut self, reading: Reading) -> Result<Position, TsdbError> {
        let key = reading.channel.clone();
        if !self.channels.contains_key(&key) {
            let dir = self
                .root
                .as_ref()
                .map(|r| r.join("data").join(&key.node_id).join(&key.sensor));
            self.channels.insert(key.clone(), ChannelLog::create(key.clone(), dir, self.segment_size)?);
        }
        index_tags(&mut self.tags, &key, &reading, 1);
        let log = self.channels.get_mut(&key).expect("inserted above");
        log.append(reading)
    }

    pub fn channels(&self) -> impl Iterator<Item = &ChannelKey> {
        self.channels.keys()
    }

    fn log(&self, channel: &ChannelKey) -> Result<&ChannelLog, TsdbError> {
        self.channels
            .get(channel)
            .ok_or_else(|| TsdbError::UnknownChannel(channel.to_string()))
    }

    /// Stored readings with `t1 <= ts < t2`, in (ts, seq) order.
    pub fn query_range(&self, channel: &ChannelKey, t1: Timestamp, t2: Timestamp) -> Result<Vec<Reading>, TsdbError> {
        if t1 > t2 {
            return Err(TsdbError::BadRange);
        }
        let log = self.log(channel)?;
        let mut out: Vec<Reading> = log
            .segments()
            .filter(|s| s.overlaps(t1, t2))
            .flat_map(|s| s.entries().iter().filter(|r| r.ts >= t1 && r.ts < t2))
            .cloned()
            .collect();
        out.sort_by_key(|r| (r.ts, r.seq));
        Ok(out)
    }

    pub fn query_all(&self, channel: &ChannelKey) -> Result<Vec<Reading>, TsdbError> {
        self.query_range(channel, Timestamp(i64::MIN), Timestamp(i64::MAX))
    }

    /// Every stored reading of a channel in append order.
    pub fn scan(&self, channel: &ChannelKey) -> Result<Vec<Reading>, TsdbError> {
        Ok(self.log(channel)?.segments().flat_map(|s| s.entries().iter().cloned()).collect())
    }

    pub fn count(&self, channel: &ChannelKey) -> usize {
        self.channels
            .get(channel)
            .map_or(0, |l| l.segments().map(|s| s.entries().len()).sum())
    }

    /// Aggregates numeric readings into buckets
    /// `[t1 + k·interval, t1 + (k+1)·interval)` clipped to `t2`. Empty buckets
    /// are omitted.
    pub fn downsample(
        &self,
        channel: &ChannelKey,
        t1: Timestamp,
        t2: Timestamp,
        interval_ms: i64,
        agg: Agg,
    ) -> Result<Vec<(Timestamp, f64)>, TsdbError> {
        if interval_ms <= 0 {
            return Err(TsdbError::BadInterval);
        }
        let readings = self.query_range(channel, t1, t2)?;
        let mut buckets: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for r in &readings {
            if let Some(v) = r.value.as_f64() {
                let k = (r.ts.0 - t1.0).div_euclid(interval_ms);
                buckets.entry(k).or_default().push(v);
            }
        }
        Ok(buckets
            .into_iter()
            .filter_map(|(k, vals)| agg.apply(&vals).map(|v| (Timestamp(t1.0 + k * interval_ms), v)))
            .collect())
    }

    /// Deletes sealed segments whose newest reading is older than
    /// `now - max_age`. Returns the number deleted.
    pub fn apply_retention(&mut self, now: Timestamp, policy: &RetentionPolicy) -> Result<usize, TsdbError> {
        if policy.max_age_ms <= 0 {
            return Err(TsdbError::BadRetention);
        }
        let cutoff = Timestamp(now.0.saturating_sub(policy.max_age_ms));
        let mut deleted = 0;
        let keys: Vec<ChannelKey> = self.channels.keys().filter(|k| policy.covers(k)).cloned().collect();
        for key in keys {
            let log = self.channels.get_mut(&key).expect("listed above");
            let dropped: Vec<Segment> = log.drop_sealed_before(cutoff)?;
            deleted += dropped.len();
            for seg in &dropped {
                for r in seg.entries() {
                    index_tags(&mut self.tags, &key, r, -1);
                }
            }
        }
        Ok(deleted)
    }

    /// Channels having stored readings that match every `key=value` term,
    /// sorted. No terms matches nothing.
    pub fn find_channels(&self, terms: &[(&str, &str)]) -> Vec<ChannelKey> {
        let mut result: Option<BTreeSet<ChannelKey>> = None;
        for (k, v) in terms {
            let set: BTreeSet<ChannelKey> = self
                .tags
                .get(&(k.to_string(), v.to_string()))
                .map(|m| m.keys().cloned().collect())
                .unwrap_or_default();
            result = Some(match result {
                None => set,
                Some(acc) => acc.intersection(&set).cloned().collect(),
            });
        }
        result.unwrap_or_default().into_iter().collect()
    }

    pub fn segment_footers(&self, channel: &ChannelKey) -> Result<Vec<(u64, Footer, bool)>, TsdbError> {
        Ok(self
            .log(channel)?
            .segments()
            .map(|s| (s.id(), s.footer(), s.is_sealed()))
            .collect())
    }

    /// Path of a channel's active segment file, for on-disk stores.
    pub fn active_segment_path(&self, channel: &ChannelKey) -> Option<PathBuf> {
        self.channels.get(channel).and_then(ChannelLog::active_path)
    }
}

fn index_tags(
    tags: &mut BTreeMap<(String, String), BTreeMap<ChannelKey, usize>>,
    key: &ChannelKey,
    r: &Reading,
    delta: isize,
) {
    for (k, v) in r.tags.iter() {
        let entry = (k.clone(), v.clone());
        if delta > 0 {
            *tags.entry(entry).or_default().entry(key.clone()).or_default() += 1;
        } else if let Some(m) = tags.get_mut(&entry) {
            if let Some(c) = m.get_mut(key) {
                *c -= 1;
                if *c == 0 {
                    m.remove(key);
                }
            }
            if m.is_empty() {
                tags.remove(&entry);
            }
        }
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, TsdbError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> Option<&str> {
    p.file_name().and_then(|n| n.to_str())
}

#[cfg(test)]
mod tests;
