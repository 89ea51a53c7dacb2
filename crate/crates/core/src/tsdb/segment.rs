use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Position, TsdbError};
use crate::types::{ChannelKey, Reading, TagSet, Timestamp, TypedScalar};

/// On-disk form of one stored reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub ts: Timestamp,
    pub seq: u64,
    pub v: String,
    pub unit: String,
    #[serde(default)]
    pub tags: TagSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footer {
    pub min_ts: Timestamp,
    pub max_ts: Timestamp,
    pub count: usize,
}

/// Length-prefixed JSON line.
pub fn encode_record(r: &Reading) -> Vec<u8> {
    let rec = Record {
        ts: r.ts,
        seq: r.seq,
        v: r.value.encode(),
        unit: r.unit.clone(),
        tags: r.tags.clone(),
    };
    let mut body = serde_json::to_vec(&rec).expect("record serializes");
    body.push(b'\n');
    let mut out = (body.len() as u32).to_be_bytes().to_vec();
    out.extend_from_slice(&body);
    out
}

/// Decodes the record at the start of `bytes`, returning it with the
/// number of bytes consumed, or `None` when the record is incomplete or
/// unreadable.
pub fn decode_record(channel: &ChannelKey, bytes: &[u8]) -> Option<(Reading, usize)> {
    let len = u32::from_be_bytes(bytes.get(..4)?.try_into().ok()?) as usize;
    let body = bytes.get(4..4 + len)?;
    let rec: Record = serde_json::from_slice(body).ok()?;
    let value = TypedScalar::decode(&rec.v).ok()?;
    Some((
        Reading {
            channel: channel.clone(),
            value,
            unit: rec.unit,
            ts: rec.ts,
            seq: rec.seq,
            tags: rec.tags,
        },
        4 + len,
    ))
}

#[derive(Debug)]
pub(super) struct Segment {
    id: u64,
    entries: Vec<Reading>,
    footer: Option<Footer>,
    sealed: bool,
}

impl Segment {
    fn new(id: u64) -> Self {
        Segment {
            id,
            entries: Vec::new(),
            footer: None,
            sealed: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn entries(&self) -> &[Reading] {
        &self.entries
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn footer(&self) -> Footer {
        self.footer.unwrap_or(Footer {
            min_ts: Timestamp(0),
            max_ts: Timestamp(0),
            count: 0,
        })
    }

    pub fn overlaps(&self, t1: Timestamp, t2: Timestamp) -> bool {
        self.footer.is_some_and(|f| f.max_ts >= t1 && f.min_ts < t2)
    }

    fn push(&mut self, r: Reading) {
        self.footer = Some(match self.footer {
            None => Footer {
                min_ts: r.ts,
                max_ts: r.ts,
                count: 1,
            },
            Some(f) => Footer {
                min_ts: f.min_ts.min(r.ts),
                max_ts: f.max_ts.max(r.ts),
                count: f.count + 1,
            },
        });
        self.entries.push(r);
    }
}

/// Segments of one channel: sealed ones oldest first, then the active one.
#[derive(Debug)]
pub(super) struct ChannelLog {
    channel: ChannelKey,
    dir: Option<PathBuf>,
    segment_size: usize,
    sealed: Vec<Segment>,
    active: Segment,
    file: Option<File>,
}

fn log_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("seg-{id}.log"))
}

fn idx_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("seg-{id}.idx"))
}

fn segment_id(name: &str, ext: &str) -> Option<u64> {
    name.strip_prefix("seg-")?.strip_suffix(ext)?.parse().ok()
}

impl ChannelLog {
    pub fn create(channel: ChannelKey, dir: Option<PathBuf>, segment_size: usize) -> Result<Self, TsdbError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(ChannelLog {
            channel,
            dir,
            segment_size,
            sealed: Vec::new(),
            active: Segment::new(1),
            file: None,
        })
    }

    pub fn recover(channel: ChannelKey, dir: &Path, segment_size: usize) -> Result<Self, TsdbError> {
        let mut logs = Vec::new();
        let mut idxs = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(id) = segment_id(name, ".log") {
                logs.push(id);
            } else if let Some(id) = segment_id(name, ".idx") {
                idxs.push(id);
            } else if name.ends_with(".tmp") {
                fs::remove_file(dir.join(name))?;
            }
        }
        logs.sort_unstable();
        for id in idxs.iter().filter(|i| !logs.contains(i)) {
            // footer left behind by an interrupted retention delete
            fs::remove_file(idx_path(dir, *id))?;
        }
        let mut log = ChannelLog::create(channel, Some(dir.to_path_buf()), segment_size)?;
        let last = logs.last().copied();
        for id in logs {
            let path = log_path(dir, id);
            let bytes = fs::read(&path)?;
            let mut seg = Segment::new(id);
            let mut offset = 0;
            while offset < bytes.len() {
                match decode_record(&log.channel, &bytes[offset..]) {
                    Some((r, used)) => {
                        seg.push(r);
                        offset += used;
                    }
                    None => break,
                }
            }
            if idx_path(dir, id).exists() {
                let footer: Footer = serde_json::from_slice(&fs::read(idx_path(dir, id))?).map_err(|e| {
                    TsdbError::Corrupt {
                        path: idx_path(dir, id),
                        reason: e.to_string(),
                    }
                })?;
                if offset != bytes.len() || seg.footer != Some(footer) {
                    return Err(TsdbError::Corrupt {
                        path,
                        reason: "sealed segment disagrees with its footer".into(),
                    });
                }
                seg.sealed = true;
                log.sealed.push(seg);
                continue;
            }
            if offset != bytes.len() {
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(offset as u64)?;
                f.sync_all()?;
            }
            log.active = seg;
            if Some(id) != last || log.active.entries.len() >= segment_size {
                log.seal()?;
            }
        }
        if log.active.id <= log.sealed.last().map_or(0, |s| s.id) {
            log.active = Segment::new(log.sealed.last().map_or(1, |s| s.id + 1));
        }
        Ok(log)
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.sealed.iter().chain(std::iter::once(&self.active))
    }

    pub fn active_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| log_path(d, self.active.id))
    }

    pub fn append(&mut self, r: Reading) -> Result<Position, TsdbError> {
        if let Some(dir) = &self.dir {
            if self.file.is_none() {
                self.file = Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(log_path(dir, self.active.id))?,
                );
            }
            let f = self.file.as_mut().expect("opened above");
            f.write_all(&encode_record(&r))?;
        }
        let pos = Position {
            segment: self.active.id,
            offset: self.active.entries.len(),
        };
        self.active.push(r);
        if self.active.entries.len() >= self.segment_size {
            self.seal()?;
        }
        Ok(pos)
    }

    fn seal(&mut self) -> Result<(), TsdbError> {
        let next = Segment::new(self.active.id + 1);
        let mut seg = std::mem::replace(&mut self.active, next);
        self.file = None;
        if seg.entries.is_empty() {
            if let Some(dir) = &self.dir {
                let _ = fs::remove_file(log_path(dir, seg.id));
            }
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!("seg-{}.idx.tmp", seg.id));
            fs::write(&tmp, serde_json::to_vec(&seg.footer()).expect("footer serializes"))?;
            fs::rename(&tmp, idx_path(dir, seg.id))?;
        }
        seg.sealed = true;
        self.sealed.push(seg);
        Ok(())
    }

    pub fn drop_sealed_before(&mut self, cutoff: Timestamp) -> Result<Vec<Segment>, TsdbError> {
        let (old, keep): (Vec<Segment>, Vec<Segment>) = std::mem::take(&mut self.sealed)
            .into_iter()
            .partition(|s| s.footer().max_ts < cutoff);
        self.sealed = keep;
        if let Some(dir) = &self.dir {
            for s in &old {
                fs::remove_file(log_path(dir, s.id))?;
                fs::remove_file(idx_path(dir, s.id))?;
            }
        }
        Ok(old)
    }
}
