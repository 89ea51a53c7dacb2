use std::collections::VecDeque;

use super::Item;
use crate::tsdb::Agg;
use crate::types::{Timestamp, TypedScalar};

/// Event-time sliding window over one channel.
///
/// Windows are half-open `[end - size, end)` with `end` on multiples of
/// `slide`. A window is emitted once the watermark reaches its end; the
/// watermark is the newest timestamp seen minus the allowed lateness, or
/// whatever an external flush pushed it to, whichever is later.
#[derive(Debug, Clone)]
pub struct WindowState {
    size_ms: i64,
    slide_ms: i64,
    agg: Agg,
    lateness_ms: i64,
    values: VecDeque<(Timestamp, f64)>,
    next_end: Option<i64>,
    max_seen: Option<Timestamp>,
    flushed: Option<Timestamp>,
    template: Option<Item>,
    pub late: u64,
}

impl WindowState {
    pub fn new(size_ms: i64, slide_ms: i64, agg: Agg, lateness_ms: i64) -> Self {
        WindowState {
            size_ms,
            slide_ms,
            agg,
            lateness_ms,
            values: VecDeque::new(),
            next_end: None,
            max_seen: None,
            flushed: None,
            template: None,
            late: 0,
        }
    }

    pub fn watermark(&self) -> Option<Timestamp> {
        let from_data = self.max_seen.map(|t| t.plus_ms(-self.lateness_ms));
        match (from_data, self.flushed) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }

    /// Adds one value and returns the windows it made due.
    pub fn push(&mut self, item: &Item) -> Vec<Item> {
        let Some(v) = item.value.as_f64() else {
            return Vec::new();
        };
        if self.watermark().is_some_and(|wm| item.ts < wm) {
            self.late += 1;
            return Vec::new();
        }
        if self.next_end.is_none() {
            self.next_end = Some((item.ts.0.div_euclid(self.slide_ms) + 1) * self.slide_ms);
        }
        self.template = Some(item.clone());
        let at = self.values.partition_point(|(t, _)| *t <= item.ts);
        self.values.insert(at, (item.ts, v));
        self.max_seen = Some(self.max_seen.map_or(item.ts, |m| m.max(item.ts)));
        self.emit_due()
    }

    /// Advances the watermark to at least `to` and returns due windows.
    pub fn flush(&mut self, to: Timestamp) -> Vec<Item> {
        self.flushed = Some(self.flushed.map_or(to, |f| f.max(to)));
        self.emit_due()
    }

    fn emit_due(&mut self) -> Vec<Item> {
        let (Some(wm), Some(template)) = (self.watermark(), self.template.clone()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while let Some(end) = self.next_end.filter(|e| *e <= wm.0) {
            let start = end - self.size_ms;
            let vals: Vec<f64> = self
                .values
                .iter()
                .filter(|(t, _)| t.0 >= start && t.0 < end)
                .map(|(_, v)| *v)
                .collect();
            let value = match self.agg {
                Agg::Count => Some(vals.len() as f64),
                agg => agg.apply(&vals),
            };
            if let Some(value) = value {
                out.push(Item {
                    ts: Timestamp(end),
                    seq: 0,
                    value: TypedScalar::Number(value),
                    window: Some((Timestamp(start), Timestamp(end))),
                    ..template.clone()
                });
            }
            let next = end + self.slide_ms;
            self.next_end = Some(next);
            let keep_from = next - self.size_ms;
            while self.values.front().is_some_and(|(t, _)| t.0 < keep_from) {
                self.values.pop_front();
            }
        }
        out
    }
}
