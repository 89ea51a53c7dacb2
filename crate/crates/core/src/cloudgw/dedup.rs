use std::collections::{BTreeSet, HashMap};

/// Seen sequence numbers of one channel: everything up to `watermark`, plus
/// the sparse set above it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupState {
    pub watermark: u64,
    pub above: BTreeSet<u64>,
}

impl DedupState {
    /// True when `seq` was not seen before; records it.
    pub fn check(&mut self, seq: u64) -> bool {
        if seq <= self.watermark || !self.above.insert(seq) {
            return false;
        }
        while self.above.remove(&(self.watermark + 1)) {
            self.watermark += 1;
        }
        true
    }
}

/// Per (node, channel) duplicate filter.
#[derive(Debug, Clone, Default)]
pub struct Dedup {
    channels: HashMap<(String, String), DedupState>,
}

impl Dedup {
    pub fn check(&mut self, node: &str, sensor: &str, seq: u64) -> bool {
        self.channels
            .entry((node.to_string(), sensor.to_string()))
            .or_default()
            .check(seq)
    }

    pub fn state(&self, node: &str, sensor: &str) -> Option<&DedupState> {
        self.channels.get(&(node.to_string(), sensor.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn examples() {
        let mut d = DedupState::default();
        assert_eq!([1, 2, 3, 2].map(|s| d.check(s)), [true, true, true, false]);
        assert!(d.above.is_empty());
        let mut d = DedupState::default();
        assert_eq!([1, 3, 2].map(|s| d.check(s)), [true, true, true]);
        assert_eq!(d.watermark, 3);
    }

    proptest! {
        #[test]
        fn fresh_count_is_distinct_count(seqs in proptest::collection::vec(1u64..200, 0..400)) {
            let mut d = DedupState::default();
            let mut seen = HashSet::new();
            for s in &seqs {
                let watermark = d.watermark;
                prop_assert_eq!(d.check(*s), seen.insert(*s));
                prop_assert!(d.watermark >= watermark);
            }
        }

        #[test]
        fn in_order_keeps_set_empty(n in 1u64..500) {
            let mut d = DedupState::default();
            for s in 1..=n {
                d.check(s);
                prop_assert!(d.above.is_empty());
            }
        }
    }
}
