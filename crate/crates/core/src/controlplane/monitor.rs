use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Traffic anomaly detector parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub alpha: f64,
    pub factor: f64,
    /// Messages per bucket below which nothing is anomalous.
    pub floor: f64,
    /// Consecutive anomalous buckets that open an incident.
    pub consecutive: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            alpha: 0.2,
            factor: 5.0,
            floor: 10.0,
            consecutive: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Anomalous,
    IncidentOpened,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeMonitor {
    /// Unset until the first observed bucket, which seeds it.
    pub ewma: Option<f64>,
    pub streak: u32,
}

/// Per-node EWMA of per-bucket message counts.
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    config: MonitorConfig,
    nodes: BTreeMap<String, NodeMonitor>,
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Self {
        Monitor {
            config,
            nodes: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn state(&self, node: &str) -> NodeMonitor {
        self.nodes.get(node).copied().unwrap_or_default()
    }

    /// Feeds one bucket. The first bucket seeds the baseline; later
    /// anomalous buckets never move it. The
    /// verdict is `IncidentOpened` exactly when the streak reaches the
    /// configured length; the streak then starts over.
    pub fn observe(&mut self, node: &str, count: u64) -> Verdict {
        let c = self.config;
        let st = self.nodes.entry(node.to_string()).or_default();
        let count = count as f64;
        let Some(ewma) = st.ewma else {
            st.ewma = Some(count);
            st.streak = 0;
            return Verdict::Normal;
        };
        let threshold = c.floor.max(c.factor * ewma);
        if count > threshold {
            st.streak += 1;
            if st.streak >= c.consecutive {
                st.streak = 0;
                return Verdict::IncidentOpened;
            }
            return Verdict::Anomalous;
        }
        st.streak = 0;
        st.ewma = Some(c.alpha * count + (1.0 - c.alpha) * ewma);
        Verdict::Normal
    }

    /// Clears the anomaly streak and keeps the learned baseline.
    pub fn reset_streak(&mut self, node: &str) {
        if let Some(st) = self.nodes.get_mut(node) {
            st.streak = 0;
        }
    }

    pub fn forget(&mut self, node: &str) {
        self.nodes.remove(node);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flood_over_baseline() {
        let mut m = Monitor::new(MonitorConfig::default());
        for _ in 0..20 {
            assert_eq!(m.observe("n", 10), Verdict::Normal);
        }
        assert!((m.state("n").ewma.unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(m.observe("n", 1000), Verdict::Anomalous);
        assert_eq!(m.observe("n", 1000), Verdict::Anomalous);
        assert_eq!(m.observe("n", 1000), Verdict::IncidentOpened);
        // baseline untouched by the flood
        assert!((m.state("n").ewma.unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn normal_bucket_breaks_streak() {
        let mut m = Monitor::new(MonitorConfig::default());
        m.observe("n", 5);
        let v: Vec<Verdict> = [1000, 1000, 5, 1000, 1000, 1000].iter().map(|c| m.observe("n", *c)).collect();
        assert_eq!(
            v,
            vec![
                Verdict::Anomalous,
                Verdict::Anomalous,
                Verdict::Normal,
                Verdict::Anomalous,
                Verdict::Anomalous,
                Verdict::IncidentOpened
            ]
        );
    }

    #[test]
    fn floor_applies_to_quiet_nodes() {
        let mut m = Monitor::new(MonitorConfig::default());
        m.observe("n", 0);
        assert_eq!(m.observe("n", 10), Verdict::Normal);
        assert_eq!(m.observe("n", 11), Verdict::Anomalous);
    }

    #[test]
    fn first_bucket_seeds_even_above_floor() {
        let mut m = Monitor::new(MonitorConfig::default());
        for _ in 0..5 {
            assert_eq!(m.observe("n", 40), Verdict::Normal);
        }
        assert_eq!(m.state("n").ewma, Some(40.0));
    }

    /// Step-by-step replay written against the rule text.
    fn scripted(counts: &[u64]) -> Vec<Verdict> {
        let mut ewma: Option<f64> = None;
        let mut run = 0;
        let mut out = Vec::new();
        for &c in counts {
            let Some(before) = ewma else {
                ewma = Some(c as f64);
                out.push(Verdict::Normal);
                continue;
            };
            let limit = if 5.0 * before > 10.0 { 5.0 * before } else { 10.0 };
            if (c as f64) > limit {
                run += 1;
                if run == 3 {
                    out.push(Verdict::IncidentOpened);
                    run = 0;
                } else {
                    out.push(Verdict::Anomalous);
                }
            } else {
                run = 0;
                ewma = Some(0.8 * before + 0.2 * c as f64);
                out.push(Verdict::Normal);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_scripted_oracle(trace in proptest::collection::vec(prop_oneof![0u64..30, 500u64..2000], 0..120)) {
            let mut m = Monitor::new(MonitorConfig::default());
            let got: Vec<Verdict> = trace.iter().map(|c| m.observe("n", *c)).collect();
            prop_assert_eq!(got, scripted(&trace));
        }
    }
}
