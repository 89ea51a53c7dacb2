use super::*;
use crate::types::{TagSet, TypedScalar};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn key(sensor: &str) -> ChannelKey {
    ChannelKey::new("n-000001", sensor).unwrap()
}

fn reading(sensor: &str, ts: i64, seq: u64, v: f64) -> Reading {
    Reading {
        channel: key(sensor),
        value: TypedScalar::Number(v),
        unit: "°F".into(),
        ts: Timestamp(ts),
        seq,
        tags: TagSet::new(),
    }
}

fn sort_key(r: &Reading) -> (i64, u64, String) {
    (r.ts.0, r.seq, r.value.encode())
}

#[test]
fn thousand_appends_seal_one_segment() {
    let mut db = Tsdb::in_memory();
    for i in 0..1000 {
        db.append(reading("temp", i, i as u64 + 1, 1.0)).unwrap();
    }
    let footers = db.segment_footers(&key("temp")).unwrap();
    assert_eq!(footers.len(), 2);
    assert!(footers[0].2);
    assert_eq!(footers[0].1.count, 1000);
    assert!(!footers[1].2);
    assert_eq!(footers[1].1.count, 0);
}

#[test]
fn tags_are_indexed() {
    let mut db = Tsdb::in_memory();
    let mut r = reading("temp", 0, 1, 1.0);
    r.tags = TagSet::new().with("zone", "z3").with("site", "bldg7");
    db.append(r).unwrap();
    let mut r = reading("humidity", 0, 1, 1.0);
    r.tags = TagSet::new().with("zone", "z3");
    db.append(r).unwrap();
    assert_eq!(db.find_channels(&[("zone", "z3")]), vec![key("humidity"), key("temp")]);
    assert_eq!(db.find_channels(&[("zone", "z3"), ("site", "bldg7")]), vec![key("temp")]);
    assert!(db.find_channels(&[]).is_empty());
}

#[test]
fn half_open_and_empty_ranges() {
    let mut db = Tsdb::in_memory();
    db.append(reading("temp", 5000, 1, 1.0)).unwrap();
    assert!(db.query_range(&key("temp"), Timestamp(0), Timestamp(1000)).unwrap().is_empty());
    assert_eq!(db.query_range(&key("temp"), Timestamp(5000), Timestamp(6000)).unwrap().len(), 1);
    assert!(db.query_range(&key("temp"), Timestamp(4000), Timestamp(5000)).unwrap().is_empty());
    assert!(matches!(db.query_range(&key("temp"), Timestamp(2), Timestamp(1)), Err(TsdbError::BadRange)));
    assert!(matches!(
        db.query_range(&key("co2"), Timestamp(0), Timestamp(1)),
        Err(TsdbError::UnknownChannel(_))
    ));
}

#[test]
fn out_of_order_appends_are_sorted_on_read() {
    let mut db = Tsdb::in_memory();
    for (ts, seq) in [(300, 3), (100, 1), (200, 2), (100, 0)] {
        db.append(reading("temp", ts, seq, 0.0)).unwrap();
    }
    let got: Vec<(i64, u64)> = db.query_all(&key("temp")).unwrap().iter().map(|r| (r.ts.0, r.seq)).collect();
    assert_eq!(got, vec![(100, 0), (100, 1), (200, 2), (300, 3)]);
}

#[test]
fn downsample_examples() {
    let mut db = Tsdb::in_memory();
    for i in 1..=10 {
        db.append(reading("temp", i * 1000, i as u64, i as f64)).unwrap();
    }
    let k = key("temp");
    let one = db.downsample(&k, Timestamp(1000), Timestamp(11_000), 10_000, Agg::Avg).unwrap();
    let oracle: f64 = (1..=10).map(f64::from).sum::<f64>() / 10.0;
    assert_eq!(one, vec![(Timestamp(1000), oracle)]);
    for agg in [Agg::First, Agg::Last, Agg::Min, Agg::Max, Agg::Avg] {
        let b = db.downsample(&k, Timestamp(1000), Timestamp(11_000), 1000, agg).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.iter().all(|(t, v)| *v == (t.0 / 1000) as f64));
    }
    assert!(matches!(db.downsample(&k, Timestamp(0), Timestamp(1), 0, Agg::Avg), Err(TsdbError::BadInterval)));
    // gaps produce no bucket at all
    let sparse = db.downsample(&k, Timestamp(0), Timestamp(30_000), 500, Agg::Count).unwrap();
    assert_eq!(sparse.len(), 10);
}

#[test]
fn count_at_ten_hertz() {
    let mut db = Tsdb::in_memory();
    for i in 0..600 {
        db.append(reading("temp", i * 100, i as u64 + 1, 1.0)).unwrap();
    }
    let b = db.downsample(&key("temp"), Timestamp(0), Timestamp(60_000), 1000, Agg::Count).unwrap();
    assert_eq!(b.len(), 60);
    assert!(b.iter().all(|(_, c)| *c == 10.0));
}

#[test]
fn retention_keeps_active_and_fresh() {
    let mut db = Tsdb::in_memory();
    for i in 0..2500 {
        let mut r = reading("temp", i, i as u64 + 1, 1.0);
        if i < 1000 {
            r.tags = TagSet::new().with("zone", "old");
        }
        db.append(r).unwrap();
    }
    assert_eq!(db.apply_retention(Timestamp(2500), &RetentionPolicy::global(1_000_000)).unwrap(), 0);
    assert_eq!(db.find_channels(&[("zone", "old")]), vec![key("temp")]);
    assert_eq!(db.apply_retention(Timestamp(1_000_000), &RetentionPolicy::global(10)).unwrap(), 2);
    let left = db.query_all(&key("temp")).unwrap();
    assert_eq!(left.len(), 500);
    assert!(db.find_channels(&[("zone", "old")]).is_empty());
    assert!(matches!(db.apply_retention(Timestamp(0), &RetentionPolicy::global(0)), Err(TsdbError::BadRetention)));
}

#[test]
fn on_disk_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut db = Tsdb::open_with_segment_size(dir.path(), 10).unwrap();
        for i in 0..25 {
            let mut r = reading("temp", i * 10, i as u64 + 1, i as f64 * 0.5);
            r.tags = TagSet::new().with("zone", "z3");
            db.append(r).unwrap();
        }
    }
    let seg_dir = dir.path().join("data/n-000001/temp");
    for f in ["seg-1.log", "seg-1.idx", "seg-2.log", "seg-2.idx", "seg-3.log"] {
        assert!(seg_dir.join(f).exists(), "{f}");
    }
    let footer: Footer = serde_json::from_slice(&std::fs::read(seg_dir.join("seg-1.idx")).unwrap()).unwrap();
    assert_eq!(footer.count, 10);
    assert_eq!(footer.max_ts, Timestamp(90));
    let bytes = std::fs::read(seg_dir.join("seg-3.log")).unwrap();
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    let line = std::str::from_utf8(&bytes[4..4 + len]).unwrap();
    assert!(line.ends_with('\n'));
    let doc: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(doc["v"], "n:10");
    assert_eq!(doc["seq"], 21);

    let db = Tsdb::open_with_segment_size(dir.path(), 10).unwrap();
    let all = db.query_all(&key("temp")).unwrap();
    assert_eq!(all.len(), 25);
    assert_eq!(all[24].value, TypedScalar::Number(12.0));
    assert_eq!(db.find_channels(&[("zone", "z3")]), vec![key("temp")]);
}

#[test]
fn torn_tail_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = Tsdb::open_with_segment_size(dir.path(), 10).unwrap();
    for i in 0..15 {
        db.append(reading("temp", i, i as u64 + 1, 1.0)).unwrap();
    }
    let active = db.active_segment_path(&key("temp")).unwrap();
    drop(db);
    let len = std::fs::metadata(&active).unwrap().len();
    let f = std::fs::OpenOptions::new().write(true).open(&active).unwrap();
    f.set_len(len - 3).unwrap();
    drop(f);
    let mut db = Tsdb::open_with_segment_size(dir.path(), 10).unwrap();
    assert_eq!(db.count(&key("temp")), 14);
    db.append(reading("temp", 99, 99, 1.0)).unwrap();
    let db = Tsdb::open_with_segment_size(dir.path(), 10).unwrap();
    assert_eq!(db.count(&key("temp")), 15);
}

#[test]
fn randomized_multiset_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut db = Tsdb::in_memory();
    let mut input = Vec::new();
    for seq in 1..=10_000u64 {
        let r = reading("temp", rng.random_range(0..100_000), seq, rng.random_range(-50.0..150.0));
        input.push(r.clone());
        db.append(r).unwrap();
    }
    let mut expected: Vec<_> = input.iter().map(sort_key).collect();
    expected.sort();
    let got: Vec<_> = db.query_all(&key("temp")).unwrap().iter().map(sort_key).collect();
    assert_eq!(got, expected);
}

proptest! {
    #[test]
    fn range_matches_filter_oracle(
        points in proptest::collection::vec((0i64..5000, -100.0f64..100.0), 0..300),
        ranges in proptest::collection::vec((0i64..5200, 0i64..5200), 1..10),
    ) {
        let mut db = Tsdb::with_segment_size(None, 37);
        for (i, (ts, v)) in points.iter().enumerate() {
            db.append(reading("temp", *ts, i as u64 + 1, *v)).unwrap();
        }
        if points.is_empty() {
            return Ok(());
        }
        for (a, b) in ranges {
            let (lo, hi) = (a.min(b), a.max(b));
            let mut oracle: Vec<(i64, u64)> = points
                .iter()
                .enumerate()
                .filter(|(_, (ts, _))| *ts >= lo && *ts < hi)
                .map(|(i, (ts, _))| (*ts, i as u64 + 1))
                .collect();
            oracle.sort();
            let got: Vec<(i64, u64)> = db
                .query_range(&key("temp"), Timestamp(lo), Timestamp(hi))
                .unwrap()
                .iter()
                .map(|r| (r.ts.0, r.seq))
                .collect();
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn full_interval_avg_is_mean_of_range(
        points in proptest::collection::vec((0i64..10_000, -100.0f64..100.0), 1..200),
        lo in 0i64..5000,
        width in 1i64..6000,
    ) {
        let mut db = Tsdb::in_memory();
        for (i, (ts, v)) in points.iter().enumerate() {
            db.append(reading("temp", *ts, i as u64 + 1, *v)).unwrap();
        }
        let (t1, t2) = (Timestamp(lo), Timestamp(lo + width));
        let rows = db.query_range(&key("temp"), t1, t2).unwrap();
        let got = db.downsample(&key("temp"), t1, t2, width, Agg::Avg).unwrap();
        if rows.is_empty() {
            prop_assert!(got.is_empty());
        } else {
            let mean = rows.iter().map(|r| r.value.as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
            prop_assert_eq!(got.len(), 1);
            prop_assert!((got[0].1 - mean).abs() <= 1e-9);
        }
    }

    #[test]
    fn retention_matches_age_oracle(
        ts in proptest::collection::vec(0i64..10_000, 1..400),
        now in 0i64..20_000,
        age in 1i64..10_000,
    ) {
        let mut db = Tsdb::with_segment_size(None, 25);
        for (i, t) in ts.iter().enumerate() {
            db.append(reading("temp", *t, i as u64 + 1, 0.0)).unwrap();
        }
        // oracle: group into segments of 25 by arrival; drop full groups whose max is old
        let cutoff = now - age;
        let mut expected: Vec<(i64, u64)> = Vec::new();
        for (g, chunk) in ts.chunks(25).enumerate() {
            let sealed = chunk.len() == 25;
            let max = *chunk.iter().max().unwrap();
            if sealed && max < cutoff {
                continue;
            }
            expected.extend(chunk.iter().enumerate().map(|(j, t)| (*t, (g * 25 + j) as u64 + 1)));
        }
        expected.sort();
        db.apply_retention(Timestamp(now), &RetentionPolicy::global(age)).unwrap();
        let got: Vec<(i64, u64)> = db.query_all(&key("temp")).unwrap().iter().map(|r| (r.ts.0, r.seq)).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn index_agrees_with_scan(
        ops in proptest::collection::vec((0usize..4, 0usize..3, 0usize..3, 0i64..1000), 1..200),
        retain_at in proptest::collection::vec(0i64..2000, 0..3),
    ) {
        let sensors = ["a", "b", "c", "d"];
        let zones = ["z1", "z2", "z3"];
        let sites = ["s1", "s2", "s3"];
        let mut db = Tsdb::with_segment_size(None, 5);
        for (i, (s, z, t, ts)) in ops.iter().enumerate() {
            let mut r = reading(sensors[*s], *ts, i as u64 + 1, 0.0);
            r.tags = TagSet::new().with("zone", zones[*z]).with("site", sites[*t]);
            db.append(r).unwrap();
        }
        for now in retain_at {
            db.apply_retention(Timestamp(now), &RetentionPolicy::global(500)).unwrap();
        }
        for z in zones {
            for s in sites {
                let scan: Vec<ChannelKey> = db
                    .channels()
                    .filter(|k| {
                        db.query_all(k).unwrap().iter().any(|r| r.tags.get("zone") == Some(z))
                            && db.query_all(k).unwrap().iter().any(|r| r.tags.get("site") == Some(s))
                    })
                    .cloned()
                    .collect();
                prop_assert_eq!(db.find_channels(&[("zone", z), ("site", s)]), scan);
            }
        }
    }
}
