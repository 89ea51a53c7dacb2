use super::*;
use crate::controlplane::ControlConfig;
use crate::infomodel::codec::encode_reading;
use crate::infomodel::{Datatype, ObjectClass, PropertyDef, ThingInstance};
use crate::msgbus::{Broker, BrokerConfig, FrameKind, MsgId, Qos};
use crate::types::{ChannelKey, TagSet, TypedScalar};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct World {
    models: ModelRegistry,
    cp: ControlPlane,
    broker: Broker,
    nodes: Vec<(String, String)>,
}

fn world(n: usize) -> World {
    let mut models = ModelRegistry::new();
    models.register_class(ObjectClass::new("sensor")).unwrap();
    models
        .register_class(
            ObjectClass::new("temperature_sensor")
                .parent("sensor")
                .property(PropertyDef::new("temp", Datatype::Number).unit("°F").required().bounds(Some(-100.0), Some(300.0))),
        )
        .unwrap();
    models
        .register_class(
            ObjectClass::new("hvac_unit")
                .property(PropertyDef::new("setpoint", Datatype::Number).writable())
                .property(PropertyDef::new("fan_power", Datatype::Enum).values(&["on", "off"]).writable()),
        )
        .unwrap();
    let mut cp = ControlPlane::new(ControlConfig::new(b"s"));
    let mut broker = Broker::new(BrokerConfig::default());
    let mut nodes = Vec::new();
    for i in 0..n {
        let e = cp.commission(&format!("unit {i}"), "hvac_unit", &models, Timestamp(0)).unwrap();
        cp.transition(&e.node_id, Lifecycle::Active, Timestamp(0), &mut broker).unwrap();
        models
            .register_instance(ThingInstance::new(&format!("{}/temp", e.node_id), "temperature_sensor").tag("zone", "z3"))
            .unwrap();
        nodes.push((e.node_id, e.credential.unwrap()));
    }
    World {
        models,
        cp,
        broker,
        nodes,
    }
}

fn reading(node: &str, seq: u64, v: f64) -> Reading {
    Reading {
        channel: ChannelKey::new(node, "temp").unwrap(),
        value: TypedScalar::Number(v),
        unit: "°F".into(),
        ts: Timestamp(seq as i64 * 100),
        seq,
        tags: TagSet::new(),
    }
}

fn frame(sender: &str, topic: &str, payload: String) -> Frame {
    Frame {
        kind: FrameKind::Pub,
        topic: topic.to_string(),
        msg_id: MsgId {
            sender: sender.to_string(),
            seq: 1,
        },
        qos: Qos::AtLeastOnce,
        retain: false,
        ts: Timestamp(0),
        payload,
    }
}

fn data_frame(node: &str, seq: u64, v: f64) -> Frame {
    frame(node, &format!("data/{node}/temp"), encode_reading(node, &reading(node, seq, v)))
}

fn gateway() -> CloudGateway {
    CloudGateway::new(vec![
        RouteRule::new("data/+/temp", &[Destination::Streams, Destination::Tsdb]),
        RouteRule::new("twin/+/reported", &[Destination::Twin]),
    ])
    .unwrap()
}

#[test]
fn authentication_binding() {
    let w = world(2);
    let (a, cred_a) = &w.nodes[0];
    let (b, _) = &w.nodes[1];
    assert!(w.cp.authenticate(a, cred_a));
    assert!(!w.cp.authenticate(b, cred_a));
}

#[test]
fn admit_valid_and_reject_invalid() {
    let w = world(1);
    let node = &w.nodes[0].0;
    let mut gw = gateway();
    let (d, out) = gw.admit(&data_frame(node, 1, 77.6), &w.cp, &w.models);
    assert_eq!(d, IngressDecision::ADMIT);
    let Some(Admitted::Readings(rs)) = out else { panic!("expected readings") };
    assert_eq!(rs[0].0.tags.get("zone"), Some("z3"));
    assert_eq!(rs[0].1, [Destination::Streams, Destination::Tsdb].into());

    let (d, _) = gw.admit(&data_frame(node, 2, 999.0), &w.cp, &w.models);
    assert_eq!(d.reason, Reason::SchemaInvalid);
    let (d, _) = gw.admit(&frame(node, &format!("data/{node}/temp"), "not json".into()), &w.cp, &w.models);
    assert_eq!(d.reason, Reason::SchemaInvalid);
    let (d, _) = gw.admit(&data_frame(node, 1, 77.6), &w.cp, &w.models);
    assert_eq!(d.reason, Reason::Duplicate);
    // the rejected seq 2 was never recorded, so a valid resend passes
    let (d, _) = gw.admit(&data_frame(node, 2, 70.0), &w.cp, &w.models);
    assert!(d.admitted());
    assert_eq!(gw.audit_log().len(), 5);
}

#[test]
fn log_only_policy_admits_with_warning() {
    let w = world(1);
    let node = &w.nodes[0].0;
    let mut gw = gateway();
    gw.set_policy("temperature_sensor", SchemaPolicy::LogOnly);
    let (d, _) = gw.admit(&data_frame(node, 1, 999.0), &w.cp, &w.models);
    assert!(d.admitted());
    assert_eq!(gw.schema_warnings(), 1);
}

#[test]
fn lifecycle_rejections() {
    let mut w = world(1);
    let node = w.nodes[0].0.clone();
    let mut gw = gateway();
    w.cp.transition(&node, Lifecycle::Quarantined, Timestamp(0), &mut w.broker).unwrap();
    assert_eq!(gw.admit(&data_frame(&node, 1, 70.0), &w.cp, &w.models).0.reason, Reason::Quarantined);
    w.cp.transition(&node, Lifecycle::Decommissioned, Timestamp(0), &mut w.broker).unwrap();
    assert_eq!(gw.admit(&data_frame(&node, 1, 70.0), &w.cp, &w.models).0.reason, Reason::NotActive);
    assert_eq!(
        gw.admit(&data_frame("n-000777", 1, 70.0), &w.cp, &w.models).0.reason,
        Reason::AuthFailed
    );
    // a frame whose sender does not own the topic
    let spoof = frame("n-000002", &format!("data/{node}/temp"), encode_reading(&node, &reading(&node, 1, 1.0)));
    assert_eq!(gw.admit(&spoof, &w.cp, &w.models).0.reason, Reason::AuthFailed);
}

#[test]
fn twin_status_and_alert_frames() {
    let w = world(1);
    let node = &w.nodes[0].0;
    let mut gw = gateway();
    let body = r#"{"reported":{"setpoint":"n:72","fan_power":"s:on"},"ack_version":4,"DateTime":"t:2020-07-15T14:50:07Z"}"#;
    let (d, out) = gw.admit(&frame(node, &format!("twin/{node}/reported"), body.into()), &w.cp, &w.models);
    assert!(d.admitted());
    let Some(Admitted::TwinReport { ack_version, doc, .. }) = out else { panic!() };
    assert_eq!(ack_version, 4);
    assert_eq!(doc["setpoint"], TypedScalar::Number(72.0));
    let bad = r#"{"reported":{"fan_power":"s:sideways"},"ack_version":1}"#;
    assert_eq!(
        gw.admit(&frame(node, &format!("twin/{node}/reported"), bad.into()), &w.cp, &w.models).0.reason,
        Reason::SchemaInvalid
    );
    let status = r#"{"firmware_version":"1.1"}"#;
    assert!(matches!(
        gw.admit(&frame(node, &format!("mgmt/{node}/status"), status.into()), &w.cp, &w.models).1,
        Some(Admitted::Status { .. })
    ));
    assert!(matches!(
        gw.admit(&frame(node, &format!("alerts/{node}"), r#"{"rule_id":"hot"}"#.into()), &w.cp, &w.models).1,
        Some(Admitted::Alert { .. })
    ));
}

#[test]
fn routing_rules() {
    let w = world(1);
    let rules = vec![
        RouteRule::new("data/+/temp", &[Destination::Streams, Destination::Tsdb]),
        RouteRule::new("twin/+/reported", &[Destination::Twin]),
        RouteRule {
            selector: Selector {
                class: Some("sensor".into()),
                tag: Some("zone=z9".into()),
                ..Selector::default()
            },
            destinations: [Destination::Twin].into(),
        },
    ];
    let r = reading("n-000001", 1, 1.0);
    let temp = route(
        &RouteInput {
            topic: "data/n-000001/temp",
            class: Some("temperature_sensor"),
            reading: Some(&r),
        },
        &rules,
        &w.models,
    );
    assert_eq!(temp, [Destination::Streams, Destination::Tsdb].into());
    let other = route(
        &RouteInput {
            topic: "data/n-000001/humidity",
            class: None,
            reading: None,
        },
        &rules,
        &w.models,
    );
    assert_eq!(other, [Destination::Tsdb].into());
    let twin = route(
        &RouteInput {
            topic: "twin/n-000001/reported",
            class: None,
            reading: None,
        },
        &rules,
        &w.models,
    );
    assert_eq!(twin, [Destination::Twin].into());
    let mut tagged = r.clone();
    tagged.tags = TagSet::new().with("zone", "z9");
    let both = route(
        &RouteInput {
            topic: "data/n-000001/temp",
            class: Some("temperature_sensor"),
            reading: Some(&tagged),
        },
        &rules,
        &w.models,
    );
    assert_eq!(both, [Destination::Streams, Destination::Tsdb, Destination::Twin].into());
}

#[test]
fn rules_file_and_audit_file() {
    let dir = tempfile::tempdir().unwrap();
    let rules_path = dir.path().join("routes.json");
    std::fs::write(
        &rules_path,
        r#"[{"selector":{"topic":"data/#"},"destinations":["streams","tsdb"]},{"selector":{"tag":"zone=z3"},"destinations":["twin"]}]"#,
    )
    .unwrap();
    let rules = load_rules(&rules_path).unwrap();
    assert_eq!(rules.len(), 2);
    std::fs::write(&rules_path, r#"[{"selector":{"topic":"a/#/b"},"destinations":["tsdb"]}]"#).unwrap();
    assert!(matches!(load_rules(&rules_path), Err(GatewayError::BadSelector(_))));

    let w = world(1);
    let node = &w.nodes[0].0;
    let audit = dir.path().join("audit.jsonl");
    let mut gw = CloudGateway::new(rules).unwrap().with_audit_file(&audit);
    gw.admit(&data_frame(node, 1, 70.0), &w.cp, &w.models);
    gw.admit(&data_frame(node, 1, 70.0), &w.cp, &w.models);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&audit)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["verdict"], "reject");
    assert_eq!(lines[1]["reason"], "duplicate");
    assert_eq!(lines[0]["node"], node.as_str());
}

#[test]
fn shuffled_duplicates_are_stored_once() {
    let w = world(3);
    let mut gw = gateway();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut schedule = Vec::new();
    for (node, _) in &w.nodes {
        for seq in 1..=300u64 {
            schedule.push((node.clone(), seq));
            if rng.random_bool(0.2) {
                schedule.push((node.clone(), seq));
            }
        }
    }
    schedule.shuffle(&mut rng);
    let mut stored = std::collections::BTreeMap::<(String, u64), usize>::new();
    for (node, seq) in &schedule {
        if let (_, Some(Admitted::Readings(rs))) = gw.admit(&data_frame(node, *seq, 50.0), &w.cp, &w.models) {
            for (r, _) in rs {
                *stored.entry((node.clone(), r.seq)).or_default() += 1;
            }
        }
    }
    assert_eq!(stored.len(), 900);
    assert!(stored.values().all(|c| *c == 1));
    assert_eq!(gw.audit_log().len(), schedule.len());
}

proptest! {
    /// Frames from nodes that are not active never reach a destination,
    /// whatever the interleaving of lifecycle moves.
    #[test]
    fn only_active_nodes_reach_destinations(ops in proptest::collection::vec((0usize..3, 0u8..4), 1..80)) {
        let mut w = world(3);
        let mut gw = gateway();
        let mut seq = 0;
        for (n, op) in ops {
            let node = w.nodes[n].0.clone();
            let target = match op {
                0 => Some(Lifecycle::Quarantined),
                1 => Some(Lifecycle::Active),
                2 => Some(Lifecycle::Decommissioned),
                _ => None,
            };
            if let Some(t) = target {
                let _ = w.cp.transition(&node, t, Timestamp(0), &mut w.broker);
            }
            seq += 1;
            let active = w.cp.entry(&node).unwrap().lifecycle == Lifecycle::Active;
            let (d, out) = gw.admit(&data_frame(&node, seq, 60.0), &w.cp, &w.models);
            prop_assert_eq!(d.admitted(), active);
            prop_assert_eq!(out.is_some(), active);
        }
    }
}
