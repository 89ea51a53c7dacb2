//! Edge node to storage over the in-process broker: buffering, dedup,
//! desired-state delivery, ACL and quarantine, without the scenario harness.

use iotra_core::cloudgw::{Admitted, CloudGateway, Destination, Reason, RouteRule, Verdict};
use iotra_core::controlplane::{ControlConfig, ControlPlane, Lifecycle};
use iotra_core::edge::{Actuation, BrokerUplink, ChannelConfig, Condition, ControlRule, EdgeNode, NodeConfig, UplinkConfig};
use iotra_core::infomodel::{Datatype, ModelRegistry, ObjectClass, PayloadMap, PropertyDef, ThingInstance};
use iotra_core::msgbus::{Broker, BrokerConfig, Qos, SessionId};
use iotra_core::tsdb::Tsdb;
use iotra_core::twins::{DesiredPatch, TwinService};
use iotra_core::{ChannelKey, CmpOp, Timestamp, TypedScalar};

struct Cloud {
    broker: Broker,
    cp: ControlPlane,
    models: ModelRegistry,
    gateway: CloudGateway,
    tsdb: Tsdb,
    twins: TwinService,
    service: SessionId,
    node_id: String,
    credential: String,
}

fn models() -> ModelRegistry {
    let mut m = ModelRegistry::new();
    m.register_class(ObjectClass::new("sensor")).unwrap();
    m.register_class(
        ObjectClass::new("temperature_sensor")
            .parent("sensor")
            .property(PropertyDef::new("temp", Datatype::Number).unit("°F").required()),
    )
    .unwrap();
    m.register_class(
        ObjectClass::new("hvac_unit")
            .property(PropertyDef::new("setpoint", Datatype::Number).writable())
            .property(PropertyDef::new("fan_power", Datatype::Boolean)),
    )
    .unwrap();
    m
}

fn cloud() -> Cloud {
    let mut models = models();
    let mut broker = Broker::new(BrokerConfig::default());
    let mut cp = ControlPlane::new(ControlConfig::new(b"test-secret"));
    let e = cp.commission("ahu", "hvac_unit", &models, Timestamp(0)).unwrap();
    cp.transition(&e.node_id, Lifecycle::Active, Timestamp(0), &mut broker).unwrap();
    models.register_instance(ThingInstance::new(&e.node_id, "hvac_unit")).unwrap();
    models
        .register_instance(ThingInstance::new(&format!("{}/temp", e.node_id), "temperature_sensor"))
        .unwrap();
    let mut twins = TwinService::new(10_000);
    twins.register(&e.node_id, "hvac_unit");
    let service = broker.connect_service("cloud");
    for f in ["data/#", "twin/+/reported", "alerts/#"] {
        broker.subscribe(service, f, Timestamp(0)).unwrap();
    }
    let gateway = CloudGateway::new(vec![
        RouteRule::new("data/#", &[Destination::Tsdb]),
        RouteRule::new("twin/+/reported", &[Destination::Twin]),
    ])
    .unwrap();
    Cloud {
        broker,
        cp,
        models,
        gateway,
        tsdb: Tsdb::in_memory(),
        twins,
        service,
        credential: e.credential.unwrap(),
        node_id: e.node_id,
    }
}

fn edge(c: &Cloud) -> EdgeNode {
    EdgeNode::new(NodeConfig {
        node_id: c.node_id.clone(),
        instances: vec![ThingInstance::new(&c.node_id, "hvac_unit")],
        channels: vec![ChannelConfig::new("temp", "temperature_sensor", 100, "°F").calibrated(0.1, -40.0)],
        edge_rules: Vec::new(),
        control_rules: vec![ControlRule {
            rule_id: "cool".into(),
            condition: Condition::cmp("temp", CmpOp::Gt, 78.0),
            action: Actuation::new("fan", "power", TypedScalar::Bool(true)),
        }],
        buffer_capacity: 64,
        uplink: UplinkConfig {
            broker: "local".into(),
            credential: c.credential.clone(),
            queue_capacity: None,
        },
    })
    .unwrap()
}

/// Drains the cloud session through the gateway. Returns the rejections.
fn ingest(c: &mut Cloud, now: Timestamp) -> Vec<Reason> {
    let mut rejected = Vec::new();
    for frame in c.broker.poll(c.service) {
        let (decision, admitted) = c.gateway.admit(&frame, &c.cp, &c.models);
        if decision.verdict == Verdict::Reject {
            rejected.push(decision.reason);
        }
        match admitted {
            Some(Admitted::Readings(rs)) => {
                for (r, dest) in rs {
                    if dest.contains(&Destination::Tsdb) {
                        c.tsdb.append(r).unwrap();
                    }
                }
            }
            Some(Admitted::TwinReport { node, doc, ack_version, ts }) => {
                c.twins.apply_report(&node, &doc, ack_version, ts, &c.models).unwrap();
            }
            _ => {}
        }
        if frame.qos == Qos::AtLeastOnce {
            c.broker.ack(c.service, &frame.msg_id);
        }
    }
    c.twins.refresh_connectivity(now, &c.broker);
    rejected
}

fn connect(c: &mut Cloud, node: &EdgeNode) -> SessionId {
    let s = c.broker.connect_node(&c.node_id, &c.credential, &c.cp).unwrap();
    for f in node.command_filters() {
        c.broker.subscribe(s, &f, Timestamp(0)).unwrap();
    }
    s
}

#[test]
fn calibrated_readings_are_stored_once() {
    let mut c = cloud();
    let mut node = edge(&c);
    let s = connect(&mut c, &node);
    let raws: Vec<f64> = (0..20).map(|i| 1100.0 + 7.0 * i as f64).collect();
    for (i, raw) in raws.iter().enumerate() {
        node.sample("temp", *raw, Timestamp(i as i64 * 100)).unwrap();
    }
    node.flush(&mut BrokerUplink {
        broker: &mut c.broker,
        session: s,
        now: Timestamp(2_000),
    });
    assert!(ingest(&mut c, Timestamp(2_000)).is_empty());

    let ch = ChannelKey::new(&c.node_id, "temp").unwrap();
    let stored = c.tsdb.query_all(&ch).unwrap();
    assert_eq!(stored.len(), raws.len());
    for (r, raw) in stored.iter().zip(&raws) {
        let want = 0.1 * raw - 40.0;
        assert!((r.value.as_f64().unwrap() - want).abs() < 1e-9);
        assert_eq!(r.unit, "°F");
    }

    // the same reading published again is dropped by the gateway
    let again = iotra_core::infomodel::codec::encode_reading(&c.node_id, &stored[3]);
    c.broker
        .publish(s, &format!("data/{}/temp", c.node_id), again, Qos::AtLeastOnce, false, Timestamp(2_100))
        .unwrap();
    assert_eq!(ingest(&mut c, Timestamp(2_100)), vec![Reason::Duplicate]);
    assert_eq!(c.tsdb.count(&ch), raws.len());
}

#[test]
fn offline_node_catches_up_and_converges() {
    let mut c = cloud();
    let mut node = edge(&c);
    for i in 0..10 {
        node.sample("temp", 1150.0, Timestamp(i * 100)).unwrap();
    }
    // 0.1 * 1150 - 40 = 75, below the fan rule's threshold
    assert!(node.actuation_log().is_empty());
    assert_eq!(node.uplink().len(), 10);

    let mut set = PayloadMap::new();
    set.insert("setpoint".into(), TypedScalar::Number(70.0));
    let patch = DesiredPatch {
        set,
        origin: "test".into(),
        ts: Timestamp(500),
    };
    let version = c.twins.set_desired(&c.node_id, &patch, &c.models, &mut c.broker).unwrap();
    assert_eq!(version, 1);
    assert!(!c.twins.converged(&c.node_id).unwrap());

    let s = connect(&mut c, &node);
    for f in c.broker.poll(s) {
        node.handle_command(&f.topic, &f.payload, Timestamp(1_000)).unwrap();
        c.broker.ack(s, &f.msg_id);
    }
    assert_eq!(node.device_state().get("setpoint"), Some(&TypedScalar::Number(70.0)));
    node.flush(&mut BrokerUplink {
        broker: &mut c.broker,
        session: s,
        now: Timestamp(1_000),
    });
    assert!(node.uplink().is_empty());
    assert!(ingest(&mut c, Timestamp(1_000)).is_empty());

    let ch = ChannelKey::new(&c.node_id, "temp").unwrap();
    let seqs: Vec<u64> = c.tsdb.scan(&ch).unwrap().iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (1..=10).collect::<Vec<_>>());
    assert!(c.twins.converged(&c.node_id).unwrap());
    let twin = c.twins.get_twin(&c.node_id).unwrap();
    assert_eq!(&twin.reported, node.device_state());
}

#[test]
fn actuation_is_reported_to_the_twin() {
    let mut c = cloud();
    let mut node = edge(&c);
    let s = connect(&mut c, &node);
    let out = node.sample("temp", 1200.0, Timestamp(0)).unwrap();
    assert_eq!(out.actuations.len(), 1);
    node.queue_reported(Timestamp(0));
    node.flush(&mut BrokerUplink {
        broker: &mut c.broker,
        session: s,
        now: Timestamp(0),
    });
    ingest(&mut c, Timestamp(0));
    let twin = c.twins.get_twin(&c.node_id).unwrap();
    assert_eq!(twin.reported.get("fan_power"), Some(&TypedScalar::Bool(true)));
}

#[test]
fn foreign_topics_and_quarantined_nodes_are_refused() {
    let mut c = cloud();
    let mut node = edge(&c);
    let s = connect(&mut c, &node);
    assert!(c
        .broker
        .publish(s, "data/n-999999/temp", "{}", Qos::AtLeastOnce, false, Timestamp(0))
        .is_err());

    // a frame in flight when the node is quarantined never reaches storage
    node.sample("temp", 1150.0, Timestamp(0)).unwrap();
    node.flush(&mut BrokerUplink {
        broker: &mut c.broker,
        session: s,
        now: Timestamp(0),
    });
    c.cp.transition(&c.node_id, Lifecycle::Quarantined, Timestamp(50), &mut c.broker).unwrap();
    assert!(!c.broker.is_connected(s));
    assert_eq!(ingest(&mut c, Timestamp(100)), vec![Reason::Quarantined]);
    assert!(c.tsdb.channels().next().is_none());

    assert!(c.broker.connect_node(&c.node_id, &c.credential, &c.cp).is_err());
    c.cp.transition(&c.node_id, Lifecycle::Active, Timestamp(200), &mut c.broker).unwrap();
    assert!(c.broker.connect_node(&c.node_id, &c.credential, &c.cp).is_ok());
}
