//! JSON report codec.
//!
//! One object per reading, keys in fixed order:
//! `id`, `<sensor>`, `unit`, `DateTime`, `seq` (omitted when 0), then tags
//! sorted by key. Values are typed scalars (`n:77.6`, `t:...Z`), except
//! `id` and `unit` which are raw strings.

use serde_json::{Map, Value};
use thiserror::Error;

use super::PayloadMap;
use crate::types::{ChannelKey, Reading, TagSet, Timestamp, TypedScalar, ValueError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed payload: {0}")]
    MalformedText(String),
    #[error("unknown typed-scalar prefix in `{0}`")]
    UnknownPrefix(String),
    #[error("bad timestamp `{0}`")]
    BadTimestamp(String),
}

impl From<ValueError> for CodecError {
    fn from(e: ValueError) -> Self {
        match e {
            ValueError::UnknownPrefix(s) => CodecError::UnknownPrefix(s),
            ValueError::BadTimestamp(s) => CodecError::BadTimestamp(s),
            other => CodecError::MalformedText(other.to_string()),
        }
    }
}

const FIXED_KEYS: [&str; 4] = ["id", "unit", "DateTime", "seq"];

/// Encodes each reading as one JSON object. Tags whose key collides with a
/// fixed key or the sensor name are not representable and are skipped.
pub fn encode_report(node_id: &str, readings: &[Reading]) -> Vec<String> {
    readings.iter().map(|r| encode_reading(node_id, r)).collect()
}

pub fn encode_reading(node_id: &str, r: &Reading) -> String {
    let mut obj = Map::new();
    obj.insert("id".into(), Value::String(node_id.to_string()));
    obj.insert(r.channel.sensor.clone(), Value::String(r.value.encode()));
    obj.insert("unit".into(), Value::String(TypedScalar::encode_raw_string(&r.unit)));
    obj.insert("DateTime".into(), Value::String(TypedScalar::Time(r.ts).encode()));
    if r.seq > 0 {
        obj.insert("seq".into(), Value::String(format!("n:{}", r.seq)));
    }
    for (k, v) in r.tags.iter() {
        if FIXED_KEYS.contains(&k.as_str()) || *k == r.channel.sensor {
            continue;
        }
        obj.insert(k.clone(), Value::String(TypedScalar::Str(v.clone()).encode()));
    }
    Value::Object(obj).to_string()
}

/// Decodes one object or a JSON array of objects. All objects must carry the
/// same `id`.
pub fn decode_report(text: &str) -> Result<(String, Vec<Reading>), CodecError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| CodecError::MalformedText(e.to_string()))?;
    let objects = match value {
        Value::Object(o) => vec![o],
        Value::Array(items) => items
            .into_iter()
            .map(|v| match v {
                Value::Object(o) => Ok(o),
                _ => Err(CodecError::MalformedText("array element is not an object".into())),
            })
            .collect::<Result<_, _>>()?,
        _ => return Err(CodecError::MalformedText("expected an object or array".into())),
    };
    let mut node = None;
    let mut readings = Vec::with_capacity(objects.len());
    for obj in objects {
        let (id, reading) = decode_object(&obj)?;
        match &node {
            None => node = Some(id),
            Some(n) if *n != id => {
                return Err(CodecError::MalformedText("readings from more than one node".into()))
            }
            Some(_) => {}
        }
        readings.push(reading);
    }
    Ok((node.unwrap_or_default(), readings))
}

fn decode_object(obj: &Map<String, Value>) -> Result<(String, Reading), CodecError> {
    let mut id = None;
    let mut value: Option<(String, TypedScalar)> = None;
    let mut unit = String::new();
    let mut ts = None;
    let mut seq = 0u64;
    let mut tags = TagSet::new();

    for (key, raw) in obj {
        let Value::String(text) = raw else {
            return Err(CodecError::MalformedText(format!("`{key}` is not a string")));
        };
        match key.as_str() {
            "id" => id = Some(text.clone()),
            "unit" => match TypedScalar::decode_lenient(text)? {
                TypedScalar::Str(s) => unit = s,
                _ => return Err(CodecError::MalformedText("unit must be a string".into())),
            },
            "DateTime" => match TypedScalar::decode(text) {
                Ok(TypedScalar::Time(t)) => ts = Some(t),
                Ok(_) | Err(ValueError::UnknownPrefix(_)) => {
                    return Err(CodecError::BadTimestamp(text.clone()))
                }
                Err(e) => return Err(e.into()),
            },
            "seq" => match TypedScalar::decode_lenient(text)? {
                TypedScalar::Number(_) if text[2..].parse::<u64>().is_ok_and(|n| n >= 1) => {
                    seq = text[2..].parse().expect("checked above")
                }
                TypedScalar::Number(v) if v >= 1.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => {
                    seq = v as u64
                }
                TypedScalar::Str(s) => {
                    seq = s
                        .parse()
                        .map_err(|_| CodecError::MalformedText(format!("bad seq `{s}`")))?
                }
                _ => return Err(CodecError::MalformedText(format!("bad seq `{text}`"))),
            },
            _ if value.is_none() => value = Some((key.clone(), TypedScalar::decode(text)?)),
            _ => match TypedScalar::decode_lenient(text)? {
                TypedScalar::Str(s) => {
                    tags.insert(key, &s)
                        .map_err(|e| CodecError::MalformedText(e.to_string()))?;
                }
                _ => {
                    return Err(CodecError::MalformedText(format!(
                        "tag `{key}` must be a string"
                    )))
                }
            },
        }
    }

    let id = id.ok_or_else(|| CodecError::MalformedText("missing `id`".into()))?;
    let (sensor, value) = value.ok_or_else(|| CodecError::MalformedText("missing value key".into()))?;
    let ts = ts.ok_or_else(|| CodecError::MalformedText("missing `DateTime`".into()))?;
    let channel = ChannelKey::new(id.clone(), sensor)
        .map_err(|e| CodecError::MalformedText(e.to_string()))?;
    Ok((
        id,
        Reading {
            channel,
            value,
            unit,
            ts,
            seq,
            tags,
        },
    ))
}

/// The key→scalar view of a reading used for class validation. Tags are
/// contextual metadata and are left out.
pub fn payload_fields(r: &Reading) -> PayloadMap {
    let mut map = PayloadMap::new();
    map.insert("id".into(), TypedScalar::Str(r.channel.node_id.clone()));
    map.insert(r.channel.sensor.clone(), r.value.clone());
    map.insert("unit".into(), TypedScalar::Str(r.unit.clone()));
    map.insert("DateTime".into(), TypedScalar::Time(r.ts));
    if r.seq > 0 {
        map.insert("seq".into(), TypedScalar::Number(r.seq as f64));
    }
    map
}

/// Parses a flat `{"key":"n:1", ...}` document of typed scalars, as used by
/// twin reports and desired-state patches.
pub fn decode_doc(value: &Value) -> Result<PayloadMap, CodecError> {
    let Value::Object(obj) = value else {
        return Err(CodecError::MalformedText("document is not an object".into()));
    };
    obj.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), TypedScalar::decode(s)?)),
            _ => Err(CodecError::MalformedText(format!("`{k}` is not a string"))),
        })
        .collect()
}

pub fn encode_doc(doc: &PayloadMap) -> Value {
    Value::Object(
        doc.iter()
            .map(|(k, v)| (k.clone(), Value::String(v.encode())))
            .collect(),
    )
}

/// Convenience for decoding a single timestamp field that may carry a `t:`
/// prefix.
pub fn decode_time(text: &str) -> Result<Timestamp, CodecError> {
    let body = text.strip_prefix("t:").unwrap_or(text);
    Timestamp::parse(body).map_err(CodecError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infomodel::{Datatype, ModelRegistry, ObjectClass, PropertyDef};
    use proptest::prelude::*;

    const EXAMPLE_PAYLOAD: &str =
        r#"{ "id": "150a3c6e-bef0e", "temp": "n:77.6", "unit": "°F", "DateTime": "t:2020-07-15T14:50:07Z UTC" }"#;

    fn sample() -> Reading {
        Reading {
            channel: ChannelKey::new("150a3c6e-bef0e", "temp").unwrap(),
            value: TypedScalar::Number(77.6),
            unit: "°F".into(),
            ts: Timestamp::parse("2020-07-15T14:50:07Z").unwrap(),
            seq: 0,
            tags: TagSet::new(),
        }
    }

    #[test]
    fn encodes_canonical_form() {
        let out = encode_report("150a3c6e-bef0e", &[sample()]);
        assert_eq!(
            out,
            vec![r#"{"id":"150a3c6e-bef0e","temp":"n:77.6","unit":"°F","DateTime":"t:2020-07-15T14:50:07Z"}"#]
        );
        assert!(encode_report("x", &[]).is_empty());
    }

    #[test]
    fn tags_follow_fixed_keys() {
        let mut r = sample();
        r.tags = TagSet::new().with("zone", "Z3").with("site", "bldg7");
        r.seq = 12;
        let text = encode_reading("150a3c6e-bef0e", &r);
        assert_eq!(
            text,
            r#"{"id":"150a3c6e-bef0e","temp":"n:77.6","unit":"°F","DateTime":"t:2020-07-15T14:50:07Z","seq":"n:12","site":"s:bldg7","zone":"s:Z3"}"#
        );
        let (_, back) = decode_report(&text).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn decodes_reference_example() {
        let (id, readings) = decode_report(EXAMPLE_PAYLOAD).unwrap();
        assert_eq!(id, "150a3c6e-bef0e");
        assert_eq!(readings, vec![sample()]);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_report(r#"{"temp":"x:5"}"#), Err(CodecError::UnknownPrefix(_))));
        assert!(matches!(decode_report("{not json"), Err(CodecError::MalformedText(_))));
        assert!(matches!(
            decode_report(r#"{"id":"a","temp":"n:1","DateTime":"t:last tuesday"}"#),
            Err(CodecError::BadTimestamp(_))
        ));
        assert!(matches!(
            decode_report(r#"{"id":"a","temp":"n:1"}"#),
            Err(CodecError::MalformedText(_))
        ));
        assert!(matches!(
            decode_report(r#"{"id":"a","temp":5,"DateTime":"t:2020-07-15T14:50:07Z"}"#),
            Err(CodecError::MalformedText(_))
        ));
    }

    #[test]
    fn large_seq_is_exact() {
        let mut r = sample();
        r.seq = (1 << 60) + 1;
        let (_, back) = decode_report(&encode_reading("a", &r)).unwrap();
        assert_eq!(back[0].seq, r.seq);
    }

    #[test]
    fn array_form() {
        let mut a = sample();
        a.seq = 1;
        let mut b = sample();
        b.seq = 2;
        b.value = TypedScalar::Number(78.0);
        let joined = format!("[{}]", encode_report("150a3c6e-bef0e", &[a.clone(), b.clone()]).join(","));
        assert_eq!(decode_report(&joined).unwrap().1, vec![a, b]);
    }

    fn arb_reading() -> impl Strategy<Value = Reading> {
        let value = prop_oneof![
            (-1e12f64..1e12).prop_map(TypedScalar::Number),
            any::<f64>()
                .prop_filter("finite", |v| v.is_finite())
                .prop_map(TypedScalar::Number),
            "[ -~]{0,12}".prop_map(TypedScalar::Str),
            any::<bool>().prop_map(TypedScalar::Bool),
            (0i64..4_000_000_000_000).prop_map(|ms| TypedScalar::Time(Timestamp(ms))),
        ];
        (
            "[a-z][a-z0-9_]{0,8}".prop_filter("not fixed", |s| !FIXED_KEYS.contains(&s.as_str())),
            value,
            "[ -~]{0,6}|°F|°C|%",
            0i64..4_000_000_000_000,
            0u64..1_000_000,
            proptest::collection::btree_map("[a-z][a-z0-9]{0,5}", "[ -~]{0,8}", 0..3),
        )
            .prop_filter_map("tag keys disjoint", |(sensor, value, unit, ms, seq, tags)| {
                if tags.keys().any(|k| FIXED_KEYS.contains(&k.as_str()) || *k == sensor) {
                    return None;
                }
                Some(Reading {
                    channel: ChannelKey::new("n-000001", sensor).unwrap(),
                    value,
                    unit,
                    ts: Timestamp(ms),
                    seq,
                    tags: TagSet(tags),
                })
            })
    }

    proptest! {
        #[test]
        fn round_trip(r in arb_reading()) {
            let text = encode_reading("n-000001", &r);
            let (id, back) = decode_report(&text).unwrap();
            prop_assert_eq!(id, "n-000001");
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].value.encode(), r.value.encode());
            prop_assert_eq!(&back[0], &r);
        }

        #[test]
        fn encoded_conforming_reading_validates(v in 0.0f64..150.0, seq in 0u64..1000, ms in 0i64..4_000_000_000_000) {
            let mut reg = ModelRegistry::new();
            reg.register_class(
                ObjectClass::new("temperature_sensor")
                    .property(PropertyDef::new("temp", Datatype::Number).unit("°F").required().bounds(Some(0.0), Some(150.0)))
                    .property(PropertyDef::new("unit", Datatype::String).required()),
            ).unwrap();
            let r = Reading {
                channel: ChannelKey::new("n-1", "temp").unwrap(),
                value: TypedScalar::Number(v),
                unit: "°F".into(),
                ts: Timestamp(ms),
                seq,
                tags: TagSet::new().with("zone", "Z3"),
            };
            let (_, back) = decode_report(&encode_reading("n-1", &r)).unwrap();
            let report = reg.validate_payload("temperature_sensor", &payload_fields(&back[0])).unwrap();
            prop_assert!(report.is_ok(), "{:?}", report);
        }
    }
}
