//! Value types shared by every service: timestamps, typed scalars, channel
//! keys and tag sets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValueError {
    #[error("bad timestamp `{0}`")]
    BadTimestamp(String),
    #[error("unknown typed-scalar prefix in `{0}`")]
    UnknownPrefix(String),
    #[error("bad typed-scalar text `{0}`")]
    BadScalar(String),
    #[error("`{0}` is not a vocabulary token")]
    BadToken(String),
    #[error("bad channel key `{0}`")]
    BadChannel(String),
}

/// Returns true for lowercase snake-case vocabulary tokens (`[a-z][a-z0-9_]*`).
pub fn is_token(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Node identifiers additionally admit `-` after the first character, so
/// commissioned ids like `n-000001` and opaque device ids like
/// `150a3c6e-bef0e` are representable.
pub fn is_node_id(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

/// Milliseconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    /// Wall-clock time.
    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    pub fn plus_ms(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    /// Parses RFC3339 in UTC. The legacy `...Z UTC` spelling is accepted.
    pub fn parse(text: &str) -> Result<Self, ValueError> {
        let trimmed = text.strip_suffix(" UTC").unwrap_or(text);
        if !trimmed.ends_with('Z') {
            return Err(ValueError::BadTimestamp(text.to_string()));
        }
        let parsed = DateTime::parse_from_rfc3339(trimmed)
            .map_err(|_| ValueError::BadTimestamp(text.to_string()))?;
        let ms = parsed.timestamp_millis();
        // sub-millisecond precision would not survive a round trip
        if parsed.timestamp_subsec_nanos() % 1_000_000 != 0 {
            return Err(ValueError::BadTimestamp(text.to_string()));
        }
        Ok(Timestamp(ms))
    }

    /// Canonical form: seconds precision unless milliseconds are non-zero.
    pub fn to_rfc3339(self) -> String {
        let dt = Utc
            .timestamp_millis_opt(self.0)
            .single()
            .unwrap_or_else(|| Utc.timestamp_millis_opt(0).unwrap());
        if self.0.rem_euclid(1000) == 0 {
            dt.to_rfc3339_opts(SecondsFormat::Secs, true)
        } else {
            dt.to_rfc3339_opts(SecondsFormat::Millis, true)
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl FromStr for Timestamp {
    type Err = ValueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A prefixed scalar as carried in payloads: `n:`, `s:`, `b:` or `t:`.
#[derive(Debug, Clone, PartialEq)]
pub enum TypedScalar {
    Number(f64),
    Str(String),
    Bool(bool),
    Time(Timestamp),
}

impl TypedScalar {
    pub fn kind_char(&self) -> char {
        match self {
            TypedScalar::Number(_) => 'n',
            TypedScalar::Str(_) => 's',
            TypedScalar::Bool(_) => 'b',
            TypedScalar::Time(_) => 't',
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            TypedScalar::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            TypedScalar::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Canonical text without the prefix.
    pub fn text(&self) -> String {
        match self {
            TypedScalar::Number(v) => format_number(*v),
            TypedScalar::Str(s) => s.clone(),
            TypedScalar::Bool(b) => b.to_string(),
            TypedScalar::Time(t) => t.to_rfc3339(),
        }
    }

    pub fn encode(&self) -> String {
        format!("{}:{}", self.kind_char(), self.text())
    }

    /// Decodes a prefixed scalar. Text without a `<letter>:` prefix is an
    /// error; see [`TypedScalar::decode_lenient`] for raw strings.
    pub fn decode(text: &str) -> Result<Self, ValueError> {
        let bytes = text.as_bytes();
        if bytes.len() < 2 || bytes[1] != b':' || !bytes[0].is_ascii_alphabetic() {
            return Err(ValueError::UnknownPrefix(text.to_string()));
        }
        let body = &text[2..];
        match bytes[0] {
            b'n' => parse_number(body).map(TypedScalar::Number),
            b's' => Ok(TypedScalar::Str(body.to_string())),
            b'b' => match body {
                "true" => Ok(TypedScalar::Bool(true)),
                "false" => Ok(TypedScalar::Bool(false)),
                _ => Err(ValueError::BadScalar(text.to_string())),
            },
            b't' => Timestamp::parse(body).map(TypedScalar::Time),
            _ => Err(ValueError::UnknownPrefix(text.to_string())),
        }
    }

    /// Like [`TypedScalar::decode`] but unprefixed text becomes a string.
    pub fn decode_lenient(text: &str) -> Result<Self, ValueError> {
        if looks_prefixed(text) {
            TypedScalar::decode(text)
        } else {
            Ok(TypedScalar::Str(text.to_string()))
        }
    }

    /// Encodes a free-form string so that `decode_lenient` returns it intact.
    pub fn encode_raw_string(s: &str) -> String {
        if looks_prefixed(s) {
            format!("s:{s}")
        } else {
            s.to_string()
        }
    }
}

fn looks_prefixed(text: &str) -> bool {
    let b = text.as_bytes();
    b.len() >= 2 && b[1] == b':' && b[0].is_ascii_alphabetic()
}

/// Shortest text that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

fn parse_number(body: &str) -> Result<f64, ValueError> {
    let valid = !body.is_empty()
        && body
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'));
    if !valid {
        return Err(ValueError::BadScalar(format!("n:{body}")));
    }
    match body.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ValueError::BadScalar(format!("n:{body}"))),
    }
}

impl fmt::Display for TypedScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl Serialize for TypedScalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for TypedScalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        TypedScalar::decode(&s).map_err(serde::de::Error::custom)
    }
}

/// `node_id/sensor_name` identity of one data channel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelKey {
    pub node_id: String,
    pub sensor: String,
}

impl ChannelKey {
    pub fn new(node_id: impl Into<String>, sensor: impl Into<String>) -> Result<Self, ValueError> {
        let key = ChannelKey {
            node_id: node_id.into(),
            sensor: sensor.into(),
        };
        if !is_node_id(&key.node_id) || !is_token(&key.sensor) {
            return Err(ValueError::BadChannel(key.to_string()));
        }
        Ok(key)
    }
}

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node_id, self.sensor)
    }
}

impl FromStr for ChannelKey {
    type Err = ValueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, sensor) = s
            .split_once('/')
            .ok_or_else(|| ValueError::BadChannel(s.to_string()))?;
        ChannelKey::new(node, sensor)
    }
}

impl Serialize for ChannelKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Loosely structured metadata (`zone → Z3`, `site → bldg7`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagSet(pub BTreeMap<String, String>);

impl TagSet {
    pub fn new() -> Self {
        TagSet::default()
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<(), ValueError> {
        if !is_token(key) {
            return Err(ValueError::BadToken(key.to_string()));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.insert(key, value).expect("tag key must be a vocabulary token");
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.0.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

/// One time-stamped sample on a data channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub channel: ChannelKey,
    pub value: TypedScalar,
    pub unit: String,
    pub ts: Timestamp,
    /// Per-channel counter starting at 1; 0 marks an unsequenced reading.
    pub seq: u64,
    pub tags: TagSet,
}

/// Comparison operator used by thresholds and filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
}

impl CmpOp {
    pub fn eval(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Eq => lhs == rhs,
        }
    }
}
