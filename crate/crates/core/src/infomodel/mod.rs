//! Information model: a vocabulary of thing classes arranged in a
//! single-parent taxonomy, instances with tags and typed links, and
//! validation of decoded payloads against class definitions.
//!
//! Classes are registered parent-first. The effective property set of a
//! class is its ancestor chain's properties flattened root-to-leaf, a child
//! may re-declare a parent property only with the same datatype.

pub mod codec;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{is_token, TagSet, TypedScalar};

pub use codec::{decode_report, encode_report, payload_fields, CodecError};

/// Payload keys that are never class properties.
pub const RESERVED_KEYS: [&str; 3] = ["id", "DateTime", "seq"];

/// Relations available before any custom registration.
pub const DEFAULT_RELATIONS: [&str; 6] = [
    "part_of",
    "regulated_by",
    "composed_of",
    "contains",
    "located_in",
    "feeds",
];

#[derive(Debug, Error)]
pub enum InfoModelError {
    #[error("class `{0}` already registered")]
    DuplicateClass(String),
    #[error("parent class `{0}` is not registered")]
    UnknownParent(String),
    #[error("class `{0}` would close a taxonomy cycle")]
    TaxonomyCycle(String),
    #[error("property `{property}` redefined with datatype {child:?} (parent has {parent:?})")]
    PropertyConflict {
        property: String,
        parent: Datatype,
        child: Datatype,
    },
    #[error("invalid class definition: {0}")]
    InvalidClass(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("instance `{0}` already registered")]
    DuplicateInstance(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("relation `{0}` is not in the vocabulary")]
    UnknownRelation(String),
    #[error("model file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Number,
    Integer,
    String,
    Boolean,
    Timestamp,
    Enum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    pub datatype: Datatype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default)]
    pub writable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default)]
    pub required: bool,
    /// Allowed values for `enum` properties.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
}

impl PropertyDef {
    pub fn new(name: &str, datatype: Datatype) -> Self {
        PropertyDef {
            name: name.to_string(),
            datatype,
            unit: None,
            writable: false,
            min: None,
            max: None,
            required: false,
            values: Vec::new(),
        }
    }

    pub fn unit(mut self, unit: &str) -> Self {
        self.unit = Some(unit.to_string());
        self
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn writable(mut self) -> Self {
        self.writable = true;
        self
    }

    pub fn bounds(mut self, min: Option<f64>, max: Option<f64>) -> Self {
        self.min = min;
        self.max = max;
        self
    }

    pub fn values(mut self, values: &[&str]) -> Self {
        self.values = values.iter().map(|v| v.to_string()).collect();
        self
    }

    fn check(&self) -> Result<(), String> {
        if !is_token(&self.name) {
            return Err(format!("property name `{}` is not a token", self.name));
        }
        let numeric = matches!(self.datatype, Datatype::Number | Datatype::Integer);
        if !numeric && (self.min.is_some() || self.max.is_some()) {
            return Err(format!("bounds on non-numeric property `{}`", self.name));
        }
        if let (Some(lo), Some(hi)) = (self.min, self.max) {
            if lo > hi {
                return Err(format!("min > max on `{}`", self.name));
            }
        }
        if self.datatype == Datatype::Enum && self.values.is_empty() {
            return Err(format!("enum `{}` has no allowed values", self.name));
        }
        Ok(())
    }

    /// Checks one value against this definition.
    pub fn check_value(&self, value: &TypedScalar) -> Option<ViolationKind> {
        let type_ok = match (self.datatype, value) {
            (Datatype::Number, TypedScalar::Number(_)) => true,
            (Datatype::Integer, TypedScalar::Number(v)) => v.fract() == 0.0,
            (Datatype::String, TypedScalar::Str(_)) => true,
            (Datatype::Enum, TypedScalar::Str(_)) => true,
            (Datatype::Boolean, TypedScalar::Bool(_)) => true,
            (Datatype::Timestamp, TypedScalar::Time(_)) => true,
            _ => false,
        };
        if !type_ok {
            return Some(ViolationKind::TypeMismatch);
        }
        if let TypedScalar::Number(v) = value {
            if self.min.is_some_and(|lo| *v < lo) || self.max.is_some_and(|hi| *v > hi) {
                return Some(ViolationKind::OutOfRange);
            }
        }
        if let (Datatype::Enum, TypedScalar::Str(s)) = (self.datatype, value) {
            if !self.values.iter().any(|a| a == s) {
                return Some(ViolationKind::NotInEnum);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Read,
    Write,
    Invoke,
    Event,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDef {
    pub name: String,
    pub kind: InteractionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_property: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cardinality {
    #[default]
    One,
    Many,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDef {
    pub relation: String,
    pub target: String,
    #[serde(default)]
    pub cardinality: Cardinality,
}

impl LinkDef {
    pub fn new(relation: &str, target: &str) -> Self {
        LinkDef {
            relation: relation.to_string(),
            target: target.to_string(),
            cardinality: Cardinality::One,
        }
    }
}

/// Definition of a thing type, as read from one model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub properties: Vec<PropertyDef>,
    #[serde(default)]
    pub interactions: Vec<InteractionDef>,
    #[serde(default)]
    pub links: Vec<LinkDef>,
}

impl ObjectClass {
    pub fn new(name: &str) -> Self {
        ObjectClass {
            name: name.to_string(),
            parent: None,
            properties: Vec::new(),
            interactions: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn parent(mut self, parent: &str) -> Self {
        self.parent = Some(parent.to_string());
        self
    }

    pub fn property(mut self, p: PropertyDef) -> Self {
        self.properties.push(p);
        self
    }

    pub fn interaction(mut self, name: &str, kind: InteractionKind, target: Option<&str>) -> Self {
        self.interactions.push(InteractionDef {
            name: name.to_string(),
            kind,
            target_property: target.map(str::to_string),
        });
        self
    }

    pub fn link(mut self, link: LinkDef) -> Self {
        self.links.push(link);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThingInstance {
    pub instance_id: String,
    pub class_name: String,
    #[serde(default)]
    pub tags: TagSet,
    #[serde(default)]
    pub links: Vec<LinkDef>,
}

impl ThingInstance {
    pub fn new(id: &str, class_name: &str) -> Self {
        ThingInstance {
            instance_id: id.to_string(),
            class_name: class_name.to_string(),
            tags: TagSet::new(),
            links: Vec::new(),
        }
    }

    pub fn tag(mut self, key: &str, value: &str) -> Self {
        self.tags = self.tags.with(key, value);
        self
    }

    pub fn link(mut self, relation: &str, target: &str) -> Self {
        self.links.push(LinkDef::new(relation, target));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ViolationKind {
    MissingRequired,
    TypeMismatch,
    OutOfRange,
    NotInEnum,
    UnknownKey,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub key: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind, key: &str) -> bool {
        self.violations.iter().any(|v| v.kind == kind && v.key == key)
    }
}

/// Decoded payload as handed to validation.
pub type PayloadMap = BTreeMap<String, TypedScalar>;

#[derive(Debug, Clone)]
struct RegisteredClass {
    def: ObjectClass,
    /// Flattened root-to-leaf, child overrides in place.
    effective: Vec<PropertyDef>,
}

#[derive(Debug, Clone)]
pub struct ModelRegistry {
    classes: BTreeMap<String, RegisteredClass>,
    instances: BTreeMap<String, ThingInstance>,
    relations: BTreeSet<String>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        ModelRegistry::new()
    }
}

impl ModelRegistry {
    pub fn new() -> Self {
        ModelRegistry {
            classes: BTreeMap::new(),
            instances: BTreeMap::new(),
            relations: DEFAULT_RELATIONS.iter().map(|r| r.to_string()).collect(),
        }
    }

    pub fn register_relation(&mut self, relation: &str) -> Result<(), InfoModelError> {
        if !is_token(relation) {
            return Err(InfoModelError::InvalidClass(format!(
                "relation `{relation}` is not a token"
            )));
        }
        self.relations.insert(relation.to_string());
        Ok(())
    }

    pub fn has_relation(&self, relation: &str) -> bool {
        self.relations.contains(relation)
    }

    pub fn register_class(&mut self, class: ObjectClass) -> Result<String, InfoModelError> {
        if !is_token(&class.name) {
            return Err(InfoModelError::InvalidClass(format!(
                "class name `{}` is not a token",
                class.name
            )));
        }
        if class.parent.as_deref() == Some(class.name.as_str()) {
            return Err(InfoModelError::TaxonomyCycle(class.name));
        }
        if self.classes.contains_key(&class.name) {
            return Err(InfoModelError::DuplicateClass(class.name));
        }
        let mut effective = match &class.parent {
            Some(p) => self
                .classes
                .get(p)
                .ok_or_else(|| InfoModelError::UnknownParent(p.clone()))?
                .effective
                .clone(),
            None => Vec::new(),
        };

        let mut own = BTreeSet::new();
        for prop in &class.properties {
            prop.check().map_err(InfoModelError::InvalidClass)?;
            if !own.insert(prop.name.as_str()) {
                return Err(InfoModelError::InvalidClass(format!(
                    "property `{}` declared twice",
                    prop.name
                )));
            }
            match effective.iter_mut().find(|p| p.name == prop.name) {
                Some(inherited) if inherited.datatype != prop.datatype => {
                    return Err(InfoModelError::PropertyConflict {
                        property: prop.name.clone(),
                        parent: inherited.datatype,
                        child: prop.datatype,
                    });
                }
                Some(inherited) => *inherited = prop.clone(),
                None => effective.push(prop.clone()),
            }
        }

        for inter in &class.interactions {
            if !is_token(&inter.name) {
                return Err(InfoModelError::InvalidClass(format!(
                    "interaction `{}` is not a token",
                    inter.name
                )));
            }
            let target = inter
                .target_property
                .as_deref()
                .map(|t| effective.iter().find(|p| p.name == t).ok_or(t));
            match (inter.kind, target) {
                (_, Some(Err(t))) => {
                    return Err(InfoModelError::InvalidClass(format!(
                        "interaction `{}` targets unknown property `{t}`",
                        inter.name
                    )))
                }
                (InteractionKind::Write, None) => {
                    return Err(InfoModelError::InvalidClass(format!(
                        "write interaction `{}` has no target",
                        inter.name
                    )))
                }
                (InteractionKind::Write, Some(Ok(p))) if !p.writable => {
                    return Err(InfoModelError::InvalidClass(format!(
                        "write interaction `{}` targets read-only `{}`",
                        inter.name, p.name
                    )))
                }
                _ => {}
            }
        }

        for link in &class.links {
            if !self.relations.contains(&link.relation) {
                return Err(InfoModelError::UnknownRelation(link.relation.clone()));
            }
        }

        let name = class.name.clone();
        self.classes
            .insert(name.clone(), RegisteredClass { def: class, effective });
        Ok(name)
    }

    pub fn class(&self, name: &str) -> Option<&ObjectClass> {
        self.classes.get(name).map(|c| &c.def)
    }

    pub fn has_class(&self, name: &str) -> bool {
        self.classes.contains_key(name)
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    /// Properties of the class after parent flattening.
    pub fn effective_properties(&self, name: &str) -> Result<&[PropertyDef], InfoModelError> {
        self.classes
            .get(name)
            .map(|c| c.effective.as_slice())
            .ok_or_else(|| InfoModelError::UnknownClass(name.to_string()))
    }

    pub fn property(&self, class: &str, property: &str) -> Result<Option<&PropertyDef>, InfoModelError> {
        Ok(self
            .effective_properties(class)?
            .iter()
            .find(|p| p.name == property))
    }

    /// Ancestor chain starting at the class itself.
    pub fn ancestors(&self, name: &str) -> Vec<&str> {
        let mut chain = Vec::new();
        let mut cur = self.classes.get(name);
        while let Some(c) = cur {
            chain.push(c.def.name.as_str());
            cur = c.def.parent.as_deref().and_then(|p| self.classes.get(p));
        }
        chain
    }

    pub fn is_a(&self, class: &str, ancestor: &str) -> bool {
        self.ancestors(class).contains(&ancestor)
    }

    pub fn validate_payload(&self, class_name: &str, payload: &PayloadMap) -> Result<ValidationReport, InfoModelError> {
        self.validate(class_name, payload, true)
    }

    /// Validation for partial documents (twin reports and patches), where
    /// absent required properties are not violations.
    pub fn validate_partial(&self, class_name: &str, payload: &PayloadMap) -> Result<ValidationReport, InfoModelError> {
        self.validate(class_name, payload, false)
    }

    fn validate(&self, class_name: &str, payload: &PayloadMap, require: bool) -> Result<ValidationReport, InfoModelError> {
        let props = self.effective_properties(class_name)?;
        let mut violations = Vec::new();
        for prop in props {
            match payload.get(&prop.name) {
                None if require && prop.required => violations.push(Violation {
                    kind: ViolationKind::MissingRequired,
                    key: prop.name.clone(),
                }),
                None => {}
                Some(v) => {
                    if let Some(kind) = prop.check_value(v) {
                        violations.push(Violation {
                            kind,
                            key: prop.name.clone(),
                        });
                    }
                }
            }
        }
        for (key, value) in payload {
            if props.iter().any(|p| &p.name == key) {
                continue;
            }
            let reserved_ok = match key.as_str() {
                "id" => matches!(value, TypedScalar::Str(_)),
                "DateTime" => matches!(value, TypedScalar::Time(_)),
                "seq" => matches!(value, TypedScalar::Number(v) if v.fract() == 0.0 && *v >= 0.0),
                // readings always carry a unit key; classes may leave it undeclared
                "unit" => matches!(value, TypedScalar::Str(_)),
                _ => {
                    violations.push(Violation {
                        kind: ViolationKind::UnknownKey,
                        key: key.clone(),
                    });
                    continue;
                }
            };
            if !reserved_ok {
                violations.push(Violation {
                    kind: ViolationKind::TypeMismatch,
                    key: key.clone(),
                });
            }
        }
        violations.sort();
        Ok(ValidationReport { violations })
    }

    pub fn register_instance(&mut self, inst: ThingInstance) -> Result<(), InfoModelError> {
        if !self.classes.contains_key(&inst.class_name) {
            return Err(InfoModelError::UnknownClass(inst.class_name));
        }
        if inst.instance_id.is_empty() {
            return Err(InfoModelError::InvalidClass("empty instance id".into()));
        }
        if self.instances.contains_key(&inst.instance_id) {
            return Err(InfoModelError::DuplicateInstance(inst.instance_id));
        }
        for link in &inst.links {
            if !self.relations.contains(&link.relation) {
                return Err(InfoModelError::UnknownRelation(link.relation.clone()));
            }
        }
        self.instances.insert(inst.instance_id.clone(), inst);
        Ok(())
    }

    pub fn instance(&self, id: &str) -> Option<&ThingInstance> {
        self.instances.get(id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &ThingInstance> {
        self.instances.values()
    }

    /// Targets of `relation` edges. One hop: the instance's own links.
    /// Transitive: every instance reachable from `instance_id` over any link
    /// contributes its `relation` targets, so a sensor that is `part_of` a
    /// zone inherits the zone's `regulated_by` equipment.
    pub fn resolve_links(&self, instance_id: &str, relation: &str, transitive: bool) -> Result<Vec<String>, InfoModelError> {
        let start = self
            .instances
            .get(instance_id)
            .ok_or_else(|| InfoModelError::UnknownInstance(instance_id.to_string()))?;
        if !self.relations.contains(relation) {
            return Err(InfoModelError::UnknownRelation(relation.to_string()));
        }
        let mut out = BTreeSet::new();
        if !transitive {
            out.extend(
                start
                    .links
                    .iter()
                    .filter(|l| l.relation == relation)
                    .map(|l| l.target.clone()),
            );
            return Ok(out.into_iter().collect());
        }
        let mut seen = BTreeSet::from([instance_id.to_string()]);
        let mut queue = VecDeque::from([instance_id.to_string()]);
        while let Some(id) = queue.pop_front() {
            let Some(inst) = self.instances.get(&id) else {
                continue;
            };
            for link in &inst.links {
                if link.relation == relation && link.target != instance_id {
                    out.insert(link.target.clone());
                }
                if seen.insert(link.target.clone()) {
                    queue.push_back(link.target.clone());
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Loads every `*.json` class file in `dir`, in lexicographic filename
    /// order.
    pub fn load_dir(&mut self, dir: &Path) -> Result<Vec<String>, InfoModelError> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        let mut loaded = Vec::new();
        for path in files {
            let text = fs::read_to_string(&path)?;
            let class: ObjectClass = serde_json::from_str(&text).map_err(|source| InfoModelError::Json {
                path: path.display().to_string(),
                source,
            })?;
            loaded.push(self.register_class(class)?);
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Timestamp;
    use proptest::prelude::*;

    fn temperature_sensor() -> ObjectClass {
        ObjectClass::new("temperature_sensor")
            .property(PropertyDef::new("temp", Datatype::Number).unit("°F").required())
            .property(PropertyDef::new("unit", Datatype::String).required())
    }

    fn registry() -> ModelRegistry {
        let mut reg = ModelRegistry::new();
        reg.register_class(temperature_sensor()).unwrap();
        reg
    }

    #[test]
    fn register_temperature_sensor() {
        let reg = registry();
        assert_eq!(reg.effective_properties("temperature_sensor").unwrap().len(), 2);
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let mut reg = ModelRegistry::new();
        let err = reg.register_class(ObjectClass::new("loop").parent("loop")).unwrap_err();
        assert!(matches!(err, InfoModelError::TaxonomyCycle(_)));
    }

    #[test]
    fn duplicate_and_unknown_parent() {
        let mut reg = registry();
        assert!(matches!(
            reg.register_class(temperature_sensor()),
            Err(InfoModelError::DuplicateClass(_))
        ));
        assert!(matches!(
            reg.register_class(ObjectClass::new("orphan").parent("nope")),
            Err(InfoModelError::UnknownParent(_))
        ));
    }

    #[test]
    fn thermostat_composition() {
        let mut reg = registry();
        reg.register_class(
            ObjectClass::new("smart_thermostat")
                .property(PropertyDef::new("setpoint", Datatype::Number).writable())
                .link(LinkDef::new("composed_of", "temperature_sensor"))
                .interaction("adjust", InteractionKind::Write, Some("setpoint")),
        )
        .unwrap();
        let class = reg.class("smart_thermostat").unwrap();
        assert_eq!(class.links.iter().filter(|l| l.relation == "composed_of").count(), 1);
    }

    #[test]
    fn write_interaction_on_read_only_rejected() {
        let mut reg = registry();
        let err = reg
            .register_class(
                ObjectClass::new("bad").parent("temperature_sensor").interaction(
                    "poke",
                    InteractionKind::Write,
                    Some("temp"),
                ),
            )
            .unwrap_err();
        assert!(matches!(err, InfoModelError::InvalidClass(_)));
    }

    #[test]
    fn property_conflict_on_datatype_change() {
        let mut reg = registry();
        let err = reg
            .register_class(
                ObjectClass::new("odd_sensor")
                    .parent("temperature_sensor")
                    .property(PropertyDef::new("temp", Datatype::String)),
            )
            .unwrap_err();
        assert!(matches!(err, InfoModelError::PropertyConflict { .. }));
        // same datatype is an override, not a conflict
        reg.register_class(
            ObjectClass::new("bounded_sensor")
                .parent("temperature_sensor")
                .property(PropertyDef::new("temp", Datatype::Number).bounds(None, Some(150.0)).required()),
        )
        .unwrap();
        assert_eq!(reg.effective_properties("bounded_sensor").unwrap().len(), 2);
    }

    #[test]
    fn bad_property_definitions() {
        let mut reg = ModelRegistry::new();
        for p in [
            PropertyDef::new("x", Datatype::Number).bounds(Some(2.0), Some(1.0)),
            PropertyDef::new("x", Datatype::String).bounds(Some(0.0), None),
            PropertyDef::new("x", Datatype::Enum),
            PropertyDef::new("X", Datatype::Number),
        ] {
            assert!(matches!(
                reg.register_class(ObjectClass::new("c").property(p)),
                Err(InfoModelError::InvalidClass(_))
            ));
        }
    }

    #[test]
    fn example_payload_validates() {
        let reg = registry();
        let payload: PayloadMap = [
            ("id", TypedScalar::Str("150a3c6e-bef0e".into())),
            ("temp", TypedScalar::Number(77.6)),
            ("unit", TypedScalar::Str("°F".into())),
            ("DateTime", TypedScalar::Time(Timestamp::parse("2020-07-15T14:50:07Z").unwrap())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        assert!(reg.validate_payload("temperature_sensor", &payload).unwrap().is_ok());
    }

    #[test]
    fn type_mismatch_and_missing() {
        let reg = registry();
        let payload: PayloadMap = [("temp".to_string(), TypedScalar::Str("hot".into()))].into();
        let report = reg.validate_payload("temperature_sensor", &payload).unwrap();
        assert!(report.has(ViolationKind::TypeMismatch, "temp"));
        assert!(report.has(ViolationKind::MissingRequired, "unit"));
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn out_of_range_and_unknown_key() {
        let mut reg = registry();
        reg.register_class(
            ObjectClass::new("bounded")
                .property(PropertyDef::new("temp", Datatype::Number).bounds(None, Some(150.0))),
        )
        .unwrap();
        let payload: PayloadMap = [
            ("temp".to_string(), TypedScalar::Number(250.0)),
            ("colour".to_string(), TypedScalar::Str("red".into())),
        ]
        .into();
        let report = reg.validate_payload("bounded", &payload).unwrap();
        assert!(report.has(ViolationKind::OutOfRange, "temp"));
        assert!(report.has(ViolationKind::UnknownKey, "colour"));
        assert!(matches!(
            reg.validate_payload("nope", &payload),
            Err(InfoModelError::UnknownClass(_))
        ));
    }

    #[test]
    fn enum_and_integer_checks() {
        let p = PropertyDef::new("mode", Datatype::Enum).values(&["on", "off"]);
        assert_eq!(p.check_value(&TypedScalar::Str("on".into())), None);
        assert_eq!(p.check_value(&TypedScalar::Str("auto".into())), Some(ViolationKind::NotInEnum));
        let i = PropertyDef::new("count", Datatype::Integer);
        assert_eq!(i.check_value(&TypedScalar::Number(3.0)), None);
        assert_eq!(i.check_value(&TypedScalar::Number(3.5)), Some(ViolationKind::TypeMismatch));
    }

    #[test]
    fn hvac_zone_links() {
        let mut reg = registry();
        reg.register_class(ObjectClass::new("hvac_zone")).unwrap();
        reg.register_class(ObjectClass::new("air_handler")).unwrap();
        reg.register_instance(ThingInstance::new("ts-101", "temperature_sensor").link("part_of", "zone-Z3"))
            .unwrap();
        reg.register_instance(ThingInstance::new("zone-Z3", "hvac_zone").link("regulated_by", "ahu-2"))
            .unwrap();
        reg.register_instance(ThingInstance::new("ahu-2", "air_handler")).unwrap();
        assert_eq!(reg.resolve_links("ts-101", "regulated_by", true).unwrap(), vec!["ahu-2"]);
        assert!(reg.resolve_links("ts-101", "regulated_by", false).unwrap().is_empty());
        assert_eq!(reg.resolve_links("ts-101", "part_of", false).unwrap(), vec!["zone-Z3"]);
        assert!(reg.resolve_links("ahu-2", "part_of", true).unwrap().is_empty());
        assert!(matches!(
            reg.resolve_links("ghost", "part_of", true),
            Err(InfoModelError::UnknownInstance(_))
        ));
        assert!(matches!(
            reg.resolve_links("ts-101", "likes", true),
            Err(InfoModelError::UnknownRelation(_))
        ));
    }

    #[test]
    fn diamond_closure_lists_each_target_once() {
        let mut reg = ModelRegistry::new();
        reg.register_class(ObjectClass::new("node")).unwrap();
        for (id, targets) in [("a", vec!["b", "c"]), ("b", vec!["d"]), ("c", vec!["d"]), ("d", vec![])] {
            let mut inst = ThingInstance::new(id, "node");
            for t in targets {
                inst = inst.link("feeds", t);
            }
            reg.register_instance(inst).unwrap();
        }
        assert_eq!(reg.resolve_links("a", "feeds", true).unwrap(), vec!["b", "c", "d"]);
    }

    #[test]
    fn load_dir_in_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("10-sensor.json"),
            r#"{"name":"sensor","properties":[{"name":"unit","datatype":"string"}],"interactions":[],"links":[]}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("20-temp.json"),
            r#"{"name":"temperature_sensor","parent":"sensor","properties":[{"name":"temp","datatype":"number","unit":"°F","required":true}],"interactions":[],"links":[]}"#,
        )
        .unwrap();
        let mut reg = ModelRegistry::new();
        assert_eq!(reg.load_dir(dir.path()).unwrap(), vec!["sensor", "temperature_sensor"]);
        assert!(reg.is_a("temperature_sensor", "sensor"));
    }

    /// Independent reachability oracle: repeated relaxation until fixpoint.
    fn closure_oracle(edges: &[(usize, usize, bool)], start: usize) -> Vec<String> {
        let n = 20;
        let mut reach = vec![false; n];
        reach[start] = true;
        loop {
            let mut changed = false;
            for &(a, b, _) in edges {
                if reach[a] && !reach[b] {
                    reach[b] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut out: Vec<String> = edges
            .iter()
            .filter(|(a, b, rel)| *rel && reach[*a] && *b != start)
            .map(|(_, b, _)| format!("i{b:02}"))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    proptest! {
        #[test]
        fn link_closure_matches_oracle(
            edges in proptest::collection::vec((0usize..20, 0usize..20, any::<bool>()), 0..40),
            start in 0usize..20,
        ) {
            let mut reg = ModelRegistry::new();
            reg.register_class(ObjectClass::new("thing")).unwrap();
            for i in 0..20 {
                let mut inst = ThingInstance::new(&format!("i{i:02}"), "thing");
                for (a, b, rel) in &edges {
                    if *a == i {
                        inst = inst.link(if *rel { "feeds" } else { "part_of" }, &format!("i{b:02}"));
                    }
                }
                reg.register_instance(inst).unwrap();
            }
            let got = reg.resolve_links(&format!("i{start:02}"), "feeds", true).unwrap();
            prop_assert_eq!(got, closure_oracle(&edges, start));
        }

        #[test]
        fn flattening_matches_chain_walk(depth in 1usize..6, per_level in 1usize..4) {
            let mut reg = ModelRegistry::new();
            let mut expected = BTreeSet::new();
            for level in 0..depth {
                let mut class = ObjectClass::new(&format!("c{level}"));
                if level > 0 {
                    class = class.parent(&format!("c{}", level - 1));
                }
                for k in 0..per_level {
                    let name = format!("p{level}_{k}");
                    expected.insert(name.clone());
                    class = class.property(PropertyDef::new(&name, Datatype::Number));
                }
                // shared property re-declared with the same datatype at every level
                class = class.property(PropertyDef::new("shared", Datatype::String));
                expected.insert("shared".to_string());
                reg.register_class(class).unwrap();
            }
            let leaf = format!("c{}", depth - 1);
            // brute-force walk up the chain through class definitions
            let mut walked = BTreeSet::new();
            let mut cur = Some(leaf.clone());
            while let Some(name) = cur {
                let c = reg.class(&name).unwrap();
                walked.extend(c.properties.iter().map(|p| p.name.clone()));
                cur = c.parent.clone();
            }
            let effective: BTreeSet<String> = reg
                .effective_properties(&leaf)
                .unwrap()
                .iter()
                .map(|p| p.name.clone())
                .collect();
            prop_assert_eq!(&effective, &walked);
            prop_assert_eq!(effective, expected);
        }
    }
}
