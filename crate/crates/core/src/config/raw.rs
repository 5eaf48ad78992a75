//! Raw configuration trees: the structure-preserving parse result, before
//! any semantic checking.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{Deserializer, Error as DeError, MapAccess, SeqAccess, Visitor};
use serde::Deserialize;

use super::ConfigError;

/// A parsed scalar or container, exactly as written in the document.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<RawValue>),
    Map(BTreeMap<String, RawValue>),
}

impl RawValue {
    pub fn kind(&self) -> &'static str {
        match self {
            RawValue::Bool(_) => "boolean",
            RawValue::Int(_) => "integer",
            RawValue::Float(_) => "float",
            RawValue::Str(_) => "string",
            RawValue::List(_) => "list",
            RawValue::Map(_) => "mapping",
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, RawValue::List(_) | RawValue::Map(_))
    }
}

/// A scalar configuration value: the value type of every addressable slot.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ScalarValue {
    pub fn kind(&self) -> &'static str {
        match self {
            ScalarValue::Bool(_) => "boolean",
            ScalarValue::Int(_) => "integer",
            ScalarValue::Float(_) => "float",
            ScalarValue::Str(_) => "string",
        }
    }

    pub fn into_raw(self) -> RawValue {
        match self {
            ScalarValue::Bool(b) => RawValue::Bool(b),
            ScalarValue::Int(i) => RawValue::Int(i),
            ScalarValue::Float(f) => RawValue::Float(f),
            ScalarValue::Str(s) => RawValue::Str(s),
        }
    }

    pub fn from_raw(raw: &RawValue) -> Option<ScalarValue> {
        match raw {
            RawValue::Bool(b) => Some(ScalarValue::Bool(*b)),
            RawValue::Int(i) => Some(ScalarValue::Int(*i)),
            RawValue::Float(f) => Some(ScalarValue::Float(*f)),
            RawValue::Str(s) => Some(ScalarValue::Str(s.clone())),
            _ => None,
        }
    }
}

impl fmt::Display for ScalarValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarValue::Bool(b) => write!(f, "{b}"),
            ScalarValue::Int(i) => write!(f, "{i}"),
            ScalarValue::Float(v) => write!(f, "{v}"),
            ScalarValue::Str(s) => write!(f, "{s}"),
        }
    }
}

/// The parse result: a top-level mapping with every user key preserved.
/// Unknown keys are rejected later, by `compile_config`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig(pub BTreeMap<String, RawValue>);

impl RawConfig {
    pub fn empty() -> Self {
        Self(BTreeMap::new())
    }
}

struct RawValueVisitor;

impl<'de> Visitor<'de> for RawValueVisitor {
    type Value = RawValue;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a mapping, list, string, integer, float or boolean")
    }

    fn visit_bool<E: DeError>(self, v: bool) -> Result<RawValue, E> {
        Ok(RawValue::Bool(v))
    }

    fn visit_i64<E: DeError>(self, v: i64) -> Result<RawValue, E> {
        Ok(RawValue::Int(v))
    }

    fn visit_u64<E: DeError>(self, v: u64) -> Result<RawValue, E> {
        i64::try_from(v)
            .map(RawValue::Int)
            .map_err(|_| E::custom(format!("integer {v} is out of range")))
    }

    fn visit_f64<E: DeError>(self, v: f64) -> Result<RawValue, E> {
        Ok(RawValue::Float(v))
    }

    fn visit_str<E: DeError>(self, v: &str) -> Result<RawValue, E> {
        Ok(RawValue::Str(v.to_string()))
    }

    fn visit_unit<E: DeError>(self) -> Result<RawValue, E> {
        Err(E::custom("null values are not supported"))
    }

    fn visit_none<E: DeError>(self) -> Result<RawValue, E> {
        Err(E::custom("null values are not supported"))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<RawValue, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element::<RawValue>()? {
            items.push(item);
        }
        Ok(RawValue::List(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawValue, A::Error> {
        let mut entries = BTreeMap::new();
        while let Some((key, value)) = map.next_entry::<String, RawValue>()? {
            if entries.contains_key(&key) {
                return Err(A::Error::custom(format!("duplicate key \"{key}\"")));
            }
            entries.insert(key, value);
        }
        Ok(RawValue::Map(entries))
    }
}

impl<'de> Deserialize<'de> for RawValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(RawValueVisitor)
    }
}

fn into_config(value: RawValue) -> Result<RawConfig, ConfigError> {
    match value {
        RawValue::Map(map) => Ok(RawConfig(map)),
        other => Err(ConfigError::Syntax {
            line: None,
            column: None,
            message: format!("document root must be a mapping, got {}", other.kind()),
        }),
    }
}

/// Parse a YAML-subset document (mappings, lists, scalars; no anchors).
/// An empty document parses as an empty mapping.
pub fn parse_yaml(text: &str) -> Result<RawConfig, ConfigError> {
    if text.trim().is_empty() {
        return Ok(RawConfig::empty());
    }
    let value: RawValue = serde_yaml::from_str(text).map_err(|e| {
        let loc = e.location();
        ConfigError::Syntax {
            line: loc.as_ref().map(|l| l.line()),
            column: loc.as_ref().map(|l| l.column()),
            message: e.to_string(),
        }
    })?;
    into_config(value)
}

/// Parse a JSON document into the same raw tree as [`parse_yaml`].
pub fn parse_json(text: &str) -> Result<RawConfig, ConfigError> {
    if text.trim().is_empty() {
        return Ok(RawConfig::empty());
    }
    let value: RawValue = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: Some(e.line()),
        column: Some(e.column()),
        message: e.to_string(),
    })?;
    into_config(value)
}
