//! Scalar values and field paths shared by every layer of the model.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete simulation time.
pub type Tick = u64;

/// The seven top-level feature groups of the device feature metamodel.
pub const FEATURE_GROUPS: [&str; 7] = [
    "computational",
    "memory",
    "communication",
    "power",
    "sensing",
    "acting",
    "os",
];

/// Root segment every canonical field path starts with.
pub const ROOT_SEGMENT: &str = "capabilities";

/// A leaf value in a device description or state.
///
/// Floating point is deliberately absent: frequencies are integer hertz and
/// weights are fixed-point, so canonical bytes never depend on float
/// formatting.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Text(String),
    Set(BTreeSet<String>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Bool(_) => ValueKind::Bool,
            Value::Int(_) => ValueKind::Int,
            Value::Text(_) => ValueKind::Text,
            Value::Set(_) => ValueKind::Set,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(v) => Some(*v),
            _ => None,
        }
    }

    /// Parses the bare literal syntax used by templates and the CLI:
    /// integers, `true`/`false`, otherwise text.
    pub fn parse_literal(raw: &str) -> Value {
        if let Ok(v) = raw.parse::<i64>() {
            return Value::Int(v);
        }
        match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => Value::Text(raw.to_string()),
        }
    }

    /// Text form used inside rendered instructions (no quoting).
    pub fn render(&self) -> String {
        match self {
            Value::Bool(b) => b.to_string(),
            Value::Int(i) => i.to_string(),
            Value::Text(s) => s.clone(),
            Value::Set(s) => s.iter().cloned().collect::<Vec<_>>().join(","),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::Set(s) => {
                write!(f, "{{")?;
                for (i, item) in s.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{item:?}")?;
                }
                write!(f, "}}")
            }
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Bool,
    Int,
    Text,
    Set,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Bool => "bool",
            ValueKind::Int => "int",
            ValueKind::Text => "text",
            ValueKind::Set => "set",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("empty field path")]
    Empty,
    #[error("empty segment in field path {0:?}")]
    EmptySegment(String),
    #[error("invalid character {ch:?} in field path {path:?}")]
    InvalidChar { path: String, ch: char },
}

/// Canonical slash-separated path into a device description, e.g.
/// `capabilities/computational/cores`.
///
/// Paths are lowercase. A path that starts directly with one of the seven
/// feature groups is rooted under `capabilities/` on parse, so
/// `power/supply` and `capabilities/power/supply` name the same field.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FieldPath(String);

impl FieldPath {
    pub fn parse(raw: &str) -> Result<Self, PathError> {
        let trimmed = raw.trim().trim_matches('/');
        if trimmed.is_empty() {
            return Err(PathError::Empty);
        }
        for ch in trimmed.chars() {
            let ok = ch.is_ascii_lowercase() || ch.is_ascii_digit() || matches!(ch, '_' | '-' | '/');
            if !ok {
                return Err(PathError::InvalidChar {
                    path: raw.to_string(),
                    ch,
                });
            }
        }
        if trimmed.split('/').any(str::is_empty) {
            return Err(PathError::EmptySegment(raw.to_string()));
        }
        let first = trimmed.split('/').next().unwrap_or_default();
        if FEATURE_GROUPS.contains(&first) {
            Ok(FieldPath(format!("{ROOT_SEGMENT}/{trimmed}")))
        } else {
            Ok(FieldPath(trimmed.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// Segments below the `capabilities` root, or `None` when the path is not
    /// rooted there.
    pub fn feature_segments(&self) -> Option<Vec<&str>> {
        let mut segs = self.segments();
        if segs.next()? != ROOT_SEGMENT {
            return None;
        }
        Some(segs.collect())
    }

    /// Last segment, used as a short display name.
    pub fn leaf(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }
}

impl TryFrom<String> for FieldPath {
    type Error = PathError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        FieldPath::parse(&value)
    }
}

impl From<FieldPath> for String {
    fn from(p: FieldPath) -> Self {
        p.0
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for FieldPath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldPath::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_paths_are_rooted() {
        let p = FieldPath::parse("power/supply").unwrap();
        assert_eq!(p.as_str(), "capabilities/power/supply");
        assert_eq!(p, FieldPath::parse("capabilities/power/supply").unwrap());
        assert_eq!(p.feature_segments().unwrap(), vec!["power", "supply"]);
    }

    #[test]
    fn rejects_uppercase_and_empty_segments() {
        assert!(matches!(
            FieldPath::parse("Capabilities/Cores"),
            Err(PathError::InvalidChar { .. })
        ));
        assert_eq!(
            FieldPath::parse("a//b"),
            Err(PathError::EmptySegment("a//b".into()))
        );
        assert_eq!(FieldPath::parse("  "), Err(PathError::Empty));
    }

    #[test]
    fn untagged_value_json() {
        let v: Vec<Value> = serde_json::from_str(r#"[true, 4, "eco", ["mqtt","amqp"]]"#).unwrap();
        assert_eq!(v[0], Value::Bool(true));
        assert_eq!(v[1], Value::Int(4));
        assert_eq!(v[2], Value::Text("eco".into()));
        assert_eq!(v[3].kind(), ValueKind::Set);
        assert!(serde_json::from_str::<Value>("1.5").is_err());
    }

    #[test]
    fn literal_parsing() {
        assert_eq!(Value::parse_literal("10"), Value::Int(10));
        assert_eq!(Value::parse_literal("-3"), Value::Int(-3));
        assert_eq!(Value::parse_literal("false"), Value::Bool(false));
        assert_eq!(Value::parse_literal("eco"), Value::Text("eco".into()));
    }
}
