//! Transformation components: templates mapping one abstract post-condition
//! on one platform/OS range to concrete instructions.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commission::PostCondition;
use crate::model::{DeviceDescription, DeviceState, Version, VersionRange};
use crate::package::Instruction;
use crate::value::{FieldPath, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostKind {
    SetValue,
    ProvideService,
}

impl PostKind {
    pub fn of(pc: &PostCondition) -> PostKind {
        match pc {
            PostCondition::SetValue { .. } => PostKind::SetValue,
            PostCondition::ProvideService { .. } => PostKind::ProvideService,
        }
    }
}

impl fmt::Display for PostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PostKind::SetValue => "set-value",
            PostKind::ProvideService => "provide-service",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OsMatch {
    pub platform: String,
    pub versions: VersionRange,
}

/// One instruction with `{placeholder}` fields. `{{` and `}}` are literal braces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum InstructionTemplate {
    Set { path: String, value: String },
    Exec { command: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationComponent {
    pub name: String,
    pub kind: PostKind,
    /// Variation-point path for set-value, service name for provide-service.
    pub subject: String,
    /// Device class the component targets.
    pub platform: String,
    pub os: OsMatch,
    pub template: Vec<InstructionTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComponentError {
    #[error("component {name}: {detail}")]
    Invalid { name: String, detail: String },
}

impl TransformationComponent {
    /// Canonicalises the subject path and checks the template parses.
    pub fn normalized(mut self) -> Result<Self, ComponentError> {
        let bad = |detail: String| ComponentError::Invalid {
            name: self.name.clone(),
            detail,
        };
        if self.name.trim().is_empty() {
            return Err(bad("name is empty".into()));
        }
        if self.template.is_empty() {
            return Err(bad("template is empty".into()));
        }
        if self.kind == PostKind::SetValue {
            let path = FieldPath::parse(&self.subject).map_err(|e| bad(e.to_string()))?;
            self.subject = path.as_str().to_string();
        }
        for t in &self.template {
            let fields: Vec<&str> = match t {
                InstructionTemplate::Set { path, value } => vec![path, value],
                InstructionTemplate::Exec { command } => vec![command],
            };
            for f in fields {
                split_template(f).map_err(|e| bad(e.to_string()))?;
            }
        }
        Ok(self)
    }

    pub fn key(&self) -> ComponentKey {
        ComponentKey {
            kind: self.kind,
            subject: self.subject.clone(),
            platform: self.platform.clone(),
            os_platform: self.os.platform.clone(),
        }
    }

    pub fn matches(&self, q: &ComponentQuery) -> bool {
        self.key() == q.key && self.os.versions.contains(&q.os_version)
    }
}

/// Resolution key minus the version range.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentKey {
    pub kind: PostKind,
    pub subject: String,
    pub platform: String,
    pub os_platform: String,
}

impl fmt::Display for ComponentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} {}, {}, {})", self.kind, self.subject, self.platform, self.os_platform)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentQuery {
    pub key: ComponentKey,
    pub os_version: Version,
}

impl ComponentQuery {
    pub fn for_post_condition(pc: &PostCondition, desc: &DeviceDescription) -> Result<Self, String> {
        let features = desc.features().map_err(|v| format!("{} feature violation(s)", v.len()))?;
        Ok(ComponentQuery {
            key: ComponentKey {
                kind: PostKind::of(pc),
                subject: pc.subject().to_string(),
                platform: desc.class_id.clone(),
                os_platform: features.os.platform.clone(),
            },
            os_version: features.os.version.clone(),
        })
    }
}

impl fmt::Display for ComponentQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = &self.key;
        write!(
            f,
            "({} {}, {}, {} {})",
            k.kind, k.subject, k.platform, k.os_platform, self.os_version
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unclosed placeholder in {0:?}")]
    Unclosed(String),
    #[error("stray closing brace in {0:?}")]
    StrayBrace(String),
    #[error("unresolvable placeholder {{{0}}}")]
    Unbound(String),
    #[error("rendered path {0:?} is invalid: {1}")]
    BadPath(String, String),
}

enum Piece<'a> {
    Lit(String),
    Hole(&'a str),
}

fn split_template(text: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") || rest.starts_with("}}") {
            lit.push(c);
            rest = &rest[2..];
        } else if c == '{' {
            let end = rest.find('}').ok_or_else(|| TemplateError::Unclosed(text.to_string()))?;
            if !lit.is_empty() {
                pieces.push(Piece::Lit(std::mem::take(&mut lit)));
            }
            pieces.push(Piece::Hole(rest[1..end].trim()));
            rest = &rest[end + 1..];
        } else if c == '}' {
            return Err(TemplateError::StrayBrace(text.to_string()));
        } else {
            lit.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !lit.is_empty() {
        pieces.push(Piece::Lit(lit));
    }
    Ok(pieces)
}

/// Values available to placeholders while rendering one post-condition.
pub struct Bindings<'a> {
    pub post_condition: &'a PostCondition,
    pub description: &'a DeviceDescription,
    pub state: &'a DeviceState,
}

impl Bindings<'_> {
    fn lookup(&self, name: &str) -> Option<Value> {
        if let Some(path) = name.strip_prefix("state:") {
            let path = FieldPath::parse(path).ok()?;
            return self.state.current_values.get(&path).cloned();
        }
        let features = self.description.features().ok();
        match (name, self.post_condition) {
            ("value", PostCondition::SetValue { value, .. }) => Some(value.clone()),
            ("path", PostCondition::SetValue { path, .. }) => Some(Value::Text(path.as_str().to_string())),
            ("leaf", PostCondition::SetValue { path, .. }) => Some(Value::Text(path.leaf().to_string())),
            ("service", PostCondition::ProvideService { service, .. }) => Some(Value::Text(service.clone())),
            ("level", PostCondition::ProvideService { min_level, .. }) => Some(Value::Int(i64::from(*min_level))),
            ("device_id", _) => Some(Value::Text(self.description.device_id.clone())),
            ("class_id", _) => Some(Value::Text(self.description.class_id.clone())),
            ("os_platform", _) => features.map(|f| Value::Text(f.os.platform)),
            ("os_version", _) => features.map(|f| Value::Text(f.os.version.to_string())),
            _ => None,
        }
    }

    /// A field that is exactly one placeholder keeps the bound value's type;
    /// anything else renders to text.
    pub fn render_value(&self, text: &str) -> Result<Value, TemplateError> {
        let pieces = split_template(text)?;
        if let [Piece::Hole(name)] = pieces.as_slice() {
            return self.lookup(name).ok_or_else(|| TemplateError::Unbound(name.to_string()));
        }
        Ok(Value::parse_literal(&self.render_text(text)?))
    }

    pub fn render_text(&self, text: &str) -> Result<String, TemplateError> {
        let mut out = String::new();
        for piece in split_template(text)? {
            match piece {
                Piece::Lit(s) => out.push_str(&s),
                Piece::Hole(name) => {
                    let v = self.lookup(name).ok_or_else(|| TemplateError::Unbound(name.to_string()))?;
                    out.push_str(&v.render());
                }
            }
        }
        Ok(out)
    }

    pub fn render(&self, template: &[InstructionTemplate]) -> Result<Vec<Instruction>, TemplateError> {
        template
            .iter()
            .map(|t| match t {
                InstructionTemplate::Set { path, value } => {
                    let rendered = self.render_text(path)?;
                    let path = FieldPath::parse(&rendered)
                        .map_err(|e| TemplateError::BadPath(rendered.clone(), e.to_string()))?;
                    Ok(Instruction::Set {
                        path,
                        value: self.render_value(value)?,
                    })
                }
                InstructionTemplate::Exec { command } => Ok(Instruction::Exec {
                    command: self.render_text(command)?,
                }),
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn rate_component() -> TransformationComponent {
        TransformationComponent {
            name: "rpi3-linux4-polling-rate".into(),
            kind: PostKind::SetValue,
            subject: "sensing/temperature/polling_rate".into(),
            platform: "rpi3".into(),
            os: OsMatch {
                platform: "linux".into(),
                versions: VersionRange::parse("4.x").unwrap(),
            },
            template: vec![InstructionTemplate::Set {
                path: "{path}".into(),
                value: "{value}".into(),
            }],
        }
        .normalized()
        .unwrap()
    }

    pub fn service_component() -> TransformationComponent {
        TransformationComponent {
            name: "rpi3-linux-temp-sensing".into(),
            kind: PostKind::ProvideService,
            subject: "temp-sensing".into(),
            platform: "rpi3".into(),
            os: OsMatch {
                platform: "linux".into(),
                versions: VersionRange::any(),
            },
            template: vec![InstructionTemplate::Exec {
                command: "service {service} level {level}".into(),
            }],
        }
        .normalized()
        .unwrap()
    }
}
