//! Organisational feature model: which metamodel fields an organisation
//! treats as variation points, their value domains, and its device classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dfm;
use crate::value::{FieldPath, Value, ValueKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Enum(Vec<Value>),
    Range { min: i64, max: i64 },
}

impl Domain {
    pub fn contains(&self, value: &Value) -> bool {
        match self {
            Domain::Enum(values) => values.contains(value),
            Domain::Range { min, max } => value.as_int().is_some_and(|v| *min <= v && v <= *max),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Enum(values) => {
                let items: Vec<String> = values.iter().map(Value::to_string).collect();
                write!(f, "{{{}}}", items.join(","))
            }
            Domain::Range { min, max } => write!(f, "[{min},{max}]"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Access {
    Configurable,
    ReadOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationPoint {
    pub path: FieldPath,
    pub domain: Domain,
    pub access: Access,
    /// Field that may never change once the device is deployed.
    #[serde(default)]
    pub invariant: bool,
}

impl VariationPoint {
    /// Whether a commission may name this point as a post-condition.
    pub fn is_settable(&self) -> bool {
        self.access == Access::Configurable && !self.invariant
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceClass {
    pub class_id: String,
    #[serde(default)]
    pub fixed: BTreeMap<FieldPath, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OfmError {
    #[error("variation point {0} does not exist in the device feature metamodel")]
    UnknownPath(FieldPath),
    #[error("variation point {0} declared more than once")]
    DuplicatePath(FieldPath),
    #[error("variation point {path}: {detail}")]
    BadDomain { path: FieldPath, detail: String },
    #[error("device class {0} declared more than once")]
    DuplicateClass(String),
    #[error("device class {class}: fixed field {path} is not in the metamodel")]
    BadFixedField { class: String, path: FieldPath },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotSettable {
    #[error("{0} is not a variation point")]
    Unknown(FieldPath),
    #[error("{0} is read-only")]
    ReadOnly(FieldPath),
    #[error("{0} is an invariant and may not be changed")]
    Invariant(FieldPath),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganisationalFeatureModel {
    pub id: String,
    pub dfm_version: String,
    pub variation_points: Vec<VariationPoint>,
    #[serde(default)]
    pub device_classes: Vec<DeviceClass>,
}

impl OrganisationalFeatureModel {
    /// Self-consistency: every point names a metamodel field, paths are
    /// unique, domains are non-empty and type-compatible, class ids unique.
    pub fn validate(&self) -> Result<(), Vec<OfmError>> {
        let mut errors = Vec::new();
        let mut seen = BTreeSet::new();
        for vp in &self.variation_points {
            if !dfm::path_in_schema(&vp.path) {
                errors.push(OfmError::UnknownPath(vp.path.clone()));
            }
            if !seen.insert(vp.path.clone()) {
                errors.push(OfmError::DuplicatePath(vp.path.clone()));
            }
            let bad = |detail: &str| OfmError::BadDomain {
                path: vp.path.clone(),
                detail: detail.to_string(),
            };
            match &vp.domain {
                Domain::Enum(values) if values.is_empty() => errors.push(bad("empty enumeration")),
                Domain::Range { min, max } if min > max => errors.push(bad("range min exceeds max")),
                Domain::Range { .. } => {
                    if dfm::schema_kind(&vp.path).is_some_and(|k| k != ValueKind::Int) {
                        errors.push(bad("numeric range on a non-integer field"));
                    }
                }
                Domain::Enum(values) => {
                    if let Some(kind) = dfm::schema_kind(&vp.path) {
                        if values.iter().any(|v| v.kind() != kind) {
                            errors.push(bad("enumeration value of the wrong kind"));
                        }
                    }
                }
            }
        }
        let mut classes = BTreeSet::new();
        for class in &self.device_classes {
            if !classes.insert(class.class_id.clone()) {
                errors.push(OfmError::DuplicateClass(class.class_id.clone()));
            }
            for path in class.fixed.keys() {
                if !dfm::path_in_schema(path) {
                    errors.push(OfmError::BadFixedField {
                        class: class.class_id.clone(),
                        path: path.clone(),
                    });
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    pub fn point(&self, path: &FieldPath) -> Option<&VariationPoint> {
        self.variation_points.iter().find(|vp| &vp.path == path)
    }

    pub fn class(&self, class_id: &str) -> Option<&DeviceClass> {
        self.device_classes.iter().find(|c| c.class_id == class_id)
    }

    /// Paths tracked in every device state, in canonical order.
    pub fn configurable_paths(&self) -> BTreeSet<FieldPath> {
        self.variation_points
            .iter()
            .filter(|vp| vp.access == Access::Configurable)
            .map(|vp| vp.path.clone())
            .collect()
    }

    /// Resolves a point a commission wants to change.
    pub fn settable(&self, path: &FieldPath) -> Result<&VariationPoint, NotSettable> {
        let vp = self.point(path).ok_or_else(|| NotSettable::Unknown(path.clone()))?;
        if vp.invariant {
            return Err(NotSettable::Invariant(path.clone()));
        }
        if vp.access == Access::ReadOnly {
            return Err(NotSettable::ReadOnly(path.clone()));
        }
        Ok(vp)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// OFM used across the unit tests: cores and clock configurable, the
    /// temperature sensor's polling rate and mode configurable, power supply
    /// an invariant.
    pub fn plant_ofm() -> OrganisationalFeatureModel {
        serde_json::from_value(serde_json::json!({
            "id": "plant-a",
            "dfm_version": "1.0",
            "variation_points": [
                {"path": "capabilities/computational/cores", "domain": {"enum": [1, 2, 4]}, "access": "configurable"},
                {"path": "capabilities/computational/clock_hz", "domain": {"range": {"min": 700_000_000, "max": 1_500_000_000}}, "access": "configurable"},
                {"path": "capabilities/sensing/temperature/polling_rate", "domain": {"range": {"min": 1, "max": 1000}}, "access": "configurable"},
                {"path": "capabilities/sensing/temperature/mode", "domain": {"enum": ["eco", "normal", "burst"]}, "access": "configurable"},
                {"path": "capabilities/power/supply", "domain": {"enum": ["mains", "battery", "harvesting"]}, "access": "configurable", "invariant": true},
                {"path": "capabilities/memory/bytes", "domain": {"range": {"min": 0, "max": 8_589_934_592i64}}, "access": "read-only"}
            ],
            "device_classes": [
                {"class_id": "rpi3", "fixed": {"capabilities/os/platform": "linux"}},
                {"class_id": "esp32", "fixed": {"capabilities/os/platform": "freertos"}}
            ]
        }))
        .unwrap()
    }
}
