use serde::{Deserialize, Serialize};

use super::dfm::{self, DeviceFeatures, FeatureTree, Violation, ViolationKind};
use super::ofm::OrganisationalFeatureModel;
use super::ModelError;
use crate::value::{FieldPath, Value};

/// Static description of one device, conforming to the organisation's
/// feature model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDescription {
    pub device_id: String,
    pub class_id: String,
    pub capabilities: FeatureTree,
}

impl DeviceDescription {
    pub fn value(&self, path: &FieldPath) -> Option<&Value> {
        dfm::lookup(&self.capabilities, path)
    }

    pub fn features(&self) -> Result<DeviceFeatures, Vec<Violation>> {
        DeviceFeatures::from_tree(&self.capabilities)
    }
}

/// Outcome of [`validate_description`]; valid iff there are no violations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks a description against the metamodel structure, every variation
/// point's domain, and the fixed values of its device class.
///
/// An unknown class is a structural error and is returned as `Err`, not as a
/// violation.
pub fn validate_description(
    desc: &DeviceDescription,
    ofm: &OrganisationalFeatureModel,
) -> Result<ValidationReport, ModelError> {
    let class = ofm
        .class(&desc.class_id)
        .ok_or_else(|| ModelError::UnknownClass(desc.class_id.clone()))?;

    let mut violations = dfm::validate_tree(&desc.capabilities);
    for vp in &ofm.variation_points {
        match desc.value(&vp.path) {
            Some(value) if !vp.domain.contains(value) => violations.push(Violation::new(
                vp.path.as_str(),
                ViolationKind::Domain {
                    value: value.clone(),
                    domain: vp.domain.to_string(),
                },
            )),
            Some(_) => {}
            None => violations.push(Violation::new(vp.path.as_str(), ViolationKind::MissingField)),
        }
    }
    for (path, expected) in &class.fixed {
        if let Some(found) = desc.value(path) {
            if found != expected {
                violations.push(Violation::new(
                    path.as_str(),
                    ViolationKind::ClassMismatch {
                        expected: expected.clone(),
                        found: found.clone(),
                    },
                ));
            }
        }
    }
    violations.sort();
    violations.dedup();
    Ok(ValidationReport { violations })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::model::dfm::fixtures::rpi_tree;

    pub fn rpi_description() -> DeviceDescription {
        DeviceDescription {
            device_id: "RPI3_B_ARM_01".into(),
            class_id: "rpi3".into(),
            capabilities: rpi_tree(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::rpi_description;
    use super::*;
    use crate::model::ofm::fixtures::plant_ofm;

    fn p(s: &str) -> FieldPath {
        FieldPath::parse(s).unwrap()
    }

    #[test]
    fn reference_device_is_valid() {
        // four cores at 1.2 GHz against cores ∈ {1,2,4}, clock ∈ [0.7, 1.5] GHz
        let report = validate_description(&rpi_description(), &plant_ofm()).unwrap();
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn three_cores_is_one_domain_violation() {
        let mut desc = rpi_description();
        dfm::assign(&mut desc.capabilities, &p("computational/cores"), Value::Int(3));
        let report = validate_description(&desc, &plant_ofm()).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].path, "capabilities/computational/cores");
        assert!(matches!(report.violations[0].kind, ViolationKind::Domain { .. }));
    }

    #[test]
    fn missing_power_group_is_structural_violation() {
        let mut desc = rpi_description();
        desc.capabilities.remove("power");
        let report = validate_description(&desc, &plant_ofm()).unwrap();
        assert!(report
            .violations
            .contains(&Violation::new("capabilities/power", ViolationKind::MissingGroup)));
    }

    #[test]
    fn unknown_class_is_an_error() {
        let mut desc = rpi_description();
        desc.class_id = "cray".into();
        assert_eq!(
            validate_description(&desc, &plant_ofm()),
            Err(ModelError::UnknownClass("cray".into()))
        );
    }

    #[test]
    fn class_fixed_value_mismatch() {
        let mut desc = rpi_description();
        desc.class_id = "esp32".into();
        let report = validate_description(&desc, &plant_ofm()).unwrap();
        assert!(matches!(report.violations[0].kind, ViolationKind::ClassMismatch { .. }));
    }

    #[test]
    fn validation_is_deterministic() {
        let mut desc = rpi_description();
        desc.capabilities.remove("os");
        dfm::assign(&mut desc.capabilities, &p("computational/cores"), Value::Int(9));
        let ofm = plant_ofm();
        assert_eq!(
            validate_description(&desc, &ofm).unwrap(),
            validate_description(&desc, &ofm).unwrap()
        );
    }
}
