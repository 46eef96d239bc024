use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::description::DeviceDescription;
use super::dfm::{Violation, ViolationKind};
use super::ofm::{NotSettable, OrganisationalFeatureModel};
use crate::value::{FieldPath, Tick, Value};

/// Highest service level; level 0 means the service is not provided.
pub const MAX_SERVICE_LEVEL: u8 = 10;

/// Live ledger record of one device's variation points and services.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    pub device_id: String,
    pub current_values: BTreeMap<FieldPath, Value>,
    #[serde(default)]
    pub provided_services: BTreeMap<String, u8>,
    pub charge_pct: u8,
    pub online: bool,
    pub last_updated: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProjectionError {
    #[error(transparent)]
    NotSettable(#[from] NotSettable),
}

impl DeviceState {
    /// Initial state of a freshly described device: configurable values copied
    /// from the description, charge from its power group, online.
    pub fn from_description(
        desc: &DeviceDescription,
        ofm: &OrganisationalFeatureModel,
        services: BTreeMap<String, u8>,
        now: Tick,
    ) -> DeviceState {
        let current_values = ofm
            .configurable_paths()
            .into_iter()
            .filter_map(|p| desc.value(&p).cloned().map(|v| (p, v)))
            .collect();
        let charge = FieldPath::parse("power/charge_pct")
            .ok()
            .and_then(|p| desc.value(&p).and_then(Value::as_int))
            .unwrap_or(100)
            .clamp(0, 100) as u8;
        let mut state = DeviceState {
            device_id: desc.device_id.clone(),
            current_values,
            provided_services: services,
            charge_pct: charge,
            online: true,
            last_updated: now,
        };
        state.normalize_services();
        state
    }

    pub fn service_level(&self, service: &str) -> u8 {
        self.provided_services.get(service).copied().unwrap_or(0)
    }

    /// Sets a service level; level 0 withdraws the service.
    pub fn set_service_level(&mut self, service: &str, level: u8) {
        if level == 0 {
            self.provided_services.remove(service);
        } else {
            self.provided_services.insert(service.to_string(), level.min(MAX_SERVICE_LEVEL));
        }
    }

    fn normalize_services(&mut self) {
        self.provided_services.retain(|_, level| *level > 0);
    }
}

/// Hypothetical state after applying `changes`. The input is untouched and
/// `last_updated` is carried over unchanged.
pub fn project_state(
    ofm: &OrganisationalFeatureModel,
    state: &DeviceState,
    changes: &BTreeMap<FieldPath, Value>,
) -> Result<DeviceState, ProjectionError> {
    let mut next = state.clone();
    for (path, value) in changes {
        ofm.settable(path)?;
        next.current_values.insert(path.clone(), value.clone());
    }
    Ok(next)
}

/// Checks a state against the OFM: exactly the configurable paths, each value
/// in its domain, service levels and charge in range.
pub fn validate_state(state: &DeviceState, ofm: &OrganisationalFeatureModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let expected = ofm.configurable_paths();
    for path in &expected {
        match state.current_values.get(path) {
            None => out.push(Violation::new(path.as_str(), ViolationKind::MissingField)),
            Some(v) => {
                let vp = ofm.point(path).expect("configurable path comes from the ofm");
                if !vp.domain.contains(v) {
                    out.push(Violation::new(
                        path.as_str(),
                        ViolationKind::Domain {
                            value: v.clone(),
                            domain: vp.domain.to_string(),
                        },
                    ));
                }
            }
        }
    }
    for path in state.current_values.keys() {
        if !expected.contains(path) {
            out.push(Violation::new(path.as_str(), ViolationKind::NotConfigurable));
        }
    }
    for (service, level) in &state.provided_services {
        if *level > MAX_SERVICE_LEVEL {
            out.push(Violation::new(
                format!("service:{service}"),
                ViolationKind::OutOfRange {
                    detail: format!("level {level} exceeds {MAX_SERVICE_LEVEL}"),
                },
            ));
        }
    }
    if state.charge_pct > 100 {
        out.push(Violation::new(
            "charge_pct",
            ViolationKind::OutOfRange {
                detail: "charge must lie in [0,100]".into(),
            },
        ));
    }
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::model::description::fixtures::rpi_description;
    use crate::model::ofm::fixtures::plant_ofm;

    pub fn rpi_state() -> DeviceState {
        let mut services = BTreeMap::new();
        services.insert("temp-sensing".to_string(), 3);
        DeviceState::from_description(&rpi_description(), &plant_ofm(), services, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::rpi_state;
    use super::*;
    use crate::model::ofm::fixtures::plant_ofm;
    use proptest::prelude::*;

    fn p(s: &str) -> FieldPath {
        FieldPath::parse(s).unwrap()
    }

    #[test]
    fn initial_state_is_valid() {
        let s = rpi_state();
        assert!(validate_state(&s, &plant_ofm()).is_empty());
        assert_eq!(s.current_values[&p("sensing/temperature/polling_rate")], Value::Int(50));
        assert_eq!(s.charge_pct, 100);
    }

    #[test]
    fn empty_projection_is_identity() {
        let s = rpi_state();
        assert_eq!(project_state(&plant_ofm(), &s, &BTreeMap::new()).unwrap(), s);
    }

    #[test]
    fn single_field_overwrite() {
        let s = rpi_state();
        let changes = BTreeMap::from([(p("sensing/temperature/polling_rate"), Value::Int(10))]);
        let out = project_state(&plant_ofm(), &s, &changes).unwrap();
        assert_eq!(out.current_values[&p("sensing/temperature/polling_rate")], Value::Int(10));
        assert_eq!(out.current_values[&p("sensing/temperature/mode")], Value::Text("eco".into()));
        assert_eq!(out.last_updated, s.last_updated);
        assert_eq!(s.current_values[&p("sensing/temperature/polling_rate")], Value::Int(50));
    }

    #[test]
    fn invariant_path_cannot_be_projected() {
        let s = rpi_state();
        let changes = BTreeMap::from([(p("power/supply"), Value::Text("battery".into()))]);
        assert_eq!(
            project_state(&plant_ofm(), &s, &changes),
            Err(ProjectionError::NotSettable(NotSettable::Invariant(p("power/supply"))))
        );
    }

    #[test]
    fn state_validation_flags_drift() {
        let ofm = plant_ofm();
        let mut s = rpi_state();
        s.current_values.remove(&p("computational/cores"));
        s.current_values.insert(p("os/version"), Value::Text("4.14".into()));
        s.current_values.insert(p("sensing/temperature/mode"), Value::Text("turbo".into()));
        let v = validate_state(&s, &ofm);
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn level_zero_withdraws() {
        let mut s = rpi_state();
        s.set_service_level("temp-sensing", 0);
        assert_eq!(s.service_level("temp-sensing"), 0);
        assert!(s.provided_services.is_empty());
    }

    fn change_set() -> impl Strategy<Value = BTreeMap<FieldPath, Value>> {
        let rate = (1i64..=1000).prop_map(|v| (p("sensing/temperature/polling_rate"), Value::Int(v)));
        let mode = prop_oneof![Just("eco"), Just("normal"), Just("burst")]
            .prop_map(|m| (p("sensing/temperature/mode"), Value::Text(m.into())));
        let cores = prop_oneof![Just(1i64), Just(2), Just(4)]
            .prop_map(|c| (p("computational/cores"), Value::Int(c)));
        proptest::collection::vec(prop_oneof![rate, mode, cores], 0..4)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn projection_composes(c1 in change_set(), c2 in change_set()) {
            let ofm = plant_ofm();
            let s = rpi_state();
            let stepwise = project_state(&ofm, &project_state(&ofm, &s, &c1).unwrap(), &c2).unwrap();
            let mut merged = c1.clone();
            merged.extend(c2.clone());
            let combined = project_state(&ofm, &s, &merged).unwrap();
            prop_assert_eq!(&stepwise, &combined);
            prop_assert!(validate_state(&combined, &ofm).is_empty());
        }
    }
}
