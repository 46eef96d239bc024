//! Device registry: the ledger of device descriptions, live states and
//! business scenarios, with read-time staleness tracking.
//!
//! The registry is a single-writer structure: the orchestration loop owns it
//! and mutates through `&mut self`; readers get consistent copies via
//! `Clone` or [`Registry::states_of`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_description, validate_state, BusinessScenario, DeviceDescription, DeviceState,
    ModelError, OrganisationalFeatureModel, ValidationReport, Violation,
};
use crate::value::Tick;

pub const DEFAULT_STALENESS_THRESHOLD: Tick = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("device {0} is already registered")]
    Conflict(String),
    #[error("device {device} fails validation: {report}")]
    InvalidDescription { device: String, report: ValidationReport },
    #[error("device {device}: {source}")]
    UnknownClass {
        device: String,
        #[source]
        source: ModelError,
    },
    #[error("state for {device} fails validation: {}", fmt_violations(.violations))]
    InvalidState { device: String, violations: Vec<Violation> },
    #[error("device {0} is not registered")]
    NotFound(String),
    #[error("stale write for {device}: state from tick {attempted} is older than stored tick {stored}")]
    StaleWrite { device: String, stored: Tick, attempted: Tick },
    #[error("scenario {0} is already defined")]
    DuplicateScenario(String),
    #[error("scenario {scenario}: {detail}")]
    InvalidScenario { scenario: String, detail: String },
    #[error("organisational feature model is inconsistent: {0}")]
    InvalidOfm(String),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub entry_id: EntryId,
    pub description: DeviceDescription,
    pub state: DeviceState,
    pub staleness_threshold: Tick,
}

/// Result of [`Registry::get_state`]: the state is always returned, `fresh`
/// tells whether it is recent enough to act on.
#[derive(Clone, Copy, Debug)]
pub struct StateView<'a> {
    pub state: &'a DeviceState,
    pub fresh: bool,
    pub age: Tick,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCatalog {
    pub scenarios: BTreeMap<String, BusinessScenario>,
}

/// A scenario constraint that does not hold (or cannot be evaluated) over the
/// current registry states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditFinding {
    pub constraint: String,
    pub expression: String,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct Registry {
    ofm: OrganisationalFeatureModel,
    entries: BTreeMap<String, RegistryEntry>,
    catalog: ScenarioCatalog,
    staleness_threshold: Tick,
    next_entry: u64,
}

impl Registry {
    pub fn new(ofm: OrganisationalFeatureModel, staleness_threshold: Tick) -> Result<Self, RegistryError> {
        ofm.validate().map_err(|errs| {
            RegistryError::InvalidOfm(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        })?;
        Ok(Registry {
            ofm,
            entries: BTreeMap::new(),
            catalog: ScenarioCatalog::default(),
            staleness_threshold,
            next_entry: 1,
        })
    }

    pub fn ofm(&self) -> &OrganisationalFeatureModel {
        &self.ofm
    }

    pub fn staleness_threshold(&self) -> Tick {
        self.staleness_threshold
    }

    pub fn register_device(
        &mut self,
        desc: DeviceDescription,
        mut initial: DeviceState,
        now: Tick,
    ) -> Result<EntryId, RegistryError> {
        let device = desc.device_id.clone();
        if self.entries.contains_key(&device) {
            return Err(RegistryError::Conflict(device));
        }
        let report = validate_description(&desc, &self.ofm).map_err(|source| RegistryError::UnknownClass {
            device: device.clone(),
            source,
        })?;
        if !report.is_valid() {
            return Err(RegistryError::InvalidDescription { device, report });
        }
        self.check_state(&device, &initial)?;
        initial.last_updated = now;
        let entry_id = EntryId(self.next_entry);
        self.next_entry += 1;
        self.entries.insert(
            device,
            RegistryEntry {
                entry_id,
                description: desc,
                state: initial,
                staleness_threshold: self.staleness_threshold,
            },
        );
        Ok(entry_id)
    }

    fn check_state(&self, device: &str, state: &DeviceState) -> Result<(), RegistryError> {
        let mut violations = validate_state(state, &self.ofm);
        if state.device_id != device {
            violations.push(Violation::new(
                "device_id",
                crate::model::ViolationKind::OutOfRange {
                    detail: format!("state belongs to {}", state.device_id),
                },
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(RegistryError::InvalidState {
                device: device.to_string(),
                violations,
            })
        }
    }

    /// Replaces a device's state. The write's own `last_updated` is its tick;
    /// writes older than the stored state are rejected.
    pub fn update_state(&mut self, device_id: &str, new_state: DeviceState) -> Result<Tick, RegistryError> {
        let stored = self
            .entries
            .get(device_id)
            .ok_or_else(|| RegistryError::NotFound(device_id.to_string()))?
            .state
            .last_updated;
        if new_state.last_updated < stored {
            return Err(RegistryError::StaleWrite {
                device: device_id.to_string(),
                stored,
                attempted: new_state.last_updated,
            });
        }
        self.check_state(device_id, &new_state)?;
        let tick = new_state.last_updated;
        let entry = self.entries.get_mut(device_id).expect("checked above");
        entry.state = new_state;
        Ok(tick)
    }

    pub fn get_state(&self, device_id: &str, now: Tick) -> Result<StateView<'_>, RegistryError> {
        let entry = self
            .entries
            .get(device_id)
            .ok_or_else(|| RegistryError::NotFound(device_id.to_string()))?;
        let age = now.saturating_sub(entry.state.last_updated);
        Ok(StateView {
            state: &entry.state,
            fresh: age <= entry.staleness_threshold,
            age,
        })
    }

    pub fn entry(&self, device_id: &str) -> Option<&RegistryEntry> {
        self.entries.get(device_id)
    }

    pub fn description(&self, device_id: &str) -> Option<&DeviceDescription> {
        self.entries.get(device_id).map(|e| &e.description)
    }

    pub fn contains(&self, device_id: &str) -> bool {
        self.entries.contains_key(device_id)
    }

    pub fn device_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn add_scenario(&mut self, scenario: BusinessScenario) -> Result<(), RegistryError> {
        let id = scenario.scenario_id.clone();
        let bad = |detail: String| RegistryError::InvalidScenario {
            scenario: id.clone(),
            detail,
        };
        if self.catalog.scenarios.contains_key(&id) {
            return Err(RegistryError::DuplicateScenario(id));
        }
        if self.entries.contains_key(&id) {
            return Err(bad("scenario id collides with a device id".into()));
        }
        if scenario.member_devices.is_empty() {
            return Err(bad("scenario has no member devices".into()));
        }
        if let Some(unknown) = scenario.member_devices.iter().find(|d| !self.entries.contains_key(*d)) {
            return Err(bad(format!("member {unknown} is not registered")));
        }
        for c in &scenario.constraints {
            if let Some(d) = c.referenced_devices().into_iter().find(|d| !scenario.contains(d)) {
                return Err(bad(format!("constraint `{c}` references non-member {d}")));
            }
        }
        self.catalog.scenarios.insert(id, scenario);
        Ok(())
    }

    pub fn scenario(&self, scenario_id: &str) -> Option<&BusinessScenario> {
        self.catalog.scenarios.get(scenario_id)
    }

    pub fn catalog(&self) -> &ScenarioCatalog {
        &self.catalog
    }

    /// Scenarios containing the device, ordered by scenario id.
    pub fn scenarios_for(&self, device_id: &str) -> Result<Vec<&BusinessScenario>, RegistryError> {
        if !self.entries.contains_key(device_id) {
            return Err(RegistryError::NotFound(device_id.to_string()));
        }
        Ok(self
            .catalog
            .scenarios
            .values()
            .filter(|s| s.contains(device_id))
            .collect())
    }

    /// Copies of the current states of the given devices (unknown ids skipped).
    pub fn states_of<'a>(&self, devices: impl IntoIterator<Item = &'a String>) -> BTreeMap<String, DeviceState> {
        devices
            .into_iter()
            .filter_map(|d| self.entries.get(d).map(|e| (d.clone(), e.state.clone())))
            .collect()
    }

    /// Evaluates every scenario constraint over the current states.
    pub fn audit(&self) -> Vec<AuditFinding> {
        let mut out = Vec::new();
        for scenario in self.catalog.scenarios.values() {
            let states = self.states_of(&scenario.member_devices);
            for (i, c) in scenario.constraints.iter().enumerate() {
                let detail = match c.evaluate(&states) {
                    Ok(true) => continue,
                    Ok(false) => "constraint does not hold".to_string(),
                    Err(e) => e.to_string(),
                };
                out.push(AuditFinding {
                    constraint: scenario.constraint_label(i),
                    expression: c.to_string(),
                    detail,
                });
            }
        }
        out
    }
}

/// Reference to the OFM from a fleet document: inline or a path relative to
/// the document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OfmRef {
    Path(PathBuf),
    Inline(OrganisationalFeatureModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetDevice {
    pub description: DeviceDescription,
    /// Full initial state; derived from the description when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<DeviceState>,
    /// Services provided at start, used when `initial_state` is absent.
    #[serde(default)]
    pub services: BTreeMap<String, u8>,
}

/// Fleet bootstrap document: OFM reference, device descriptions, initial
/// states and scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetBootstrap {
    pub ofm: OfmRef,
    pub devices: Vec<FleetDevice>,
    #[serde(default)]
    pub scenarios: Vec<BusinessScenario>,
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("initial fleet violates scenario constraints: {0}")]
    UnsafeStart(String),
}

impl FleetBootstrap {
    pub fn load(path: &Path) -> Result<Self, FleetError> {
        let mut doc: FleetBootstrap = crate::doc::read_json(path).map_err(|e| match e {
            crate::doc::DocError::Io(source) => FleetError::Io {
                path: path.to_path_buf(),
                source,
            },
            crate::doc::DocError::Parse(source) => FleetError::Parse {
                path: path.to_path_buf(),
                source,
            },
        })?;
        if let OfmRef::Path(rel) = &doc.ofm {
            let base = path.parent().unwrap_or(Path::new("."));
            let full = base.join(rel);
            let ofm = crate::doc::read_json(&full).map_err(|e| match e {
                crate::doc::DocError::Io(source) => FleetError::Io {
                    path: full.clone(),
                    source,
                },
                crate::doc::DocError::Parse(source) => FleetError::Parse {
                    path: full.clone(),
                    source,
                },
            })?;
            doc.ofm = OfmRef::Inline(ofm);
        }
        Ok(doc)
    }

    /// Builds a registry with every device registered at `now` and every
    /// scenario added; refuses a fleet that starts out violating a constraint.
    pub fn into_registry(self, staleness_threshold: Tick, now: Tick) -> Result<Registry, FleetError> {
        let ofm = match self.ofm {
            OfmRef::Inline(ofm) => ofm,
            OfmRef::Path(p) => {
                return Err(FleetError::Io {
                    path: p,
                    source: std::io::Error::other("OFM path must be resolved with FleetBootstrap::load"),
                })
            }
        };
        let mut registry = Registry::new(ofm, staleness_threshold)?;
        for dev in self.devices {
            let initial = match dev.initial_state {
                Some(s) => s,
                None => DeviceState::from_description(&dev.description, registry.ofm(), dev.services, now),
            };
            registry.register_device(dev.description, initial, now)?;
        }
        for s in self.scenarios {
            registry.add_scenario(s)?;
        }
        let findings = registry.audit();
        if !findings.is_empty() {
            let text: Vec<String> = findings
                .iter()
                .map(|f| format!("{} ({}): {}", f.constraint, f.expression, f.detail))
                .collect();
            return Err(FleetError::UnsafeStart(text.join("; ")));
        }
        Ok(registry)
    }

    pub fn device_ids(&self) -> BTreeSet<String> {
        self.devices.iter().map(|d| d.description.device_id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::description::fixtures::rpi_description;
    use crate::model::ofm::fixtures::plant_ofm;
    use crate::model::{dfm, Constraint};
    use crate::value::{FieldPath, Value};

    fn device(id: &str) -> (DeviceDescription, DeviceState) {
        let mut desc = rpi_description();
        desc.device_id = id.to_string();
        let state = DeviceState::from_description(&desc, &plant_ofm(), BTreeMap::new(), 0);
        (desc, state)
    }

    fn registry_with(ids: &[&str]) -> Registry {
        let mut r = Registry::new(plant_ofm(), 20).unwrap();
        for id in ids {
            let (d, s) = device(id);
            r.register_device(d, s, 0).unwrap();
        }
        r
    }

    #[test]
    fn register_and_query() {
        let mut r = Registry::new(plant_ofm(), 20).unwrap();
        let (d, s) = device("RPI3_B_ARM_01");
        r.register_device(d, s, 3).unwrap();
        let view = r.get_state("RPI3_B_ARM_01", 3).unwrap();
        assert!(view.fresh);
        assert_eq!(view.state.last_updated, 3);
    }

    #[test]
    fn duplicate_registration_conflicts() {
        let mut r = registry_with(&["d1"]);
        let (d, s) = device("d1");
        assert_eq!(r.register_device(d, s, 0), Err(RegistryError::Conflict("d1".into())));
    }

    #[test]
    fn invalid_description_embeds_report() {
        let mut r = Registry::new(plant_ofm(), 20).unwrap();
        let (mut d, s) = device("d1");
        dfm::assign(&mut d.capabilities, &FieldPath::parse("computational/cores").unwrap(), Value::Int(3));
        match r.register_device(d, s, 0) {
            Err(RegistryError::InvalidDescription { report, .. }) => assert_eq!(report.violations.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn update_overwrites_and_rejects_stale_writes() {
        let mut r = registry_with(&["d1"]);
        let mut s = r.get_state("d1", 0).unwrap().state.clone();
        s.charge_pct = 75;
        s.last_updated = 10;
        assert_eq!(r.update_state("d1", s.clone()), Ok(10));
        let view = r.get_state("d1", 10).unwrap();
        assert_eq!((view.state.charge_pct, view.state.last_updated), (75, 10));
        s.last_updated = 5;
        assert!(matches!(r.update_state("d1", s.clone()), Err(RegistryError::StaleWrite { stored: 10, .. })));
        assert_eq!(r.update_state("nope", s), Err(RegistryError::NotFound("nope".into())));
    }

    #[test]
    fn invalid_state_is_never_stored() {
        let mut r = registry_with(&["d1"]);
        let mut s = r.get_state("d1", 0).unwrap().state.clone();
        s.current_values.insert(FieldPath::parse("sensing/temperature/mode").unwrap(), Value::Text("turbo".into()));
        s.last_updated = 1;
        assert!(matches!(r.update_state("d1", s), Err(RegistryError::InvalidState { .. })));
        assert_eq!(r.get_state("d1", 1).unwrap().state.last_updated, 0);
    }

    #[test]
    fn freshness_window() {
        let mut r = registry_with(&["d1"]);
        let mut s = r.get_state("d1", 0).unwrap().state.clone();
        s.last_updated = 10;
        r.update_state("d1", s).unwrap();
        assert!(r.get_state("d1", 25).unwrap().fresh);
        assert!(!r.get_state("d1", 31).unwrap().fresh);
        assert!(r.get_state("d1", 10).unwrap().fresh);
        assert!(r.get_state("d1", 30).unwrap().fresh);
    }

    fn scenario(id: &str, members: &[&str]) -> BusinessScenario {
        BusinessScenario {
            scenario_id: id.into(),
            member_devices: members.iter().map(|s| s.to_string()).collect(),
            constraints: vec![],
        }
    }

    #[test]
    fn scenario_membership_queries() {
        let mut r = registry_with(&["d1", "d2", "d3", "d4", "d5", "lonely"]);
        r.add_scenario(scenario("S3", &["d1"])).unwrap();
        r.add_scenario(scenario("S1", &["d1", "d2", "d3", "d4", "d5"])).unwrap();
        r.add_scenario(scenario("S2", &["d2"])).unwrap();
        let ids: Vec<_> = r.scenarios_for("d1").unwrap().iter().map(|s| s.scenario_id.clone()).collect();
        assert_eq!(ids, vec!["S1", "S3"]);
        assert!(r.scenarios_for("lonely").unwrap().is_empty());
        let s = r.scenarios_for("d5").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].member_devices.len(), 5);
        assert!(r.scenarios_for("ghost").is_err());
    }

    #[test]
    fn scenario_validation() {
        let mut r = registry_with(&["d1"]);
        assert!(r.add_scenario(scenario("S", &[])).is_err());
        assert!(r.add_scenario(scenario("S", &["ghost"])).is_err());
        let mut s = scenario("S", &["d1"]);
        s.constraints.push(Constraint::parse("online@d2").unwrap());
        assert!(r.add_scenario(s).is_err());
        r.add_scenario(scenario("S", &["d1"])).unwrap();
        assert_eq!(r.add_scenario(scenario("S", &["d1"])), Err(RegistryError::DuplicateScenario("S".into())));
    }

    #[test]
    fn audit_reports_broken_constraints() {
        let mut r = registry_with(&["d1", "d2"]);
        let mut s = scenario("S1", &["d1", "d2"]);
        s.constraints.push(Constraint::parse("count(service temp-sensing level >= 1) >= 1").unwrap());
        s.constraints.push(Constraint::parse("online").unwrap());
        r.add_scenario(s).unwrap();
        let findings = r.audit();
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].constraint, "S1/c0");
    }
}
