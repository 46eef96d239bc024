//! The requirements interface: commission intake, target resolution,
//! lifecycle tracking and revert emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{project_state, DeviceState, OrganisationalFeatureModel, ProjectionError, MAX_SERVICE_LEVEL};
use crate::phase::Phase;
use crate::registry::Registry;
use crate::value::{FieldPath, Tick, Value};

/// Source id used for commissions the service generates itself.
pub const SYSTEM_SOURCE: &str = "system";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PostCondition {
    SetValue { path: FieldPath, value: Value },
    /// Provide `service` at exactly `min_level`; level 0 withdraws it.
    ProvideService { service: String, min_level: u8 },
}

impl PostCondition {
    pub fn kind(&self) -> &'static str {
        match self {
            PostCondition::SetValue { .. } => "set-value",
            PostCondition::ProvideService { .. } => "provide-service",
        }
    }

    /// The path or service name the post-condition is about.
    pub fn subject(&self) -> &str {
        match self {
            PostCondition::SetValue { path, .. } => path.as_str(),
            PostCondition::ProvideService { service, .. } => service,
        }
    }

    pub fn satisfied_by(&self, state: &DeviceState) -> bool {
        match self {
            PostCondition::SetValue { path, value } => state.current_values.get(path) == Some(value),
            PostCondition::ProvideService { service, min_level: 0 } => state.service_level(service) == 0,
            PostCondition::ProvideService { service, min_level } => state.service_level(service) >= *min_level,
        }
    }
}

impl fmt::Display for PostCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PostCondition::SetValue { path, value } => write!(f, "set-value {path}={value}"),
            PostCondition::ProvideService { service, min_level } => {
                write!(f, "provide-service {service}@{min_level}")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub earliest: Tick,
    pub latest: Tick,
}

impl Window {
    pub fn contains(&self, now: Tick) -> bool {
        self.earliest <= now && now <= self.latest
    }

    pub fn len(&self) -> Tick {
        self.latest.saturating_sub(self.earliest)
    }

    pub fn is_empty(&self) -> bool {
        self.latest < self.earliest
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commission {
    pub commission_id: String,
    pub source: String,
    /// Static priority or market bid, depending on the active policy.
    pub importance: u64,
    pub window: Window,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revert_at: Option<Tick>,
    pub targets: BTreeSet<String>,
    pub required: Vec<PostCondition>,
    #[serde(default)]
    pub submitted_at: Tick,
    /// Set on revert commissions: the commission being undone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revert_of: Option<String>,
    /// Per-device post-conditions replacing `required` for that device.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, Vec<PostCondition>>,
}

impl Commission {
    pub fn required_for(&self, device_id: &str) -> &[PostCondition] {
        self.overrides.get(device_id).map(Vec::as_slice).unwrap_or(&self.required)
    }

    /// Structural checks that need only the OFM.
    pub fn validate(&self, ofm: &OrganisationalFeatureModel) -> Vec<String> {
        let mut problems = Vec::new();
        if self.commission_id.trim().is_empty() {
            problems.push("commission_id is empty".to_string());
        }
        if self.window.is_empty() {
            problems.push(format!(
                "window earliest {} is after latest {}",
                self.window.earliest, self.window.latest
            ));
        }
        if let Some(r) = self.revert_at {
            if r <= self.window.latest {
                problems.push(format!("revert_at {r} must be after window latest {}", self.window.latest));
            }
        }
        if self.targets.is_empty() {
            problems.push("targets is empty".to_string());
        }
        if self.required.is_empty() {
            problems.push("required post-condition list is empty".to_string());
        }
        let lists = std::iter::once(&self.required).chain(self.overrides.values());
        for pc in lists.flatten() {
            match pc {
                PostCondition::SetValue { path, .. } => {
                    if let Err(e) = ofm.settable(path) {
                        problems.push(e.to_string());
                    }
                }
                PostCondition::ProvideService { service, min_level } => {
                    if service.trim().is_empty() {
                        problems.push("service name is empty".to_string());
                    }
                    if *min_level > MAX_SERVICE_LEVEL {
                        problems.push(format!("service level {min_level} exceeds {MAX_SERVICE_LEVEL}"));
                    }
                }
            }
        }
        problems
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommissionStatus {
    Submitted,
    Scheduled,
    Building,
    Shipping,
    Completed,
    Rejected,
    Expired,
    Reverted,
}

impl CommissionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            CommissionStatus::Completed | CommissionStatus::Rejected | CommissionStatus::Expired | CommissionStatus::Reverted
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            CommissionStatus::Submitted => "submitted",
            CommissionStatus::Scheduled => "scheduled",
            CommissionStatus::Building => "building",
            CommissionStatus::Shipping => "shipping",
            CommissionStatus::Completed => "completed",
            CommissionStatus::Rejected => "rejected",
            CommissionStatus::Expired => "expired",
            CommissionStatus::Reverted => "reverted",
        }
    }

    /// Allowed lifecycle edges.
    pub fn can_move_to(self, next: CommissionStatus) -> bool {
        use CommissionStatus::*;
        match (self, next) {
            (Completed, Reverted) => true,
            (from, _) if from.is_terminal() => false,
            (_, Rejected | Expired) => true,
            (_, Reverted) => false,
            (Shipping, Completed) => true,
            (_, Completed) => false,
            (from, to) => to > from,
        }
    }
}

impl fmt::Display for CommissionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub tick: Tick,
    pub phase: Phase,
    pub status: CommissionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum DeviceOutcome {
    Pending,
    Succeeded { at: Tick },
    Failed { detail: String },
    Expired,
    Rejected { reason: String },
}

impl DeviceOutcome {
    pub fn is_final(&self) -> bool {
        !matches!(self, DeviceOutcome::Pending)
    }
}

impl fmt::Display for DeviceOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceOutcome::Pending => f.write_str("pending"),
            DeviceOutcome::Succeeded { at } => write!(f, "succeeded@{at}"),
            DeviceOutcome::Failed { detail } => write!(f, "failed({detail})"),
            DeviceOutcome::Expired => f.write_str("expired"),
            DeviceOutcome::Rejected { reason } => write!(f, "rejected({reason})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub tick: Tick,
    pub text: String,
}

/// Everything the service knows about one commission.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommissionRecord {
    pub commission: Commission,
    pub status: CommissionStatus,
    pub log: Vec<Transition>,
    pub resolved: BTreeSet<String>,
    pub outcomes: BTreeMap<String, DeviceOutcome>,
    #[serde(default)]
    pub packages: BTreeMap<String, String>,
    #[serde(default)]
    pub snapshots: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<Note>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revert_id: Option<String>,
}

impl CommissionRecord {
    pub fn id(&self) -> &str {
        &self.commission.commission_id
    }

    fn push(&mut self, tick: Tick, phase: Phase, status: CommissionStatus, note: Option<String>) -> Transition {
        let t = Transition {
            tick,
            phase,
            status,
            note,
        };
        self.status = status;
        self.log.push(t.clone());
        t
    }

    pub fn succeeded_devices(&self) -> BTreeSet<String> {
        self.outcomes
            .iter()
            .filter(|(_, o)| matches!(o, DeviceOutcome::Succeeded { .. }))
            .map(|(d, _)| d.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("window closed at tick {latest}, submitted at tick {now}")]
    Expired { latest: Tick, now: Tick },
    #[error("unresolved target(s): {}", .0.join(", "))]
    UnresolvedTarget(Vec<String>),
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("commission id {0} already exists")]
    Duplicate(String),
}

impl SubmitError {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            SubmitError::Expired { .. } => "expired",
            SubmitError::UnresolvedTarget(_) => "unresolved-target",
            SubmitError::Invalid(_) => "rejected",
            SubmitError::Duplicate(_) => "conflict",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LifecycleError {
    #[error("unknown commission {0}")]
    Unknown(String),
    #[error("commission {id}: illegal transition {from} -> {to}")]
    Illegal {
        id: String,
        from: CommissionStatus,
        to: CommissionStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RevertError {
    #[error("revert impossible: no snapshot for device {0}")]
    SnapshotMissing(String),
    #[error("revert impossible: snapshot for {device} lacks {path}")]
    ValueMissing { device: String, path: String },
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
}

/// Pre-build values of one device, as captured in its snapshot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PriorState {
    pub values: BTreeMap<FieldPath, Value>,
    pub services: BTreeMap<String, u8>,
}

/// State after applying post-conditions: set-values through
/// [`project_state`], service levels set exactly.
pub fn apply_post_conditions(
    ofm: &OrganisationalFeatureModel,
    state: &DeviceState,
    required: &[PostCondition],
) -> Result<DeviceState, ProjectionError> {
    let changes: BTreeMap<FieldPath, Value> = required
        .iter()
        .filter_map(|pc| match pc {
            PostCondition::SetValue { path, value } => Some((path.clone(), value.clone())),
            PostCondition::ProvideService { .. } => None,
        })
        .collect();
    let mut next = project_state(ofm, state, &changes)?;
    for pc in required {
        if let PostCondition::ProvideService { service, min_level } = pc {
            next.set_service_level(service, *min_level);
        }
    }
    Ok(next)
}

/// Union of the named devices and the members of the named scenarios.
pub fn resolve_targets<'a>(
    targets: impl IntoIterator<Item = &'a String>,
    registry: &Registry,
) -> Result<BTreeSet<String>, Vec<String>> {
    let mut devices = BTreeSet::new();
    let mut unresolved = BTreeSet::new();
    for name in targets {
        if registry.contains(name) {
            devices.insert(name.clone());
        } else if let Some(s) = registry.scenario(name) {
            devices.extend(s.member_devices.iter().cloned());
        } else {
            unresolved.insert(name.clone());
        }
    }
    if unresolved.is_empty() {
        Ok(devices)
    } else {
        Err(unresolved.into_iter().collect())
    }
}

/// All commissions ever submitted, keyed by id.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CommissionBook {
    records: BTreeMap<String, CommissionRecord>,
}

impl CommissionBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<&CommissionRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &CommissionRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record_mut(&mut self, id: &str) -> Result<&mut CommissionRecord, LifecycleError> {
        self.records.get_mut(id).ok_or_else(|| LifecycleError::Unknown(id.to_string()))
    }

    /// Accepts a commission at `now`. Rejected submissions are still recorded
    /// with their terminal status (except duplicates, which would clobber).
    pub fn submit(&mut self, mut c: Commission, now: Tick, registry: &Registry) -> Result<String, SubmitError> {
        let id = c.commission_id.clone();
        if self.records.contains_key(&id) {
            return Err(SubmitError::Duplicate(id));
        }
        c.submitted_at = now;
        let verdict = self.vet(&c, now, registry);
        let (status, resolved, note) = match &verdict {
            Ok(devices) => (CommissionStatus::Submitted, devices.clone(), None),
            Err(e @ SubmitError::Expired { .. }) => (CommissionStatus::Expired, BTreeSet::new(), Some(e.to_string())),
            Err(e) => (
                CommissionStatus::Rejected,
                BTreeSet::new(),
                Some(format!("{}: {e}", e.category())),
            ),
        };
        let mut record = CommissionRecord {
            commission: c,
            status,
            log: Vec::new(),
            outcomes: resolved.iter().map(|d| (d.clone(), DeviceOutcome::Pending)).collect(),
            resolved,
            packages: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            notes: Vec::new(),
            revert_id: None,
        };
        record.push(now, Phase::Intake, status, note);
        self.records.insert(id.clone(), record);
        verdict.map(|_| id)
    }

    fn vet(&self, c: &Commission, now: Tick, registry: &Registry) -> Result<BTreeSet<String>, SubmitError> {
        let problems = c.validate(registry.ofm());
        if !problems.is_empty() {
            return Err(SubmitError::Invalid(problems));
        }
        if c.window.latest < now {
            return Err(SubmitError::Expired {
                latest: c.window.latest,
                now,
            });
        }
        let devices = resolve_targets(&c.targets, registry).map_err(SubmitError::UnresolvedTarget)?;
        if let Some(d) = c.overrides.keys().find(|d| !devices.contains(*d)) {
            return Err(SubmitError::Invalid(vec![format!("override for non-target device {d}")]));
        }
        Ok(devices)
    }

    /// Moves a live commission forward to `status`. Reaching a stage the
    /// commission already passed is a no-op; returns the new transition.
    pub fn advance(
        &mut self,
        id: &str,
        status: CommissionStatus,
        tick: Tick,
        phase: Phase,
    ) -> Result<Option<Transition>, LifecycleError> {
        let record = self.record_mut(id)?;
        if record.status.is_terminal() || status <= record.status {
            return Ok(None);
        }
        if !record.status.can_move_to(status) || status.is_terminal() {
            return Err(LifecycleError::Illegal {
                id: id.to_string(),
                from: record.status,
                to: status,
            });
        }
        Ok(Some(record.push(tick, phase, status, None)))
    }

    pub fn set_package(&mut self, id: &str, device: &str, package_id: &str, snapshot_id: &str) -> Result<(), LifecycleError> {
        let record = self.record_mut(id)?;
        record.packages.insert(device.to_string(), package_id.to_string());
        record.snapshots.insert(device.to_string(), snapshot_id.to_string());
        Ok(())
    }

    pub fn note(&mut self, id: &str, tick: Tick, text: impl Into<String>) -> Result<(), LifecycleError> {
        self.record_mut(id)?.notes.push(Note {
            tick,
            text: text.into(),
        });
        Ok(())
    }

    /// Records a device's final outcome. Repeated outcomes for a device are
    /// ignored. When the last device settles the commission takes its
    /// terminal status, which is returned.
    pub fn settle(
        &mut self,
        id: &str,
        device: &str,
        outcome: DeviceOutcome,
        tick: Tick,
        phase: Phase,
    ) -> Result<Option<Transition>, LifecycleError> {
        debug_assert!(outcome.is_final());
        let record = self.record_mut(id)?;
        if record.status.is_terminal() {
            return Ok(None);
        }
        match record.outcomes.get_mut(device) {
            Some(slot) if !slot.is_final() => *slot = outcome,
            _ => return Ok(None),
        }
        if !record.outcomes.values().all(DeviceOutcome::is_final) {
            return Ok(None);
        }
        let outcomes: Vec<&DeviceOutcome> = record.outcomes.values().collect();
        let all = |f: fn(&DeviceOutcome) -> bool| outcomes.iter().all(|o| f(o));
        let (status, note) = if all(|o| matches!(o, DeviceOutcome::Succeeded { .. })) {
            (CommissionStatus::Completed, None)
        } else if all(|o| matches!(o, DeviceOutcome::Expired)) {
            (CommissionStatus::Expired, None)
        } else {
            let detail: Vec<String> = record.outcomes.iter().map(|(d, o)| format!("{d}={o}")).collect();
            let partial = outcomes.iter().any(|o| matches!(o, DeviceOutcome::Succeeded { .. }));
            let label = if partial { "partial" } else { "failed" };
            (CommissionStatus::Rejected, Some(format!("{label}: {}", detail.join(", "))))
        };
        let t = record.push(tick, phase, status, note);
        let revert_of = record.commission.revert_of.clone();
        if status == CommissionStatus::Completed {
            if let Some(original) = revert_of {
                if let Ok(orig) = self.record_mut(&original) {
                    if orig.status == CommissionStatus::Completed {
                        orig.push(tick, phase, CommissionStatus::Reverted, Some(format!("reverted by {id}")));
                    }
                }
            }
        }
        Ok(Some(t))
    }

    /// Settles every still-pending device with the same outcome.
    pub fn settle_all_pending(
        &mut self,
        id: &str,
        outcome: DeviceOutcome,
        tick: Tick,
        phase: Phase,
    ) -> Result<Option<Transition>, LifecycleError> {
        let pending: Vec<String> = self
            .record_mut(id)?
            .outcomes
            .iter()
            .filter(|(_, o)| !o.is_final())
            .map(|(d, _)| d.clone())
            .collect();
        let mut last = None;
        for d in pending {
            if let Some(t) = self.settle(id, &d, outcome.clone(), tick, phase)? {
                last = Some(t);
            }
        }
        Ok(last)
    }

    /// Builds the revert commission for a completed commission once
    /// `revert_at` is reached. Each target gets set-value post-conditions
    /// restoring the pre-build value of every path the original set, and
    /// provide-service post-conditions restoring prior service levels.
    ///
    /// A missing snapshot is noted on the original as revert-impossible and
    /// returned as an error; the original stays completed.
    pub fn emit_revert(
        &mut self,
        id: &str,
        now: Tick,
        prior: impl Fn(&str) -> Option<PriorState>,
    ) -> Result<Option<Commission>, RevertError> {
        let record = self.record_mut(id)?;
        let due = record.status == CommissionStatus::Completed
            && record.revert_id.is_none()
            && record.commission.revert_at.is_some_and(|r| now >= r);
        if !due {
            return Ok(None);
        }
        let devices = record.succeeded_devices();
        match build_revert(&record.commission, &devices, now, prior) {
            Ok(revert) => {
                record.revert_id = Some(revert.commission_id.clone());
                Ok(Some(revert))
            }
            Err(e) => {
                record.revert_id = Some(String::new());
                record.notes.push(Note {
                    tick: now,
                    text: format!("revert-impossible: {e}"),
                });
                Err(e)
            }
        }
    }

    /// Revert for the succeeded members of a partially rejected commission.
    pub fn emit_partial_revert(
        &mut self,
        id: &str,
        now: Tick,
        prior: impl Fn(&str) -> Option<PriorState>,
    ) -> Result<Option<Commission>, RevertError> {
        let record = self.record_mut(id)?;
        let devices = record.succeeded_devices();
        if record.status != CommissionStatus::Rejected || record.revert_id.is_some() || devices.is_empty() {
            return Ok(None);
        }
        match build_revert(&record.commission, &devices, now, prior) {
            Ok(revert) => {
                record.revert_id = Some(revert.commission_id.clone());
                Ok(Some(revert))
            }
            Err(e) => {
                record.revert_id = Some(String::new());
                record.notes.push(Note {
                    tick: now,
                    text: format!("revert-impossible: {e}"),
                });
                Err(e)
            }
        }
    }
}

fn build_revert(
    original: &Commission,
    devices: &BTreeSet<String>,
    now: Tick,
    prior: impl Fn(&str) -> Option<PriorState>,
) -> Result<Commission, RevertError> {
    let mut overrides = BTreeMap::new();
    for device in devices {
        let snap = prior(device).ok_or_else(|| RevertError::SnapshotMissing(device.clone()))?;
        let mut restore = Vec::new();
        for pc in original.required_for(device) {
            restore.push(match pc {
                PostCondition::SetValue { path, .. } => PostCondition::SetValue {
                    path: path.clone(),
                    value: snap.values.get(path).cloned().ok_or_else(|| RevertError::ValueMissing {
                        device: device.clone(),
                        path: path.to_string(),
                    })?,
                },
                PostCondition::ProvideService { service, .. } => PostCondition::ProvideService {
                    service: service.clone(),
                    min_level: snap.services.get(service).copied().unwrap_or(0),
                },
            });
        }
        overrides.insert(device.clone(), restore);
    }
    let required = overrides.values().next().cloned().unwrap_or_default();
    Ok(Commission {
        commission_id: format!("{}-revert", original.commission_id),
        source: SYSTEM_SOURCE.to_string(),
        importance: original.importance,
        window: Window {
            earliest: now,
            latest: now + original.window.len(),
        },
        revert_at: None,
        targets: devices.clone(),
        required,
        submitted_at: now,
        revert_of: Some(original.commission_id.clone()),
        overrides,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn set_rate(id: &str, targets: &[&str], rate: i64) -> Commission {
        Commission {
            commission_id: id.into(),
            source: "ops".into(),
            importance: 5,
            window: Window {
                earliest: 0,
                latest: 100,
            },
            revert_at: None,
            targets: targets.iter().map(|s| s.to_string()).collect(),
            required: vec![PostCondition::SetValue {
                path: FieldPath::parse("sensing/temperature/polling_rate").unwrap(),
                value: Value::Int(rate),
            }],
            submitted_at: 0,
            revert_of: None,
            overrides: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::set_rate;
    use super::*;
    use crate::model::description::fixtures::rpi_description;
    use crate::model::ofm::fixtures::plant_ofm;
    use crate::model::BusinessScenario;
    use proptest::prelude::*;

    fn registry() -> Registry {
        let ofm = plant_ofm();
        let mut r = Registry::new(ofm.clone(), 30).unwrap();
        for id in ["d1", "d2", "d3"] {
            let mut desc = rpi_description();
            desc.device_id = id.into();
            let state = DeviceState::from_description(&desc, &ofm, BTreeMap::new(), 0);
            r.register_device(desc, state, 0).unwrap();
        }
        r.add_scenario(BusinessScenario {
            scenario_id: "S1".into(),
            member_devices: ["d1", "d2", "d3"].iter().map(|s| s.to_string()).collect(),
            constraints: vec![],
        })
        .unwrap();
        r.add_scenario(BusinessScenario {
            scenario_id: "S2".into(),
            member_devices: ["d1", "d2"].iter().map(|s| s.to_string()).collect(),
            constraints: vec![],
        })
        .unwrap();
        r
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn accepts_scenario_commission() {
        let r = registry();
        let mut book = CommissionBook::new();
        let id = book.submit(set_rate("c1", &["S1"], 10), 0, &r).unwrap();
        let rec = book.get(&id).unwrap();
        assert_eq!(rec.status, CommissionStatus::Submitted);
        assert_eq!(rec.resolved, set(&["d1", "d2", "d3"]));
    }

    #[test]
    fn late_submission_expires() {
        let r = registry();
        let mut book = CommissionBook::new();
        let mut c = set_rate("c1", &["d1"], 10);
        c.window = Window { earliest: 0, latest: 10 };
        assert_eq!(book.submit(c, 20, &r), Err(SubmitError::Expired { latest: 10, now: 20 }));
        assert_eq!(book.get("c1").unwrap().status, CommissionStatus::Expired);
    }

    #[test]
    fn unknown_target_is_unresolved() {
        let r = registry();
        let mut book = CommissionBook::new();
        let err = book.submit(set_rate("c1", &["no-such-device"], 10), 0, &r).unwrap_err();
        assert_eq!(err.category(), "unresolved-target");
        assert_eq!(book.get("c1").unwrap().status, CommissionStatus::Rejected);
    }

    #[test]
    fn empty_required_and_invariant_paths_rejected() {
        let r = registry();
        let mut book = CommissionBook::new();
        let mut c = set_rate("c1", &["d1"], 10);
        c.required.clear();
        assert_eq!(book.submit(c, 0, &r).unwrap_err().category(), "rejected");
        let mut c = set_rate("c2", &["d1"], 10);
        c.required = vec![PostCondition::SetValue {
            path: FieldPath::parse("power/supply").unwrap(),
            value: Value::Text("battery".into()),
        }];
        assert_eq!(book.submit(c, 0, &r).unwrap_err().category(), "rejected");
        assert_eq!(
            book.submit(set_rate("c2", &["d1"], 10), 0, &r),
            Err(SubmitError::Duplicate("c2".into()))
        );
    }

    #[test]
    fn resolution_expands_and_dedups() {
        let r = registry();
        assert_eq!(resolve_targets(&set(&["S1"]), &r).unwrap(), set(&["d1", "d2", "d3"]));
        assert_eq!(resolve_targets(&set(&["d1", "S2"]), &r).unwrap(), set(&["d1", "d2"]));
        assert_eq!(resolve_targets(&set(&["d1"]), &r).unwrap(), set(&["d1"]));
        assert_eq!(resolve_targets(&set(&["x", "d1", "y"]), &r).unwrap_err(), vec!["x", "y"]);
    }

    proptest! {
        #[test]
        fn resolution_ignores_target_order(names in proptest::sample::subsequence(vec!["d1", "d2", "d3", "S1", "S2"], 1..5), seed in any::<u64>()) {
            let r = registry();
            let forward: Vec<String> = names.iter().map(|s| s.to_string()).collect();
            let mut shuffled = forward.clone();
            let n = shuffled.len();
            for i in 0..n {
                shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
            }
            prop_assert_eq!(resolve_targets(&forward, &r), resolve_targets(&shuffled, &r));
        }
    }

    #[test]
    fn lifecycle_edges() {
        use CommissionStatus::*;
        assert!(Submitted.can_move_to(Scheduled));
        assert!(Scheduled.can_move_to(Expired));
        assert!(Shipping.can_move_to(Completed));
        assert!(!Building.can_move_to(Completed));
        assert!(!Building.can_move_to(Scheduled));
        assert!(Completed.can_move_to(Reverted));
        assert!(!Rejected.can_move_to(Reverted));
        assert!(!Expired.can_move_to(Scheduled));
    }

    fn drive_to_shipping(book: &mut CommissionBook, id: &str) {
        book.advance(id, CommissionStatus::Scheduled, 1, Phase::Dispatch).unwrap();
        book.advance(id, CommissionStatus::Building, 2, Phase::Dispatch).unwrap();
        book.advance(id, CommissionStatus::Shipping, 3, Phase::Rollout).unwrap();
    }

    #[test]
    fn all_successes_complete_and_duplicates_are_idempotent() {
        let r = registry();
        let mut book = CommissionBook::new();
        book.submit(set_rate("c1", &["S1"], 10), 0, &r).unwrap();
        drive_to_shipping(&mut book, "c1");
        assert!(book.advance("c1", CommissionStatus::Building, 3, Phase::Dispatch).unwrap().is_none());
        for d in ["d1", "d2"] {
            assert!(book.settle("c1", d, DeviceOutcome::Succeeded { at: 4 }, 4, Phase::Execution).unwrap().is_none());
        }
        assert!(book.settle("c1", "d1", DeviceOutcome::Succeeded { at: 5 }, 5, Phase::Execution).unwrap().is_none());
        let t = book.settle("c1", "d3", DeviceOutcome::Succeeded { at: 5 }, 5, Phase::Execution).unwrap().unwrap();
        assert_eq!(t.status, CommissionStatus::Completed);
        let statuses: Vec<_> = book.get("c1").unwrap().log.iter().map(|t| t.status).collect();
        use CommissionStatus::*;
        assert_eq!(statuses, vec![Submitted, Scheduled, Building, Shipping, Completed]);
        assert!(book.settle("c1", "d3", DeviceOutcome::Expired, 6, Phase::Rollout).unwrap().is_none());
    }

    #[test]
    fn partial_success_is_rejected_partial() {
        let r = registry();
        let mut book = CommissionBook::new();
        book.submit(set_rate("c1", &["S1"], 10), 0, &r).unwrap();
        drive_to_shipping(&mut book, "c1");
        book.settle("c1", "d1", DeviceOutcome::Succeeded { at: 4 }, 4, Phase::Execution).unwrap();
        book.settle("c1", "d2", DeviceOutcome::Succeeded { at: 4 }, 4, Phase::Execution).unwrap();
        let t = book.settle("c1", "d3", DeviceOutcome::Expired, 9, Phase::Rollout).unwrap().unwrap();
        assert_eq!(t.status, CommissionStatus::Rejected);
        assert!(t.note.unwrap().starts_with("partial:"));
    }

    #[test]
    fn all_expired_is_expired() {
        let r = registry();
        let mut book = CommissionBook::new();
        book.submit(set_rate("c1", &["S2"], 10), 0, &r).unwrap();
        let t = book
            .settle_all_pending("c1", DeviceOutcome::Expired, 101, Phase::Intake)
            .unwrap()
            .unwrap();
        assert_eq!(t.status, CommissionStatus::Expired);
    }

    fn completed_with_revert(book: &mut CommissionBook, r: &Registry) {
        let mut c = set_rate("c1", &["d1"], 10);
        c.window.latest = 40;
        c.revert_at = Some(50);
        book.submit(c, 0, r).unwrap();
        drive_to_shipping(book, "c1");
        book.settle("c1", "d1", DeviceOutcome::Succeeded { at: 4 }, 4, Phase::Execution).unwrap();
    }

    fn prior_rate_50(_: &str) -> Option<PriorState> {
        Some(PriorState {
            values: BTreeMap::from([(FieldPath::parse("sensing/temperature/polling_rate").unwrap(), Value::Int(50))]),
            services: BTreeMap::new(),
        })
    }

    #[test]
    fn revert_restores_snapshot_values() {
        let r = registry();
        let mut book = CommissionBook::new();
        completed_with_revert(&mut book, &r);
        assert!(book.emit_revert("c1", 49, prior_rate_50).unwrap().is_none());
        let revert = book.emit_revert("c1", 50, prior_rate_50).unwrap().unwrap();
        assert_eq!(revert.source, SYSTEM_SOURCE);
        assert_eq!(revert.importance, 5);
        assert_eq!(
            revert.required_for("d1"),
            &[PostCondition::SetValue {
                path: FieldPath::parse("sensing/temperature/polling_rate").unwrap(),
                value: Value::Int(50),
            }]
        );
        assert!(book.emit_revert("c1", 51, prior_rate_50).unwrap().is_none());

        let rid = book.submit(revert, 50, &r).unwrap();
        drive_to_shipping(&mut book, &rid);
        book.settle(&rid, "d1", DeviceOutcome::Succeeded { at: 55 }, 55, Phase::Execution).unwrap();
        assert_eq!(book.get("c1").unwrap().status, CommissionStatus::Reverted);
    }

    #[test]
    fn no_revert_without_revert_at() {
        let r = registry();
        let mut book = CommissionBook::new();
        book.submit(set_rate("c1", &["d1"], 10), 0, &r).unwrap();
        drive_to_shipping(&mut book, "c1");
        book.settle("c1", "d1", DeviceOutcome::Succeeded { at: 4 }, 4, Phase::Execution).unwrap();
        assert!(book.emit_revert("c1", 1000, prior_rate_50).unwrap().is_none());
    }

    #[test]
    fn missing_snapshot_is_revert_impossible() {
        let r = registry();
        let mut book = CommissionBook::new();
        completed_with_revert(&mut book, &r);
        let err = book.emit_revert("c1", 50, |_| None).unwrap_err();
        assert_eq!(err, RevertError::SnapshotMissing("d1".into()));
        let rec = book.get("c1").unwrap();
        assert_eq!(rec.status, CommissionStatus::Completed);
        assert!(rec.notes[0].text.starts_with("revert-impossible"));
    }

    #[test]
    fn post_condition_satisfaction() {
        let ofm = plant_ofm();
        let mut state = DeviceState::from_description(&rpi_description(), &ofm, BTreeMap::new(), 0);
        let pc = PostCondition::ProvideService {
            service: "temp-sensing".into(),
            min_level: 2,
        };
        assert!(!pc.satisfied_by(&state));
        state.set_service_level("temp-sensing", 3);
        assert!(pc.satisfied_by(&state));
        let withdraw = PostCondition::ProvideService {
            service: "temp-sensing".into(),
            min_level: 0,
        };
        assert!(!withdraw.satisfied_by(&state));
    }

    #[test]
    fn commission_document_round_trip() {
        let json = r#"{
            "commission_id": "c9", "source": "ops", "importance": 5,
            "window": {"earliest": 0, "latest": 100}, "targets": ["S1"],
            "required": [
                {"kind": "set-value", "path": "sensing/temperature/polling_rate", "value": 10},
                {"kind": "provide-service", "service": "temp-sensing", "min_level": 3}
            ]
        }"#;
        let c: Commission = serde_json::from_str(json).unwrap();
        assert_eq!(c.required.len(), 2);
        let back: Commission = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
