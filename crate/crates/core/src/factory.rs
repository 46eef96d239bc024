//! The configuration factory: gathers its four inputs, checks
//! pre-conditions and builds a device-specific package.
//!
//! [`build`] is pure. Everything it reads is inside [`FactoryInputs`] and
//! [`FactoryConfig`], so a serialized input document rebuilds to the same
//! bytes anywhere.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::commission::{Commission, PostCondition};
use crate::model::{BusinessScenario, DeviceDescription, DeviceState, OrganisationalFeatureModel};
use crate::package::{
    ConfigurationArtifact, ConfigurationPackage, Criticality, Expectation, Instruction, ShippingMetadata,
    UnsealedPackage, VerifySubject, DEFAULT_SHARED_SECRET,
};
use crate::registry::Registry;
use crate::store::{ArtifactStore, Snapshot, StoreError};
use crate::transform::{Bindings, ComponentQuery, TransformationComponent};
use crate::value::{Tick, Value};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactoryConfig {
    pub required_charge_pct: u8,
    /// Ticks a package may spend in shipping before it expires.
    pub shipping_budget: Tick,
    /// Top of the importance scale used for criticality terciles.
    pub importance_max: u64,
    #[serde(skip)]
    pub secret: Vec<u8>,
}

impl Default for FactoryConfig {
    fn default() -> Self {
        FactoryConfig {
            required_charge_pct: 20,
            shipping_budget: 50,
            importance_max: 9,
            secret: DEFAULT_SHARED_SECRET.to_vec(),
        }
    }
}

/// Row of the device registry: what the device is and what it is now.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInputs {
    pub description: DeviceDescription,
    pub state: DeviceState,
}

/// Row of the artifact store: schema plus the components resolved for each
/// post-condition, in commission order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactInputs {
    pub schema: OrganisationalFeatureModel,
    pub components: Vec<TransformationComponent>,
}

/// One field per input source: commission, device registry, plant
/// description and artifact store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoryInputs {
    pub commission: Commission,
    pub device: DeviceInputs,
    pub scenarios: Vec<BusinessScenario>,
    pub artifacts: ArtifactInputs,
}

impl FactoryInputs {
    pub fn device_id(&self) -> &str {
        &self.device.description.device_id
    }

    pub fn required(&self) -> &[PostCondition] {
        self.commission.required_for(self.device_id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatherError {
    #[error("gather-failed(stale): {device} last reported {age} ticks ago, threshold {threshold}")]
    Stale { device: String, age: Tick, threshold: Tick },
    #[error("gather-failed(no-transform): key={key}{}", .hint.as_ref().map(|h| format!(", nearest {h}")).unwrap_or_default())]
    NoTransform { key: String, hint: Option<String> },
    #[error("gather-failed(unknown): {0}")]
    Unknown(String),
}

impl GatherError {
    pub fn reason(&self) -> &'static str {
        match self {
            GatherError::Stale { .. } => "stale",
            GatherError::NoTransform { .. } => "no-transform",
            GatherError::Unknown(_) => "unknown",
        }
    }
}

pub fn gather_inputs(
    commission: &Commission,
    device_id: &str,
    now: Tick,
    registry: &Registry,
    artifacts: &ArtifactStore,
) -> Result<FactoryInputs, GatherError> {
    let entry = registry
        .entry(device_id)
        .ok_or_else(|| GatherError::Unknown(format!("device {device_id} is not registered")))?;
    let view = registry
        .get_state(device_id, now)
        .map_err(|e| GatherError::Unknown(e.to_string()))?;
    if !view.fresh {
        return Err(GatherError::Stale {
            device: device_id.to_string(),
            age: view.age,
            threshold: entry.staleness_threshold,
        });
    }
    let mut components = Vec::new();
    for pc in commission.required_for(device_id) {
        let q = ComponentQuery::for_post_condition(pc, &entry.description).map_err(GatherError::Unknown)?;
        match artifacts.resolve_component(&q) {
            Ok(c) => {
                if !components.contains(c) {
                    components.push(c.clone());
                }
            }
            Err(StoreError::NotFound { hint, .. }) => {
                return Err(GatherError::NoTransform {
                    key: q.to_string(),
                    hint,
                })
            }
            Err(e) => return Err(GatherError::Unknown(e.to_string())),
        }
    }
    let scenarios = registry
        .scenarios_for(device_id)
        .map_err(|e| GatherError::Unknown(e.to_string()))?
        .into_iter()
        .cloned()
        .collect();
    Ok(FactoryInputs {
        commission: commission.clone(),
        device: DeviceInputs {
            description: entry.description.clone(),
            state: view.state.clone(),
        },
        scenarios,
        artifacts: ArtifactInputs {
            schema: registry.ofm().clone(),
            components,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Mismatch {
    #[error("mismatch(domain): {path} = {value} outside {domain}")]
    Domain { path: String, value: Value, domain: String },
    #[error("mismatch(offline): {0} is offline")]
    Offline(String),
    #[error("mismatch(not-settable): {0}")]
    NotSettable(String),
    #[error("mismatch(invariant): {path} drifted from {expected} to {found}")]
    InvariantDrift { path: String, expected: Value, found: Value },
}

impl Mismatch {
    pub fn reason(&self) -> &'static str {
        match self {
            Mismatch::Domain { .. } => "domain",
            Mismatch::Offline(_) => "offline",
            Mismatch::NotSettable(_) => "not-settable",
            Mismatch::InvariantDrift { .. } => "invariant",
        }
    }

    /// Offline devices may come back; the others never pass.
    pub fn is_transient(&self) -> bool {
        matches!(self, Mismatch::Offline(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "note", content = "subject", rename_all = "kebab-case")]
pub enum PreconditionNote {
    /// The current state already satisfies this post-condition.
    NoOpCandidate(String),
}

impl fmt::Display for PreconditionNote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreconditionNote::NoOpCandidate(s) => write!(f, "no-op-candidate {s}"),
        }
    }
}

/// Checks every post-condition is achievable on this device now.
pub fn check_preconditions(inputs: &FactoryInputs) -> Result<Vec<PreconditionNote>, Mismatch> {
    let schema = &inputs.artifacts.schema;
    let state = &inputs.device.state;
    if !state.online {
        return Err(Mismatch::Offline(state.device_id.clone()));
    }
    for vp in schema.variation_points.iter().filter(|vp| vp.invariant) {
        if let (Some(expected), Some(found)) = (inputs.device.description.value(&vp.path), state.current_values.get(&vp.path)) {
            if expected != found {
                return Err(Mismatch::InvariantDrift {
                    path: vp.path.to_string(),
                    expected: expected.clone(),
                    found: found.clone(),
                });
            }
        }
    }
    let mut notes = Vec::new();
    for pc in inputs.required() {
        if let PostCondition::SetValue { path, value } = pc {
            let vp = schema.settable(path).map_err(|e| Mismatch::NotSettable(e.to_string()))?;
            if !vp.domain.contains(value) {
                return Err(Mismatch::Domain {
                    path: path.to_string(),
                    value: value.clone(),
                    domain: vp.domain.to_string(),
                });
            }
        }
        if pc.satisfied_by(state) {
            notes.push(PreconditionNote::NoOpCandidate(pc.to_string()));
        }
    }
    Ok(notes)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("build-failed(template): {0}")]
    Template(String),
    #[error("build-failed(store): {0}")]
    Store(String),
}

/// Criticality from the importance tercile on `[0, max]`.
pub fn criticality(importance: u64, max: u64) -> Criticality {
    let max = max.max(1);
    match importance.min(max) * 3 / (max + 1) {
        0 => Criticality::Low,
        1 => Criticality::Normal,
        _ => Criticality::Critical,
    }
}

pub fn package_id(commission_id: &str, device_id: &str, built_at: Tick) -> String {
    let digest = Sha256::digest(format!("{commission_id}|{device_id}|{built_at}").as_bytes());
    format!("pkg-{}", &hex::encode(digest)[..16])
}

fn verify_for(pc: &PostCondition) -> Instruction {
    match pc {
        PostCondition::SetValue { path, value } => Instruction::Verify {
            subject: VerifySubject::Path(path.clone()),
            expect: Expectation::Equals(value.clone()),
        },
        PostCondition::ProvideService { service, min_level } => Instruction::Verify {
            subject: VerifySubject::Service(service.clone()),
            expect: if *min_level == 0 {
                Expectation::Absent
            } else {
                Expectation::AtLeast(*min_level)
            },
        },
    }
}

/// Renders every post-condition through its component in commission order,
/// appends one verify per post-condition, attaches shipping metadata and a
/// pre-build snapshot reference, and seals the result.
///
/// Returns the package with the snapshot it references; storing both is the
/// caller's job.
pub fn build(
    inputs: &FactoryInputs,
    now: Tick,
    config: &FactoryConfig,
) -> Result<(ConfigurationPackage, Snapshot), BuildError> {
    let desc = &inputs.device.description;
    let state = &inputs.device.state;
    let schema = &inputs.artifacts.schema;
    let mut instructions = Vec::new();
    for pc in inputs.required() {
        let q = ComponentQuery::for_post_condition(pc, desc).map_err(BuildError::Template)?;
        let component = inputs
            .artifacts
            .components
            .iter()
            .find(|c| c.matches(&q))
            .ok_or_else(|| BuildError::Template(format!("no component for {q}")))?;
        let bindings = Bindings {
            post_condition: pc,
            description: desc,
            state,
        };
        let rendered = bindings
            .render(&component.template)
            .map_err(|e| BuildError::Template(format!("{}: {e}", component.name)))?;
        for insn in &rendered {
            if let Instruction::Set { path, value } = insn {
                let vp = schema
                    .settable(path)
                    .map_err(|e| BuildError::Template(format!("{}: {e}", component.name)))?;
                if !vp.domain.contains(value) {
                    return Err(BuildError::Template(format!(
                        "{}: rendered {path} = {value} outside {}",
                        component.name, vp.domain
                    )));
                }
            }
        }
        instructions.extend(rendered);
    }
    instructions.extend(inputs.required().iter().map(verify_for));

    let c = &inputs.commission;
    let crit = criticality(c.importance, config.importance_max);
    let snapshot = Snapshot::capture(state, now);
    let package = UnsealedPackage {
        package_id: package_id(&c.commission_id, &desc.device_id, now),
        commission_id: c.commission_id.clone(),
        device_id: desc.device_id.clone(),
        built_at: now,
        artifact: ConfigurationArtifact { instructions },
        metadata: ShippingMetadata {
            required_charge_pct: config.required_charge_pct.min(100),
            interrupt_allowed: crit == Criticality::Critical,
            criticality: crit,
            latest_shipping_time: c.window.latest.min(now.saturating_add(config.shipping_budget)),
        },
        pre_snapshot_ref: snapshot.snapshot_id.clone(),
    }
    .seal(&config.secret);
    Ok((package, snapshot))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::commission::fixtures::set_rate;
    use crate::model::description::fixtures::rpi_description;
    use crate::model::ofm::fixtures::plant_ofm;
    use crate::store::MemoryBackend;
    use crate::transform::fixtures::{rate_component, service_component};
    use crate::value::FieldPath;

    fn registry() -> Registry {
        let ofm = plant_ofm();
        let mut r = Registry::new(ofm.clone(), 30).unwrap();
        let desc = rpi_description();
        let state = DeviceState::from_description(&desc, &ofm, BTreeMap::new(), 0);
        r.register_device(desc, state, 0).unwrap();
        r
    }

    fn artifacts(with_components: bool) -> ArtifactStore {
        let mut a = ArtifactStore::open(Box::new(MemoryBackend::new())).unwrap();
        if with_components {
            a.put_component(rate_component()).unwrap();
            a.put_component(service_component()).unwrap();
        }
        a
    }

    const DEV: &str = "RPI3_B_ARM_01";

    fn rate_commission(rate: i64) -> Commission {
        set_rate("c1", &[DEV], rate)
    }

    fn rate_path() -> FieldPath {
        FieldPath::parse("sensing/temperature/polling_rate").unwrap()
    }

    #[test]
    fn gather_happy_path() {
        let inputs = gather_inputs(&rate_commission(10), DEV, 0, &registry(), &artifacts(true)).unwrap();
        assert_eq!(inputs.artifacts.components.len(), 1);
        assert_eq!(inputs.device.description.class_id, "rpi3");
    }

    #[test]
    fn gather_without_components_names_the_key() {
        let err = gather_inputs(&rate_commission(10), DEV, 0, &registry(), &artifacts(false)).unwrap_err();
        assert_eq!(err.reason(), "no-transform");
        assert_eq!(
            err.to_string(),
            "gather-failed(no-transform): key=(set-value capabilities/sensing/temperature/polling_rate, rpi3, linux 4.14)"
        );
    }

    #[test]
    fn gather_refuses_stale_state() {
        let err = gather_inputs(&rate_commission(10), DEV, 40, &registry(), &artifacts(true)).unwrap_err();
        assert_eq!(
            err,
            GatherError::Stale {
                device: DEV.into(),
                age: 40,
                threshold: 30
            }
        );
    }

    fn inputs_for(c: Commission) -> FactoryInputs {
        gather_inputs(&c, DEV, 0, &registry(), &artifacts(true)).unwrap()
    }

    fn cores(n: i64) -> Commission {
        let mut c = rate_commission(10);
        c.required = vec![PostCondition::SetValue {
            path: FieldPath::parse("computational/cores").unwrap(),
            value: Value::Int(n),
        }];
        c
    }

    #[test]
    fn precondition_domain_checks() {
        // the fixture has no cores component; pre-conditions do not need one
        let mut inputs = inputs_for(rate_commission(10));
        inputs.commission = cores(4);
        assert_eq!(
            check_preconditions(&inputs).unwrap(),
            vec![PreconditionNote::NoOpCandidate("set-value capabilities/computational/cores=4".into())]
        );
        inputs.commission = cores(8);
        assert_eq!(check_preconditions(&inputs).unwrap_err().reason(), "domain");
    }

    #[test]
    fn precondition_offline_and_noop() {
        let mut inputs = inputs_for(rate_commission(50));
        assert_eq!(check_preconditions(&inputs).unwrap().len(), 1);
        inputs.commission = rate_commission(10);
        assert!(check_preconditions(&inputs).unwrap().is_empty());
        inputs.device.state.online = false;
        assert!(check_preconditions(&inputs).unwrap_err().is_transient());
    }

    #[test]
    fn precondition_invariant_drift() {
        let mut inputs = inputs_for(rate_commission(10));
        inputs
            .device
            .state
            .current_values
            .insert(FieldPath::parse("power/supply").unwrap(), Value::Text("battery".into()));
        assert_eq!(check_preconditions(&inputs).unwrap_err().reason(), "invariant");
    }

    #[test]
    fn single_set_value_build() {
        let (pkg, snap) = build(&inputs_for(rate_commission(10)), 3, &FactoryConfig::default()).unwrap();
        let text: Vec<String> = pkg.artifact.instructions.iter().map(ToString::to_string).collect();
        assert_eq!(
            text,
            vec![
                "set capabilities/sensing/temperature/polling_rate 10",
                "verify capabilities/sensing/temperature/polling_rate = 10",
            ]
        );
        assert_eq!(pkg.pre_snapshot_ref, snap.snapshot_id);
        assert_eq!(snap.values[&rate_path()], Value::Int(50));
        assert_eq!(pkg.commission_id, "c1");
        pkg.verify_checksum().unwrap();
        assert_eq!(pkg.metadata.latest_shipping_time, 53);
    }

    #[test]
    fn two_post_conditions_keep_order() {
        let mut c = rate_commission(10);
        c.required.push(PostCondition::ProvideService {
            service: "temp-sensing".into(),
            min_level: 3,
        });
        let (pkg, _) = build(&inputs_for(c), 0, &FactoryConfig::default()).unwrap();
        let text: Vec<String> = pkg.artifact.instructions.iter().map(ToString::to_string).collect();
        assert_eq!(
            text,
            vec![
                "set capabilities/sensing/temperature/polling_rate 10",
                "exec service temp-sensing level 3",
                "verify capabilities/sensing/temperature/polling_rate = 10",
                "verify service:temp-sensing >= 3",
            ]
        );
    }

    #[test]
    fn build_is_deterministic_through_serialization() {
        let inputs = inputs_for(rate_commission(10));
        let doc = crate::doc::to_canonical_string(&inputs).unwrap();
        let back: FactoryInputs = serde_json::from_str(&doc).unwrap();
        let cfg = FactoryConfig::default();
        let (a, _) = build(&inputs, 7, &cfg).unwrap();
        let (b, _) = build(&back, 7, &cfg).unwrap();
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn unresolvable_placeholder_fails_build() {
        let mut inputs = inputs_for(rate_commission(10));
        inputs.artifacts.components[0].template = vec![crate::transform::InstructionTemplate::Exec {
            command: "reload {level}".into(),
        }];
        assert!(matches!(build(&inputs, 0, &FactoryConfig::default()), Err(BuildError::Template(_))));
    }

    #[test]
    fn metadata_derivation() {
        assert_eq!(criticality(0, 9), Criticality::Low);
        assert_eq!(criticality(3, 9), Criticality::Low);
        assert_eq!(criticality(4, 9), Criticality::Normal);
        assert_eq!(criticality(6, 9), Criticality::Normal);
        assert_eq!(criticality(7, 9), Criticality::Critical);
        assert_eq!(criticality(900, 9), Criticality::Critical);
        let mut c = rate_commission(10);
        c.importance = 9;
        c.window.latest = 20;
        let (pkg, _) = build(&inputs_for(c), 5, &FactoryConfig::default()).unwrap();
        assert_eq!(pkg.metadata.latest_shipping_time, 20);
        assert!(pkg.metadata.interrupt_allowed);
        assert_eq!(pkg.metadata.criticality, Criticality::Critical);
    }
}
