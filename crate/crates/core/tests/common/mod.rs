#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confab_core::commission::{Commission, PostCondition, Window};
use confab_core::model::{BusinessScenario, DeviceDescription, FeatureTree, OrganisationalFeatureModel};
use confab_core::registry::{FleetBootstrap, FleetDevice, OfmRef};
use confab_core::shipping::Strategy;
use confab_core::sim::run::Agents;
use confab_core::sim::{AgentConfig, ComponentsRef, FleetRef, RunFile, ScheduledCommission, Settings, World};
use confab_core::transform::TransformationComponent;
use confab_core::{FieldPath, Tick, Value};

pub const RATE: &str = "capabilities/sensing/temperature/polling_rate";
pub const SERVICE: &str = "temp-sensing";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn load<T: serde::de::DeserializeOwned>(name: &str) -> T {
    let text = std::fs::read_to_string(fixtures().join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn ofm() -> OrganisationalFeatureModel {
    load("ofm.json")
}

pub fn components() -> Vec<TransformationComponent> {
    vec![load("components/polling-rate.json"), load("components/temp-service.json")]
}

/// An rpi3 description; `battery` switches the power group to a battery at
/// that charge.
pub fn description(id: &str, battery: Option<u8>) -> DeviceDescription {
    let mut tree: FeatureTree = load("rpi3-tree.json");
    if let Some(charge) = battery {
        let power = serde_json::json!({"supply": "battery", "capacity_mwh": 5000, "charge_pct": charge});
        tree.insert("power".into(), serde_json::from_value(power).unwrap());
    }
    DeviceDescription {
        device_id: id.into(),
        class_id: "rpi3".into(),
        capabilities: tree,
    }
}

pub fn device_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i:02}")).collect()
}

pub fn fleet(ids: &[String], scenarios: Vec<BusinessScenario>) -> FleetBootstrap {
    FleetBootstrap {
        ofm: OfmRef::Inline(ofm()),
        devices: ids
            .iter()
            .map(|id| FleetDevice {
                description: description(id, None),
                initial_state: None,
                services: BTreeMap::new(),
            })
            .collect(),
        scenarios,
    }
}

pub fn run_file(fleet: FleetBootstrap, strategy: Strategy) -> RunFile {
    RunFile {
        fleet: FleetRef::Inline(fleet),
        components: ComponentsRef::Inline(components()),
        commissions: Vec::new(),
        faults: Vec::new(),
        strategy,
        policy: Default::default(),
        seed: 7,
        agents: Agents {
            defaults: AgentConfig {
                report_period: 5,
                report_phase: Some(0),
                ..AgentConfig::default()
            },
            devices: BTreeMap::new(),
        },
        settings: Settings::default(),
        rules: Vec::new(),
        random_faults: None,
    }
}

pub fn commission(id: &str, targets: &[String], required: Vec<PostCondition>) -> Commission {
    Commission {
        commission_id: id.into(),
        source: "ops".into(),
        importance: 5,
        window: Window { earliest: 0, latest: 100 },
        revert_at: None,
        targets: targets.iter().cloned().collect(),
        required,
        submitted_at: 0,
        revert_of: None,
        overrides: BTreeMap::new(),
    }
}

pub fn set_rate(rate: i64) -> PostCondition {
    PostCondition::SetValue {
        path: FieldPath::parse(RATE).unwrap(),
        value: Value::Int(rate),
    }
}

pub fn provide(level: u8) -> PostCondition {
    PostCondition::ProvideService {
        service: SERVICE.into(),
        min_level: level,
    }
}

pub fn at(tick: Tick, commission: Commission) -> ScheduledCommission {
    ScheduledCommission { at: tick, commission }
}

pub fn statuses(w: &World, id: &str) -> Vec<&'static str> {
    w.book().get(id).unwrap().log.iter().map(|t| t.status.name()).collect()
}

pub fn confab() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_confab"))
}
