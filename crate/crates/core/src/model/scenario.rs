use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::constraint::Constraint;

/// A group of devices jointly serving one sub-goal, with boundary constraints
/// that must hold at all times.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusinessScenario {
    pub scenario_id: String,
    pub member_devices: BTreeSet<String>,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl BusinessScenario {
    pub fn contains(&self, device_id: &str) -> bool {
        self.member_devices.contains(device_id)
    }

    /// Stable label for a constraint, used in deny reasons: `S1/c0`.
    pub fn constraint_label(&self, index: usize) -> String {
        format!("{}/c{index}", self.scenario_id)
    }
}
