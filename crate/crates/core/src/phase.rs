//! The fixed phase order inside one simulation tick.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Phases run in declaration order; the ordinal is what the event log and
/// commission transition logs record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Faults,
    Renewal,
    Intake,
    Dispatch,
    Rollout,
    Execution,
    Reports,
    Reverts,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Faults,
        Phase::Renewal,
        Phase::Intake,
        Phase::Dispatch,
        Phase::Rollout,
        Phase::Execution,
        Phase::Reports,
        Phase::Reverts,
    ];

    /// 1-based position within the tick.
    pub fn ordinal(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Faults => "faults",
            Phase::Renewal => "renewal",
            Phase::Intake => "intake",
            Phase::Dispatch => "dispatch",
            Phase::Rollout => "rollout",
            Phase::Execution => "execution",
            Phase::Reports => "reports",
            Phase::Reverts => "reverts",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordinals_follow_declaration_order() {
        let ords: Vec<u8> = Phase::ALL.iter().map(|p| p.ordinal()).collect();
        assert_eq!(ords, (1..=8).collect::<Vec<_>>());
        assert!(Phase::Intake < Phase::Dispatch);
    }
}
