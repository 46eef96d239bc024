use serde::{Deserialize, Serialize};

use crate::model::{DeviceDescription, DeviceState, OrganisationalFeatureModel, PowerSupply};
use crate::package::{ConfigurationPackage, Expectation, Instruction, VerifySubject};
use crate::value::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerModel {
    pub idle_drain_pct_per_tick: u8,
    pub exec_drain_pct: u8,
    pub transfer_drain_pct: u8,
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel {
            idle_drain_pct_per_tick: 0,
            exec_drain_pct: 1,
            transfer_drain_pct: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub report_period: Tick,
    /// Drawn from the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_phase: Option<Tick>,
    /// Hash of the device id when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poll_phase: Option<Tick>,
    pub power: PowerModel,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            report_period: 5,
            report_phase: None,
            poll_phase: None,
            power: PowerModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultKind {
    Offline,
    DropMessage,
    ExecFail,
    /// Running its main task; only interrupt-allowed packages execute.
    Busy,
    Recharge { charge_pct: u8 },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::Offline => "offline",
            FaultKind::DropMessage => "drop-message",
            FaultKind::ExecFail => "exec-fail",
            FaultKind::Busy => "busy",
            FaultKind::Recharge { .. } => "recharge",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at: Tick,
    pub device: String,
    #[serde(default = "one")]
    pub duration: Tick,
    #[serde(flatten)]
    pub kind: FaultKind,
}

fn one() -> Tick {
    1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveFault {
    pub kind: FaultKind,
    pub from: Tick,
    pub until: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InboxItem {
    pub package: ConfigurationPackage,
    pub delivered_at: Tick,
    pub attempts: u32,
}

/// The device as it really is, ahead of what the registry last heard.
#[derive(Clone, Debug)]
pub struct SimDevice {
    pub description: DeviceDescription,
    pub state: DeviceState,
    pub agent: AgentConfig,
    pub report_phase: Tick,
    pub supply: PowerSupply,
    pub cores: u64,
    pub faults: Vec<ActiveFault>,
    pub inbox: Vec<InboxItem>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecResult {
    Success,
    Integrity(String),
    Injected,
    Apply(String),
    Verify(String),
}

impl ExecResult {
    pub fn reason(&self) -> &'static str {
        match self {
            ExecResult::Success => "success",
            ExecResult::Integrity(_) => "integrity",
            ExecResult::Injected => "injected",
            ExecResult::Apply(_) => "apply",
            ExecResult::Verify(_) => "verify",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            ExecResult::Success => "success".into(),
            ExecResult::Injected => "failure(injected)".into(),
            ExecResult::Integrity(d) => format!("failure(integrity): {d}"),
            ExecResult::Apply(d) => format!("failure(apply): {d}"),
            ExecResult::Verify(d) => format!("failure(verify): {d}"),
        }
    }
}

impl SimDevice {
    pub fn new(description: DeviceDescription, state: DeviceState, agent: AgentConfig, report_phase: Tick) -> Self {
        let (supply, cores) = match description.features() {
            Ok(f) => (f.power.supply, u64::from(f.computational.cores)),
            Err(_) => (PowerSupply::Battery, 1),
        };
        SimDevice {
            description,
            state,
            agent,
            report_phase,
            supply,
            cores,
            faults: Vec::new(),
            inbox: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.description.device_id
    }

    pub fn has_fault(&self, name: &str, now: Tick) -> bool {
        self.faults
            .iter()
            .any(|f| f.kind.name() == name && f.from <= now && now < f.until)
    }

    pub fn online(&self, now: Tick) -> bool {
        !self.has_fault("offline", now)
    }

    pub fn drains(&self) -> bool {
        self.supply != PowerSupply::Mains
    }

    pub fn drain(&mut self, pct: u8) {
        if self.drains() {
            self.state.charge_pct = self.state.charge_pct.saturating_sub(pct);
        }
    }

    pub fn recharge(&mut self, to_pct: u8) {
        self.state.charge_pct = self.state.charge_pct.max(to_pct.min(100));
    }

    pub fn report_due(&self, now: Tick) -> bool {
        let period = self.agent.report_period.max(1);
        now % period == self.report_phase % period
    }

    /// Runs a package against this device. Instructions apply to a copy of
    /// the state, which replaces the real one only if every verify passes.
    pub fn execute_package(
        &mut self,
        pkg: &ConfigurationPackage,
        secret: &[u8],
        ofm: &OrganisationalFeatureModel,
        now: Tick,
    ) -> ExecResult {
        if let Err(e) = pkg.verify_checksum().and_then(|_| pkg.verify_mac(secret)) {
            return ExecResult::Integrity(e.to_string());
        }
        if pkg.device_id != self.id() {
            return ExecResult::Integrity(format!("package addressed to {}", pkg.device_id));
        }
        if self.has_fault("exec-fail", now) {
            return ExecResult::Injected;
        }
        self.drain(self.agent.power.exec_drain_pct);
        let mut next = self.state.clone();
        for insn in &pkg.artifact.instructions {
            match insn {
                Instruction::Set { path, value } => {
                    match ofm.settable(path) {
                        Ok(vp) if vp.domain.contains(value) => {}
                        Ok(vp) => return ExecResult::Apply(format!("{path} = {value} outside {}", vp.domain)),
                        Err(e) => return ExecResult::Apply(e.to_string()),
                    }
                    next.current_values.insert(path.clone(), value.clone());
                }
                Instruction::Exec { command } => run_command(&mut next, command),
                Instruction::Verify { subject, expect } => {
                    if let Err(msg) = verify(&next, subject, expect) {
                        return ExecResult::Verify(msg);
                    }
                }
            }
        }
        next.charge_pct = self.state.charge_pct;
        self.state = next;
        ExecResult::Success
    }
}

/// Agent command vocabulary: `service <name> level <n>` sets a service level;
/// anything else is accepted and has no effect on tracked state.
fn run_command(state: &mut DeviceState, command: &str) {
    let words: Vec<&str> = command.split_whitespace().collect();
    if let ["service", name, "level", n] = words.as_slice() {
        if let Ok(level) = n.parse::<u8>() {
            state.set_service_level(name, level);
        }
    }
}

fn verify(state: &DeviceState, subject: &VerifySubject, expect: &Expectation) -> Result<(), String> {
    let ok = match (subject, expect) {
        (VerifySubject::Path(p), Expectation::Equals(v)) => state.current_values.get(p) == Some(v),
        (VerifySubject::Path(p), Expectation::Absent) => !state.current_values.contains_key(p),
        (VerifySubject::Path(_), Expectation::AtLeast(_)) => false,
        (VerifySubject::Service(s), Expectation::AtLeast(l)) => state.service_level(s) >= *l,
        (VerifySubject::Service(s), Expectation::Absent) => state.service_level(s) == 0,
        (VerifySubject::Service(s), Expectation::Equals(v)) => v.as_int() == Some(i64::from(state.service_level(s))),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{subject} expected {expect}"))
    }
}
