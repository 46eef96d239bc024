//! Rollout planning and execution under pull, push and peer seeding.
//!
//! Any device that holds the rollout can serve any other pending device in
//! it: the transfer unit is the rollout bundle, and each receiver gets its
//! own package from that bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::commission::{CommissionBook, DeviceOutcome, Transition};
use crate::model::PowerSupply;
use crate::package::ConfigurationPackage;
use crate::phase::Phase;
use crate::value::Tick;

/// Sender name of the configuration broker in transfer logs.
pub const ORIGIN: &str = "origin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    Pull {
        poll_period: Tick,
    },
    Push {
        origin_fanout: u32,
    },
    Seed {
        origin_fanout: u32,
        seeder_fanout: u32,
        min_seed_charge_pct: u8,
        min_seed_cores: u64,
    },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Pull { .. } => "pull",
            Strategy::Push { .. } => "push",
            Strategy::Seed { .. } => "seed",
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let ok = match *self {
            Strategy::Pull { poll_period } => poll_period >= 1,
            Strategy::Push { origin_fanout } => origin_fanout >= 1,
            Strategy::Seed {
                origin_fanout,
                seeder_fanout,
                min_seed_charge_pct,
                ..
            } => origin_fanout >= 1 && seeder_fanout >= 1 && min_seed_charge_pct <= 100,
        };
        if ok {
            Ok(())
        } else {
            Err(PlanError::BadStrategy(format!("{self:?}")))
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Live facts about devices the rollout engine needs.
pub trait FleetView {
    fn knows(&self, device: &str) -> bool;
    fn online(&self, device: &str) -> bool;
    fn charge_pct(&self, device: &str) -> u8;
    fn supply(&self, device: &str) -> PowerSupply;
    fn cores(&self, device: &str) -> u64;
    /// True while the device's inbound messages are being lost.
    fn drops_messages(&self, _device: &str) -> bool {
        false
    }
    fn poll_phase(&self, device: &str, period: Tick) -> Tick {
        default_poll_phase(device, period)
    }
}

/// Deterministic poll offset: hash of the device id modulo the period.
pub fn default_poll_phase(device: &str, period: Tick) -> Tick {
    let digest = Sha256::digest(device.as_bytes());
    let head = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    head % period.max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeliveryStatus {
    Pending,
    Deferred,
    /// Sent this tick but lost on the way; back to pending next tick.
    InTransit,
    Delivered,
    Executed,
    Failed,
    Expired,
}

impl DeliveryStatus {
    pub fn awaiting_transfer(self) -> bool {
        matches!(self, DeliveryStatus::Pending | DeliveryStatus::Deferred | DeliveryStatus::InTransit)
    }

    pub fn holds_package(self) -> bool {
        matches!(self, DeliveryStatus::Delivered | DeliveryStatus::Executed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub device_id: String,
    pub package_id: String,
    pub commission_id: String,
    pub bytes: u64,
    pub required_charge_pct: u8,
    pub latest_shipping_time: Tick,
    pub status: DeliveryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_at: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_at: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub tick: Tick,
    pub sender: String,
    pub receiver: String,
    pub package_id: String,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub lost: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionPlan {
    pub rollout_id: String,
    pub strategy: Strategy,
    pub created_at: Tick,
    pub assignments: BTreeMap<String, Assignment>,
    pub transfers: Vec<Transfer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "detail", rename_all = "kebab-case")]
pub enum ReceiptResult {
    Success,
    Failure(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub device_id: String,
    pub package_id: String,
    pub delivered_at: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_at: Option<Tick>,
    pub result: ReceiptResult,
}

/// What happened to one device during an [`advance`](TransmissionPlan::advance).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum ShippingEvent {
    Delivered { device: String, package: String, sender: String },
    Lost { device: String, package: String, sender: String },
    Deferred { device: String, charge_pct: u8, required_pct: u8 },
    Resumed { device: String },
    Expired { device: String, package: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {0} assigned more than one package in one rollout")]
    DuplicateDevice(String),
    #[error("invalid strategy {0}")]
    BadStrategy(String),
}

pub fn seed_eligible(fleet: &dyn FleetView, device: &str, strategy: &Strategy) -> bool {
    match *strategy {
        Strategy::Seed {
            min_seed_charge_pct,
            min_seed_cores,
            ..
        } => {
            fleet.online(device)
                && (fleet.supply(device) == PowerSupply::Mains || fleet.charge_pct(device) >= min_seed_charge_pct)
                && fleet.cores(device) >= min_seed_cores
        }
        _ => false,
    }
}

impl TransmissionPlan {
    /// Builds the assignment map. Devices past their package's latest
    /// shipping time start expired; devices short of the required charge
    /// start deferred.
    pub fn plan(
        rollout_id: impl Into<String>,
        packages: &[ConfigurationPackage],
        strategy: Strategy,
        now: Tick,
        fleet: &dyn FleetView,
    ) -> Result<TransmissionPlan, PlanError> {
        strategy.validate()?;
        let mut assignments = BTreeMap::new();
        for pkg in packages {
            if !fleet.knows(&pkg.device_id) {
                return Err(PlanError::UnknownDevice(pkg.device_id.clone()));
            }
            let mut a = Assignment {
                device_id: pkg.device_id.clone(),
                package_id: pkg.package_id.clone(),
                commission_id: pkg.commission_id.clone(),
                bytes: pkg.encode().len() as u64,
                required_charge_pct: pkg.metadata.required_charge_pct,
                latest_shipping_time: pkg.metadata.latest_shipping_time,
                status: DeliveryStatus::Pending,
                delivered_at: None,
                executed_at: None,
                detail: None,
            };
            a.status = if now > a.latest_shipping_time {
                DeliveryStatus::Expired
            } else if fleet.charge_pct(&a.device_id) < a.required_charge_pct {
                DeliveryStatus::Deferred
            } else {
                DeliveryStatus::Pending
            };
            if assignments.insert(pkg.device_id.clone(), a).is_some() {
                return Err(PlanError::DuplicateDevice(pkg.device_id.clone()));
            }
        }
        Ok(TransmissionPlan {
            rollout_id: rollout_id.into(),
            strategy,
            created_at: now,
            assignments,
            transfers: Vec::new(),
        })
    }

    /// Devices currently able to seed: hold the package from an earlier tick
    /// and meet the power/compute bar.
    pub fn seeders(&self, fleet: &dyn FleetView, now: Tick) -> BTreeSet<String> {
        self.assignments
            .values()
            .filter(|a| a.status.holds_package() && a.delivered_at.is_some_and(|t| t < now))
            .filter(|a| seed_eligible(fleet, &a.device_id, &self.strategy))
            .map(|a| a.device_id.clone())
            .collect()
    }

    /// One tick of shipping.
    pub fn advance(&mut self, now: Tick, fleet: &dyn FleetView) -> Vec<ShippingEvent> {
        let mut events = Vec::new();
        for a in self.assignments.values_mut() {
            if !a.status.awaiting_transfer() {
                continue;
            }
            if now > a.latest_shipping_time {
                a.status = DeliveryStatus::Expired;
                events.push(ShippingEvent::Expired {
                    device: a.device_id.clone(),
                    package: a.package_id.clone(),
                });
                continue;
            }
            let charge = fleet.charge_pct(&a.device_id);
            let short = charge < a.required_charge_pct;
            match (a.status, short) {
                (DeliveryStatus::Deferred, false) => {
                    a.status = DeliveryStatus::Pending;
                    events.push(ShippingEvent::Resumed {
                        device: a.device_id.clone(),
                    });
                }
                (DeliveryStatus::Pending | DeliveryStatus::InTransit, true) => {
                    a.status = DeliveryStatus::Deferred;
                    events.push(ShippingEvent::Deferred {
                        device: a.device_id.clone(),
                        charge_pct: charge,
                        required_pct: a.required_charge_pct,
                    });
                }
                (DeliveryStatus::InTransit, false) => a.status = DeliveryStatus::Pending,
                _ => {}
            }
        }

        let ready: Vec<String> = self
            .assignments
            .values()
            .filter(|a| a.status == DeliveryStatus::Pending && fleet.online(&a.device_id))
            .map(|a| a.device_id.clone())
            .collect();

        let mut sends: Vec<(String, String)> = Vec::new();
        match self.strategy {
            Strategy::Pull { poll_period } => {
                for d in ready {
                    if now % poll_period == fleet.poll_phase(&d, poll_period) % poll_period {
                        sends.push((ORIGIN.to_string(), d));
                    }
                }
            }
            Strategy::Push { origin_fanout } => {
                for d in ready.into_iter().take(origin_fanout as usize) {
                    sends.push((ORIGIN.to_string(), d));
                }
            }
            Strategy::Seed {
                origin_fanout,
                seeder_fanout,
                ..
            } => {
                let mut senders: Vec<(String, usize)> = vec![(ORIGIN.to_string(), origin_fanout as usize)];
                senders.extend(self.seeders(fleet, now).into_iter().map(|s| (s, seeder_fanout as usize)));
                let mut receivers = ready.into_iter();
                'outer: for (sender, cap) in senders {
                    for _ in 0..cap {
                        match receivers.next() {
                            Some(d) => sends.push((sender.clone(), d)),
                            None => break 'outer,
                        }
                    }
                }
            }
        }

        for (sender, receiver) in sends {
            let lost = fleet.drops_messages(&receiver);
            let a = self.assignments.get_mut(&receiver).expect("receiver is assigned");
            self.transfers.push(Transfer {
                tick: now,
                sender: sender.clone(),
                receiver: receiver.clone(),
                package_id: a.package_id.clone(),
                bytes: a.bytes,
                lost,
            });
            if lost {
                a.status = DeliveryStatus::InTransit;
                events.push(ShippingEvent::Lost {
                    device: receiver,
                    package: a.package_id.clone(),
                    sender,
                });
            } else {
                a.status = DeliveryStatus::Delivered;
                a.delivered_at = Some(now);
                events.push(ShippingEvent::Delivered {
                    device: receiver,
                    package: a.package_id.clone(),
                    sender,
                });
            }
        }
        events
    }

    /// Packages delivered before `now` and not yet executed, by device id.
    pub fn awaiting_execution(&self, now: Tick) -> Vec<&Assignment> {
        self.assignments
            .values()
            .filter(|a| a.status == DeliveryStatus::Delivered && a.delivered_at.is_some_and(|t| t < now))
            .collect()
    }

    /// No device still waiting for a transfer or an execution.
    pub fn is_settled(&self) -> bool {
        self.assignments
            .values()
            .all(|a| matches!(a.status, DeliveryStatus::Executed | DeliveryStatus::Failed | DeliveryStatus::Expired))
    }

    /// No device still waiting for a transfer.
    pub fn is_shipped(&self) -> bool {
        self.assignments.values().all(|a| !a.status.awaiting_transfer())
    }

    pub fn delivered_count(&self) -> usize {
        self.assignments.values().filter(|a| a.delivered_at.is_some()).count()
    }

    pub fn successful_transfers(&self) -> usize {
        self.transfers.iter().filter(|t| !t.lost).count()
    }

    pub fn origin_transfers_at(&self, tick: Tick) -> usize {
        self.transfers.iter().filter(|t| t.tick == tick && t.sender == ORIGIN).count()
    }

    /// Last tick at which a package was delivered.
    pub fn completion_tick(&self) -> Option<Tick> {
        if !self.is_shipped() {
            return None;
        }
        self.assignments.values().filter_map(|a| a.delivered_at).max()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompleteError {
    #[error("receipt for unknown package {0}")]
    UnknownPackage(String),
}

/// All rollouts of a run and the package → rollout index used to route
/// receipts back to commissions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Rollouts {
    plans: BTreeMap<String, TransmissionPlan>,
    by_package: BTreeMap<String, String>,
}

impl Rollouts {
    pub fn insert(&mut self, plan: TransmissionPlan) {
        for a in plan.assignments.values() {
            self.by_package.insert(a.package_id.clone(), plan.rollout_id.clone());
        }
        self.plans.insert(plan.rollout_id.clone(), plan);
    }

    pub fn get(&self, rollout_id: &str) -> Option<&TransmissionPlan> {
        self.plans.get(rollout_id)
    }

    pub fn plans(&self) -> impl Iterator<Item = &TransmissionPlan> {
        self.plans.values()
    }

    pub fn plans_mut(&mut self) -> impl Iterator<Item = &mut TransmissionPlan> {
        self.plans.values_mut()
    }

    pub fn assignment(&self, package_id: &str) -> Option<&Assignment> {
        let plan = self.plans.get(self.by_package.get(package_id)?)?;
        plan.assignments.values().find(|a| a.package_id == package_id)
    }

    fn assignment_mut(&mut self, package_id: &str) -> Option<&mut Assignment> {
        let plan = self.plans.get_mut(self.by_package.get(package_id)?)?;
        plan.assignments.values_mut().find(|a| a.package_id == package_id)
    }

    /// Applies a receipt to its assignment and settles the device's outcome
    /// on the commission. A repeated receipt changes nothing.
    pub fn complete(
        &mut self,
        book: &mut CommissionBook,
        receipt: &DeliveryReceipt,
        now: Tick,
    ) -> Result<Option<Transition>, CompleteError> {
        let a = self
            .assignment_mut(&receipt.package_id)
            .ok_or_else(|| CompleteError::UnknownPackage(receipt.package_id.clone()))?;
        if a.device_id != receipt.device_id {
            return Err(CompleteError::UnknownPackage(receipt.package_id.clone()));
        }
        if !matches!(a.status, DeliveryStatus::Delivered) {
            return Ok(None);
        }
        let outcome = match &receipt.result {
            ReceiptResult::Success => {
                a.status = DeliveryStatus::Executed;
                a.executed_at = receipt.executed_at.or(Some(now));
                DeviceOutcome::Succeeded { at: now }
            }
            ReceiptResult::Failure(detail) => {
                a.status = DeliveryStatus::Failed;
                a.detail = Some(detail.clone());
                DeviceOutcome::Failed { detail: detail.clone() }
            }
        };
        let commission = a.commission_id.clone();
        let device = a.device_id.clone();
        Ok(book
            .settle(&commission, &device, outcome, now, Phase::Execution)
            .unwrap_or(None))
    }

    /// Per-tick transfer counts and per-node byte totals as CSV.
    pub fn metrics_csv(&self) -> String {
        let mut per_tick: BTreeMap<Tick, (u64, u64, u64)> = BTreeMap::new();
        let mut per_node: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for t in self.plans.values().flat_map(|p| &p.transfers) {
            let row = per_tick.entry(t.tick).or_default();
            row.0 += 1;
            if t.sender == ORIGIN {
                row.1 += 1;
            }
            row.2 += t.bytes;
            per_node.entry(t.sender.clone()).or_default().0 += t.bytes;
            if !t.lost {
                per_node.entry(t.receiver.clone()).or_default().1 += t.bytes;
            }
        }
        let mut out = String::from("kind,tick,node,transfers,origin_transfers,bytes_sent,bytes_received\n");
        for (tick, (n, origin, bytes)) in per_tick {
            out.push_str(&format!("tick,{tick},,{n},{origin},{bytes},\n"));
        }
        for (node, (sent, received)) in per_node {
            out.push_str(&format!("node,,{node},,,{sent},{received}\n"));
        }
        out
    }
}

/// In-memory fleet facts, for planning outside a simulation.
#[derive(Clone, Debug, Default)]
pub struct StaticFleet {
    pub devices: BTreeMap<String, FleetFacts>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FleetFacts {
    pub online: bool,
    pub charge_pct: u8,
    pub supply: PowerSupply,
    pub cores: u64,
    pub poll_phase: Option<Tick>,
}

impl Default for FleetFacts {
    fn default() -> Self {
        FleetFacts {
            online: true,
            charge_pct: 100,
            supply: PowerSupply::Mains,
            cores: 4,
            poll_phase: None,
        }
    }
}

impl FleetView for StaticFleet {
    fn knows(&self, device: &str) -> bool {
        self.devices.contains_key(device)
    }
    fn online(&self, device: &str) -> bool {
        self.devices.get(device).is_some_and(|f| f.online)
    }
    fn charge_pct(&self, device: &str) -> u8 {
        self.devices.get(device).map_or(0, |f| f.charge_pct)
    }
    fn supply(&self, device: &str) -> PowerSupply {
        self.devices.get(device).map_or(PowerSupply::Battery, |f| f.supply)
    }
    fn cores(&self, device: &str) -> u64 {
        self.devices.get(device).map_or(0, |f| f.cores)
    }
    fn poll_phase(&self, device: &str, period: Tick) -> Tick {
        match self.devices.get(device).and_then(|f| f.poll_phase) {
            Some(p) => p % period.max(1),
            None => default_poll_phase(device, period),
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::package::{
        ConfigurationArtifact, Criticality, ShippingMetadata, UnsealedPackage, DEFAULT_SHARED_SECRET,
    };

    pub fn package_for(device: &str, required: u8, latest: Tick) -> ConfigurationPackage {
        UnsealedPackage {
            package_id: format!("pkg-{device}"),
            commission_id: "c1".into(),
            device_id: device.into(),
            built_at: 0,
            artifact: ConfigurationArtifact::default(),
            metadata: ShippingMetadata {
                required_charge_pct: required,
                interrupt_allowed: false,
                criticality: Criticality::Normal,
                latest_shipping_time: latest,
            },
            pre_snapshot_ref: "snap".into(),
        }
        .seal(DEFAULT_SHARED_SECRET)
    }

    pub fn fleet(n: usize) -> (StaticFleet, Vec<ConfigurationPackage>) {
        let mut f = StaticFleet::default();
        let mut pkgs = Vec::new();
        for i in 0..n {
            let id = format!("d{i:02}");
            f.devices.insert(id.clone(), FleetFacts::default());
            pkgs.push(package_for(&id, 0, 1000));
        }
        (f, pkgs)
    }
}
