//! Discrete-time fleet simulation driving the whole pipeline: intake,
//! scheduling, factory builds, rollouts, agent execution and reports.
//!
//! Each tick runs the phases of [`Phase`] in order and appends one
//! [`Event`] per action. All randomness comes from the run seed.

pub mod device;
pub mod event;
pub mod run;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use device::{AgentConfig, ExecResult, FaultKind, FaultSpec, PowerModel, SimDevice};
pub use event::{write_ndjson, Event};
pub use run::{ComponentsRef, FleetRef, InternalRule, RunFile, ScheduledCommission, Settings};

use crate::commission::{Commission, CommissionBook, CommissionStatus, DeviceOutcome, PostCondition, Transition};
use crate::factory::{build, check_preconditions, gather_inputs, FactoryInputs, GatherError};
use crate::model::PowerSupply;
use crate::phase::Phase;
use crate::registry::{FleetError, Registry};
use crate::scheduler::{safety_gate, GateDecision, Scheduler};
use crate::shipping::{
    default_poll_phase, DeliveryReceipt, FleetView, ReceiptResult, Rollouts, ShippingEvent, Strategy,
    TransmissionPlan, ORIGIN,
};
use crate::store::{ArtifactStore, Backend, ConfigurationStore, MemoryBackend, StoreError};
use crate::value::Tick;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("fleet: {0}")]
    Fleet(#[from] FleetError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("run file references unresolved {0}")]
    Unresolved(&'static str),
    #[error("invalid run file: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
struct Lock {
    commission: String,
    required: Vec<PostCondition>,
    /// The device's outcome is final; released at its next report.
    settled: bool,
}

#[derive(Clone, Debug)]
struct PendingBuild {
    commission: String,
    device: String,
    inputs: FactoryInputs,
}

struct SimFleet<'a> {
    devices: &'a BTreeMap<String, SimDevice>,
    now: Tick,
}

impl FleetView for SimFleet<'_> {
    fn knows(&self, device: &str) -> bool {
        self.devices.contains_key(device)
    }
    fn online(&self, device: &str) -> bool {
        self.devices.get(device).is_some_and(|d| d.online(self.now))
    }
    fn charge_pct(&self, device: &str) -> u8 {
        self.devices.get(device).map_or(0, |d| d.state.charge_pct)
    }
    fn supply(&self, device: &str) -> PowerSupply {
        self.devices.get(device).map_or(PowerSupply::Battery, |d| d.supply)
    }
    fn cores(&self, device: &str) -> u64 {
        self.devices.get(device).map_or(0, |d| d.cores)
    }
    fn drops_messages(&self, device: &str) -> bool {
        self.devices.get(device).is_some_and(|d| d.has_fault("drop-message", self.now))
    }
    fn poll_phase(&self, device: &str, period: Tick) -> Tick {
        match self.devices.get(device).and_then(|d| d.agent.poll_phase) {
            Some(p) => p % period.max(1),
            None => default_poll_phase(device, period),
        }
    }
}

pub struct World {
    now: Tick,
    rng: ChaCha8Rng,
    registry: Registry,
    book: CommissionBook,
    scheduler: Scheduler,
    artifacts: ArtifactStore,
    configs: ConfigurationStore,
    rollouts: Rollouts,
    devices: BTreeMap<String, SimDevice>,
    strategy: Strategy,
    settings: Settings,
    schedule: BTreeMap<Tick, Vec<Commission>>,
    fault_schedule: BTreeMap<Tick, Vec<FaultSpec>>,
    random_faults: Option<run::RandomFaults>,
    rules: Vec<InternalRule>,
    rule_state: BTreeMap<(String, String), bool>,
    pending_intake: Vec<Commission>,
    pending_builds: Vec<PendingBuild>,
    locks: BTreeMap<String, Lock>,
    blocked: BTreeMap<(String, String), String>,
    events: Vec<Event>,
    halted: Option<String>,
}

impl World {
    /// In-memory stores. The run file must already be resolved.
    pub fn new(run: RunFile) -> Result<World, WorldError> {
        World::with_backends(run, Box::new(MemoryBackend::new()), Box::new(MemoryBackend::new()))
    }

    pub fn with_backends(
        run: RunFile,
        artifact_backend: Box<dyn Backend>,
        config_backend: Box<dyn Backend>,
    ) -> Result<World, WorldError> {
        run.strategy.validate().map_err(|e| WorldError::Invalid(e.to_string()))?;
        let fleet = match run.fleet {
            FleetRef::Inline(f) => f,
            FleetRef::Path(_) => return Err(WorldError::Unresolved("fleet path")),
        };
        let components = match run.components {
            ComponentsRef::Inline(c) => c,
            ComponentsRef::Dir(_) => return Err(WorldError::Unresolved("components directory")),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let registry = fleet.into_registry(run.settings.staleness_threshold, 0)?;
        let mut artifacts = ArtifactStore::open(artifact_backend)?;
        artifacts.put_schema(registry.ofm())?;
        for c in components {
            artifacts.put_component(c)?;
        }
        let configs = ConfigurationStore::open(config_backend, run.settings.package_capacity)?;

        let mut devices = BTreeMap::new();
        for id in registry.device_ids() {
            let entry = registry.entry(id).expect("listed device");
            let agent = run.agents.for_device(id);
            if agent.report_period == 0 {
                return Err(WorldError::Invalid(format!("report_period of {id} must be positive")));
            }
            let phase = match agent.report_phase {
                Some(p) => p,
                None => rng.gen_range(0..agent.report_period),
            };
            devices.insert(
                id.to_string(),
                SimDevice::new(entry.description.clone(), entry.state.clone(), agent, phase),
            );
        }
        let mut schedule: BTreeMap<Tick, Vec<Commission>> = BTreeMap::new();
        for s in run.commissions {
            schedule.entry(s.at).or_default().push(s.commission);
        }
        let mut fault_schedule: BTreeMap<Tick, Vec<FaultSpec>> = BTreeMap::new();
        for f in run.faults {
            fault_schedule.entry(f.at).or_default().push(f);
        }
        Ok(World {
            now: 0,
            rng,
            registry,
            book: CommissionBook::new(),
            scheduler: Scheduler::new(run.policy),
            artifacts,
            configs,
            rollouts: Rollouts::default(),
            devices,
            strategy: run.strategy,
            settings: run.settings,
            schedule,
            fault_schedule,
            random_faults: run.random_faults,
            rules: run.rules,
            rule_state: BTreeMap::new(),
            pending_intake: Vec::new(),
            pending_builds: Vec::new(),
            locks: BTreeMap::new(),
            blocked: BTreeMap::new(),
            events: Vec::new(),
            halted: None,
        })
    }

    pub fn now(&self) -> Tick {
        self.now
    }
    pub fn events(&self) -> &[Event] {
        &self.events
    }
    pub fn book(&self) -> &CommissionBook {
        &self.book
    }
    pub fn registry(&self) -> &Registry {
        &self.registry
    }
    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }
    pub fn rollouts(&self) -> &Rollouts {
        &self.rollouts
    }
    pub fn configs(&self) -> &ConfigurationStore {
        &self.configs
    }
    pub fn artifacts(&self) -> &ArtifactStore {
        &self.artifacts
    }
    pub fn devices(&self) -> &BTreeMap<String, SimDevice> {
        &self.devices
    }
    pub fn device_mut(&mut self, id: &str) -> Option<&mut SimDevice> {
        self.devices.get_mut(id)
    }
    /// Diagnostic of the safety violation that stopped the run, if any.
    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    /// Queues a commission for the next intake phase.
    pub fn submit(&mut self, c: Commission) {
        self.pending_intake.push(c);
    }

    /// Nothing scheduled, queued, building, shipping or waiting for a revert.
    pub fn is_quiet(&self) -> bool {
        self.schedule.is_empty()
            && self.pending_intake.is_empty()
            && self.pending_builds.is_empty()
            && self.scheduler.pending_len() == 0
            && self.locks.values().all(|l| l.settled)
            && self.book.records().all(|r| {
                r.status.is_terminal()
                    && !(r.status == CommissionStatus::Completed
                        && r.commission.revert_at.is_some()
                        && r.revert_id.is_none())
            })
    }

    /// Runs `ticks` ticks or until a safety violation halts the world.
    pub fn run(&mut self, ticks: Tick) -> &[Event] {
        for _ in 0..ticks {
            if self.halted.is_some() {
                break;
            }
            self.tick();
        }
        &self.events
    }

    /// Runs until [`is_quiet`](World::is_quiet) or `max_ticks` elapse.
    pub fn run_until_quiet(&mut self, max_ticks: Tick) -> Tick {
        let start = self.now;
        while self.now - start < max_ticks && self.halted.is_none() {
            self.tick();
            if self.is_quiet() && self.fault_schedule.is_empty() {
                break;
            }
        }
        self.now
    }

    /// Advances one tick and returns the events it produced.
    pub fn tick(&mut self) -> &[Event] {
        let first = self.events.len();
        if self.halted.is_some() {
            return &self.events[first..];
        }
        self.phase_faults();
        self.phase_renewal();
        self.phase_intake();
        self.phase_dispatch();
        self.phase_rollout();
        self.phase_execution();
        self.phase_reports();
        self.phase_reverts();
        let findings = self.registry.audit();
        if !findings.is_empty() {
            let mut diag = Vec::new();
            for f in findings {
                diag.push(format!("{} ({}): {}", f.constraint, f.expression, f.detail));
                self.emit(
                    Event::new(self.now, Phase::Reverts, "audit-violation")
                        .with("constraint", &f.constraint)
                        .with("expression", &f.expression)
                        .with("detail", &f.detail),
                );
            }
            self.halted = Some(format!("tick {}: {}", self.now, diag.join("; ")));
        }
        self.now += 1;
        &self.events[first..]
    }

    fn emit(&mut self, e: Event) {
        self.events.push(e);
    }

    fn ev(&self, phase: Phase, kind: &str) -> Event {
        Event::new(self.now, phase, kind)
    }

    fn log_transition(&mut self, commission: &str, t: Option<Transition>) {
        let Some(t) = t else { return };
        let mut e = Event::new(t.tick, t.phase, "status")
            .with("commission", commission)
            .with("status", t.status.name());
        if let Some(note) = &t.note {
            e = e.with("note", note);
        }
        self.emit(e);
        if t.status == CommissionStatus::Completed {
            let original = self.book.get(commission).and_then(|r| r.commission.revert_of.clone());
            if let Some(orig) = original {
                let reverted = self.book.get(&orig).and_then(|r| r.log.last()).cloned();
                if let Some(rt) = reverted.filter(|rt| rt.status == CommissionStatus::Reverted && rt.tick == t.tick) {
                    self.emit(
                        Event::new(rt.tick, rt.phase, "status")
                            .with("commission", &orig)
                            .with("status", rt.status.name()),
                    );
                }
            }
        }
    }

    fn settle(&mut self, commission: &str, device: &str, outcome: DeviceOutcome, phase: Phase) {
        let t = self.book.settle(commission, device, outcome, self.now, phase).unwrap_or(None);
        if let Some(lock) = self.locks.get_mut(device) {
            if lock.commission == commission {
                lock.settled = true;
            }
        }
        self.log_transition(commission, t);
    }

    /// Logs a blocked dispatch attempt unless the same reason was already
    /// logged for this commission and device.
    fn block(&mut self, commission: &str, device: &str, kind: &str, reason: String) {
        let key = (commission.to_string(), device.to_string());
        let label = format!("{kind}:{reason}");
        if self.blocked.get(&key) == Some(&label) {
            return;
        }
        self.blocked.insert(key, label);
        let e = self
            .ev(Phase::Dispatch, kind)
            .with("commission", commission)
            .with("device", device)
            .with("reason", reason);
        self.emit(e);
    }

    // ---------------------------------------------------------------- 1

    fn phase_faults(&mut self) {
        let now = self.now;
        for (id, dev) in self.devices.iter_mut() {
            let mut ended = Vec::new();
            dev.faults.retain(|f| {
                let keep = f.until > now;
                if !keep {
                    ended.push(f.kind.name());
                }
                keep
            });
            dev.state.online = dev.online(now);
            for name in ended {
                self.events.push(
                    Event::new(now, Phase::Faults, "fault-end")
                        .with("device", id)
                        .with("fault", name),
                );
            }
        }

        let mut specs = self.fault_schedule.remove(&now).unwrap_or_default();
        if let Some(rf) = self.random_faults.clone() {
            let ids: Vec<String> = self.devices.keys().cloned().collect();
            for id in ids {
                if rf.kinds.is_empty() || self.rng.gen_range(0..1000) >= rf.per_mille {
                    continue;
                }
                let name = &rf.kinds[self.rng.gen_range(0..rf.kinds.len())];
                let duration = self.rng.gen_range(1..=rf.max_duration.max(1));
                let kind = match name.as_str() {
                    "offline" => FaultKind::Offline,
                    "drop-message" => FaultKind::DropMessage,
                    "exec-fail" => FaultKind::ExecFail,
                    "busy" => FaultKind::Busy,
                    "recharge" => FaultKind::Recharge { charge_pct: 100 },
                    _ => continue,
                };
                specs.push(FaultSpec {
                    at: now,
                    device: id,
                    duration,
                    kind,
                });
            }
        }
        for spec in specs {
            let Some(dev) = self.devices.get_mut(&spec.device) else {
                let e = self
                    .ev(Phase::Faults, "fault-ignored")
                    .with("device", &spec.device)
                    .with("fault", spec.kind.name());
                self.emit(e);
                continue;
            };
            let e = match spec.kind {
                FaultKind::Recharge { charge_pct } => {
                    dev.recharge(charge_pct);
                    Event::new(now, Phase::Faults, "recharge")
                        .with("device", &spec.device)
                        .with("charge_pct", dev.state.charge_pct)
                }
                kind => {
                    let until = now + spec.duration.max(1);
                    let name = kind.name();
                    dev.faults.push(device::ActiveFault { kind, from: now, until });
                    dev.state.online = dev.online(now);
                    Event::new(now, Phase::Faults, "fault-start")
                        .with("device", &spec.device)
                        .with("fault", name)
                        .with("until", until)
                }
            };
            self.emit(e);
        }
        for dev in self.devices.values_mut() {
            dev.drain(dev.agent.power.idle_drain_pct_per_tick);
        }
    }

    // ---------------------------------------------------------------- 2

    fn phase_renewal(&mut self) {
        if !self.scheduler.renewal_due(self.now) {
            return;
        }
        let credits: BTreeMap<String, u64> = self.scheduler.renew_currency(self.now).into_iter().collect();
        if !credits.is_empty() {
            let e = self.ev(Phase::Renewal, "renewal").with("credits", credits);
            self.emit(e);
        }
    }

    // ---------------------------------------------------------------- 3

    fn phase_intake(&mut self) {
        let mut incoming = self.schedule.remove(&self.now).unwrap_or_default();
        incoming.append(&mut self.pending_intake);
        for c in incoming {
            let id = c.commission_id.clone();
            match self.book.submit(c, self.now, &self.registry) {
                Ok(_) => {
                    let record = self.book.get(&id).expect("just submitted");
                    self.scheduler.enqueue(&record.commission, &record.resolved);
                    let e = self
                        .ev(Phase::Intake, "submitted")
                        .with("commission", &id)
                        .with("source", &record.commission.source)
                        .with("targets", &record.resolved);
                    let t = record.log.last().cloned();
                    self.emit(e);
                    self.log_transition(&id, t);
                }
                Err(err) => {
                    let e = self
                        .ev(Phase::Intake, "submit-rejected")
                        .with("commission", &id)
                        .with("category", err.category())
                        .with("detail", err.to_string());
                    self.emit(e);
                }
            }
        }
        for entry in self.scheduler.expire(self.now) {
            let e = self
                .ev(Phase::Intake, "queue-expired")
                .with("commission", &entry.commission_id)
                .with("device", &entry.device_id);
            self.emit(e);
            self.settle(&entry.commission_id, &entry.device_id, DeviceOutcome::Expired, Phase::Intake);
        }
    }

    // ---------------------------------------------------------------- 4

    fn phase_dispatch(&mut self) {
        self.run_builds();
        for device in self.scheduler.queued_devices() {
            if self.locks.contains_key(&device) {
                continue;
            }
            let candidates: Vec<String> = self
                .scheduler
                .ranked(&device, self.now)
                .into_iter()
                .map(|e| e.commission_id.clone())
                .collect();
            for cid in candidates {
                if self.try_dispatch(&cid, &device) {
                    break;
                }
            }
        }
    }

    /// Returns true when the device is done for this tick: either the
    /// commission was dispatched or the device itself is unusable.
    fn try_dispatch(&mut self, cid: &str, device: &str) -> bool {
        let Some(c) = self.book.get(cid).map(|r| r.commission.clone()) else {
            return false;
        };
        let inputs = match gather_inputs(&c, device, self.now, &self.registry, &self.artifacts) {
            Ok(i) => i,
            Err(e @ GatherError::Stale { .. }) => {
                self.block(cid, device, "gather-failed", e.to_string());
                return true;
            }
            Err(e) => {
                let e2 = self
                    .ev(Phase::Dispatch, "gather-failed")
                    .with("commission", cid)
                    .with("device", device)
                    .with("reason", e.to_string());
                self.emit(e2);
                self.scheduler.withdraw(cid, device);
                self.settle(cid, device, DeviceOutcome::Rejected { reason: e.to_string() }, Phase::Dispatch);
                return false;
            }
        };
        let in_flight: BTreeMap<String, Vec<PostCondition>> = self
            .locks
            .iter()
            .map(|(d, l)| (d.clone(), l.required.clone()))
            .collect();
        if let GateDecision::Deny(reason) = safety_gate(&c, device, self.now, &self.registry, &in_flight) {
            self.block(cid, device, "denied", reason.to_string());
            return false;
        }
        let notes = match check_preconditions(&inputs) {
            Ok(notes) => notes,
            Err(m) if m.is_transient() => {
                self.block(cid, device, "held", m.to_string());
                return true;
            }
            Err(m) => {
                let e = self
                    .ev(Phase::Dispatch, "mismatch")
                    .with("commission", cid)
                    .with("device", device)
                    .with("reason", m.to_string());
                self.emit(e);
                self.scheduler.withdraw(cid, device);
                self.settle(cid, device, DeviceOutcome::Rejected { reason: m.to_string() }, Phase::Dispatch);
                return false;
            }
        };
        match self.scheduler.dispatch(cid, device) {
            Ok(d) => {
                self.blocked.remove(&(cid.to_string(), device.to_string()));
                let mut e = self
                    .ev(Phase::Dispatch, "dispatched")
                    .with("commission", cid)
                    .with("device", device)
                    .with("paid", d.paid);
                if !notes.is_empty() {
                    e = e.with("notes", notes.iter().map(ToString::to_string).collect::<Vec<_>>());
                }
                self.emit(e);
                let t = self
                    .book
                    .advance(cid, CommissionStatus::Scheduled, self.now, Phase::Dispatch)
                    .unwrap_or(None);
                self.log_transition(cid, t);
                self.locks.insert(
                    device.to_string(),
                    Lock {
                        commission: cid.to_string(),
                        required: c.required_for(device).to_vec(),
                        settled: false,
                    },
                );
                self.pending_builds.push(PendingBuild {
                    commission: cid.to_string(),
                    device: device.to_string(),
                    inputs,
                });
                true
            }
            Err(err) => {
                self.block(cid, device, "dispatch-failed", err.to_string());
                false
            }
        }
    }

    fn run_builds(&mut self) {
        let builds = std::mem::take(&mut self.pending_builds);
        let mut by_commission: BTreeMap<String, Vec<crate::package::ConfigurationPackage>> = BTreeMap::new();
        for b in builds {
            let live = self.book.get(&b.commission).is_some_and(|r| !r.status.is_terminal());
            if !live {
                if let Some(l) = self.locks.get_mut(&b.device) {
                    l.settled = true;
                }
                continue;
            }
            let stored = build(&b.inputs, self.now, &self.settings.factory)
                .map_err(|e| e.to_string())
                .and_then(|(pkg, snap)| {
                    self.configs.put_snapshot(&snap).map_err(|e| e.to_string())?;
                    let evicted = self.configs.store_package(&pkg, self.now).map_err(|e| e.to_string())?;
                    Ok((pkg, snap, evicted))
                });
            match stored {
                Ok((pkg, snap, evicted)) => {
                    let _ = self.book.set_package(&b.commission, &b.device, &pkg.package_id, &snap.snapshot_id);
                    let e = self
                        .ev(Phase::Dispatch, "built")
                        .with("commission", &b.commission)
                        .with("device", &b.device)
                        .with("package", &pkg.package_id)
                        .with("snapshot", &snap.snapshot_id)
                        .with("checksum", &pkg.checksum);
                    self.emit(e);
                    if !evicted.is_empty() {
                        let e = self.ev(Phase::Dispatch, "evicted").with("packages", evicted);
                        self.emit(e);
                    }
                    let t = self
                        .book
                        .advance(&b.commission, CommissionStatus::Building, self.now, Phase::Dispatch)
                        .unwrap_or(None);
                    self.log_transition(&b.commission, t);
                    by_commission.entry(b.commission).or_default().push(pkg);
                }
                Err(detail) => {
                    let e = self
                        .ev(Phase::Dispatch, "build-failed")
                        .with("commission", &b.commission)
                        .with("device", &b.device)
                        .with("detail", &detail);
                    self.emit(e);
                    self.settle(&b.commission, &b.device, DeviceOutcome::Failed { detail }, Phase::Dispatch);
                }
            }
        }
        for (cid, pkgs) in by_commission {
            let rollout_id = format!("r-{cid}-{}", self.now);
            let fleet = SimFleet {
                devices: &self.devices,
                now: self.now,
            };
            match TransmissionPlan::plan(rollout_id.clone(), &pkgs, self.strategy, self.now, &fleet) {
                Ok(plan) => {
                    let initial: Vec<(String, crate::shipping::DeliveryStatus)> =
                        plan.assignments.values().map(|a| (a.device_id.clone(), a.status)).collect();
                    let e = self
                        .ev(Phase::Dispatch, "rollout-planned")
                        .with("rollout", &rollout_id)
                        .with("commission", &cid)
                        .with("strategy", self.strategy.name())
                        .with("devices", initial.iter().map(|(d, _)| d).collect::<Vec<_>>());
                    self.emit(e);
                    self.rollouts.insert(plan);
                    for (device, status) in initial {
                        use crate::shipping::DeliveryStatus as S;
                        match status {
                            S::Expired => {
                                let e = self
                                    .ev(Phase::Dispatch, "shipping-expired")
                                    .with("rollout", &rollout_id)
                                    .with("device", &device);
                                self.emit(e);
                                self.settle(&cid, &device, DeviceOutcome::Expired, Phase::Dispatch);
                            }
                            S::Deferred => {
                                let e = self
                                    .ev(Phase::Dispatch, "deferred")
                                    .with("rollout", &rollout_id)
                                    .with("device", &device);
                                self.emit(e);
                            }
                            _ => {}
                        }
                    }
                }
                Err(err) => {
                    for p in &pkgs {
                        self.settle(
                            &cid,
                            &p.device_id,
                            DeviceOutcome::Failed { detail: err.to_string() },
                            Phase::Dispatch,
                        );
                    }
                }
            }
        }
    }

    // ---------------------------------------------------------------- 5

    fn phase_rollout(&mut self) {
        let now = self.now;
        let fleet = SimFleet {
            devices: &self.devices,
            now,
        };
        let mut happened: Vec<(String, String, ShippingEvent)> = Vec::new();
        let mut started: BTreeSet<String> = BTreeSet::new();
        for plan in self.rollouts.plans_mut() {
            if plan.created_at >= now || plan.is_shipped() {
                continue;
            }
            let cid = plan
                .assignments
                .values()
                .next()
                .map(|a| a.commission_id.clone())
                .unwrap_or_default();
            started.insert(cid.clone());
            for e in plan.advance(now, &fleet) {
                happened.push((plan.rollout_id.clone(), cid.clone(), e));
            }
        }
        for cid in started {
            let t = self
                .book
                .advance(&cid, CommissionStatus::Shipping, now, Phase::Rollout)
                .unwrap_or(None);
            self.log_transition(&cid, t);
        }
        for (rollout, cid, e) in happened {
            match e {
                ShippingEvent::Delivered { device, package, sender } => {
                    let transfer = self.devices.get(&device).map_or(0, |d| d.agent.power.transfer_drain_pct);
                    if sender != ORIGIN {
                        if let Some(s) = self.devices.get_mut(&sender) {
                            s.drain(s.agent.power.transfer_drain_pct);
                        }
                    }
                    match self.configs.peek_package(&package) {
                        Ok(stored) => {
                            if let Some(d) = self.devices.get_mut(&device) {
                                d.drain(transfer);
                                d.inbox.push(device::InboxItem {
                                    package: stored.package,
                                    delivered_at: now,
                                    attempts: 0,
                                });
                            }
                            let ev = self
                                .ev(Phase::Rollout, "delivered")
                                .with("rollout", &rollout)
                                .with("device", &device)
                                .with("package", &package)
                                .with("sender", &sender);
                            self.emit(ev);
                        }
                        Err(err) => {
                            let ev = self
                                .ev(Phase::Rollout, "delivery-failed")
                                .with("rollout", &rollout)
                                .with("device", &device)
                                .with("detail", err.to_string());
                            self.emit(ev);
                            let receipt = DeliveryReceipt {
                                device_id: device.clone(),
                                package_id: package,
                                delivered_at: now,
                                executed_at: None,
                                result: ReceiptResult::Failure(format!("failure(store): {err}")),
                            };
                            self.complete(&receipt, Phase::Rollout);
                        }
                    }
                }
                ShippingEvent::Lost { device, package, sender } => {
                    let ev = self
                        .ev(Phase::Rollout, "lost")
                        .with("rollout", &rollout)
                        .with("device", &device)
                        .with("package", &package)
                        .with("sender", &sender);
                    self.emit(ev);
                }
                ShippingEvent::Deferred {
                    device,
                    charge_pct,
                    required_pct,
                } => {
                    let ev = self
                        .ev(Phase::Rollout, "deferred")
                        .with("rollout", &rollout)
                        .with("device", &device)
                        .with("charge_pct", charge_pct)
                        .with("required_pct", required_pct);
                    self.emit(ev);
                }
                ShippingEvent::Resumed { device } => {
                    let ev = self
                        .ev(Phase::Rollout, "resumed")
                        .with("rollout", &rollout)
                        .with("device", &device);
                    self.emit(ev);
                }
                ShippingEvent::Expired { device, package } => {
                    let ev = self
                        .ev(Phase::Rollout, "shipping-expired")
                        .with("rollout", &rollout)
                        .with("device", &device)
                        .with("package", &package);
                    self.emit(ev);
                    self.settle(&cid, &device, DeviceOutcome::Expired, Phase::Rollout);
                }
            }
        }
    }

    fn complete(&mut self, receipt: &DeliveryReceipt, phase: Phase) {
        let cid = self
            .rollouts
            .assignment(&receipt.package_id)
            .map(|a| a.commission_id.clone());
        let t = self.rollouts.complete(&mut self.book, receipt, self.now).unwrap_or(None);
        if let Some(cid) = cid {
            if let Some(lock) = self.locks.get_mut(&receipt.device_id) {
                if lock.commission == cid {
                    lock.settled = true;
                }
            }
            if let Some(mut t) = t {
                t.phase = phase;
                self.log_transition(&cid, Some(t));
            }
        }
    }

    // ---------------------------------------------------------------- 6

    fn phase_execution(&mut self) {
        let now = self.now;
        let ids: Vec<String> = self.devices.keys().cloned().collect();
        for id in ids {
            let mut inbox = std::mem::take(&mut self.devices.get_mut(&id).expect("listed").inbox);
            inbox.sort_by(|a, b| a.package.package_id.cmp(&b.package.package_id));
            let mut keep = Vec::new();
            for mut item in inbox {
                let dev = self.devices.get_mut(&id).expect("listed");
                let pkg_id = item.package.package_id.clone();
                if !dev.online(now) {
                    keep.push(item);
                    continue;
                }
                if dev.has_fault("busy", now) && !item.package.metadata.interrupt_allowed {
                    let key = (format!("exec:{pkg_id}"), id.clone());
                    if self.blocked.insert(key, "busy".into()).is_none() {
                        let e = Event::new(now, Phase::Execution, "exec-deferred")
                            .with("device", &id)
                            .with("package", &pkg_id)
                            .with("reason", "busy");
                        self.emit(e);
                    }
                    keep.push(item);
                    continue;
                }
                let result = dev.execute_package(&item.package, &self.settings.factory.secret, self.registry.ofm(), now);
                item.attempts += 1;
                if result == ExecResult::Injected && item.attempts < self.settings.retry_budget {
                    let e = Event::new(now, Phase::Execution, "exec-retry")
                        .with("device", &id)
                        .with("package", &pkg_id)
                        .with("attempt", item.attempts);
                    self.emit(e);
                    keep.push(item);
                    continue;
                }
                let (kind, receipt_result) = match &result {
                    ExecResult::Success => ("executed", ReceiptResult::Success),
                    other => ("exec-failed", ReceiptResult::Failure(other.detail())),
                };
                let mut e = Event::new(now, Phase::Execution, kind)
                    .with("device", &id)
                    .with("package", &pkg_id);
                if let ReceiptResult::Failure(d) = &receipt_result {
                    e = e.with("reason", d);
                }
                self.emit(e);
                let receipt = DeliveryReceipt {
                    device_id: id.clone(),
                    package_id: pkg_id,
                    delivered_at: item.delivered_at,
                    executed_at: Some(now),
                    result: receipt_result,
                };
                self.complete(&receipt, Phase::Execution);
            }
            self.devices.get_mut(&id).expect("listed").inbox = keep;
        }
    }

    // ---------------------------------------------------------------- 7

    fn phase_reports(&mut self) {
        let now = self.now;
        let ids: Vec<String> = self.devices.keys().cloned().collect();
        for id in &ids {
            let dev = &self.devices[id];
            if !dev.report_due(now) || !dev.online(now) || dev.has_fault("drop-message", now) {
                continue;
            }
            let mut state = dev.state.clone();
            state.last_updated = now;
            state.online = true;
            match self.registry.update_state(id, state) {
                Ok(_) => {
                    let e = self.ev(Phase::Reports, "report").with("device", id);
                    self.emit(e);
                    if self.locks.get(id).is_some_and(|l| l.settled) {
                        let lock = self.locks.remove(id).expect("checked");
                        let e = self
                            .ev(Phase::Reports, "lock-released")
                            .with("device", id)
                            .with("commission", lock.commission);
                        self.emit(e);
                    }
                }
                Err(err) => {
                    let e = self
                        .ev(Phase::Reports, "report-rejected")
                        .with("device", id)
                        .with("detail", err.to_string());
                    self.emit(e);
                }
            }
        }
        self.run_rules(&ids);
    }

    fn run_rules(&mut self, ids: &[String]) {
        let now = self.now;
        let rules = self.rules.clone();
        for rule in &rules {
            for id in ids {
                if !rule.devices.is_empty() && !rule.devices.contains(id) {
                    continue;
                }
                let states = BTreeMap::from([(id.clone(), self.devices[id].state.clone())]);
                let holds = rule.when.evaluate(&states).unwrap_or(false);
                let key = (rule.name.clone(), id.clone());
                let before = self.rule_state.insert(key, holds);
                if !(holds && before == Some(false)) {
                    continue;
                }
                let mut c = rule.template.clone();
                c.commission_id = format!("{}-{id}-{now}", rule.template.commission_id);
                c.source = id.clone();
                c.window.earliest += now;
                c.window.latest += now;
                c.revert_at = c.revert_at.map(|r| r + now);
                if c.targets.is_empty() {
                    c.targets.insert(id.clone());
                }
                let e = self
                    .ev(Phase::Reports, "internal-commission")
                    .with("rule", &rule.name)
                    .with("device", id)
                    .with("commission", &c.commission_id);
                self.emit(e);
                self.pending_intake.push(c);
            }
        }
    }

    // ---------------------------------------------------------------- 8

    fn phase_reverts(&mut self) {
        let now = self.now;
        let candidates: Vec<(String, BTreeMap<String, String>, CommissionStatus)> = self
            .book
            .records()
            .filter(|r| r.revert_id.is_none())
            .filter(|r| {
                (r.status == CommissionStatus::Completed && r.commission.revert_at.is_some_and(|t| now >= t))
                    || (self.settings.partial_revert && r.status == CommissionStatus::Rejected)
            })
            .map(|r| (r.id().to_string(), r.snapshots.clone(), r.status))
            .collect();
        for (id, snaps, status) in candidates {
            let configs = &self.configs;
            let prior = |d: &str| {
                snaps
                    .get(d)
                    .and_then(|sid| configs.get_snapshot(sid).ok())
                    .map(|s| s.prior_state())
            };
            let emitted = if status == CommissionStatus::Completed {
                self.book.emit_revert(&id, now, prior)
            } else {
                self.book.emit_partial_revert(&id, now, prior)
            };
            match emitted {
                Ok(Some(revert)) => {
                    let e = self
                        .ev(Phase::Reverts, "revert-emitted")
                        .with("commission", &id)
                        .with("revert", &revert.commission_id);
                    self.emit(e);
                    self.pending_intake.push(revert);
                }
                Ok(None) => {}
                Err(err) => {
                    let e = self
                        .ev(Phase::Reverts, "revert-impossible")
                        .with("commission", &id)
                        .with("detail", err.to_string());
                    self.emit(e);
                }
            }
        }
    }
}
