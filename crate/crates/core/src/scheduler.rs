//! Commission ordering under a pluggable policy, the importance-currency
//! market, and the business-scenario safety gate.
//!
//! Static priority and the market share one code path: static is the market
//! with unlimited currency, so balance checks and deductions are skipped.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::commission::{apply_post_conditions, Commission, PostCondition, SYSTEM_SOURCE};
use crate::model::DeviceState;
use crate::registry::Registry;
use crate::value::Tick;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Static,
    Market,
    Fifo,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Static => "static",
            PolicyKind::Market => "market",
            PolicyKind::Fifo => "fifo",
        })
    }
}

/// Positive weight scaling a participant's renewal, held in thousandths so
/// credits stay integral. Parses from `1.5`, `"1.5"` or `2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GravityWeight(u64);

impl GravityWeight {
    pub const ONE: GravityWeight = GravityWeight(1000);

    pub fn from_milli(milli: u64) -> Option<Self> {
        (milli > 0).then_some(GravityWeight(milli))
    }

    pub fn milli(self) -> u64 {
        self.0
    }

    /// `amount × weight`, rounded down to whole currency units.
    pub fn scale(self, amount: u64) -> u64 {
        (u128::from(amount) * u128::from(self.0) / 1000) as u64
    }
}

impl Default for GravityWeight {
    fn default() -> Self {
        GravityWeight::ONE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid gravity weight {0:?}: expected a positive decimal with at most three fraction digits")]
pub struct WeightError(String);

impl FromStr for GravityWeight {
    type Err = WeightError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WeightError(s.to_string());
        let (int, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 3 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_milli: u64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<3}").parse().map_err(|_| bad())?
        };
        let milli = whole.checked_mul(1000).and_then(|w| w.checked_add(frac_milli)).ok_or_else(bad)?;
        GravityWeight::from_milli(milli).ok_or_else(bad)
    }
}

impl fmt::Display for GravityWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (whole, frac) = (self.0 / 1000, self.0 % 1000);
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let digits = format!("{frac:03}");
            write!(f, "{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl Serialize for GravityWeight {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GravityWeight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(i) => i.to_string(),
            Raw::Float(x) => format!("{x}"),
            Raw::Text(t) => t,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketParams {
    pub renewal_period: Tick,
    pub renewal_amount: u64,
    #[serde(default)]
    pub weights: BTreeMap<String, GravityWeight>,
    #[serde(default)]
    pub initial_balances: BTreeMap<String, u64>,
}

impl Default for MarketParams {
    fn default() -> Self {
        MarketParams {
            renewal_period: 10,
            renewal_amount: 10,
            weights: BTreeMap::new(),
            initial_balances: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub market: MarketParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub participant_id: String,
    pub balance: u64,
    pub gravity_weight: GravityWeight,
}

/// Running totals for the conservation check
/// `Σ balances + spent = initial + renewed`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurrencyLedger {
    pub initial: u64,
    pub renewed: u64,
    pub spent: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub commission_id: String,
    pub device_id: String,
    pub source: String,
    pub importance: u64,
    pub earliest: Tick,
    pub latest: Tick,
    pub submitted_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("commission {commission} is not queued for {device}")]
    NotQueued { commission: String, device: String },
    #[error("participant {participant} cannot afford bid {bid} (balance {balance})")]
    Unaffordable { participant: String, bid: u64, balance: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dispatched {
    pub entry: QueueEntry,
    /// Currency deducted from the entry's source.
    pub paid: u64,
}

#[derive(Clone, Debug)]
pub struct Scheduler {
    policy: Policy,
    participants: BTreeMap<String, Participant>,
    queues: BTreeMap<String, Vec<QueueEntry>>,
    ledger: CurrencyLedger,
}

fn priority_order(a: &QueueEntry, b: &QueueEntry) -> Ordering {
    b.importance
        .cmp(&a.importance)
        .then(a.submitted_at.cmp(&b.submitted_at))
        .then_with(|| a.commission_id.cmp(&b.commission_id))
}

fn arrival_order(a: &QueueEntry, b: &QueueEntry) -> Ordering {
    a.submitted_at
        .cmp(&b.submitted_at)
        .then_with(|| a.commission_id.cmp(&b.commission_id))
}

impl Scheduler {
    pub fn new(policy: Policy) -> Self {
        let mut s = Scheduler {
            policy,
            participants: BTreeMap::new(),
            queues: BTreeMap::new(),
            ledger: CurrencyLedger::default(),
        };
        if s.policy.kind == PolicyKind::Market {
            let ids: BTreeSet<String> = s
                .policy
                .market
                .initial_balances
                .keys()
                .chain(s.policy.market.weights.keys())
                .cloned()
                .collect();
            for id in ids {
                s.ensure_participant(&id);
            }
        }
        s
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn ledger(&self) -> CurrencyLedger {
        self.ledger
    }

    pub fn participants(&self) -> impl Iterator<Item = &Participant> {
        self.participants.values()
    }

    pub fn balance(&self, participant: &str) -> Option<u64> {
        self.participants.get(participant).map(|p| p.balance)
    }

    fn charges(&self, source: &str) -> bool {
        self.policy.kind == PolicyKind::Market && source != SYSTEM_SOURCE
    }

    fn ensure_participant(&mut self, id: &str) {
        if self.participants.contains_key(id) {
            return;
        }
        let market = &self.policy.market;
        let balance = market.initial_balances.get(id).copied().unwrap_or(0);
        let weight = market.weights.get(id).copied().unwrap_or_default();
        self.ledger.initial += balance;
        self.participants.insert(
            id.to_string(),
            Participant {
                participant_id: id.to_string(),
                balance,
                gravity_weight: weight,
            },
        );
    }

    /// Adds one queue entry per resolved device. Re-enqueueing an entry that
    /// is already queued is a no-op.
    pub fn enqueue(&mut self, c: &Commission, devices: &BTreeSet<String>) {
        if self.charges(&c.source) {
            self.ensure_participant(&c.source);
        }
        for device in devices {
            let queue = self.queues.entry(device.clone()).or_default();
            if queue.iter().any(|e| e.commission_id == c.commission_id) {
                continue;
            }
            queue.push(QueueEntry {
                commission_id: c.commission_id.clone(),
                device_id: device.clone(),
                source: c.source.clone(),
                importance: c.importance,
                earliest: c.window.earliest,
                latest: c.window.latest,
                submitted_at: c.submitted_at,
            });
        }
    }

    fn affordable(&self, e: &QueueEntry) -> bool {
        !self.charges(&e.source) || self.participants.get(&e.source).is_some_and(|p| e.importance <= p.balance)
    }

    /// Eligible entries for a device in policy order.
    pub fn ranked(&self, device_id: &str, now: Tick) -> Vec<&QueueEntry> {
        let mut out: Vec<&QueueEntry> = self
            .queues
            .get(device_id)
            .into_iter()
            .flatten()
            .filter(|e| e.earliest <= now && now <= e.latest && self.affordable(e))
            .collect();
        match self.policy.kind {
            PolicyKind::Static | PolicyKind::Market => out.sort_by(|a, b| priority_order(a, b)),
            PolicyKind::Fifo => out.sort_by(|a, b| arrival_order(a, b)),
        }
        out
    }

    pub fn select_next(&self, device_id: &str, now: Tick) -> Option<String> {
        self.ranked(device_id, now).first().map(|e| e.commission_id.clone())
    }

    /// Removes the entry and charges the winner's bid under the market.
    pub fn dispatch(&mut self, commission_id: &str, device_id: &str) -> Result<Dispatched, SchedulerError> {
        let not_queued = || SchedulerError::NotQueued {
            commission: commission_id.to_string(),
            device: device_id.to_string(),
        };
        let queue = self.queues.get(device_id).ok_or_else(not_queued)?;
        let pos = queue.iter().position(|e| e.commission_id == commission_id).ok_or_else(not_queued)?;
        let entry = queue[pos].clone();
        let mut paid = 0;
        if self.charges(&entry.source) {
            let p = self.participants.get_mut(&entry.source).expect("participant created at enqueue");
            if entry.importance > p.balance {
                return Err(SchedulerError::Unaffordable {
                    participant: entry.source.clone(),
                    bid: entry.importance,
                    balance: p.balance,
                });
            }
            p.balance -= entry.importance;
            self.ledger.spent += entry.importance;
            paid = entry.importance;
        }
        let queue = self.queues.get_mut(device_id).expect("checked above");
        queue.remove(pos);
        if queue.is_empty() {
            self.queues.remove(device_id);
        }
        Ok(Dispatched { entry, paid })
    }

    /// Drops entries whose window closed before `now`.
    pub fn expire(&mut self, now: Tick) -> Vec<QueueEntry> {
        let mut gone = Vec::new();
        for queue in self.queues.values_mut() {
            let (dead, live): (Vec<_>, Vec<_>) = queue.drain(..).partition(|e| e.latest < now);
            *queue = live;
            gone.extend(dead);
        }
        self.queues.retain(|_, q| !q.is_empty());
        gone.sort_by(|a, b| (&a.commission_id, &a.device_id).cmp(&(&b.commission_id, &b.device_id)));
        gone
    }

    /// Drops one commission's entry for a device (device outcome settled elsewhere).
    pub fn withdraw(&mut self, commission_id: &str, device_id: &str) -> Option<QueueEntry> {
        let queue = self.queues.get_mut(device_id)?;
        let pos = queue.iter().position(|e| e.commission_id == commission_id)?;
        let entry = queue.remove(pos);
        if queue.is_empty() {
            self.queues.remove(device_id);
        }
        Some(entry)
    }

    pub fn queued_devices(&self) -> Vec<String> {
        self.queues.keys().cloned().collect()
    }

    pub fn queue(&self, device_id: &str) -> Vec<QueueEntry> {
        self.queues.get(device_id).cloned().unwrap_or_default()
    }

    pub fn pending_len(&self) -> usize {
        self.queues.values().map(Vec::len).sum()
    }

    /// Credits every participant `renewal_amount × weight` when `now` is a
    /// renewal tick; returns the per-participant deltas. Off-period calls and
    /// non-market policies change nothing.
    pub fn renew_currency(&mut self, now: Tick) -> Vec<(String, u64)> {
        if self.policy.kind != PolicyKind::Market {
            return Vec::new();
        }
        let period = self.policy.market.renewal_period;
        if period == 0 || !now.is_multiple_of(period) {
            log::warn!("currency renewal requested off-period at tick {now}; ignored");
            return Vec::new();
        }
        let amount = self.policy.market.renewal_amount;
        let mut deltas = Vec::new();
        for p in self.participants.values_mut() {
            let credit = p.gravity_weight.scale(amount);
            p.balance += credit;
            self.ledger.renewed += credit;
            deltas.push((p.participant_id.clone(), credit));
        }
        deltas
    }

    pub fn renewal_due(&self, now: Tick) -> bool {
        let period = self.policy.market.renewal_period;
        self.policy.kind == PolicyKind::Market && period > 0 && now.is_multiple_of(period)
    }

    pub fn conserved(&self) -> bool {
        let balances: u64 = self.participants.values().map(|p| p.balance).sum();
        balances + self.ledger.spent == self.ledger.initial + self.ledger.renewed
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "kebab-case")]
pub enum DenyReason {
    StaleState,
    /// Label of the first failing constraint, e.g. `S1/c0`.
    Constraint(String),
    ModelError(String),
    /// Too many in-flight neighbours to enumerate their outcomes.
    InFlight(usize),
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::StaleState => f.write_str("stale-state"),
            DenyReason::Constraint(label) => write!(f, "constraint {label}"),
            DenyReason::ModelError(detail) => write!(f, "model-error: {detail}"),
            DenyReason::InFlight(n) => write!(f, "in-flight: {n} neighbours"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GateDecision {
    Allow,
    Deny(DenyReason),
}

/// Neighbours whose outcome is still unknown are enumerated exhaustively;
/// beyond this many the gate denies rather than guess.
pub const MAX_IN_FLIGHT_NEIGHBOURS: usize = 10;

/// Allows `c` on `device_id` iff every constraint of every scenario holding
/// the device stays true with the device replaced by its projected state.
///
/// `in_flight` lists other devices with a dispatched but not yet reported
/// configuration; since each may or may not have applied by the time it
/// reports, the constraints must hold for every subset of them applied.
pub fn safety_gate(
    c: &Commission,
    device_id: &str,
    now: Tick,
    registry: &Registry,
    in_flight: &BTreeMap<String, Vec<PostCondition>>,
) -> GateDecision {
    let view = match registry.get_state(device_id, now) {
        Ok(v) => v,
        Err(e) => return GateDecision::Deny(DenyReason::ModelError(e.to_string())),
    };
    if !view.fresh {
        return GateDecision::Deny(DenyReason::StaleState);
    }
    let ofm = registry.ofm();
    let projected = match apply_post_conditions(ofm, view.state, c.required_for(device_id)) {
        Ok(s) => s,
        Err(e) => return GateDecision::Deny(DenyReason::ModelError(e.to_string())),
    };
    let scenarios = match registry.scenarios_for(device_id) {
        Ok(s) => s,
        Err(e) => return GateDecision::Deny(DenyReason::ModelError(e.to_string())),
    };
    for scenario in scenarios {
        let mut base = registry.states_of(&scenario.member_devices);
        base.insert(device_id.to_string(), projected.clone());
        let mut alternatives: Vec<(&String, DeviceState)> = Vec::new();
        for (other, required) in in_flight {
            if other == device_id || !scenario.contains(other) {
                continue;
            }
            match apply_post_conditions(ofm, &base[other], required) {
                Ok(s) => alternatives.push((other, s)),
                Err(e) => return GateDecision::Deny(DenyReason::ModelError(e.to_string())),
            }
        }
        if alternatives.len() > MAX_IN_FLIGHT_NEIGHBOURS {
            return GateDecision::Deny(DenyReason::InFlight(alternatives.len()));
        }
        for mask in 0u32..(1 << alternatives.len()) {
            let mut states = base.clone();
            for (bit, (other, applied)) in alternatives.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    states.insert((*other).clone(), applied.clone());
                }
            }
            for (i, constraint) in scenario.constraints.iter().enumerate() {
                match constraint.evaluate(&states) {
                    Ok(true) => {}
                    Ok(false) => return GateDecision::Deny(DenyReason::Constraint(scenario.constraint_label(i))),
                    Err(e) => {
                        return GateDecision::Deny(DenyReason::ModelError(format!(
                            "{}: {e}",
                            scenario.constraint_label(i)
                        )))
                    }
                }
            }
        }
    }
    GateDecision::Allow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commission::fixtures::set_rate;
    use crate::commission::Window;
    use crate::model::description::fixtures::rpi_description;
    use crate::model::ofm::fixtures::plant_ofm;
    use crate::model::{BusinessScenario, Constraint};
    use proptest::prelude::*;

    fn commission(id: &str, source: &str, importance: u64, submitted_at: Tick) -> Commission {
        let mut c = set_rate(id, &["d1"], 10);
        c.source = source.into();
        c.importance = importance;
        c.submitted_at = submitted_at;
        c
    }

    fn only_d1() -> BTreeSet<String> {
        BTreeSet::from(["d1".to_string()])
    }

    fn static_sched() -> Scheduler {
        Scheduler::new(Policy::default())
    }

    #[test]
    fn static_picks_highest_importance() {
        let mut s = static_sched();
        s.enqueue(&commission("a", "x", 5, 0), &only_d1());
        s.enqueue(&commission("b", "x", 9, 0), &only_d1());
        assert_eq!(s.select_next("d1", 0).as_deref(), Some("b"));
    }

    #[test]
    fn static_tie_breaks_on_submission_then_id() {
        let mut s = static_sched();
        s.enqueue(&commission("late", "x", 7, 3), &only_d1());
        s.enqueue(&commission("early", "x", 7, 1), &only_d1());
        assert_eq!(s.select_next("d1", 5).as_deref(), Some("early"));
        let mut s = static_sched();
        s.enqueue(&commission("b", "x", 7, 1), &only_d1());
        s.enqueue(&commission("a", "x", 7, 1), &only_d1());
        assert_eq!(s.select_next("d1", 5).as_deref(), Some("a"));
    }

    #[test]
    fn fifo_picks_earliest_submission() {
        let mut s = Scheduler::new(Policy {
            kind: PolicyKind::Fifo,
            ..Policy::default()
        });
        for (id, t) in [("t4", 4), ("t2", 2), ("t9", 9)] {
            s.enqueue(&commission(id, "x", 1, t), &only_d1());
        }
        assert_eq!(s.select_next("d1", 10).as_deref(), Some("t2"));
    }

    fn market(balances: &[(&str, u64)]) -> Scheduler {
        Scheduler::new(Policy {
            kind: PolicyKind::Market,
            market: MarketParams {
                renewal_period: 10,
                renewal_amount: 10,
                weights: BTreeMap::new(),
                initial_balances: balances.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            },
        })
    }

    #[test]
    fn market_winner_pays_its_bid() {
        let mut s = market(&[("A", 10), ("B", 5)]);
        s.enqueue(&commission("ca", "A", 7, 0), &only_d1());
        s.enqueue(&commission("cb", "B", 5, 0), &only_d1());
        let winner = s.select_next("d1", 0).unwrap();
        assert_eq!(winner, "ca");
        assert_eq!(s.dispatch(&winner, "d1").unwrap().paid, 7);
        assert_eq!(s.balance("A"), Some(3));
        assert_eq!(s.balance("B"), Some(5));
        assert!(s.conserved());
    }

    #[test]
    fn market_skips_unaffordable_bids_and_exempts_system() {
        let mut s = market(&[("A", 3)]);
        s.enqueue(&commission("big", "A", 9, 0), &only_d1());
        s.enqueue(&commission("rev", SYSTEM_SOURCE, 1, 0), &only_d1());
        assert_eq!(s.select_next("d1", 0).as_deref(), Some("rev"));
        assert_eq!(s.dispatch("rev", "d1").unwrap().paid, 0);
        assert_eq!(s.select_next("d1", 0), None);
        assert_eq!(s.balance(SYSTEM_SOURCE), None);
    }

    #[test]
    fn window_gates_eligibility() {
        let mut s = static_sched();
        let mut c = commission("a", "x", 5, 0);
        c.window = Window { earliest: 5, latest: 8 };
        s.enqueue(&c, &only_d1());
        assert_eq!(s.select_next("d1", 4), None);
        assert!(s.select_next("d1", 5).is_some());
        assert_eq!(s.select_next("d1", 9), None);
        assert_eq!(s.expire(9).len(), 1);
        assert_eq!(s.pending_len(), 0);
    }

    fn weighted(weight: &str) -> Scheduler {
        let mut params = MarketParams::default();
        params.weights.insert("A".into(), weight.parse().unwrap());
        params.initial_balances.insert("A".into(), 0);
        Scheduler::new(Policy {
            kind: PolicyKind::Market,
            market: params,
        })
    }

    #[test]
    fn renewal_scales_by_weight() {
        let mut s = weighted("1.5");
        assert_eq!(s.renew_currency(0), vec![("A".to_string(), 15)]);
        let mut s = weighted("1.0");
        s.renew_currency(10);
        s.renew_currency(20);
        assert_eq!(s.balance("A"), Some(20));
        assert_eq!(s.renew_currency(25), vec![]);
        assert_eq!(s.balance("A"), Some(20));
        assert!(s.conserved());
    }

    #[test]
    fn weight_parsing() {
        assert_eq!("1.5".parse::<GravityWeight>().unwrap().milli(), 1500);
        assert_eq!("2".parse::<GravityWeight>().unwrap().milli(), 2000);
        assert_eq!("0.125".parse::<GravityWeight>().unwrap().to_string(), "0.125");
        assert!("0".parse::<GravityWeight>().is_err());
        assert!("1.2345".parse::<GravityWeight>().is_err());
        assert!("-1".parse::<GravityWeight>().is_err());
        let w: GravityWeight = toml::from_str::<BTreeMap<String, GravityWeight>>("a = 1.5").unwrap()["a"];
        assert_eq!(w.milli(), 1500);
    }

    fn drain(s: &mut Scheduler, now: Tick) -> Vec<String> {
        let mut order = Vec::new();
        while let Some(id) = s.select_next("d1", now) {
            s.dispatch(&id, "d1").unwrap();
            order.push(id);
        }
        order
    }

    fn fill(kind: PolicyKind, items: &[(u64, Tick)], scale: u64) -> Scheduler {
        let mut s = Scheduler::new(Policy {
            kind,
            ..Policy::default()
        });
        for (i, (imp, t)) in items.iter().enumerate() {
            s.enqueue(&commission(&format!("c{i}"), "x", imp * scale, *t), &only_d1());
        }
        s
    }

    proptest! {
        #[test]
        fn static_order_invariant_under_scaling(items in proptest::collection::vec((1u64..6, 0u64..4), 1..6), k in 1u64..10) {
            let base = drain(&mut fill(PolicyKind::Static, &items, 1), 10);
            let scaled = drain(&mut fill(PolicyKind::Static, &items, k), 10);
            prop_assert_eq!(base, scaled);
        }

        #[test]
        fn fifo_equals_static_with_equal_importance(times in proptest::collection::vec(0u64..6, 1..6)) {
            let items: Vec<(u64, Tick)> = times.iter().map(|t| (3, *t)).collect();
            prop_assert_eq!(
                drain(&mut fill(PolicyKind::Fifo, &items, 1), 10),
                drain(&mut fill(PolicyKind::Static, &items, 1), 10)
            );
        }

        #[test]
        fn market_conserves_currency(ops in proptest::collection::vec((0u8..3, 1u64..8, 0usize..3), 1..60)) {
            let mut s = market(&[("A", 10), ("B", 5), ("C", 0)]);
            let names = ["A", "B", "C"];
            for (tick, (op, bid, who)) in ops.into_iter().enumerate() {
                match op {
                    0 => s.enqueue(&commission(&format!("c{tick}"), names[who], bid, tick as Tick), &only_d1()),
                    1 => {
                        if let Some(id) = s.select_next("d1", tick as Tick) {
                            s.dispatch(&id, "d1").unwrap();
                        }
                    }
                    _ => {
                        s.renew_currency(tick as Tick);
                    }
                }
                prop_assert!(s.conserved());
            }
        }
    }

    fn gate_registry(constraint: &str) -> Registry {
        let ofm = plant_ofm();
        let mut r = Registry::new(ofm.clone(), 30).unwrap();
        for (id, level) in [("d1", 3u8), ("d2", 0), ("solo", 0)] {
            let mut desc = rpi_description();
            desc.device_id = id.into();
            let services = BTreeMap::from([("temp-sensing".to_string(), level)]);
            let state = DeviceState::from_description(&desc, &ofm, services, 0);
            r.register_device(desc, state, 0).unwrap();
        }
        r.add_scenario(BusinessScenario {
            scenario_id: "S1".into(),
            member_devices: BTreeSet::from(["d1".to_string(), "d2".to_string()]),
            constraints: vec![Constraint::parse(constraint).unwrap()],
        })
        .unwrap();
        r
    }

    fn service(id: &str, target: &str, level: u8) -> Commission {
        let mut c = set_rate(id, &[target], 10);
        c.required = vec![PostCondition::ProvideService {
            service: "temp-sensing".into(),
            min_level: level,
        }];
        c
    }

    const COUNT: &str = "count(service temp-sensing level >= 1) >= 1";

    #[test]
    fn gate_allows_when_constraint_still_holds() {
        let r = gate_registry(COUNT);
        let c = set_rate("c", &["d1"], 10);
        assert_eq!(safety_gate(&c, "d1", 0, &r, &BTreeMap::new()), GateDecision::Allow);
    }

    #[test]
    fn gate_denies_removing_last_provider() {
        let r = gate_registry(COUNT);
        assert_eq!(
            safety_gate(&service("c", "d1", 0), "d1", 0, &r, &BTreeMap::new()),
            GateDecision::Deny(DenyReason::Constraint("S1/c0".into()))
        );
    }

    #[test]
    fn gate_is_vacuous_outside_scenarios() {
        let r = gate_registry(COUNT);
        assert_eq!(safety_gate(&service("c", "solo", 0), "solo", 0, &r, &BTreeMap::new()), GateDecision::Allow);
    }

    #[test]
    fn gate_denies_stale_state() {
        let r = gate_registry(COUNT);
        assert_eq!(
            safety_gate(&set_rate("c", &["d1"], 10), "d1", 31, &r, &BTreeMap::new()),
            GateDecision::Deny(DenyReason::StaleState)
        );
    }

    #[test]
    fn gate_reports_model_errors() {
        let r = gate_registry("online@d1 AND charge_pct@d2 > 1 AND sensing/temperature/nope@d1 = 1");
        match safety_gate(&set_rate("c", &["d1"], 10), "d1", 0, &r, &BTreeMap::new()) {
            GateDecision::Deny(DenyReason::ModelError(detail)) => assert!(detail.starts_with("S1/c0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gate_accounts_for_in_flight_neighbours() {
        let r = gate_registry(COUNT);
        // d2 is about to start providing the service, but until it reports
        // the gate cannot count on it.
        let in_flight = BTreeMap::from([(
            "d2".to_string(),
            vec![PostCondition::ProvideService {
                service: "temp-sensing".into(),
                min_level: 2,
            }],
        )]);
        assert!(matches!(
            safety_gate(&service("c", "d1", 0), "d1", 0, &r, &in_flight),
            GateDecision::Deny(DenyReason::Constraint(_))
        ));
        // Conversely an in-flight withdrawal blocks a harmless-looking change.
        let r = gate_registry("count(service temp-sensing level >= 1) >= 1");
        let in_flight = BTreeMap::from([(
            "d1".to_string(),
            vec![PostCondition::ProvideService {
                service: "temp-sensing".into(),
                min_level: 0,
            }],
        )]);
        assert!(matches!(
            safety_gate(&service("c", "d2", 0), "d2", 0, &r, &in_flight),
            GateDecision::Deny(DenyReason::Constraint(_))
        ));
    }
}
