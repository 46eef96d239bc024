mod common;

use std::collections::BTreeMap;

use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

use common::*;
use confab_core::commission::{CommissionStatus, Window};
use confab_core::factory::{build, gather_inputs, FactoryConfig};
use confab_core::model::{BusinessScenario, Constraint};
use confab_core::package::ConfigurationPackage;
use confab_core::shipping::Strategy;
use confab_core::sim::World;
use confab_core::store::{ArtifactStore, MemoryBackend};

fn strategy(pick: u8) -> Strategy {
    match pick % 3 {
        0 => Strategy::Pull { poll_period: 3 },
        1 => Strategy::Push { origin_fanout: 2 },
        _ => Strategy::Seed {
            origin_fanout: 1,
            seeder_fanout: 2,
            min_seed_charge_pct: 50,
            min_seed_cores: 2,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn revert_restores_every_touched_device(
        rate in 1i64..=1000,
        level in 0u8..=10,
        n in 1usize..5,
        pick in any::<u8>(),
    ) {
        let ids = device_ids(n);
        let mut f = fleet(&ids, vec![]);
        f.devices[0].services.insert(SERVICE.into(), 4);
        let mut run = run_file(f, strategy(pick));
        let mut c = commission("c1", &ids, vec![set_rate(rate), provide(level)]);
        c.window = Window { earliest: 0, latest: 30 };
        c.revert_at = Some(40);
        run.commissions.push(at(0, c));
        let mut w = World::new(run).unwrap();
        let before: Vec<_> = ids.iter().map(|id| w.devices()[id].state.clone()).collect();
        w.run(40);
        w.run_until_quiet(200);
        prop_assert_eq!(w.book().get("c1").unwrap().status, CommissionStatus::Reverted);
        for (id, b) in ids.iter().zip(&before) {
            let after = &w.devices()[id].state;
            prop_assert_eq!(&b.current_values, &after.current_values);
            prop_assert_eq!(&b.provided_services, &after.provided_services);
        }
    }

    #[test]
    fn builds_are_pure_and_round_trip(rate in 1i64..=1000, level in 0u8..=10, importance in 0u64..=9, now in 0u64..50) {
        let ids = device_ids(1);
        let registry = fleet(&ids, vec![]).into_registry(30, now).unwrap();
        let mut store = ArtifactStore::open(Box::new(MemoryBackend::new())).unwrap();
        for c in components() {
            store.put_component(c).unwrap();
        }
        let mut c = commission("c1", &ids, vec![set_rate(rate), provide(level)]);
        c.importance = importance;
        let inputs = gather_inputs(&c, &ids[0], now, &registry, &store).unwrap();
        let config = FactoryConfig::default();
        let (a, snap_a) = build(&inputs, now, &config).unwrap();
        let (b, snap_b) = build(&inputs, now, &config).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(snap_a, snap_b);
        let decoded = ConfigurationPackage::decode(&a.encode()).unwrap();
        prop_assert_eq!(decoded, a);
    }

    #[test]
    fn lifecycle_logs_are_ordered_and_legal(
        plan in prop::collection::vec((0u64..20, 0usize..4, 1i64..100, 0u8..3), 1..8),
        pick in any::<u8>(),
        seed in any::<u64>(),
    ) {
        let ids = device_ids(4);
        let mut run = run_file(fleet(&ids, vec![]), strategy(pick));
        run.seed = seed;
        run.agents.defaults.report_phase = None;
        for (i, (t, d, rate, lvl)) in plan.iter().enumerate() {
            let mut c = commission(&format!("c{i}"), &[ids[*d].clone()], vec![set_rate(*rate), provide(*lvl)]);
            c.window = Window { earliest: *t, latest: t + 40 };
            run.commissions.push(at(*t, c));
        }
        let mut w = World::new(run).unwrap();
        w.run_until_quiet(300);
        for r in w.book().records() {
            prop_assert!(r.log.windows(2).all(|p| (p[0].tick, p[0].phase) < (p[1].tick, p[1].phase)));
            prop_assert!(r.log.windows(2).all(|p| p[0].status.can_move_to(p[1].status)));
            prop_assert!(r.status.is_terminal(), "{} left {}", r.id(), r.status);
        }
    }

    #[test]
    fn gate_keeps_scenarios_safe(
        plan in prop::collection::vec((0u64..15, 0usize..6, 0u8..3), 1..12),
        seed in any::<u64>(),
    ) {
        let ids = device_ids(6);
        let scenario = BusinessScenario {
            scenario_id: "S".into(),
            member_devices: ids.iter().cloned().collect(),
            constraints: vec![Constraint::parse("count(service temp-sensing level >= 1) >= 3").unwrap()],
        };
        let mut f = fleet(&ids, vec![scenario.clone()]);
        for d in f.devices.iter_mut().take(4) {
            d.services.insert(SERVICE.into(), 1);
        }
        let mut run = run_file(f, Strategy::Push { origin_fanout: 3 });
        run.seed = seed;
        run.agents.defaults.report_phase = None;
        for (i, (t, d, lvl)) in plan.iter().enumerate() {
            let mut c = commission(&format!("c{i}"), &[ids[*d].clone()], vec![provide(*lvl)]);
            c.window = Window { earliest: *t, latest: t + 30 };
            run.commissions.push(at(*t, c));
        }
        let mut w = World::new(run).unwrap();
        for _ in 0..80 {
            w.tick();
            let states: BTreeMap<_, _> = ids.iter().map(|id| (id.clone(), w.devices()[id].state.clone())).collect();
            prop_assert_eq!(scenario.constraints[0].evaluate(&states), Ok(true), "tick {}", w.now());
        }
        prop_assert!(w.halted().is_none());
    }
}
