// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use supercharger::engine::GroupEvent;
use supercharger::failover::default_rule;
use supercharger::feedgen::{nth_prefix, random_feed};
use supercharger::scenario::{FeedSource, Scenario};
use supercharger::sim::select_probes;
use supercharger::{
    brute_force_groups, control_plane_reconverge, emit_report, forward, load_scenario, on_peer_down, run, BgpUpdate,
    EgressAction, Engine, EngineConfig, FibMode, ForwardResult, PeerDirectory, PeerId, RouterFib, SwitchTable,
};

fn scenario(name: &str) -> Scenario {
    load_scenario(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
}

fn small_two_peers(mode: FibMode, n: u32) -> Scenario {
    let mut s = scenario("two_peers.toml").with_prefix_count(n).unwrap();
    s.mode = mode;
    s.probe_count = 50;
    s
}

fn update_strategy(peers: u16, prefixes: u32) -> impl Strategy<Value = BgpUpdate> {
    (any::<bool>(), 0..peers, 0..prefixes, 1u32..4, 1u32..4).prop_map(|(announce, p, i, lp, asp)| {
        if announce {
            BgpUpdate::announce(PeerId(p), nth_prefix(i), lp * 100, asp)
        } else {
            BgpUpdate::withdraw(PeerId(p), nth_prefix(i))
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // Online bindings equal a from-scratch recomputation after every update,
    // including withdrawals of routes that were never announced.
    #[test]
    fn online_groups_match_oracle(
        k in 2usize..4,
        updates in prop::collection::vec(update_strategy(5, 12), 1..200),
    ) {
        let cfg = EngineConfig { group_size: k, ..EngineConfig::default() };
        let mut engine = Engine::new(cfg, PeerDirectory::numbered(5)).unwrap();
        let mut counter = 0;
        for u in &updates {
            engine.process_update(u).unwrap();
            prop_assert_eq!(&brute_force_groups(engine.rib(), k), engine.bindings());
            prop_assert!(engine.allocation_counter() >= counter);
            counter = engine.allocation_counter();
        }
        engine.check_invariants().unwrap();
        prop_assert!(engine.live_groups() <= 5 * 4 * 3);
    }

    // Peer-down never touches groups whose primary is still up.
    #[test]
    fn failover_plan_only_covers_failed_primary(
        updates in prop::collection::vec(update_strategy(4, 16), 1..150),
        failed in 0u16..4,
    ) {
        let mut engine = Engine::new(EngineConfig::default(), PeerDirectory::numbered(4)).unwrap();
        for u in &updates {
            engine.process_update(u).unwrap();
        }
        let plan = on_peer_down(&engine, PeerId(failed));
        let expected: BTreeSet<_> = engine
            .groups()
            .filter(|g| g.key.primary() == PeerId(failed))
            .map(|g| g.key.clone())
            .collect();
        prop_assert_eq!(plan.affected_groups.iter().cloned().collect::<BTreeSet<_>>(), expected);
        prop_assert_eq!(plan.rules.len(), plan.affected_groups.len());
        prop_assert!(plan.rules.len() <= 3);
    }
}

/// Router FIB and switch table driven purely by controller output.
struct Supercharged {
    engine: Engine,
    fib: RouterFib,
    table: SwitchTable,
}

impl Supercharged {
    fn new(peers: PeerDirectory) -> Self {
        let table = SwitchTable::for_peers(&peers);
        Self {
            engine: Engine::new(EngineConfig::default(), peers).unwrap(),
            fib: RouterFib::new(FibMode::Supercharged),
            table,
        }
    }

    fn apply(&mut self, actions: Vec<EgressAction>) {
        for ev in self.engine.drain_group_events() {
            if let GroupEvent::Allocated { key, .. } = ev {
                self.table
                    .apply(default_rule(self.engine.group(&key).unwrap(), self.engine.peers()));
            }
        }
        for a in actions {
            match a {
                EgressAction::Announce { prefix, nh } => self.fib.install(prefix, nh, &self.engine),
                EgressAction::Withdraw { prefix } => {
                    self.fib.remove(&prefix);
                }
            }
        }
    }

    fn feed(&mut self, u: &BgpUpdate) {
        let actions = self.engine.process_update(u).unwrap();
        self.apply(actions);
    }
}

fn flat_fib(engine: &Engine) -> RouterFib {
    let mut fib = RouterFib::new(FibMode::Flat);
    for entry in engine.rib().entries() {
        if let Some(best) = entry.next_hops().first() {
            fib.install(entry.prefix, engine.peers().get(*best).router_ip, engine.peers());
        }
    }
    fib
}

fn probe(prefix: supercharger::Prefix) -> supercharger::dataplane::Packet {
    supercharger::dataplane::Packet {
        dst_ip: prefix.first_host(),
        timestamp: 0,
    }
}

#[test]
fn two_stage_forwarding_matches_flat_before_and_after_failure() {
    let peers = PeerDirectory::numbered(4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feed = random_feed(&mut rng, 4, 500, 5_000, 0.8);
    let mut sc = Supercharged::new(peers);
    for u in &feed {
        sc.feed(u);
    }
    let flat = flat_fib(&sc.engine);
    let prefixes: Vec<_> = sc.engine.rib().entries().map(|e| e.prefix).collect();
    for p in &prefixes {
        let pkt = probe(*p);
        assert_eq!(
            forward(&pkt, &sc.fib, &sc.table),
            forward(&pkt, &flat, &SwitchTable::for_peers(sc.engine.peers())),
            "{p}"
        );
    }

    // After the rules land, the two-stage path must reach whatever the
    // reconverged control plane would pick.
    let failed = PeerId(0);
    let port = sc.engine.peers().get(failed).port;
    for rule in on_peer_down(&sc.engine, failed).rules {
        sc.table.apply(rule);
    }
    sc.table.set_port_down(port, true);
    let mut reference = Engine::new(EngineConfig::default(), PeerDirectory::numbered(4)).unwrap();
    for u in &feed {
        reference.process_update(u).unwrap();
    }
    control_plane_reconverge(&mut reference, failed).unwrap();
    let mut flat_after = flat_fib(&reference);
    let mut flat_table = SwitchTable::for_peers(reference.peers());
    flat_table.set_port_down(port, true);
    let mut multihomed = 0;
    for p in &prefixes {
        let pkt = probe(*p);
        let got = forward(&pkt, &sc.fib, &sc.table);
        let routes = sc.engine.rib().get(p).map_or(0, |e| e.routes.len());
        if routes >= 2 {
            multihomed += 1;
            assert_eq!(got, forward(&pkt, &flat_after, &flat_table), "{p}");
        } else if sc.engine.rib().get(p).and_then(|e| e.next_hops().first().copied()) == Some(failed) {
            assert!(matches!(got, ForwardResult::Dropped(_)));
        }
    }
    assert!(multihomed > 100);

    // Reconverging the supercharged controller too keeps the same outcome.
    let actions = control_plane_reconverge(&mut sc.engine, failed).unwrap();
    sc.apply(actions);
    flat_after = flat_fib(&sc.engine);
    for p in &prefixes {
        let pkt = probe(*p);
        assert_eq!(
            forward(&pkt, &sc.fib, &sc.table),
            forward(&pkt, &flat_after, &flat_table),
            "{p}"
        );
    }
}

#[test]
fn flat_convergence_grows_linearly() {
    let counts = [2_000u32, 4_000, 8_000, 16_000];
    let points: Vec<(f64, f64)> = counts
        .iter()
        .map(|&n| {
            let r = run(&small_two_peers(FibMode::Flat, n)).unwrap();
            (n as f64, r.max_convergence().unwrap() as f64)
        })
        .collect();
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let cov: f64 = points.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let var: f64 = points.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    let slope = cov / var;
    let delta = scenario("two_peers.toml").timers.delta_entry_us;
    assert!((slope - delta).abs() / delta < 0.01, "slope {slope} vs {delta}");
}

#[test]
fn supercharged_convergence_is_flat() {
    for n in [100u32, 3_000, 20_000] {
        let r = run(&small_two_peers(FibMode::Supercharged, n)).unwrap();
        let s = r.summary.unwrap();
        assert_eq!((s.p5, s.max), (105_000, 105_000), "{n}");
        assert_eq!(r.switch_rule_changes, 1);
        assert_eq!(r.fib_changes, 0);
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let mut s = small_two_peers(FibMode::Flat, 5_000);
    s.seed = 3;
    let a = run(&s).unwrap();
    assert_eq!(a, run(&s).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    emit_report(&a, &x).unwrap();
    emit_report(&run(&s).unwrap(), &y).unwrap();
    assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());

    let prefixes = s.prefixes();
    assert_eq!(select_probes(&prefixes, 50, 3), select_probes(&prefixes, 50, 3));
    assert_ne!(select_probes(&prefixes, 50, 3), select_probes(&prefixes, 50, 4));
}

#[test]
fn probes_always_include_table_ends() {
    let prefixes: Vec<_> = (0..1_000).map(nth_prefix).collect();
    for seed in 0..5 {
        let picked = select_probes(&prefixes, 20, seed);
        assert_eq!(picked.len(), 20);
        assert_eq!(picked.first(), prefixes.first());
        assert_eq!(picked.last(), prefixes.last());
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn every_probe_is_accounted_for() {
    for mode in [FibMode::Flat, FibMode::Supercharged] {
        let r = run(&small_two_peers(mode, 2_000)).unwrap();
        for f in &r.flows {
            assert_eq!(f.generated, f.delivered + f.dropped);
            assert!(f.generated > 0);
        }
    }
    let r = run(&scenario("three_peers.toml")).unwrap();
    assert!(r.flows.iter().all(|f| f.generated == f.delivered + f.dropped));
}

#[test]
fn no_failure_means_no_loss() {
    let mut s = small_two_peers(FibMode::Supercharged, 1_000);
    s.fail_peer = None;
    let r = run(&s).unwrap();
    assert!(r.flows.iter().all(|f| f.dropped == 0));
    assert_eq!(r.summary.unwrap().max, 0);
}

#[test]
fn reconvergence_never_opens_a_hole() {
    let template = scenario("three_peers.toml");
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4u16;
        let mut feed = random_feed(&mut rng, n, 300, 3_000, 0.85);
        // Every prefix keeps at least two routes.
        for i in 0..300 {
            feed.push(BgpUpdate::announce(PeerId(n - 1), nth_prefix(i), 50, 9));
            feed.push(BgpUpdate::announce(PeerId(n - 2), nth_prefix(i), 50, 8));
        }
        let mut s = template.clone();
        s.peers = PeerDirectory::numbered(n as usize);
        s.peer_attributes = vec![(100, 1); n as usize];
        s.feed = FeedSource::File {
            path: "generated".into(),
            updates: feed,
        };
        s.prefix_count = 300;
        s.probe_count = 40;
        s.fail_peer = Some(PeerId((seed % 2) as u16));
        s.reconverge = true;
        s.seed = seed;
        let r = run(&s).unwrap();
        assert_eq!(r.drops_after_failover, 0, "seed {seed}");
        assert!(r.all_recovered(), "seed {seed}");
        assert!(r.reconverge_fib_changes > 0, "seed {seed}");
    }
}

#[test]
fn arp_answers_track_live_groups() {
    let mut sc = Supercharged::new(PeerDirectory::numbered(3));
    sc.feed(&BgpUpdate::announce(PeerId(0), nth_prefix(0), 200, 1));
    sc.feed(&BgpUpdate::announce(PeerId(1), nth_prefix(0), 100, 1));
    let entry = *sc.fib.entry(&nth_prefix(0)).unwrap();
    assert_eq!(entry.nh, Ipv4Addr::new(10, 200, 0, 1));
    assert_eq!(entry.dst_mac.unwrap().to_string(), "0a:53:43:00:00:01");
    assert_eq!(
        forward(&probe(nth_prefix(0)), &sc.fib, &sc.table),
        ForwardResult::Delivered(PeerId(0))
    );
}
