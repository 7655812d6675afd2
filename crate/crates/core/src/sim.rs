// SPDX-License-Identifier: Apache-2.0

//! Discrete-event run of one failure scenario.
//!
//! The feed is replayed at time zero, after which every probe flow sends one
//! packet per interval. The failed peer's port goes down at the failure time;
//! detection follows after the configured delay and triggers either the
//! switch failover plan (supercharged) or the entry-by-entry FIB rewrite
//! (flat). Probe outcomes are recorded with exact simulated timestamps.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::net::Ipv4Addr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataplane::{
    flat_failover_schedule, forward, FibMode, ForwardResult, Packet, RouterFib, SwitchTable, DEFAULT_RULE_PRIORITY,
    FAILOVER_RULE_PRIORITY,
};
use crate::engine::{EgressAction, Engine, EngineError, GroupEvent};
use crate::failover::{apply_plan, control_plane_reconverge, default_rule, on_peer_down, ScheduledRule};
use crate::metrics::{measure_convergence, FlowReport, LatencyStats, MetricsReport, ProbeLog, Summary};
use crate::route::{BgpUpdate, Rib};
use crate::scenario::Scenario;
use crate::types::{PeerDirectory, PeerId, Prefix, SimTime};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Probe,
    Fail(PeerId),
    Detect(PeerId),
    InstallRule(usize),
    FlatRewrite(usize),
    ReconvergeFib(usize),
    Collect,
}

impl Event {
    /// Control events run before probes scheduled for the same instant.
    fn class(&self) -> u8 {
        match self {
            Self::Probe => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    time: SimTime,
    class: u8,
    seq: u64,
    event: Event,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, class, seq)
        (other.time, other.class, other.seq).cmp(&(self.time, self.class, self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Time-ordered event queue; ties keep insertion order.
#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: SimTime, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            class: event.class(),
            seq: self.seq,
            event,
        });
    }

    fn pop(&mut self) -> Option<(SimTime, Event)> {
        self.heap.pop().map(|s| (s.time, s.event))
    }
}

#[allow(clippy::large_enum_variant)] // one per simulation
enum ControlPlane {
    Supercharged(Engine),
    Flat(Rib),
}

/// Picks `count` probe prefixes: the first and last one plus a seeded random
/// sample of the rest, returned in ascending order.
pub fn select_probes(prefixes: &[Prefix], count: usize, seed: u64) -> Vec<Prefix> {
    let n = prefixes.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![prefixes[0]];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n - 2, count - 2)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    idx.push(0);
    idx.push(n - 1);
    idx.sort_unstable();
    idx.into_iter().map(|i| prefixes[i]).collect()
}

struct Counters {
    fib: u64,
    switch: u64,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    peers: PeerDirectory,
    plane: ControlPlane,
    fib: RouterFib,
    table: SwitchTable,
    queue: EventQueue,
    probes: Vec<Ipv4Addr>,
    log: ProbeLog,
    horizon: SimTime,
    tail: SimTime,
    failed: Option<PeerId>,
    rule_schedule: Vec<ScheduledRule>,
    flat_schedule: Vec<(SimTime, Prefix)>,
    reconverge_actions: Vec<EgressAction>,
    reconverge_times: Vec<SimTime>,
    reconverge_pending: bool,
    pending_groups: Vec<GroupEvent>,
    at_failure: Option<Counters>,
    at_failover: Option<Counters>,
    fail_at: Option<SimTime>,
    detect_at: Option<SimTime>,
    failover_complete_at: Option<SimTime>,
    drops_after_failover: u64,
    reconverge_fib_changes: u64,
    gc_rule_removals: u64,
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        let peers = scenario.peers.clone();
        let mut table = SwitchTable::for_peers(&peers);
        let mut fib = RouterFib::new(scenario.mode);
        let updates = scenario.updates();
        let plane = match scenario.mode {
            FibMode::Supercharged => {
                let mut engine = Engine::new(scenario.engine.clone(), peers.clone())?;
                for u in &updates {
                    let actions = engine.process_update(u)?;
                    for ev in engine.drain_group_events() {
                        apply_group_event(&mut table, &mut fib, &engine, &ev);
                    }
                    for a in actions {
                        apply_action(&mut fib, &a, &engine);
                    }
                }
                ControlPlane::Supercharged(engine)
            }
            FibMode::Flat => {
                let mut rib = Rib::new();
                for u in &updates {
                    let delta = rib.apply(u);
                    if delta.old.first() != delta.new.first() {
                        match delta.new.first() {
                            Some(best) => fib.install(delta.prefix, peers.get(*best).router_ip, &peers),
                            None => {
                                fib.remove(&delta.prefix);
                            }
                        }
                    }
                }
                ControlPlane::Flat(rib)
            }
        };
        let probes: Vec<Ipv4Addr> = select_probes(&scenario.prefixes(), scenario.probe_count, scenario.seed)
            .iter()
            .map(Prefix::first_host)
            .collect();
        let tail = 10 * scenario.probe_interval_us;
        Ok(Self {
            scenario,
            peers,
            plane,
            fib,
            table,
            queue: EventQueue::default(),
            log: ProbeLog::new(probes.len()),
            probes,
            horizon: scenario.fail_time_us + tail,
            tail,
            failed: None,
            rule_schedule: Vec::new(),
            flat_schedule: Vec::new(),
            reconverge_actions: Vec::new(),
            reconverge_times: Vec::new(),
            reconverge_pending: false,
            pending_groups: Vec::new(),
            at_failure: None,
            at_failover: None,
            fail_at: None,
            detect_at: None,
            failover_complete_at: None,
            drops_after_failover: 0,
            reconverge_fib_changes: 0,
            gc_rule_removals: 0,
        })
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        if event != Event::Probe {
            self.horizon = self.horizon.max(time + self.tail);
        }
        self.queue.push(time, event);
    }

    fn counters(&self) -> Counters {
        Counters {
            fib: self.fib.changes(),
            switch: self.table.changes(),
        }
    }

    fn failover_done(&mut self, t: SimTime) {
        self.failover_complete_at = Some(t);
        self.at_failover = Some(self.counters());
    }

    fn run(mut self) -> Result<MetricsReport, SimError> {
        if !self.probes.is_empty() {
            self.schedule(0, Event::Probe);
        }
        if let Some(peer) = self.scenario.fail_peer {
            self.schedule(self.scenario.fail_time_us, Event::Fail(peer));
        }
        if let ControlPlane::Supercharged(engine) = &self.plane {
            if let Some(at) = engine.next_removal() {
                self.queue.push(at, Event::Collect);
            }
        }
        while let Some((t, event)) = self.queue.pop() {
            match event {
                Event::Probe => self.on_probe(t),
                Event::Fail(peer) => self.on_fail(t, peer),
                Event::Detect(peer) => self.on_detect(t, peer)?,
                Event::InstallRule(i) => self.on_install_rule(t, i),
                Event::FlatRewrite(i) => self.on_flat_rewrite(t, i),
                Event::ReconvergeFib(i) => self.on_reconverge_fib(t, i),
                Event::Collect => self.on_collect(t),
            }
        }
        Ok(self.report())
    }

    fn on_probe(&mut self, t: SimTime) {
        let settled = self.failover_complete_at.is_some_and(|c| t >= c);
        for (flow, dst) in self.probes.iter().enumerate() {
            let pkt = Packet {
                dst_ip: *dst,
                timestamp: t,
            };
            let delivered = matches!(forward(&pkt, &self.fib, &self.table), ForwardResult::Delivered(_));
            if !delivered && settled {
                self.drops_after_failover += 1;
            }
            self.log.record(flow, t, delivered);
        }
        let next = t + self.scenario.probe_interval_us;
        if next <= self.horizon {
            self.queue.push(next, Event::Probe);
        }
    }

    fn on_fail(&mut self, t: SimTime, peer: PeerId) {
        self.failed = Some(peer);
        self.fail_at = Some(t);
        self.table.set_port_down(self.peers.get(peer).port, true);
        self.at_failure = Some(self.counters());
        self.schedule(t + self.scenario.timers.d_detect_us, Event::Detect(peer));
    }

    fn on_detect(&mut self, t: SimTime, peer: PeerId) -> Result<(), SimError> {
        self.detect_at = Some(t);
        let timers = self.scenario.timers;
        match &mut self.plane {
            ControlPlane::Supercharged(engine) => {
                engine.advance_clock(t);
                let plan = on_peer_down(engine, peer);
                self.rule_schedule = apply_plan(&plan, t, timers.d_rule_us);
                let plan_done = self.rule_schedule.last().map_or(t, |s| s.install_time);
                if self.scenario.reconverge {
                    self.reconverge_actions = control_plane_reconverge(engine, peer)?;
                    self.pending_groups = engine.drain_group_events();
                    let base = (t + timers.l0_us).max(plan_done);
                    self.reconverge_times = entry_offsets(self.reconverge_actions.len(), timers.delta_entry_us)
                        .map(|o| base + o)
                        .collect();
                    if let Some(&first) = self.reconverge_times.first() {
                        self.reconverge_pending = true;
                        self.schedule(first, Event::ReconvergeFib(0));
                    }
                }
                match self.rule_schedule.first() {
                    Some(first) => self.schedule(first.install_time, Event::InstallRule(0)),
                    None => self.failover_done(t),
                }
            }
            ControlPlane::Flat(_) => {
                let failed_ip = self.peers.get(peer).router_ip;
                self.flat_schedule = flat_failover_schedule(&self.fib, failed_ip, timers.delta_entry_us, timers.l0_us)
                    .into_iter()
                    .map(|(offset, p)| (t + offset, p))
                    .collect();
                match self.flat_schedule.first() {
                    Some(&(first, _)) => self.schedule(first, Event::FlatRewrite(0)),
                    None => self.failover_done(t),
                }
            }
        }
        Ok(())
    }

    fn on_install_rule(&mut self, t: SimTime, i: usize) {
        self.table.apply(self.rule_schedule[i].rule);
        match self.rule_schedule.get(i + 1) {
            Some(next) => self.schedule(next.install_time, Event::InstallRule(i + 1)),
            None => self.failover_done(t),
        }
    }

    fn on_flat_rewrite(&mut self, t: SimTime, i: usize) {
        let prefix = self.flat_schedule[i].1;
        let failed = self.failed.expect("rewrite follows a failure");
        let ControlPlane::Flat(rib) = &mut self.plane else {
            unreachable!("flat rewrite in supercharged mode")
        };
        let delta = rib.apply(&BgpUpdate::withdraw(failed, prefix));
        match delta.new.first() {
            Some(best) => self.fib.install(prefix, self.peers.get(*best).router_ip, &self.peers),
            None => {
                self.fib.remove(&prefix);
            }
        }
        match self.flat_schedule.get(i + 1) {
            Some(&(next, _)) => self.schedule(next, Event::FlatRewrite(i + 1)),
            None => self.failover_done(t),
        }
    }

    fn on_reconverge_fib(&mut self, t: SimTime, i: usize) {
        let ControlPlane::Supercharged(engine) = &self.plane else {
            unreachable!("reconvergence needs the engine")
        };
        // groups created by reconvergence get their default rules before the
        // first FIB entry can point at them
        for ev in std::mem::take(&mut self.pending_groups) {
            apply_group_event(&mut self.table, &mut self.fib, engine, &ev);
        }
        let before = self.fib.changes();
        apply_action(&mut self.fib, &self.reconverge_actions[i], engine);
        self.reconverge_fib_changes += self.fib.changes() - before;
        match self.reconverge_times.get(i + 1) {
            Some(&next) => self.schedule(next, Event::ReconvergeFib(i + 1)),
            None => {
                self.reconverge_pending = false;
                let at = engine.next_removal().map_or(t, |r| r.max(t));
                self.schedule(at, Event::Collect);
            }
        }
    }

    fn on_collect(&mut self, t: SimTime) {
        if self.reconverge_pending {
            return;
        }
        let ControlPlane::Supercharged(engine) = &mut self.plane else {
            return;
        };
        for removal in engine.collect_garbage(t) {
            for priority in [DEFAULT_RULE_PRIORITY, FAILOVER_RULE_PRIORITY] {
                if self.table.remove(removal.vmac, priority).is_some() {
                    self.gc_rule_removals += 1;
                }
            }
            self.fib.flush_arp(removal.vnh);
        }
        engine.drain_group_events();
        if let Some(at) = engine.next_removal() {
            self.schedule(at, Event::Collect);
        }
    }

    fn report(self) -> MetricsReport {
        let convergence = measure_convergence(&self.log, self.scenario.probe_interval_us);
        let flows: Vec<FlowReport> = self
            .log
            .flows
            .iter()
            .zip(&convergence)
            .zip(&self.probes)
            .enumerate()
            .map(|(flow_id, ((f, conv), dst))| FlowReport {
                flow_id,
                dst_ip: *dst,
                convergence_us: *conv,
                generated: f.generated,
                delivered: f.delivered,
                dropped: f.dropped,
                last_drop: f.last_drop,
            })
            .collect();
        let values: Vec<SimTime> = convergence.iter().flatten().copied().collect();
        let (fib_changes, switch_rule_changes) = match (&self.at_failure, &self.at_failover) {
            (Some(a), Some(b)) => (b.fib - a.fib, b.switch - a.switch),
            _ => (0, 0),
        };
        MetricsReport {
            mode: self.scenario.mode,
            prefix_count: self.scenario.prefix_count,
            probe_interval_us: self.scenario.probe_interval_us,
            flows,
            summary: Summary::of(&values),
            switch_rule_changes,
            fib_changes,
            reconverge_fib_changes: self.reconverge_fib_changes,
            gc_rule_removals: self.gc_rule_removals,
            fail_at: self.fail_at,
            detect_at: self.detect_at,
            failover_complete_at: self.failover_complete_at,
            drops_after_failover: self.drops_after_failover,
            horizon: self.horizon,
        }
    }
}

/// Offsets `round((i+1) * per_entry)` for `n` successive entries.
fn entry_offsets(n: usize, per_entry: f64) -> impl Iterator<Item = SimTime> {
    (1..=n).map(move |i| (i as f64 * per_entry).round() as SimTime)
}

fn apply_group_event(table: &mut SwitchTable, fib: &mut RouterFib, engine: &Engine, event: &GroupEvent) {
    match event {
        GroupEvent::Allocated { key, .. } => {
            if let Some(group) = engine.group(key) {
                table.apply(default_rule(group, engine.peers()));
            }
        }
        GroupEvent::Removed { vnh, vmac, .. } => {
            table.remove(*vmac, DEFAULT_RULE_PRIORITY);
            table.remove(*vmac, FAILOVER_RULE_PRIORITY);
            fib.flush_arp(*vnh);
        }
    }
}

fn apply_action(fib: &mut RouterFib, action: &EgressAction, engine: &Engine) {
    match action {
        EgressAction::Announce { prefix, nh } => fib.install(*prefix, *nh, engine),
        EgressAction::Withdraw { prefix } => {
            fib.remove(prefix);
        }
    }
}

/// Simulates `scenario` and reports per-flow convergence. Deterministic for a
/// given scenario and seed.
pub fn run(scenario: &Scenario) -> Result<MetricsReport, SimError> {
    Sim::new(scenario)?.run()
}

/// Runs every (mode, prefix count) combination, in parallel, returning the
/// reports in input order (modes outer, counts inner).
pub fn sweep(scenario: &Scenario, modes: &[FibMode], counts: &[u32]) -> Result<Vec<MetricsReport>, crate::Error> {
    let mut variants = Vec::new();
    for &mode in modes {
        for &n in counts {
            let mut s = scenario.with_prefix_count(n)?;
            s.mode = mode;
            variants.push(s);
        }
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = variants.iter().map(|s| scope.spawn(move || run(s))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .expect("simulation thread panicked")
                    .map_err(crate::Error::from)
            })
            .collect()
    })
}

/// Wall-clock latency of `process_update` over the first `n` updates.
pub fn bench_control_plane(peers: PeerDirectory, updates: &[BgpUpdate], n: usize) -> Result<LatencyStats, EngineError> {
    let mut engine = Engine::new(Default::default(), peers)?;
    let mut samples = Vec::with_capacity(n.min(updates.len()));
    for u in updates.iter().take(n) {
        let start = Instant::now();
        let actions = engine.process_update(u)?;
        samples.push(start.elapsed());
        std::hint::black_box(actions);
    }
    Ok(LatencyStats::from_samples(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn scenario(extra: &str) -> Scenario {
        let text = format!(
            "prefix_count = 200\nprobe_count = 20\nfail_peer = \"r2\"\nfail_time_us = 50000\n{extra}\n\
             [[peer]]\nname = \"r2\"\nmac = \"00:00:00:00:00:aa\"\nport = 1\nlocal_pref = 200\n\
             [[peer]]\nname = \"r3\"\nmac = \"00:00:00:00:02:bb\"\nport = 2\n"
        );
        Scenario::parse(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn queue_orders_by_time_then_class() {
        let mut q = EventQueue::default();
        q.push(10, Event::Probe);
        q.push(10, Event::Collect);
        q.push(5, Event::Probe);
        q.push(10, Event::InstallRule(0));
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).collect();
        assert_eq!(
            order,
            vec![
                (5, Event::Probe),
                (10, Event::Collect),
                (10, Event::InstallRule(0)),
                (10, Event::Probe)
            ]
        );
    }

    #[test]
    fn probe_selection() {
        let prefixes: Vec<Prefix> = (0..50).map(crate::feedgen::nth_prefix).collect();
        let sel = select_probes(&prefixes, 10, 3);
        assert_eq!(sel.len(), 10);
        assert_eq!(sel[0], prefixes[0]);
        assert_eq!(sel[9], prefixes[49]);
        assert!(sel.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sel, select_probes(&prefixes, 10, 3));
        assert_ne!(sel, select_probes(&prefixes, 10, 4));
        assert_eq!(select_probes(&prefixes, 1, 0), vec![prefixes[0]]);
        assert!(select_probes(&prefixes, 0, 0).is_empty());
        assert_eq!(select_probes(&prefixes, 80, 0).len(), 50);
    }

    #[test]
    fn supercharged_two_peers() {
        let r = run(&scenario("")).unwrap();
        assert!(r.all_recovered());
        assert!(r.flows.iter().all(|f| f.convergence_us == Some(105_000)));
        assert_eq!((r.switch_rule_changes, r.fib_changes), (1, 0));
        assert_eq!(r.failover_complete_at, Some(50_000 + 105_000));
        assert_eq!(r.drops_after_failover, 0);
        for f in &r.flows {
            assert_eq!(f.generated, f.delivered + f.dropped);
            assert_eq!(f.dropped, 105);
        }
    }

    #[test]
    fn flat_two_peers() {
        let r = run(&scenario("mode = \"flat\"")).unwrap();
        assert!(r.all_recovered());
        assert_eq!((r.switch_rule_changes, r.fib_changes), (0, 200));
        // last entry: 100 ms detection + 375 ms + 200 entries
        let last = 100_000 + 375_000 + (200.0 * crate::scenario::DEFAULT_PER_ENTRY_US).round() as u64;
        assert_eq!(r.failover_complete_at, Some(50_000 + last));
        let max = r.max_convergence().unwrap();
        assert!(max >= last && max < last + 1_000, "{max} vs {last}");
    }

    #[test]
    fn no_failure_means_no_gaps() {
        let mut s = scenario("");
        s.fail_peer = None;
        let r = run(&s).unwrap();
        assert!(r.flows.iter().all(|f| f.convergence_us == Some(0) && f.dropped == 0));
        assert_eq!(r.fail_at, None);
    }

    #[test]
    fn reconvergence_keeps_traffic_flowing() {
        let r = run(&scenario("reconverge = true\n[allocator]\nquarantine_us = 1000")).unwrap();
        assert!(r.all_recovered());
        assert_eq!(r.drops_after_failover, 0);
        assert_eq!(r.reconverge_fib_changes, 200);
        // default + failover rule of the retired group
        assert_eq!(r.gc_rule_removals, 2);
        assert!(r.flows.iter().all(|f| f.convergence_us == Some(105_000)));
    }

    #[test]
    fn runs_are_deterministic() {
        let s = scenario("reconverge = true");
        assert_eq!(run(&s).unwrap(), run(&s).unwrap());
    }

    #[test]
    fn bench_shapes() {
        let peers = PeerDirectory::numbered(2);
        assert_eq!(bench_control_plane(peers.clone(), &[], 10).unwrap().samples, 0);
        let one = [BgpUpdate::announce(PeerId(0), crate::feedgen::nth_prefix(0), 100, 1)];
        let stats = bench_control_plane(peers, &one, 10).unwrap();
        assert_eq!(stats.samples, 1);
        assert_eq!(stats.p99, stats.max);
    }
}
