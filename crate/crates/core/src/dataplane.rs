// SPDX-License-Identifier: Apache-2.0

//! Two-stage forwarding model: a router FIB resolving next-hops to MAC
//! addresses through ARP, followed by a switch flow table that matches on the
//! destination MAC.
//!
//! In flat mode every FIB entry carries a real peer address. In supercharged
//! mode entries carry a virtual next-hop whose VMAC the switch rewrites, so a
//! failover touches only switch rules.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::Ipv4Addr;

use crate::engine::Engine;
use crate::types::{MacAddr, PeerDirectory, PeerId, Port, Prefix, SimTime};

/// Priority of the rule that sends a group's traffic to its primary.
pub const DEFAULT_RULE_PRIORITY: u16 = 5;
/// Priority of the rule that redirects a group to its backup.
pub const FAILOVER_RULE_PRIORITY: u16 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FibMode {
    Flat,
    Supercharged,
}

impl FibMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Supercharged => "supercharged",
        }
    }
}

impl std::str::FromStr for FibMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Self::Flat),
            "supercharged" => Ok(Self::Supercharged),
            other => Err(format!("unknown mode `{other}` (flat|supercharged)")),
        }
    }
}

/// Longest-prefix-match table: one hash map per prefix length.
#[derive(Debug, Clone)]
pub struct LpmTable<V> {
    by_len: Vec<HashMap<u32, V>>,
    len: usize,
}

impl<V> Default for LpmTable<V> {
    fn default() -> Self {
        Self {
            by_len: (0..=32).map(|_| HashMap::new()).collect(),
            len: 0,
        }
    }
}

impl<V> LpmTable<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prefix: Prefix, value: V) -> Option<V> {
        let old = self.by_len[prefix.len() as usize].insert(prefix.raw_addr(), value);
        if old.is_none() {
            self.len += 1;
        }
        old
    }

    pub fn remove(&mut self, prefix: &Prefix) -> Option<V> {
        let old = self.by_len[prefix.len() as usize].remove(&prefix.raw_addr());
        if old.is_some() {
            self.len -= 1;
        }
        old
    }

    pub fn get(&self, prefix: &Prefix) -> Option<&V> {
        self.by_len[prefix.len() as usize].get(&prefix.raw_addr())
    }

    pub fn get_mut(&mut self, prefix: &Prefix) -> Option<&mut V> {
        self.by_len[prefix.len() as usize].get_mut(&prefix.raw_addr())
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<(Prefix, &V)> {
        let raw = u32::from(ip);
        for len in (0..=32u8).rev() {
            let table = &self.by_len[len as usize];
            if table.is_empty() {
                continue;
            }
            let p = Prefix::truncating(Ipv4Addr::from(raw), len);
            if let Some(v) = table.get(&p.raw_addr()) {
                return Some((p, v));
            }
        }
        None
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All entries in ascending prefix order.
    pub fn sorted_entries(&self) -> Vec<(Prefix, &V)> {
        let mut out: Vec<(Prefix, &V)> = self
            .by_len
            .iter()
            .enumerate()
            .flat_map(|(len, t)| {
                t.iter()
                    .map(move |(addr, v)| (Prefix::truncating(Ipv4Addr::from(*addr), len as u8), v))
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

/// Answers the router's ARP queries.
pub trait ArpResolver {
    fn resolve(&self, ip: Ipv4Addr) -> Option<MacAddr>;
}

impl ArpResolver for PeerDirectory {
    fn resolve(&self, ip: Ipv4Addr) -> Option<MacAddr> {
        self.by_ip(ip).map(|p| p.mac)
    }
}

/// The SDN controller's responder: VMACs for live VNHs, real MACs for peers.
impl ArpResolver for Engine {
    fn resolve(&self, ip: Ipv4Addr) -> Option<MacAddr> {
        self.group_by_vnh(ip)
            .map(|g| g.vmac)
            .or_else(|| self.peers().resolve(ip))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArpMiss(pub Ipv4Addr);

pub fn arp_resolve(resolver: &impl ArpResolver, ip: Ipv4Addr) -> Result<MacAddr, ArpMiss> {
    resolver.resolve(ip).ok_or(ArpMiss(ip))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FibEntry {
    pub nh: Ipv4Addr,
    /// `None` when ARP resolution failed.
    pub dst_mac: Option<MacAddr>,
}

#[derive(Debug, Clone)]
pub struct RouterFib {
    mode: FibMode,
    entries: LpmTable<FibEntry>,
    arp_cache: HashMap<Ipv4Addr, MacAddr>,
    changes: u64,
}

impl RouterFib {
    pub fn new(mode: FibMode) -> Self {
        Self {
            mode,
            entries: LpmTable::new(),
            arp_cache: HashMap::new(),
            changes: 0,
        }
    }

    pub fn mode(&self) -> FibMode {
        self.mode
    }

    /// Installs or replaces the entry for `prefix`, resolving `nh` through the
    /// ARP cache or, on a miss, through `resolver`.
    pub fn install(&mut self, prefix: Prefix, nh: Ipv4Addr, resolver: &impl ArpResolver) {
        let dst_mac = match self.arp_cache.get(&nh) {
            Some(mac) => Some(*mac),
            None => {
                let resolved = arp_resolve(resolver, nh).ok();
                if let Some(mac) = resolved {
                    self.arp_cache.insert(nh, mac);
                }
                resolved
            }
        };
        let entry = FibEntry { nh, dst_mac };
        if self.entries.insert(prefix, entry) != Some(entry) {
            self.changes += 1;
        }
    }

    pub fn remove(&mut self, prefix: &Prefix) -> Option<FibEntry> {
        let old = self.entries.remove(prefix);
        if old.is_some() {
            self.changes += 1;
        }
        old
    }

    /// Drops a cached ARP binding, e.g. when a virtual next-hop is retired.
    pub fn flush_arp(&mut self, ip: Ipv4Addr) {
        self.arp_cache.remove(&ip);
    }

    pub fn entry(&self, prefix: &Prefix) -> Option<&FibEntry> {
        self.entries.get(prefix)
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<(Prefix, &FibEntry)> {
        self.entries.lookup(ip)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entry insertions, replacements and removals so far.
    pub fn changes(&self) -> u64 {
        self.changes
    }

    pub fn entries(&self) -> &LpmTable<FibEntry> {
        &self.entries
    }
}

/// Installs `prefix -> nh` in the router FIB.
pub fn router_install(fib: &mut RouterFib, prefix: Prefix, nh: Ipv4Addr, resolver: &impl ArpResolver) {
    fib.install(prefix, nh, resolver);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowRule {
    pub match_dst_mac: MacAddr,
    pub rewrite_dst_mac: MacAddr,
    pub output_port: Port,
    pub priority: u16,
}

#[derive(Debug, Clone, Default)]
pub struct SwitchTable {
    rules: HashMap<MacAddr, BTreeMap<u16, FlowRule>>,
    l2: HashMap<MacAddr, Port>,
    owners: HashMap<Port, PeerId>,
    down_ports: HashSet<Port>,
    changes: u64,
}

impl SwitchTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Switch with one L2 entry and one port per peer.
    pub fn for_peers(peers: &PeerDirectory) -> Self {
        let mut table = Self::new();
        for p in peers.iter() {
            table.l2.insert(p.mac, p.port);
            table.owners.insert(p.port, p.id);
        }
        table
    }

    /// Installs `rule`, replacing any rule with the same match and priority.
    /// Returns whether the table changed.
    pub fn apply(&mut self, rule: FlowRule) -> bool {
        let slot = self.rules.entry(rule.match_dst_mac).or_default();
        let changed = slot.insert(rule.priority, rule) != Some(rule);
        if changed {
            self.changes += 1;
        }
        changed
    }

    pub fn remove(&mut self, match_dst_mac: MacAddr, priority: u16) -> Option<FlowRule> {
        let slot = self.rules.get_mut(&match_dst_mac)?;
        let old = slot.remove(&priority);
        if slot.is_empty() {
            self.rules.remove(&match_dst_mac);
        }
        if old.is_some() {
            self.changes += 1;
        }
        old
    }

    /// Highest-priority rule matching `dst_mac`.
    pub fn lookup_rule(&self, dst_mac: MacAddr) -> Option<&FlowRule> {
        self.rules.get(&dst_mac).and_then(|slot| slot.values().next_back())
    }

    pub fn set_port_down(&mut self, port: Port, down: bool) {
        if down {
            self.down_ports.insert(port);
        } else {
            self.down_ports.remove(&port);
        }
    }

    pub fn is_port_down(&self, port: Port) -> bool {
        self.down_ports.contains(&port)
    }

    pub fn rule_count(&self) -> usize {
        self.rules.values().map(BTreeMap::len).sum()
    }

    /// Rules in a canonical order, for comparing tables.
    pub fn rules_sorted(&self) -> Vec<FlowRule> {
        let mut all: Vec<FlowRule> = self.rules.values().flat_map(|s| s.values().copied()).collect();
        all.sort_by_key(|r| (r.match_dst_mac, r.priority));
        all
    }

    /// Number of rule installs and removals that changed the table.
    pub fn changes(&self) -> u64 {
        self.changes
    }
}

pub fn switch_apply(table: &mut SwitchTable, rule: FlowRule) {
    table.apply(rule);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub dst_ip: Ipv4Addr,
    pub timestamp: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    NoRoute,
    Unresolved,
    NoFlow,
    /// The egress port leads to a failed peer.
    LinkDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForwardResult {
    Delivered(PeerId),
    Dropped(DropReason),
}

/// Router stage (LPM, destination MAC from ARP) then switch stage (rule
/// rewrite or plain L2).
pub fn forward(packet: &Packet, fib: &RouterFib, table: &SwitchTable) -> ForwardResult {
    let Some((_, entry)) = fib.lookup(packet.dst_ip) else {
        return ForwardResult::Dropped(DropReason::NoRoute);
    };
    let Some(dst_mac) = entry.dst_mac else {
        return ForwardResult::Dropped(DropReason::Unresolved);
    };
    let port = match table.lookup_rule(dst_mac) {
        Some(rule) => rule.output_port,
        None => match table.l2.get(&dst_mac) {
            Some(port) => *port,
            None => return ForwardResult::Dropped(DropReason::NoFlow),
        },
    };
    if table.is_port_down(port) {
        return ForwardResult::Dropped(DropReason::LinkDown);
    }
    match table.owners.get(&port) {
        Some(peer) => ForwardResult::Delivered(*peer),
        None => ForwardResult::Dropped(DropReason::NoFlow),
    }
}

/// Per-entry rewrite times of a flat FIB after `failed_nh` goes away: entry
/// `i` (1-based, ascending prefix order) is rewritten at `first + i * per_entry`
/// after detection.
pub fn flat_failover_schedule(
    fib: &RouterFib,
    failed_nh: Ipv4Addr,
    per_entry_us: f64,
    first_us: SimTime,
) -> Vec<(SimTime, Prefix)> {
    debug_assert_eq!(fib.mode(), FibMode::Flat);
    fib.entries
        .sorted_entries()
        .into_iter()
        .filter(|(_, e)| e.nh == failed_nh)
        .enumerate()
        .map(|(i, (p, _))| (first_us + ((i + 1) as f64 * per_entry_us).round() as SimTime, p))
        .collect()
}
