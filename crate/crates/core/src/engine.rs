// SPDX-License-Identifier: Apache-2.0

//! Online backup-group computation.
//!
//! Every prefix with at least two candidate routes is tagged with the virtual
//! next-hop of its backup-group: the ordered (best, second-best) peer pair. All
//! prefixes sharing a pair share one (VNH, VMAC) allocation, so the switch can
//! redirect all of them by rewriting a single flow entry.
//!
//! Allocations come from a monotone counter over configured base addresses.
//! Two engines fed the same update sequence therefore hand out the same
//! virtual addresses, and replicated controllers need no shared state.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::route::{decision_rank, BgpUpdate, Rib, RibDelta};
use crate::types::{MacAddr, PeerDirectory, PeerId, Prefix, SimTime};

pub const DEFAULT_BASE_VNH: Ipv4Addr = Ipv4Addr::new(10, 200, 0, 1);
pub const DEFAULT_BASE_VMAC: u64 = 0x0a53_4300_0001;
/// Host addresses of 10.200.0.0/16 from the default base onwards.
pub const DEFAULT_POOL_SIZE: u64 = 65_534;
pub const DEFAULT_QUARANTINE_US: SimTime = 5_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub base_vnh: Ipv4Addr,
    pub base_vmac: MacAddr,
    pub pool_size: u64,
    /// Number of leading next-hops forming a group. Must be at least 2.
    pub group_size: usize,
    pub quarantine_us: SimTime,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            base_vnh: DEFAULT_BASE_VNH,
            base_vmac: MacAddr::from_u64(DEFAULT_BASE_VMAC).unwrap(),
            pool_size: DEFAULT_POOL_SIZE,
            group_size: 2,
            quarantine_us: DEFAULT_QUARANTINE_US,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("virtual next-hop pool exhausted after {0} allocations")]
    PoolExhausted(u64),
    #[error("group size must be at least 2, got {0}")]
    GroupSize(usize),
    #[error("group {0} is already allocated")]
    AlreadyAllocated(GroupKey),
    #[error("unknown group {0}")]
    UnknownGroup(GroupKey),
    #[error("refcount of group {0} would drop below zero")]
    RefcountUnderflow(GroupKey),
    #[error("update references unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Ordered leading next-hops of a prefix: primary first, then backups.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey(Vec<PeerId>);

impl GroupKey {
    pub fn pair(primary: PeerId, backup: PeerId) -> Self {
        Self(vec![primary, backup])
    }

    pub fn from_members(members: &[PeerId]) -> Option<Self> {
        (members.len() >= 2).then(|| Self(members.to_vec()))
    }

    pub fn primary(&self) -> PeerId {
        self.0[0]
    }

    pub fn backup(&self) -> PeerId {
        self.0[1]
    }

    pub fn members(&self) -> &[PeerId] {
        &self.0
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, ")")
    }
}

/// What the router's FIB entry for a prefix points to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Binding {
    RealNh(PeerId),
    Group(GroupKey),
}

impl Binding {
    /// Binding implied by a best-first next-hop list; `None` when empty.
    pub fn of(next_hops: &[PeerId], group_size: usize) -> Option<Self> {
        match next_hops.len() {
            0 => None,
            1 => Some(Self::RealNh(next_hops[0])),
            n => Some(Self::Group(GroupKey(next_hops[..n.min(group_size)].to_vec()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupGroup {
    pub key: GroupKey,
    pub vnh: Ipv4Addr,
    pub vmac: MacAddr,
    /// Prefixes currently bound to this group.
    pub refcount: usize,
    /// Set while the group is unused and waiting out its quarantine.
    pub removal_at: Option<SimTime>,
}

/// Route update sent from the controller to the supercharged router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EgressAction {
    Announce { prefix: Prefix, nh: Ipv4Addr },
    Withdraw { prefix: Prefix },
}

impl EgressAction {
    pub fn prefix(&self) -> Prefix {
        match self {
            Self::Announce { prefix, .. } | Self::Withdraw { prefix } => *prefix,
        }
    }
}

impl fmt::Display for EgressAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Announce { prefix, nh } => write!(f, "A {prefix} {nh}"),
            Self::Withdraw { prefix } => write!(f, "W {prefix}"),
        }
    }
}

/// Data-plane relevant change of the group table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupEvent {
    Allocated {
        key: GroupKey,
        vnh: Ipv4Addr,
        vmac: MacAddr,
    },
    Removed {
        key: GroupKey,
        vnh: Ipv4Addr,
        vmac: MacAddr,
    },
}

/// Returned when a group's last prefix leaves it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledRemoval {
    pub key: GroupKey,
    pub at: SimTime,
}

/// A group that was garbage-collected; its switch rules must be retracted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRuleRemoval {
    pub key: GroupKey,
    pub vnh: Ipv4Addr,
    pub vmac: MacAddr,
}

/// Controller state: RIB, live backup-groups and per-prefix bindings.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    peers: PeerDirectory,
    rib: Rib,
    groups: BTreeMap<GroupKey, BackupGroup>,
    by_vnh: HashMap<Ipv4Addr, GroupKey>,
    allocation_counter: u64,
    bindings: BTreeMap<Prefix, Binding>,
    clock: SimTime,
    events: Vec<GroupEvent>,
}

impl Engine {
    pub fn new(config: EngineConfig, peers: PeerDirectory) -> Result<Self, EngineError> {
        if config.group_size < 2 {
            return Err(EngineError::GroupSize(config.group_size));
        }
        Ok(Self {
            config,
            peers,
            rib: Rib::new(),
            groups: BTreeMap::new(),
            by_vnh: HashMap::new(),
            allocation_counter: 0,
            bindings: BTreeMap::new(),
            clock: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn peers(&self) -> &PeerDirectory {
        &self.peers
    }

    pub fn rib(&self) -> &Rib {
        &self.rib
    }

    pub fn bindings(&self) -> &BTreeMap<Prefix, Binding> {
        &self.bindings
    }

    pub fn binding(&self, prefix: &Prefix) -> Option<&Binding> {
        self.bindings.get(prefix)
    }

    pub fn groups(&self) -> impl Iterator<Item = &BackupGroup> {
        self.groups.values()
    }

    pub fn group(&self, key: &GroupKey) -> Option<&BackupGroup> {
        self.groups.get(key)
    }

    pub fn group_by_vnh(&self, vnh: Ipv4Addr) -> Option<&BackupGroup> {
        self.by_vnh.get(&vnh).and_then(|k| self.groups.get(k))
    }

    pub fn live_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn allocation_counter(&self) -> u64 {
        self.allocation_counter
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    /// Runs one update through the RIB and returns what must be sent to the router.
    pub fn process_update(&mut self, update: &BgpUpdate) -> Result<Vec<EgressAction>, EngineError> {
        if self.peers.try_get(update.peer()).is_none() {
            return Err(EngineError::UnknownPeer(update.peer()));
        }
        let delta = self.rib.apply(update);
        let actions = self.egress_for(&delta)?;
        self.rebind(&delta)?;
        Ok(actions)
    }

    fn egress_for(&mut self, delta: &RibDelta) -> Result<Vec<EgressAction>, EngineError> {
        let RibDelta { prefix, old, new } = delta;
        let prefix = *prefix;
        if old.is_empty() {
            return Ok(match new.first() {
                Some(&best) => vec![self.announce_real(prefix, best)],
                // withdraw of a route we never had
                None => vec![],
            });
        }
        if new.is_empty() {
            return Ok(vec![EgressAction::Withdraw { prefix }]);
        }
        if new == old {
            return Ok(vec![]);
        }
        if new.len() == 1 {
            return Ok(vec![self.announce_real(prefix, new[0])]);
        }
        let k = self.config.group_size;
        let new_key = GroupKey(new[..new.len().min(k)].to_vec());
        let old_key = &old[..old.len().min(k)];
        if new_key.members() == old_key {
            return Ok(vec![]);
        }
        let vnh = match self.groups.get(&new_key) {
            Some(g) => g.vnh,
            None => self.allocate_vnh(&new_key)?.0,
        };
        Ok(vec![EgressAction::Announce { prefix, nh: vnh }])
    }

    fn announce_real(&self, prefix: Prefix, peer: PeerId) -> EgressAction {
        EgressAction::Announce {
            prefix,
            nh: self.peers.get(peer).router_ip,
        }
    }

    fn rebind(&mut self, delta: &RibDelta) -> Result<(), EngineError> {
        let next = Binding::of(&delta.new, self.config.group_size);
        let prev = self.bindings.get(&delta.prefix).cloned();
        if prev == next {
            return Ok(());
        }
        if let Some(Binding::Group(key)) = &next {
            self.acquire_group(key)?;
        }
        if let Some(Binding::Group(key)) = &prev {
            self.release_group(key)?;
        }
        match next {
            Some(b) => self.bindings.insert(delta.prefix, b),
            None => self.bindings.remove(&delta.prefix),
        };
        Ok(())
    }

    /// Hands out the next (VNH, VMAC) pair and registers a group for `key`.
    pub fn allocate_vnh(&mut self, key: &GroupKey) -> Result<(Ipv4Addr, MacAddr), EngineError> {
        if self.groups.contains_key(key) {
            return Err(EngineError::AlreadyAllocated(key.clone()));
        }
        let index = self.allocation_counter;
        if index >= self.config.pool_size {
            return Err(EngineError::PoolExhausted(index));
        }
        let vnh = u32::from(self.config.base_vnh)
            .checked_add(index as u32)
            .map(Ipv4Addr::from)
            .ok_or(EngineError::PoolExhausted(index))?;
        let vmac =
            MacAddr::from_u64(self.config.base_vmac.as_u64() + index).ok_or(EngineError::PoolExhausted(index))?;
        self.allocation_counter += 1;
        self.groups.insert(
            key.clone(),
            BackupGroup {
                key: key.clone(),
                vnh,
                vmac,
                refcount: 0,
                removal_at: None,
            },
        );
        self.by_vnh.insert(vnh, key.clone());
        self.events.push(GroupEvent::Allocated {
            key: key.clone(),
            vnh,
            vmac,
        });
        Ok((vnh, vmac))
    }

    fn acquire_group(&mut self, key: &GroupKey) -> Result<(), EngineError> {
        let group = self
            .groups
            .get_mut(key)
            .ok_or_else(|| EngineError::UnknownGroup(key.clone()))?;
        group.refcount += 1;
        group.removal_at = None;
        Ok(())
    }

    /// Drops one prefix reference. When the last reference goes, the group is
    /// scheduled for removal after the quarantine delay.
    pub fn release_group(&mut self, key: &GroupKey) -> Result<Option<ScheduledRemoval>, EngineError> {
        let at = self.clock + self.config.quarantine_us;
        let group = self
            .groups
            .get_mut(key)
            .ok_or_else(|| EngineError::UnknownGroup(key.clone()))?;
        if group.refcount == 0 {
            return Err(EngineError::RefcountUnderflow(key.clone()));
        }
        group.refcount -= 1;
        if group.refcount > 0 {
            return Ok(None);
        }
        group.removal_at = Some(at);
        Ok(Some(ScheduledRemoval { key: key.clone(), at }))
    }

    /// Moves the engine clock forward. The clock never goes backwards.
    pub fn advance_clock(&mut self, now: SimTime) {
        self.clock = self.clock.max(now);
    }

    /// Removes every quarantined group whose removal time has passed.
    pub fn collect_garbage(&mut self, now: SimTime) -> Vec<FlowRuleRemoval> {
        self.advance_clock(now);
        let expired: Vec<GroupKey> = self
            .groups
            .values()
            .filter(|g| g.refcount == 0 && g.removal_at.is_some_and(|t| t <= self.clock))
            .map(|g| g.key.clone())
            .collect();
        let mut removed = Vec::with_capacity(expired.len());
        for key in expired {
            let g = self.groups.remove(&key).expect("listed above");
            self.by_vnh.remove(&g.vnh);
            self.events.push(GroupEvent::Removed {
                key: key.clone(),
                vnh: g.vnh,
                vmac: g.vmac,
            });
            removed.push(FlowRuleRemoval {
                key,
                vnh: g.vnh,
                vmac: g.vmac,
            });
        }
        removed
    }

    /// Earliest pending group removal, if any.
    pub fn next_removal(&self) -> Option<SimTime> {
        self.groups.values().filter_map(|g| g.removal_at).min()
    }

    pub fn drain_group_events(&mut self) -> Vec<GroupEvent> {
        std::mem::take(&mut self.events)
    }

    /// Groups whose primary is `peer`, in key order.
    pub fn groups_with_primary(&self, peer: PeerId) -> impl Iterator<Item = &BackupGroup> {
        self.groups.values().filter(move |g| g.key.primary() == peer)
    }

    /// Checks bindings against a from-scratch recomputation, plus refcount and
    /// allocation uniqueness.
    pub fn check_invariants(&self) -> Result<(), EngineError> {
        let oracle = brute_force_groups(&self.rib, self.config.group_size);
        if oracle != self.bindings {
            let diff = oracle
                .iter()
                .find(|(p, b)| self.bindings.get(p) != Some(b))
                .map(|(p, _)| *p)
                .or_else(|| self.bindings.keys().find(|p| !oracle.contains_key(p)).copied());
            return Err(EngineError::Invariant(format!(
                "binding diverges from oracle at {}",
                diff.map(|p| p.to_string()).unwrap_or_default()
            )));
        }
        let mut counts: HashMap<&GroupKey, usize> = HashMap::new();
        for b in self.bindings.values() {
            if let Binding::Group(k) = b {
                *counts.entry(k).or_default() += 1;
            }
        }
        for g in self.groups.values() {
            let expected = counts.remove(&g.key).unwrap_or(0);
            if g.refcount != expected {
                return Err(EngineError::Invariant(format!(
                    "group {} refcount {} but {} prefixes bound",
                    g.key, g.refcount, expected
                )));
            }
            if (g.refcount == 0) != g.removal_at.is_some() {
                return Err(EngineError::Invariant(format!(
                    "group {} quarantine state inconsistent",
                    g.key
                )));
            }
            let members = g.key.members();
            if (1..members.len()).any(|i| members[..i].contains(&members[i])) {
                return Err(EngineError::Invariant(format!("group {} repeats a peer", g.key)));
            }
        }
        if let Some((k, _)) = counts.into_iter().next() {
            return Err(EngineError::Invariant(format!("prefix bound to missing group {k}")));
        }
        let mut vmacs: Vec<MacAddr> = self.groups.values().map(|g| g.vmac).collect();
        vmacs.sort();
        vmacs.dedup();
        if vmacs.len() != self.groups.len() || self.by_vnh.len() != self.groups.len() {
            return Err(EngineError::Invariant("virtual address reused".into()));
        }
        Ok(())
    }
}

/// Recomputes every prefix's binding from scratch by re-ranking its routes.
pub fn brute_force_groups(rib: &Rib, group_size: usize) -> BTreeMap<Prefix, Binding> {
    rib.entries()
        .filter_map(|entry| {
            let ranked: Vec<PeerId> = decision_rank(entry.routes.clone())
                .into_iter()
                .map(|r| r.peer)
                .collect();
            Binding::of(&ranked, group_size).map(|b| (entry.prefix, b))
        })
        .collect()
}
