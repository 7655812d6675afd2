// SPDX-License-Identifier: Apache-2.0

//! Peer-down handling: switch rewrite rules that move every backup-group whose
//! primary failed onto its backup, and the BGP withdrawals that follow.

use crate::dataplane::{FlowRule, SwitchTable, DEFAULT_RULE_PRIORITY, FAILOVER_RULE_PRIORITY};
use crate::engine::{BackupGroup, EgressAction, Engine, EngineError, GroupKey};
use crate::route::BgpUpdate;
use crate::types::{PeerDirectory, PeerId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub peer: PeerId,
    pub fail_time: SimTime,
    pub detect_time: SimTime,
}

impl DetectionEvent {
    pub fn new(peer: PeerId, fail_time: SimTime, detect_delay: SimTime) -> Self {
        Self {
            peer,
            fail_time,
            detect_time: fail_time + detect_delay,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FailoverPlan {
    pub rules: Vec<FlowRule>,
    pub affected_groups: Vec<GroupKey>,
}

impl FailoverPlan {
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Rule steering a group's VMAC to its primary peer.
pub fn default_rule(group: &BackupGroup, peers: &PeerDirectory) -> FlowRule {
    let primary = peers.get(group.key.primary());
    FlowRule {
        match_dst_mac: group.vmac,
        rewrite_dst_mac: primary.mac,
        output_port: primary.port,
        priority: DEFAULT_RULE_PRIORITY,
    }
}

/// Rule steering a group's VMAC to its backup peer.
pub fn failover_rule(group: &BackupGroup, peers: &PeerDirectory) -> FlowRule {
    let backup = peers.get(group.key.backup());
    FlowRule {
        match_dst_mac: group.vmac,
        rewrite_dst_mac: backup.mac,
        output_port: backup.port,
        priority: FAILOVER_RULE_PRIORITY,
    }
}

/// One rule per group whose primary is `peer`. Groups where `peer` is only a
/// backup are left alone.
pub fn on_peer_down(engine: &Engine, peer: PeerId) -> FailoverPlan {
    let mut plan = FailoverPlan::default();
    for group in engine.groups_with_primary(peer) {
        plan.rules.push(failover_rule(group, engine.peers()));
        plan.affected_groups.push(group.key.clone());
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledRule {
    pub install_time: SimTime,
    pub rule: FlowRule,
}

/// Serializes plan rules: rule `i` becomes active at `t_detect + (i+1) * d_rule`.
pub fn apply_plan(plan: &FailoverPlan, t_detect: SimTime, d_rule: SimTime) -> Vec<ScheduledRule> {
    plan.rules
        .iter()
        .enumerate()
        .map(|(i, rule)| ScheduledRule {
            install_time: t_detect + (i as SimTime + 1) * d_rule,
            rule: *rule,
        })
        .collect()
}

/// Installs every scheduled rule due at or before `now`, returning how many
/// were installed. `cursor` tracks progress through `schedule`.
pub fn install_due(table: &mut SwitchTable, schedule: &[ScheduledRule], cursor: &mut usize, now: SimTime) -> usize {
    let start = *cursor;
    while let Some(s) = schedule.get(*cursor) {
        if s.install_time > now {
            break;
        }
        table.apply(s.rule);
        *cursor += 1;
    }
    *cursor - start
}

/// Withdraws every route learned from `peer` and returns the resulting
/// router updates, in ascending prefix order.
pub fn control_plane_reconverge(engine: &mut Engine, peer: PeerId) -> Result<Vec<EgressAction>, EngineError> {
    let mut actions = Vec::new();
    for prefix in engine.rib().prefixes_via(peer) {
        actions.extend(engine.process_update(&BgpUpdate::withdraw(peer, prefix))?);
    }
    Ok(actions)
}
