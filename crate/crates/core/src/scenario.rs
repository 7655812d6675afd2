// SPDX-License-Identifier: Apache-2.0

//! Scenario files.
//!
//! A scenario is a small TOML document: top-level `key = value` settings, an
//! optional `[timers]` and `[allocator]` section, and one `[[peer]]` section
//! per neighbor in decision tie-break order.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::dataplane::FibMode;
use crate::engine::{EngineConfig, DEFAULT_BASE_VMAC, DEFAULT_BASE_VNH, DEFAULT_POOL_SIZE, DEFAULT_QUARANTINE_US};
use crate::feedgen;
use crate::route::{BgpUpdate, FeedParser, ParseError, PeerPolicy};
use crate::types::{MacAddr, PeerDirectory, PeerId, Port, Prefix, SimTime};

pub const DEFAULT_PROBE_COUNT: usize = 100;
pub const DEFAULT_PROBE_INTERVAL_US: SimTime = 1_000;
pub const DEFAULT_FAIL_TIME_US: SimTime = 1_000_000;
pub const DEFAULT_DETECT_US: SimTime = 100_000;
pub const DEFAULT_RULE_US: SimTime = 5_000;
/// Time until a flat FIB rewrites its first entry.
pub const DEFAULT_FIRST_ENTRY_US: SimTime = 375_000;
/// Per-entry rewrite cost of a flat FIB: 512k entries take 150 s in total
/// including the first-entry latency, i.e. (150 s - 375 ms) / 512000.
pub const DEFAULT_PER_ENTRY_US: f64 = (150_000_000.0 - 375_000.0) / 512_000.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("feed {path}: {source}")]
    Feed { path: PathBuf, source: ParseError },
}

fn invalid(field: &str, reason: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    mode: Option<String>,
    feed: Option<PathBuf>,
    prefix_count: Option<u32>,
    probe_count: Option<usize>,
    probe_interval_us: Option<SimTime>,
    fail_peer: Option<String>,
    fail_time_us: Option<SimTime>,
    seed: Option<u64>,
    reconverge: Option<bool>,
    timers: Option<RawTimers>,
    allocator: Option<RawAllocator>,
    #[serde(default)]
    peer: Vec<RawPeer>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimers {
    d_detect_us: Option<SimTime>,
    d_rule_us: Option<SimTime>,
    delta_entry_us: Option<f64>,
    l0_us: Option<SimTime>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAllocator {
    base_vnh: Option<String>,
    base_vmac: Option<String>,
    pool_size: Option<u64>,
    group_size: Option<usize>,
    quarantine_us: Option<SimTime>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPeer {
    name: String,
    router_ip: Option<String>,
    mac: Option<String>,
    port: Option<Port>,
    local_pref: Option<u32>,
    as_path_len: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timers {
    /// Failure to detection delay.
    pub d_detect_us: SimTime,
    /// Spacing between successive switch rule installs.
    pub d_rule_us: SimTime,
    /// Per-entry rewrite cost of the router FIB.
    pub delta_entry_us: f64,
    /// Delay before the router FIB rewrites its first entry.
    pub l0_us: SimTime,
}

impl Default for Timers {
    fn default() -> Self {
        Self {
            d_detect_us: DEFAULT_DETECT_US,
            d_rule_us: DEFAULT_RULE_US,
            delta_entry_us: DEFAULT_PER_ENTRY_US,
            l0_us: DEFAULT_FIRST_ENTRY_US,
        }
    }
}

/// Where the routes of a scenario come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedSource {
    /// Every peer announces `prefix_count` consecutive /24s with the
    /// attributes of its `[[peer]]` section.
    Synthetic,
    File {
        path: PathBuf,
        updates: Vec<BgpUpdate>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub peers: PeerDirectory,
    /// Synthetic-feed attributes per peer: (local_pref, as_path_len).
    pub peer_attributes: Vec<(u32, u32)>,
    pub feed: FeedSource,
    pub mode: FibMode,
    pub prefix_count: u32,
    pub probe_count: usize,
    pub probe_interval_us: SimTime,
    pub fail_peer: Option<PeerId>,
    pub fail_time_us: SimTime,
    pub timers: Timers,
    pub engine: EngineConfig,
    pub seed: u64,
    /// Feed the failed peer's withdrawals through the engine after failover.
    pub reconverge: bool,
}

impl Scenario {
    /// Parses scenario text. Relative feed paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text)?;

        let mode = match raw.mode.as_deref() {
            None => FibMode::Supercharged,
            Some(m) => m.parse().map_err(|e: String| invalid("mode", e))?,
        };

        if raw.peer.is_empty() {
            return Err(invalid("peer", "at least one [[peer]] section is required"));
        }
        let mut peers = PeerDirectory::new();
        let mut peer_attributes = Vec::new();
        for (i, p) in raw.peer.iter().enumerate() {
            let field = |f: &str| format!("peer[{i}].{f}");
            let idx = i as u32 + 1;
            let router_ip = match &p.router_ip {
                Some(s) => s.parse().map_err(|e| invalid(&field("router_ip"), e))?,
                None => Ipv4Addr::from(0xac10_0000 | idx),
            };
            let mac = match &p.mac {
                Some(s) => s.parse().map_err(|e| invalid(&field("mac"), e))?,
                None => MacAddr::from_u64(0x0200_0000_0000 | idx as u64).expect("48-bit"),
            };
            let port = p.port.unwrap_or(idx as Port);
            peers
                .register(&p.name, router_ip, mac, port)
                .map_err(|e| invalid(&field("name"), e))?;
            peer_attributes.push((p.local_pref.unwrap_or(100), p.as_path_len.unwrap_or(1)));
        }

        let fail_peer = match &raw.fail_peer {
            None => None,
            Some(name) => Some(
                peers
                    .lookup(name)
                    .ok_or_else(|| invalid("fail_peer", format!("`{name}` is not a declared peer")))?,
            ),
        };

        let (feed, prefix_count) = match &raw.feed {
            None => {
                let n = raw
                    .prefix_count
                    .ok_or_else(|| invalid("prefix_count", "required when no feed file is given"))?;
                (FeedSource::Synthetic, n)
            }
            Some(rel) => {
                let path = base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                    path: path.clone(),
                    source,
                })?;
                let updates = FeedParser::new(&mut peers, PeerPolicy::Known)
                    .parse_feed(&text)
                    .map_err(|source| ScenarioError::Feed {
                        path: path.clone(),
                        source,
                    })?;
                let distinct = announced_prefixes(&updates).len() as u32;
                if let Some(n) = raw.prefix_count {
                    if n != distinct {
                        return Err(invalid(
                            "prefix_count",
                            format!("feed announces {distinct} prefixes, scenario says {n}"),
                        ));
                    }
                }
                (FeedSource::File { path, updates }, distinct)
            }
        };

        let probe_count = raw.probe_count.unwrap_or(DEFAULT_PROBE_COUNT);
        if probe_count > prefix_count as usize {
            return Err(invalid(
                "probe_count",
                format!("{probe_count} probes exceed {prefix_count} prefixes"),
            ));
        }
        let probe_interval_us = raw.probe_interval_us.unwrap_or(DEFAULT_PROBE_INTERVAL_US);
        if probe_interval_us == 0 {
            return Err(invalid("probe_interval_us", "must be positive"));
        }

        let rt = raw.timers.unwrap_or_default();
        let defaults = Timers::default();
        let timers = Timers {
            d_detect_us: rt.d_detect_us.unwrap_or(defaults.d_detect_us),
            d_rule_us: rt.d_rule_us.unwrap_or(defaults.d_rule_us),
            delta_entry_us: rt.delta_entry_us.unwrap_or(defaults.delta_entry_us),
            l0_us: rt.l0_us.unwrap_or(defaults.l0_us),
        };
        if !(timers.delta_entry_us.is_finite() && timers.delta_entry_us >= 0.0) {
            return Err(invalid("timers.delta_entry_us", "must be a finite non-negative number"));
        }

        let ra = raw.allocator.unwrap_or_default();
        let engine = EngineConfig {
            base_vnh: match ra.base_vnh {
                Some(s) => s.parse().map_err(|e| invalid("allocator.base_vnh", e))?,
                None => DEFAULT_BASE_VNH,
            },
            base_vmac: match ra.base_vmac {
                Some(s) => s.parse().map_err(|e| invalid("allocator.base_vmac", e))?,
                None => MacAddr::from_u64(DEFAULT_BASE_VMAC).expect("48-bit"),
            },
            pool_size: ra.pool_size.unwrap_or(DEFAULT_POOL_SIZE),
            group_size: ra.group_size.unwrap_or(2),
            quarantine_us: ra.quarantine_us.unwrap_or(DEFAULT_QUARANTINE_US),
        };
        if engine.group_size < 2 {
            return Err(invalid("allocator.group_size", "must be at least 2"));
        }

        Ok(Self {
            peers,
            peer_attributes,
            feed,
            mode,
            prefix_count,
            probe_count,
            probe_interval_us,
            fail_peer,
            fail_time_us: raw.fail_time_us.unwrap_or(DEFAULT_FAIL_TIME_US),
            timers,
            engine,
            seed: raw.seed.unwrap_or(0),
            reconverge: raw.reconverge.unwrap_or(false),
        })
    }

    /// Copy of a synthetic scenario with another table size.
    pub fn with_prefix_count(&self, prefix_count: u32) -> Result<Self, ScenarioError> {
        if !matches!(self.feed, FeedSource::Synthetic) {
            return Err(invalid("feed", "prefix sweeps need a synthetic feed"));
        }
        if self.probe_count > prefix_count as usize {
            return Err(invalid(
                "probe_count",
                format!("{} probes exceed {prefix_count} prefixes", self.probe_count),
            ));
        }
        Ok(Self {
            prefix_count,
            ..self.clone()
        })
    }

    /// The update stream replayed before traffic starts.
    pub fn updates(&self) -> Vec<BgpUpdate> {
        match &self.feed {
            FeedSource::Synthetic => {
                let peers: Vec<(PeerId, u32, u32)> = self
                    .peers
                    .iter()
                    .zip(&self.peer_attributes)
                    .map(|(p, &(lp, asp))| (p.id, lp, asp))
                    .collect();
                feedgen::full_table_feed(&peers, self.prefix_count)
            }
            FeedSource::File { updates, .. } => updates.clone(),
        }
    }

    /// Candidate probe destinations: every announced prefix, ascending.
    pub fn prefixes(&self) -> Vec<Prefix> {
        match &self.feed {
            FeedSource::Synthetic => (0..self.prefix_count).map(feedgen::nth_prefix).collect(),
            FeedSource::File { updates, .. } => announced_prefixes(updates).into_iter().collect(),
        }
    }
}

fn announced_prefixes(updates: &[BgpUpdate]) -> BTreeSet<Prefix> {
    updates
        .iter()
        .filter_map(|u| match u {
            BgpUpdate::Announce { prefix, .. } => Some(*prefix),
            BgpUpdate::Withdraw { .. } => None,
        })
        .collect()
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::parse(&text, path.parent().unwrap_or(Path::new(".")))
}
