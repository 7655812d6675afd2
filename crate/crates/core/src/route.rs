// SPDX-License-Identifier: Apache-2.0

//! Routes, the route-feed text format and the per-prefix RIB.
//!
//! The RIB keeps, for every prefix, the candidate routes sorted best-first by
//! [`decision_rank`]. The first two entries of that list are what the
//! backup-group engine turns into a (primary, backup) pair.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::types::{AddrError, PeerDirectory, PeerError, PeerId, Prefix};

/// One candidate route for a prefix, as learned from a peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Route {
    pub peer: PeerId,
    pub local_pref: u32,
    pub as_path_len: u32,
}

impl Route {
    pub fn new(peer: PeerId, local_pref: u32, as_path_len: u32) -> Self {
        Self {
            peer,
            local_pref,
            as_path_len,
        }
    }
}

/// Preference order: higher local-pref, then shorter AS path, then lower peer id.
pub fn compare_routes(a: &Route, b: &Route) -> Ordering {
    b.local_pref
        .cmp(&a.local_pref)
        .then(a.as_path_len.cmp(&b.as_path_len))
        .then(a.peer.cmp(&b.peer))
}

/// Sorts a set of routes best-first. Deterministic for any input order.
pub fn decision_rank(mut routes: Vec<Route>) -> Vec<Route> {
    routes.sort_unstable_by(compare_routes);
    routes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BgpUpdate {
    Announce { prefix: Prefix, route: Route },
    Withdraw { prefix: Prefix, peer: PeerId },
}

impl BgpUpdate {
    pub fn announce(peer: PeerId, prefix: Prefix, local_pref: u32, as_path_len: u32) -> Self {
        Self::Announce {
            prefix,
            route: Route::new(peer, local_pref, as_path_len),
        }
    }

    pub fn withdraw(peer: PeerId, prefix: Prefix) -> Self {
        Self::Withdraw { prefix, peer }
    }

    pub fn prefix(&self) -> Prefix {
        match self {
            Self::Announce { prefix, .. } | Self::Withdraw { prefix, .. } => *prefix,
        }
    }

    pub fn peer(&self) -> PeerId {
        match self {
            Self::Announce { route, .. } => route.peer,
            Self::Withdraw { peer, .. } => *peer,
        }
    }

    /// Renders the update in feed syntax.
    pub fn to_feed_line(&self, peers: &PeerDirectory) -> String {
        match self {
            Self::Announce { prefix, route } => format!(
                "A {} {} {} {}",
                peers.get(route.peer).name,
                prefix,
                route.local_pref,
                route.as_path_len
            ),
            Self::Withdraw { prefix, peer } => {
                format!("W {} {}", peers.get(*peer).name, prefix)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: invalid {field}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub field: &'static str,
    pub reason: String,
}

impl ParseError {
    fn new(line: usize, field: &'static str, reason: impl fmt::Display) -> Self {
        Self {
            line,
            field,
            reason: reason.to_string(),
        }
    }
}

/// How the parser treats peer names it has not seen before.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerPolicy {
    /// Register unknown peers with generated addresses.
    AutoRegister,
    /// Reject unknown peers.
    Known,
}

/// Decodes route-feed lines into updates, resolving peer names through a
/// [`PeerDirectory`].
#[derive(Debug)]
pub struct FeedParser<'a> {
    peers: &'a mut PeerDirectory,
    policy: PeerPolicy,
}

impl<'a> FeedParser<'a> {
    pub fn new(peers: &'a mut PeerDirectory, policy: PeerPolicy) -> Self {
        Self { peers, policy }
    }

    /// Parses one line. Blank lines and `#` comments yield `Ok(None)`.
    pub fn parse_line(&mut self, line_no: usize, line: &str) -> Result<Option<BgpUpdate>, ParseError> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(None);
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let expected = match fields[0] {
            "A" => 5,
            "W" => 3,
            other => return Err(ParseError::new(line_no, "kind", format!("`{other}` is not A or W"))),
        };
        if fields.len() != expected {
            return Err(ParseError::new(
                line_no,
                "arity",
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        let peer = self.resolve_peer(line_no, fields[1])?;
        let prefix: Prefix = fields[2]
            .parse()
            .map_err(|e: AddrError| ParseError::new(line_no, "prefix", e))?;
        if fields[0] == "W" {
            return Ok(Some(BgpUpdate::withdraw(peer, prefix)));
        }
        let local_pref: u32 = fields[3]
            .parse()
            .map_err(|e| ParseError::new(line_no, "local_pref", e))?;
        let as_path_len: u32 = fields[4]
            .parse()
            .map_err(|e| ParseError::new(line_no, "as_path_len", e))?;
        Ok(Some(BgpUpdate::announce(peer, prefix, local_pref, as_path_len)))
    }

    fn resolve_peer(&mut self, line_no: usize, name: &str) -> Result<PeerId, ParseError> {
        match self.policy {
            PeerPolicy::AutoRegister => self
                .peers
                .get_or_register(name)
                .map_err(|e: PeerError| ParseError::new(line_no, "peer", e)),
            PeerPolicy::Known => self
                .peers
                .lookup(name)
                .ok_or_else(|| ParseError::new(line_no, "peer", format!("unknown peer `{name}`"))),
        }
    }

    /// Parses a whole feed. Line numbers are 1-based.
    pub fn parse_feed(&mut self, text: &str) -> Result<Vec<BgpUpdate>, ParseError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(update) = self.parse_line(i + 1, line)? {
                out.push(update);
            }
        }
        Ok(out)
    }
}

/// Parses a single feed line, registering unknown peers in `peers`.
pub fn parse_update(peers: &mut PeerDirectory, line: &str) -> Result<BgpUpdate, ParseError> {
    FeedParser::new(peers, PeerPolicy::AutoRegister)
        .parse_line(1, line)?
        .ok_or_else(|| ParseError::new(1, "line", "empty or comment line"))
}

/// The candidate routes of one prefix, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RibEntry {
    pub prefix: Prefix,
    pub routes: Vec<Route>,
}

impl RibEntry {
    pub fn next_hops(&self) -> Vec<PeerId> {
        self.routes.iter().map(|r| r.peer).collect()
    }
}

/// Ordered next-hop lists of one prefix before and after an update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RibDelta {
    pub prefix: Prefix,
    pub old: Vec<PeerId>,
    pub new: Vec<PeerId>,
}

impl RibDelta {
    pub fn is_noop(&self) -> bool {
        self.old == self.new
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RibDiagnostics {
    pub absent_withdrawals: u64,
    pub implicit_withdrawals: u64,
}

/// Single-writer routing information base.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rib {
    entries: BTreeMap<Prefix, RibEntry>,
    diagnostics: RibDiagnostics,
}

impl Rib {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, update: &BgpUpdate) -> RibDelta {
        let prefix = update.prefix();
        let old = self.entries.get(&prefix).map(RibEntry::next_hops).unwrap_or_default();
        match *update {
            BgpUpdate::Announce { route, .. } => {
                let entry = self.entries.entry(prefix).or_insert_with(|| RibEntry {
                    prefix,
                    routes: Vec::new(),
                });
                if let Some(pos) = entry.routes.iter().position(|r| r.peer == route.peer) {
                    entry.routes.remove(pos);
                    self.diagnostics.implicit_withdrawals += 1;
                }
                let at = entry
                    .routes
                    .binary_search_by(|probe| compare_routes(probe, &route))
                    .unwrap_or_else(|e| e);
                entry.routes.insert(at, route);
            }
            BgpUpdate::Withdraw { peer, .. } => {
                let removed = match self.entries.get_mut(&prefix) {
                    Some(entry) => match entry.routes.iter().position(|r| r.peer == peer) {
                        Some(pos) => {
                            entry.routes.remove(pos);
                            if entry.routes.is_empty() {
                                self.entries.remove(&prefix);
                            }
                            true
                        }
                        None => false,
                    },
                    None => false,
                };
                if !removed {
                    self.diagnostics.absent_withdrawals += 1;
                }
            }
        }
        let new = self.entries.get(&prefix).map(RibEntry::next_hops).unwrap_or_default();
        RibDelta { prefix, old, new }
    }

    pub fn get(&self, prefix: &Prefix) -> Option<&RibEntry> {
        self.entries.get(prefix)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RibEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prefixes for which `peer` currently has a route, ascending.
    pub fn prefixes_via(&self, peer: PeerId) -> Vec<Prefix> {
        self.entries
            .values()
            .filter(|e| e.routes.iter().any(|r| r.peer == peer))
            .map(|e| e.prefix)
            .collect()
    }

    pub fn diagnostics(&self) -> RibDiagnostics {
        self.diagnostics
    }
}

/// Applies `update` to `rib` and returns the before/after next-hop lists.
pub fn rib_apply(rib: &mut Rib, update: &BgpUpdate) -> RibDelta {
    rib.apply(update)
}
