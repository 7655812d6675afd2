// SPDX-License-Identifier: Apache-2.0

//! Synthetic route feeds for simulations, benchmarks and tests.

use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::route::BgpUpdate;
use crate::types::{PeerId, Prefix};

/// The `i`-th synthetic /24, counting up from 1.0.0.0/24.
pub fn nth_prefix(i: u32) -> Prefix {
    Prefix::new(Ipv4Addr::from((1u32 << 24) + (i << 8)), 24).expect("aligned /24")
}

/// Every peer announces every one of `prefix_count` prefixes with its own
/// attributes, peer after peer.
pub fn full_table_feed(peers: &[(PeerId, u32, u32)], prefix_count: u32) -> Vec<BgpUpdate> {
    let mut out = Vec::with_capacity(peers.len() * prefix_count as usize);
    for &(peer, local_pref, as_path_len) in peers {
        out.extend((0..prefix_count).map(|i| BgpUpdate::announce(peer, nth_prefix(i), local_pref, as_path_len)));
    }
    out
}

/// One prefix per ordered peer pair (a, b) with `a` preferred over `b`, so
/// that every pair becomes some prefix's (best, second-best).
pub fn all_pairs_feed(n_peers: u16) -> Vec<BgpUpdate> {
    let mut out = Vec::new();
    let mut i = 0;
    for a in 0..n_peers {
        for b in 0..n_peers {
            if a == b {
                continue;
            }
            out.push(BgpUpdate::announce(PeerId(a), nth_prefix(i), 200, 1));
            out.push(BgpUpdate::announce(PeerId(b), nth_prefix(i), 100, 1));
            i += 1;
        }
    }
    out
}

/// Random announce/withdraw stream. Withdrawals target a route that is
/// currently present; when the drawn prefix has none, an announce is emitted
/// instead.
pub fn random_feed<R: Rng>(
    rng: &mut R,
    n_peers: u16,
    n_prefixes: u32,
    n_updates: usize,
    announce_ratio: f64,
) -> Vec<BgpUpdate> {
    let mut present: Vec<Vec<PeerId>> = vec![Vec::new(); n_prefixes as usize];
    let mut out = Vec::with_capacity(n_updates);
    for _ in 0..n_updates {
        let idx = rng.gen_range(0..n_prefixes);
        let prefix = nth_prefix(idx);
        let routes = &mut present[idx as usize];
        if !routes.is_empty() && !rng.gen_bool(announce_ratio) {
            let pos = rng.gen_range(0..routes.len());
            let peer = routes.swap_remove(pos);
            out.push(BgpUpdate::withdraw(peer, prefix));
            continue;
        }
        let peer = PeerId(rng.gen_range(0..n_peers));
        if !routes.contains(&peer) {
            routes.push(peer);
        }
        let local_pref = *[100u32, 150, 200].choose(rng).expect("non-empty");
        let as_path_len = rng.gen_range(1..6);
        out.push(BgpUpdate::announce(peer, prefix, local_pref, as_path_len));
    }
    out
}
