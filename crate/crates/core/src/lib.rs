// SPDX-License-Identifier: Apache-2.0

//! Control plane and convergence simulator for a "supercharged" router: a
//! legacy router with a flat FIB, paired with an SDN switch and a controller
//! that together behave like a hierarchical FIB.
//!
//! * [`route`]: route feed parsing, decision process and RIB.
//! * [`engine`]: online backup-group computation and VNH/VMAC allocation.
//! * [`dataplane`]: router FIB, ARP, switch flow table and forwarding.
//! * [`failover`]: peer-down rule computation and control-plane reconvergence.
//! * [`scenario`], [`sim`], [`metrics`]: scenario files, the discrete-event
//!   run and the convergence report.

pub mod dataplane;
pub mod engine;
pub mod failover;
pub mod feedgen;
pub mod metrics;
pub mod route;
pub mod scenario;
pub mod sim;
pub mod types;

pub use dataplane::{forward, FibMode, FlowRule, ForwardResult, RouterFib, SwitchTable};
pub use engine::{brute_force_groups, BackupGroup, Binding, EgressAction, Engine, EngineConfig, GroupKey};
pub use failover::{apply_plan, control_plane_reconverge, on_peer_down, FailoverPlan};
pub use metrics::{emit_report, measure_convergence, MetricsReport, ProbeLog};
pub use route::{decision_rank, parse_update, rib_apply, BgpUpdate, Rib, RibDelta, Route};
pub use scenario::{load_scenario, Scenario};
pub use sim::{bench_control_plane, run, sweep};
pub use types::{MacAddr, Peer, PeerDirectory, PeerId, Prefix, SimTime};

/// Any error surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] route::ParseError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
