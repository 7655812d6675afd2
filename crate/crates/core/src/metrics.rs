// SPDX-License-Identifier: Apache-2.0

//! Probe bookkeeping and convergence statistics.
//!
//! Convergence of a flow is its largest inter-delivery gap minus the nominal
//! probe interval. The log keeps a running maximum instead of every timestamp.

use std::fmt::Write as _;
use std::io;
use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use crate::dataplane::FibMode;
use crate::types::SimTime;

/// Delivery and drop history of one probe flow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowLog {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub first_delivery: Option<SimTime>,
    pub last_delivery: Option<SimTime>,
    pub last_drop: Option<SimTime>,
    /// Largest gap between consecutive deliveries.
    pub max_gap: SimTime,
    last_event: Option<SimTime>,
}

impl FlowLog {
    /// Records one probe outcome. Timestamps must be strictly increasing.
    pub fn record(&mut self, t: SimTime, delivered: bool) {
        assert!(
            self.last_event.is_none_or(|prev| t > prev),
            "probe timestamps must increase"
        );
        self.last_event = Some(t);
        self.generated += 1;
        if delivered {
            if let Some(prev) = self.last_delivery {
                self.max_gap = self.max_gap.max(t - prev);
            }
            self.first_delivery.get_or_insert(t);
            self.last_delivery = Some(t);
            self.delivered += 1;
        } else {
            self.last_drop = Some(t);
            self.dropped += 1;
        }
    }

    /// False when the flow ends in drops or never saw two deliveries.
    pub fn recovered(&self) -> bool {
        self.delivered >= 2 && self.last_drop.is_none_or(|d| Some(d) < self.last_delivery)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProbeLog {
    pub flows: Vec<FlowLog>,
}

impl ProbeLog {
    pub fn new(flows: usize) -> Self {
        Self {
            flows: vec![FlowLog::default(); flows],
        }
    }

    pub fn record(&mut self, flow: usize, t: SimTime, delivered: bool) {
        self.flows[flow].record(t, delivered);
    }
}

/// Per-flow convergence time in µs; `None` marks a flow that never recovered.
pub fn measure_convergence(log: &ProbeLog, probe_interval: SimTime) -> Vec<Option<SimTime>> {
    log.flows
        .iter()
        .map(|f| f.recovered().then(|| f.max_gap.saturating_sub(probe_interval)))
        .collect()
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile<T: Copy>(sorted: &[T], pct: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Summary {
    pub p5: SimTime,
    pub p50: SimTime,
    pub p95: SimTime,
    pub max: SimTime,
}

impl Summary {
    pub fn of(values: &[SimTime]) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_unstable();
        Some(Self {
            p5: percentile(&v, 5.0)?,
            p50: percentile(&v, 50.0)?,
            p95: percentile(&v, 95.0)?,
            max: *v.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowReport {
    pub flow_id: usize,
    pub dst_ip: Ipv4Addr,
    pub convergence_us: Option<SimTime>,
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub last_drop: Option<SimTime>,
}

impl FlowReport {
    pub fn recovered(&self) -> bool {
        self.convergence_us.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsReport {
    pub mode: FibMode,
    pub prefix_count: u32,
    pub probe_interval_us: SimTime,
    pub flows: Vec<FlowReport>,
    /// Over recovered flows only.
    pub summary: Option<Summary>,
    /// Switch rule changes between the failure and the end of failover.
    pub switch_rule_changes: u64,
    /// Router FIB changes between the failure and the end of failover.
    pub fib_changes: u64,
    /// FIB changes caused by control-plane reconvergence afterwards.
    pub reconverge_fib_changes: u64,
    pub gc_rule_removals: u64,
    pub fail_at: Option<SimTime>,
    pub detect_at: Option<SimTime>,
    /// When the last failover action (switch rule or flat FIB rewrite) landed.
    pub failover_complete_at: Option<SimTime>,
    /// Probe drops at or after `failover_complete_at`.
    pub drops_after_failover: u64,
    pub horizon: SimTime,
}

impl MetricsReport {
    pub fn all_recovered(&self) -> bool {
        self.flows.iter().all(FlowReport::recovered)
    }

    pub fn unrecovered(&self) -> impl Iterator<Item = &FlowReport> {
        self.flows.iter().filter(|f| !f.recovered())
    }

    pub fn max_convergence(&self) -> Option<SimTime> {
        self.summary.map(|s| s.max)
    }
}

pub const CSV_HEADER: &str = "flow_id,dst_ip,mode,prefix_count,convergence_us,dropped,recovered";

/// Data rows followed by `p5,p50,p95,max` summary rows. No header.
pub fn csv_rows(report: &MetricsReport) -> String {
    let mode = report.mode.as_str();
    let n = report.prefix_count;
    let mut out = String::new();
    for f in &report.flows {
        let conv = f.convergence_us.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{mode},{n},{conv},{},{}",
            f.flow_id,
            f.dst_ip,
            f.dropped,
            f.recovered()
        );
    }
    if let Some(s) = report.summary {
        for (key, v) in [("p5", s.p5), ("p50", s.p50), ("p95", s.p95), ("max", s.max)] {
            let _ = writeln!(out, "{key},,{mode},{n},{v},,");
        }
    }
    out
}

pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&csv_rows(r));
    }
    out
}

pub fn emit_report(report: &MetricsReport, out_path: &Path) -> io::Result<()> {
    std::fs::write(out_path, render_csv(std::slice::from_ref(report)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatencyStats {
    pub samples: usize,
    pub p50: Option<Duration>,
    pub p99: Option<Duration>,
    pub max: Option<Duration>,
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<Duration>) -> Self {
        samples.sort_unstable();
        Self {
            samples: samples.len(),
            p50: percentile(&samples, 50.0),
            p99: percentile(&samples, 99.0),
            max: samples.last().copied(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(times: &[(SimTime, bool)]) -> ProbeLog {
        let mut log = ProbeLog::new(1);
        for &(t, ok) in times {
            log.record(0, t, ok);
        }
        log
    }

    #[test]
    fn uniform_gaps_converge_instantly() {
        let log = flow(&(0..10).map(|i| (i * 1000, true)).collect::<Vec<_>>());
        assert_eq!(measure_convergence(&log, 1000), vec![Some(0)]);
    }

    #[test]
    fn single_long_gap() {
        let mut times: Vec<(SimTime, bool)> = (0..10).map(|i| (i * 1000, true)).collect();
        times.extend((10..61).map(|i| (i * 1000, false)));
        times.extend((61..70).map(|i| (i * 1000, true)));
        let log = flow(&times);
        // deliveries at 9 ms and 61 ms: a 52 ms gap
        assert_eq!(log.flows[0].max_gap, 52_000);
        assert_eq!(measure_convergence(&log, 1000), vec![Some(51_000)]);
        let f = &log.flows[0];
        assert_eq!(f.delivered + f.dropped, f.generated);
    }

    #[test]
    fn silent_flow_never_recovers() {
        let log = flow(&[(0, true), (1000, true), (2000, false), (3000, false)]);
        assert_eq!(measure_convergence(&log, 1000), vec![None]);
        let log = flow(&[(0, true)]);
        assert_eq!(measure_convergence(&log, 1000), vec![None]);
    }

    #[test]
    #[should_panic(expected = "increase")]
    fn timestamps_must_increase() {
        flow(&[(5, true), (5, true)]);
    }

    #[test]
    fn percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 5.0), Some(5));
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 95.0), Some(95));
        assert_eq!(percentile(&v, 99.0), Some(99));
        assert_eq!(percentile(&[7u64], 99.0), Some(7));
        assert_eq!(percentile::<u64>(&[], 50.0), None);
        assert_eq!(Summary::of(&[3, 1, 2]).unwrap().max, 3);
    }

    fn report(flows: usize) -> MetricsReport {
        let flows: Vec<FlowReport> = (0..flows)
            .map(|i| FlowReport {
                flow_id: i,
                dst_ip: Ipv4Addr::new(1, 0, i as u8, 1),
                convergence_us: Some(105_000),
                generated: 10,
                delivered: 9,
                dropped: 1,
                last_drop: Some(5),
            })
            .collect();
        let values: Vec<SimTime> = flows.iter().filter_map(|f| f.convergence_us).collect();
        MetricsReport {
            mode: FibMode::Supercharged,
            prefix_count: 1000,
            probe_interval_us: 1000,
            summary: Summary::of(&values),
            flows,
            switch_rule_changes: 1,
            fib_changes: 0,
            reconverge_fib_changes: 0,
            gc_rule_removals: 0,
            fail_at: None,
            detect_at: None,
            failover_complete_at: None,
            drops_after_failover: 0,
            horizon: 0,
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(render_csv(&[report(0)]), format!("{CSV_HEADER}\n"));
        let csv = render_csv(&[report(100)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 100 + 4);
        assert_eq!(lines[1], "0,1.0.0.1,supercharged,1000,105000,1,true");
        assert_eq!(lines[101], "p5,,supercharged,1000,105000,,");
        assert_eq!(lines[104], "max,,supercharged,1000,105000,,");
    }

    #[test]
    fn emit_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        emit_report(&report(3), &a).unwrap();
        emit_report(&report(3), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(emit_report(&report(1), &dir.path().join("missing/x.csv")).is_err());
    }

    #[test]
    fn latency_stats() {
        assert_eq!(LatencyStats::from_samples(vec![]).samples, 0);
        let one = LatencyStats::from_samples(vec![Duration::from_micros(3)]);
        assert_eq!((one.samples, one.p99), (1, Some(Duration::from_micros(3))));
    }
}
