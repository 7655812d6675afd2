// SPDX-License-Identifier: Apache-2.0

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use supercharger::engine::{brute_force_groups, Binding};
use supercharger::metrics::{render_csv, MetricsReport};
use supercharger::route::{FeedParser, PeerPolicy};
use supercharger::{bench_control_plane, emit_report, feedgen, load_scenario, run, sweep};
use supercharger::{BgpUpdate, Engine, EngineConfig, Error, FibMode, PeerDirectory};

#[derive(Parser)]
#[command(
    name = "supercharger",
    version,
    about = "Backup-group controller and convergence simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one failure scenario and report per-flow convergence.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a feed through the controller and print the rewritten updates.
    Replay {
        feed: PathBuf,
        /// Peers are named p1..pN.
        #[arg(long)]
        peers: usize,
    },
    /// Replay a feed and check every binding against a from-scratch recomputation.
    Verify { feed: PathBuf },
    /// Measure per-update controller latency.
    Bench {
        feed: PathBuf,
        #[arg(long)]
        updates: Option<usize>,
    },
    /// Run a scenario across table sizes in both FIB modes.
    Sweep {
        scenario: PathBuf,
        /// Comma separated, `k`/`m` suffixes allowed.
        #[arg(long, default_value = "1k,10k,100k,512k")]
        prefixes: String,
        #[arg(long, default_value = "flat,supercharged")]
        modes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a random feed to stdout or a file.
    GenFeed {
        #[arg(long, default_value_t = 10)]
        peers: u16,
        #[arg(long, default_value_t = 100_000)]
        prefixes: u32,
        #[arg(long, default_value_t = 1_000_000)]
        updates: usize,
        #[arg(long, default_value_t = 0.7)]
        announce_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Input problems exit with 2, failed checks with 1.
enum Failure {
    /// Downstream reader went away, e.g. `replay ... | head`.
    Closed,
    Input(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Engine(e) => Failure::Check(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::Closed;
        }
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) | Err(Failure::Closed) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { scenario, out, seed } => cmd_run(&scenario, out.as_deref(), seed),
        Command::Replay { feed, peers } => cmd_replay(&feed, peers),
        Command::Verify { feed } => cmd_verify(&feed),
        Command::Bench { feed, updates } => cmd_bench(&feed, updates),
        Command::Sweep {
            scenario,
            prefixes,
            modes,
            out,
        } => cmd_sweep(&scenario, &prefixes, &modes, out.as_deref()),
        Command::GenFeed {
            peers,
            prefixes,
            updates,
            announce_ratio,
            seed,
            out,
        } => cmd_gen_feed(peers, prefixes, updates, announce_ratio, seed, out.as_deref()),
    }
}

fn read_feed(path: &Path, peers: &mut PeerDirectory, policy: PeerPolicy) -> Result<Vec<BgpUpdate>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    FeedParser::new(peers, policy)
        .parse_feed(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn print_summary(report: &MetricsReport) {
    let fmt = |v: Option<u64>| v.map_or("-".to_string(), |us| format!("{:.3} ms", us as f64 / 1000.0));
    let s = report.summary;
    println!(
        "{:<12} prefixes={:<7} flows={:<4} p5={} p50={} p95={} max={} switch_changes={} fib_changes={}",
        report.mode.as_str(),
        report.prefix_count,
        report.flows.len(),
        fmt(s.map(|s| s.p5)),
        fmt(s.map(|s| s.p50)),
        fmt(s.map(|s| s.p95)),
        fmt(s.map(|s| s.max)),
        report.switch_rule_changes,
        report.fib_changes,
    );
}

fn check_recovered(reports: &[MetricsReport]) -> Result<(), Failure> {
    let stuck: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.unrecovered()
                .map(move |f| format!("{} flow {} ({})", r.mode.as_str(), f.flow_id, f.dst_ip))
        })
        .collect();
    if stuck.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("flows never recovered: {}", stuck.join(", "))))
    }
}

fn cmd_run(path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let mut scenario = load_scenario(path).map_err(Error::from)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let report = run(&scenario).map_err(Error::from)?;
    print_summary(&report);
    if let Some(out) = out {
        emit_report(&report, out)?;
        info!("wrote {}", out.display());
    }
    check_recovered(std::slice::from_ref(&report))
}

fn cmd_replay(feed: &Path, n_peers: usize) -> Result<(), Failure> {
    let mut peers = PeerDirectory::numbered(n_peers);
    let updates = read_feed(feed, &mut peers, PeerPolicy::Known)?;
    let mut engine = Engine::new(EngineConfig::default(), peers).map_err(Error::from)?;
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    for u in &updates {
        for a in engine.process_update(u).map_err(Error::from)? {
            writeln!(w, "{a}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_verify(feed: &Path) -> Result<(), Failure> {
    let mut peers = PeerDirectory::new();
    let updates = read_feed(feed, &mut peers, PeerPolicy::AutoRegister)?;
    let mut engine = Engine::new(EngineConfig::default(), peers).map_err(Error::from)?;
    let k = engine.config().group_size;
    for (i, u) in updates.iter().enumerate() {
        engine.process_update(u).map_err(Error::from)?;
        // the update can only move its own prefix; compare that one each step
        let expected = engine.rib().get(&u.prefix()).and_then(|entry| {
            let ranked: Vec<_> = supercharger::decision_rank(entry.routes.clone())
                .iter()
                .map(|r| r.peer)
                .collect();
            Binding::of(&ranked, k)
        });
        if engine.binding(&u.prefix()) != expected.as_ref() {
            return Err(Failure::Check(format!(
                "update {}: binding of {} diverges",
                i + 1,
                u.prefix()
            )));
        }
    }
    if brute_force_groups(engine.rib(), k) != *engine.bindings() {
        return Err(Failure::Check("final bindings diverge from oracle".into()));
    }
    engine.check_invariants().map_err(Error::from)?;
    println!(
        "ok: {} updates, {} prefixes, {} live groups, {} allocations",
        updates.len(),
        engine.bindings().len(),
        engine.live_groups(),
        engine.allocation_counter()
    );
    Ok(())
}

fn cmd_bench(feed: &Path, n: Option<usize>) -> Result<(), Failure> {
    let mut peers = PeerDirectory::new();
    let updates = read_feed(feed, &mut peers, PeerPolicy::AutoRegister)?;
    let n = n.unwrap_or(updates.len());
    if n > updates.len() {
        return Err(Failure::Input(format!("feed has only {} updates", updates.len())));
    }
    let stats = bench_control_plane(peers, &updates, n).map_err(Error::from)?;
    let fmt = |d: Option<std::time::Duration>| d.map_or("-".to_string(), |d| format!("{:?}", d));
    println!(
        "updates={} p50={} p99={} max={}",
        stats.samples,
        fmt(stats.p50),
        fmt(stats.p99),
        fmt(stats.max)
    );
    Ok(())
}

fn parse_count(s: &str) -> Result<u32, Failure> {
    let s = s.trim().to_ascii_lowercase();
    let (digits, scale) = match s.strip_suffix('k') {
        Some(d) => (d, 1_000),
        None => match s.strip_suffix('m') {
            Some(d) => (d, 1_000_000),
            None => (s.as_str(), 1),
        },
    };
    digits
        .parse::<u32>()
        .ok()
        .and_then(|v| v.checked_mul(scale))
        .ok_or_else(|| Failure::Input(format!("invalid prefix count `{s}`")))
}

fn cmd_sweep(path: &Path, prefixes: &str, modes: &str, out: Option<&Path>) -> Result<(), Failure> {
    let scenario = load_scenario(path).map_err(Error::from)?;
    let counts = prefixes.split(',').map(parse_count).collect::<Result<Vec<_>, _>>()?;
    let modes = modes
        .split(',')
        .map(|m| m.trim().parse::<FibMode>().map_err(Failure::Input))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = sweep(&scenario, &modes, &counts)?;
    for r in &reports {
        print_summary(r);
    }
    let worst = |mode| {
        reports
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(MetricsReport::max_convergence)
            .max()
    };
    if let (Some(flat), Some(sc)) = (worst(FibMode::Flat), worst(FibMode::Supercharged)) {
        if sc > 0 {
            println!("worst-case improvement: {:.0}x", flat as f64 / sc as f64);
        }
    }
    if let Some(out) = out {
        std::fs::write(out, render_csv(&reports))?;
    }
    check_recovered(&reports)
}

fn cmd_gen_feed(
    n_peers: u16,
    prefixes: u32,
    updates: usize,
    ratio: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if n_peers == 0 || prefixes == 0 || !(0.0..=1.0).contains(&ratio) {
        return Err(Failure::Input("need peers > 0, prefixes > 0, ratio in [0,1]".into()));
    }
    let peers = PeerDirectory::numbered(n_peers as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feed = feedgen::random_feed(&mut rng, n_peers, prefixes, updates, ratio);
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    for u in &feed {
        writeln!(w, "{}", u.to_feed_line(&peers))?;
    }
    w.flush()?;
    Ok(())
}
