// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supercharger"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_replay_verify_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let feed = dir.path().join("feed.txt");
    let feed = feed.to_str().unwrap();
    let o = bin(&[
        "gen-feed",
        "--peers",
        "4",
        "--prefixes",
        "200",
        "--updates",
        "2000",
        "--seed",
        "9",
        "--out",
        feed,
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(feed).unwrap().lines().count(), 2000);

    let o = bin(&["verify", feed]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("ok: 2000 updates"));

    let a = bin(&["replay", feed, "--peers", "4"]);
    let b = bin(&["replay", feed, "--peers", "4"]);
    assert!(a.status.success());
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).lines().all(|l| l.starts_with("A ") || l.starts_with("W ")));

    let o = bin(&["bench", feed, "--updates", "500"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("updates=500 "));
}

#[test]
fn malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let feed = dir.path().join("bad.txt");
    std::fs::write(&feed, "A p1 1.0.0.0/24 100 1\nA p1 1.0.0.0/33 100 1\n").unwrap();
    let o = bin(&["verify", feed.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let o = bin(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("s.toml");
    std::fs::write(&bad, "mode = \"flat\"\nbogus = 1\n").unwrap();
    let o = bin(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_peer_in_replay_exits_two() {
    let o = bin(&["replay", &scenario("three_peers.feed"), "--peers", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = bin(&["run", &scenario("three_peers.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("flow_id,dst_ip,mode,prefix_count,convergence_us,dropped,recovered\n"));
    assert!(csv.lines().any(|l| l.starts_with("max,")));
}

#[test]
fn sweep_reports_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = bin(&[
        "sweep",
        &scenario("two_peers.toml"),
        "--prefixes",
        "1k,2k",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("supercharged")).count(), 2);
    assert!(text.contains("worst-case improvement"));
    assert!(std::fs::read_to_string(out).unwrap().lines().count() > 4);

    let o = bin(&["sweep", &scenario("two_peers.toml"), "--prefixes", "abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unrecovered_flows_exit_one() {
    // A single-homed table cannot fail over.
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.toml");
    std::fs::write(
        &s,
        "prefix_count = 100\nprobe_count = 10\nfail_peer = \"r2\"\nfail_time_us = 50000\n\
         [[peer]]\nname = \"r2\"\nmac = \"00:00:00:00:00:aa\"\nport = 1\n",
    )
    .unwrap();
    let o = bin(&["run", s.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("never recovered"));
}
