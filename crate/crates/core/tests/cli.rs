use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use gasnet::bench;
use gasnet::network::{parse_network, parse_scenario};

fn gasnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gasnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn emitted_benchmark_parses_back_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = gasnet(&["bench", "--name", "cyclic5", "--emit", path(dir.path())]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let b = bench::cyclic5();
    let net_text = std::fs::read_to_string(dir.path().join("cyclic5.network.toml")).unwrap();
    let scen_text = std::fs::read_to_string(dir.path().join("cyclic5.scenario.toml")).unwrap();
    let net = parse_network(&net_text).unwrap();
    assert_eq!(net, b.network);
    assert_eq!(parse_scenario(&scen_text, &net).unwrap(), b.scenario);

    let net_path = dir.path().join("cyclic5.network.toml");
    let scen_path = dir.path().join("cyclic5.scenario.toml");
    let out = gasnet(&[
        "validate",
        "--network",
        path(&net_path),
        "--scenario",
        path(&scen_path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = gasnet(&["validate", "--network", "no-such-benchmark"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[parameters]\nsound_speed_mps = -1.0\n").unwrap();
    let out = gasnet(&["validate", "--network", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn reference_comparison_reports_energy_gap() {
    let dir = tempfile::tempdir().unwrap();
    let mpc = dir.path().join("mpc");
    let oc = dir.path().join("oc");
    let out = gasnet(&[
        "mpc",
        "--network",
        "cyclic5",
        "--mode",
        "nonlinear",
        "--out",
        path(&mpc),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = gasnet(&[
        "oc",
        "--network",
        "cyclic5",
        "--mode",
        "nonlinear",
        "--out",
        path(&oc),
        "--reference",
        path(&mpc),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("oc.summary.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(summary["status"], "optimal");
    let gap = summary["reference"]["energy_gap_percent"].as_f64().unwrap();
    assert!(gap.abs() <= 5.0, "gap {gap}%");
    for prefix in [&mpc, &oc] {
        for ext in ["trajectory.csv", "policy.csv", "summary.json"] {
            let f = format!("{}.{ext}", path(prefix));
            assert!(Path::new(&f).exists(), "{f}");
        }
    }
}

#[test]
fn bode_writes_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bode.csv");
    let out = gasnet(&[
        "bode",
        "--network",
        "pipe5km",
        "--points",
        "20",
        "--out",
        path(&csv_path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "variant");
    assert_eq!(header.len(), 2 + 8);
    let mut variants = BTreeSet::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        variants.insert(rec[0].to_string());
        for field in rec.iter().skip(1) {
            assert!(field.parse::<f64>().unwrap().is_finite());
        }
        rows += 1;
    }
    assert_eq!(variants.len(), 4);
    assert_eq!(rows, 4 * 20);
}

#[test]
fn simulation_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = gasnet(&[
            "simulate",
            "--network",
            "cyclic5",
            "--mu",
            "1.2,1.1,1.1",
            "--out",
            path(p),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}
