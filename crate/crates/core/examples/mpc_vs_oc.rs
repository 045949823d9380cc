//! Linear and nonlinear MPC against OC on a benchmark network.
//!
//! Usage: `cargo run --release --example mpc_vs_oc -- [cyclic5|tree25] [minutes]`

use gasnet::bench;
use gasnet::control::{compare, run_mpc, run_oc, ControlGrid, ControlOptions, Mode};
use gasnet::network::refine;
use gasnet::simulate::LumpedModel;

fn main() -> gasnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("cyclic5");
    let minutes: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60.0);
    let b = bench::by_name(name)?;
    let model = LumpedModel::new(refine(&b.network, b.max_segment)?)?;
    let grid = ControlGrid::from_minutes(b.scenario.horizon, minutes)?;

    let mut runs = Vec::new();
    for (label, mode, mpc) in [
        ("MPC linear", Mode::Linear, true),
        ("MPC nonlinear", Mode::Nonlinear, true),
        ("OC linear", Mode::Linear, false),
        ("OC nonlinear", Mode::Nonlinear, false),
    ] {
        let opts = ControlOptions::new(mode);
        let r = if mpc {
            run_mpc(&model, &b.scenario, &grid, &opts)?
        } else {
            run_oc(&model, &b.scenario, &grid, &opts)?
        };
        println!(
            "{label:14} status={:10} J={:10.4} surrogate={:10.4} wall={:7.2}s lp_iter={:6} outer={:4} audit={:?}{}",
            r.status.to_string(),
            r.objective,
            r.surrogate_objective,
            r.wall_time,
            r.lp_iterations,
            r.outer_iterations,
            r.audit.as_ref().map(|a| (a.passed, a.resimulated_violation)),
            r.message.as_deref().map(|m| format!("\n    {m}")).unwrap_or_default(),
        );
        runs.push(r);
    }
    let mpc = compare(&runs[1], &runs[0]);
    let oc = compare(&runs[3], &runs[2]);
    println!(
        "MPC linear vs nonlinear: E_rho={:.3}% E_phi={:.3}% E_mu={:.3}%",
        mpc.rho, mpc.phi, mpc.mu
    );
    println!(
        "OC  linear vs nonlinear: E_rho={:.3}% E_phi={:.3}% E_mu={:.3}%",
        oc.rho, oc.phi, oc.mu
    );
    let gap = (runs[1].objective - runs[3].objective) / runs[3].objective * 100.0;
    println!("nonlinear energy gap MPC vs OC: {gap:.2}%");
    Ok(())
}
