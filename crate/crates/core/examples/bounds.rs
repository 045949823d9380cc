//! Linearization error bounds against the gap between nonlinear and linear
//! simulations of a benchmark under a load ramp.
//!
//! Usage: `cargo run --release --example bounds -- [cyclic5|tree25] [load scale] [kappa]`

use gasnet::bench;
use gasnet::cli::bound_report;
use gasnet::control::{initial_state, ControlOptions, Mode};
use gasnet::network::refine;
use gasnet::simulate::LumpedModel;

fn main() -> gasnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("cyclic5");
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let kappa: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let b = bench::by_name(name)?;
    let model = LumpedModel::new(refine(&b.network, b.max_segment)?)?;
    let mut nominal = b.scenario.clone();
    nominal.horizon = 3600.0;
    let scenario = bench::scale_loads(&nominal, scale);
    let (_, mu) = initial_state(&model, &nominal, &ControlOptions::new(Mode::Nonlinear))?;

    let rep = bound_report(&model, &nominal, &scenario, mu, kappa, 3600.0, 10.0)?;
    println!(
        "observed variation κ = {:.3}, hypothesis κ ≤ {kappa}: {}",
        rep.observed_kappa,
        if rep.hypothesis_holds {
            "met"
        } else {
            "not met"
        }
    );
    println!("{:>8} {:>12} {:>12} {:>12}", "t [min]", "gap", "E_U", "E_T");
    for i in (0..rep.times.len()).step_by(rep.times.len() / 6) {
        println!(
            "{:8.1} {:12.4e} {:12.4e} {:12.4e}",
            rep.times[i] / 60.0,
            rep.gap[i],
            rep.uniform[i],
            rep.time_varying[i]
        );
    }
    println!("gap below E_U at every sample: {}", rep.dominated());
    Ok(())
}
