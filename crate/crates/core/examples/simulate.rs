//! Steady state and transient simulation of a benchmark under constant ratios.
//!
//! Usage: `cargo run --release --example simulate -- [cyclic5|tree25] [ratio]`

use gasnet::bench;
use gasnet::network::refine;
use gasnet::simulate::{LumpedModel, Policy};

fn main() -> gasnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("cyclic5");
    let ratio: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.2);
    let b = bench::by_name(name)?;
    let model = LumpedModel::new(refine(&b.network, b.max_segment)?)?;
    let mu = vec![ratio; model.net.n_compressors()];

    let u0 = model.inputs_at(&b.scenario, &mu, 0.0)?;
    let x0 = model.steady_state(&u0)?;
    println!(
        "steady state at t=0: density {:.2}..{:.2} kg/m³, line pack {:.0} kg",
        x0.rho.min(),
        x0.rho.max(),
        model.line_pack(&x0)
    );

    let traj = model.simulate_from(x0, &b.scenario, &Policy::Constant(mu), 600.0)?;
    println!(
        "{:>8} {:>10} {:>10} {:>14}",
        "t [h]", "min rho", "max rho", "line pack"
    );
    for (t, x) in traj.times.iter().zip(&traj.states).step_by(6) {
        println!(
            "{:8.1} {:10.3} {:10.3} {:14.0}",
            t / 3600.0,
            x.rho.min(),
            x.rho.max(),
            model.line_pack(x)
        );
    }
    Ok(())
}
