//! Linearizes a benchmark at its steady state and compares linear and
//! nonlinear transients.
//!
//! Usage: `cargo run --release --example linearize -- [cyclic5|tree25] [load scale]`

use gasnet::bench;
use gasnet::bounds::empirical_gap;
use gasnet::linearize::{build_model, NominalPoint};
use gasnet::network::refine;
use gasnet::simulate::{LumpedModel, Policy};

fn main() -> gasnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("cyclic5");
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.05);
    let b = bench::by_name(name)?;
    let model = LumpedModel::new(refine(&b.network, b.max_segment)?)?;
    let mu = vec![1.2; model.net.n_compressors()];

    let u0 = model.inputs_at(&b.scenario, &mu, 0.0)?;
    let x0 = model.steady_state(&u0)?;
    let lin = build_model(&model, &NominalPoint::new(&x0, &u0))?;
    let f = model.rhs(&x0, &u0)?.to_vector();
    let g = lin.linear_rhs(&x0, &u0, &model.net)?.to_vector();
    println!(
        "state matrix {}×{}, trace {:.4e} 1/s",
        lin.dim(),
        lin.dim(),
        lin.a_bar.trace()
    );
    println!(
        "nonlinear vs linear right-hand side at the nominal point: {:.2e}",
        (f - g).amax()
    );

    let scenario = bench::scale_loads(&b.scenario, scale);
    let policy = Policy::Constant(mu);
    let nl = model.simulate_from(x0.clone(), &scenario, &policy, 300.0)?;
    let li = lin.simulate(&model, x0, &scenario, &policy, 300.0)?;
    let gap = empirical_gap(&nl, &li)?;
    println!(
        "loads ×{scale}: linear vs nonlinear gap E_rho {:.3}%, E_phi {:.3}%",
        gap.rho, gap.phi
    );
    Ok(())
}
