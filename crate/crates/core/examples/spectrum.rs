//! Eigenvalues of a linearized benchmark, their center of gravity and the
//! closed-form poles of its segments.
//!
//! Usage: `cargo run --release --example spectrum -- [cyclic5|tree25|pipe50km]`

use gasnet::bench;
use gasnet::control::{initial_state, ControlOptions, Mode};
use gasnet::linearize::{build_model, NominalPoint};
use gasnet::network::refine;
use gasnet::simulate::LumpedModel;
use gasnet::spectral::{center_of_gravity, eigenvalues, network_poles};

fn main() -> gasnet::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "cyclic5".into());
    let b = bench::by_name(&name)?;
    let model = LumpedModel::new(refine(&b.network, b.max_segment)?)?;
    let (x0, mu) = initial_state(&model, &b.scenario, &ControlOptions::new(Mode::Nonlinear))?;
    let u0 = model.inputs_at(&b.scenario, &mu, 0.0)?;
    let lin = build_model(&model, &NominalPoint::new(&x0, &u0))?;

    let mut eig = eigenvalues(&lin.a_bar)?;
    eig.sort_by(|a, b| b.re.total_cmp(&a.re));
    let cog = center_of_gravity(&model, &lin)?;
    println!(
        "{} eigenvalues, center of gravity {:.4e} 1/s",
        eig.len(),
        cog.center
    );
    println!(
        "sum of eigenvalues {:.6e}, friction trace {:.6e}",
        cog.eigen_sum, cog.predicted_sum
    );
    println!("slowest modes:");
    for z in eig.iter().take(5) {
        println!("  {:.4e} {:+.4e}i", z.re, z.im);
    }

    let out = model.inc.outlet_density(&lin.nominal.rho_bar);
    let beta: Vec<f64> = model
        .net
        .edges
        .iter()
        .enumerate()
        .map(|(k, e)| e.friction * lin.nominal.phi_bar[k].abs() / (e.diameter * out[k]))
        .collect();
    let lengths: Vec<f64> = model.net.edges.iter().map(|e| e.length).collect();
    let poles = network_poles(&beta, model.sound_speed(), &lengths, 3)?;
    println!("segment 1 poles (asymptote {:.4e}):", poles[0].asymptote);
    for z in &poles[0].poles {
        println!("  {:.4e} {:+.4e}i", z.re, z.im);
    }
    Ok(())
}
