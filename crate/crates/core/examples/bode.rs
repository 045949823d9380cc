//! Frequency response of a single pipe under the four model variants.
//!
//! Usage: `cargo run --release --example bode -- [length km]`

use gasnet::spectral::{frequency_response, ImpedanceSign, PipeFrequencyParams};

fn main() -> gasnet::Result<()> {
    let km: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5.0);
    let base = PipeFrequencyParams {
        length: km * 1000.0,
        diameter: 0.5,
        friction: 0.011,
        sound_speed: 377.0,
        rho_bar: 35.0,
        phi_bar: 300.0,
        alpha_on: true,
        inertia: true,
        sign: ImpedanceSign::Physical,
    };
    let grid: Vec<f64> = (0..9).map(|i| 0.01 * 10f64.powf(i as f64 * 0.5)).collect();
    println!("{km} km pipe, |G21| (inlet flux per inlet density)");
    print!("{:>10}", "f [cyc/hr]");
    let variants = [
        ("full", true, true),
        ("no_alpha", false, true),
        ("no_inertia", true, false),
        ("friction", false, false),
    ];
    for (name, ..) in variants {
        print!("{name:>12}");
    }
    println!();
    let responses = variants
        .iter()
        .map(|&(_, a, d)| frequency_response(&base.with_flags(a, d), &grid))
        .collect::<gasnet::Result<Vec<_>>>()?;
    let mags: Vec<Vec<f64>> = responses.iter().map(|r| r.magnitude(1, 0)).collect();
    for (i, f) in grid.iter().enumerate() {
        print!("{f:10.3}");
        for m in &mags {
            print!("{:12.4e}", m[i]);
        }
        println!();
    }
    Ok(())
}
