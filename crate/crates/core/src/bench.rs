//! Benchmark networks with synthetic 24 h load profiles.
//!
//! Loads are smooth sums of sinusoids with periods of 24, 12 and 6 hours,
//! stored as piecewise-linear breakpoints every 15 minutes so the documents
//! are self-contained.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::network::{
    BoundaryScenario, Bounds, CompressorSpec, NetworkSpec, Node, NodeId, NodeKind, PipeSpec,
    Profile,
};

pub const DAY: f64 = 24.0 * 3600.0;
/// Breakpoint spacing of the synthetic profiles.
pub const PROFILE_STEP: f64 = 900.0;
pub const NAMES: [&str; 4] = ["cyclic5", "tree25", "pipe5km", "pipe50km"];

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: &'static str,
    pub network: NetworkSpec,
    pub scenario: BoundaryScenario,
    /// Segment length bound used with this network, in meters.
    pub max_segment: f64,
}

/// One harmonic of a synthetic load: relative amplitude, period (h), phase (rad).
#[derive(Clone, Copy, Debug)]
pub struct Harmonic {
    pub amplitude: f64,
    pub period_hours: f64,
    pub phase: f64,
}

/// `base·(1 + Σ a sin(2πt/P + p))` sampled every [`PROFILE_STEP`] over `[0, horizon]`.
pub fn synthetic_load(base: f64, harmonics: &[Harmonic], horizon: f64) -> Profile {
    let n = (horizon / PROFILE_STEP).ceil() as usize;
    let points = (0..=n)
        .map(|i| {
            let t = (i as f64 * PROFILE_STEP).min(horizon);
            let v = harmonics.iter().fold(1.0, |acc, h| {
                acc + h.amplitude * (2.0 * PI * t / (h.period_hours * 3600.0) + h.phase).sin()
            });
            (t, base * v)
        })
        .collect();
    Profile::new(points).expect("breakpoints are increasing")
}

fn h(amplitude: f64, period_hours: f64, phase: f64) -> Harmonic {
    Harmonic {
        amplitude,
        period_hours,
        phase,
    }
}

fn pipe(id: u32, from: NodeId, to: NodeId, km: f64, diameter: f64, friction: f64) -> PipeSpec {
    PipeSpec {
        id,
        from_node: from,
        to_node: to,
        length: km * 1000.0,
        diameter,
        friction,
    }
}

fn nodes(n_supply: u32, n_total: u32) -> Vec<Node> {
    (1..=n_total)
        .map(|id| Node {
            id,
            kind: if id <= n_supply {
                NodeKind::Supply
            } else {
                NodeKind::Withdrawal
            },
        })
        .collect()
}

fn compressors(edges: &[u32], max_ratio: f64) -> Vec<CompressorSpec> {
    edges
        .iter()
        .map(|&edge_id| CompressorSpec {
            edge_id,
            max_ratio,
            efficiency: 1.0,
        })
        .collect()
}

pub const SOUND_SPEED: f64 = 377.964;

/// Five nodes, five pipes with one cycle, three compressors.
pub fn cyclic5() -> Benchmark {
    let (d, lam) = (0.9144, 0.01);
    let pipes = vec![
        pipe(1, 1, 2, 20.0, d, lam),
        pipe(2, 2, 3, 70.0, d, lam),
        pipe(3, 2, 4, 10.0, d, lam),
        pipe(4, 4, 5, 80.0, d, lam),
        pipe(5, 3, 5, 60.0, 0.635, 0.015),
    ];
    let bounds = Bounds {
        rho_min: 21.0,
        rho_max: 35.0,
        phi_min: 0.0,
        phi_max: f64::INFINITY,
    };
    let network = NetworkSpec::new(
        nodes(1, 5),
        pipes,
        compressors(&[1, 3, 5], 1.7),
        SOUND_SPEED,
        bounds,
    )
    .expect("benchmark network is valid");
    let loads: [(NodeId, f64, [Harmonic; 3]); 4] = [
        (
            2,
            30.0,
            [h(0.25, 24.0, -1.2), h(0.10, 12.0, 0.4), h(0.05, 6.0, 1.0)],
        ),
        (
            3,
            45.0,
            [h(0.30, 24.0, -0.9), h(0.08, 12.0, 1.1), h(0.04, 6.0, -0.3)],
        ),
        (
            4,
            25.0,
            [h(0.20, 24.0, -1.6), h(0.12, 12.0, 0.0), h(0.05, 6.0, 2.0)],
        ),
        (
            5,
            50.0,
            [h(0.30, 24.0, -1.0), h(0.10, 12.0, 0.7), h(0.06, 6.0, 0.5)],
        ),
    ];
    let scenario = scenario_from(21.0, &loads);
    Benchmark {
        name: "cyclic5",
        network,
        scenario,
        max_segment: 5_000.0,
    }
}

/// 25-node tree with five compressor stations and 477 km of pipe.
pub fn tree25() -> Benchmark {
    let lam = 0.01;
    let (big, mid, small) = (0.9144, 0.762, 0.6096);
    let pipes = vec![
        pipe(1, 1, 2, 41.0, big, lam),
        pipe(2, 2, 3, 41.0, big, lam),
        pipe(3, 3, 4, 21.0, big, lam),
        pipe(4, 4, 5, 21.0, big, lam),
        pipe(5, 5, 6, 31.0, big, lam),
        pipe(6, 6, 7, 31.0, big, lam),
        pipe(7, 7, 8, 11.0, big, lam),
        pipe(8, 8, 9, 22.0, big, lam),
        pipe(9, 9, 10, 21.0, big, lam),
        pipe(10, 10, 11, 11.0, big, lam),
        pipe(11, 3, 12, 21.0, mid, lam),
        pipe(12, 12, 13, 31.0, mid, lam),
        pipe(13, 13, 14, 11.0, mid, lam),
        pipe(14, 14, 15, 11.0, mid, lam),
        pipe(15, 6, 16, 22.0, small, lam),
        pipe(16, 16, 17, 11.0, small, lam),
        pipe(17, 17, 18, 11.0, small, lam),
        pipe(18, 9, 19, 21.0, small, lam),
        pipe(19, 19, 20, 11.0, small, lam),
        pipe(20, 20, 21, 11.0, small, lam),
        pipe(21, 13, 22, 22.0, mid, lam),
        pipe(22, 22, 23, 21.0, mid, lam),
        pipe(23, 23, 24, 11.0, mid, lam),
        pipe(24, 24, 25, 11.0, mid, lam),
    ];
    let bounds = Bounds {
        rho_min: 35.0,
        rho_max: 56.0,
        phi_min: 0.0,
        phi_max: f64::INFINITY,
    };
    let network = NetworkSpec::new(
        nodes(1, 25),
        pipes,
        compressors(&[1, 5, 8, 11, 21], 1.5),
        SOUND_SPEED,
        bounds,
    )
    .expect("benchmark network is valid");
    let mut loads = Vec::new();
    for id in 2..=25u32 {
        let base = match id {
            11 | 15 | 18 | 21 | 25 => 14.0,
            4 | 7 | 10 | 13 | 17 | 20 | 24 => 6.0,
            _ => 3.0,
        };
        let p = id as f64;
        loads.push((
            id,
            base,
            [
                h(0.25, 24.0, -1.2 + 0.13 * p),
                h(0.08, 12.0, 0.37 * p),
                h(0.04, 6.0, 0.71 * p),
            ],
        ));
    }
    let scenario = scenario_from(35.0, &loads);
    Benchmark {
        name: "tree25",
        network,
        scenario,
        max_segment: 10_000.0,
    }
}

fn single_pipe(name: &'static str, km: f64) -> Benchmark {
    let network = NetworkSpec::new(
        nodes(1, 2),
        vec![pipe(1, 1, 2, km, 0.5, 0.011)],
        vec![],
        377.0,
        Bounds::default(),
    )
    .expect("benchmark network is valid");
    let area = PI * 0.25 / 4.0;
    let mut withdrawal = BTreeMap::new();
    withdrawal.insert(2, Profile::constant(300.0 * area));
    let mut supply = BTreeMap::new();
    supply.insert(1, Profile::constant(35.0));
    Benchmark {
        name,
        network,
        scenario: BoundaryScenario {
            horizon: DAY,
            supply,
            withdrawal,
            initial_ratios: None,
        },
        max_segment: 1_000.0,
    }
}

/// 5 km pipe, D = 0.5 m, λ = 0.011, σ = 377 m/s, carrying φ = 300 kg/m²s.
pub fn pipe5km() -> Benchmark {
    single_pipe("pipe5km", 5.0)
}

/// As [`pipe5km`] with a 50 km pipe.
pub fn pipe50km() -> Benchmark {
    single_pipe("pipe50km", 50.0)
}

fn scenario_from(supply_density: f64, loads: &[(NodeId, f64, [Harmonic; 3])]) -> BoundaryScenario {
    let mut supply = BTreeMap::new();
    supply.insert(1, Profile::constant(supply_density));
    let withdrawal = loads
        .iter()
        .map(|(id, base, hs)| (*id, synthetic_load(*base, hs, DAY)))
        .collect();
    BoundaryScenario {
        horizon: DAY,
        supply,
        withdrawal,
        initial_ratios: None,
    }
}

pub fn by_name(name: &str) -> Result<Benchmark> {
    match name {
        "cyclic5" => Ok(cyclic5()),
        "tree25" => Ok(tree25()),
        "pipe5km" => Ok(pipe5km()),
        "pipe50km" => Ok(pipe50km()),
        other => Err(Error::validation(format!(
            "unknown benchmark {other:?}; expected one of {}",
            NAMES.join(", ")
        ))),
    }
}

/// Scales every withdrawal profile by `factor`.
pub fn scale_loads(scenario: &BoundaryScenario, factor: f64) -> BoundaryScenario {
    let mut out = scenario.clone();
    for p in out.withdrawal.values_mut() {
        let pts = p.points().iter().map(|&(t, v)| (t, v * factor)).collect();
        *p = Profile::new(pts).expect("scaling keeps breakpoints");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::refine;

    #[test]
    fn cyclic5_sizes() {
        let b = cyclic5();
        assert!((b.network.total_length() - 240_000.0).abs() < 1e-6);
        let r = refine(&b.network, b.max_segment).unwrap();
        assert_eq!(r.n_edges(), 48);
        assert!(r.edges.iter().all(|e| (e.length - 5_000.0).abs() < 1e-9));
        assert_eq!(r.state_dim(), 95);
    }

    #[test]
    fn tree25_sizes() {
        let b = tree25();
        assert_eq!(b.network.nodes.len(), 25);
        assert_eq!(b.network.pipes.len(), 24);
        assert!((b.network.total_length() - 477_000.0).abs() < 1e-6);
        let r = refine(&b.network, b.max_segment).unwrap();
        assert!(r.edges.iter().all(|e| e.length <= 10_000.0 + 1e-9));
        assert_eq!(r.state_dim(), 138);
        assert!(r.compressors.iter().all(|c| c.spec.max_ratio == 1.5));
        let d: Vec<f64> = b.network.pipes.iter().map(|p| p.diameter).collect();
        assert!(d.iter().all(|&x| (0.6096..=0.9144).contains(&x)));
    }

    #[test]
    fn loads_are_positive_and_validate() {
        for name in NAMES {
            let b = by_name(name).unwrap();
            b.scenario.validate(&b.network).unwrap();
            for p in b.scenario.withdrawal.values() {
                assert!(p.min_value() > 0.0);
            }
        }
        assert!(by_name("nope").is_err());
    }
}
