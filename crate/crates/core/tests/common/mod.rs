#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gasnet::network::{
    refine, BoundaryScenario, Bounds, CompressorSpec, NetworkSpec, Node, NodeKind, PipeSpec,
    Profile,
};
use gasnet::simulate::LumpedModel;
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random connected network with about `edges` pipes.
///
/// Every withdrawal node receives one tree edge from a lower label, so supply
/// nodes only have outgoing edges and every withdrawal node an incoming one.
/// The remaining pipes join random withdrawal pairs.
pub fn random_network(rng: &mut ChaCha8Rng, edges: usize, compressors: usize) -> NetworkSpec {
    let n_supply = if edges >= 4 {
        rng.gen_range(1..=2usize)
    } else {
        1
    };
    let n_w = (edges * 3 / 4).clamp(1, edges + 1 - n_supply);
    let n = n_supply + n_w;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let kind = if i < n_supply {
            NodeKind::Supply
        } else {
            NodeKind::Withdrawal
        };
        nodes.push(Node {
            id: i as u32 + 1,
            kind,
        });
    }
    let mut pairs = BTreeSet::new();
    let mut links = Vec::new();
    for i in n_supply..n {
        let from = if i == n_supply {
            0
        } else {
            rng.gen_range(0..i)
        };
        let from = if from < n_supply { 0 } else { from };
        pairs.insert((from.min(i), from.max(i)));
        links.push((from, i));
    }
    for s in 1..n_supply {
        let to = rng.gen_range(n_supply..n);
        pairs.insert((s, to));
        links.push((s, to));
    }
    let mut guard = 0;
    while links.len() < edges && guard < 100 * edges {
        guard += 1;
        let a = rng.gen_range(n_supply..n);
        let b = rng.gen_range(n_supply..n);
        if a == b || !pairs.insert((a.min(b), a.max(b))) {
            continue;
        }
        links.push((a, b));
    }
    let pipes: Vec<PipeSpec> = links
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| PipeSpec {
            id: k as u32 + 1,
            from_node: a as u32 + 1,
            to_node: b as u32 + 1,
            length: rng.gen_range(1_000.0..20_000.0),
            diameter: rng.gen_range(0.5..1.0),
            friction: rng.gen_range(0.008..0.015),
        })
        .collect();
    let mut chosen = BTreeSet::new();
    while chosen.len() < compressors.min(pipes.len()) {
        chosen.insert(rng.gen_range(0..pipes.len()));
    }
    let comps = chosen
        .into_iter()
        .map(|k| CompressorSpec {
            edge_id: k as u32 + 1,
            max_ratio: 1.5,
            efficiency: 1.0,
        })
        .collect();
    NetworkSpec::new(nodes, pipes, comps, 377.0, Bounds::default())
        .expect("generated network is valid")
}

/// Random nominal quantities for a model: positive densities, nonzero fluxes.
pub fn random_nominal(
    rng: &mut ChaCha8Rng,
    model: &LumpedModel,
    mu: Option<f64>,
) -> gasnet::linearize::NominalPoint {
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    gasnet::linearize::NominalPoint {
        rho_bar: DVector::from_fn(model.n_rho(), |_, _| rng.gen_range(30.0..50.0)),
        phi_bar: DVector::from_fn(model.n_phi(), |_, _| sign(rng) * rng.gen_range(10.0..300.0)),
        mu_bar: (0..model.net.n_compressors())
            .map(|_| mu.unwrap_or_else(|| rng.gen_range(1.0..1.5)))
            .collect(),
        s_bar: DVector::from_fn(model.net.n_supply, |_, _| rng.gen_range(40.0..50.0)),
        w_bar: DVector::from_fn(model.n_rho(), |_, _| rng.gen_range(0.0..20.0)),
    }
}

/// A 30 km pipe in three 10 km segments with a compressor at its inlet.
pub fn compressed_pipe(load: f64, horizon: f64) -> (LumpedModel, BoundaryScenario) {
    let bounds = Bounds {
        rho_min: 30.0,
        rho_max: 60.0,
        phi_min: 0.0,
        phi_max: f64::INFINITY,
    };
    let net = NetworkSpec::new(
        vec![
            Node {
                id: 1,
                kind: NodeKind::Supply,
            },
            Node {
                id: 2,
                kind: NodeKind::Withdrawal,
            },
        ],
        vec![PipeSpec {
            id: 1,
            from_node: 1,
            to_node: 2,
            length: 30_000.0,
            diameter: 0.6,
            friction: 0.01,
        }],
        vec![CompressorSpec {
            edge_id: 1,
            max_ratio: 1.6,
            efficiency: 1.0,
        }],
        370.0,
        bounds,
    )
    .expect("valid pipe");
    let model = LumpedModel::new(refine(&net, 10_000.0).unwrap()).unwrap();
    let mut supply = BTreeMap::new();
    supply.insert(1, Profile::constant(30.0));
    let mut withdrawal = BTreeMap::new();
    withdrawal.insert(2, Profile::constant(load));
    let scenario = BoundaryScenario {
        horizon,
        supply,
        withdrawal,
        initial_ratios: None,
    };
    (model, scenario)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
