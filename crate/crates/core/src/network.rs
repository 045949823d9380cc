//! Pipeline network descriptions, boundary scenarios and graph refinement.
//!
//! A [`NetworkSpec`] is the user-facing graph. Nodes are split into supply
//! nodes (prescribed density) and withdrawal nodes (prescribed mass outflow),
//! with every supply label smaller than every withdrawal label. Edges leaving a
//! supply node point away from it, and each compressor sits at the inlet of
//! its edge.
//!
//! [`refine`] subdivides every pipe into equal segments no longer than a given
//! bound. Inserted nodes are zero-outflow withdrawal nodes whose labels follow
//! all existing labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;
pub type EdgeId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Supply,
    Withdrawal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

/// A pipe in SI units (lengths in meters).
#[derive(Clone, Debug, PartialEq)]
pub struct PipeSpec {
    pub id: EdgeId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
}

impl PipeSpec {
    /// Cross-sectional area πD²/4.
    pub fn area(&self) -> f64 {
        PI * self.diameter * self.diameter / 4.0
    }

    pub fn volume(&self) -> f64 {
        self.area() * self.length
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressorSpec {
    pub edge_id: EdgeId,
    pub max_ratio: f64,
    /// Cost coefficient multiplying the compressor work term.
    pub efficiency: f64,
}

/// Box constraints on the state (densities in kg/m³, fluxes in kg/m²s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub rho_min: f64,
    pub rho_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            rho_min: 0.0,
            rho_max: f64::INFINITY,
            phi_min: f64::NEG_INFINITY,
            phi_max: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Nodes sorted by label.
    pub nodes: Vec<Node>,
    pub pipes: Vec<PipeSpec>,
    pub compressors: Vec<CompressorSpec>,
    /// Isothermal sound speed σ in m/s.
    pub sound_speed: f64,
    pub bounds: Bounds,
}

impl NetworkSpec {
    /// Builds and validates a network. Nodes are sorted by label.
    pub fn new(
        mut nodes: Vec<Node>,
        pipes: Vec<PipeSpec>,
        compressors: Vec<CompressorSpec>,
        sound_speed: f64,
        bounds: Bounds,
    ) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        let net = NetworkSpec {
            nodes,
            pipes,
            compressors,
            sound_speed,
            bounds,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn supply_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Supply)
    }

    pub fn withdrawal_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Withdrawal)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn pipe(&self, id: EdgeId) -> Option<&PipeSpec> {
        self.pipes.iter().find(|p| p.id == id)
    }

    pub fn total_length(&self) -> f64 {
        self.pipes.iter().map(|p| p.length).sum()
    }

    /// Checks every structural invariant of the network.
    pub fn validate(&self) -> Result<()> {
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return Err(Error::validation("sound speed must be positive"));
        }
        let b = &self.bounds;
        if b.rho_min.is_nan() || b.rho_max.is_nan() || b.rho_min > b.rho_max {
            return Err(Error::validation(
                "density bounds must satisfy rho_min <= rho_max",
            ));
        }
        if b.phi_min.is_nan() || b.phi_max.is_nan() || b.phi_min > b.phi_max {
            return Err(Error::validation(
                "flux bounds must satisfy phi_min <= phi_max",
            ));
        }

        let mut kinds = HashMap::new();
        for n in &self.nodes {
            if kinds.insert(n.id, n.kind).is_some() {
                return Err(Error::validation(format!("duplicate node {}", n.id)));
            }
        }
        let max_supply = self.supply_nodes().map(|n| n.id).max();
        let min_withdrawal = self.withdrawal_nodes().map(|n| n.id).min();
        let (Some(max_supply), Some(min_withdrawal)) = (max_supply, min_withdrawal) else {
            return Err(if max_supply.is_none() {
                Error::validation("nonempty supply set required")
            } else {
                Error::validation("nonempty withdrawal set required")
            });
        };
        if max_supply > min_withdrawal {
            return Err(Error::validation(
                "supply node labels must precede all withdrawal node labels",
            ));
        }

        let mut edge_ids = BTreeSet::new();
        for p in &self.pipes {
            if !edge_ids.insert(p.id) {
                return Err(Error::validation(format!("duplicate pipe {}", p.id)));
            }
            if p.id == 0 {
                return Err(Error::validation("pipe labels start at 1"));
            }
            if p.from_node == p.to_node {
                return Err(Error::validation(format!("pipe {} is a self-loop", p.id)));
            }
            for end in [p.from_node, p.to_node] {
                if !kinds.contains_key(&end) {
                    return Err(Error::validation(format!(
                        "pipe {} references unknown node {end}",
                        p.id
                    )));
                }
            }
            if !(p.length > 0.0 && p.length.is_finite()) {
                return Err(Error::validation(format!(
                    "pipe {} must have positive length",
                    p.id
                )));
            }
            if !(p.diameter > 0.0 && p.diameter.is_finite()) {
                return Err(Error::validation(format!(
                    "pipe {} must have positive diameter",
                    p.id
                )));
            }
            if !(p.friction > 0.0 && p.friction.is_finite()) {
                return Err(Error::validation(format!(
                    "pipe {} must have positive friction",
                    p.id
                )));
            }
            if kinds[&p.to_node] == NodeKind::Supply {
                return Err(Error::validation(format!(
                    "pipe {} enters supply node {}; edges at supply nodes must point away from them",
                    p.id, p.to_node
                )));
            }
        }

        let mut seen = BTreeSet::new();
        for c in &self.compressors {
            if !edge_ids.contains(&c.edge_id) {
                return Err(Error::validation(format!(
                    "compressor references unknown pipe {}",
                    c.edge_id
                )));
            }
            if !seen.insert(c.edge_id) {
                return Err(Error::validation(format!(
                    "pipe {} has two compressors",
                    c.edge_id
                )));
            }
            if !(c.max_ratio >= 1.0) {
                return Err(Error::validation(format!(
                    "compressor on pipe {} needs max_ratio >= 1",
                    c.edge_id
                )));
            }
            if !(c.efficiency > 0.0) {
                return Err(Error::validation(format!(
                    "compressor on pipe {} needs a positive efficiency",
                    c.edge_id
                )));
            }
        }

        if !self.is_connected() {
            return Err(Error::validation("network graph is disconnected"));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let index: HashMap<NodeId, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for p in &self.pipes {
            let (a, b) = (index[&p.from_node], index[&p.to_node]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Piecewise-linear time series given by `(t, value)` breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    points: Vec<(f64, f64)>,
}

impl Profile {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("profile needs at least one breakpoint"));
        }
        if points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::validation("profile breakpoints must be finite"));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::validation(
                "profile times must be strictly increasing",
            ));
        }
        Ok(Profile { points })
    }

    pub fn constant(value: f64) -> Self {
        Profile {
            points: vec![(0.0, value)],
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Linear interpolation between breakpoints, constant beyond the ends.
    pub fn value_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        let k = pts.partition_point(|p| p.0 <= t);
        let (t0, v0) = pts[k - 1];
        let (t1, v1) = pts[k];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    pub fn min_value(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Samples a profile on the horizon `[0, horizon]`.
pub fn sample_profile(profile: &Profile, t: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::domain(format!(
            "time {t} s outside [0, {horizon}] s"
        )));
    }
    Ok(profile.value_at(t))
}

/// Time-varying boundary data: supply densities and withdrawal outflows.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScenario {
    /// Horizon T in seconds.
    pub horizon: f64,
    /// Supply density (kg/m³) per supply node.
    pub supply: BTreeMap<NodeId, Profile>,
    /// Mass outflow (kg/s) per withdrawal node; absent nodes withdraw nothing.
    pub withdrawal: BTreeMap<NodeId, Profile>,
    /// Optional compressor ratios defining the initial steady state, keyed by pipe.
    pub initial_ratios: Option<BTreeMap<EdgeId, f64>>,
}

impl BoundaryScenario {
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("horizon must be positive"));
        }
        for n in net.supply_nodes() {
            let p = self.supply.get(&n.id).ok_or_else(|| {
                Error::validation(format!("supply node {} has no density profile", n.id))
            })?;
            if !(p.min_value() > 0.0) {
                return Err(Error::validation(format!(
                    "supply density at node {} must be strictly positive",
                    n.id
                )));
            }
        }
        for id in self.supply.keys() {
            if net.node(*id).map(|n| n.kind) != Some(NodeKind::Supply) {
                return Err(Error::validation(format!(
                    "profile for {id} is not a supply node"
                )));
            }
        }
        for id in self.withdrawal.keys() {
            if net.node(*id).map(|n| n.kind) != Some(NodeKind::Withdrawal) {
                return Err(Error::validation(format!(
                    "profile for {id} is not a withdrawal node"
                )));
            }
        }
        if let Some(ratios) = &self.initial_ratios {
            for (edge, mu) in ratios {
                let Some(c) = net.compressors.iter().find(|c| c.edge_id == *edge) else {
                    return Err(Error::validation(format!("no compressor on pipe {edge}")));
                };
                if !(*mu >= 1.0 && *mu <= c.max_ratio) {
                    return Err(Error::validation(format!(
                        "initial ratio {mu} on pipe {edge} outside [1, {}]",
                        c.max_ratio
                    )));
                }
            }
        }
        Ok(())
    }

    /// Supply density at node `id` and time `t`.
    pub fn supply_at(&self, id: NodeId, t: f64) -> Result<f64> {
        let p = self
            .supply
            .get(&id)
            .ok_or_else(|| Error::validation(format!("no supply profile for node {id}")))?;
        sample_profile(p, t, self.horizon)
    }

    /// Outflow at node `id` and time `t` (zero for nodes without a profile).
    pub fn withdrawal_at(&self, id: NodeId, t: f64) -> Result<f64> {
        match self.withdrawal.get(&id) {
            Some(p) => sample_profile(p, t, self.horizon),
            None if (0.0..=self.horizon).contains(&t) => Ok(0.0),
            None => Err(Error::domain(format!(
                "time {t} s outside [0, {}] s",
                self.horizon
            ))),
        }
    }
}

/// One segment of a refined pipe.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedEdge {
    /// 1-based label in the refined graph.
    pub id: EdgeId,
    /// Index of the tail node in [`RefinedNetwork::nodes`].
    pub from: usize,
    /// Index of the head node.
    pub to: usize,
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
    /// Label of the original pipe.
    pub parent: EdgeId,
    /// Position along the parent pipe, 0 at its inlet.
    pub segment: usize,
}

impl RefinedEdge {
    pub fn area(&self) -> f64 {
        PI * self.diameter * self.diameter / 4.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedCompressor {
    /// Index into [`RefinedNetwork::edges`].
    pub edge: usize,
    pub spec: CompressorSpec,
}

/// A network whose segments all satisfy a length bound.
///
/// Nodes are indexed supply-first, so withdrawal node `j` has state index
/// `j - n_supply`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedNetwork {
    pub nodes: Vec<Node>,
    pub edges: Vec<RefinedEdge>,
    pub compressors: Vec<RefinedCompressor>,
    pub n_supply: usize,
    pub sound_speed: f64,
    pub bounds: Bounds,
    pub max_segment_length: f64,
}

impl RefinedNetwork {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_withdrawal(&self) -> usize {
        self.nodes.len() - self.n_supply
    }

    pub fn n_compressors(&self) -> usize {
        self.compressors.len()
    }

    /// Dimension of the lumped state (withdrawal densities plus edge fluxes).
    pub fn state_dim(&self) -> usize {
        self.n_withdrawal() + self.n_edges()
    }

    pub fn is_supply(&self, node: usize) -> bool {
        node < self.n_supply
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Compressor index per edge, if any.
    pub fn compressor_on_edge(&self, edge: usize) -> Option<usize> {
        self.compressors.iter().position(|c| c.edge == edge)
    }

    /// Supply densities at time `t`, in supply-node order.
    pub fn supply_vector(&self, scenario: &BoundaryScenario, t: f64) -> Result<Vec<f64>> {
        self.nodes[..self.n_supply]
            .iter()
            .map(|n| scenario.supply_at(n.id, t))
            .collect()
    }

    /// Withdrawal outflows at time `t`, in withdrawal-node order. Nodes added
    /// by refinement have zero outflow.
    pub fn withdrawal_vector(&self, scenario: &BoundaryScenario, t: f64) -> Result<Vec<f64>> {
        self.nodes[self.n_supply..]
            .iter()
            .map(|n| scenario.withdrawal_at(n.id, t))
            .collect()
    }

    /// Maximum compressor ratios in compressor order.
    pub fn max_ratios(&self) -> Vec<f64> {
        self.compressors.iter().map(|c| c.spec.max_ratio).collect()
    }

    /// Edge indices that belong to original pipe `parent`, inlet first.
    pub fn segments_of(&self, parent: EdgeId) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.parent == parent)
            .map(|(k, _)| k)
            .collect()
    }

    /// Views the refined graph as a plain network whose pipes are the segments.
    pub fn to_spec(&self) -> NetworkSpec {
        let pipes = self
            .edges
            .iter()
            .map(|e| PipeSpec {
                id: e.id,
                from_node: self.nodes[e.from].id,
                to_node: self.nodes[e.to].id,
                length: e.length,
                diameter: e.diameter,
                friction: e.friction,
            })
            .collect();
        let compressors = self
            .compressors
            .iter()
            .map(|c| CompressorSpec {
                edge_id: self.edges[c.edge].id,
                ..c.spec.clone()
            })
            .collect();
        NetworkSpec {
            nodes: self.nodes.clone(),
            pipes,
            compressors,
            sound_speed: self.sound_speed,
            bounds: self.bounds,
        }
    }
}

/// Number of equal segments needed so that each is at most `max_len` long.
fn segment_count(length: f64, max_len: f64) -> usize {
    let q = length / max_len;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * q.max(1.0) {
        (r as usize).max(1)
    } else {
        (q.ceil() as usize).max(1)
    }
}

/// Splits every pipe into `⌈L/max_len⌉` equal segments.
///
/// Added nodes are withdrawal nodes labelled after every existing node, in
/// pipe order and inlet to outlet within a pipe. A compressor moves to the
/// first segment of its pipe.
pub fn refine(net: &NetworkSpec, max_len: f64) -> Result<RefinedNetwork> {
    if !(max_len > 0.0 && max_len.is_finite()) {
        return Err(Error::domain("segment length bound must be positive"));
    }
    net.validate()?;

    let mut nodes = net.nodes.clone();
    let n_supply = net.supply_nodes().count();
    let mut index: HashMap<NodeId, usize> =
        nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut next_label = nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;

    let mut edges = Vec::new();
    let mut compressors = Vec::new();
    for pipe in &net.pipes {
        let n = segment_count(pipe.length, max_len);
        let seg_len = pipe.length / n as f64;
        let mut tail = index[&pipe.from_node];
        for s in 0..n {
            let head = if s + 1 == n {
                index[&pipe.to_node]
            } else {
                let id = next_label;
                next_label += 1;
                nodes.push(Node {
                    id,
                    kind: NodeKind::Withdrawal,
                });
                index.insert(id, nodes.len() - 1);
                nodes.len() - 1
            };
            if s == 0 {
                if let Some(c) = net.compressors.iter().find(|c| c.edge_id == pipe.id) {
                    compressors.push(RefinedCompressor {
                        edge: edges.len(),
                        spec: c.clone(),
                    });
                }
            }
            edges.push(RefinedEdge {
                id: edges.len() as EdgeId + 1,
                from: tail,
                to: head,
                length: seg_len,
                diameter: pipe.diameter,
                friction: pipe.friction,
                parent: pipe.id,
                segment: s,
            });
            tail = head;
        }
    }

    Ok(RefinedNetwork {
        nodes,
        edges,
        compressors,
        n_supply,
        sound_speed: net.sound_speed,
        bounds: net.bounds,
        max_segment_length: max_len,
    })
}

// ---------------------------------------------------------------------------
// Document format

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parameters: Option<ParametersDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<NodeDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pipes: Vec<PipeDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    compressors: Vec<CompressorDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    profiles: BTreeMap<String, Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    initial_ratios: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametersDoc {
    sound_speed_mps: f64,
    #[serde(default)]
    rho_min: Option<f64>,
    #[serde(default)]
    rho_max: Option<f64>,
    #[serde(default)]
    phi_min: Option<f64>,
    #[serde(default)]
    phi_max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    kind: NodeKind,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipeDoc {
    id: EdgeId,
    from: NodeId,
    to: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length_m: Option<f64>,
    diameter_m: f64,
    friction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressorDoc {
    edge: EdgeId,
    max_ratio: f64,
    #[serde(default = "unit_efficiency")]
    efficiency: f64,
}

fn unit_efficiency() -> f64 {
    1.0
}

fn parse_document(text: &str) -> Result<Document> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1);
        let msg = e.message().to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .filter(|f| !f.contains(' '));
        Error::Syntax {
            line,
            field,
            message: msg,
        }
    })
}

/// Parses and validates a network document. Lengths given in kilometres are
/// stored in metres.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let doc = parse_document(text)?;
    let params = doc.parameters.ok_or_else(|| Error::Syntax {
        line: None,
        field: Some("parameters".into()),
        message: "missing `parameters` table".into(),
    })?;
    let nodes = doc
        .nodes
        .iter()
        .map(|n| Node {
            id: n.id,
            kind: n.kind,
        })
        .collect();
    let pipes = doc
        .pipes
        .iter()
        .map(|p| {
            let length = match (p.length_km, p.length_m) {
                (Some(km), None) => km * 1000.0,
                (None, Some(m)) => m,
                _ => {
                    return Err(Error::Syntax {
                        line: None,
                        field: Some("length_km".into()),
                        message: format!("pipe {} needs exactly one of length_km, length_m", p.id),
                    })
                }
            };
            Ok(PipeSpec {
                id: p.id,
                from_node: p.from,
                to_node: p.to,
                length,
                diameter: p.diameter_m,
                friction: p.friction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let compressors = doc
        .compressors
        .iter()
        .map(|c| CompressorSpec {
            edge_id: c.edge,
            max_ratio: c.max_ratio,
            efficiency: c.efficiency,
        })
        .collect();
    let defaults = Bounds::default();
    let bounds = Bounds {
        rho_min: params.rho_min.unwrap_or(defaults.rho_min),
        rho_max: params.rho_max.unwrap_or(defaults.rho_max),
        phi_min: params.phi_min.unwrap_or(defaults.phi_min),
        phi_max: params.phi_max.unwrap_or(defaults.phi_max),
    };
    NetworkSpec::new(nodes, pipes, compressors, params.sound_speed_mps, bounds)
}

/// Parses the boundary data (`horizon_s`, `profiles`, `initial_ratios`) of a
/// scenario or network document against `net`.
pub fn parse_scenario(text: &str, net: &NetworkSpec) -> Result<BoundaryScenario> {
    let doc = parse_document(text)?;
    let horizon = doc.horizon_s.ok_or_else(|| Error::Syntax {
        line: None,
        field: Some("horizon_s".into()),
        message: "missing `horizon_s`".into(),
    })?;
    let mut supply = BTreeMap::new();
    let mut withdrawal = BTreeMap::new();
    for (key, pts) in doc.profiles {
        let id: NodeId = key.trim().parse().map_err(|_| Error::Syntax {
            line: None,
            field: Some(format!("profiles.{key}")),
            message: "profile keys must be node labels".into(),
        })?;
        let profile = Profile::new(pts.iter().map(|p| (p[0], p[1])).collect())?;
        match net.node(id).map(|n| n.kind) {
            Some(NodeKind::Supply) => supply.insert(id, profile),
            Some(NodeKind::Withdrawal) => withdrawal.insert(id, profile),
            None => return Err(Error::validation(format!("profile for unknown node {id}"))),
        };
    }
    let initial_ratios = if doc.initial_ratios.is_empty() {
        None
    } else {
        let mut map = BTreeMap::new();
        for (key, mu) in doc.initial_ratios {
            let id: EdgeId = key.trim().parse().map_err(|_| Error::Syntax {
                line: None,
                field: Some(format!("initial_ratios.{key}")),
                message: "initial ratio keys must be pipe labels".into(),
            })?;
            map.insert(id, mu);
        }
        Some(map)
    };
    let scenario = BoundaryScenario {
        horizon,
        supply,
        withdrawal,
        initial_ratios,
    };
    scenario.validate(net)?;
    Ok(scenario)
}

fn network_document(net: &NetworkSpec) -> Document {
    let finite = |v: f64| v.is_finite().then_some(v);
    Document {
        parameters: Some(ParametersDoc {
            sound_speed_mps: net.sound_speed,
            rho_min: finite(net.bounds.rho_min),
            rho_max: finite(net.bounds.rho_max),
            phi_min: finite(net.bounds.phi_min),
            phi_max: finite(net.bounds.phi_max),
        }),
        nodes: net
            .nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                kind: n.kind,
            })
            .collect(),
        pipes: net
            .pipes
            .iter()
            .map(|p| {
                let km = p.length / 1000.0;
                let exact = km * 1000.0 == p.length;
                PipeDoc {
                    id: p.id,
                    from: p.from_node,
                    to: p.to_node,
                    length_km: exact.then_some(km),
                    length_m: (!exact).then_some(p.length),
                    diameter_m: p.diameter,
                    friction: p.friction,
                }
            })
            .collect(),
        compressors: net
            .compressors
            .iter()
            .map(|c| CompressorDoc {
                edge: c.edge_id,
                max_ratio: c.max_ratio,
                efficiency: c.efficiency,
            })
            .collect(),
        ..Document::default()
    }
}

fn add_scenario(doc: &mut Document, scenario: &BoundaryScenario) {
    doc.horizon_s = Some(scenario.horizon);
    for (id, p) in scenario.supply.iter().chain(scenario.withdrawal.iter()) {
        doc.profiles.insert(
            id.to_string(),
            p.points().iter().map(|&(t, v)| [t, v]).collect(),
        );
    }
    if let Some(r) = &scenario.initial_ratios {
        doc.initial_ratios = r.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    }
}

fn render(doc: &Document) -> String {
    toml::to_string(doc).expect("network documents always serialize")
}

/// Serializes a network (and optionally its boundary data) to a document that
/// [`parse_network`] and [`parse_scenario`] read back unchanged.
pub fn to_document(net: &NetworkSpec, scenario: Option<&BoundaryScenario>) -> String {
    let mut doc = network_document(net);
    if let Some(s) = scenario {
        add_scenario(&mut doc, s);
    }
    render(&doc)
}

/// Serializes only the boundary data.
pub fn scenario_document(scenario: &BoundaryScenario) -> String {
    let mut doc = Document::default();
    add_scenario(&mut doc, scenario);
    render(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pipe() -> NetworkSpec {
        parse_network(
            r#"
            [parameters]
            sound_speed_mps = 377.0
            [[nodes]]
            id = 1
            kind = "supply"
            [[nodes]]
            id = 2
            kind = "withdrawal"
            [[pipes]]
            id = 1
            from = 1
            to = 2
            length_km = 100.0
            diameter_m = 0.75
            friction = 0.01
            "#,
        )
        .unwrap()
    }

    #[test]
    fn parses_single_pipe_in_metres() {
        let net = single_pipe();
        assert_eq!(net.pipes.len(), 1);
        assert_eq!(net.pipes[0].length, 100_000.0);
        assert_eq!(net.sound_speed, 377.0);
        assert_eq!(net.bounds.phi_max, f64::INFINITY);
    }

    #[test]
    fn rejects_missing_supply() {
        let err = parse_network(
            r#"
            [parameters]
            sound_speed_mps = 377.0
            [[nodes]]
            id = 1
            kind = "withdrawal"
            [[nodes]]
            id = 2
            kind = "withdrawal"
            [[pipes]]
            id = 1
            from = 1
            to = 2
            length_km = 1.0
            diameter_m = 0.5
            friction = 0.01
            "#,
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("nonempty supply set required"),
            "{err}"
        );
    }

    #[test]
    fn syntax_errors_carry_line() {
        let err = parse_network("[parameters]\nsound_speed_mps = \n").unwrap_err();
        match err {
            Error::Syntax { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("unexpected {other}"),
        }
        let err = parse_network("[parameters]\nsound_speed = 3.0\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { .. }));
    }

    #[test]
    fn rejects_self_loop_and_disconnected() {
        let mut net = single_pipe();
        net.pipes[0].to_node = 1;
        assert!(net
            .validate()
            .unwrap_err()
            .to_string()
            .contains("self-loop"));

        let mut net = single_pipe();
        net.nodes.push(Node {
            id: 3,
            kind: NodeKind::Withdrawal,
        });
        assert!(net
            .validate()
            .unwrap_err()
            .to_string()
            .contains("disconnected"));
    }

    #[test]
    fn rejects_edge_into_supply_and_label_order() {
        let mut net = single_pipe();
        net.pipes[0].from_node = 2;
        net.pipes[0].to_node = 1;
        assert!(net.validate().is_err());

        let net = NetworkSpec::new(
            vec![
                Node {
                    id: 1,
                    kind: NodeKind::Withdrawal,
                },
                Node {
                    id: 2,
                    kind: NodeKind::Supply,
                },
            ],
            vec![PipeSpec {
                id: 1,
                from_node: 2,
                to_node: 1,
                length: 1.0,
                diameter: 1.0,
                friction: 0.01,
            }],
            vec![],
            300.0,
            Bounds::default(),
        );
        assert!(net.unwrap_err().to_string().contains("precede"));
    }

    #[test]
    fn profile_interpolation() {
        let flat = Profile::new(vec![(0.0, 21.0), (3600.0, 21.0)]).unwrap();
        assert_eq!(sample_profile(&flat, 1800.0, 3600.0).unwrap(), 21.0);
        let ramp = Profile::new(vec![(0.0, 0.0), (3600.0, 100.0)]).unwrap();
        assert_eq!(sample_profile(&ramp, 900.0, 3600.0).unwrap(), 25.0);
        assert!(sample_profile(&ramp, 3601.0, 3600.0).is_err());
        assert!(sample_profile(&ramp, -1.0, 3600.0).is_err());
        // constant extrapolation past the last breakpoint
        let short = Profile::new(vec![(0.0, 1.0), (10.0, 2.0)]).unwrap();
        assert_eq!(sample_profile(&short, 50.0, 100.0).unwrap(), 2.0);
        assert!(Profile::new(vec![(1.0, 0.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn refining_at_pipe_length_is_a_noop() {
        let net = single_pipe();
        let r = refine(&net, 100_000.0).unwrap();
        assert_eq!(r.n_edges(), 1);
        assert_eq!(r.n_nodes(), 2);
        assert_eq!(r.edges[0].length, 100_000.0);
    }

    #[test]
    fn refinement_keeps_compressor_at_inlet() {
        let mut net = single_pipe();
        net.compressors.push(CompressorSpec {
            edge_id: 1,
            max_ratio: 1.5,
            efficiency: 1.0,
        });
        let r = refine(&net, 30_000.0).unwrap();
        assert_eq!(r.n_edges(), 4);
        assert_eq!(r.compressors.len(), 1);
        let e = &r.edges[r.compressors[0].edge];
        assert_eq!(e.segment, 0);
        assert_eq!(e.from, 0);
        assert!(r.edges.iter().all(|e| (e.length - 25_000.0).abs() < 1e-9));
        // inserted nodes are withdrawal nodes labelled after the originals
        assert!(r.nodes[2..]
            .iter()
            .all(|n| n.kind == NodeKind::Withdrawal && n.id > 2));
    }

    #[test]
    fn document_round_trip_with_scenario() {
        let net = single_pipe();
        let scenario = BoundaryScenario {
            horizon: 3600.0,
            supply: [(1, Profile::constant(21.0))].into(),
            withdrawal: [(2, Profile::new(vec![(0.0, 10.0), (3600.0, 20.0)]).unwrap())].into(),
            initial_ratios: None,
        };
        let text = to_document(&net, Some(&scenario));
        assert_eq!(parse_network(&text).unwrap(), net);
        assert_eq!(parse_scenario(&text, &net).unwrap(), scenario);
        let only = scenario_document(&scenario);
        assert_eq!(parse_scenario(&only, &net).unwrap(), scenario);
    }
}
