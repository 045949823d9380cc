//! Matrices of the discretized network.
//!
//! Row `k` of the weighted incidence matrix Ξ describes refined edge
//! `k: i → j` and holds `-μ_k` in column `i` and `1` in column `j`. Columns are
//! ordered supply-first, so `N` is the leading block of Ξ and `M` the
//! trailing one. Since every edge head is a withdrawal node, `Q_ℓ` selects the
//! outlet density of each edge and Λ = Q_ℓ'XLQ_ℓ is diagonal.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::network::RefinedNetwork;
use crate::sparse::RowMatrix;

/// All matrix objects of the lumped model at one compressor setting.
#[derive(Clone, Debug)]
pub struct IncidenceSet {
    /// E × V weighted incidence.
    pub xi: RowMatrix,
    /// E × V_w withdrawal block of Ξ.
    pub m: RowMatrix,
    /// E × V_s supply block of Ξ.
    pub n: RowMatrix,
    /// sign(M).
    pub q: RowMatrix,
    pub q_pos: RowMatrix,
    pub q_neg: RowMatrix,
    /// Diagonal of L (segment lengths).
    pub length: DVector<f64>,
    /// Diagonal of K (λ/2D).
    pub k: DVector<f64>,
    /// Diagonal of X (cross-sectional areas).
    pub area: DVector<f64>,
    /// Diagonal of Λ.
    pub lambda: DVector<f64>,
    pub lambda_inv: DVector<f64>,
    /// Ratio applied on each edge (1 without a compressor).
    pub edge_ratio: DVector<f64>,
    /// Tail node index of each edge.
    pub tail: Vec<usize>,
    /// Head node index of each edge.
    pub head: Vec<usize>,
    pub n_supply: usize,
}

/// Expands a per-compressor ratio vector to one ratio per edge.
pub fn edge_ratios(net: &RefinedNetwork, mu: &[f64]) -> Result<DVector<f64>> {
    if mu.len() != net.n_compressors() {
        return Err(Error::domain(format!(
            "expected {} compressor ratios, got {}",
            net.n_compressors(),
            mu.len()
        )));
    }
    let mut out = DVector::from_element(net.n_edges(), 1.0);
    for (c, &m) in net.compressors.iter().zip(mu) {
        if !(m >= 1.0) {
            return Err(Error::domain(format!(
                "compressor ratio {m} on edge {} is below 1",
                net.edges[c.edge].id
            )));
        }
        out[c.edge] = m;
    }
    Ok(out)
}

/// Diagonal of Λ: for each withdrawal node, the summed volume of its incoming segments.
pub fn volume_matrix(net: &RefinedNetwork) -> Result<DVector<f64>> {
    let mut lambda = DVector::zeros(net.n_withdrawal());
    for e in &net.edges {
        lambda[e.to - net.n_supply] += e.area() * e.length;
    }
    if let Some(j) = lambda.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Assembly(format!(
            "withdrawal node {} has no incoming edge; volume matrix is singular",
            net.nodes[net.n_supply + j].id
        )));
    }
    Ok(lambda)
}

pub fn assemble(net: &RefinedNetwork, mu: &[f64]) -> Result<IncidenceSet> {
    let ratio = edge_ratios(net, mu)?;
    let (ne, nv, ns) = (net.n_edges(), net.n_nodes(), net.n_supply);
    let mut xi = RowMatrix::zeros(ne, nv);
    let mut tail = Vec::with_capacity(ne);
    let mut head = Vec::with_capacity(ne);
    for (k, e) in net.edges.iter().enumerate() {
        if e.to < ns {
            return Err(Error::Assembly(format!(
                "edge {} enters a supply node",
                e.id
            )));
        }
        xi.push(k, e.from, -ratio[k]);
        xi.push(k, e.to, 1.0);
        tail.push(e.from);
        head.push(e.to);
    }
    let n = xi.columns(0, ns);
    let m = xi.columns(ns, nv - ns);
    let q = m.map(f64::signum);
    let q_pos = q.map(|v| v.max(0.0));
    let q_neg = q.map(|v| v.min(0.0));
    let lambda = volume_matrix(net)?;
    let lambda_inv = lambda.map(|v| 1.0 / v);
    Ok(IncidenceSet {
        xi,
        m,
        n,
        q,
        q_pos,
        q_neg,
        length: DVector::from_iterator(ne, net.edges.iter().map(|e| e.length)),
        k: DVector::from_iterator(
            ne,
            net.edges.iter().map(|e| e.friction / (2.0 * e.diameter)),
        ),
        area: DVector::from_iterator(ne, net.edges.iter().map(|e| e.area())),
        lambda,
        lambda_inv,
        edge_ratio: ratio,
        tail,
        head,
        n_supply: ns,
    })
}

impl IncidenceSet {
    pub fn n_edges(&self) -> usize {
        self.tail.len()
    }

    pub fn n_withdrawal(&self) -> usize {
        self.lambda.len()
    }

    /// Q_ℓρ: outlet density of every edge.
    pub fn outlet_density(&self, rho: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n_edges(),
            self.head.iter().map(|&h| rho[h - self.n_supply]),
        )
    }

    /// Density at the tail of every edge, read from ρ or s.
    pub fn inlet_density(&self, rho: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n_edges(),
            self.tail.iter().map(|&t| {
                if t < self.n_supply {
                    s[t]
                } else {
                    rho[t - self.n_supply]
                }
            }),
        )
    }

    /// Mρ + Ns at the assembled ratios.
    pub fn density_difference(&self, rho: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        self.outlet_density(rho) - self.inlet_density(rho, s).component_mul(&self.edge_ratio)
    }

    /// Q'Xφ: net mass inflow into every withdrawal node.
    pub fn nodal_inflow(&self, phi: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_withdrawal());
        for k in 0..self.n_edges() {
            let flow = self.area[k] * phi[k];
            out[self.head[k] - self.n_supply] += flow;
            if self.tail[k] >= self.n_supply {
                out[self.tail[k] - self.n_supply] -= flow;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{refine, Bounds, CompressorSpec, NetworkSpec, Node, NodeKind, PipeSpec};

    fn one_edge(mu: Option<f64>) -> RefinedNetwork {
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
                length: 10_000.0,
                diameter: 0.5,
                friction: 0.011,
            }],
            mu.map(|m| CompressorSpec {
                edge_id: 1,
                max_ratio: m.max(2.0),
                efficiency: 1.0,
            })
            .into_iter()
            .collect(),
            377.0,
            Bounds::default(),
        )
        .unwrap();
        refine(&net, 10_000.0).unwrap()
    }

    #[test]
    fn single_edge_signs() {
        let inc = assemble(&one_edge(None), &[]).unwrap();
        assert_eq!(inc.xi.to_dense().as_slice(), &[-1.0, 1.0]);
        assert_eq!(inc.q.get(0, 0), 1.0);
        assert_eq!(inc.q_pos.get(0, 0), 1.0);
        assert_eq!(inc.q_neg.get(0, 0), 0.0);
    }

    #[test]
    fn compressor_scales_tail_only() {
        let net = one_edge(Some(1.5));
        let inc = assemble(&net, &[1.5]).unwrap();
        assert_eq!(inc.xi.get(0, 0), -1.5);
        assert_eq!(inc.xi.get(0, 1), 1.0);
        assert_eq!(inc.q.get(0, 0), 1.0);
        assert!(matches!(assemble(&net, &[0.9]), Err(Error::Domain(_))));
        assert!(assemble(&net, &[]).is_err());
    }

    #[test]
    fn split_pipe_volumes() {
        let mut net = one_edge(None).to_spec();
        net.pipes[0].diameter = 0.5;
        let r = refine(&net, 5_000.0).unwrap();
        let lambda = volume_matrix(&r).unwrap();
        let expected = std::f64::consts::PI * 0.25 / 4.0 * 5000.0;
        assert_eq!(lambda.len(), 2);
        for v in lambda.iter() {
            assert!((v - expected).abs() < 1e-9);
            assert!((v - 981.75).abs() < 0.01);
        }
    }

    #[test]
    fn structured_products_match_matrices() {
        let mut net = one_edge(Some(1.3)).to_spec();
        net.pipes[0].length = 30_000.0;
        let r = refine(&net, 10_000.0).unwrap();
        let inc = assemble(&r, &[1.3]).unwrap();
        let rho = DVector::from_vec(vec![30.0, 29.0, 28.5]);
        let s = DVector::from_vec(vec![25.0]);
        let phi = DVector::from_vec(vec![100.0, 90.0, 80.0]);
        let dd = inc.m.mul_vec(&rho) + inc.n.mul_vec(&s);
        assert!((inc.density_difference(&rho, &s) - dd).norm() < 1e-12);
        let xphi = phi.component_mul(&inc.area);
        assert!((inc.nodal_inflow(&phi) - inc.q.tr_mul_vec(&xphi)).norm() < 1e-9);
        assert_eq!(inc.outlet_density(&rho), inc.q_pos.mul_vec(&rho));
    }
}
