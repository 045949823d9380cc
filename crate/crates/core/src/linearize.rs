//! Linear time-invariant models about a nominal point.
//!
//! The friction term is expanded to first order in `(ρ, φ)` while the
//! compressor ratios and supply densities enter through the incidence blocks
//! evaluated at the argument ratios. The nominal point need not be a steady
//! state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::incidence::{assemble, IncidenceSet};
use crate::network::BoundaryScenario;
use crate::simulate::{Inputs, LumpedModel, Policy, State, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct NominalPoint {
    pub rho_bar: DVector<f64>,
    pub phi_bar: DVector<f64>,
    pub mu_bar: Vec<f64>,
    pub s_bar: DVector<f64>,
    pub w_bar: DVector<f64>,
}

impl NominalPoint {
    pub fn new(x: &State, u: &Inputs) -> Self {
        NominalPoint {
            rho_bar: x.rho.clone(),
            phi_bar: x.phi.clone(),
            mu_bar: u.mu.clone(),
            s_bar: u.s.clone(),
            w_bar: u.w.clone(),
        }
    }

    pub fn state(&self) -> State {
        State::new(self.rho_bar.clone(), self.phi_bar.clone())
    }

    pub fn inputs(&self) -> Inputs {
        Inputs {
            mu: self.mu_bar.clone(),
            s: self.s_bar.clone(),
            w: self.w_bar.clone(),
        }
    }
}

/// `ẋ = Ā x + B_μ μ + B_s s + B_w w + c`, the linear model written out.
#[derive(Clone, Debug)]
pub struct AffineDynamics {
    pub a: DMatrix<f64>,
    pub b_mu: DMatrix<f64>,
    pub b_s: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearModel {
    pub nominal: NominalPoint,
    /// Diagonal of ᾱ.
    pub alpha_bar: DVector<f64>,
    /// Diagonal of β̄.
    pub beta_bar: DVector<f64>,
    pub a_bar: DMatrix<f64>,
    pub f_bar: DVector<f64>,
    /// Incidence blocks at μ̄.
    pub inc_bar: IncidenceSet,
    pub sound_speed: f64,
    pub inertia: bool,
}

/// Diagonals of ᾱ = K·diag(φ̄|φ̄|/(Q_ℓρ̄)²) and β̄ = 2K·diag(|φ̄|/(Q_ℓρ̄)).
pub fn jacobians(
    model: &LumpedModel,
    nominal: &NominalPoint,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let inc = &model.inc;
    if nominal.rho_bar.len() != model.n_rho() || nominal.phi_bar.len() != model.n_phi() {
        return Err(Error::domain("nominal state has the wrong dimension"));
    }
    let out = inc.outlet_density(&nominal.rho_bar);
    if let Some(k) = out.iter().position(|&r| !(r > 0.0)) {
        return Err(Error::SingularFriction {
            edge: model.net.edges[k].id as usize,
            density: out[k],
        });
    }
    let phi = &nominal.phi_bar;
    let alpha = DVector::from_fn(phi.len(), |k, _| {
        inc.k[k] * phi[k] * phi[k].abs() / (out[k] * out[k])
    });
    let beta = DVector::from_fn(phi.len(), |k, _| 2.0 * inc.k[k] * phi[k].abs() / out[k]);
    Ok((alpha, beta))
}

pub fn build_model(model: &LumpedModel, nominal: &NominalPoint) -> Result<LinearModel> {
    let (alpha, beta) = jacobians(model, nominal)?;
    let inc_bar = assemble(&model.net, &nominal.mu_bar)?;
    if nominal.s_bar.len() != model.net.n_supply || nominal.w_bar.len() != model.n_rho() {
        return Err(Error::domain("nominal inputs have the wrong dimension"));
    }
    let (nr, ne, ns) = (model.n_rho(), model.n_phi(), inc_bar.n_supply);
    let sigma2 = model.sound_speed().powi(2);
    let mut a = DMatrix::zeros(nr + ne, nr + ne);
    for k in 0..ne {
        let h = inc_bar.head[k] - ns;
        a[(h, nr + k)] += inc_bar.lambda_inv[h] * inc_bar.area[k];
        if inc_bar.tail[k] >= ns {
            let t = inc_bar.tail[k] - ns;
            a[(t, nr + k)] -= inc_bar.lambda_inv[t] * inc_bar.area[k];
        }
        // ᾱQ_ℓ − σ²L⁻¹M̄
        let c = sigma2 / inc_bar.length[k];
        a[(nr + k, h)] += alpha[k] - c;
        if inc_bar.tail[k] >= ns {
            a[(nr + k, inc_bar.tail[k] - ns)] += c * inc_bar.edge_ratio[k];
        }
        a[(nr + k, nr + k)] = -beta[k];
    }

    let out = inc_bar.outlet_density(&nominal.rho_bar);
    let dd = inc_bar.density_difference(&nominal.rho_bar, &nominal.s_bar);
    let phi = &nominal.phi_bar;
    let mut f = DVector::zeros(nr + ne);
    for k in 0..ne {
        f[nr + k] = sigma2 / inc_bar.length[k] * dd[k]
            - inc_bar.k[k] * phi[k] * phi[k].abs() / out[k]
            - alpha[k] * out[k]
            + beta[k] * phi[k];
    }

    Ok(LinearModel {
        nominal: nominal.clone(),
        alpha_bar: alpha,
        beta_bar: beta,
        a_bar: a,
        f_bar: f,
        inc_bar,
        sound_speed: model.sound_speed(),
        inertia: model.inertia,
    })
}

/// Rebuilds the model at a new nominal point.
pub fn relinearize(
    model: &LumpedModel,
    _old: &LinearModel,
    nominal: &NominalPoint,
) -> Result<LinearModel> {
    build_model(model, nominal)
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn n_rho(&self) -> usize {
        self.nominal.rho_bar.len()
    }

    pub fn nominal_vector(&self) -> DVector<f64> {
        self.nominal.state().to_vector()
    }

    /// Evaluates `Āx − [Λ⁻¹w; σ²L⁻¹(N s̄ + M ρ̄ + N̄ s)] + F̄` with `M`, `N` at `u.mu`.
    pub fn linear_rhs(
        &self,
        x: &State,
        u: &Inputs,
        net: &crate::network::RefinedNetwork,
    ) -> Result<State> {
        let ratio = crate::incidence::edge_ratios(net, &u.mu)?;
        let inc = &self.inc_bar;
        let nr = self.n_rho();
        let sigma2 = self.sound_speed.powi(2);
        let mut v = &self.a_bar * x.to_vector() + &self.f_bar;
        for j in 0..nr {
            v[j] -= inc.lambda_inv[j] * u.w[j];
        }
        let out_bar = inc.outlet_density(&self.nominal.rho_bar);
        let in_bar = inc.inlet_density(&self.nominal.rho_bar, &self.nominal.s_bar);
        for k in 0..inc.n_edges() {
            // (N s̄ + M ρ̄)_k at the argument ratios, plus (N̄ s)_k
            let mixed = out_bar[k] - ratio[k] * in_bar[k];
            let ns_k = if inc.tail[k] < inc.n_supply {
                -inc.edge_ratio[k] * u.s[inc.tail[k]]
            } else {
                0.0
            };
            v[nr + k] -= sigma2 / inc.length[k] * (mixed + ns_k);
        }
        Ok(State::from_vector(&v, nr))
    }

    /// Matrices of the model as an affine map of state, ratios, supplies and withdrawals.
    pub fn affine(&self, compressor_edges: &[usize]) -> AffineDynamics {
        let inc = &self.inc_bar;
        let (nr, ne, ns) = (self.n_rho(), inc.n_edges(), inc.n_supply);
        let sigma2 = self.sound_speed.powi(2);
        let out_bar = inc.outlet_density(&self.nominal.rho_bar);
        let in_bar = inc.inlet_density(&self.nominal.rho_bar, &self.nominal.s_bar);
        let mut is_comp = vec![false; ne];
        let mut b_mu = DMatrix::zeros(nr + ne, compressor_edges.len());
        for (c, &k) in compressor_edges.iter().enumerate() {
            is_comp[k] = true;
            b_mu[(nr + k, c)] = sigma2 / inc.length[k] * in_bar[k];
        }
        let mut b_s = DMatrix::zeros(nr + ne, ns);
        let mut b_w = DMatrix::zeros(nr + ne, nr);
        let mut c = self.f_bar.clone();
        for j in 0..nr {
            b_w[(j, j)] = -inc.lambda_inv[j];
        }
        for k in 0..ne {
            let g = sigma2 / inc.length[k];
            if inc.tail[k] < ns {
                b_s[(nr + k, inc.tail[k])] = g * inc.edge_ratio[k];
            }
            let fixed_in = if is_comp[k] { 0.0 } else { in_bar[k] };
            c[nr + k] -= g * (out_bar[k] - fixed_in);
        }
        AffineDynamics {
            a: self.a_bar.clone(),
            b_mu,
            b_s,
            b_w,
            c,
        }
    }
}

impl LinearModel {
    /// Integrates the linear model from `x0` with implicit Euler steps of
    /// `dt`, sampling inputs at the right end of each step.
    pub fn simulate(
        &self,
        model: &LumpedModel,
        x0: State,
        scenario: &BoundaryScenario,
        policy: &Policy,
        dt: f64,
    ) -> Result<Trajectory> {
        if !(dt > 0.0) {
            return Err(Error::domain("time step must be positive"));
        }
        let nr = self.n_rho();
        let mass = model.mass();
        let zero = State::from_vector(&DVector::zeros(self.dim()), nr);
        let horizon = scenario.horizon;
        let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
        let mut traj = Trajectory {
            times: vec![0.0],
            states: vec![x0],
            controls: vec![policy.at(0.0).to_vec()],
        };
        let mut factor: Option<(f64, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)> = None;
        let mut t_prev = 0.0;
        for m in 1..=steps {
            let t = (m as f64 * dt).min(horizon);
            let h = t - t_prev;
            if factor
                .as_ref()
                .is_none_or(|(h0, _)| (h0 - h).abs() > 1e-12 * h)
            {
                let k = DMatrix::from_diagonal(&mass) - &self.a_bar * h;
                factor = Some((h, k.lu()));
            }
            let mu = policy.at(t);
            let u = model.inputs_at(scenario, mu, t)?;
            let g = self.linear_rhs(&zero, &u, &model.net)?.to_vector();
            let rhs = mass.component_mul(&traj.states.last().unwrap().to_vector()) + g * h;
            let x = factor.as_ref().unwrap().1.solve(&rhs).ok_or_else(|| {
                Error::Solver(format!("singular linear step matrix at t = {t} s"))
            })?;
            traj.times.push(t);
            traj.states.push(State::from_vector(&x, nr));
            traj.controls.push(mu.to_vec());
            t_prev = t;
        }
        Ok(traj)
    }
}

impl AffineDynamics {
    pub fn eval(
        &self,
        x: &DVector<f64>,
        mu: &[f64],
        s: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a * x
            + &self.b_mu * DVector::from_column_slice(mu)
            + &self.b_s * s
            + &self.b_w * w
            + &self.c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{refine, Bounds, CompressorSpec, NetworkSpec, Node, NodeKind, PipeSpec};

    fn model() -> LumpedModel {
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
                Node {
                    id: 3,
                    kind: NodeKind::Withdrawal,
                },
            ],
            vec![
                PipeSpec {
                    id: 1,
                    from_node: 1,
                    to_node: 2,
                    length: 20_000.0,
                    diameter: 0.5,
                    friction: 0.011,
                },
                PipeSpec {
                    id: 2,
                    from_node: 2,
                    to_node: 3,
                    length: 10_000.0,
                    diameter: 0.6,
                    friction: 0.01,
                },
            ],
            vec![
                CompressorSpec {
                    edge_id: 1,
                    max_ratio: 2.0,
                    efficiency: 1.0,
                },
                CompressorSpec {
                    edge_id: 2,
                    max_ratio: 2.0,
                    efficiency: 1.0,
                },
            ],
            377.0,
            Bounds::default(),
        )
        .unwrap();
        LumpedModel::new(refine(&net, 10_000.0).unwrap()).unwrap()
    }

    fn nominal() -> NominalPoint {
        NominalPoint {
            rho_bar: DVector::from_vec(vec![33.0, 31.0, 34.0]),
            phi_bar: DVector::from_vec(vec![250.0, 240.0, -30.0]),
            mu_bar: vec![1.2, 1.1],
            s_bar: DVector::from_vec(vec![30.0]),
            w_bar: DVector::from_vec(vec![10.0, 0.0, 5.0]),
        }
    }

    #[test]
    fn reference_jacobian_entries() {
        // λ=0.011, D=0.5, φ̄=300, outlet density 35
        let k: f64 = 0.011 / 1.0;
        let beta = 2.0 * k * 300.0 / 35.0;
        let alpha = k * 300.0 * 300.0 / 35.0f64.powi(2);
        assert!((beta - 0.18857).abs() < 1e-5);
        assert!((alpha - 0.80816).abs() < 1e-5);
        let m = model();
        let mut nom = nominal();
        nom.phi_bar[0] = 300.0;
        let out = m.inc.outlet_density(&nom.rho_bar)[0];
        nom.rho_bar[m.inc.head[0] - 1] = 35.0;
        let (a, b) = jacobians(&m, &nom).unwrap();
        assert!((b[0] - 2.0 * k * 300.0 / 35.0).abs() < 1e-12, "{out}");
        assert!((a[0] - k * 300.0 * 300.0 / 1225.0).abs() < 1e-12);
    }

    #[test]
    fn zero_flux_and_parity() {
        let m = model();
        let mut nom = nominal();
        nom.phi_bar.fill(0.0);
        let (a, b) = jacobians(&m, &nom).unwrap();
        assert_eq!(a.amax(), 0.0);
        assert_eq!(b.amax(), 0.0);
        let nom = nominal();
        let mut flipped = nom.clone();
        flipped.phi_bar = -&nom.phi_bar;
        let (a1, b1) = jacobians(&m, &nom).unwrap();
        let (a2, b2) = jacobians(&m, &flipped).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(a1, -a2);
    }

    #[test]
    fn consistent_at_nominal() {
        let m = model();
        let nom = nominal();
        let lin = build_model(&m, &nom).unwrap();
        let f = m.rhs(&nom.state(), &nom.inputs()).unwrap().to_vector();
        let g = lin
            .linear_rhs(&nom.state(), &nom.inputs(), &m.net)
            .unwrap()
            .to_vector();
        assert!((&f - &g).amax() <= 1e-12 * f.amax().max(1.0));
        let aff = lin.affine(&[0, 2]);
        let h = aff.eval(
            &nom.state().to_vector(),
            &nom.mu_bar,
            &nom.s_bar,
            &nom.w_bar,
        );
        assert!((&f - &h).amax() <= 1e-12 * f.amax().max(1.0));
    }

    #[test]
    fn linear_simulation_rests_at_steady_nominal() {
        let b = crate::bench::pipe5km();
        let model = LumpedModel::new(crate::network::refine(&b.network, 1_000.0).unwrap()).unwrap();
        let u = model.inputs_at(&b.scenario, &[], 0.0).unwrap();
        let x = model.steady_state(&u).unwrap();
        let lin = build_model(&model, &NominalPoint::new(&x, &u)).unwrap();
        let mut scenario = b.scenario.clone();
        scenario.horizon = 3600.0;
        let traj = lin
            .simulate(
                &model,
                x.clone(),
                &scenario,
                &Policy::Constant(vec![]),
                60.0,
            )
            .unwrap();
        assert_eq!(traj.len(), 61);
        let x0 = x.to_vector();
        for s in &traj.states {
            assert!((s.to_vector() - &x0).amax() <= 1e-9 * x0.amax());
        }
    }

    #[test]
    fn affine_form_matches_linear_rhs() {
        let m = model();
        let nom = nominal();
        let lin = build_model(&m, &nom).unwrap();
        let aff = lin.affine(&m.net.compressors.iter().map(|c| c.edge).collect::<Vec<_>>());
        let x = State::new(
            DVector::from_vec(vec![30.0, 29.0, 32.0]),
            DVector::from_vec(vec![200.0, 210.0, 10.0]),
        );
        let u = Inputs {
            mu: vec![1.4, 1.0],
            s: DVector::from_vec(vec![28.0]),
            w: DVector::from_vec(vec![3.0, 0.0, 8.0]),
        };
        let g = lin.linear_rhs(&x, &u, &m.net).unwrap().to_vector();
        let h = aff.eval(&x.to_vector(), &u.mu, &u.s, &u.w);
        assert!((&g - &h).amax() <= 1e-9 * g.amax());
    }

    #[test]
    fn state_matrix_matches_nonlinear_jacobian() {
        let m = model();
        let nom = nominal();
        let lin = build_model(&m, &nom).unwrap();
        let j = m.jacobian(&nom.state(), &nom.inputs()).unwrap();
        assert!((&lin.a_bar - j).amax() < 1e-12);
        let again = relinearize(&m, &lin, &nom).unwrap();
        assert_eq!(again.a_bar, lin.a_bar);
        assert_eq!(again.f_bar, lin.f_bar);
    }
}
