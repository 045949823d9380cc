//! Nonlinear lumped dynamics, steady states and implicit time stepping.
//!
//! The state is `x = (ρ, φ)` with withdrawal-node densities first. The model
//! is written as `diag(I, δI)·ẋ = f(x, μ, s, w)` where
//!
//! ```text
//! f_ρ = Λ⁻¹(Q'Xφ − w)
//! f_φ = −σ²L⁻¹(Mρ + Ns) − Kφ⊙|φ|/(Q_ℓρ)
//! ```
//!
//! With δ = 0 the flux equation is algebraic and stepping solves a DAE.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::incidence::{assemble, edge_ratios, IncidenceSet};
use crate::network::{BoundaryScenario, RefinedNetwork};

pub const STEADY_TOL: f64 = 1e-10;
pub const STEP_TOL: f64 = 1e-9;
const MAX_NEWTON: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub rho: DVector<f64>,
    pub phi: DVector<f64>,
}

impl State {
    pub fn new(rho: DVector<f64>, phi: DVector<f64>) -> Self {
        State { rho, phi }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.rho.len() + self.phi.len());
        v.rows_mut(0, self.rho.len()).copy_from(&self.rho);
        v.rows_mut(self.rho.len(), self.phi.len())
            .copy_from(&self.phi);
        v
    }

    pub fn from_vector(v: &DVector<f64>, n_rho: usize) -> Self {
        State {
            rho: v.rows(0, n_rho).into_owned(),
            phi: v.rows(n_rho, v.len() - n_rho).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho
            .iter()
            .chain(self.phi.iter())
            .all(|v| v.is_finite())
    }
}

/// Boundary inputs and compressor ratios at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub mu: Vec<f64>,
    /// Supply densities in supply-node order.
    pub s: DVector<f64>,
    /// Withdrawals in withdrawal-node order.
    pub w: DVector<f64>,
}

/// Compressor schedule over time.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Constant(Vec<f64>),
    /// Value `values[m]` applies on `(times[m-1], times[m]]`, and `values[0]` at `times[0]`.
    Piecewise {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl Policy {
    pub fn at(&self, t: f64) -> &[f64] {
        match self {
            Policy::Constant(mu) => mu,
            Policy::Piecewise { times, values } => {
                let m = times.partition_point(|&tm| tm < t - 1e-9);
                &values[m.min(values.len() - 1)]
            }
        }
    }
}

/// Sampled simulation or optimization output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Writes `t,node:<id>.rho...,edge:<id>.phi...,comp:<id>.mu...`.
    pub fn write_csv<W: Write>(&self, net: &RefinedNetwork, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(
            net.nodes[net.n_supply..]
                .iter()
                .map(|n| format!("node:{}.rho", n.id)),
        );
        header.extend(net.edges.iter().map(|e| format!("edge:{}.phi", e.id)));
        header.extend(
            net.compressors
                .iter()
                .map(|c| format!("comp:{}.mu", c.spec.edge_id)),
        );
        wtr.write_record(&header)?;
        for ((t, x), mu) in self.times.iter().zip(&self.states).zip(&self.controls) {
            let row = std::iter::once(*t)
                .chain(x.rho.iter().copied())
                .chain(x.phi.iter().copied())
                .chain(mu.iter().copied())
                .map(|v| format!("{v:e}"));
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let (nr, ne, nc) = (count("node:"), count("edge:"), count("comp:"));
        if header.get(0) != Some("t") || 1 + nr + ne + nc != header.len() {
            return Err(Error::Syntax {
                line: Some(1),
                field: None,
                message: "unexpected trajectory header".into(),
            });
        }
        let mut traj = Trajectory {
            times: vec![],
            states: vec![],
            controls: vec![],
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Syntax {
                    line: Some(i + 2),
                    field: None,
                    message: e.to_string(),
                })?;
            traj.times.push(vals[0]);
            traj.states.push(State::new(
                DVector::from_column_slice(&vals[1..1 + nr]),
                DVector::from_column_slice(&vals[1 + nr..1 + nr + ne]),
            ));
            traj.controls.push(vals[1 + nr + ne..].to_vec());
        }
        Ok(traj)
    }
}

/// The nonlinear lumped model of a refined network.
#[derive(Clone, Debug)]
pub struct LumpedModel {
    pub net: RefinedNetwork,
    /// Incidence data at unit ratios; ratio-dependent terms are applied per call.
    pub inc: IncidenceSet,
    /// Inertia flag δ.
    pub inertia: bool,
}

impl LumpedModel {
    pub fn new(net: RefinedNetwork) -> Result<Self> {
        let ones = vec![1.0; net.n_compressors()];
        let inc = assemble(&net, &ones)?;
        Ok(LumpedModel {
            net,
            inc,
            inertia: true,
        })
    }

    pub fn with_inertia(mut self, inertia: bool) -> Self {
        self.inertia = inertia;
        self
    }

    pub fn sound_speed(&self) -> f64 {
        self.net.sound_speed
    }

    pub fn n_rho(&self) -> usize {
        self.net.n_withdrawal()
    }

    pub fn n_phi(&self) -> usize {
        self.net.n_edges()
    }

    pub fn dim(&self) -> usize {
        self.n_rho() + self.n_phi()
    }

    /// Diagonal of the mass matrix diag(I, δI).
    pub fn mass(&self) -> DVector<f64> {
        let d = if self.inertia { 1.0 } else { 0.0 };
        DVector::from_fn(self.dim(), |i, _| if i < self.n_rho() { 1.0 } else { d })
    }

    /// Boundary inputs sampled from a scenario at `t`.
    pub fn inputs_at(&self, scenario: &BoundaryScenario, mu: &[f64], t: f64) -> Result<Inputs> {
        Ok(Inputs {
            mu: mu.to_vec(),
            s: DVector::from_vec(self.net.supply_vector(scenario, t)?),
            w: DVector::from_vec(self.net.withdrawal_vector(scenario, t)?),
        })
    }

    fn check_inputs(&self, u: &Inputs) -> Result<DVector<f64>> {
        if u.s.len() != self.net.n_supply || u.w.len() != self.n_rho() {
            return Err(Error::domain("input vector sizes do not match the network"));
        }
        edge_ratios(&self.net, &u.mu)
    }

    fn outlet(&self, rho: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.inc.outlet_density(rho);
        if let Some(k) = out.iter().position(|&r| !(r > 0.0)) {
            return Err(Error::SingularFriction {
                edge: self.net.edges[k].id as usize,
                density: out[k],
            });
        }
        Ok(out)
    }

    /// `f(x)` and, per row, the sum of absolute values of its terms.
    fn rhs_terms(&self, x: &State, u: &Inputs) -> Result<(DVector<f64>, DVector<f64>)> {
        let ratio = self.check_inputs(u)?;
        let inc = &self.inc;
        let sigma2 = self.sound_speed().powi(2);
        let out = self.outlet(&x.rho)?;
        let inlet = inc.inlet_density(&x.rho, &u.s);
        let (nr, ne) = (self.n_rho(), self.n_phi());
        let mut f = DVector::zeros(nr + ne);
        let mut scale = DVector::zeros(nr + ne);

        let inflow = inc.nodal_inflow(&x.phi);
        let mut abs_flow = u.w.abs();
        for k in 0..ne {
            let flow = (inc.area[k] * x.phi[k]).abs();
            abs_flow[inc.head[k] - inc.n_supply] += flow;
            if inc.tail[k] >= inc.n_supply {
                abs_flow[inc.tail[k] - inc.n_supply] += flow;
            }
        }
        for j in 0..nr {
            f[j] = inc.lambda_inv[j] * (inflow[j] - u.w[j]);
            scale[j] = inc.lambda_inv[j] * abs_flow[j];
        }
        for k in 0..ne {
            let c = sigma2 / inc.length[k];
            let fr = inc.k[k] * x.phi[k] * x.phi[k].abs() / out[k];
            f[nr + k] = -c * (out[k] - ratio[k] * inlet[k]) - fr;
            scale[nr + k] = c * (out[k].abs() + ratio[k] * inlet[k].abs()) + fr.abs();
        }
        Ok((f, scale))
    }

    /// Right-hand side `f(x, μ, s, w)`; with δ = 1 this is `ẋ`.
    pub fn rhs(&self, x: &State, u: &Inputs) -> Result<State> {
        let (f, _) = self.rhs_terms(x, u)?;
        Ok(State::from_vector(&f, self.n_rho()))
    }

    /// Max-norm of `f` with each row divided by the magnitude of its terms.
    pub fn scaled_residual(&self, x: &State, u: &Inputs) -> Result<f64> {
        let (f, scale) = self.rhs_terms(x, u)?;
        Ok(scaled_max(&f, &scale))
    }

    /// `∂f/∂x` as a dense matrix.
    pub fn jacobian(&self, x: &State, u: &Inputs) -> Result<DMatrix<f64>> {
        let ratio = self.check_inputs(u)?;
        let inc = &self.inc;
        let sigma2 = self.sound_speed().powi(2);
        let out = self.outlet(&x.rho)?;
        let (nr, ne, ns) = (self.n_rho(), self.n_phi(), inc.n_supply);
        let mut j = DMatrix::zeros(nr + ne, nr + ne);
        for k in 0..ne {
            let h = inc.head[k] - ns;
            j[(h, nr + k)] += inc.lambda_inv[h] * inc.area[k];
            if inc.tail[k] >= ns {
                let t = inc.tail[k] - ns;
                j[(t, nr + k)] -= inc.lambda_inv[t] * inc.area[k];
            }
            let c = sigma2 / inc.length[k];
            let phi = x.phi[k];
            j[(nr + k, h)] += -c + inc.k[k] * phi * phi.abs() / (out[k] * out[k]);
            if inc.tail[k] >= ns {
                j[(nr + k, inc.tail[k] - ns)] += c * ratio[k];
            }
            j[(nr + k, nr + k)] = -2.0 * inc.k[k] * phi.abs() / out[k];
        }
        Ok(j)
    }

    /// `∂f/∂μ`, one column per compressor.
    pub fn mu_jacobian(&self, x: &State, u: &Inputs) -> Result<DMatrix<f64>> {
        self.check_inputs(u)?;
        let inlet = self.inc.inlet_density(&x.rho, &u.s);
        let sigma2 = self.sound_speed().powi(2);
        let nr = self.n_rho();
        let mut b = DMatrix::zeros(self.dim(), self.net.n_compressors());
        for (c, comp) in self.net.compressors.iter().enumerate() {
            let k = comp.edge;
            b[(nr + k, c)] = sigma2 / self.inc.length[k] * inlet[k];
        }
        Ok(b)
    }

    /// Default Newton start: uniform density at the mean supply value and the
    /// least-norm flux satisfying `Q'Xφ = w`.
    pub fn initial_guess(&self, u: &Inputs) -> State {
        let mean = u.s.mean();
        let rho = DVector::from_element(self.n_rho(), mean);
        let mut b = self.inc.q.to_dense();
        for k in 0..self.n_phi() {
            b.row_mut(k).scale_mut(self.inc.area[k]);
        }
        let b = b.transpose();
        let bbt = &b * b.transpose();
        let phi = match bbt.cholesky() {
            Some(ch) => b.transpose() * ch.solve(&u.w),
            None => DVector::zeros(self.n_phi()),
        };
        State::new(rho, phi)
    }

    /// Solves `f(x) = 0`.
    pub fn steady_state(&self, u: &Inputs) -> Result<State> {
        self.check_inputs(u)?;
        let start = self.initial_guess(u);
        match self.steady_newton(&start, u) {
            Ok(x) => Ok(x),
            Err(first) => self.steady_continuation(u).map_err(|_| first),
        }
    }

    /// Solves `f(x) = 0` starting from `start`.
    pub fn steady_state_from(&self, start: &State, u: &Inputs) -> Result<State> {
        self.check_inputs(u)?;
        match self.steady_newton(start, u) {
            Ok(x) => Ok(x),
            Err(_) => self.steady_state(u),
        }
    }

    fn steady_newton(&self, start: &State, u: &Inputs) -> Result<State> {
        let nr = self.n_rho();
        let x = newton(
            "steady state",
            start.to_vector(),
            STEADY_TOL,
            |v| self.rhs_terms(&State::from_vector(v, nr), u),
            |v| self.jacobian(&State::from_vector(v, nr), u),
        )?;
        let x = State::from_vector(&x, nr);
        if x.rho.iter().any(|&r| r <= 0.0) {
            return Err(Error::Infeasible(
                "steady state has a nonpositive density".into(),
            ));
        }
        Ok(x)
    }

    /// Homotopy in the withdrawal magnitude from the no-load state.
    fn steady_continuation(&self, u: &Inputs) -> Result<State> {
        let nr = self.n_rho();
        let mut scaled = u.clone();
        scaled.w.fill(0.0);
        let mut x = self.steady_newton(&self.initial_guess(&scaled), &scaled)?;
        let (mut lam, mut h) = (0.0f64, 0.1f64);
        while lam < 1.0 {
            let next = (lam + h).min(1.0);
            scaled.w = &u.w * next;
            let tried = newton(
                "steady state",
                x.to_vector(),
                STEADY_TOL,
                |v| self.rhs_terms(&State::from_vector(v, nr), &scaled),
                |v| self.jacobian(&State::from_vector(v, nr), &scaled),
            );
            match tried {
                Ok(v) => {
                    x = State::from_vector(&v, nr);
                    lam = next;
                    h = (h * 2.0).min(0.25);
                }
                Err(e) => {
                    h /= 2.0;
                    if h < 1e-4 {
                        return Err(e);
                    }
                }
            }
        }
        if x.rho.iter().any(|&r| r <= 0.0) {
            return Err(Error::Infeasible(
                "steady state has a nonpositive density".into(),
            ));
        }
        Ok(x)
    }

    /// One implicit Euler step: solves `E(x⁺ − x) = Δt·f(x⁺)` with `E = diag(I, δI)`.
    pub fn step_implicit(&self, x: &State, dt: f64, u: &Inputs) -> Result<State> {
        if !(dt > 0.0) {
            return Err(Error::domain("time step must be positive"));
        }
        let nr = self.n_rho();
        let mass = self.mass();
        let x0 = x.to_vector();
        let mx0 = mass.component_mul(&x0);
        let residual = |v: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
            let (f, scale) = self.rhs_terms(&State::from_vector(v, nr), u)?;
            let mv = mass.component_mul(v);
            let r = &mv - &mx0 - &f * dt;
            let s = mv.abs() + mx0.abs() + scale * dt;
            Ok((r, s))
        };
        let jac = |v: &DVector<f64>| -> Result<DMatrix<f64>> {
            let j = self.jacobian(&State::from_vector(v, nr), u)?;
            Ok(DMatrix::from_diagonal(&mass) - j * dt)
        };
        newton("implicit step", x0.clone(), STEP_TOL, residual, jac)
            .map(|v| State::from_vector(&v, nr))
            .map_err(|e| match e {
                Error::Convergence {
                    what,
                    iterations,
                    residual,
                    ..
                } => Error::Convergence {
                    what,
                    iterations,
                    residual,
                    hint: Some(format!("try a time step smaller than {dt} s")),
                },
                other => other,
            })
    }

    /// Integrates from the steady state at `t = 0` with steps of `dt`, sampling
    /// inputs at the right end of each step.
    pub fn simulate(
        &self,
        scenario: &BoundaryScenario,
        policy: &Policy,
        dt: f64,
    ) -> Result<Trajectory> {
        let u0 = self.inputs_at(scenario, policy.at(0.0), 0.0)?;
        let x0 = self.steady_state(&u0)?;
        self.simulate_from(x0, scenario, policy, dt)
    }

    pub fn simulate_from(
        &self,
        x0: State,
        scenario: &BoundaryScenario,
        policy: &Policy,
        dt: f64,
    ) -> Result<Trajectory> {
        if !(dt > 0.0) {
            return Err(Error::domain("time step must be positive"));
        }
        let horizon = scenario.horizon;
        let mut traj = Trajectory {
            times: vec![0.0],
            states: vec![x0],
            controls: vec![policy.at(0.0).to_vec()],
        };
        let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
        let mut t_prev = 0.0;
        for m in 1..=steps {
            let t = (m as f64 * dt).min(horizon);
            let mu = policy.at(t);
            let u = self.inputs_at(scenario, mu, t)?;
            let x = self.step_implicit(traj.states.last().unwrap(), t - t_prev, &u)?;
            traj.times.push(t);
            traj.states.push(x);
            traj.controls.push(mu.to_vec());
            t_prev = t;
        }
        Ok(traj)
    }

    /// Gas mass held in the pipes, Σ Λρ.
    pub fn line_pack(&self, x: &State) -> f64 {
        self.inc.lambda.dot(&x.rho)
    }

    /// Mass flow injected at supply nodes, Σ χφ over edges leaving them.
    pub fn supply_inflow(&self, x: &State) -> f64 {
        (0..self.n_phi())
            .filter(|&k| self.inc.tail[k] < self.inc.n_supply)
            .map(|k| self.inc.area[k] * x.phi[k])
            .sum()
    }
}

fn scaled_max(r: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    r.iter()
        .zip(scale.iter())
        .map(|(v, s)| v.abs() / s.max(1e-300).max(f64::MIN_POSITIVE))
        .map(|v| if v.is_nan() { f64::INFINITY } else { v })
        .fold(0.0, f64::max)
}

fn scaled_norm(r: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    r.iter()
        .zip(scale.iter())
        .map(|(v, s)| {
            let q = v / s.max(1e-300);
            q * q
        })
        .sum::<f64>()
        .sqrt()
}

/// Damped Newton iteration on a row-scaled residual.
///
/// Steps are halved while the scaled 2-norm increases or the trial point is
/// not admissible. When no halving helps, a Levenberg-regularized step is tried.
pub(crate) fn newton<R, J>(
    what: &'static str,
    mut x: DVector<f64>,
    tol: f64,
    residual: R,
    jacobian: J,
) -> Result<DVector<f64>>
where
    R: Fn(&DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let (mut r, mut s) = residual(&x)?;
    for it in 0..MAX_NEWTON {
        if scaled_max(&r, &s) <= tol {
            return Ok(x);
        }
        let jac = jacobian(&x)?;
        let merit = scaled_norm(&r, &s);
        let mut candidates = Vec::with_capacity(2);
        if let Some(dx) = jac.clone().lu().solve(&(-&r)) {
            if dx.iter().all(|v| v.is_finite()) {
                candidates.push(dx);
            }
        }
        candidates.push(levenberg_step(&jac, &r, &s));

        let mut accepted = false;
        'outer: for dx in candidates {
            let mut step = 1.0;
            for _ in 0..30 {
                let trial = &x + &dx * step;
                if let Ok((rt, st)) = residual(&trial) {
                    let mt = scaled_norm(&rt, &st);
                    if mt.is_finite() && (mt < merit || scaled_max(&rt, &st) <= tol) {
                        x = trial;
                        r = rt;
                        s = st;
                        accepted = true;
                        break 'outer;
                    }
                }
                step *= 0.5;
            }
        }
        if !accepted {
            return Err(Error::Convergence {
                what,
                iterations: it + 1,
                residual: scaled_max(&r, &s),
                hint: None,
            });
        }
    }
    if scaled_max(&r, &s) <= tol {
        return Ok(x);
    }
    Err(Error::Convergence {
        what,
        iterations: MAX_NEWTON,
        residual: scaled_max(&r, &s),
        hint: None,
    })
}

fn levenberg_step(jac: &DMatrix<f64>, r: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
    let w = s.map(|v| 1.0 / v.max(1e-300));
    let mut js = jac.clone();
    for (i, wi) in w.iter().enumerate() {
        js.row_mut(i).scale_mut(*wi);
    }
    let rs = r.component_mul(&w);
    let mut jtj = js.transpose() * &js;
    let nu = 1e-8 * jtj.diagonal().amax().max(1e-300);
    for i in 0..jtj.nrows() {
        jtj[(i, i)] += nu;
    }
    let g = js.transpose() * rs;
    jtj.lu()
        .solve(&(-g))
        .unwrap_or_else(|| DVector::zeros(r.len()))
}
