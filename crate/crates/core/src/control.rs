//! Compressor scheduling that minimizes compression work.
//!
//! Every time segment `(t_{m-1}, t_m]` is transcribed with one implicit Euler
//! step, `E(x_m − x_{m−1}) = Δt·f(x_m, μ_m)`, under box constraints on density,
//! flux and compressor ratio. Linear modes replace `f` by a linear model and the
//! work by its first-order expansion, which gives a linear program. Nonlinear
//! modes eliminate the states through the exact implicit steps and iterate on
//! μ alone. Each iteration solves an LP in μ over a trust region, with the
//! state bounds linearized through the sensitivities `∂x/∂μ`. The LP active set
//! then defines an equality-constrained quadratic step whose reduced Hessian is
//! estimated by differencing the adjoint gradient. Trials are evaluated exactly,
//! corrected by re-solving the LP at the trial and accepted on an exact penalty
//! merit.
//!
//! MPC optimizes one segment at a time and moves the nominal point to the
//! solution. OC optimizes all segments jointly.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linearize::{build_model, LinearModel, NominalPoint};
use crate::lp::{LinearProgram, Sense};
use crate::network::{BoundaryScenario, Bounds, RefinedNetwork};
use crate::simulate::{Inputs, LumpedModel, Policy, State, Trajectory};

/// Default work exponent (γ−1)/γ.
pub const DEFAULT_EXPONENT: f64 = 0.2359;
/// Outer iterations are stopped once the ratio step is this small.
pub const SLP_STEP_TOL: f64 = 1e-8;
pub const SLP_MAX_ITER: usize = 50;
/// Bound violation accepted on returned optimal states.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// First-order optimality tolerance, relative to `1 + |J|`.
pub const KKT_TOL: f64 = 1e-6;
/// Violation of the re-simulated trajectory accepted by the audit, as a
/// fraction of the bound range.
pub const AUDIT_TOL: f64 = 0.02;
/// Relative distance at which an LP value counts as sitting on its bound.
const ACTIVE_TOL: f64 = 1e-8;
/// Constraint rows with a smaller component outside the span of earlier rows are dropped.
const INDEPENDENCE_TOL: f64 = 1e-8;
/// Relative finite-difference step for the Hessian of the Lagrangian.
const HESSIAN_STEP: f64 = 1e-6;
/// Smallest curvature kept in the reduced Hessian, relative to the largest.
const CURVATURE_FLOOR: f64 = 1e-8;
/// Relinearized re-solves tried after a rejected trial step.
const MAX_CORRECTIONS: usize = 3;

/// Uniform sampling `0 = t_0 < t_1 < … < t_{m_T} = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    times: Vec<f64>,
    dt: f64,
}

impl ControlGrid {
    /// The horizon must be an integer multiple of `dt`.
    pub fn uniform(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain("grid needs a positive step and horizon"));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::domain(format!(
                "horizon {horizon} s is not a multiple of the step {dt} s"
            )));
        }
        let n = steps as usize;
        let times = (0..=n)
            .map(|m| if m == n { horizon } else { m as f64 * dt })
            .collect();
        Ok(ControlGrid { times, dt })
    }

    pub fn from_minutes(horizon: f64, minutes: f64) -> Result<Self> {
        Self::uniform(horizon, minutes * 60.0)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of segments m_T.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Linear,
    Nonlinear,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Linear => "linear",
            Mode::Nonlinear => "nonlinear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIter,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::MaxIter => "max_iter",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostSettings {
    /// Work exponent (γ−1)/γ.
    pub exponent: f64,
    /// Weight each compressor by its mass flow χφ instead of the flux φ.
    pub mass_flow: bool,
}

impl Default for CostSettings {
    fn default() -> Self {
        CostSettings {
            exponent: DEFAULT_EXPONENT,
            mass_flow: false,
        }
    }
}

impl CostSettings {
    /// Settings for an isentropic exponent γ > 1.
    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0 && gamma.is_finite()) {
            return Err(Error::domain(format!(
                "isentropic exponent {gamma} must exceed 1"
            )));
        }
        Ok(CostSettings {
            exponent: (gamma - 1.0) / gamma,
            mass_flow: false,
        })
    }
}

/// Per-compressor weights `c_k`, multiplied by the segment area for mass-flow costs.
pub fn compressor_weights(net: &RefinedNetwork, cost: &CostSettings) -> Vec<f64> {
    net.compressors
        .iter()
        .map(|c| {
            let area = if cost.mass_flow {
                net.edges[c.edge].area()
            } else {
                1.0
            };
            c.spec.efficiency * area
        })
        .collect()
}

/// `Σ_k c_k φ_k (μ_k^e − 1)` over compressors.
pub fn stage_cost(phi: &[f64], mu: &[f64], exponent: f64, c: &[f64]) -> f64 {
    phi.iter()
        .zip(mu)
        .zip(c)
        .map(|((p, m), ck)| ck * p * (m.powf(exponent) - 1.0))
        .sum()
}

/// `Σ_k c_k φ_k (μ̄_k^e − 1) + Σ_k c_k e φ̄_k μ̄_k^{e−1} μ_k`.
pub fn linearized_stage_cost(
    phi: &[f64],
    mu: &[f64],
    phi_bar: &[f64],
    mu_bar: &[f64],
    exponent: f64,
    c: &[f64],
) -> f64 {
    (0..c.len())
        .map(|k| {
            c[k] * phi[k] * (mu_bar[k].powf(exponent) - 1.0)
                + c[k] * exponent * phi_bar[k] * mu_bar[k].powf(exponent - 1.0) * mu[k]
        })
        .sum()
}

/// Fluxes on the compressor segments.
pub fn compressor_flux(net: &RefinedNetwork, phi: &DVector<f64>) -> Vec<f64> {
    net.compressors.iter().map(|c| phi[c.edge]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlOptions {
    pub mode: Mode,
    /// Rebuild the linear model at every MPC step.
    pub relinearize: bool,
    pub cost: CostSettings,
    /// Break LP ties towards the smallest total ratio.
    pub tie_break: bool,
    pub max_outer: usize,
    pub step_tol: f64,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions {
            mode: Mode::Linear,
            relinearize: true,
            cost: CostSettings::default(),
            tie_break: true,
            max_outer: SLP_MAX_ITER,
            step_tol: SLP_STEP_TOL,
        }
    }
}

impl ControlOptions {
    pub fn new(mode: Mode) -> Self {
        ControlOptions {
            mode,
            ..Self::default()
        }
    }
}

/// Re-check of a returned trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Audit {
    /// Largest bound violation of the returned states (kg/m³ or kg/m²s).
    pub bound_violation: f64,
    /// Largest bound violation of a fresh nonlinear simulation of the policy,
    /// relative to the bound range.
    pub resimulated_violation: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    /// Sample times reached (all of the grid unless a step failed).
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// Ratios per sample; entry 0 holds the ratios of the initial steady state.
    pub policy: Vec<Vec<f64>>,
    /// Cumulative work Σ_m stage_cost at the returned states.
    pub objective: f64,
    /// Sum of the objectives actually minimized.
    pub surrogate_objective: f64,
    pub stage_costs: Vec<f64>,
    pub status: Status,
    pub message: Option<String>,
    /// First segment that could not be solved.
    pub failed_step: Option<usize>,
    pub wall_time: f64,
    pub lp_iterations: u64,
    pub outer_iterations: usize,
    pub audit: Option<Audit>,
}

impl OptimizationResult {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            states: self.states.clone(),
            controls: self.policy.clone(),
        }
    }

    pub fn as_policy(&self) -> Policy {
        Policy::Piecewise {
            times: self.times.clone(),
            values: self.policy.clone(),
        }
    }
}

/// Affine right-hand side `ẋ ≈ a x + b μ + d` for one segment.
struct StepDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DVector<f64>,
}

impl StepDynamics {
    fn from_linear(lin: &LinearModel, edges: &[usize], u: &Inputs) -> Self {
        let aff = lin.affine(edges);
        let d = &aff.b_s * &u.s + &aff.b_w * &u.w + &aff.c;
        StepDynamics {
            a: aff.a,
            b: aff.b_mu,
            d,
        }
    }
}

/// Point about which the work is expanded.
struct CostPoint {
    phi_bar: Vec<f64>,
    mu_bar: Vec<f64>,
}

enum Prev<'a> {
    Fixed(&'a DVector<f64>),
    Var(&'a [usize]),
}

struct StepVars {
    x: Vec<usize>,
    mu: Vec<usize>,
}

struct Context<'a> {
    model: &'a LumpedModel,
    scenario: &'a BoundaryScenario,
    options: &'a ControlOptions,
    weights: Vec<f64>,
    edges: Vec<usize>,
    mass: DVector<f64>,
    bounds: Bounds,
    mu_max: Vec<f64>,
}

impl<'a> Context<'a> {
    fn new(
        model: &'a LumpedModel,
        scenario: &'a BoundaryScenario,
        options: &'a ControlOptions,
    ) -> Result<Self> {
        // Ratios are keyed by the original pipe, not by the segment.
        let mut spec = model.net.to_spec();
        for (c, r) in spec.compressors.iter_mut().zip(&model.net.compressors) {
            c.edge_id = r.spec.edge_id;
        }
        scenario.validate(&spec)?;
        if !(options.cost.exponent > 0.0 && options.cost.exponent < 1.0) {
            return Err(Error::domain("work exponent must lie in (0, 1)"));
        }
        let net = &model.net;
        Ok(Context {
            model,
            scenario,
            options,
            weights: compressor_weights(net, &options.cost),
            edges: net.compressors.iter().map(|c| c.edge).collect(),
            mass: model.mass(),
            bounds: net.bounds,
            mu_max: net.max_ratios(),
        })
    }

    fn n_comp(&self) -> usize {
        self.edges.len()
    }

    fn inputs(&self, mu: &[f64], t: f64) -> Result<Inputs> {
        self.model.inputs_at(self.scenario, mu, t)
    }

    fn cost_of(&self, x: &State, mu: &[f64]) -> f64 {
        stage_cost(
            &compressor_flux(&self.model.net, &x.phi),
            mu,
            self.options.cost.exponent,
            &self.weights,
        )
    }

    /// Value of the work expanded at `(x, μ)`, evaluated at the same point.
    fn model_cost_at(&self, x: &State, mu: &[f64]) -> f64 {
        let phi = compressor_flux(&self.model.net, &x.phi);
        linearized_stage_cost(
            &phi,
            mu,
            &phi,
            mu,
            self.options.cost.exponent,
            &self.weights,
        )
    }

    fn cost_point(&self, x: &State, mu: &[f64]) -> CostPoint {
        CostPoint {
            phi_bar: compressor_flux(&self.model.net, &x.phi),
            mu_bar: mu.to_vec(),
        }
    }

    /// Bound violation of a state relative to the bound scales.
    fn violation(&self, x: &State) -> f64 {
        let b = &self.bounds;
        let rs = rho_scale(b);
        let ps = phi_scale(b, x);
        let r = x
            .rho
            .iter()
            .map(|&v| (b.rho_min - v).max(v - b.rho_max).max(0.0) / rs);
        let p = x
            .phi
            .iter()
            .map(|&v| (b.phi_min - v).max(v - b.phi_max).max(0.0) / ps);
        r.chain(p).fold(0.0, f64::max)
    }

    fn absolute_violation(&self, x: &State) -> f64 {
        let b = &self.bounds;
        let r = x
            .rho
            .iter()
            .map(|&v| (b.rho_min - v).max(v - b.rho_max).max(0.0));
        let p = x
            .phi
            .iter()
            .map(|&v| (b.phi_min - v).max(v - b.phi_max).max(0.0));
        r.chain(p).fold(0.0, f64::max)
    }

    /// Adds the variables, dynamics rows and cost of one segment.
    #[allow(clippy::too_many_arguments)]
    fn add_step(
        &self,
        lp: &mut LinearProgram,
        dynamics: &StepDynamics,
        prev: Prev<'_>,
        inv_dt: f64,
        mu_box: &[(f64, f64)],
        cost: &CostPoint,
        t: f64,
    ) -> StepVars {
        let net = &self.model.net;
        let b = &self.bounds;
        let nr = self.model.n_rho();
        let n = self.model.dim();
        let ns = net.n_supply;
        let mut x = Vec::with_capacity(n);
        for j in 0..nr {
            let id = net.nodes[ns + j].id;
            x.push(lp.add_var(
                b.rho_min,
                b.rho_max,
                0.0,
                true,
                format!("rho[node {id}] at t={t}s"),
            ));
        }
        for (k, e) in net.edges.iter().enumerate() {
            let label = format!("phi[pipe {} segment {}] at t={t}s", e.parent, e.segment + 1);
            let var = lp.add_var(b.phi_min, b.phi_max, 0.0, true, label);
            debug_assert_eq!(var, x[0] + nr + k);
            x.push(var);
        }
        let mu: Vec<usize> = net
            .compressors
            .iter()
            .zip(mu_box)
            .map(|(c, &(lo, hi))| {
                let label = format!("mu[pipe {}] at t={t}s", c.spec.edge_id);
                lp.add_var(lo, hi, 0.0, false, label)
            })
            .collect();

        let e = self.options.cost.exponent;
        for (c, &k) in self.edges.iter().enumerate() {
            let w = self.weights[c];
            let (pb, mb) = (cost.phi_bar[c], cost.mu_bar[c]);
            let phi_var = x[nr + k];
            lp.set_cost(phi_var, lp.cost(phi_var) + w * (mb.powf(e) - 1.0));
            lp.set_cost(mu[c], w * e * pb * mb.powf(e - 1.0));
        }

        for i in 0..n {
            let mut terms = Vec::with_capacity(8);
            for j in 0..n {
                let mut v = -dynamics.a[(i, j)];
                if i == j {
                    v += self.mass[i] * inv_dt;
                }
                if v != 0.0 {
                    terms.push((x[j], v));
                }
            }
            for c in 0..self.n_comp() {
                let v = dynamics.b[(i, c)];
                if v != 0.0 {
                    terms.push((mu[c], -v));
                }
            }
            let mut rhs = dynamics.d[i];
            let carry = self.mass[i] * inv_dt;
            match prev {
                Prev::Fixed(xp) => rhs += carry * xp[i],
                Prev::Var(vars) => {
                    if carry != 0.0 {
                        terms.push((vars[i], -carry));
                    }
                }
            }
            lp.add_row(terms, Sense::Eq, rhs);
        }
        StepVars { x, mu }
    }

    fn solve(&self, lp: &LinearProgram, mu_vars: &[usize]) -> Result<crate::lp::LpSolution> {
        if self.options.tie_break {
            let secondary: Vec<(usize, f64)> = mu_vars.iter().map(|&v| (v, 1.0)).collect();
            lp.solve_lexicographic(&secondary)
        } else {
            lp.solve()
        }
    }

    fn read(&self, sol: &[f64], vars: &StepVars) -> (State, Vec<f64>) {
        let v = DVector::from_iterator(vars.x.len(), vars.x.iter().map(|&j| sol[j]));
        let mu = vars
            .mu
            .iter()
            .zip(&self.mu_max)
            .map(|(&j, &hi)| sol[j].clamp(1.0, hi))
            .collect();
        (State::from_vector(&v, self.model.n_rho()), mu)
    }

    fn full_box(&self) -> Vec<(f64, f64)> {
        self.mu_max.iter().map(|&hi| (1.0, hi)).collect()
    }

    fn trust_box(&self, mu: &[f64], radius: f64) -> Vec<(f64, f64)> {
        mu.iter()
            .zip(&self.mu_max)
            .map(|(&m, &hi)| ((m - radius).max(1.0), (m + radius).min(hi)))
            .collect()
    }

    fn full_radius(&self) -> f64 {
        self.mu_max.iter().map(|m| m - 1.0).fold(0.0, f64::max)
    }
}

fn rho_scale(b: &Bounds) -> f64 {
    let r = b.rho_max - b.rho_min;
    if r.is_finite() && r > 0.0 {
        r
    } else {
        b.rho_min.abs().max(1.0)
    }
}

fn phi_scale(b: &Bounds, x: &State) -> f64 {
    let r = b.phi_max - b.phi_min;
    if r.is_finite() && r > 0.0 {
        r
    } else {
        x.phi.amax().max(1.0)
    }
}

/// Outcome of one nonlinear solve over a horizon.
struct HorizonSolution {
    x: Vec<State>,
    mu: Vec<Vec<f64>>,
    surrogate: f64,
    lp_iterations: u64,
    outer: usize,
    status: Status,
}

/// Segments optimized jointly by the nonlinear solver.
struct Horizon<'s> {
    /// State before the first segment, or `None` for the steady problem.
    x0: Option<&'s State>,
    times: Vec<f64>,
    dt: f64,
}

impl Horizon<'_> {
    fn len(&self) -> usize {
        self.times.len()
    }

    fn inv_dt(&self) -> f64 {
        if self.x0.is_some() {
            1.0 / self.dt
        } else {
            0.0
        }
    }
}

#[derive(Clone)]
struct Iterate {
    mu: Vec<Vec<f64>>,
    x: Vec<State>,
}

/// Jacobians of the right-hand side at every segment of an iterate.
struct Local {
    jx: Vec<DMatrix<f64>>,
    jmu: Vec<DMatrix<f64>>,
    f: Vec<DVector<f64>>,
}

/// Sensitivities and reduced gradient at an iterate.
struct Linearized {
    loc: Local,
    sens: Vec<DMatrix<f64>>,
    grad: DVector<f64>,
}

struct ReducedStep {
    mu: Vec<Vec<f64>>,
    /// Decrease of the linearized work.
    predicted: f64,
    active: Vec<Active>,
    iterations: u64,
}

/// Active constraint of the equality-constrained subproblem.
#[derive(Clone, Copy, Debug)]
enum Active {
    /// State component `i` of segment `m` held at `value`.
    State { m: usize, i: usize, value: f64 },
    /// Ratio `c` of segment `m` held at `value`.
    Ratio { m: usize, c: usize, value: f64 },
}

impl<'a> Context<'a> {
    /// Exact states for the ratios `mu`; segments before `from` are copied from `base`.
    fn evaluate(
        &self,
        hz: &Horizon<'_>,
        mu: &[Vec<f64>],
        base: Option<&Iterate>,
        from: usize,
    ) -> Result<Vec<State>> {
        let mut out: Vec<State> = match base {
            Some(b) => b.x[..from].to_vec(),
            None => Vec::with_capacity(hz.len()),
        };
        for m in out.len()..hz.len() {
            let u = self.inputs(&mu[m], hz.times[m])?;
            let x = match hz.x0 {
                None => match base {
                    Some(b) => self.model.steady_state_from(&b.x[m], &u)?,
                    None => self.model.steady_state(&u)?,
                },
                Some(x0) => {
                    let prev = if m == 0 { x0 } else { &out[m - 1] };
                    self.model.step_implicit(prev, hz.dt, &u)?
                }
            };
            out.push(x);
        }
        Ok(out)
    }

    fn local(&self, hz: &Horizon<'_>, it: &Iterate) -> Result<Local> {
        let mut loc = Local {
            jx: Vec::with_capacity(hz.len()),
            jmu: Vec::with_capacity(hz.len()),
            f: Vec::with_capacity(hz.len()),
        };
        for m in 0..hz.len() {
            let u = self.inputs(&it.mu[m], hz.times[m])?;
            loc.jx.push(self.model.jacobian(&it.x[m], &u)?);
            loc.jmu.push(self.model.mu_jacobian(&it.x[m], &u)?);
            loc.f.push(self.model.rhs(&it.x[m], &u)?.to_vector());
        }
        Ok(loc)
    }

    /// `E/Δt − ∂f/∂x`, the Jacobian of the implicit step residual.
    fn step_matrix(&self, hz: &Horizon<'_>, jx: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = -jx;
        let inv = hz.inv_dt();
        for i in 0..k.nrows() {
            k[(i, i)] += self.mass[i] * inv;
        }
        k
    }

    fn total_cost(&self, it: &Iterate) -> f64 {
        it.x.iter()
            .zip(&it.mu)
            .map(|(x, mu)| self.cost_of(x, mu))
            .sum()
    }

    fn total_violation(&self, it: &Iterate) -> f64 {
        it.x.iter().map(|x| self.violation(x)).fold(0.0, f64::max)
    }

    fn total_absolute_violation(&self, it: &Iterate) -> f64 {
        it.x.iter()
            .map(|x| self.absolute_violation(x))
            .fold(0.0, f64::max)
    }

    /// Gradient of `J − Σ λ x_active` with respect to all ratios, by an adjoint sweep.
    fn lagrangian_gradient(
        &self,
        hz: &Horizon<'_>,
        it: &Iterate,
        loc: &Local,
        lambda: &[(usize, usize, f64)],
    ) -> Result<DVector<f64>> {
        let nc = self.n_comp();
        let n = self.model.dim();
        let nr = self.model.n_rho();
        let e = self.options.cost.exponent;
        let inv = hz.inv_dt();
        let mut grad = DVector::zeros(hz.len() * nc);
        let mut carry = DVector::zeros(n);
        for m in (0..hz.len()).rev() {
            let mut v = carry;
            let phi = compressor_flux(&self.model.net, &it.x[m].phi);
            for (c, &k) in self.edges.iter().enumerate() {
                v[nr + k] += self.weights[c] * (it.mu[m][c].powf(e) - 1.0);
            }
            for &(mm, i, l) in lambda {
                if mm == m {
                    v[i] -= l;
                }
            }
            let k = self.step_matrix(hz, &loc.jx[m]);
            let p = k.transpose().lu().solve(&v).ok_or_else(|| {
                Error::Solver(format!("singular step matrix at segment {}", m + 1))
            })?;
            let g = loc.jmu[m].transpose() * &p;
            for c in 0..nc {
                let mu = it.mu[m][c];
                grad[m * nc + c] = self.weights[c] * e * phi[c] * mu.powf(e - 1.0) + g[c];
            }
            carry = p.component_mul(&self.mass) * inv;
        }
        Ok(grad)
    }

    /// Derivatives of every state with respect to every ratio, one block per segment.
    fn sensitivities(&self, hz: &Horizon<'_>, loc: &Local) -> Result<Vec<DMatrix<f64>>> {
        let nc = self.n_comp();
        let n = self.model.dim();
        let cols = hz.len() * nc;
        let inv = hz.inv_dt();
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(hz.len());
        for m in 0..hz.len() {
            let mut rhs = match out.last() {
                Some(prev) if inv != 0.0 => {
                    let mut r = prev.clone();
                    for i in 0..n {
                        r.row_mut(i).scale_mut(self.mass[i] * inv);
                    }
                    r
                }
                _ => DMatrix::zeros(n, cols),
            };
            rhs.columns_mut(m * nc, nc).copy_from(&loc.jmu[m]);
            let k = self.step_matrix(hz, &loc.jx[m]);
            let s = k.lu().solve(&rhs).ok_or_else(|| {
                Error::Solver(format!("singular step matrix at segment {}", m + 1))
            })?;
            out.push(s);
        }
        Ok(out)
    }

    /// LP over the horizon, linearized at `it`, with ratios limited to a trust region.
    fn horizon_lp(
        &self,
        hz: &Horizon<'_>,
        it: &Iterate,
        loc: &Local,
        center: &[Vec<f64>],
        radius: f64,
    ) -> (LinearProgram, Vec<StepVars>) {
        let mut lp = LinearProgram::new();
        let mut steps: Vec<StepVars> = Vec::with_capacity(hz.len());
        let x0 = match hz.x0 {
            Some(x) => x.to_vector(),
            None => DVector::zeros(self.model.dim()),
        };
        for m in 0..hz.len() {
            let mu = DVector::from_column_slice(&it.mu[m]);
            let d = &loc.f[m] - &loc.jx[m] * it.x[m].to_vector() - &loc.jmu[m] * mu;
            let dynamics = StepDynamics {
                a: loc.jx[m].clone(),
                b: loc.jmu[m].clone(),
                d,
            };
            let prev = match steps.last() {
                Some(p) => Prev::Var(&p.x),
                None => Prev::Fixed(&x0),
            };
            let boxes = self.trust_box(&center[m], radius);
            let cost = self.cost_point(&it.x[m], &it.mu[m]);
            let vars = self.add_step(
                &mut lp,
                &dynamics,
                prev,
                hz.inv_dt(),
                &boxes,
                &cost,
                hz.times[m],
            );
            steps.push(vars);
        }
        (lp, steps)
    }

    /// LP in the ratios alone: states enter through their sensitivities, and
    /// only bounds that a step inside the trust region can reach become rows.
    fn reduced_lp(
        &self,
        hz: &Horizon<'_>,
        it: &Iterate,
        lin: &Linearized,
        center: &[Vec<f64>],
        radius: f64,
    ) -> Result<ReducedStep> {
        let nc = self.n_comp();
        let nr = self.model.n_rho();
        let b = &self.bounds;
        let mut lp = LinearProgram::new();
        let mut vars = Vec::with_capacity(hz.len() * nc);
        let mut reach = Vec::with_capacity(hz.len() * nc);
        for m in 0..hz.len() {
            for (c, (lo, hi)) in self.trust_box(&center[m], radius).into_iter().enumerate() {
                let id = self.model.net.compressors[c].spec.edge_id;
                let label = format!("mu[pipe {id}] at t={}s", hz.times[m]);
                vars.push(lp.add_var(lo, hi, lin.grad[m * nc + c], false, label));
                let mu = it.mu[m][c];
                reach.push((hi - mu).abs().max((mu - lo).abs()));
            }
        }
        // (segment, component, bound, constant part of the linearized state)
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        for m in 0..hz.len() {
            let s = &lin.sens[m];
            let cols = (m + 1) * nc;
            let x = it.x[m].to_vector();
            for i in 0..x.len() {
                let (lo, hi) = if i < nr {
                    (b.rho_min, b.rho_max)
                } else {
                    (b.phi_min, b.phi_max)
                };
                let span: f64 = (0..cols).map(|j| s[(i, j)].abs() * reach[j]).sum();
                let mut constant = x[i];
                let mut terms = Vec::with_capacity(cols);
                for j in 0..cols {
                    let v = s[(i, j)];
                    if v != 0.0 {
                        constant -= v * it.mu[j / nc][j % nc];
                        terms.push((vars[j], v));
                    }
                }
                if lo.is_finite() && x[i] - span <= lo {
                    lp.add_row(terms.clone(), Sense::Ge, lo - constant);
                    rows.push((m, i, lo, constant));
                }
                if hi.is_finite() && x[i] + span >= hi {
                    lp.add_row(terms, Sense::Le, hi - constant);
                    rows.push((m, i, hi, constant));
                }
            }
        }
        let sol = if self.options.tie_break && hz.len() == 1 {
            let secondary: Vec<(usize, f64)> = vars.iter().map(|&v| (v, 1.0)).collect();
            lp.solve_lexicographic(&secondary)?
        } else {
            lp.solve()?
        };
        let mu: Vec<Vec<f64>> = (0..hz.len())
            .map(|m| {
                (0..nc)
                    .map(|c| sol.x[vars[m * nc + c]].clamp(1.0, self.mu_max[c]))
                    .collect()
            })
            .collect();
        let on = |v: f64, bound: f64| (v - bound).abs() <= ACTIVE_TOL * (1.0 + bound.abs());
        let mut active = Vec::new();
        for (m, mu_m) in mu.iter().enumerate() {
            for (c, &v) in mu_m.iter().enumerate() {
                if let Some(bound) = [1.0, self.mu_max[c]].into_iter().find(|&bd| on(v, bd)) {
                    active.push(Active::Ratio { m, c, value: bound });
                }
            }
        }
        for &(m, i, bound, constant) in &rows {
            let s = &lin.sens[m];
            let value = constant
                + (0..(m + 1) * nc)
                    .map(|j| s[(i, j)] * mu[j / nc][j % nc])
                    .sum::<f64>();
            if on(value, bound) {
                active.push(Active::State { m, i, value: bound });
            }
        }
        let predicted = (0..hz.len() * nc)
            .map(|j| lin.grad[j] * (it.mu[j / nc][j % nc] - mu[j / nc][j % nc]))
            .sum();
        Ok(ReducedStep {
            mu,
            predicted,
            active,
            iterations: sol.iterations,
        })
    }

    fn linearized(&self, hz: &Horizon<'_>, it: &Iterate) -> Result<Linearized> {
        let loc = self.local(hz, it)?;
        let sens = self.sensitivities(hz, &loc)?;
        let grad = self.lagrangian_gradient(hz, it, &loc, &[])?;
        Ok(Linearized { loc, sens, grad })
    }

    /// Certificate for a horizon whose linearized constraints admit no ratios.
    fn certificate(&self, hz: &Horizon<'_>, it: &Iterate, loc: &Local) -> Error {
        let (lp, steps) = self.horizon_lp(hz, it, loc, &it.mu, self.full_radius());
        let mu_vars: Vec<usize> = steps.iter().flat_map(|s| s.mu.iter().copied()).collect();
        match self.solve(&lp, &mu_vars) {
            Err(Error::Infeasible(msg)) => Error::Infeasible(msg),
            _ => Error::Infeasible(
                "no ratios within their bounds satisfy the linearized state bounds".into(),
            ),
        }
    }

    /// Newton step of the problem restricted to the active bounds.
    fn newton_step(
        &self,
        hz: &Horizon<'_>,
        it: &Iterate,
        lin: &Linearized,
        active: &[Active],
    ) -> Result<Option<Vec<Vec<f64>>>> {
        let nc = self.n_comp();
        let nmu = hz.len() * nc;
        let (loc, sens, g0) = (&lin.loc, &lin.sens, &lin.grad);

        // Linearly independent constraint rows, ratios first.
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut kept: Vec<Active> = Vec::new();
        for a in active {
            let (row, r) = match *a {
                Active::Ratio { m, c, value } => {
                    let mut row = DVector::zeros(nmu);
                    row[m * nc + c] = 1.0;
                    (row, value - it.mu[m][c])
                }
                Active::State { m, i, value } => {
                    let row = sens[m].row(i).transpose();
                    (row, value - it.x[m].to_vector()[i])
                }
            };
            let norm = row.norm();
            if norm == 0.0 {
                continue;
            }
            let mut q = &row / norm;
            for b in &basis {
                let d = b.dot(&q);
                q -= b * d;
            }
            let qn = q.norm();
            if qn <= INDEPENDENCE_TOL {
                continue;
            }
            basis.push(q / qn);
            rows.push(row);
            rhs.push(r);
            kept.push(*a);
        }

        let gmat = DMatrix::from_fn(rows.len(), nmu, |r, c| rows[r][c]);
        let (lambda, d_range) = if rows.is_empty() {
            (DVector::zeros(0), DVector::zeros(nmu))
        } else {
            let ggt = &gmat * gmat.transpose();
            let lu = ggt.lu();
            let Some(lambda) = lu.solve(&(&gmat * g0)) else {
                return Ok(None);
            };
            let Some(y) = lu.solve(&DVector::from_vec(rhs.clone())) else {
                return Ok(None);
            };
            (lambda, gmat.transpose() * y)
        };
        let lambda_x: Vec<(usize, usize, f64)> = kept
            .iter()
            .zip(lambda.iter())
            .filter_map(|(a, &l)| match *a {
                Active::State { m, i, .. } => Some((m, i, l)),
                Active::Ratio { .. } => None,
            })
            .collect();
        let grad = self.lagrangian_gradient(hz, it, loc, &lambda_x)?;

        // Orthonormal basis of the null space of the active rows.
        let mut null: Vec<DVector<f64>> = Vec::new();
        for j in 0..nmu {
            let mut q = DVector::zeros(nmu);
            q[j] = 1.0;
            for b in basis.iter().chain(&null) {
                let d = b.dot(&q);
                q -= b * d;
            }
            let qn = q.norm();
            if qn > 0.5 {
                null.push(q / qn);
            }
        }
        if null.is_empty() {
            return Ok(Some(self.apply(it, &d_range)));
        }
        let z = DMatrix::from_columns(&null);

        // Finite-difference Hessian of the Lagrangian along the null space.
        let columns: Vec<Result<DVector<f64>>> = (0..z.ncols())
            .into_par_iter()
            .map(|col| {
                let dir = z.column(col);
                let scale = it.mu.iter().flatten().fold(1.0_f64, |a, &b| a.max(b));
                let mut h = HESSIAN_STEP * scale;
                let inside = |h: f64| {
                    it.mu.iter().enumerate().all(|(m, mu)| {
                        mu.iter().enumerate().all(|(c, &v)| {
                            (1.0..=self.mu_max[c]).contains(&(v + h * dir[m * nc + c]))
                        })
                    })
                };
                if !inside(h) {
                    h = -h;
                }
                let mut mu = it.mu.clone();
                let mut from = hz.len();
                for m in 0..hz.len() {
                    for c in 0..nc {
                        let v = dir[m * nc + c];
                        if v != 0.0 {
                            mu[m][c] = (mu[m][c] + h * v).clamp(1.0, self.mu_max[c]);
                            from = from.min(m);
                        }
                    }
                }
                let x = self.evaluate(hz, &mu, Some(it), from)?;
                let trial = Iterate { mu, x };
                let loc_t = self.local(hz, &trial)?;
                let g = self.lagrangian_gradient(hz, &trial, &loc_t, &lambda_x)?;
                Ok((g - &grad) / h)
            })
            .collect();
        let mut hz_cols = Vec::with_capacity(columns.len());
        for c in columns {
            match c {
                Ok(v) => hz_cols.push(v),
                Err(e) if e.is_input_error() => return Err(e),
                Err(_) => return Ok(None),
            }
        }
        let hv = DMatrix::from_columns(&hz_cols);
        let reduced = z.transpose() * &hv;
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let eig = reduced.symmetric_eigen();
        let top = eig.eigenvalues.amax().max(1e-12);
        let floor = CURVATURE_FLOOR * top;
        let inv_vals = eig.eigenvalues.map(|l| 1.0 / l.abs().max(floor));
        let rhs_red = -(z.transpose() * (&grad + &hv * (z.transpose() * &d_range)));
        let q = &eig.eigenvectors;
        let zz = q * (q.transpose() * rhs_red).component_mul(&inv_vals);
        let d = d_range + &z * zz;
        Ok(Some(self.apply(it, &d)))
    }

    fn apply(&self, it: &Iterate, d: &DVector<f64>) -> Vec<Vec<f64>> {
        let nc = self.n_comp();
        it.mu
            .iter()
            .enumerate()
            .map(|(m, mu)| {
                mu.iter()
                    .enumerate()
                    .map(|(c, &v)| v + d[m * nc + c])
                    .collect()
            })
            .collect()
    }

    /// Clips a trial policy to the ratio box and to a trust region around `mu`.
    fn clip(&self, trial: &[Vec<f64>], mu: &[Vec<f64>], radius: f64) -> Vec<Vec<f64>> {
        trial
            .iter()
            .zip(mu)
            .map(|(t, m)| {
                t.iter()
                    .zip(m)
                    .zip(&self.mu_max)
                    .map(|((&t, &m), &hi)| t.clamp(m - radius, m + radius).clamp(1.0, hi))
                    .collect()
            })
            .collect()
    }

    /// Sequential linear-quadratic programming over a horizon.
    ///
    /// Each outer iteration solves the LP linearized at the current iterate
    /// inside a trust region on μ. Its active bounds define an equality
    /// constrained subproblem whose Newton step is tried first; the LP step
    /// is the fallback. Trials are evaluated with the exact dynamics and
    /// accepted on decrease of an exact penalty merit.
    fn solve_horizon(&self, hz: &Horizon<'_>, start: Vec<Vec<f64>>) -> Result<HorizonSolution> {
        let x = match self.evaluate(hz, &start, None, 0) {
            Ok(x) => x,
            Err(e) if e.is_input_error() => return Err(e),
            Err(_) => {
                let mu = vec![self.mu_max.clone(); hz.len()];
                let x = self.evaluate(hz, &mu, None, 0)?;
                return self.solve_from(hz, Iterate { mu, x });
            }
        };
        self.solve_from(hz, Iterate { mu: start, x })
    }

    fn finish(
        &self,
        it: Iterate,
        surrogate: f64,
        lp_iterations: u64,
        outer: usize,
        status: Status,
    ) -> HorizonSolution {
        let status =
            if status == Status::Optimal && self.total_absolute_violation(&it) > FEASIBILITY_TOL {
                Status::MaxIter
            } else {
                status
            };
        HorizonSolution {
            x: it.x,
            mu: it.mu,
            surrogate,
            lp_iterations,
            outer,
            status,
        }
    }

    fn solve_from(&self, hz: &Horizon<'_>, mut it: Iterate) -> Result<HorizonSolution> {
        let full = self.full_radius();
        let mut radius = full;
        let penalty = 1e3 * (1.0 + self.total_cost(&it).abs());
        let merit = |it: &Iterate| self.total_cost(it) + penalty * self.total_violation(it);
        let mut merit_k = merit(&it);
        let mut lp_iterations = 0;
        let mut surrogate = f64::NAN;
        let mu_step = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
                .fold(0.0, f64::max)
        };
        for outer in 1..=self.options.max_outer {
            let lin = self.linearized(hz, &it)?;
            let red = match self.reduced_lp(hz, &it, &lin, &it.mu, radius) {
                Ok(r) => r,
                Err(Error::Infeasible(_)) if radius < full => {
                    radius = full;
                    continue;
                }
                Err(Error::Infeasible(_)) => return Err(self.certificate(hz, &it, &lin.loc)),
                Err(Error::Solver(_)) if radius > self.options.step_tol => {
                    radius /= 2.0;
                    continue;
                }
                Err(Error::Solver(_)) => {
                    return Ok(self.finish(it, surrogate, lp_iterations, outer, Status::MaxIter));
                }
                Err(e) => return Err(e),
            };
            lp_iterations += red.iterations;
            let step = mu_step(&red.mu, &it.mu);
            let current: f64 =
                it.x.iter()
                    .zip(&it.mu)
                    .map(|(x, mu)| self.model_cost_at(x, mu))
                    .sum();
            surrogate = current - red.predicted;
            let j = self.total_cost(&it);
            let stationary = self.total_absolute_violation(&it) <= FEASIBILITY_TOL
                && red.predicted <= KKT_TOL * (1.0 + j.abs());
            if step <= self.options.step_tol || stationary {
                return Ok(self.finish(it, surrogate, lp_iterations, outer, Status::Optimal));
            }
            let lp_mu = red.mu;
            let active = red.active;
            let newton = match self.newton_step(hz, &it, &lin, &active) {
                Ok(n) => n,
                Err(e) if e.is_input_error() => return Err(e),
                Err(_) => None,
            };
            let mut candidates = Vec::with_capacity(2);
            if let Some(n) = newton {
                let len = mu_step(&n, &it.mu);
                let scale = if len > radius { radius / len } else { 1.0 };
                let n: Vec<Vec<f64>> = n
                    .iter()
                    .zip(&it.mu)
                    .map(|(t, m)| {
                        t.iter()
                            .zip(m)
                            .map(|(&t, &m)| m + scale * (t - m))
                            .collect()
                    })
                    .collect();
                let n = self.clip(&n, &it.mu, radius);
                if mu_step(&n, &it.mu) > 0.0 {
                    candidates.push(n);
                }
            }
            candidates.push(lp_mu);
            let mut accepted = false;
            'candidates: for mut cand in candidates {
                let len = mu_step(&cand, &it.mu);
                for correction in 0..=MAX_CORRECTIONS {
                    let from = (0..hz.len())
                        .find(|&m| cand[m] != it.mu[m])
                        .unwrap_or(hz.len());
                    let trial = match self.evaluate(hz, &cand, Some(&it), from) {
                        Ok(x) => Iterate { mu: cand, x },
                        Err(e) if e.is_input_error() => return Err(e),
                        Err(_) => break,
                    };
                    let merit_c = merit(&trial);
                    if merit_c <= merit_k {
                        it = trial;
                        merit_k = merit_c;
                        radius = (2.0 * len).max(radius).min(full);
                        accepted = true;
                        break 'candidates;
                    }
                    if correction == MAX_CORRECTIONS {
                        break;
                    }
                    // Second-order correction: relinearize at the trial, same trust region.
                    let Ok(lin_t) = self.linearized(hz, &trial) else {
                        break;
                    };
                    match self.reduced_lp(hz, &trial, &lin_t, &it.mu, len) {
                        Ok(r) => {
                            lp_iterations += r.iterations;
                            cand = r.mu;
                        }
                        Err(e) if e.is_input_error() => return Err(e),
                        Err(_) => break,
                    }
                }
            }
            if !accepted {
                radius = step.min(radius) / 2.0;
                if radius <= self.options.step_tol {
                    return Ok(self.finish(it, surrogate, lp_iterations, outer, Status::Optimal));
                }
            }
        }
        let outer = self.options.max_outer;
        Ok(self.finish(it, surrogate, lp_iterations, outer, Status::MaxIter))
    }
}

/// Steady state with the least compressor work for the inputs at time `t`.
pub fn optimal_steady_state(
    model: &LumpedModel,
    scenario: &BoundaryScenario,
    t: f64,
    options: &ControlOptions,
) -> Result<(State, Vec<f64>, Status)> {
    let ctx = Context::new(model, scenario, options)?;
    optimal_steady(&ctx, t)
}

fn optimal_steady(ctx: &Context<'_>, t: f64) -> Result<(State, Vec<f64>, Status)> {
    let start = vec![1.0; ctx.n_comp()];
    let hz = Horizon {
        x0: None,
        times: vec![t],
        dt: 0.0,
    };
    let mut s = ctx.solve_horizon(&hz, vec![start])?;
    Ok((s.x.remove(0), s.mu.remove(0), s.status))
}

/// Initial steady state: the ratios given by the scenario, or the work-optimal ones.
fn initial_condition(ctx: &Context<'_>) -> Result<(State, Vec<f64>)> {
    if let Some(map) = &ctx.scenario.initial_ratios {
        let mu: Vec<f64> = ctx
            .model
            .net
            .compressors
            .iter()
            .map(|c| map.get(&c.spec.edge_id).copied().unwrap_or(1.0))
            .collect();
        let x = ctx.model.steady_state(&ctx.inputs(&mu, 0.0)?)?;
        return Ok((x, mu));
    }
    let (x, mu, status) = optimal_steady(ctx, 0.0)?;
    if status != Status::Optimal {
        return Err(Error::Infeasible(
            "no steady state at t = 0 satisfies the bounds".into(),
        ));
    }
    Ok((x, mu))
}

/// Initial steady state used by the controllers.
pub fn initial_state(
    model: &LumpedModel,
    scenario: &BoundaryScenario,
    options: &ControlOptions,
) -> Result<(State, Vec<f64>)> {
    let ctx = Context::new(model, scenario, options)?;
    initial_condition(&ctx)
}

struct Recorder {
    start: Instant,
    result: OptimizationResult,
}

impl Recorder {
    fn new(x0: State, mu0: Vec<f64>) -> Self {
        Recorder {
            start: Instant::now(),
            result: OptimizationResult {
                times: vec![0.0],
                states: vec![x0],
                policy: vec![mu0],
                objective: 0.0,
                surrogate_objective: 0.0,
                stage_costs: Vec::new(),
                status: Status::Optimal,
                message: None,
                failed_step: None,
                wall_time: 0.0,
                lp_iterations: 0,
                outer_iterations: 0,
                audit: None,
            },
        }
    }

    fn push(&mut self, ctx: &Context<'_>, t: f64, x: State, mu: Vec<f64>) {
        let c = ctx.cost_of(&x, &mu);
        let r = &mut self.result;
        r.objective += c;
        r.stage_costs.push(c);
        r.times.push(t);
        r.states.push(x);
        r.policy.push(mu);
    }

    fn fail(&mut self, m: usize, status: Status, message: String) {
        self.result.status = status;
        self.result.failed_step = Some(m);
        self.result.message = Some(message);
    }

    fn done(mut self, ctx: &Context<'_>, grid: &ControlGrid) -> OptimizationResult {
        self.result.wall_time = self.start.elapsed().as_secs_f64();
        if self.result.status == Status::Optimal {
            self.result.audit = audit_result(ctx, grid, &self.result).ok();
        }
        self.result
    }
}

fn check_grid(scenario: &BoundaryScenario, grid: &ControlGrid) -> Result<()> {
    if (grid.horizon() - scenario.horizon).abs() > 1e-9 * scenario.horizon {
        return Err(Error::domain(format!(
            "grid ends at {} s but the scenario horizon is {} s",
            grid.horizon(),
            scenario.horizon
        )));
    }
    Ok(())
}

/// Receding single-segment optimization over the grid.
pub fn run_mpc(
    model: &LumpedModel,
    scenario: &BoundaryScenario,
    grid: &ControlGrid,
    options: &ControlOptions,
) -> Result<OptimizationResult> {
    check_grid(scenario, grid)?;
    let ctx = Context::new(model, scenario, options)?;
    let start = Instant::now();
    let (x0, mu0) = initial_condition(&ctx)?;
    let mut rec = Recorder::new(x0.clone(), mu0.clone());
    rec.start = start;
    let times = grid.times();
    let mut lin = match options.mode {
        Mode::Linear => Some(build_model(
            model,
            &NominalPoint::new(&x0, &ctx.inputs(&mu0, 0.0)?),
        )?),
        Mode::Nonlinear => None,
    };
    for m in 1..=grid.steps() {
        let (t_prev, t) = (times[m - 1], times[m]);
        let dt = t - t_prev;
        let x_prev = rec.result.states[m - 1].clone();
        let mu_prev = rec.result.policy[m - 1].clone();
        let outcome = match options.mode {
            Mode::Linear => {
                if options.relinearize && m > 1 {
                    let nominal = NominalPoint::new(&x_prev, &ctx.inputs(&mu_prev, t_prev)?);
                    lin = Some(build_model(model, &nominal)?);
                }
                linear_step(&ctx, lin.as_ref().expect("linear model"), &x_prev, dt, t)
            }
            Mode::Nonlinear => {
                let hz = Horizon {
                    x0: Some(&x_prev),
                    times: vec![t],
                    dt,
                };
                ctx.solve_horizon(&hz, vec![mu_prev])
            }
        };
        match outcome {
            Ok(s) => {
                rec.result.lp_iterations += s.lp_iterations;
                rec.result.outer_iterations += s.outer;
                rec.result.surrogate_objective += s.surrogate;
                let status = s.status;
                let (x, mu) = (s.x.into_iter().next(), s.mu.into_iter().next());
                rec.push(&ctx, t, x.expect("one segment"), mu.expect("one segment"));
                if status != Status::Optimal {
                    rec.fail(
                        m,
                        status,
                        format!("segment {m} stopped at the iteration limit"),
                    );
                    break;
                }
            }
            Err(Error::Infeasible(msg)) => {
                rec.fail(
                    m,
                    Status::Infeasible,
                    format!("segment {m} ending at t={t}s: {msg}"),
                );
                break;
            }
            Err(e) if e.is_input_error() => return Err(e),
            Err(e) => {
                rec.fail(
                    m,
                    Status::MaxIter,
                    format!("segment {m} ending at t={t}s: {e}"),
                );
                break;
            }
        }
    }
    Ok(rec.done(&ctx, grid))
}

fn linear_step(
    ctx: &Context<'_>,
    lin: &LinearModel,
    x_prev: &State,
    dt: f64,
    t: f64,
) -> Result<HorizonSolution> {
    let nominal = &lin.nominal;
    let u = ctx.inputs(&nominal.mu_bar, t)?;
    let dynamics = StepDynamics::from_linear(lin, &ctx.edges, &u);
    let cost = CostPoint {
        phi_bar: compressor_flux(&ctx.model.net, &nominal.phi_bar),
        mu_bar: nominal.mu_bar.clone(),
    };
    let mut lp = LinearProgram::new();
    let prev = x_prev.to_vector();
    let vars = ctx.add_step(
        &mut lp,
        &dynamics,
        Prev::Fixed(&prev),
        1.0 / dt,
        &ctx.full_box(),
        &cost,
        t,
    );
    let sol = ctx.solve(&lp, &vars.mu)?;
    let (x, mu) = ctx.read(&sol.x, &vars);
    Ok(HorizonSolution {
        x: vec![x],
        mu: vec![mu],
        surrogate: sol.objective,
        lp_iterations: sol.iterations,
        outer: 1,
        status: Status::Optimal,
    })
}

/// Full-horizon optimization over all segments at once.
pub fn run_oc(
    model: &LumpedModel,
    scenario: &BoundaryScenario,
    grid: &ControlGrid,
    options: &ControlOptions,
) -> Result<OptimizationResult> {
    check_grid(scenario, grid)?;
    let ctx = Context::new(model, scenario, options)?;
    let start = Instant::now();
    let (x0, mu0) = initial_condition(&ctx)?;
    let lin = build_model(model, &NominalPoint::new(&x0, &ctx.inputs(&mu0, 0.0)?))?;
    let mut rec = Recorder::new(x0.clone(), mu0.clone());
    rec.start = start;

    let linear = linear_oc(&ctx, &lin, &x0, grid);
    let (states, policy, surrogate, iters) = match linear {
        Ok(v) => v,
        Err(Error::Infeasible(msg)) => {
            rec.fail(1, Status::Infeasible, msg);
            return Ok(rec.done(&ctx, grid));
        }
        Err(e) => return Err(e),
    };
    rec.result.lp_iterations += iters;
    rec.result.outer_iterations += 1;
    let (states, policy, surrogate, status) = match options.mode {
        Mode::Linear => (states, policy, surrogate, Status::Optimal),
        Mode::Nonlinear => {
            let hz = Horizon {
                x0: Some(&x0),
                times: grid.times()[1..].to_vec(),
                dt: grid.dt(),
            };
            match ctx.solve_horizon(&hz, policy) {
                Ok(s) => {
                    rec.result.lp_iterations += s.lp_iterations;
                    rec.result.outer_iterations += s.outer;
                    (s.x, s.mu, s.surrogate, s.status)
                }
                Err(Error::Infeasible(msg)) => {
                    rec.fail(1, Status::Infeasible, msg);
                    return Ok(rec.done(&ctx, grid));
                }
                Err(e) if e.is_input_error() => return Err(e),
                Err(e) => {
                    rec.fail(1, Status::MaxIter, e.to_string());
                    return Ok(rec.done(&ctx, grid));
                }
            }
        }
    };
    rec.result.surrogate_objective = surrogate;
    for (m, (x, mu)) in states.into_iter().zip(policy).enumerate() {
        rec.push(&ctx, grid.times()[m + 1], x, mu);
    }
    if status != Status::Optimal {
        rec.fail(grid.steps(), status, "outer iteration limit reached".into());
    }
    Ok(rec.done(&ctx, grid))
}

type Plan = (Vec<State>, Vec<Vec<f64>>, f64, u64);

/// Full-horizon LP for a fixed linear model, posed in the ratios alone.
///
/// States are affine in the ratios, `x_m = s_m μ + c_m`, so each state bound
/// becomes a row over the ratios; bounds no ratio in the box can reach are
/// dropped. States are then recovered by exact forward substitution.
fn linear_oc(ctx: &Context<'_>, lin: &LinearModel, x0: &State, grid: &ControlGrid) -> Result<Plan> {
    let nc = ctx.n_comp();
    let n = ctx.model.dim();
    let nr = ctx.model.n_rho();
    let steps = grid.steps();
    let cols = steps * nc;
    let inv = 1.0 / grid.dt();
    let e = ctx.options.cost.exponent;
    let b = &ctx.bounds;
    let mut k = -&lin.a_bar;
    for i in 0..n {
        k[(i, i)] += ctx.mass[i] * inv;
    }
    let lu = k.lu();
    let singular = || Error::Solver("singular step matrix of the linear model".into());
    let cost = CostPoint {
        phi_bar: compressor_flux(&ctx.model.net, &lin.nominal.phi_bar),
        mu_bar: lin.nominal.mu_bar.clone(),
    };
    // Work per unit flux and per unit ratio at each compressor.
    let flux_weight: Vec<f64> = (0..nc)
        .map(|c| ctx.weights[c] * (cost.mu_bar[c].powf(e) - 1.0))
        .collect();
    let ratio_weight: Vec<f64> = (0..nc)
        .map(|c| ctx.weights[c] * e * cost.phi_bar[c] * cost.mu_bar[c].powf(e - 1.0))
        .collect();

    let mut lp = LinearProgram::new();
    let boxes = ctx.full_box();
    let mut vars = Vec::with_capacity(cols);
    for m in 0..steps {
        let t = grid.times()[m + 1];
        for (c, &(lo, hi)) in boxes.iter().enumerate() {
            let id = ctx.model.net.compressors[c].spec.edge_id;
            vars.push(lp.add_var(lo, hi, 0.0, false, format!("mu[pipe {id}] at t={t}s")));
        }
    }
    let mut objective = vec![0.0; cols];
    let mut sens = DMatrix::zeros(n, cols);
    let mut constant = x0.to_vector();
    let mut forcing = Vec::with_capacity(steps);
    for m in 0..steps {
        let t = grid.times()[m + 1];
        let u = ctx.inputs(&lin.nominal.mu_bar, t)?;
        let dynamics = StepDynamics::from_linear(lin, &ctx.edges, &u);
        for i in 0..n {
            sens.row_mut(i).scale_mut(ctx.mass[i] * inv);
        }
        sens.columns_mut(m * nc, nc).copy_from(&dynamics.b);
        sens = lu.solve(&sens).ok_or_else(singular)?;
        constant = lu
            .solve(&(constant.component_mul(&ctx.mass) * inv + &dynamics.d))
            .ok_or_else(singular)?;
        let used = (m + 1) * nc;
        for (c, &edge) in ctx.edges.iter().enumerate() {
            for j in 0..used {
                objective[j] += flux_weight[c] * sens[(nr + edge, j)];
            }
            objective[m * nc + c] += ratio_weight[c];
        }
        for i in 0..n {
            let (lo, hi) = if i < nr {
                (b.rho_min, b.rho_max)
            } else {
                (b.phi_min, b.phi_max)
            };
            let (mut low, mut high) = (constant[i], constant[i]);
            let mut terms = Vec::with_capacity(used);
            for j in 0..used {
                let v = sens[(i, j)];
                if v != 0.0 {
                    let (a, z) = (v * boxes[j % nc].0, v * boxes[j % nc].1);
                    low += a.min(z);
                    high += a.max(z);
                    terms.push((vars[j], v));
                }
            }
            if lo.is_finite() && low < lo {
                lp.add_row(terms.clone(), Sense::Ge, lo - constant[i]);
            }
            if hi.is_finite() && high > hi {
                lp.add_row(terms, Sense::Le, hi - constant[i]);
            }
        }
        forcing.push(dynamics);
    }
    for (j, &v) in vars.iter().enumerate() {
        lp.set_cost(v, objective[j]);
    }
    let sol = ctx.solve(&lp, &vars)?;
    let policy: Vec<Vec<f64>> = (0..steps)
        .map(|m| {
            (0..nc)
                .map(|c| sol.x[vars[m * nc + c]].clamp(1.0, ctx.mu_max[c]))
                .collect()
        })
        .collect();
    let mut states = Vec::with_capacity(steps);
    let mut x = x0.to_vector();
    let mut surrogate = 0.0;
    for (mu, dynamics) in policy.iter().zip(&forcing) {
        let rhs = x.component_mul(&ctx.mass) * inv
            + &dynamics.b * DVector::from_column_slice(mu)
            + &dynamics.d;
        x = lu.solve(&rhs).ok_or_else(singular)?;
        for (c, &edge) in ctx.edges.iter().enumerate() {
            surrogate += flux_weight[c] * x[nr + edge] + ratio_weight[c] * mu[c];
        }
        states.push(State::from_vector(&x, nr));
    }
    Ok((states, policy, surrogate, sol.iterations))
}

/// Nonlinear simulation of a piecewise-constant policy on the grid.
fn simulate_policy(
    ctx: &Context<'_>,
    x0: &State,
    grid: &ControlGrid,
    policy: &[Vec<f64>],
) -> Result<Vec<State>> {
    let mut out = Vec::with_capacity(policy.len());
    let mut x = x0.clone();
    for (m, mu) in policy.iter().enumerate() {
        let t = grid.times()[m + 1];
        let u = ctx.inputs(mu, t)?;
        x = ctx.model.step_implicit(&x, t - grid.times()[m], &u)?;
        out.push(x.clone());
    }
    Ok(out)
}

fn audit_result(ctx: &Context<'_>, grid: &ControlGrid, r: &OptimizationResult) -> Result<Audit> {
    let bound_violation = r
        .states
        .iter()
        .map(|x| ctx.absolute_violation(x))
        .fold(0.0, f64::max);
    let resim = simulate_policy(ctx, &r.states[0], grid, &r.policy[1..])?;
    let resimulated_violation = resim.iter().map(|x| ctx.violation(x)).fold(0.0, f64::max);
    Ok(Audit {
        bound_violation,
        resimulated_violation,
        passed: bound_violation <= FEASIBILITY_TOL * 10.0 && resimulated_violation <= AUDIT_TOL,
    })
}

/// Re-checks a result against the bounds and a fresh nonlinear simulation of its policy.
pub fn audit(
    model: &LumpedModel,
    scenario: &BoundaryScenario,
    grid: &ControlGrid,
    result: &OptimizationResult,
) -> Result<Audit> {
    let options = ControlOptions::default();
    let ctx = Context::new(model, scenario, &options)?;
    audit_result(&ctx, grid, result)
}

/// Relative gap `2‖a − b‖∞ / ‖a + b‖∞ · 100` maximized over samples.
pub fn relative_error_percent<'v, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'v [f64], &'v [f64])>,
{
    pairs
        .into_iter()
        .map(|(a, b)| {
            let d = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let s = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x + y).abs())
                .fold(0.0, f64::max);
            if s > 0.0 {
                200.0 * d / s
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Density, flux and ratio errors between two results on the same grid, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorMetrics {
    pub rho: f64,
    pub phi: f64,
    pub mu: f64,
}

pub fn compare(a: &OptimizationResult, b: &OptimizationResult) -> ErrorMetrics {
    let n = a.states.len().min(b.states.len());
    let rho = relative_error_percent(
        (0..n).map(|m| (a.states[m].rho.as_slice(), b.states[m].rho.as_slice())),
    );
    let phi = relative_error_percent(
        (0..n).map(|m| (a.states[m].phi.as_slice(), b.states[m].phi.as_slice())),
    );
    let mu =
        relative_error_percent((0..n).map(|m| (a.policy[m].as_slice(), b.policy[m].as_slice())));
    ErrorMetrics { rho, phi, mu }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{refine, CompressorSpec, NetworkSpec, Node, NodeKind, PipeSpec, Profile};
    use std::collections::BTreeMap;

    const E: f64 = DEFAULT_EXPONENT;

    #[test]
    fn stage_cost_values() {
        assert_eq!(stage_cost(&[100.0, 50.0], &[1.0, 1.0], E, &[1.0, 1.0]), 0.0);
        let v = stage_cost(&[100.0], &[1.5], E, &[1.0]);
        let direct = 100.0 * (1.5f64.powf(0.2359) - 1.0);
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 10.03).abs() < 0.01);
        assert!((stage_cost(&[200.0], &[1.5], E, &[1.0]) - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn linearized_cost_tangency() {
        let (phi_bar, mu_bar, c) = ([180.0, 90.0], [1.3, 1.1], [1.0, 2.0]);
        let g = |mu: &[f64]| stage_cost(&phi_bar, mu, E, &c);
        let gl = |mu: &[f64]| linearized_stage_cost(&phi_bar, mu, &phi_bar, &mu_bar, E, &c);
        for k in 0..2 {
            let h = 1e-6;
            let mut up = mu_bar;
            let mut dn = mu_bar;
            up[k] += h;
            dn[k] -= h;
            let fd = (g(&up) - g(&dn)) / (2.0 * h);
            let lin = (gl(&up) - gl(&dn)) / (2.0 * h);
            assert!((fd - lin).abs() <= 1e-6 * fd.abs(), "{fd} vs {lin}");
        }
        let unit = linearized_stage_cost(&phi_bar, &[1.0, 1.0], &phi_bar, &[1.0, 1.0], E, &c);
        assert!((unit - E * (180.0 + 2.0 * 90.0)).abs() < 1e-9);
        let zero = linearized_stage_cost(&[0.0], &[1.4], &[0.0], &[1.0], E, &[1.0]);
        assert_eq!(zero, 0.0);
        let offset =
            linearized_stage_cost(&phi_bar, &mu_bar, &phi_bar, &mu_bar, E, &c) - g(&mu_bar);
        let expected: f64 = (0..2)
            .map(|k| c[k] * E * phi_bar[k] * mu_bar[k].powf(E))
            .sum();
        assert!((offset - expected).abs() < 1e-9);
    }

    #[test]
    fn grid_validation() {
        let g = ControlGrid::from_minutes(86_400.0, 60.0).unwrap();
        assert_eq!(g.steps(), 24);
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.horizon(), 86_400.0);
        assert!(ControlGrid::uniform(100.0, 30.0).is_err());
        assert!(ControlGrid::uniform(100.0, 0.0).is_err());
    }

    pub(crate) fn toy(load: f64, rho_max: f64) -> (LumpedModel, BoundaryScenario) {
        let bounds = Bounds {
            rho_min: 30.0,
            rho_max,
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
        .unwrap();
        let model = LumpedModel::new(refine(&net, 10_000.0).unwrap()).unwrap();
        let mut supply = BTreeMap::new();
        supply.insert(1, Profile::constant(30.0));
        let mut withdrawal = BTreeMap::new();
        withdrawal.insert(2, Profile::constant(load));
        let scenario = BoundaryScenario {
            horizon: 4.0 * 3600.0,
            supply,
            withdrawal,
            initial_ratios: None,
        };
        (model, scenario)
    }

    #[test]
    fn zero_load_needs_no_compression() {
        let (model, scenario) = toy(0.0, 60.0);
        let grid = ControlGrid::from_minutes(scenario.horizon, 60.0).unwrap();
        for mode in [Mode::Linear, Mode::Nonlinear] {
            let r = run_mpc(&model, &scenario, &grid, &ControlOptions::new(mode)).unwrap();
            assert_eq!(r.status, Status::Optimal);
            for mu in &r.policy {
                assert!((mu[0] - 1.0).abs() < 1e-9, "{mode}: {mu:?}");
            }
            assert!(r.objective.abs() < 1e-9);
            for x in &r.states {
                assert!((&x.rho - &r.states[0].rho).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_load_gives_constant_policy() {
        let (model, scenario) = toy(40.0, 60.0);
        let grid = ControlGrid::from_minutes(scenario.horizon, 60.0).unwrap();
        let r = run_mpc(
            &model,
            &scenario,
            &grid,
            &ControlOptions::new(Mode::Nonlinear),
        )
        .unwrap();
        assert_eq!(r.status, Status::Optimal);
        let mu0 = r.policy[0][0];
        assert!(mu0 > 1.0);
        for mu in &r.policy {
            assert!((mu[0] - mu0).abs() < 1e-6);
        }
        let steady = r.stage_costs[0];
        assert!((r.objective - 4.0 * steady).abs() < 1e-6 * r.objective);
        let min_rho = r.states.last().unwrap().rho.min();
        assert!((min_rho - 30.0).abs() < 1e-6);
        let oc = run_oc(
            &model,
            &scenario,
            &grid,
            &ControlOptions::new(Mode::Nonlinear),
        )
        .unwrap();
        assert_eq!(oc.status, Status::Optimal);
        for mu in &oc.policy {
            assert!((mu[0] - mu0).abs() < 1e-5);
        }
        assert!(r.audit.as_ref().unwrap().passed);
    }

    fn fd_iterate(ctx: &Context<'_>, hz: &Horizon<'_>, mu: &[Vec<f64>]) -> Iterate {
        let x = ctx.evaluate(hz, mu, None, 0).unwrap();
        Iterate { mu: mu.to_vec(), x }
    }

    fn check_derivatives(ctx: &Context<'_>, hz: &Horizon<'_>, mu: Vec<Vec<f64>>) {
        let it = fd_iterate(ctx, hz, &mu);
        let lin = ctx.linearized(hz, &it).unwrap();
        let nc = ctx.n_comp();
        let last = hz.len() - 1;
        let lambda = [(last, 0, 0.7), (0, ctx.model.n_rho(), -0.3)];
        let grad = ctx.lagrangian_gradient(hz, &it, &lin.loc, &lambda).unwrap();
        let lagrangian = |it: &Iterate| {
            let x0 = it.x[0].to_vector();
            let xl = it.x[last].to_vector();
            ctx.total_cost(it) - 0.7 * xl[0] + 0.3 * x0[ctx.model.n_rho()]
        };
        for j in 0..hz.len() * nc {
            let h = 1e-6;
            let (mut up, mut dn) = (mu.clone(), mu.clone());
            up[j / nc][j % nc] += h;
            dn[j / nc][j % nc] -= h;
            let (a, b) = (fd_iterate(ctx, hz, &up), fd_iterate(ctx, hz, &dn));
            for m in 0..hz.len() {
                let fd = (a.x[m].to_vector() - b.x[m].to_vector()) / (2.0 * h);
                let col = lin.sens[m].column(j);
                let err = (&fd - col).amax();
                assert!(
                    err <= 1e-5 * (1.0 + fd.amax()),
                    "segment {m} ratio {j}: {err}"
                );
            }
            let fd = (lagrangian(&a) - lagrangian(&b)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "ratio {j}: {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn sensitivities_and_adjoint_match_differences() {
        let (model, scenario) = toy(40.0, 60.0);
        let opts = ControlOptions::new(Mode::Nonlinear);
        let ctx = Context::new(&model, &scenario, &opts).unwrap();
        let (x0, _) = initial_state(&model, &scenario, &opts).unwrap();
        let dynamic = Horizon {
            x0: Some(&x0),
            times: vec![3600.0, 7200.0, 10_800.0],
            dt: 3600.0,
        };
        check_derivatives(&ctx, &dynamic, vec![vec![1.2], vec![1.35], vec![1.1]]);
        let steady = Horizon {
            x0: None,
            times: vec![0.0],
            dt: 0.0,
        };
        check_derivatives(&ctx, &steady, vec![vec![1.25]]);
    }

    #[test]
    fn initial_ratios_refer_to_original_pipes() {
        let b = crate::bench::cyclic5();
        let model = LumpedModel::new(refine(&b.network, b.max_segment).unwrap()).unwrap();
        let mut scenario = b.scenario.clone();
        scenario.horizon = 3600.0;
        let ratios: BTreeMap<u32, f64> = model
            .net
            .compressors
            .iter()
            .map(|c| (c.spec.edge_id, 1.1))
            .collect();
        assert!(model
            .net
            .compressors
            .iter()
            .any(|c| model.net.edges[c.edge].id != c.spec.edge_id));
        scenario.initial_ratios = Some(ratios);
        let grid = ControlGrid::from_minutes(3600.0, 60.0).unwrap();
        let r = run_mpc(&model, &scenario, &grid, &ControlOptions::new(Mode::Linear)).unwrap();
        assert!(r.policy[0].iter().all(|&mu| mu == 1.1));
    }

    #[test]
    fn tight_density_cap_is_infeasible() {
        let (model, scenario) = toy(40.0, 60.0);
        let grid = ControlGrid::from_minutes(scenario.horizon, 60.0).unwrap();
        let opts = ControlOptions::new(Mode::Linear);
        let (x0, _) = initial_state(&model, &scenario, &opts).unwrap();
        let mut tight = model.clone();
        tight.net.bounds.rho_max = x0.rho.min() - 1.0;
        let mut scen = scenario.clone();
        let mut ratios = BTreeMap::new();
        ratios.insert(1, 1.2);
        scen.initial_ratios = Some(ratios);
        let r = run_mpc(&tight, &scen, &grid, &opts).unwrap();
        assert_eq!(r.status, Status::Infeasible);
        assert_eq!(r.failed_step, Some(1));
        let msg = r.message.unwrap();
        assert!(msg.contains("above upper bound"), "{msg}");
    }

    #[test]
    fn error_metrics() {
        let e = relative_error_percent([(&[1.0, 2.0][..], &[1.0, 2.2][..])]);
        assert!((e - 200.0 * 0.2 / 4.2).abs() < 1e-12);
    }
}
