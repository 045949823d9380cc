//! Certified bounds on the gap between nonlinear and linearized trajectories.
//!
//! Both bounds integrate `‖e^{Āτ}‖∞` against a constant built from the
//! friction Jacobians. All norms are max norms.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linearize::{LinearModel, NominalPoint};
use crate::simulate::Trajectory;

/// Relative Richardson tolerance used by [`expm_norm_integral_auto`].
pub const QUAD_TOL: f64 = 1e-4;

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite() && v.abs() < 1e300) {
        Ok(())
    } else {
        Err(Error::domain(
            "matrix exponential overflowed; the state matrix is not stable",
        ))
    }
}

/// Samples of `τ ↦ ‖e^{Āτ}‖∞` and their cumulative trapezoid integral.
#[derive(Clone, Debug, PartialEq)]
pub struct NormProfile {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub integral: Vec<f64>,
}

impl NormProfile {
    /// Linear interpolation of the cumulative integral at `t`.
    pub fn integral_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.integral, t)
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// `∫₀ᵗ g(τ)‖e^{Āτ}‖dτ` by the trapezoid rule on the profile's grid,
    /// returned at every grid point.
    pub fn weighted_integral(&self, mut g: impl FnMut(f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.times.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..self.times.len() {
            let h = self.times[i] - self.times[i - 1];
            acc += 0.5
                * h
                * (g(self.times[i - 1]) * self.norms[i - 1] + g(self.times[i]) * self.norms[i]);
            out.push(acc);
        }
        out
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let k = xs.partition_point(|&v| v < x);
    if k >= xs.len() {
        return *ys.last().unwrap();
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

/// Profile on `[0, t]` with a fixed step (the last step may be shorter).
///
/// `e^{Ā(k+1)h}` is formed as `e^{Ākh}·e^{Āh}` from one scaling-and-squaring
/// exponential.
pub fn expm_norm_profile(a: &DMatrix<f64>, t: f64, step: f64) -> Result<NormProfile> {
    if !(step > 0.0) || !(t >= 0.0) {
        return Err(Error::domain(
            "quadrature step must be positive and horizon nonnegative",
        ));
    }
    let n = a.nrows();
    let e_h = (a * step).exp();
    check_finite(&e_h)?;
    let mut p = DMatrix::identity(n, n);
    let mut prof = NormProfile {
        times: vec![0.0],
        norms: vec![1.0],
        integral: vec![0.0],
    };
    let full = (t / step).floor() as usize;
    for _ in 0..full {
        p = &p * &e_h;
        check_finite(&p)?;
        let t_next = prof.horizon() + step;
        push_sample(&mut prof, t_next, inf_norm(&p));
    }
    let rest = t - *prof.times.last().unwrap();
    if rest > 1e-12 * t.max(1.0) {
        let q = &p * (a * rest).exp();
        check_finite(&q)?;
        push_sample(&mut prof, t, inf_norm(&q));
    }
    Ok(prof)
}

fn push_sample(prof: &mut NormProfile, t: f64, norm: f64) {
    let (t0, n0, i0) = (
        *prof.times.last().unwrap(),
        *prof.norms.last().unwrap(),
        *prof.integral.last().unwrap(),
    );
    prof.times.push(t);
    prof.norms.push(norm);
    prof.integral.push(i0 + 0.5 * (t - t0) * (n0 + norm));
}

/// `∫₀ᵗ ‖e^{Āτ}‖∞ dτ` by the composite trapezoid rule with step `quad_step`.
pub fn expm_norm_integral(a: &DMatrix<f64>, t: f64, quad_step: f64) -> Result<f64> {
    Ok(*expm_norm_profile(a, t, quad_step)?.integral.last().unwrap())
}

/// Profile starting at step `t/2000`, halved until the Richardson estimate
/// of the trapezoid error falls below [`QUAD_TOL`] relative.
pub fn expm_norm_profile_auto(a: &DMatrix<f64>, t: f64) -> Result<NormProfile> {
    if t == 0.0 {
        return expm_norm_profile(a, 0.0, 1.0);
    }
    let mut h = t / 2000.0;
    let mut coarse = expm_norm_profile(a, t, h)?;
    for _ in 0..6 {
        h /= 2.0;
        let fine = expm_norm_profile(a, t, h)?;
        let (ic, ifn) = (
            *coarse.integral.last().unwrap(),
            *fine.integral.last().unwrap(),
        );
        if (ifn - ic).abs() / 3.0 <= QUAD_TOL * ifn.abs() {
            return Ok(fine);
        }
        coarse = fine;
    }
    Ok(coarse)
}

pub fn expm_norm_integral_auto(a: &DMatrix<f64>, t: f64) -> Result<f64> {
    Ok(*expm_norm_profile_auto(a, t)?.integral.last().unwrap())
}

/// Result of integrating `‖e^{Āτ}‖` until the tail stops contributing.
#[derive(Clone, Debug, PartialEq)]
pub struct Convergence {
    pub profile: NormProfile,
    /// Horizon at which the relative increment over the final 10% fell below the tolerance.
    pub horizon: f64,
    pub limit: f64,
}

/// Extends the horizon until the integral gained over the last 10% of
/// `[0, t]` is below `tol` relative to its value.
///
/// The step grows geometrically once the norm has decayed well below the
/// accumulated integral, so slow tails stay cheap.
pub fn expm_norm_converged(a: &DMatrix<f64>, tol: f64, max_horizon: f64) -> Result<Convergence> {
    let n = a.nrows();
    let spectral = crate::spectral::eigenvalues(a)?;
    let fastest = spectral.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if spectral.iter().any(|z| z.re >= 0.0) {
        return Err(Error::domain(
            "state matrix is not Hurwitz; the norm integral diverges",
        ));
    }
    let mut h = if fastest > 0.0 { 0.01 / fastest } else { 1.0 };
    let mut e_h = (a * h).exp();
    let mut p = DMatrix::identity(n, n);
    let mut prof = NormProfile {
        times: vec![0.0],
        norms: vec![1.0],
        integral: vec![0.0],
    };
    let mut since_growth = 0;
    loop {
        p = &p * &e_h;
        check_finite(&p)?;
        let t = prof.times.last().unwrap() + h;
        push_sample(&mut prof, t, inf_norm(&p));
        since_growth += 1;
        let total = *prof.integral.last().unwrap();
        if t >= 1.0 / fastest.max(1e-300) * 10.0 {
            let earlier = interp(&prof.times, &prof.integral, 0.9 * t);
            if total - earlier <= tol * total {
                return Ok(Convergence {
                    horizon: t,
                    limit: total,
                    profile: prof,
                });
            }
        }
        if t > max_horizon {
            return Err(Error::Convergence {
                what: "norm integral",
                iterations: prof.times.len(),
                residual: (total - interp(&prof.times, &prof.integral, 0.9 * t)) / total,
                hint: Some("increase the maximum horizon".into()),
            });
        }
        // Grow the step when the local trapezoid error is negligible.
        let k = prof.norms.len();
        if since_growth >= 64 && k >= 3 {
            let curv = (prof.norms[k - 1] - 2.0 * prof.norms[k - 2] + prof.norms[k - 3]).abs();
            if curv * h <= 1e-9 * total {
                h *= 2.0;
                e_h = &e_h * &e_h;
                since_growth = 0;
            }
        }
    }
}

/// Bound constants computed from the nominal point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundParams {
    /// `4‖ᾱ‖‖ρ̄‖`.
    pub a: f64,
    /// `2‖β̄‖‖φ̄‖`.
    pub b: f64,
    /// `‖(ρ̄, φ̄)‖`.
    pub state_norm: f64,
}

impl BoundParams {
    pub fn from_model(lin: &LinearModel) -> Result<Self> {
        if !lin.inertia {
            return Err(Error::domain(
                "error bounds are stated for models with inertia (δ = 1)",
            ));
        }
        Ok(Self::from_parts(
            &lin.alpha_bar,
            &lin.beta_bar,
            &lin.nominal,
        ))
    }

    pub fn from_parts(
        alpha: &nalgebra::DVector<f64>,
        beta: &nalgebra::DVector<f64>,
        nominal: &NominalPoint,
    ) -> Self {
        let rho = nominal.rho_bar.amax();
        let phi = nominal.phi_bar.amax();
        BoundParams {
            a: 4.0 * alpha.amax() * rho,
            b: 2.0 * beta.amax() * phi,
            state_norm: rho.max(phi),
        }
    }

    pub fn a0(&self) -> f64 {
        self.a / self.state_norm
    }

    pub fn b0(&self) -> f64 {
        self.b / self.state_norm
    }

    /// Factor multiplying the norm integral in the absolute uniform bound.
    pub fn uniform_factor(&self, kappa: f64) -> Result<f64> {
        check_fraction(kappa)?;
        Ok(self.a * kappa * kappa / (1.0 - kappa).powi(2) + self.b * kappa * kappa / (1.0 - kappa))
    }

    /// `c = a/(1−γmax)² + b/(1−γmax)`.
    pub fn c(&self, gamma_max: f64) -> Result<f64> {
        check_fraction(gamma_max)?;
        Ok(self.a / (1.0 - gamma_max).powi(2) + self.b / (1.0 - gamma_max))
    }
}

fn check_fraction(k: f64) -> Result<()> {
    if !(0.0..1.0).contains(&k) {
        return Err(Error::domain(format!(
            "variation fraction {k} must lie in [0, 1)"
        )));
    }
    Ok(())
}

/// `E_U(t, κ)` relative to the nominal state.
pub fn uniform_bound(lin: &LinearModel, kappa: f64, t: f64) -> Result<f64> {
    let p = BoundParams::from_model(lin)?;
    let f = p.uniform_factor(kappa)? / p.state_norm;
    if f == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    Ok(f * expm_norm_integral_auto(&lin.a_bar, t)?)
}

/// `E_U` at each of `times`, sharing one norm profile.
pub fn uniform_bound_curve(lin: &LinearModel, kappa: f64, times: &[f64]) -> Result<Vec<f64>> {
    let p = BoundParams::from_model(lin)?;
    let f = p.uniform_factor(kappa)? / p.state_norm;
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let prof = expm_norm_profile_auto(&lin.a_bar, horizon)?;
    Ok(times.iter().map(|&t| f * prof.integral_at(t)).collect())
}

/// Absolute form of the uniform bound, `(aκ²/(1−κ)² + bκ²/(1−κ))∫‖e^{Āτ}‖`,
/// on the grid of `prof`.
pub fn absolute_uniform_bound(
    params: &BoundParams,
    kappa: f64,
    prof: &NormProfile,
) -> Result<Vec<f64>> {
    let f = params.uniform_factor(kappa)?;
    Ok(prof.integral.iter().map(|v| f * v).collect())
}

/// The built-in variation profile `γ(t) = κ|sin(2πt/period)|`.
pub fn sinusoidal_gamma(kappa: f64, period: f64) -> impl Fn(f64) -> f64 {
    move |t| kappa * (2.0 * std::f64::consts::PI * t / period).sin().abs()
}

/// Relative time-varying bound `c₀∫₀ᵗ γ²(τ)‖e^{Āτ}‖dτ` at each grid time of
/// the returned profile.
pub fn time_varying_bound_curve(
    lin: &LinearModel,
    gamma: impl Fn(f64) -> f64,
    gamma_max: f64,
    horizon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = BoundParams::from_model(lin)?;
    let c0 = p.c(gamma_max)? / p.state_norm;
    let prof = expm_norm_profile_auto(&lin.a_bar, horizon)?;
    let mut bad = None;
    let vals = prof.weighted_integral(|t| {
        let g = gamma(t);
        if !(0.0..=gamma_max).contains(&g) {
            bad = Some(t);
        }
        g * g
    });
    if let Some(t) = bad {
        return Err(Error::domain(format!("γ({t}) leaves [0, γmax]")));
    }
    Ok((prof.times, vals.into_iter().map(|v| c0 * v).collect()))
}

pub fn time_varying_bound(
    lin: &LinearModel,
    gamma: impl Fn(f64) -> f64,
    gamma_max: f64,
    t: f64,
) -> Result<f64> {
    let (_, v) = time_varying_bound_curve(lin, gamma, gamma_max, t)?;
    Ok(*v.last().unwrap())
}

/// First time at which a sampled curve reaches `level`, linearly interpolated.
pub fn first_crossing(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    let i = values.iter().position(|&v| v >= level)?;
    if i == 0 {
        return Some(times[0]);
    }
    let (t0, t1, v0, v1) = (times[i - 1], times[i], values[i - 1], values[i]);
    Some(t0 + (level - v0) / (v1 - v0) * (t1 - t0))
}

/// Symmetric relative errors `2 max‖x₁−x₂‖/‖x₁+x₂‖·100%` for ρ, φ and μ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gap {
    pub rho: f64,
    pub phi: f64,
    pub mu: f64,
}

pub fn empirical_gap(a: &Trajectory, b: &Trajectory) -> Result<Gap> {
    if a.times.len() != b.times.len()
        || a.times
            .iter()
            .zip(&b.times)
            .any(|(x, y)| (x - y).abs() > 1e-9 * x.abs().max(1.0))
    {
        return Err(Error::domain("trajectories are sampled on different grids"));
    }
    fn rel<'a>(pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, y) in pairs {
            let d = x
                .iter()
                .zip(y)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            let s = x
                .iter()
                .zip(y)
                .map(|(p, q)| (p + q).abs())
                .fold(0.0, f64::max);
            if d > 0.0 {
                worst = worst.max(2.0 * d / s * 100.0);
            }
        }
        worst
    }
    Ok(Gap {
        rho: rel(a
            .states
            .iter()
            .zip(&b.states)
            .map(|(x, y)| (x.rho.as_slice(), y.rho.as_slice()))),
        phi: rel(a
            .states
            .iter()
            .zip(&b.states)
            .map(|(x, y)| (x.phi.as_slice(), y.phi.as_slice()))),
        mu: rel(a
            .controls
            .iter()
            .zip(&b.controls)
            .map(|(x, y)| (x.as_slice(), y.as_slice()))),
    })
}

/// Outcome of the post hoc check of the variation hypothesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hypothesis {
    /// Largest `‖ρ−ρ̄‖/‖ρ̄‖` and `‖φ−φ̄‖/‖φ̄‖` along the trajectory.
    pub observed_kappa: f64,
    /// Componentwise condition `|x_i − x̄_i| ≤ κ x̄_i` with positive fluxes.
    pub holds: bool,
}

pub fn check_hypothesis(traj: &Trajectory, nominal: &NominalPoint, kappa: f64) -> Hypothesis {
    let mut observed: f64 = 0.0;
    let mut holds = nominal.phi_bar.iter().all(|&v| v > 0.0);
    let (rn, pn) = (nominal.rho_bar.amax(), nominal.phi_bar.amax());
    for x in &traj.states {
        observed = observed
            .max((&x.rho - &nominal.rho_bar).amax() / rn)
            .max((&x.phi - &nominal.phi_bar).amax() / pn);
        for (v, r) in x.rho.iter().zip(nominal.rho_bar.iter()) {
            holds &= (v - r).abs() <= kappa * r;
        }
        for (v, r) in x.phi.iter().zip(nominal.phi_bar.iter()) {
            holds &= (v - r).abs() <= kappa * r;
        }
    }
    Hypothesis {
        observed_kappa: observed,
        holds,
    }
}
