//! Spectra of state matrices, pole formulas and single-pipe transfer matrices.
//!
//! The linearized pipe equations in the Laplace domain read
//!
//! ```text
//! s P + ∂ₓΦ = 0
//! σ² ∂ₓP = α P − z(s) Φ,     z(s) = δ s + β
//! ```
//!
//! whose characteristic roots are `γ± = α/(2σ²) ± γ` with
//! `γ = √(α²/(4σ⁴) + s z/σ²)`. [`ImpedanceSign::AsPrinted`] evaluates the same
//! formulas with `z = δ s − β` for comparison.

use nalgebra::linalg::balancing::balance_parlett_reinsch;
use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linearize::{LinearModel, NominalPoint};
use crate::simulate::LumpedModel;

/// Default number of pole pairs per edge.
pub const DEFAULT_POLE_COUNT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ImpedanceSign {
    /// `z = δs + β`, the series impedance of the momentum balance.
    #[default]
    Physical,
    /// `z = δs − β`.
    AsPrinted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipeFrequencyParams {
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
    pub sound_speed: f64,
    pub rho_bar: f64,
    pub phi_bar: f64,
    /// Keep the density-feedback term α.
    pub alpha_on: bool,
    /// Keep the inertia term (δ = 1).
    pub inertia: bool,
    pub sign: ImpedanceSign,
}

pub type Transfer = [[Complex64; 2]; 2];

impl PipeFrequencyParams {
    /// β = λ|φ̄|/(Dρ̄).
    pub fn beta(&self) -> f64 {
        self.friction * self.phi_bar.abs() / (self.diameter * self.rho_bar)
    }

    /// α = λφ̄|φ̄|/(2Dρ̄²), or zero when the term is dropped.
    pub fn alpha(&self) -> f64 {
        if self.alpha_on {
            self.friction * self.phi_bar * self.phi_bar.abs()
                / (2.0 * self.diameter * self.rho_bar.powi(2))
        } else {
            0.0
        }
    }

    pub fn impedance(&self, s: Complex64) -> Complex64 {
        let d = if self.inertia {
            s
        } else {
            Complex64::new(0.0, 0.0)
        };
        match self.sign {
            ImpedanceSign::Physical => d + self.beta(),
            ImpedanceSign::AsPrinted => d - self.beta(),
        }
    }

    pub fn with_flags(mut self, alpha_on: bool, inertia: bool) -> Self {
        self.alpha_on = alpha_on;
        self.inertia = inertia;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho_bar > 0.0
            && self.length > 0.0
            && self.diameter > 0.0
            && self.sound_speed > 0.0)
        {
            return Err(Error::domain("pipe frequency parameters must be positive"));
        }
        Ok(())
    }

    /// `γ(s)` on the principal branch.
    pub fn gamma(&self, s: Complex64) -> Complex64 {
        let s2 = self.sound_speed.powi(2);
        let a = self.alpha() / (2.0 * s2);
        (a * a + s * self.impedance(s) / s2).sqrt()
    }
}

/// Transfer matrix mapping `(P⁰, Φ^ℓ)` to `(P^ℓ, Φ⁰)`.
///
/// Uses the sech/tanh form when α = 0 and the general `γ±` form otherwise.
pub fn transfer_matrix(p: &PipeFrequencyParams, s: Complex64) -> Result<Transfer> {
    if p.alpha() == 0.0 {
        transfer_matrix_closed_form(p, s)
    } else {
        transfer_matrix_general(p, s)
    }
}

/// General form from the end-point solution in `γ±`.
///
/// With `r = e^{(γ₋−γ₊)ℓ}` and `Re γ ≥ 0`, every exponential has modulus at
/// most one, so long pipes do not overflow.
pub fn transfer_matrix_general(p: &PipeFrequencyParams, s: Complex64) -> Result<Transfer> {
    p.validate()?;
    let s2 = p.sound_speed.powi(2);
    let ell = p.length;
    let z = p.impedance(s);
    let g = p.gamma(s);
    let a = Complex64::new(p.alpha() / (2.0 * s2), 0.0);
    let (gp, gm) = (a + g, a - g);
    if g.norm() <= 1e-300 || s == Complex64::new(0.0, 0.0) && p.alpha() == 0.0 {
        return Ok(static_limit(p));
    }
    let r = ((gm - gp) * ell).exp();
    let den = gm - gp * r;
    if den.norm() == 0.0 {
        return Err(Error::domain("transfer matrix evaluated at a pole"));
    }
    let g11 = -(gm * ell).exp() * (gp - gm) / den;
    let g12 = z / s2 * (1.0 - r) / den;
    let g21 = -s * (1.0 - r) / den;
    let g22 = -(gp - gm) * (-gp * ell).exp() / den;
    Ok([[g11, g12], [g21, g22]])
}

/// Closed form for α = 0 with `z_c = √(z/s)`.
pub fn transfer_matrix_closed_form(p: &PipeFrequencyParams, s: Complex64) -> Result<Transfer> {
    p.validate()?;
    if p.alpha() != 0.0 {
        return Err(Error::domain("closed-form transfer matrix requires α = 0"));
    }
    if s == Complex64::new(0.0, 0.0) {
        return Ok(static_limit(p));
    }
    let sigma = p.sound_speed;
    let z = p.impedance(s);
    let x = p.gamma(s) * p.length;
    let e = (-2.0 * x).exp();
    let sech = 2.0 * (-x).exp() / (1.0 + e);
    let tanh = (1.0 - e) / (1.0 + e);
    let zc = (z / s).sqrt();
    Ok([[sech, -zc / sigma * tanh], [sigma / zc * tanh, sech]])
}

/// Value at `s = 0`.
fn static_limit(p: &PipeFrequencyParams) -> Transfer {
    let s2 = p.sound_speed.powi(2);
    let z = p.impedance(Complex64::new(0.0, 0.0));
    let x = p.alpha() / s2 * p.length;
    let one = Complex64::new(1.0, 0.0);
    // α ≠ 0: G12 = −(z/α)(e^{αℓ/σ²} − 1); the α → 0 limit is −zℓ/σ².
    let g12 = if x.abs() < 1e-12 {
        -z * p.length / s2
    } else {
        -z / p.alpha() * x.exp_m1()
    };
    [[one * x.exp(), g12], [Complex64::new(0.0, 0.0), one]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyResponse {
    /// Frequencies in cycles per hour.
    pub freqs: Vec<f64>,
    /// Angular frequencies in rad/s.
    pub omegas: Vec<f64>,
    pub samples: Vec<Transfer>,
}

impl FrequencyResponse {
    /// `|G_mn|` over the grid.
    pub fn magnitude(&self, m: usize, n: usize) -> Vec<f64> {
        self.samples.iter().map(|g| g[m][n].norm()).collect()
    }

    /// `∠G_mn` in radians, unwrapped along the grid.
    pub fn phase(&self, m: usize, n: usize) -> Vec<f64> {
        unwrap_phase(self.samples.iter().map(|g| g[m][n].arg()))
    }
}

fn unwrap_phase(raw: impl Iterator<Item = f64>) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out: Vec<f64> = Vec::new();
    for v in raw {
        match out.last() {
            None => out.push(v),
            Some(&prev) => {
                let mut d = v - prev;
                d -= 2.0 * PI * (d / (2.0 * PI)).round();
                out.push(prev + d);
            }
        }
    }
    out
}

/// Converts cycles per hour to rad/s.
pub fn angular(f_cph: f64) -> f64 {
    2.0 * std::f64::consts::PI * f_cph / 3600.0
}

pub fn frequency_response(p: &PipeFrequencyParams, f_grid: &[f64]) -> Result<FrequencyResponse> {
    if f_grid.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::domain("frequencies must be positive"));
    }
    if f_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("frequency grid must be strictly increasing"));
    }
    let omegas: Vec<f64> = f_grid.iter().map(|&f| angular(f)).collect();
    let samples = omegas
        .par_iter()
        .map(|&w| transfer_matrix(p, Complex64::new(0.0, w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrequencyResponse {
        freqs: f_grid.to_vec(),
        omegas,
        samples,
    })
}

/// Tolerances deciding whether two variants are equivalent at a frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    /// Relative magnitude tolerance.
    pub magnitude: f64,
    /// Absolute phase tolerance in radians.
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentFrequency {
    /// Largest frequency (cyc/hr) below which the variants agree.
    pub f_star: f64,
    pub diagnostic: Option<String>,
}

/// Worst discrepancy between two transfer matrices, as
/// (relative magnitude, absolute phase) over the four coefficients. Magnitudes
/// are compared relative to the smaller of the two.
pub fn discrepancy(a: &Transfer, b: &Transfer) -> (f64, f64) {
    let mut mag: f64 = 0.0;
    let mut ph: f64 = 0.0;
    for m in 0..2 {
        for n in 0..2 {
            let (x, y) = (a[m][n], b[m][n]);
            let lo = x.norm().min(y.norm());
            let d = (x.norm() - y.norm()).abs();
            mag = mag.max(if d == 0.0 { 0.0 } else { d / lo });
            if lo > 0.0 {
                ph = ph.max((x / y).arg().abs());
            }
        }
    }
    (mag, ph)
}

/// Largest `f*` on `[f_grid[0], f_grid[last]]` such that the variants agree
/// within `thr` for all `f ≤ f*`.
///
/// The discrepancy is replaced by its running maximum before the crossing is
/// bracketed on the grid and refined by bisection.
pub fn max_equivalent_frequency(
    a: &PipeFrequencyParams,
    b: &PipeFrequencyParams,
    thr: Threshold,
    f_grid: &[f64],
) -> Result<EquivalentFrequency> {
    let ok_at = |f: f64| -> Result<bool> {
        let s = Complex64::new(0.0, angular(f));
        let (m, p) = discrepancy(&transfer_matrix(a, s)?, &transfer_matrix(b, s)?);
        Ok(m <= thr.magnitude && p <= thr.phase)
    };
    if f_grid.is_empty() {
        return Err(Error::domain("empty frequency grid"));
    }
    if !ok_at(f_grid[0])? {
        return Ok(EquivalentFrequency {
            f_star: 0.0,
            diagnostic: Some(format!(
                "variants differ beyond threshold at {} cyc/hr",
                f_grid[0]
            )),
        });
    }
    let mut last_ok = 0;
    for (i, &f) in f_grid.iter().enumerate().skip(1) {
        if !ok_at(f)? {
            break;
        }
        last_ok = i;
    }
    if last_ok + 1 == f_grid.len() {
        return Ok(EquivalentFrequency {
            f_star: f_grid[last_ok],
            diagnostic: None,
        });
    }
    let (mut lo, mut hi) = (f_grid[last_ok], f_grid[last_ok + 1]);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    Ok(EquivalentFrequency {
        f_star: lo,
        diagnostic: None,
    })
}

/// Full spectrum of a real square matrix, sorted by real then imaginary part.
///
/// The matrix is balanced before the real Schur decomposition.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::domain("eigenvalues need a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("matrix has non-finite entries"));
    }
    if a.nrows() == 0 {
        return Ok(vec![]);
    }
    let mut m = a.clone();
    balance_parlett_reinsch(&mut m);
    let schur = Schur::try_new(m, f64::EPSILON, 1000 * a.nrows()).ok_or(Error::Convergence {
        what: "eigenvalue iteration",
        iterations: 1000 * a.nrows(),
        residual: f64::NAN,
        hint: None,
    })?;
    let mut eig: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(eig)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterOfGravity {
    /// Mean of the eigenvalues.
    pub center: f64,
    pub eigen_sum: f64,
    /// −Σ_k λ_k|φ̄_k|/(D_k(Q_ℓρ̄)_k), i.e. −Σ β̄_kk.
    pub predicted_sum: f64,
}

/// Mean eigenvalue of Ā, checked against the trace identity Σ eig = −Σ β̄_kk.
pub fn center_of_gravity(model: &LumpedModel, lin: &LinearModel) -> Result<CenterOfGravity> {
    let eig = eigenvalues(&lin.a_bar)?;
    let eigen_sum: f64 = eig.iter().map(|e| e.re).sum();
    let out = model.inc.outlet_density(&lin.nominal.rho_bar);
    let predicted_sum: f64 = -model
        .net
        .edges
        .iter()
        .enumerate()
        .map(|(k, e)| e.friction * lin.nominal.phi_bar[k].abs() / (e.diameter * out[k]))
        .sum::<f64>();
    let trace = lin.a_bar.trace();
    let scale = trace.abs().max(predicted_sum.abs());
    if (eigen_sum - predicted_sum).abs() > 1e-8 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Identity(format!(
            "eigenvalue sum {eigen_sum:e} differs from −Σβ̄ = {predicted_sum:e}"
        )));
    }
    Ok(CenterOfGravity {
        center: eigen_sum / lin.dim() as f64,
        eigen_sum,
        predicted_sum,
    })
}

/// Reduced state matrix −Λ⁻¹(RQ)'RQ of the friction-dominated model without
/// compressors, `R_kk² = σ²πD_k³(Q_ℓρ̄)_k/(4ℓ_kλ_k|φ̄_k|)`.
pub fn simplified_state_matrix(
    model: &LumpedModel,
    nominal: &NominalPoint,
) -> Result<DMatrix<f64>> {
    if nominal.mu_bar.iter().any(|&m| m != 1.0) {
        return Err(Error::domain(
            "simplified state matrix requires all compressor ratios equal to 1",
        ));
    }
    let inc = &model.inc;
    let out = inc.outlet_density(&nominal.rho_bar);
    let sigma2 = model.sound_speed().powi(2);
    let mut rq = inc.q.to_dense();
    for (k, e) in model.net.edges.iter().enumerate() {
        let phi = nominal.phi_bar[k].abs();
        if !(phi > 0.0) || !(out[k] > 0.0) {
            return Err(Error::domain(format!(
                "edge {} needs nonzero flux and positive density",
                e.id
            )));
        }
        let r2 = sigma2 * std::f64::consts::PI * e.diameter.powi(3) * out[k]
            / (4.0 * e.length * e.friction * phi);
        rq.row_mut(k).scale_mut(r2.sqrt());
    }
    let mut a = -(rq.transpose() * &rq);
    for j in 0..a.nrows() {
        a.row_mut(j).scale_mut(inc.lambda_inv[j]);
    }
    Ok(a)
}

/// Poles `ζ±(m) = −β/2 ± j√((πσ/2ℓ)²(2m+1)² − (β/2)²)` for `m = 0..=m_max`.
///
/// A negative radicand gives a pair of real poles summing to −β.
pub fn pipe_poles(beta: f64, sigma: f64, length: f64, m_max: usize) -> Result<Vec<Complex64>> {
    if !(beta >= 0.0) {
        return Err(Error::domain("β must be nonnegative"));
    }
    let mut out = Vec::with_capacity(2 * (m_max + 1));
    let w0 = std::f64::consts::PI * sigma / (2.0 * length);
    for m in 0..=m_max {
        let rad = (w0 * (2 * m + 1) as f64).powi(2) - (beta / 2.0).powi(2);
        if rad >= 0.0 {
            let im = rad.sqrt();
            out.push(Complex64::new(-beta / 2.0, im));
            out.push(Complex64::new(-beta / 2.0, -im));
        } else {
            let re = (-rad).sqrt();
            out.push(Complex64::new(-beta / 2.0 + re, 0.0));
            out.push(Complex64::new(-beta / 2.0 - re, 0.0));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgePoles {
    /// Abscissa of the imaginary asymptote, −β_k/2.
    pub asymptote: f64,
    pub poles: Vec<Complex64>,
}

pub fn network_poles(
    beta: &[f64],
    sigma: f64,
    lengths: &[f64],
    m_max: usize,
) -> Result<Vec<EdgePoles>> {
    if beta.len() != lengths.len() {
        return Err(Error::domain("one β and one length per edge required"));
    }
    beta.par_iter()
        .zip(lengths.par_iter())
        .map(|(&b, &l)| {
            Ok(EdgePoles {
                asymptote: -b / 2.0,
                poles: pipe_poles(b, sigma, l, m_max)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1(length: f64) -> PipeFrequencyParams {
        PipeFrequencyParams {
            length,
            diameter: 0.5,
            friction: 0.011,
            sound_speed: 377.0,
            rho_bar: 35.0,
            phi_bar: 300.0,
            alpha_on: true,
            inertia: true,
            sign: ImpedanceSign::Physical,
        }
    }

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + b.norm())
    }

    #[test]
    fn constants_match_reference_pipe() {
        let p = fig1(5000.0);
        assert!((p.beta() - 0.188571).abs() < 1e-6);
        assert!((p.alpha() - 0.808163).abs() < 1e-6);
    }

    #[test]
    fn low_frequency_limit() {
        let mut p = fig1(1e5);
        p.alpha_on = false;
        let s = Complex64::new(1e-9, 1e-9);
        let g = transfer_matrix_closed_form(&p, s).unwrap();
        let h = transfer_matrix_general(&p, s).unwrap();
        assert!(close(g[0][0], Complex64::new(1.0, 0.0), 1e-4));
        assert!(close(g[1][1], Complex64::new(1.0, 0.0), 1e-4));
        let expect = -p.beta() * 1e5 / 377.0f64.powi(2);
        assert!((g[0][1].norm() - 0.1327).abs() < 1e-4);
        assert!(close(g[0][1], Complex64::new(expect, 0.0), 1e-6));
        for m in 0..2 {
            for n in 0..2 {
                assert!(close(g[m][n], h[m][n], 1e-6), "{m}{n}");
            }
        }
        let z = transfer_matrix(&p, Complex64::new(0.0, 0.0)).unwrap();
        assert!(close(z[0][1], Complex64::new(expect, 0.0), 1e-12));
    }

    #[test]
    fn closed_and_general_forms_agree() {
        for len in [5e3, 5e4, 3e5] {
            for inertia in [true, false] {
                let p = fig1(len).with_flags(false, inertia);
                for f in [0.01, 0.3, 2.0, 17.0, 200.0] {
                    let s = Complex64::new(0.0, angular(f));
                    let a = transfer_matrix_closed_form(&p, s).unwrap();
                    let b = transfer_matrix_general(&p, s).unwrap();
                    for m in 0..2 {
                        for n in 0..2 {
                            assert!(close(a[m][n], b[m][n], 1e-9), "{len} {inertia} {f} {m}{n}");
                        }
                    }
                    assert!(close(a[0][0], a[1][1], 1e-14));
                }
            }
        }
    }

    #[test]
    fn determinant_and_static_general_form() {
        // G11·G22 − G12·G21 relates to the chain-matrix determinant e^{αℓ/σ²}:
        // G22 = 1/a22 and G11 = det/a22, so G11/G22 = e^{αℓ/σ²}.
        let p = fig1(5e4);
        let s = Complex64::new(0.0, angular(1.0));
        let g = transfer_matrix_general(&p, s).unwrap();
        let det = (p.alpha() * p.length / 377.0f64.powi(2)).exp();
        assert!(close(g[0][0] / g[1][1], Complex64::new(det, 0.0), 1e-10));
        let st = transfer_matrix(&p, Complex64::new(0.0, 0.0)).unwrap();
        let near = transfer_matrix(&p, Complex64::new(0.0, 1e-12)).unwrap();
        for m in 0..2 {
            for n in 0..2 {
                assert!(
                    close(st[m][n], near[m][n], 1e-6),
                    "{m}{n} {} {}",
                    st[m][n],
                    near[m][n]
                );
            }
        }
    }

    #[test]
    fn lossless_line() {
        let mut p = fig1(5e4);
        p.phi_bar = 0.0;
        p.alpha_on = false;
        let fr = frequency_response(&p, &[0.5, 1.0, 2.0, 4.0]).unwrap();
        for (i, w) in fr.omegas.iter().enumerate() {
            let expect = 1.0 / (w * p.length / p.sound_speed).cos().abs();
            assert!((fr.samples[i][0][0].norm() - expect).abs() < 1e-9 * expect);
            assert!(fr.samples[i][0][0].norm() >= 1.0);
        }
        let one = frequency_response(&p, &[2.0]).unwrap();
        assert_eq!(
            one.samples[0],
            transfer_matrix(&p, Complex64::new(0.0, angular(2.0))).unwrap()
        );
    }

    #[test]
    fn friction_dominated_g21_grows() {
        let p = fig1(5e4).with_flags(false, false);
        let fr = frequency_response(&p, &[0.1, 1.0, 10.0]).unwrap();
        let m = fr.magnitude(1, 0);
        assert!(m[0] < m[1] && m[1] < m[2]);
        assert!(m[2] >= 2.0 * m[0]);
    }

    #[test]
    fn phase_unwrapping_is_continuous() {
        let p = fig1(3e5);
        let grid: Vec<f64> = (1..400).map(|i| i as f64 * 0.1).collect();
        let fr = frequency_response(&p, &grid).unwrap();
        let ph = fr.phase(0, 0);
        assert!(ph
            .windows(2)
            .all(|w| (w[1] - w[0]).abs() < std::f64::consts::PI));
    }

    #[test]
    fn equivalent_frequency_properties() {
        let a = fig1(5000.0);
        let grid: Vec<f64> = (1..=200).map(|i| i as f64 * 0.25).collect();
        let same = max_equivalent_frequency(
            &a,
            &a,
            Threshold {
                magnitude: 0.01,
                phase: 0.01,
            },
            &grid,
        )
        .unwrap();
        assert_eq!(same.f_star, 50.0);
        let b = a.with_flags(false, false);
        let loose = max_equivalent_frequency(
            &a,
            &b,
            Threshold {
                magnitude: 0.05,
                phase: 0.5,
            },
            &grid,
        )
        .unwrap();
        let tight = max_equivalent_frequency(
            &a,
            &b,
            Threshold {
                magnitude: 0.04,
                phase: 0.5,
            },
            &grid,
        )
        .unwrap();
        assert!(loose.f_star >= 5.0, "{}", loose.f_star);
        assert!(tight.f_star <= loose.f_star);
    }

    #[test]
    fn eigenvalues_of_small_matrices() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, -1.0, 2.0]));
        let e = eigenvalues(&d).unwrap();
        assert_eq!(
            e.iter().map(|c| c.re).collect::<Vec<_>>(),
            vec![-1.0, 2.0, 3.0]
        );
        let rot = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, -2.0, -0.5]);
        let e = eigenvalues(&rot).unwrap();
        assert!(close(e[0], Complex64::new(-0.5, -2.0), 1e-12));
        assert!(close(e[1], Complex64::new(-0.5, 2.0), 1e-12));
    }

    #[test]
    fn pole_formula_roots() {
        let beta = fig1(1e5).beta();
        let poles = pipe_poles(beta, 377.0, 1e5, 10).unwrap();
        // m = 0 has a negative radicand for this pipe
        assert_eq!(poles[0].im, 0.0);
        assert!(poles[0].re < 0.0 && poles[1].re < 0.0);
        assert!(((poles[0] + poles[1]).re + beta).abs() < 1e-12);
        let p = PipeFrequencyParams {
            length: 1e5,
            ..fig1(1e5)
        }
        .with_flags(false, true);
        for z in &poles {
            let c = (p.gamma(*z) * p.length).cosh();
            assert!(c.norm() <= 1e-6, "{z} {c}");
        }
        let lossless = pipe_poles(0.0, 377.0, 1e4, 3).unwrap();
        for (m, pair) in lossless.chunks(2).enumerate() {
            let w = std::f64::consts::PI * 377.0 / 2e4 * (2 * m + 1) as f64;
            assert_eq!(pair[0].re, 0.0);
            assert!((pair[0].im - w).abs() < 1e-12);
        }
    }

    #[test]
    fn network_asymptotes() {
        let poles = network_poles(&[0.2, 0.2, 0.05], 377.0, &[1e4, 1e4, 1e4], 4).unwrap();
        assert_eq!(poles[0].asymptote, poles[1].asymptote);
        assert!(((poles[0].asymptote - poles[2].asymptote).abs() - 0.075).abs() < 1e-15);
        assert_eq!(poles[2].poles.len(), 10);
    }
}
