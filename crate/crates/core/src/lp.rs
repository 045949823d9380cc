//! Linear programs assembled row by row and solved with a sparse simplex.
//!
//! Rows and columns are rescaled before solving. When a program is
//! infeasible, an elastic copy that softens the variable bounds marked `soft`
//! names the bounds that cannot all hold.

use microlp::{ComparisonOp, OptimizationDirection, Problem};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

#[derive(Clone, Debug)]
struct Var {
    lower: f64,
    upper: f64,
    cost: f64,
    soft: bool,
    label: String,
}

#[derive(Clone, Debug)]
struct Row {
    terms: Vec<(usize, f64)>,
    sense: Sense,
    rhs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    vars: Vec<Var>,
    rows: Vec<Row>,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u64,
}

/// Largest violations reported in an infeasibility certificate.
const CERTIFICATE_LEN: usize = 5;
/// Scaling strengths tried in turn when the simplex reports a numerical failure.
const SCALING_PASSES: [usize; 4] = [4, 0, 8, 1];
/// Scaled row or bound violation below which a solution is accepted without trying other scalings.
const ACCEPT_TOL: f64 = 1e-9;

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Adds a variable with bounds `[lower, upper]` and objective coefficient `cost`.
    /// Bounds of `soft` variables may be relaxed when diagnosing infeasibility.
    pub fn add_var(
        &mut self,
        lower: f64,
        upper: f64,
        cost: f64,
        soft: bool,
        label: impl Into<String>,
    ) -> usize {
        self.vars.push(Var {
            lower,
            upper,
            cost,
            soft,
            label: label.into(),
        });
        self.vars.len() - 1
    }

    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.vars[var].cost = cost;
    }

    pub fn cost(&self, var: usize) -> f64 {
        self.vars[var].cost
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.vars[var].lower = lower;
        self.vars[var].upper = upper;
    }

    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.rows.push(Row { terms, sense, rhs });
    }

    /// Objective value of a point.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.vars.iter().zip(x).map(|(v, xi)| v.cost * xi).sum()
    }

    /// Largest bound or row violation of a point.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = self
            .vars
            .iter()
            .zip(x)
            .map(|(v, &xi)| (v.lower - xi).max(xi - v.upper).max(0.0));
        let rows = self.rows.iter().map(|r| {
            let lhs: f64 = r.terms.iter().map(|&(j, a)| a * x[j]).sum();
            let scale = row_scale(r);
            let d = (lhs - r.rhs) / scale;
            match r.sense {
                Sense::Eq => d.abs(),
                Sense::Le => d.max(0.0),
                Sense::Ge => (-d).max(0.0),
            }
        });
        bounds.chain(rows).fold(0.0, f64::max)
    }

    /// Geometric row and column scaling followed by row equilibration.
    fn scaling(&self, passes: usize) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.rows.len(), self.vars.len());
        let mut r = vec![1.0; m];
        let mut c = vec![1.0; n];
        for _ in 0..passes {
            for (i, row) in self.rows.iter().enumerate() {
                let (lo, hi) = extremes(row.terms.iter().map(|&(j, a)| a * c[j]));
                if hi > 0.0 {
                    r[i] = 1.0 / (lo * hi).sqrt();
                }
            }
            let mut lo = vec![f64::INFINITY; n];
            let mut hi = vec![0.0f64; n];
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, a) in &row.terms {
                    let v = (a * r[i]).abs();
                    if v > 0.0 {
                        lo[j] = lo[j].min(v);
                        hi[j] = hi[j].max(v);
                    }
                }
            }
            for j in 0..n {
                if hi[j] > 0.0 {
                    c[j] = 1.0 / (lo[j] * hi[j]).sqrt();
                }
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            let (_, hi) = extremes(row.terms.iter().map(|&(j, a)| a * c[j]));
            r[i] = if hi > 0.0 { 1.0 / hi } else { 1.0 };
        }
        (r, c)
    }

    fn run(&self) -> std::result::Result<LpSolution, microlp::Error> {
        let mut last = None;
        let mut best: Option<(f64, LpSolution)> = None;
        for passes in SCALING_PASSES {
            match self.run_scaled(passes) {
                Err(microlp::Error::InternalError(msg)) => last = Some(msg),
                Ok(s) => {
                    let v = self.max_violation(&s.x);
                    if v <= ACCEPT_TOL {
                        return Ok(s);
                    }
                    if best.as_ref().is_none_or(|b| v < b.0) {
                        best = Some((v, s));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        match best {
            Some((_, s)) => Ok(s),
            None => Err(microlp::Error::InternalError(last.unwrap_or_default())),
        }
    }

    fn run_scaled(&self, passes: usize) -> std::result::Result<LpSolution, microlp::Error> {
        let (r, c) = self.scaling(passes);
        let mut p = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = self
            .vars
            .iter()
            .zip(&c)
            .map(|(v, &cj)| p.add_var(v.cost * cj, (v.lower / cj, v.upper / cj)))
            .collect();
        for (row, &ri) in self.rows.iter().zip(&r) {
            let terms: Vec<_> = row
                .terms
                .iter()
                .filter(|t| t.1 != 0.0)
                .map(|&(j, a)| (vars[j], a * ri * c[j]))
                .collect();
            let op = match row.sense {
                Sense::Eq => ComparisonOp::Eq,
                Sense::Le => ComparisonOp::Le,
                Sense::Ge => ComparisonOp::Ge,
            };
            p.add_constraint(terms, op, row.rhs * ri);
        }
        let sol = p
            .solve()?
            .into_solution()
            .map_err(|_| microlp::Error::InternalError("interrupted".into()))?;
        let x: Vec<f64> = vars
            .iter()
            .zip(&c)
            .map(|(&v, &cj)| sol.var_value_raw(v) * cj)
            .collect();
        Ok(LpSolution {
            objective: self.objective_at(&x),
            x,
            iterations: sol.stats().lp_iterations,
        })
    }

    /// Solves the program; an infeasible program yields [`Error::Infeasible`]
    /// carrying the bounds with the largest unavoidable violations.
    pub fn solve(&self) -> Result<LpSolution> {
        match self.run() {
            Ok(s) => Ok(s),
            Err(microlp::Error::Infeasible) => Err(Error::Infeasible(self.diagnose())),
            Err(microlp::Error::Unbounded) => {
                Err(Error::Solver("linear program is unbounded".into()))
            }
            Err(e) => Err(Error::Solver(e.to_string())),
        }
    }

    /// Solves, then among optimal points minimizes `secondary · x`.
    pub fn solve_lexicographic(&self, secondary: &[(usize, f64)]) -> Result<LpSolution> {
        let first = self.solve()?;
        if secondary.is_empty() {
            return Ok(first);
        }
        let mut second = self.clone();
        for v in &mut second.vars {
            v.cost = 0.0;
        }
        for &(j, c) in secondary {
            second.vars[j].cost = c;
        }
        let terms: Vec<(usize, f64)> = self
            .vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.cost != 0.0)
            .map(|(j, v)| (j, v.cost))
            .collect();
        let slack = 1e-9 * (1.0 + first.objective.abs());
        second.add_row(terms, Sense::Le, first.objective + slack);
        match second.run() {
            Ok(mut s) => {
                s.objective = self.objective_at(&s.x);
                s.iterations += first.iterations;
                Ok(s)
            }
            Err(_) => Ok(first),
        }
    }

    /// Minimizes the total relaxation of soft bounds and lists the largest ones.
    pub fn diagnose(&self) -> String {
        let mut elastic = LinearProgram::new();
        let mut relax = Vec::new();
        for v in &self.vars {
            let soft = v.soft;
            let (lo, hi) = if soft {
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                (v.lower, v.upper)
            };
            elastic.add_var(lo, hi, 0.0, false, v.label.clone());
        }
        elastic.rows = self.rows.clone();
        for (j, v) in self.vars.iter().enumerate().filter(|(_, v)| v.soft) {
            let scale = bound_scale(v);
            if v.lower.is_finite() {
                let e = elastic.add_var(0.0, f64::INFINITY, 1.0 / scale, false, "");
                elastic.add_row(vec![(j, 1.0), (e, 1.0)], Sense::Ge, v.lower);
                relax.push((j, e, "below lower bound"));
            }
            if v.upper.is_finite() {
                let e = elastic.add_var(0.0, f64::INFINITY, 1.0 / scale, false, "");
                elastic.add_row(vec![(j, 1.0), (e, -1.0)], Sense::Le, v.upper);
                relax.push((j, e, "above upper bound"));
            }
        }
        let sol = match elastic.run() {
            Ok(s) => s,
            Err(_) => {
                return "constraints are inconsistent even with all state bounds relaxed".into()
            }
        };
        let mut found: Vec<(f64, String)> = relax
            .iter()
            .map(|&(j, e, what)| (sol.x[e], j, what))
            .filter(|(amount, _, _)| *amount > 1e-7)
            .map(|(amount, j, what)| {
                (
                    amount,
                    format!("{} {what} by {amount:.4e}", self.vars[j].label),
                )
            })
            .collect();
        if found.is_empty() {
            return "infeasible within solver tolerance".into();
        }
        found.sort_by(|a, b| b.0.total_cmp(&a.0));
        let total = found.len();
        let shown: Vec<String> = found
            .into_iter()
            .take(CERTIFICATE_LEN)
            .map(|f| f.1)
            .collect();
        format!("{} bound(s) must be violated: {}", total, shown.join("; "))
    }
}

fn extremes(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .map(f64::abs)
        .filter(|v| *v > 0.0)
        .fold((f64::INFINITY, 0.0), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn row_scale(r: &Row) -> f64 {
    let m = r.terms.iter().fold(0.0f64, |m, t| m.max(t.1.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn bound_scale(v: &Var) -> f64 {
    let m = v.lower.abs().max(v.upper.abs());
    if m.is_finite() && m > 0.0 {
        m
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_program() {
        // min -x - y, x + 2y <= 4, 3x + y <= 6, x, y >= 0 → (1.6, 1.2)
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, f64::INFINITY, -1.0, false, "x");
        let y = lp.add_var(0.0, f64::INFINITY, -1.0, false, "y");
        lp.add_row(vec![(x, 1.0), (y, 2.0)], Sense::Le, 4.0);
        lp.add_row(vec![(x, 3.0), (y, 1.0)], Sense::Le, 6.0);
        let s = lp.solve().unwrap();
        assert!((s.x[0] - 1.6).abs() < 1e-9 && (s.x[1] - 1.2).abs() < 1e-9);
        assert!((s.objective + 2.8).abs() < 1e-9);
        assert!(lp.max_violation(&s.x) < 1e-9);
    }

    #[test]
    fn infeasible_names_bound() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, 1.0, 1.0, true, "rho[7]");
        let y = lp.add_var(2.0, 3.0, 0.0, false, "mu");
        lp.add_row(vec![(x, 1.0), (y, -1.0)], Sense::Eq, 0.0);
        match lp.solve() {
            Err(Error::Infeasible(msg)) => {
                assert!(msg.contains("rho[7] above upper bound by 1.0"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lexicographic_tie_break() {
        // min x, x + y = 1, x, y in [0, 1]: x = 0 forces y = 1; with a free tie
        // in z the secondary objective picks the smallest z.
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, 1.0, 1.0, false, "x");
        let y = lp.add_var(0.0, 1.0, 0.0, false, "y");
        let z = lp.add_var(0.25, 2.0, 0.0, false, "z");
        lp.add_row(vec![(x, 1.0), (y, 1.0)], Sense::Eq, 1.0);
        lp.add_row(vec![(y, 1.0), (z, -1.0)], Sense::Le, 0.9);
        let s = lp.solve_lexicographic(&[(z, 1.0)]).unwrap();
        assert!(s.x[0].abs() < 1e-9);
        assert!((s.x[2] - 0.25).abs() < 1e-9);
    }
}
