//! Inverse solvers built on the forward, measurement, CGO and linearization
//! modules. Every solver returns a [`ReconstructionResult`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dnmap;
use crate::error::{Error, Result};
use crate::forward::Solver;
use crate::grid::{BoundaryEntry, Field, SpaceTimeGrid};

mod control;
mod initial;
mod potential;
mod runge;
mod taylor;

pub use control::{null_control, ControlOptions, ControlResult};
pub use initial::{noise_norm, recover_initial, spearman, stability_curve, InitialOptions, StabilityCurve, StabilityPoint};
pub use potential::{
    lattice, recover_potential, reciprocity, FourierSample, FourierSampleSet, PotentialMode, PotentialOptions,
    ProfileOracle, ReciprocityReport, SyntheticTwin,
};
pub use runge::{runge_fit, RungeMode, RungeResult};
pub use taylor::{
    positive_solution, recover_taylor, PositiveSolution, SemilinearModel, TaylorInversion, TaylorOptions,
    TaylorRecovery, MASK_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regularization {
    pub method: String,
    pub parameter: f64,
    pub rule: String,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub recovered: Field,
    /// Misfit of the recovered unknown in the functional that was minimized.
    pub residual_norm: f64,
    pub data_norm: f64,
    pub regularization: Regularization,
    /// Relative `L²` error against the supplied truth.
    pub relative_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct ResultSummary<'a> {
    residual_norm: f64,
    data_norm: f64,
    regularization: &'a Regularization,
    relative_error: Option<f64>,
    iterations: usize,
    converged: bool,
    warnings: &'a [String],
    grid: &'a SpaceTimeGrid,
}

impl ReconstructionResult {
    pub fn with_truth(mut self, truth: &Field) -> Self {
        self.relative_error = Some(relative_error(&self.recovered, truth));
        self
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ResultSummary {
            residual_norm: self.residual_norm,
            data_norm: self.data_norm,
            regularization: &self.regularization,
            relative_error: self.relative_error,
            iterations: self.iterations,
            converged: self.converged,
            warnings: &self.warnings,
            grid: self.recovered.grid(),
        })?)
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.summary_json()?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.recovered.to_csv())?;
        Ok(())
    }
}

/// `‖a − b‖ / ‖b‖`, or `‖a‖` when `b` vanishes.
pub fn relative_error(a: &Field, b: &Field) -> f64 {
    let nb = b.l2();
    let d = a.sub(b).l2();
    if nb > 0.0 {
        d / nb
    } else {
        d
    }
}

/// Tensor-product trigonometric basis `1, cos(2πjs/L), sin(2πjs/L)` per axis,
/// periodic over each axis extent and over `[0, T]`.
#[derive(Debug, Clone)]
pub struct TrigBasis {
    grid: SpaceTimeGrid,
    space_modes: usize,
    time_modes: usize,
}

fn trig(j: usize, s: f64, period: f64) -> f64 {
    if j == 0 {
        return 1.0;
    }
    let k = j.div_ceil(2) as f64;
    let arg = 2.0 * std::f64::consts::PI * k * s / period;
    if j % 2 == 1 {
        arg.cos()
    } else {
        arg.sin()
    }
}

impl TrigBasis {
    pub fn new(grid: &SpaceTimeGrid, space_modes: usize, time_modes: usize) -> Self {
        Self {
            grid: *grid,
            space_modes,
            time_modes,
        }
    }

    fn per_axis(&self) -> (usize, usize, usize) {
        let s = 2 * self.space_modes + 1;
        let sy = if self.grid.dim() == 2 { s } else { 1 };
        (s, sy, 2 * self.time_modes + 1)
    }

    pub fn len(&self) -> usize {
        let (a, b, c) = self.per_axis();
        a * b * c
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Value of basis function `b` at a point.
    pub fn eval(&self, b: usize, x: [f64; 2], t: f64) -> f64 {
        let (sx, sy, _) = self.per_axis();
        let (ix, rest) = (b % sx, b / sx);
        let (iy, it) = (rest % sy, rest / sy);
        let lo = self.grid.lower();
        let hi = self.grid.upper();
        let mut v = trig(ix, x[0] - lo[0], hi[0] - lo[0]) * trig(it, t, self.grid.horizon());
        if self.grid.dim() == 2 {
            v *= trig(iy, x[1] - lo[1], hi[1] - lo[1]);
        }
        v
    }

    pub fn fields(&self) -> Vec<Field> {
        (0..self.len())
            .map(|b| Field::from_fn(&self.grid, |x, t| self.eval(b, x, t)))
            .collect()
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Field {
        let fields = self.fields();
        let mut out = Field::zeros(&self.grid);
        for (c, f) in coeffs.iter().zip(&fields) {
            out.axpy(*c, f);
        }
        out
    }
}

/// Solution of `min ‖Ac − d‖² + λ‖c‖²` with `λ = α·σ_max²`.
#[derive(Debug, Clone)]
pub(crate) struct LeastSquares {
    pub coeffs: Vec<f64>,
    pub residual: f64,
    pub lambda: f64,
}

/// Plain nodal sum of a product; adjoint fields already carry quadrature.
pub(crate) fn dot(a: &Field, b: &Field) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// `∂/∂u` of the flux functional `u ↦ Σ c_{e,n} ∂_ν u(e, n)`.
pub(crate) fn flux_seed(grid: &SpaceTimeGrid, entries: &[BoundaryEntry], coeffs: &[f64]) -> Result<Field> {
    let ne = entries.len();
    if coeffs.len() != ne * grid.n_levels() {
        return Err(Error::invalid("flux coefficients do not match the boundary entries"));
    }
    let mut seed = Field::zeros(grid);
    for n in 0..grid.n_levels() {
        let lvl = seed.level_mut(n);
        for (e, entry) in entries.iter().enumerate() {
            let (a, b, c) = dnmap::inward_nodes(grid, entry);
            let s = coeffs[n * ne + e] / (2.0 * grid.spacing(entry.face.axis()));
            lvl[a] += 3.0 * s;
            lvl[b] -= 4.0 * s;
            lvl[c] += s;
        }
    }
    Ok(seed)
}

/// Discrete adjoint of the flux functional composed with the linear solve of
/// `q` under zero initial and lateral data: the returned `G` satisfies
/// `Σ c·∂_ν(L⁻¹h) = Σ_nodes G·h` exactly.
pub(crate) fn flux_adjoint(solver: &Solver, q: Option<&Field>, entries: &[BoundaryEntry], coeffs: &[f64]) -> Result<Field> {
    let seed = flux_seed(solver.grid(), entries, coeffs)?;
    Ok(solver.vjp_linear(q, &seed)?.h)
}

pub(crate) fn tikhonov(rows: &[Vec<f64>], rhs: &[f64], alpha: f64) -> Result<LeastSquares> {
    let m = rows.len();
    let n = rows.first().map_or(0, |r| r.len());
    if m == 0 || n == 0 {
        return Err(Error::invalid("empty least-squares system"));
    }
    let a = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let d = DVector::from_column_slice(rhs);
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let lambda = alpha * smax * smax;
    let mut c = DVector::zeros(n);
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s == 0.0 {
            continue;
        }
        let coef = s / (s * s + lambda) * u.column(i).dot(&d);
        c += vt.row(i).transpose() * coef;
    }
    let residual = (&a * &c - &d).norm();
    Ok(LeastSquares {
        coeffs: c.iter().copied().collect(),
        residual,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trig_basis_is_orthogonal_on_a_periodic_grid() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 2.0], [17, 17], 16, 1.0).unwrap();
        let b = TrigBasis::new(&g, 1, 1);
        assert_eq!(b.len(), 27);
        let f = b.fields();
        for i in 0..f.len() {
            for j in 0..i {
                assert!(f[i].inner(&f[j]).abs() < 1e-12, "{i} {j}");
            }
        }
        let c: Vec<f64> = (0..27).map(|i| i as f64 * 0.1).collect();
        let s = b.synthesize(&c);
        assert!((s.at(0, 0) - (0..27).map(|i| c[i] * f[i].at(0, 0)).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn flux_adjoint_matches_the_flux_of_a_solve() {
        use crate::grid::{BoundaryPortion, BoundaryTrace};
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [9, 7], 10, 0.5).unwrap();
        let solver = Solver::heat(&g);
        let q = Field::from_fn(&g, |x, t| 1.0 + x[0] * x[1] + t);
        let h = Field::from_fn(&g, |x, t| (3.0 * x[0] + t).sin() * (1.0 + x[1]));
        let portion = BoundaryPortion::Full;
        let entries = portion.entries(&g).unwrap();
        let zero = Field::zeros_slice(&g);
        let u = solver.solve_linear(Some(&q), &BoundaryTrace::zeros(&g), &zero, Some(&h)).unwrap().solution;
        let m = dnmap::measure(&u, &portion).unwrap();
        let coeffs: Vec<f64> = (0..m.values().len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let lhs: f64 = coeffs.iter().zip(m.values()).map(|(c, v)| c * v).sum();
        let adj = flux_adjoint(&solver, Some(&q), &entries, &coeffs).unwrap();
        let rhs = dot(&adj, &h);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn tikhonov_recovers_consistent_systems() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let x = [0.7, -1.3];
        let rhs: Vec<f64> = rows.iter().map(|r| r[0] * x[0] + r[1] * x[1]).collect();
        let ls = tikhonov(&rows, &rhs, 0.0).unwrap();
        assert!((ls.coeffs[0] - x[0]).abs() < 1e-12 && (ls.coeffs[1] - x[1]).abs() < 1e-12);
        assert!(ls.residual < 1e-12);
        let reg = tikhonov(&rows, &rhs, 1.0).unwrap();
        let n = |c: &[f64]| c[0].hypot(c[1]);
        assert!(n(&reg.coeffs) < n(&ls.coeffs));
    }
}
