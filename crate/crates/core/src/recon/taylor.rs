//! Taylor-coefficient recovery by higher-order linearization.
//!
//! Once two models agree below order `k`, the difference of their k-th mixed
//! derivatives `D = w₁ − w₂` solves the reference linearized equation with
//! source `−δ_k v¹⋯v^k` and zero data, where
//! `δ_k = ∂_u^k b₁(·, ũ₁) − ∂_u^k b₂(·, ũ₂)`. Pairing its flux with the boundary
//! values of a backward solution `v⁰` gives
//!
//! ```text
//! ∫_Σ v⁰ ∂_ν D = ∫_Q δ_k v⁰ v¹ ⋯ v^k
//! ```
//!
//! `v⁰` and `v¹` carry CGO boundary data and `v², …, v^k` are one positive
//! solution. The volume side is evaluated with the discrete adjoint of the
//! reference solve, so the identity holds exactly on the grid. At order 1 the
//! unknown solution `v₁¹` is replaced by the reference one (Born).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgo::CGOParameters;
use crate::dnmap;
use crate::error::{Error, Result};
use crate::forward::{Solver, Strategy};
use crate::grid::{BoundaryEntry, BoundaryPortion, BoundaryTrace, Field, SpaceTimeGrid};
use crate::linearize::{smooth_ramp, Linearizer, ProbeFamily, MAX_ORDER};
use crate::model::{Nonlinearity, TaylorTable};

use super::{dot, flux_adjoint, lattice, relative_error, tikhonov, ReconstructionResult, Regularization, TrigBasis};

/// Products below this fraction of their maximum are masked in
/// [`TaylorInversion::DivideByProduct`].
pub const MASK_THRESHOLD: f64 = 1e-6;

/// A linearized solution certified positive on the interior.
#[derive(Debug, Clone)]
pub struct PositiveSolution {
    pub field: Field,
    /// Minimum over interior nodes and levels `t > 0`.
    pub min: f64,
}

/// Solves the linearized equation with data `f` and zero initial data and
/// checks that the solution is positive on the interior for `t > 0`.
pub fn positive_solution(solver: &Solver, q: Option<&Field>, f: &BoundaryTrace) -> Result<PositiveSolution> {
    let grid = *solver.grid();
    if f.values().iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("positive solutions need nonnegative boundary data"));
    }
    let field = solver.solve_linear(q, f, &Field::zeros_slice(&grid), None)?.solution;
    let interior = grid.interior_nodes();
    let min = (1..grid.n_levels())
        .flat_map(|n| interior.iter().map(move |&k| (k, n)))
        .map(|(k, n)| field.at(k, n))
        .fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::CheckFailed(format!(
            "maximum principle violated: interior minimum {min:.3e} is not positive"
        )));
    }
    Ok(PositiveSolution { field, min })
}

/// A semilinear model with its initial data; the boundary base data are
/// shared between the two models of a recovery.
#[derive(Debug, Clone)]
pub struct SemilinearModel {
    pub solver: Solver,
    pub nl: Nonlinearity,
    pub g: Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorInversion {
    /// Fit `δ_k` directly against the kernel `v⁰v¹·Π v^j`.
    WeightedKernel,
    /// Fit `δ_k·Π v^j` against `v⁰v¹`, then divide by the positive product.
    DivideByProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorOptions {
    pub order: usize,
    /// Carrier strengths of the CGO boundary data.
    pub rhos: Vec<f64>,
    pub space_modes: usize,
    pub time_modes: usize,
    /// Relative Tikhonov weight `λ = α·σ_max²`.
    pub alpha: f64,
    /// Corner-sum amplitudes; the two smallest are Richardson-extrapolated.
    pub amplitudes: Vec<f64>,
    /// Ramp length of the positive solution's boundary data `r(t)·1`.
    pub ramp: f64,
    pub inversion: TaylorInversion,
    pub strategy: Strategy,
}

impl Default for TaylorOptions {
    fn default() -> Self {
        Self {
            order: 3,
            rhos: vec![0.5, 1.0, 2.0],
            space_modes: 2,
            time_modes: 2,
            alpha: 1e-6,
            amplitudes: vec![1e-2, 5e-3],
            ramp: 0.1,
            inversion: TaylorInversion::WeightedKernel,
            strategy: Strategy::Newton,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaylorRecovery {
    pub base: Field,
    /// `δ_k` for `k = 1..=order`.
    pub orders: Vec<ReconstructionResult>,
    /// Interior minimum of the positive solution.
    pub positive_min: f64,
    /// Nodes skipped by the division, per order.
    pub masked_nodes: Vec<usize>,
    pub probes: usize,
    pub seeds: usize,
}

impl TaylorRecovery {
    /// The recovered differences as a table with a zero 0-th coefficient.
    pub fn difference_table(&self) -> TaylorTable {
        let mut coeffs = vec![Field::zeros(self.base.grid())];
        coeffs.extend(self.orders.iter().map(|r| r.recovered.clone()));
        TaylorTable {
            base: self.base.clone(),
            coeffs,
        }
    }
}

/// Normalized lateral values `ψθ` of a CGO, split into nonzero real parts.
fn cgo_traces(grid: &SpaceTimeGrid, params: &CGOParameters) -> Vec<BoundaryTrace> {
    let horizon = grid.horizon();
    let value = |x: [f64; 2], t: f64| params.theta(x, t, horizon) * params.carrier_exponent(x, t).exp();
    let parts = [
        BoundaryTrace::from_fn(grid, |x, t| value(x, t).re),
        BoundaryTrace::from_fn(grid, |x, t| value(x, t).im),
    ];
    let peak = parts.iter().map(|p| p.max_abs()).fold(0.0, f64::max);
    parts
        .into_iter()
        .filter(|p| p.max_abs() > 1e-12 * peak)
        .map(|p| p.scaled(p.max_abs().recip()))
        .collect()
}

/// Flux-functional coefficients `w_{e,n}·φ(e, n)` of the boundary values `φ`.
fn coefficients(phi: &BoundaryTrace, entries: &[BoundaryEntry], weights: &[f64]) -> Vec<f64> {
    let grid = phi.grid();
    let slot: HashMap<usize, usize> = phi.nodes().iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let ne = entries.len();
    let mut out = vec![0.0; weights.len()];
    for n in 0..grid.n_levels() {
        let lvl = phi.level(n);
        for (e, entry) in entries.iter().enumerate() {
            out[n * ne + e] = weights[n * ne + e] * lvl[slot[&entry.node]];
        }
    }
    out
}

fn measured_order(lin: &Linearizer, probes: &[usize], amps: &[f64]) -> Result<Field> {
    let mut sorted = amps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let qa = lin.quotient(probes, sorted[0])?;
    if sorted.len() == 1 {
        return Ok(qa);
    }
    let (ea, eb) = (sorted[0], sorted[1]);
    let qb = lin.quotient(probes, eb)?;
    let mut ex = qa.scaled(eb / (eb - ea));
    ex.axpy(-ea / (eb - ea), &qb);
    Ok(ex)
}

/// Recovers `δ_k`, `k = 1..=order`, from corner-sum quotients of `measured`
/// against the same quotients of `reference`, both around base data `f₀`.
/// `truth[k − 1]`, when given, is the exact `δ_k`.
pub fn recover_taylor(
    measured: &SemilinearModel,
    reference: &SemilinearModel,
    f0: &BoundaryTrace,
    opts: &TaylorOptions,
    truth: Option<&[Field]>,
) -> Result<TaylorRecovery> {
    let grid = *reference.solver.grid();
    if measured.solver.grid() != &grid || f0.grid() != &grid {
        return Err(Error::invalid("models and base data live on different grids"));
    }
    if opts.order == 0 || opts.order > MAX_ORDER {
        return Err(Error::invalid(format!("order must lie in 1..={MAX_ORDER}")));
    }
    if opts.rhos.is_empty() || opts.rhos.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("ρ values must be positive"));
    }
    if opts.amplitudes.is_empty() {
        return Err(Error::invalid("amplitude schedule is empty"));
    }
    if let Some(t) = truth {
        if t.len() < opts.order {
            return Err(Error::invalid("truth must supply one field per order"));
        }
    }

    let points = lattice(&grid, opts.space_modes, opts.time_modes);
    let mut traces = Vec::new();
    let mut seeds = Vec::new();
    let mut omegas: Vec<[f64; 2]> = Vec::new();
    for &rho in &opts.rhos {
        for &(xi, tau, omega) in &points {
            traces.extend(cgo_traces(&grid, &CGOParameters::forward(rho, omega, xi, tau)));
            if !omegas.contains(&omega) {
                omegas.push(omega);
            }
        }
        for &omega in &omegas {
            seeds.extend(cgo_traces(&grid, &CGOParameters::backward(rho, omega)));
        }
        omegas.clear();
    }
    let n_probes = traces.len();
    let positive = BoundaryTrace::from_fn(&grid, |_, t| smooth_ramp(t, opts.ramp));
    traces.push(positive.clone());

    let family = ProbeFamily::new(f0.clone(), traces, opts.amplitudes.clone())?;
    let (lin1, lin2) = rayon::join(
        || Linearizer::new(&measured.solver, &measured.nl, &measured.g, family.clone(), opts.strategy),
        || Linearizer::new(&reference.solver, &reference.nl, &reference.g, family.clone(), opts.strategy),
    );
    let (lin1, lin2) = (lin1?, lin2?);
    let q = lin2.potential().clone();
    let pos = positive_solution(&reference.solver, Some(&q), &positive)?;
    let first: Vec<Field> = (0..n_probes)
        .into_par_iter()
        .map(|p| lin2.direct(&[p]))
        .collect::<Result<_>>()?;

    let portion = BoundaryPortion::Full;
    let entries = portion.entries(&grid)?;
    let weights = dnmap::measure(&Field::zeros(&grid), &portion)?.weights();
    let adjoints: Vec<(Vec<f64>, Field)> = seeds
        .par_iter()
        .map(|s| {
            let coeffs = coefficients(s, &entries, &weights);
            let g = flux_adjoint(&reference.solver, Some(&q), &entries, &coeffs)?;
            Ok((coeffs, g))
        })
        .collect::<Result<_>>()?;

    let basis = TrigBasis::new(&grid, opts.space_modes, opts.time_modes);
    let basis_fields = basis.fields();
    if n_probes * seeds.len() < basis.len() {
        return Err(Error::invalid(format!(
            "{} probe-seed pairs cannot determine {} basis coefficients",
            n_probes * seeds.len(),
            basis.len()
        )));
    }

    let pos_index = n_probes;
    let mut orders = Vec::with_capacity(opts.order);
    let mut masked_nodes = Vec::with_capacity(opts.order);
    for k in 1..=opts.order {
        let mut product = Field::from_fn(&grid, |_, _| 1.0);
        for _ in 1..k {
            product = product.mul(&pos.field);
        }
        let fluxes: Vec<dnmap::DNMeasurement> = (0..n_probes)
            .into_par_iter()
            .map(|p| {
                let mut idx = vec![p];
                idx.extend(std::iter::repeat_n(pos_index, k - 1));
                let d = measured_order(&lin1, &idx, &opts.amplitudes)?.sub(&measured_order(&lin2, &idx, &opts.amplitudes)?);
                dnmap::measure(&d, &portion)
            })
            .collect::<Result<_>>()?;
        let weighted = opts.inversion == TaylorInversion::WeightedKernel;
        let (rows, rhs): (Vec<Vec<f64>>, Vec<f64>) = (0..n_probes)
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut v = first[p].scaled(-1.0);
                if weighted {
                    v = v.mul(&product);
                }
                let fluxes = &fluxes;
                let basis_fields = &basis_fields;
                adjoints.iter().map(move |(coeffs, g)| {
                    let kernel = g.mul(&v);
                    let row: Vec<f64> = basis_fields.iter().map(|b| dot(&kernel, b)).collect();
                    let datum: f64 = coeffs.iter().zip(fluxes[p].values()).map(|(c, m)| c * m).sum();
                    (row, datum)
                })
            })
            .unzip();
        let data_norm = rhs.iter().map(|d| d * d).sum::<f64>().sqrt();
        let ls = tikhonov(&rows, &rhs, opts.alpha)?;
        let fit = basis.synthesize(&ls.coeffs);
        let mut warnings = Vec::new();
        let (recovered, masked) = if weighted || k == 1 {
            (fit, 0)
        } else {
            let cut = MASK_THRESHOLD * product.max_abs();
            let masked = product.values().iter().filter(|p| **p <= cut).count();
            (fit.zip_map(&product, |f, p| if p > cut { f / p } else { 0.0 }), masked)
        };
        if masked > 0 {
            warnings.push(format!("order {k}: {masked} nodes masked where the positive product is below threshold"));
        }
        masked_nodes.push(masked);
        orders.push(ReconstructionResult {
            relative_error: truth.map(|t| relative_error(&recovered, &t[k - 1])),
            recovered,
            residual_norm: ls.residual,
            data_norm,
            regularization: Regularization {
                method: format!("tikhonov-trigonometric-synthesis ({:?})", opts.inversion),
                parameter: ls.lambda,
                rule: format!("relative weight {:e} of the largest squared singular value", opts.alpha),
            },
            iterations: 1,
            converged: true,
            warnings,
        });
    }
    Ok(TaylorRecovery {
        base: lin2.base_solution().clone(),
        orders,
        positive_min: pos.min,
        masked_nodes,
        probes: n_probes,
        seeds: seeds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new_1d(0.0, 1.0, 17, 20, 1.0).unwrap()
    }

    fn model(grid: &SpaceTimeGrid, nl: &str) -> SemilinearModel {
        SemilinearModel {
            solver: Solver::heat(grid),
            nl: Nonlinearity::parse(nl).unwrap(),
            g: Field::zeros_slice(grid),
        }
    }

    #[test]
    fn ramped_constant_data_give_a_positive_solution() {
        let g = grid();
        let f = BoundaryTrace::from_fn(&g, |_, t| smooth_ramp(t, 0.1));
        let p = positive_solution(&Solver::heat(&g), None, &f).unwrap();
        assert!(p.min > 0.0);
        for amp in [0.5, 2.0, 10.0] {
            let q = Field::from_fn(&g, |x, t| amp * (1.0 + x[0] * t));
            assert!(positive_solution(&Solver::heat(&g), Some(&q), &f).unwrap().min > 0.0);
        }
    }

    #[test]
    fn zero_data_are_not_positive() {
        let g = grid();
        let r = positive_solution(&Solver::heat(&g), None, &BoundaryTrace::zeros(&g));
        assert!(matches!(r, Err(Error::CheckFailed(_))));
    }

    #[test]
    fn equal_models_give_zero_differences() {
        let g = grid();
        let m = model(&g, "(1+x*t)*u^3 + 0.5*u^2");
        let opts = TaylorOptions {
            order: 2,
            ..Default::default()
        };
        let r = recover_taylor(&m, &m, &BoundaryTrace::zeros(&g), &opts, None).unwrap();
        for o in &r.orders {
            assert!(o.recovered.max_abs() < 1e-12);
        }
        assert_eq!(r.difference_table().order(), 2);
    }

    #[test]
    fn quadratic_difference_has_the_right_mean() {
        let g = grid();
        let c = 0.7;
        let opts = TaylorOptions {
            order: 2,
            ..Default::default()
        };
        let r = recover_taylor(&model(&g, "0.7*u^2"), &model(&g, "0"), &BoundaryTrace::zeros(&g), &opts, None).unwrap();
        let mean = r.orders[1].recovered.integral() / g.measure();
        assert!((mean - 2.0 * c).abs() <= 0.15 * 2.0 * c, "mean {mean}");
        assert!(r.orders[0].recovered.l2() < 1e-3);
    }

    #[test]
    fn division_masks_the_initial_level() {
        let g = grid();
        let opts = TaylorOptions {
            order: 2,
            inversion: TaylorInversion::DivideByProduct,
            ..Default::default()
        };
        let r = recover_taylor(&model(&g, "0.7*u^2"), &model(&g, "0"), &BoundaryTrace::zeros(&g), &opts, None).unwrap();
        assert_eq!(r.masked_nodes[0], 0);
        assert!(r.masked_nodes[1] >= g.n_space());
        assert!(!r.orders[1].warnings.is_empty());
    }

    #[test]
    fn rejects_bad_orders() {
        let g = grid();
        let m = model(&g, "u^3");
        for order in [0, MAX_ORDER + 1] {
            let opts = TaylorOptions {
                order,
                ..Default::default()
            };
            assert!(recover_taylor(&m, &m, &BoundaryTrace::zeros(&g), &opts, None).is_err());
        }
    }
}
