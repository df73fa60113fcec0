//! Initial-data recovery from passive boundary measurements.
//!
//! Minimizes `½‖Λ(g) − d‖²_{L²(Γ₀×(0,T))} + ½α‖g‖²_{L²(Ω)}` over interior
//! nodal values of `g` by Gauss–Newton with conjugate-gradient inner solves.
//! Jacobian products are linear solves of the linearized equation and their
//! transposes come from the discrete adjoint of the same scheme.

use rayon::prelude::*;
use serde::Serialize;

use crate::dnmap::{self, DNMeasurement, NoiseModel};
use crate::error::{Error, Result};
use crate::forward::{Solver, Strategy};
use crate::grid::{BoundaryEntry, BoundaryPortion, BoundaryTrace, Field, SpaceTimeGrid};
use crate::model::Nonlinearity;

use super::{flux_seed, relative_error, ReconstructionResult, Regularization};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialOptions {
    /// Fixed weight relative to the largest eigenvalue of the Gauss–Newton
    /// matrix. `None` applies the discrepancy principle when the data carry a
    /// noise record and `alpha_floor` otherwise.
    pub alpha: Option<f64>,
    pub alpha_floor: f64,
    /// First weight and geometric ratio of the discrepancy search.
    pub alpha_start: f64,
    pub alpha_ratio: f64,
    /// Accept the first weight whose misfit is below `discrepancy·δ`.
    pub discrepancy: f64,
    pub cg_max_iter: usize,
    pub cg_tol: f64,
    pub gauss_newton: usize,
    pub strategy: Strategy,
}

impl Default for InitialOptions {
    fn default() -> Self {
        Self {
            alpha: None,
            alpha_floor: 1e-10,
            alpha_start: 1e-1,
            alpha_ratio: 0.3,
            discrepancy: 1.1,
            cg_max_iter: 300,
            cg_tol: 1e-10,
            gauss_newton: 8,
            strategy: Strategy::Newton,
        }
    }
}

struct Problem<'a> {
    solver: &'a Solver,
    nl: &'a Nonlinearity,
    data: &'a DNMeasurement,
    portion: BoundaryPortion,
    entries: Vec<BoundaryEntry>,
    weights: Vec<f64>,
    interior: Vec<usize>,
    mass: Vec<f64>,
    strategy: Strategy,
}

impl Problem<'_> {
    fn grid(&self) -> &SpaceTimeGrid {
        self.solver.grid()
    }

    fn to_field(&self, x: &[f64]) -> Field {
        let mut g = Field::zeros_slice(self.grid());
        for (v, &k) in x.iter().zip(&self.interior) {
            g.values_mut()[k] = *v;
        }
        g
    }

    /// Solution, measurement and linearization potential at `x`.
    fn forward(&self, x: &[f64]) -> Result<(DNMeasurement, Option<Field>)> {
        let f = BoundaryTrace::zeros(self.grid());
        let u = self
            .solver
            .solve_semilinear(self.nl, &f, &self.to_field(x), self.strategy)?
            .solution;
        let q = if self.nl.is_zero() {
            None
        } else {
            Some(self.solver.derivative_field(self.nl, &u, 1)?)
        };
        Ok((dnmap::measure(&u, &self.portion)?, q))
    }

    fn jac(&self, q: Option<&Field>, x: &[f64]) -> Result<Vec<f64>> {
        let f = BoundaryTrace::zeros(self.grid());
        let u = self.solver.solve_linear(q, &f, &self.to_field(x), None)?.solution;
        Ok(dnmap::measure(&u, &self.portion)?.values().to_vec())
    }

    /// `Jᵀ W r` on interior nodes.
    fn jac_t(&self, q: Option<&Field>, r: &[f64]) -> Result<Vec<f64>> {
        let coeffs: Vec<f64> = r.iter().zip(&self.weights).map(|(a, w)| a * w).collect();
        let seed = flux_seed(self.grid(), &self.entries, &coeffs)?;
        let g = self.solver.vjp_linear(q, &seed)?.g;
        Ok(self.interior.iter().map(|&k| g.values()[k]).collect())
    }

    fn gauss_newton_op(&self, q: Option<&Field>, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
        let jx = self.jac(q, x)?;
        let mut y = self.jac_t(q, &jx)?;
        for ((yi, xi), m) in y.iter_mut().zip(x).zip(&self.mass) {
            *yi += alpha * m * xi;
        }
        Ok(y)
    }

    fn misfit(&self, m: &DNMeasurement) -> f64 {
        m.values()
            .iter()
            .zip(self.data.values())
            .zip(&self.weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest eigenvalue of `M⁻¹JᵀWJ` at `g = 0` by power iteration.
    fn spectral_scale(&self, q: Option<&Field>) -> Result<f64> {
        let mut x: Vec<f64> = (0..self.interior.len()).map(|i| 1.0 + 0.1 * (i % 7) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..20 {
            let y = self.gauss_newton_op(q, 0.0, &x)?;
            let z: Vec<f64> = y.iter().zip(&self.mass).map(|(a, m)| a / m).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(0.0);
            }
            lambda = norm / xn;
            x = z.into_iter().map(|v| v / norm).collect();
        }
        Ok(lambda)
    }
}

struct CgOutcome {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<CgOutcome> {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let b_norm = dot(b, b).sqrt();
    let mut rr = dot(&r, &r);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            converged: true,
        });
    }
    for it in 0..max_iter {
        if rr.sqrt() <= tol * b_norm {
            return Ok(CgOutcome {
                x,
                iterations: it,
                converged: true,
            });
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let a = rr / pap;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(CgOutcome {
        converged: rr.sqrt() <= tol * b_norm,
        x,
        iterations: max_iter,
    })
}

struct Fit {
    x: Vec<f64>,
    misfit: f64,
    iterations: usize,
    converged: bool,
}

fn fit(p: &Problem, alpha_rel: f64, scale: f64, start: &[f64], opts: &InitialOptions) -> Result<Fit> {
    let alpha = alpha_rel * scale;
    let mut x = start.to_vec();
    let linear = p.nl.is_zero() || p.nl.is_affine();
    let mut iterations = 0;
    let mut converged = true;
    let steps = if linear { 1 } else { opts.gauss_newton.max(1) };
    for _ in 0..steps {
        let (m, q) = p.forward(&x)?;
        let r: Vec<f64> = p.data.values().iter().zip(m.values()).map(|(d, v)| d - v).collect();
        let mut b = p.jac_t(q.as_ref(), &r)?;
        for ((bi, xi), w) in b.iter_mut().zip(&x).zip(&p.mass) {
            *bi -= alpha * w * xi;
        }
        let cg = conjugate_gradient(|v| p.gauss_newton_op(q.as_ref(), alpha, v), &b, opts.cg_max_iter, opts.cg_tol)?;
        iterations += cg.iterations;
        converged &= cg.converged;
        let step = cg.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let size = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (xi, d) in x.iter_mut().zip(&cg.x) {
            *xi += d;
        }
        if step <= 1e-10 * size.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let misfit = p.misfit(&p.forward(&x)?.0);
    Ok(Fit {
        x,
        misfit,
        iterations,
        converged,
    })
}

/// Expected `L²` norm of the recorded measurement noise.
pub fn noise_norm(m: &DNMeasurement) -> Option<f64> {
    m.noise()
        .filter(|n| n.sigma > 0.0)
        .map(|n| n.sigma * m.weights().iter().sum::<f64>().sqrt())
}

/// Recovers `g` from the passive measurement `data` (taken with `f = 0`).
pub fn recover_initial(
    solver: &Solver,
    nl: &Nonlinearity,
    data: &DNMeasurement,
    opts: &InitialOptions,
    truth: Option<&Field>,
) -> Result<ReconstructionResult> {
    let grid = *solver.grid();
    if data.grid() != &grid {
        return Err(Error::invalid("measurement lives on a different grid"));
    }
    if !(opts.alpha_ratio > 0.0 && opts.alpha_ratio < 1.0) {
        return Err(Error::invalid("discrepancy search ratio must lie in (0, 1)"));
    }
    let interior = grid.interior_nodes();
    let sw = grid.space_weights();
    let p = Problem {
        solver,
        nl,
        data,
        portion: data.portion().clone(),
        entries: data.entries().to_vec(),
        weights: data.weights(),
        mass: interior.iter().map(|&k| sw[k]).collect(),
        interior,
        strategy: opts.strategy,
    };
    let q0 = p.forward(&vec![0.0; p.interior.len()])?.1;
    let scale = p.spectral_scale(q0.as_ref())?;
    let data_norm = data.norm();
    let noise = noise_norm(data);
    let mut warnings = Vec::new();

    let start = vec![0.0; p.interior.len()];
    let (best, alpha_rel, rule) = match (opts.alpha, noise) {
        (Some(a), _) => (fit(&p, a, scale, &start, opts)?, a, "fixed".to_string()),
        (None, None) => (
            fit(&p, opts.alpha_floor, scale, &start, opts)?,
            opts.alpha_floor,
            "regularization floor (noiseless data)".to_string(),
        ),
        (None, Some(delta)) => {
            let target = opts.discrepancy * delta;
            let mut a = opts.alpha_start;
            let mut current = fit(&p, a, scale, &start, opts)?;
            while current.misfit > target && a * opts.alpha_ratio >= opts.alpha_floor {
                a *= opts.alpha_ratio;
                current = fit(&p, a, scale, &current.x, opts)?;
            }
            if current.misfit > target {
                warnings.push(format!(
                    "discrepancy {:.3e} not reached at the weight floor (misfit {:.3e})",
                    target, current.misfit
                ));
            }
            (current, a, format!("discrepancy principle, tau = {}, noise norm {delta:.3e}", opts.discrepancy))
        }
    };
    if !best.converged {
        warnings.push("conjugate-gradient iteration stopped before reaching its tolerance".into());
    }
    let recovered = p.to_field(&best.x);
    Ok(ReconstructionResult {
        relative_error: truth.map(|t| relative_error(&recovered, t)),
        recovered,
        residual_norm: best.misfit,
        data_norm,
        regularization: Regularization {
            method: "tikhonov-gauss-newton-cg".into(),
            parameter: alpha_rel * scale,
            rule,
        },
        iterations: best.iterations,
        converged: best.converged,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityPoint {
    pub delta: f64,
    pub trial: usize,
    /// `‖g_rec − g‖_{L²(Ω)}`.
    pub error: f64,
    /// Size `m` of the measurement perturbation.
    pub dn_diff_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCurve {
    pub points: Vec<StabilityPoint>,
    /// Error of the noiseless reconstruction.
    pub floor: f64,
    /// Spearman correlation between noise level and error.
    pub rank_correlation: f64,
    /// Fit `error ≈ c1·m + c2/|ln(δ₀m)|` with `δ₀ ∈ (0, 1)`.
    pub c1: f64,
    pub c2: f64,
    pub delta0: f64,
    pub two_term_residual: f64,
    /// Fit `error ≈ c·m`.
    pub linear_coef: f64,
    pub linear_residual: f64,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Least squares for `y ≈ Σ c_j b_j`, returning coefficients and residual norm.
fn small_lsq(basis: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let a = nalgebra::DMatrix::from_fn(y.len(), basis.len(), |i, j| basis[j][i]);
    let b = nalgebra::DVector::from_column_slice(y);
    let c = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .unwrap_or_else(|_| nalgebra::DVector::zeros(basis.len()));
    let res = (&a * &c - &b).norm();
    (c.iter().copied().collect(), res)
}

/// Reconstruction error against relative noise levels `deltas`, with
/// `trials` independent noise draws per level.
#[allow(clippy::too_many_arguments)]
pub fn stability_curve(
    solver: &Solver,
    nl: &Nonlinearity,
    g_true: &Field,
    portion: &BoundaryPortion,
    deltas: &[f64],
    trials: usize,
    seed: u64,
    opts: &InitialOptions,
) -> Result<StabilityCurve> {
    if deltas.is_empty() || trials == 0 {
        return Err(Error::invalid("stability curve needs noise levels and trials"));
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("noise levels must be positive"));
    }
    let clean = dnmap::passive_map(solver, nl, g_true, portion, opts.strategy)?;
    let floor = recover_initial(solver, nl, &clean, opts, None)?.recovered.sub(g_true).l2();
    let jobs: Vec<(usize, usize)> = (0..deltas.len()).flat_map(|i| (0..trials).map(move |t| (i, t))).collect();
    let points = jobs
        .par_iter()
        .map(|&(i, trial)| {
            let delta = deltas[i];
            let s = seed.wrapping_add((i * trials + trial) as u64 * 0x9E37_79B9);
            let noisy = dnmap::add_noise(&clean, NoiseModel::GaussianRelative, delta, s)?;
            let r = recover_initial(solver, nl, &noisy, opts, None)?;
            Ok(StabilityPoint {
                delta,
                trial,
                error: r.recovered.sub(g_true).l2(),
                dn_diff_norm: noisy.sub(&clean)?.norm(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let d: Vec<f64> = points.iter().map(|p| p.delta).collect();
    let e: Vec<f64> = points.iter().map(|p| p.error).collect();
    let m: Vec<f64> = points.iter().map(|p| p.dn_diff_norm).collect();
    let rank_correlation = spearman(&d, &e);
    let (lin, linear_residual) = small_lsq(std::slice::from_ref(&m), &e);
    let m_max = m.iter().copied().fold(0.0, f64::max);
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    // δ₀ ∈ (0, 1) on a log grid keeping δ₀m < 1 for every sample
    let top = 1f64.min(1.0 / m_max);
    for k in 1..=60 {
        let delta0 = top * 10f64.powf(-(k as f64) / 6.0);
        let inv: Vec<f64> = m.iter().map(|v| 1.0 / (delta0 * v).ln().abs()).collect();
        let (c, res) = small_lsq(&[m.clone(), inv], &e);
        if res < best.0 {
            best = (res, c[0], c[1], delta0);
        }
    }
    Ok(StabilityCurve {
        points,
        floor,
        rank_correlation,
        c1: best.1,
        c2: best.2,
        delta0: best.3,
        two_term_residual: best.0,
        linear_coef: lin[0],
        linear_residual,
    })
}
