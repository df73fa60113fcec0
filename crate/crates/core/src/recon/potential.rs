//! Potential-difference recovery from CGO boundary data.
//!
//! For a forward profile pair `W₁, W₂` (true and reference potential, same
//! lateral data) and a backward reference profile `W̃`, the difference
//! `D = W₁ − W₂` solves the reference profile equation with source
//! `(q₂ − q₁)W₁` and zero data, so
//!
//! ```text
//! −∫_Σ W̃ ∂_ν D = ∫_Q (q₂ − q₁) W₁ W̃
//! ```
//!
//! The left side is assembled from measured normal derivatives. The right
//! side is evaluated with the discrete adjoint of the reference solve seeded
//! by the same boundary quadrature, which makes the identity exact on the
//! grid; `W₁` is replaced by its Born approximation and refined by
//! re-solving with the current estimate.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgo::{self, CGOParameters, CGOSolution};
use crate::dnmap::{self, add_noise, DNMeasurement, NoiseModel};
use crate::error::{Error, Result};
use crate::forward::{Solver, SolverOptions};
use crate::grid::{BoundaryPortion, BoundaryTrace, ComplexField, Face, Field, SpaceTimeGrid};

use super::{dot, flux_adjoint, relative_error, tikhonov, ReconstructionResult, Regularization, TrigBasis};

/// Source of profile-form measurements for forward CGO data.
pub trait ProfileOracle: Sync {
    fn grid(&self) -> &SpaceTimeGrid;
    /// Normal derivatives (real and imaginary parts) of the true profile for
    /// the lateral data of `params`, on `portion`.
    fn measure(&self, params: &CGOParameters, portion: &BoundaryPortion) -> Result<(DNMeasurement, DNMeasurement)>;
}

/// Measurements synthesized from a known potential.
#[derive(Debug, Clone)]
pub struct SyntheticTwin {
    pub grid: SpaceTimeGrid,
    pub q_true: Option<Field>,
    pub solver: SolverOptions,
    pub noise: Option<(NoiseModel, f64, u64)>,
}

impl SyntheticTwin {
    pub fn new(grid: &SpaceTimeGrid, q_true: Option<Field>) -> Self {
        Self {
            grid: *grid,
            q_true,
            solver: SolverOptions::default(),
            noise: None,
        }
    }
}

impl ProfileOracle for SyntheticTwin {
    fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    fn measure(&self, params: &CGOParameters, portion: &BoundaryPortion) -> Result<(DNMeasurement, DNMeasurement)> {
        let s = cgo::build(&self.grid, self.q_true.as_ref(), params, self.solver)?;
        let mut re = dnmap::measure(&s.profile.re, portion)?;
        let mut im = dnmap::measure(&s.profile.im, portion)?;
        if let Some((model, level, seed)) = self.noise {
            // derive a per-sample seed so that samples see independent noise
            let tag = (params.xi[0].to_bits() ^ params.xi[1].to_bits().rotate_left(21) ^ params.tau.to_bits().rotate_left(42))
                .wrapping_add(params.omega[0].to_bits().rotate_left(7) ^ params.rho.to_bits());
            re = add_noise(&re, model, level, seed ^ tag)?;
            im = add_noise(&im, model, level, seed ^ tag.rotate_left(1) ^ 1)?;
        }
        Ok((re, im))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PotentialMode {
    Full,
    /// Backward solutions vanish on `Γ₊,ω,ε`; data are only needed on the
    /// remaining faces.
    Partial { aperture: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialOptions {
    /// Carrier strengths; empty selects `{4}` in 2D and `{0.5, 1, …, 16}` in 1D,
    /// where only temporal frequencies are available and the spatial
    /// information comes from the ρ-dependence of the profiles.
    pub rhos: Vec<f64>,
    /// Highest spatial lattice index per axis.
    pub space_modes: usize,
    /// Highest temporal lattice index.
    pub time_modes: usize,
    /// Relative Tikhonov weight `λ = α·σ_max²`; `None` selects `1e-10` in 2D
    /// and `1e-6` in 1D, where the ρ-only system is far worse conditioned.
    pub alpha: Option<f64>,
    pub born_iterations: usize,
    pub mode: PotentialMode,
    pub solver: SolverOptions,
    /// Relative remainder size `‖z‖/‖θ‖` above which a warning is attached.
    pub remainder_warning: f64,
}

impl Default for PotentialOptions {
    fn default() -> Self {
        Self {
            rhos: Vec::new(),
            space_modes: 2,
            time_modes: 2,
            alpha: None,
            born_iterations: 2,
            mode: PotentialMode::Full,
            solver: SolverOptions::default(),
            remainder_warning: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FourierSample {
    pub xi: [f64; 2],
    pub tau: f64,
    pub omega: [f64; 2],
    pub rho: f64,
    /// The boundary functional, an approximation of the Fourier transform of
    /// the potential difference at `(ξ, τ)` weighted by the product symbol.
    pub value: Complex64,
    pub remainder_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FourierSampleSet {
    pub samples: Vec<FourierSample>,
    /// `|d(−ξ,−τ) − conj d(ξ,τ)| / |d(ξ,τ)|` at one mirrored sample.
    pub conjugate_defect: Option<f64>,
}

/// Half lattice of `(ξ, τ)` (the mirror `(−ξ, −τ)` is redundant for real
/// potentials) with both unit vectors `±ω ⊥ ξ`.
pub fn lattice(grid: &SpaceTimeGrid, space_modes: usize, time_modes: usize) -> Vec<([f64; 2], f64, [f64; 2])> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let (lo, hi) = (grid.lower(), grid.upper());
    let sk = space_modes as i64;
    let tk = time_modes as i64;
    // in 1D the only frequency orthogonal to ω = ±1 is ξ = 0
    let (kx_range, ky_range) = if grid.dim() == 2 { (-sk..=sk, -sk..=sk) } else { (0..=0, 0..=0) };
    let mut out = Vec::new();
    for m in -tk..=tk {
        for k2 in ky_range.clone() {
            for k1 in kx_range.clone() {
                // keep the lexicographically nonnegative half
                let key = [m, k2, k1];
                if key.iter().find(|v| **v != 0).is_some_and(|v| *v < 0) {
                    continue;
                }
                let xi = [
                    two_pi * k1 as f64 / (hi[0] - lo[0]),
                    if grid.dim() == 2 {
                        two_pi * k2 as f64 / (hi[1] - lo[1])
                    } else {
                        0.0
                    },
                ];
                let tau = two_pi * m as f64 / grid.horizon();
                let n = xi[0].hypot(xi[1]);
                let w = if n > 0.0 { [-xi[1] / n, xi[0] / n] } else { [1.0, 0.0] };
                out.push((xi, tau, w));
                out.push((xi, tau, [-w[0], -w[1]]));
            }
        }
    }
    out
}

fn portion_for(grid: &SpaceTimeGrid, mode: PotentialMode, omega: [f64; 2]) -> BoundaryPortion {
    match mode {
        PotentialMode::Full => BoundaryPortion::Full,
        PotentialMode::Partial { aperture } => {
            let faces: Vec<Face> = grid
                .faces()
                .into_iter()
                .filter(|f| {
                    let nu = f.normal();
                    nu[0] * omega[0] + nu[1] * omega[1] <= aperture
                })
                .collect();
            BoundaryPortion::Faces { faces }
        }
    }
}

/// Everything shared by the samples of one `(ω, ρ)` group.
struct Group {
    omega: [f64; 2],
    rho: f64,
    portion: BoundaryPortion,
    backward: CGOSolution,
    /// Boundary functional weights `−w·W̃` per (entry, level).
    weights: Vec<f64>,
    /// Discrete adjoint: the functional equals `Σ adjoint · source`.
    adjoint: Field,
}

fn same_direction(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
}

fn build_group(
    grid: &SpaceTimeGrid,
    q_ref: Option<&Field>,
    omega: [f64; 2],
    rho: f64,
    opts: &PotentialOptions,
) -> Result<Group> {
    let mut bp = CGOParameters::backward(rho, omega);
    if let PotentialMode::Partial { aperture } = opts.mode {
        bp = bp.with_aperture(aperture);
    }
    let backward = cgo::build(grid, q_ref, &bp, opts.solver)?;
    let portion = portion_for(grid, opts.mode, omega);
    let probe = dnmap::measure(&backward.profile.re, &portion)?;
    let entries = probe.entries().to_vec();
    let w = probe.weights();
    let ne = entries.len();
    let mut weights = vec![0.0; w.len()];
    for n in 0..grid.n_levels() {
        for (e, entry) in entries.iter().enumerate() {
            weights[n * ne + e] = -w[n * ne + e] * backward.profile.re.at(entry.node, n);
        }
    }
    let fp = CGOParameters::forward(rho, omega, [0.0, 0.0], 0.0);
    let solver = cgo::profile_solver(grid, &fp, opts.solver)?;
    let adjoint = flux_adjoint(&solver, q_ref, &entries, &weights)?;
    Ok(Group {
        omega,
        rho,
        portion,
        backward,
        weights,
        adjoint,
    })
}

fn functional(weights: &[f64], m: &DNMeasurement) -> f64 {
    weights.iter().zip(m.values()).map(|(w, v)| w * v).sum()
}

struct Sample {
    params: CGOParameters,
    group: usize,
    datum: Complex64,
    remainder: f64,
    theta_norm: f64,
}

/// Recovers `q₂ − q₁`, with `q₂ = q_ref` the reference potential and `q₁` the
/// potential behind the oracle's measurements.
pub fn recover_potential(
    oracle: &dyn ProfileOracle,
    q_ref: Option<&Field>,
    opts: &PotentialOptions,
    truth: Option<&Field>,
) -> Result<(ReconstructionResult, FourierSampleSet)> {
    let grid = *oracle.grid();
    if let Some(q) = q_ref {
        if q.grid() != &grid {
            return Err(Error::invalid("reference potential lives on a different grid"));
        }
    }
    let rhos = if !opts.rhos.is_empty() {
        opts.rhos.clone()
    } else if grid.dim() == 2 {
        vec![4.0]
    } else {
        vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
    };
    let alpha = opts.alpha.unwrap_or(if grid.dim() == 2 { 1e-10 } else { 1e-6 });
    if !(alpha >= 0.0) {
        return Err(Error::invalid("Tikhonov weight must be nonnegative"));
    }
    if rhos.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("ρ values must be positive"));
    }
    let points = lattice(&grid, opts.space_modes, opts.time_modes);
    let basis = TrigBasis::new(&grid, opts.space_modes, opts.time_modes);
    let n_samples = points.len() * rhos.len();
    if 2 * n_samples < basis.len() {
        return Err(Error::invalid(format!(
            "under-resolved lattice: {} real samples for {} basis functions",
            2 * n_samples,
            basis.len()
        )));
    }

    let mut keys: Vec<([f64; 2], f64)> = Vec::new();
    for &(_, _, w) in &points {
        for &rho in &rhos {
            if !keys.iter().any(|(o, r)| same_direction(*o, w) && *r == rho) {
                keys.push((w, rho));
            }
        }
    }
    let groups = keys
        .par_iter()
        .map(|&(w, rho)| build_group(&grid, q_ref, w, rho, opts))
        .collect::<Result<Vec<_>>>()?;

    let specs: Vec<(CGOParameters, usize)> = points
        .iter()
        .flat_map(|&(xi, tau, w)| {
            let groups = &groups;
            rhos.iter().map(move |&rho| {
                let g = groups
                    .iter()
                    .position(|g| same_direction(g.omega, w) && g.rho == rho)
                    .expect("group exists for every direction and ρ");
                (CGOParameters::forward(rho, w, xi, tau), g)
            })
        })
        .collect();

    let reference: Vec<(Sample, CGOSolution)> = specs
        .par_iter()
        .map(|&(params, gi)| {
            let g = &groups[gi];
            let w2 = cgo::build(&grid, q_ref, &params, opts.solver)?;
            let m2re = dnmap::measure(&w2.profile.re, &g.portion)?;
            let m2im = dnmap::measure(&w2.profile.im, &g.portion)?;
            let (m1re, m1im) = oracle.measure(&params, &g.portion)?;
            let datum = Complex64::new(
                functional(&g.weights, &m1re.sub(&m2re)?),
                functional(&g.weights, &m1im.sub(&m2im)?),
            );
            let sample = Sample {
                params,
                group: gi,
                datum,
                remainder: w2.remainder_norm,
                theta_norm: w2.theta.l2(),
            };
            Ok((sample, w2))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    let worst = reference
        .iter()
        .map(|(s, _)| s.remainder / s.theta_norm.max(f64::MIN_POSITIVE))
        .fold(0.0f64, f64::max);
    if worst > opts.remainder_warning {
        warnings.push(format!("large CGO remainders: max ‖z‖/‖θ‖ = {worst:.2}"));
    }
    for g in &groups {
        for w in &g.backward.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
    }

    let basis_fields = basis.fields();
    let rhs: Vec<f64> = reference
        .iter()
        .flat_map(|(s, _)| [s.datum.re, s.datum.im])
        .collect();
    let data_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();

    let assemble = |profiles: &[ComplexField]| -> Vec<Vec<f64>> {
        reference
            .par_iter()
            .zip(profiles)
            .flat_map_iter(|((s, _), w1)| {
                let adj = &groups[s.group].adjoint;
                let pre = adj.mul(&w1.re);
                let pim = adj.mul(&w1.im);
                let row_re: Vec<f64> = basis_fields.iter().map(|b| dot(&pre, b)).collect();
                let row_im: Vec<f64> = basis_fields.iter().map(|b| dot(&pim, b)).collect();
                [row_re, row_im]
            })
            .collect()
    };

    let mut profiles: Vec<ComplexField> = reference.iter().map(|(_, w)| w.profile.clone()).collect();
    let mut ls = tikhonov(&assemble(&profiles), &rhs, alpha)?;
    let mut estimate = basis.synthesize(&ls.coeffs);
    for _ in 0..opts.born_iterations {
        let q1 = match q_ref {
            Some(q) => q.sub(&estimate),
            None => estimate.scaled(-1.0),
        };
        profiles = reference
            .par_iter()
            .map(|(s, _)| Ok(cgo::build(&grid, Some(&q1), &s.params, opts.solver)?.profile))
            .collect::<Result<Vec<_>>>()?;
        ls = tikhonov(&assemble(&profiles), &rhs, alpha)?;
        estimate = basis.synthesize(&ls.coeffs);
    }

    let conjugate_defect = match reference.iter().find(|(s, _)| s.params.tau != 0.0 || s.params.xi != [0.0, 0.0]) {
        Some((s, _)) => {
            let g = &groups[s.group];
            let mirror = CGOParameters {
                xi: [-s.params.xi[0], -s.params.xi[1]],
                tau: -s.params.tau,
                ..s.params
            };
            let w2 = cgo::build(&grid, q_ref, &mirror, opts.solver)?;
            let (m1re, m1im) = oracle.measure(&mirror, &g.portion)?;
            let d = Complex64::new(
                functional(&g.weights, &m1re.sub(&dnmap::measure(&w2.profile.re, &g.portion)?)?),
                functional(&g.weights, &m1im.sub(&dnmap::measure(&w2.profile.im, &g.portion)?)?),
            );
            let scale = s.datum.norm();
            Some(if scale > 0.0 { (d - s.datum.conj()).norm() / scale } else { (d - s.datum.conj()).norm() })
        }
        None => None,
    };

    let samples = FourierSampleSet {
        samples: reference
            .iter()
            .map(|(s, _)| FourierSample {
                xi: s.params.xi,
                tau: s.params.tau,
                omega: s.params.omega,
                rho: s.params.rho,
                value: s.datum,
                remainder_norm: s.remainder,
            })
            .collect(),
        conjugate_defect,
    };
    let result = ReconstructionResult {
        relative_error: truth.map(|t| relative_error(&estimate, t)),
        recovered: estimate,
        residual_norm: ls.residual,
        data_norm,
        regularization: Regularization {
            method: "tikhonov-trigonometric-synthesis".into(),
            parameter: ls.lambda,
            rule: format!("relative weight {alpha:e} of the largest squared singular value"),
        },
        iterations: opts.born_iterations + 1,
        converged: true,
        warnings,
    };
    Ok((result, samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReciprocityReport {
    /// `∫_Q (q₂ − q₁) v₁ ṽ₂`.
    pub volume: f64,
    /// `−∫_Σ ṽ₂ ∂_ν(v₁ − v₂)`.
    pub boundary: f64,
    /// `|volume − boundary| / max(|volume|, |boundary|)`.
    pub relative_gap: f64,
}

/// Compares both sides of the potential-difference identity for forward
/// solutions `v₁, v₂` (potentials `q₁, q₂`, lateral data `f`) and the
/// backward solution `ṽ₂` (potential `q₂`, lateral data `f̃`, zero terminal data).
pub fn reciprocity(
    solver: &Solver,
    q1: &Field,
    q2: &Field,
    f: &BoundaryTrace,
    f_tilde: &BoundaryTrace,
) -> Result<ReciprocityReport> {
    let grid = solver.grid();
    let zero = Field::zeros_slice(grid);
    let v1 = solver.solve_linear(Some(q1), f, &zero, None)?.solution;
    let v2 = solver.solve_linear(Some(q2), f, &zero, None)?.solution;
    let vt = solver.solve_backward(Some(q2), &zero, f_tilde, None)?.solution;
    let volume = q2.sub(q1).mul(&v1).mul(&vt).integral();
    let m = dnmap::measure(&v1.sub(&v2), &BoundaryPortion::Full)?;
    let ne = m.entries().len();
    let w = m.weights();
    let mut boundary = 0.0;
    for n in 0..grid.n_levels() {
        for (e, entry) in m.entries().iter().enumerate() {
            boundary -= w[n * ne + e] * vt.at(entry.node, n) * m.at(e, n);
        }
    }
    let scale = volume.abs().max(boundary.abs());
    Ok(ReciprocityReport {
        volume,
        boundary,
        relative_gap: if scale > 0.0 { (volume - boundary).abs() / scale } else { 0.0 },
    })
}
