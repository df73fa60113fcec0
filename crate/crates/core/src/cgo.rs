//! Complex geometrical optics solutions in factored form.
//!
//! A forward solution of `u_t − Δu + qu = 0` is `u = ψ₋(θ₊ + z₊)` with
//! `ψ₋ = exp(ρω·x + ρ²t)`; a backward solution of `−u_t − Δu + qu = 0` is
//! `u = ψ₊(θ₋ + z₋)` with `ψ₊ = 1/ψ₋`. Substituting the ansatz removes the
//! carrier: the profile `W = θ + z` solves
//!
//! ```text
//! forward:   W_t − ΔW − 2ρω·∇W + qW = 0,  W(·,0) = 0
//! backward: −W_t − ΔW + 2ρω·∇W + qW = 0,  W(·,T) = 0
//! ```
//!
//! with `W = θ` on the lateral boundary (or `W = 0` on the portion where the
//! partial-data variant asks the solution to vanish). Only profiles are
//! stored; carriers cancel in every product of a forward and a backward
//! solution.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Solver, SolverOptions};
use crate::grid::{BoundaryPortion, BoundaryTrace, ComplexField, Field, Sign, SpaceTimeGrid};
use crate::model::DiffusionTensor;

/// Largest exponent a materialized carrier may reach.
pub const MAX_EXPONENT: f64 = 50.0;
/// Warning threshold for `ρ^{3/4}Δt`.
pub const RESOLUTION_LIMIT: f64 = 0.5;
pub const DEFAULT_SWEEP: [f64; 4] = [8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CGOParameters {
    pub rho: f64,
    pub omega: [f64; 2],
    pub xi: [f64; 2],
    pub tau: f64,
    pub direction: Direction,
    /// `None` for the full-data variant; `Some(ε)` makes the solution vanish
    /// on `Γ₋,ω,ε` (forward) or `Γ₊,ω,ε` (backward).
    pub aperture: Option<f64>,
}

impl CGOParameters {
    pub fn forward(rho: f64, omega: [f64; 2], xi: [f64; 2], tau: f64) -> Self {
        Self {
            rho,
            omega,
            xi,
            tau,
            direction: Direction::Forward,
            aperture: None,
        }
    }

    pub fn backward(rho: f64, omega: [f64; 2]) -> Self {
        Self {
            rho,
            omega,
            xi: [0.0, 0.0],
            tau: 0.0,
            direction: Direction::Backward,
            aperture: None,
        }
    }

    pub fn with_aperture(mut self, eps: f64) -> Self {
        self.aperture = Some(eps);
        self
    }

    /// The boundary-layer rate `ρ^{3/4}`.
    pub fn kappa(&self) -> f64 {
        self.rho.powf(0.75)
    }

    pub fn validate(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("ρ must be positive and finite"));
        }
        let [w0, w1] = self.omega;
        if ((w0 * w0 + w1 * w1).sqrt() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("ω = {:?} is not a unit vector", self.omega)));
        }
        if grid.dim() == 1 && (w1 != 0.0 || self.xi[1] != 0.0) {
            return Err(Error::invalid("1D parameters must have zero second components"));
        }
        let xn = self.xi[0].hypot(self.xi[1]);
        let dot = self.xi[0] * w0 + self.xi[1] * w1;
        if dot.abs() > 1e-12 * (1.0 + xn) {
            return Err(Error::invalid(format!("ξ·ω = {dot:e} must vanish")));
        }
        if !self.tau.is_finite() || !xn.is_finite() {
            return Err(Error::invalid("frequencies must be finite"));
        }
        if let Some(eps) = self.aperture {
            if !(eps >= 0.0) {
                return Err(Error::invalid("aperture must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Drift of the profile operator in the solver's `b·∇u` convention.
    pub fn drift(&self) -> [f64; 2] {
        let s = match self.direction {
            Direction::Forward => -2.0 * self.rho,
            Direction::Backward => 2.0 * self.rho,
        };
        [s * self.omega[0], s * self.omega[1]]
    }

    /// Boundary portion on which the solution is made to vanish.
    pub fn vanishing_portion(&self) -> Option<BoundaryPortion> {
        self.aperture.map(|eps| {
            let sign = match self.direction {
                Direction::Forward => Sign::Minus,
                Direction::Backward => Sign::Plus,
            };
            BoundaryPortion::directional(self.omega, eps, sign)
        })
    }

    /// The profile `θ` at a point.
    pub fn theta(&self, x: [f64; 2], t: f64, horizon: f64) -> Complex64 {
        let k = self.kappa();
        match self.direction {
            Direction::Forward => {
                let phase = -(x[0] * self.xi[0] + x[1] * self.xi[1] + t * self.tau);
                Complex64::from_polar(1.0 - (-k * t).exp(), phase)
            }
            Direction::Backward => Complex64::new(1.0 - (-k * (horizon - t)).exp(), 0.0),
        }
    }

    /// Exponent of the carrier at a point: `ρω·x + ρ²t` for ψ₋ (forward),
    /// its negative for ψ₊ (backward).
    pub fn carrier_exponent(&self, x: [f64; 2], t: f64) -> f64 {
        let e = self.rho * (self.omega[0] * x[0] + self.omega[1] * x[1]) + self.rho * self.rho * t;
        match self.direction {
            Direction::Forward => e,
            Direction::Backward => -e,
        }
    }

    /// Relative heat-equation residual of the bare carrier at a point, from
    /// its closed-form derivatives `ψ_t = ±ρ²ψ` and `Δψ = ρ²|ω|²ψ`.
    pub fn carrier_residual(&self, x: [f64; 2], t: f64) -> f64 {
        let psi = self.carrier_exponent(x, t).exp();
        let r2 = self.rho * self.rho;
        let w2 = self.omega[0] * self.omega[0] + self.omega[1] * self.omega[1];
        // ∂_t ψ₋ = ρ²ψ₋ and −∂_t ψ₊ = ρ²ψ₊, so both reduce to ρ²ψ − Δψ
        let res = r2 * psi - r2 * w2 * psi;
        res.abs() / (r2 * psi)
    }
}

/// Which lateral condition the profile satisfies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    /// Boundary nodes where `W = 0`, i.e. `z = −θ`.
    pub vanishing_nodes: Vec<usize>,
    /// Remaining boundary nodes carry `W = θ`, i.e. `z = 0`.
    pub profile_nodes: usize,
}

#[derive(Debug, Clone)]
pub struct CGOSolution {
    pub params: CGOParameters,
    /// `θ + z` on Q.
    pub profile: ComplexField,
    pub theta: ComplexField,
    pub remainder_norm: f64,
    /// Max-norm of the scheme residual of the profile at interior nodes.
    pub residual: f64,
    pub boundary: BoundaryRecord,
    pub warnings: Vec<String>,
}

impl CGOSolution {
    pub fn remainder(&self) -> ComplexField {
        self.profile.sub(&self.theta)
    }

    /// `ψ·(θ + z)` on Q, refused when a carrier exponent exceeds the cap.
    pub fn materialize(&self) -> Result<ComplexField> {
        let grid = *self.profile.grid();
        let mut worst = f64::NEG_INFINITY;
        for n in 0..grid.n_levels() {
            for node in 0..grid.n_space() {
                worst = worst.max(self.params.carrier_exponent(grid.coord(node), grid.time(n)));
            }
        }
        if worst > MAX_EXPONENT {
            return Err(Error::invalid(format!(
                "carrier exponent {worst:.1} exceeds {MAX_EXPONENT}"
            )));
        }
        let carrier = Field::from_fn(&grid, |x, t| self.params.carrier_exponent(x, t).exp());
        Ok(self.profile.mul_real(&carrier))
    }
}

/// Solver for the profile operator of `params`.
pub fn profile_solver(grid: &SpaceTimeGrid, params: &CGOParameters, opts: SolverOptions) -> Result<Solver> {
    params.validate(grid)?;
    Solver::with_drift(grid, &DiffusionTensor::identity(), params.drift(), opts)
}

/// Lateral profile data: `θ` off the vanishing portion, zero on it.
fn lateral_data(grid: &SpaceTimeGrid, params: &CGOParameters) -> Result<(BoundaryTrace, BoundaryTrace, BoundaryRecord)> {
    let horizon = grid.horizon();
    let mut re = BoundaryTrace::from_fn(grid, |x, t| params.theta(x, t, horizon).re);
    let mut im = BoundaryTrace::from_fn(grid, |x, t| params.theta(x, t, horizon).im);
    let vanish = match params.vanishing_portion() {
        Some(p) => p.classify(grid)?,
        None => Default::default(),
    };
    let nodes = re.nodes().to_vec();
    let nb = nodes.len();
    for n in 0..grid.n_levels() {
        for (b, k) in nodes.iter().enumerate() {
            if vanish.contains(k) {
                re.values_mut()[n * nb + b] = 0.0;
                im.values_mut()[n * nb + b] = 0.0;
            }
        }
    }
    let record = BoundaryRecord {
        vanishing_nodes: vanish.iter().copied().collect(),
        profile_nodes: nb - vanish.len(),
    };
    Ok((re, im, record))
}

fn resolution_warnings(grid: &SpaceTimeGrid, params: &CGOParameters) -> Vec<String> {
    let mut w = Vec::new();
    let kdt = params.kappa() * grid.dt();
    if kdt > RESOLUTION_LIMIT {
        w.push(format!(
            "boundary layer unresolved in time: rho^(3/4)*dt = {kdt:.3} > {RESOLUTION_LIMIT}"
        ));
    }
    let peclet = (0..grid.dim())
        .map(|a| params.rho * params.omega[a].abs() * grid.spacing(a))
        .fold(0.0, f64::max);
    if peclet > 1.0 {
        w.push(format!("cell Peclet number {peclet:.3} > 1: drift unresolved in space"));
    }
    w
}

/// Builds a CGO solution for the potential `q` (zero when `None`).
pub fn build(grid: &SpaceTimeGrid, q: Option<&Field>, params: &CGOParameters, opts: SolverOptions) -> Result<CGOSolution> {
    if let Some(q) = q {
        if !q.is_finite() {
            return Err(Error::invalid("potential has non-finite values"));
        }
    }
    let solver = profile_solver(grid, params, opts)?;
    let (f_re, f_im, boundary) = lateral_data(grid, params)?;
    let zero = Field::zeros_slice(grid);
    let solve = |f: &BoundaryTrace| -> Result<Field> {
        Ok(match params.direction {
            Direction::Forward => solver.solve_linear(q, f, &zero, None)?.solution,
            Direction::Backward => solver.solve_backward(q, &zero, f, None)?.solution,
        })
    };
    let re = solve(&f_re)?;
    let im = if f_im.max_abs() == 0.0 {
        Field::zeros(grid)
    } else {
        solve(&f_im)?
    };
    let profile = ComplexField { re, im };
    let horizon = grid.horizon();
    let theta = ComplexField::from_fn(grid, |x, t| params.theta(x, t, horizon));
    let remainder_norm = profile.sub(&theta).l2();
    let residual = profile_residual(&solver, q, &profile, params.direction);
    Ok(CGOSolution {
        params: *params,
        profile,
        theta,
        remainder_norm,
        residual,
        boundary,
        warnings: resolution_warnings(grid, params),
    })
}

fn reverse(u: &Field) -> Field {
    let grid = u.grid();
    let nt = grid.steps();
    let mut out = Field::zeros(grid);
    for n in 0..=nt {
        out.level_mut(n).copy_from_slice(u.level(nt - n));
    }
    out
}

fn profile_residual(solver: &Solver, q: Option<&Field>, w: &ComplexField, direction: Direction) -> f64 {
    let res = |u: &Field| -> f64 {
        match direction {
            Direction::Forward => solver.scheme_residual(u, q, None).max_abs(),
            Direction::Backward => {
                // time-reversed fields satisfy the forward scheme; valid for
                // time-independent operators, which the identity tensor is
                let qr = q.map(reverse);
                solver.scheme_residual(&reverse(u), qr.as_ref(), None).max_abs()
            }
        }
    };
    res(&w.re).max(res(&w.im))
}

fn check_pair(fwd: &CGOParameters, bwd: &CGOParameters) -> Result<()> {
    if fwd.direction != Direction::Forward || bwd.direction != Direction::Backward {
        return Err(Error::invalid("expected a forward solution paired with a backward one"));
    }
    if fwd.rho != bwd.rho || fwd.omega != bwd.omega {
        return Err(Error::invalid("paired solutions must share ρ and ω"));
    }
    Ok(())
}

/// `φ_ρ(t) = 1 − e^{−κt} − e^{−κ(T−t)} + e^{−κT}`, `κ = ρ^{3/4}`.
pub fn phi(rho: f64, t: f64, horizon: f64) -> f64 {
    let k = rho.powf(0.75);
    1.0 - (-k * t).exp() - (-k * (horizon - t)).exp() + (-k * horizon).exp()
}

/// `φ_ρ(t)·e^{−i(x·ξ + tτ)}`, the leading part of a forward/backward product.
pub fn product_symbol(grid: &SpaceTimeGrid, fwd: &CGOParameters, bwd: &CGOParameters) -> Result<ComplexField> {
    check_pair(fwd, bwd)?;
    let horizon = grid.horizon();
    Ok(ComplexField::from_fn(grid, |x, t| {
        let phase = -(x[0] * fwd.xi[0] + x[1] * fwd.xi[1] + t * fwd.tau);
        Complex64::from_polar(phi(fwd.rho, t, horizon), phase)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pairing {
    /// `∫ f (θ₊ + z₊)(θ₋ + z₋)`.
    pub value: Complex64,
    /// `∫ f φ_ρ e^{−i(x·ξ + tτ)}`.
    pub leading: Complex64,
}

pub fn pairing(f: &Field, fwd: &CGOSolution, bwd: &CGOSolution) -> Result<Pairing> {
    check_pair(&fwd.params, &bwd.params)?;
    let grid = fwd.profile.grid();
    if f.grid() != grid || bwd.profile.grid() != grid {
        return Err(Error::invalid("pairing operands live on different grids"));
    }
    let value = fwd.profile.mul(&bwd.profile).mul_real(f).integral();
    let leading = product_symbol(grid, &fwd.params, &bwd.params)?.mul_real(f).integral();
    Ok(Pairing { value, leading })
}

/// Trapezoidal `∫ f e^{−i(x·ξ + tτ)}`.
pub fn fourier_sample(f: &Field, xi: [f64; 2], tau: f64) -> Complex64 {
    let grid = f.grid();
    ComplexField::from_fn(grid, |x, t| Complex64::from_polar(1.0, -(x[0] * xi[0] + x[1] * xi[1] + t * tau)))
        .mul_real(f)
        .integral()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub rho: f64,
    pub remainder_norm: f64,
    pub residual: f64,
    pub warnings: Vec<String>,
}

/// Remainder decay record over a ρ sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CGOReport {
    pub params: CGOParameters,
    pub entries: Vec<SweepEntry>,
    pub strictly_decreasing: bool,
    /// Last over first remainder norm.
    pub ratio: f64,
    pub max_residual: f64,
}

impl CGOReport {
    /// Strict decay with final/initial ratio below one half.
    pub fn decays(&self) -> bool {
        self.strictly_decreasing && self.ratio < 0.5
    }
}

/// Builds `params` for every ρ in `rhos` and records the remainder norms.
pub fn sweep(
    grid: &SpaceTimeGrid,
    q: Option<&Field>,
    params: &CGOParameters,
    rhos: &[f64],
    opts: SolverOptions,
) -> Result<CGOReport> {
    if rhos.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two values of ρ"));
    }
    let entries = rhos
        .par_iter()
        .map(|&rho| {
            let p = CGOParameters { rho, ..*params };
            let s = build(grid, q, &p, opts)?;
            Ok(SweepEntry {
                rho,
                remainder_norm: s.remainder_norm,
                residual: s.residual,
                warnings: s.warnings,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let strictly_decreasing = entries.windows(2).all(|w| w[1].remainder_norm < w[0].remainder_norm);
    let ratio = entries.last().map_or(1.0, |e| e.remainder_norm) / entries[0].remainder_norm;
    let max_residual = entries.iter().fold(0.0f64, |m, e| m.max(e.residual));
    Ok(CGOReport {
        params: *params,
        entries,
        strictly_decreasing,
        ratio,
        max_residual,
    })
}
