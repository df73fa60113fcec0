//! Numerical witnesses for the analytic ingredients: both Carleman
//! inequalities, the maximum principle, the passive non-uniqueness
//! construction and the conditional-stability audit.
//!
//! Carleman weights are handled in log space. Every term of a report is
//! scaled by the same factor `e^{−log_scale}`, so ratios are exact while the
//! individual sides stay representable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dnmap::{self, DNMeasurement};
use crate::error::{Error, Result};
use crate::forward::{Solver, Strategy};
use crate::grid::{BoundaryPortion, BoundaryTrace, Domain, Face, Field, SpaceTimeGrid};
use crate::model::{DiffusionTensor, Nonlinearity};

/// Log-range beyond which a term counts as underflowed (about `10^{-300}`).
const LOG_RANGE: f64 = 690.0;

/// Weight base `ψ(x) = c₀ + s·|x − x₀|²/R²`, with `R` the largest distance
/// from `x₀` to a corner of Ω.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Psi {
    pub center: [f64; 2],
    pub offset: f64,
    pub scale: f64,
    radius2: f64,
}

impl Psi {
    pub fn new(grid: &SpaceTimeGrid, center: [f64; 2], offset: f64, scale: f64) -> Result<Self> {
        if !(offset > 0.0 && scale > 0.0) {
            return Err(Error::invalid("ψ offset and scale must be positive"));
        }
        let (lo, hi) = (grid.lower(), grid.upper());
        let d = grid.dim();
        let mut radius2: f64 = 0.0;
        for cx in [lo[0], hi[0]] {
            for cy in [lo[1], hi[1]] {
                let c = [cx, cy];
                radius2 = radius2.max((0..d).map(|a| (c[a] - center[a]).powi(2)).sum());
            }
        }
        Ok(Self {
            center,
            offset,
            scale,
            radius2,
        })
    }

    /// Centre beyond the face opposite the first face of `gamma0`, so that
    /// `∇ψ·ν ≤ 0` on that opposite face.
    pub fn default_for(grid: &SpaceTimeGrid, gamma0: &BoundaryPortion) -> Result<Self> {
        let face = gamma0
            .entries(grid)?
            .first()
            .map(|e| e.face)
            .ok_or_else(|| Error::invalid("observation portion is empty"))?;
        let (lo, hi) = (grid.lower(), grid.upper());
        let mut center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let a = face.axis();
        let w = hi[a] - lo[a];
        center[a] = match face {
            Face::Lower(_) => hi[a] + 0.1 * w,
            Face::Upper(_) => lo[a] - 0.1 * w,
        };
        if grid.dim() == 1 {
            center[1] = 0.0;
        }
        Self::new(grid, center, 0.01, 0.01)
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        let r2 = (x[0] - self.center[0]).powi(2) + (x[1] - self.center[1]).powi(2);
        self.offset + self.scale * r2 / self.radius2
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let k = 2.0 * self.scale / self.radius2;
        [k * (x[0] - self.center[0]), k * (x[1] - self.center[1])]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CarlemanConfig {
    pub psi: Psi,
    pub gamma0: BoundaryPortion,
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    /// Fraction of `[0, T]` dropped at each end when evaluating `θ₁`.
    pub trim: f64,
    pub k: f64,
    pub t0: f64,
    pub ls: Vec<f64>,
}

impl CarlemanConfig {
    pub fn for_grid(grid: &SpaceTimeGrid, gamma0: BoundaryPortion) -> Result<Self> {
        let psi = Psi::default_for(grid, &gamma0)?;
        let level = (grid.steps() / 4).max(1);
        Ok(Self {
            psi,
            gamma0,
            lambdas: vec![1.0, 2.0, 4.0],
            mus: vec![1.0, 2.0],
            trim: 0.02,
            k: 0.05,
            t0: grid.time(level),
            ls: vec![0.5, 1.0, 2.0],
        })
    }

    /// Enforces the parameter constraints and samples the conditions on `ψ`.
    /// Returns notes for sampled flux-sign violations on `Γ∖Γ₀`.
    pub fn validate(&self, grid: &SpaceTimeGrid, gamma: &DiffusionTensor) -> Result<Vec<String>> {
        if self.lambdas.iter().chain(&self.mus).any(|v| !(*v >= 1.0)) {
            return Err(Error::invalid("λ and μ must be at least 1"));
        }
        if !(self.trim > 0.0 && self.trim < 0.5) {
            return Err(Error::invalid("trim fraction must lie in (0, 1/2)"));
        }
        if !(self.k > 0.0 && self.t0 > 0.0 && self.t0 < grid.horizon()) {
            return Err(Error::invalid("need K > 0 and t₀ in (0, T)"));
        }
        for &l in &self.ls {
            if !(l > 0.0) {
                return Err(Error::invalid("L must be positive"));
            }
            if self.k + self.t0 >= 1f64.min(1.0 / (2.0 * l)) {
                return Err(Error::invalid(format!(
                    "K + t₀ = {} violates K + t₀ < min{{1, 1/(2L)}} at L = {l}",
                    self.k + self.t0
                )));
            }
        }
        let d = grid.dim();
        for k in 0..grid.n_space() {
            let x = grid.coord(k);
            let g = self.psi.gradient(x);
            if self.psi.value(x) <= 0.0 || (0..d).map(|a| g[a] * g[a]).sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!("ψ must be positive with nonvanishing gradient (node {k})")));
            }
        }
        let observed: Vec<(Face, usize)> = self.gamma0.entries(grid)?.iter().map(|e| (e.face, e.node)).collect();
        let mut notes = Vec::new();
        let mut violations = 0;
        let levels = [0, grid.steps() / 2, grid.steps()];
        for e in BoundaryPortion::Full.entries(grid)? {
            if observed.contains(&(e.face, e.node)) {
                continue;
            }
            let x = grid.coord(e.node);
            let g = self.psi.gradient(x);
            let nu = e.face.normal();
            for &n in &levels {
                let [g11, g12, g22] = gamma.eval(x, grid.time(n))?;
                let flux = (g11 * g[0] + g12 * g[1]) * nu[0] + (g12 * g[0] + g22 * g[1]) * nu[1];
                if flux > 1e-12 {
                    violations += 1;
                    break;
                }
            }
        }
        if violations > 0 {
            notes.push(format!("flux sign condition fails at {violations} sampled nodes of Γ∖Γ₀"));
        }
        Ok(notes)
    }

    fn eta(&self, x: [f64; 2], t: f64, horizon: f64, mu: f64, psi_max: f64) -> f64 {
        ((mu * self.psi.value(x)).exp() - (2.0 * mu * psi_max).exp()) / (t * t * (horizon - t).powi(2))
    }

    fn phi(&self, x: [f64; 2], t: f64, horizon: f64, mu: f64) -> f64 {
        (mu * self.psi.value(x)).exp() / (t * t * (horizon - t).powi(2))
    }

    /// `ln θ₁²` on one time level, `None` outside the trimmed window.
    pub fn log_theta1_sq(&self, grid: &SpaceTimeGrid, level: usize, lambda: f64, mu: f64) -> Option<Vec<f64>> {
        let t = grid.time(level);
        let horizon = grid.horizon();
        if t < self.trim * horizon || t > (1.0 - self.trim) * horizon {
            return None;
        }
        let psi_max = psi_max(&self.psi, grid);
        Some(
            (0..grid.n_space())
                .map(|k| 2.0 * lambda * self.eta(grid.coord(k), t, horizon, mu, psi_max))
                .collect(),
        )
    }
}

fn psi_max(psi: &Psi, grid: &SpaceTimeGrid) -> f64 {
    (0..grid.n_space()).map(|k| psi.value(grid.coord(k))).fold(f64::MIN, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub lambda: f64,
    pub mu: Option<f64>,
    pub l: Option<f64>,
    /// Left side scaled by `e^{−log_scale}`.
    pub lhs: f64,
    /// Right side scaled by `e^{−log_scale}`, with unit constant.
    pub rhs: f64,
    pub log_scale: f64,
    pub ratio: f64,
    pub degenerate: bool,
    pub notes: Vec<String>,
}

fn report(lambda: f64, mu: Option<f64>, l: Option<f64>, lhs: f64, rhs: f64, log_scale: f64, notes: Vec<String>) -> InequalityReport {
    let ratio = if lhs == 0.0 && rhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    };
    InequalityReport {
        lambda,
        mu,
        l,
        lhs,
        rhs,
        log_scale,
        ratio,
        degenerate: false,
        notes,
    }
}

/// Nodal gradient: central differences inside, second-order one-sided at the
/// boundary.
pub fn gradient(grid: &SpaceTimeGrid, v: &[f64]) -> Vec<[f64; 2]> {
    let [nx, ny] = grid.nodes();
    let d = grid.dim();
    let mut out = vec![[0.0; 2]; grid.n_space()];
    for (k, g) in out.iter_mut().enumerate() {
        let (i, j) = grid.ij(k);
        for (a, ga) in g.iter_mut().enumerate().take(d) {
            let (p, n) = if a == 0 { (i, nx) } else { (j, ny) };
            let at = |m: usize| if a == 0 { v[grid.index(m, j)] } else { v[grid.index(i, m)] };
            let h = grid.spacing(a);
            *ga = if p == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if p + 1 == n {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
            } else {
                (at(p + 1) - at(p - 1)) / (2.0 * h)
            };
        }
    }
    out
}

fn check_fields(u: &Field, f: &Field) -> Result<SpaceTimeGrid> {
    let grid = *u.grid();
    if u.domain() != Domain::Cylinder || f.grid() != &grid || f.domain() != Domain::Cylinder {
        return Err(Error::invalid("u and F must be space-time fields on one grid"));
    }
    Ok(grid)
}

/// Both sides of the first Carleman inequality at `(λ, μ)`.
pub fn carleman_check_1(u: &Field, f: &Field, cfg: &CarlemanConfig, lambda: f64, mu: f64) -> Result<InequalityReport> {
    let grid = check_fields(u, f)?;
    let horizon = grid.horizon();
    let sw = grid.space_weights();
    let tw = grid.time_weights();
    let flux = dnmap::measure(u, &cfg.gamma0)?;
    let fw = flux.weights();
    let entries = flux.entries().to_vec();
    let ne = entries.len();

    let logs: Vec<Option<Vec<f64>>> = (0..grid.n_levels())
        .map(|n| cfg.log_theta1_sq(&grid, n, lambda, mu))
        .collect();
    let shift = logs
        .iter()
        .flatten()
        .flat_map(|l| l.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        let mut r = report(lambda, Some(mu), None, 0.0, 0.0, 0.0, vec!["trim window contains no time level".into()]);
        r.degenerate = true;
        return Ok(r);
    }
    let (mut lhs, mut rhs) = (0.0, 0.0);
    let mut total = 0usize;
    let mut underflow = 0usize;
    for (n, log) in logs.iter().enumerate() {
        let Some(log) = log else { continue };
        let t = grid.time(n);
        let grad = gradient(&grid, u.level(n));
        for k in 0..grid.n_space() {
            total += 1;
            let rel = log[k] - shift;
            if rel < -LOG_RANGE {
                underflow += 1;
                continue;
            }
            let w = rel.exp() * sw[k] * tw[n];
            let x = grid.coord(k);
            let phi = cfg.phi(x, t, horizon, mu);
            let g2 = grad[k][0].powi(2) + grad[k][1].powi(2);
            let v = u.at(k, n);
            lhs += w * (lambda * mu * mu * phi * g2 + lambda.powi(3) * mu.powi(4) * phi.powi(3) * v * v);
            rhs += w * f.at(k, n).powi(2);
        }
        for (e, entry) in entries.iter().enumerate() {
            let rel = log[entry.node] - shift;
            if rel < -LOG_RANGE {
                continue;
            }
            let phi = cfg.phi(grid.coord(entry.node), t, horizon, mu);
            rhs += fw[n * ne + e] * rel.exp() * lambda * mu * phi * flux.at(e, n).powi(2);
        }
    }
    let mut notes = Vec::new();
    if 2 * underflow > total {
        notes.push(format!("θ₁² underflows at {underflow} of {total} quadrature nodes"));
    }
    let mut r = report(lambda, Some(mu), None, lhs, rhs, shift, notes);
    r.degenerate = underflow == total;
    Ok(r)
}

/// Integrand `w(k, v, ∇v)` at node `k` of one level.
type LevelIntegrand<'a> = &'a dyn Fn(usize, &[f64], &[[f64; 2]]) -> f64;

/// Both sides of the second Carleman inequality on `[0, t₀]` at `(λ, L)`,
/// with unit constant in front of the source term.
pub fn carleman_check_2(
    u: &Field,
    f: &Field,
    gamma: &DiffusionTensor,
    cfg: &CarlemanConfig,
    lambda: f64,
    l: f64,
) -> Result<InequalityReport> {
    let grid = check_fields(u, f)?;
    let (k, t0) = (cfg.k, cfg.t0);
    if k + t0 >= 1f64.min(1.0 / (2.0 * l)) {
        return Err(Error::invalid("K + t₀ < min{1, 1/(2L)} is violated"));
    }
    let last = (t0 / grid.dt()).round() as usize;
    let mut notes = Vec::new();
    if (grid.time(last) - t0).abs() > 1e-9 * grid.horizon() {
        notes.push(format!("t₀ snapped to the time level t = {}", grid.time(last)));
    }
    let t0 = grid.time(last);
    let sw = grid.space_weights();
    let dt = grid.dt();
    let ln_theta = |t: f64| -(k + t0 - t).ln();

    let log_vol = |t: f64| 2.0 * lambda * ln_theta(t);
    let log_init_lhs = lambda.ln() - (2.0 * lambda + 1.0) * (k + t0).ln();
    let log_final_rhs = lambda.ln() - (2.0 * lambda + 1.0) * k.ln();
    let log_grad0 = -2.0 * lambda * (k + t0).ln();
    let candidates = [log_vol(0.0), log_vol(t0), log_init_lhs, log_final_rhs, log_grad0];
    let shift = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let low = candidates.iter().copied().fold(f64::INFINITY, f64::min);
    if shift - low > LOG_RANGE {
        notes.push("weight dynamic range exceeds 1e300".into());
    }
    let quad = |v: &[f64], w: LevelIntegrand| -> f64 {
        let grad = gradient(&grid, v);
        (0..grid.n_space()).map(|k| sw[k] * w(k, v, &grad)).sum()
    };
    let gamma_form = |x: [f64; 2], t: f64, g: [f64; 2]| -> Result<f64> {
        let [g11, g12, g22] = gamma.eval(x, t)?;
        Ok(g11 * g[0] * g[0] + 2.0 * g12 * g[0] * g[1] + g22 * g[1] * g[1])
    };

    let (mut lhs, mut rhs) = (0.0, 0.0);
    for n in 0..=last {
        let t = grid.time(n);
        let wt = if n == 0 || n == last { 0.5 * dt } else { dt };
        let scale = (log_vol(t) - shift).exp();
        let theta2 = 1.0 / (k + t0 - t);
        let v = u.level(n);
        let grad = gradient(&grid, v);
        let mut vol = 0.0;
        let mut src = 0.0;
        for node in 0..grid.n_space() {
            let form = gamma_form(grid.coord(node), t, grad[node])?;
            vol += sw[node] * (lambda * theta2 * theta2 * v[node] * v[node] + l * form);
            src += sw[node] * f.at(node, n).powi(2);
        }
        lhs += wt * scale * vol;
        rhs += wt * scale * src;
    }
    lhs += (log_init_lhs - shift).exp() * quad(u.level(0), &|k, v, _| v[k] * v[k]);
    rhs += (log_final_rhs - shift).exp() * quad(u.level(last), &|k, v, _| v[k] * v[k]);
    let grad0 = gradient(&grid, u.level(0));
    let mut g0 = 0.0;
    for node in 0..grid.n_space() {
        g0 += sw[node] * gamma_form(grid.coord(node), 0.0, grad0[node])?;
    }
    rhs += (log_grad0 - shift).exp() * g0;
    Ok(report(lambda, None, Some(l), lhs, rhs, shift, notes))
}

/// First inequality over the `(λ, μ)` grid of `cfg`.
pub fn carleman_sweep_1(u: &Field, f: &Field, cfg: &CarlemanConfig) -> Result<Vec<InequalityReport>> {
    let points: Vec<(f64, f64)> = cfg.lambdas.iter().flat_map(|&a| cfg.mus.iter().map(move |&b| (a, b))).collect();
    points.par_iter().map(|&(a, b)| carleman_check_1(u, f, cfg, a, b)).collect()
}

/// Second inequality over the `(λ, L)` grid of `cfg`.
pub fn carleman_sweep_2(u: &Field, f: &Field, gamma: &DiffusionTensor, cfg: &CarlemanConfig) -> Result<Vec<InequalityReport>> {
    let points: Vec<(f64, f64)> = cfg.lambdas.iter().flat_map(|&a| cfg.ls.iter().map(move |&b| (a, b))).collect();
    points.par_iter().map(|&(a, l)| carleman_check_2(u, f, gamma, cfg, a, l)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxPrincipleCertificate {
    /// Smallest value over interior nodes and all levels.
    pub min: f64,
    pub min_node: usize,
    pub min_level: usize,
    /// Smallest interior value from level 1 on.
    pub later_min: f64,
    pub max_abs: f64,
    pub positive: bool,
}

/// Solves the linear problem with data `f ≥ 0` and `g = 0` and scans the
/// interior for negative values.
pub fn max_principle_check(solver: &Solver, q: Option<&Field>, f: &BoundaryTrace) -> Result<MaxPrincipleCertificate> {
    let grid = *solver.grid();
    if let Some(v) = f.values().iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("boundary data must be nonnegative, found {v}")));
    }
    let v = solver.solve_linear(q, f, &Field::zeros_slice(&grid), None)?.solution;
    let interior = grid.interior_nodes();
    let (mut min, mut min_node, mut min_level) = (f64::INFINITY, 0, 0);
    let mut later_min = f64::INFINITY;
    for n in 0..grid.n_levels() {
        for &k in &interior {
            let x = v.at(k, n);
            if x < min {
                (min, min_node, min_level) = (x, k, n);
            }
            if n >= 1 {
                later_min = later_min.min(x);
            }
        }
    }
    let max_abs = v.max_abs();
    if min < -1e-8 * max_abs {
        return Err(Error::CheckFailed(format!(
            "interior value {min:e} at node {min_node}, level {min_level} breaks nonnegativity"
        )));
    }
    Ok(MaxPrincipleCertificate {
        min,
        min_node,
        min_level,
        later_min,
        max_abs,
        positive: later_min > 0.0,
    })
}

/// `u(x, t) = amplitude·e^{−decay·t}·B((x − center)/radius)` with the
/// standard compactly supported bump `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
    pub decay: f64,
}

impl Bump {
    pub fn eval(&self, grid: &SpaceTimeGrid, x: [f64; 2], t: f64) -> f64 {
        let d = grid.dim();
        let r2: f64 = (0..d).map(|a| (x[a] - self.center[a]).powi(2)).sum::<f64>() / (self.radius * self.radius);
        if r2 >= 1.0 {
            return 0.0;
        }
        self.amplitude * (-self.decay * t).exp() * (1.0 - 1.0 / (1.0 - r2)).exp()
    }

    fn clearance(&self, grid: &SpaceTimeGrid) -> f64 {
        let (lo, hi) = (grid.lower(), grid.upper());
        (0..grid.dim())
            .map(|a| (self.center[a] - lo[a]).min(hi[a] - self.center[a]))
            .fold(f64::INFINITY, f64::min)
            - self.radius
    }
}

/// Two bumps at one and two thirds along the first axis, each clear of a
/// collar of width `collar`.
pub fn default_bumps(grid: &SpaceTimeGrid, collar: f64) -> [Bump; 2] {
    let (lo, hi) = (grid.lower(), grid.upper());
    let w = hi[0] - lo[0];
    let mid = 0.5 * (lo[1] + hi[1]);
    let mut radius = w / 6.0 - 0.5 * collar;
    if grid.dim() == 2 {
        radius = radius.min(0.5 * (hi[1] - lo[1]) - collar);
    }
    let y = if grid.dim() == 2 { mid } else { 0.0 };
    [
        Bump {
            center: [lo[0] + w / 3.0, y],
            radius,
            amplitude: 1.0,
            decay: 1.0,
        },
        Bump {
            center: [lo[0] + 2.0 * w / 3.0, y],
            radius,
            amplitude: 1.0,
            decay: 2.0,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct NonuniquenessDemo {
    pub g: [Field; 2],
    /// Sources `A_j`, so `a_j(x, t, u) = A_j(x, t)`.
    pub a: [Field; 2],
    pub solutions: [Field; 2],
    pub traces: [DNMeasurement; 2],
    pub g_difference: f64,
    pub trace_sup: [f64; 2],
    pub solution_sup: [f64; 2],
}

impl NonuniquenessDemo {
    /// Both traces vanish to `tol·(1 + ‖u_j‖_∞)` and the initial data differ by at least `gap`.
    pub fn holds(&self, tol: f64, gap: f64) -> bool {
        self.g_difference >= gap && (0..2).all(|j| self.trace_sup[j] <= tol * (1.0 + self.solution_sup[j]))
    }
}

/// Source that makes the given field an exact solution of the discrete
/// scheme with `q = 0`. Level 0 follows the continuous `u_t − ∇·γ∇u`
/// estimated by the first step; later levels solve the θ-recursion.
fn discrete_source(solver: &Solver, u: &Field) -> Field {
    let grid = *solver.grid();
    let r = solver.scheme_residual(u, None, None);
    let th = solver.options().scheme.theta();
    let mut h = Field::zeros(&grid);
    if th < 1.0 {
        h.level_mut(0).copy_from_slice(r.level(1));
    }
    for n in 1..grid.n_levels() {
        let prev: Vec<f64> = h.level(n - 1).to_vec();
        for (k, v) in h.level_mut(n).iter_mut().enumerate() {
            *v = (r.at(k, n) - (1.0 - th) * prev[k]) / th;
        }
    }
    h
}

/// Builds two passive configurations with different initial data and
/// vanishing lateral fluxes.
pub fn nonuniqueness_demo(solver: &Solver, collar: f64, bumps: &[Bump; 2]) -> Result<NonuniquenessDemo> {
    let grid = *solver.grid();
    let hmax = (0..grid.dim()).map(|a| grid.spacing(a)).fold(0.0, f64::max);
    if !(collar > 2.0 * hmax) {
        return Err(Error::invalid("collar must exceed two grid cells"));
    }
    for b in bumps {
        if !(b.radius > 0.0) || b.clearance(&grid) < collar {
            return Err(Error::invalid("bump support must stay outside the boundary collar"));
        }
    }
    let fields: Vec<Field> = bumps.iter().map(|b| Field::from_fn(&grid, |x, t| b.eval(&grid, x, t))).collect();
    let g: Vec<Field> = fields.iter().map(|u| u.slice(0)).collect();
    let g_difference = g[0].sub(&g[1]).l2();
    if g_difference == 0.0 {
        return Err(Error::invalid("the two constructions must differ at t = 0"));
    }
    let zero = BoundaryTrace::zeros(&grid);
    let mut a = Vec::new();
    let mut solutions = Vec::new();
    let mut traces = Vec::new();
    for (u, g0) in fields.iter().zip(&g) {
        let h = discrete_source(solver, u);
        let sol = solver
            .solve_semilinear_with_source(&Nonlinearity::zero(), &zero, g0, Some(&h), Strategy::Newton)?
            .solution;
        traces.push(dnmap::measure(&sol, &BoundaryPortion::Full)?);
        a.push(h.scaled(-1.0));
        solutions.push(sol);
    }
    let trace_sup = [traces[0].max_abs(), traces[1].max_abs()];
    let solution_sup = [solutions[0].max_abs(), solutions[1].max_abs()];
    let into2 = |v: Vec<Field>| -> [Field; 2] { v.try_into().expect("two entries") };
    Ok(NonuniquenessDemo {
        g: into2(g),
        a: into2(a),
        solutions: into2(solutions),
        traces: [traces[0].clone(), traces[1].clone()],
        g_difference,
        trace_sup,
        solution_sup,
    })
}

/// Discrete `H¹(Ω)` norm of a slice.
pub fn h1_norm(g: &Field) -> f64 {
    let grid = g.grid();
    let sw = grid.space_weights();
    let grad = gradient(grid, g.values());
    g.values()
        .iter()
        .zip(&grad)
        .zip(&sw)
        .map(|((v, d), w)| w * (v * v + d[0] * d[0] + d[1] * d[1]))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditPoint {
    pub scale: f64,
    /// `‖g₁ − g₂‖²_{L²(Ω)}`.
    pub lhs: f64,
    pub dn_difference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityAudit {
    pub points: Vec<AuditPoint>,
    pub m_bound: f64,
    pub c: f64,
    pub delta0: f64,
    /// Both sides strictly decrease as the scale shrinks.
    pub monotone: bool,
    pub bound_dominates: bool,
}

fn stability_shape(m: f64, m_bound: f64, delta0: f64) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    (1.0 + m_bound) / delta0 * m + m_bound * m_bound / (delta0 * m).ln().abs()
}

/// Measures `g₂ = g₁ + s·direction` against `g₁` for every scale `s` and fits
/// the smallest constant `C` of the logarithmic bound over a `δ₀` grid.
pub fn stability_audit(
    solver: &Solver,
    nl: &Nonlinearity,
    g1: &Field,
    direction: &Field,
    portion: &BoundaryPortion,
    scales: &[f64],
    m_bound: f64,
) -> Result<StabilityAudit> {
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("scales must be positive"));
    }
    let base = dnmap::passive_map(solver, nl, g1, portion, Strategy::Newton)?;
    let mut points = Vec::with_capacity(scales.len());
    for &s in scales {
        let diff = direction.scaled(s);
        if h1_norm(&diff) > m_bound {
            return Err(Error::invalid(format!("‖g₁ − g₂‖_H¹ exceeds M = {m_bound} at scale {s}")));
        }
        let g2 = g1.add(&diff);
        let m = dnmap::passive_map(solver, nl, &g2, portion, Strategy::Newton)?;
        points.push(AuditPoint {
            scale: s,
            lhs: diff.l2().powi(2),
            dn_difference: m.sub(&base)?.norm(),
        });
    }
    let mut order: Vec<&AuditPoint> = points.iter().collect();
    order.sort_by(|a, b| b.scale.total_cmp(&a.scale));
    let monotone = order
        .windows(2)
        .all(|w| w[1].lhs < w[0].lhs && w[1].dn_difference < w[0].dn_difference);
    let m_max = points.iter().map(|p| p.dn_difference).fold(0.0, f64::max);
    let top = if m_max > 0.0 { 1f64.min(1.0 / m_max) } else { 1.0 };
    let mut best = (f64::INFINITY, top);
    for k in 1..=60 {
        let delta0 = top * 10f64.powf(-(k as f64) / 6.0);
        let c = points
            .iter()
            .filter(|p| p.lhs > 0.0)
            .map(|p| p.lhs / stability_shape(p.dn_difference, m_bound, delta0))
            .fold(0.0, f64::max);
        if c < best.0 {
            best = (c, delta0);
        }
    }
    let (c, delta0) = best;
    let bound_dominates = points
        .iter()
        .all(|p| p.lhs <= c * stability_shape(p.dn_difference, m_bound, delta0) * (1.0 + 1e-12));
    Ok(StabilityAudit {
        points,
        m_bound,
        c,
        delta0,
        monotone,
        bound_dominates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{SolverOptions, TimeScheme};
    use crate::linearize::smooth_ramp;
    use std::f64::consts::PI;

    fn heat(nx: usize, nt: usize) -> (SpaceTimeGrid, Field, Field) {
        let grid = SpaceTimeGrid::new_1d(0.0, 1.0, nx, nt, 0.5).unwrap();
        let u = Field::from_fn(&grid, |x, t| (-PI * PI * t).exp() * (PI * x[0]).sin());
        (grid, u, Field::zeros(&grid))
    }

    fn lower() -> BoundaryPortion {
        BoundaryPortion::Faces {
            faces: vec![Face::Lower(0)],
        }
    }

    #[test]
    fn default_psi_satisfies_the_sign_condition() {
        let (grid, _, _) = heat(33, 32);
        let cfg = CarlemanConfig::for_grid(&grid, lower()).unwrap();
        assert!(cfg.validate(&grid, &DiffusionTensor::identity()).unwrap().is_empty());
    }

    #[test]
    fn zero_solution_gives_zero_ratio() {
        let (grid, _, f) = heat(33, 32);
        let cfg = CarlemanConfig::for_grid(&grid, lower()).unwrap();
        let u = Field::zeros(&grid);
        assert_eq!(carleman_check_1(&u, &f, &cfg, 1.0, 1.0).unwrap().ratio, 0.0);
        assert_eq!(carleman_check_2(&u, &f, &DiffusionTensor::identity(), &cfg, 1.0, 1.0).unwrap().ratio, 0.0);
    }

    #[test]
    fn ratios_are_scale_invariant() {
        let (grid, u, _) = heat(33, 32);
        let f = Field::from_fn(&grid, |x, t| x[0] * t);
        let cfg = CarlemanConfig::for_grid(&grid, lower()).unwrap();
        let a = carleman_check_1(&u, &f, &cfg, 2.0, 2.0).unwrap();
        let b = carleman_check_1(&u.scaled(3.0), &f.scaled(3.0), &cfg, 2.0, 2.0).unwrap();
        assert!((a.ratio - b.ratio).abs() <= 1e-12 * a.ratio);
        let id = DiffusionTensor::identity();
        let a = carleman_check_2(&u, &f, &id, &cfg, 2.0, 1.0).unwrap();
        let b = carleman_check_2(&u.scaled(3.0), &f.scaled(3.0), &id, &cfg, 2.0, 1.0).unwrap();
        assert!((a.ratio - b.ratio).abs() <= 1e-12 * a.ratio);
    }

    #[test]
    fn heat_oracle_ratios_are_finite_and_grid_stable() {
        let (g1, u1, f1) = heat(33, 64);
        let (g2, u2, f2) = heat(65, 128);
        let c1 = CarlemanConfig::for_grid(&g1, lower()).unwrap();
        let c2 = CarlemanConfig::for_grid(&g2, lower()).unwrap();
        let id = DiffusionTensor::identity();
        for (a, b) in carleman_sweep_1(&u1, &f1, &c1).unwrap().iter().zip(carleman_sweep_1(&u2, &f2, &c2).unwrap()) {
            assert!(a.ratio.is_finite() && a.ratio > 0.0);
            assert!((a.ratio - b.ratio).abs() < 0.2 * b.ratio, "{} vs {}", a.ratio, b.ratio);
        }
        for (a, b) in carleman_sweep_2(&u1, &f1, &id, &c1).unwrap().iter().zip(carleman_sweep_2(&u2, &f2, &id, &c2).unwrap()) {
            assert!(a.ratio.is_finite() && a.ratio > 0.0);
            assert!((a.ratio - b.ratio).abs() < 0.2 * b.ratio, "{} vs {}", a.ratio, b.ratio);
        }
    }

    #[test]
    fn parameter_gate_rejects_large_l() {
        let (grid, _, _) = heat(33, 32);
        let mut cfg = CarlemanConfig::for_grid(&grid, lower()).unwrap();
        cfg.ls = vec![4.0];
        assert!(cfg.validate(&grid, &DiffusionTensor::identity()).is_err());
    }

    #[test]
    fn max_principle_with_ramped_face_data() {
        let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 32, 0.5).unwrap();
        let s = Solver::heat(&grid);
        let f = BoundaryTrace::from_fn(&grid, |x, t| if x[0] == 0.0 { smooth_ramp(t, 0.1) } else { 0.0 });
        let c = max_principle_check(&s, None, &f).unwrap();
        assert!(c.positive && c.min >= 0.0);
        let q = Field::from_fn(&grid, |_, _| 50.0);
        assert!(max_principle_check(&s, Some(&q), &f).unwrap().min >= 0.0);
        let z = max_principle_check(&s, None, &BoundaryTrace::zeros(&grid)).unwrap();
        assert!(z.min == 0.0 && !z.positive);
    }

    #[test]
    fn nonuniqueness_pair_is_invisible() {
        let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 65, 32, 0.5).unwrap();
        for opts in [SolverOptions::default(), SolverOptions { scheme: TimeScheme::CrankNicolson, ..Default::default() }] {
            let s = Solver::new(&grid, &DiffusionTensor::identity(), opts).unwrap();
            for collar in [0.1, 0.05] {
                let d = nonuniqueness_demo(&s, collar, &default_bumps(&grid, collar)).unwrap();
                assert!(d.holds(1e-8, 0.1), "{:?} {}", d.trace_sup, d.g_difference);
                assert!(d.solutions[0].sub(&Field::from_fn(&grid, |x, t| default_bumps(&grid, collar)[0].eval(&grid, x, t))).max_abs() < 1e-10);
            }
        }
        let b = default_bumps(&grid, 0.1);
        assert!(nonuniqueness_demo(&Solver::heat(&grid), 0.1, &[b[0], b[0]]).is_err());
    }

    #[test]
    fn audit_trends_down_with_the_perturbation() {
        let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 32, 0.5).unwrap();
        let s = Solver::heat(&grid);
        let g1 = Field::from_fn_slice(&grid, |x| (PI * x[0]).sin());
        let dir = Field::from_fn_slice(&grid, |x| (2.0 * PI * x[0]).sin());
        let a = stability_audit(&s, &Nonlinearity::zero(), &g1, &dir, &lower(), &[1e-1, 1e-2, 1e-3, 1e-4], 10.0).unwrap();
        assert!(a.monotone && a.bound_dominates);
        let same = stability_audit(&s, &Nonlinearity::zero(), &g1, &Field::zeros_slice(&grid), &lower(), &[1e-1], 10.0).unwrap();
        assert_eq!(same.points[0].lhs, 0.0);
        assert_eq!(same.points[0].dn_difference, 0.0);
    }
}
