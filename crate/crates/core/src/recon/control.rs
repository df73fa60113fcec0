//! Numerical boundary null control on `[0, T − ε]`.
//!
//! The control lives on `Γ₀ × (0, T − ε]` in the span of nodal indicators on
//! `Γ₀` times piecewise-linear B-splines in time that vanish at `t = 0`. It
//! minimizes `‖u(·, T − ε)‖²_{L²(Ω)} + α‖c‖²` over the coefficients by CGLS,
//! with forward solves for the control-to-state map and the discrete adjoint
//! for its transpose. Nonlinear models wrap this in Gauss–Newton steps that
//! are accepted only when the terminal norm decreases. The control is then
//! extended by zero to `[T − ε, T]` and the free continuation is recorded.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{Solver, Strategy};
use crate::grid::{BoundaryPortion, BoundaryTrace, Domain, Field, SpaceTimeGrid};
use crate::model::Nonlinearity;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlOptions {
    /// Number of time B-splines on `(0, T − ε]`.
    pub time_knots: usize,
    pub alpha: f64,
    pub cg_max_iter: usize,
    /// Relative tolerance on the normal-equation residual.
    pub cg_tol: f64,
    pub gauss_newton: usize,
    /// Terminal-to-uncontrolled ratio above which steering counts as partial.
    pub target_ratio: f64,
    pub strategy: Strategy,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            time_knots: 16,
            alpha: 0.0,
            cg_max_iter: 400,
            cg_tol: 1e-12,
            gauss_newton: 8,
            target_ratio: 1e-2,
            strategy: Strategy::Newton,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    /// Control on the full horizon, zero after `T − ε`.
    pub control: BoundaryTrace,
    pub coefficients: Vec<f64>,
    /// Solution on the full horizon under the extended control.
    pub solution: Field,
    pub switch_level: usize,
    pub uncontrolled_norm: f64,
    pub terminal_norm: f64,
    /// Terminal norm after every accepted iteration, starting uncontrolled.
    pub history: Vec<f64>,
    /// Largest `‖u(·, t)‖_{L²(Ω)}` over levels in `[T − ε, T]`.
    pub continued_max: f64,
    pub partial: bool,
}

impl ControlResult {
    pub fn reduction(&self) -> f64 {
        if self.uncontrolled_norm > 0.0 {
            self.terminal_norm / self.uncontrolled_norm
        } else {
            0.0
        }
    }
}

/// Control basis on a grid: `(boundary slot, knot)` pairs.
struct Basis {
    slots: Vec<usize>,
    knots: usize,
    switch_time: f64,
}

impl Basis {
    fn len(&self) -> usize {
        self.slots.len() * self.knots
    }

    fn hat(&self, j: usize, t: f64) -> f64 {
        let h = self.switch_time / self.knots as f64;
        let c = (j + 1) as f64 * h;
        if t > self.switch_time + 1e-12 * h {
            return 0.0;
        }
        (1.0 - (t - c).abs() / h).max(0.0)
    }

    fn trace(&self, grid: &SpaceTimeGrid, c: &[f64]) -> BoundaryTrace {
        let mut f = BoundaryTrace::zeros(grid);
        let nb = f.nodes().len();
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for (s, &slot) in self.slots.iter().enumerate() {
                let v: f64 = (0..self.knots).map(|j| c[s * self.knots + j] * self.hat(j, t)).sum();
                f.values_mut()[n * nb + slot] = v;
            }
        }
        f
    }

    fn project(&self, grid: &SpaceTimeGrid, gf: &BoundaryTrace) -> Vec<f64> {
        let nb = gf.nodes().len();
        let mut out = vec![0.0; self.len()];
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for (s, &slot) in self.slots.iter().enumerate() {
                let v = gf.values()[n * nb + slot];
                for j in 0..self.knots {
                    out[s * self.knots + j] += v * self.hat(j, t);
                }
            }
        }
        out
    }
}

struct Terminal<'a> {
    solver: &'a Solver,
    weights: Vec<f64>,
}

impl Terminal<'_> {
    fn norm(&self, u: &Field) -> f64 {
        let last = u.level(u.n_levels() - 1);
        last.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }

    /// `W^{1/2}` times the terminal level of the linearized response to `c`.
    fn apply(&self, basis: &Basis, q: Option<&Field>, c: &[f64]) -> Result<Vec<f64>> {
        let grid = self.solver.grid();
        let f = basis.trace(grid, c);
        let u = self.solver.solve_linear(q, &f, &Field::zeros_slice(grid), None)?.solution;
        Ok(u.level(grid.steps()).iter().zip(&self.weights).map(|(v, w)| w.sqrt() * v).collect())
    }

    fn apply_t(&self, basis: &Basis, q: Option<&Field>, r: &[f64]) -> Result<Vec<f64>> {
        let grid = self.solver.grid();
        let mut seed = Field::zeros(grid);
        for ((s, v), w) in seed.level_mut(grid.steps()).iter_mut().zip(r).zip(&self.weights) {
            *s = w.sqrt() * v;
        }
        let gf = self.solver.vjp_linear(q, &seed)?.f;
        Ok(basis.project(grid, &gf))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// CGLS for `min ‖A c + b‖² + α‖c‖²`; returns `c` and the terminal residual
/// norm `‖A c + b‖` after every iteration.
fn cgls(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    apply_t: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    n: usize,
    alpha: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut c = vec![0.0; n];
    let mut r: Vec<f64> = b.iter().map(|v| -v).collect();
    let mut s = apply_t(&r)?;
    let mut p = s.clone();
    let mut gamma = norm(&s).powi(2);
    let gamma0 = gamma;
    let mut history = Vec::new();
    for _ in 0..max_iter {
        if gamma <= tol * tol * gamma0 || gamma == 0.0 {
            break;
        }
        let ap = apply(&p)?;
        let denom = norm(&ap).powi(2) + alpha * norm(&p).powi(2);
        if !(denom > 0.0) {
            break;
        }
        let a = gamma / denom;
        for i in 0..n {
            c[i] += a * p[i];
        }
        for (ri, api) in r.iter_mut().zip(&ap) {
            *ri -= a * api;
        }
        history.push(norm(&r));
        s = apply_t(&r)?;
        for i in 0..n {
            s[i] -= alpha * c[i];
        }
        let gamma_new = norm(&s).powi(2);
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for i in 0..n {
            p[i] = s[i] + beta * p[i];
        }
    }
    Ok((c, history))
}

/// Steers `g` towards zero at `T − eps` with controls on `portion`.
pub fn null_control(
    solver: &Solver,
    nl: &Nonlinearity,
    g: &Field,
    eps: f64,
    portion: &BoundaryPortion,
    opts: &ControlOptions,
) -> Result<ControlResult> {
    let grid = *solver.grid();
    if g.grid() != &grid || g.domain() != Domain::Slice {
        return Err(Error::invalid("initial data must be a slice on the solver grid"));
    }
    if !(eps > 0.0 && eps < grid.horizon()) {
        return Err(Error::invalid("control gap ε must lie in (0, T)"));
    }
    let switch_f = (grid.horizon() - eps) / grid.dt();
    let switch_level = switch_f.round() as usize;
    if (switch_f - switch_level as f64).abs() > 1e-8 || switch_level == 0 {
        return Err(Error::invalid("T − ε must be a positive multiple of the time step"));
    }
    if opts.time_knots == 0 {
        return Err(Error::invalid("control basis needs at least one time knot"));
    }
    let switch_time = grid.time(switch_level);
    let sub_grid = grid.with_time(switch_level, switch_time)?;
    let g_sub = Field::from_values(&sub_grid, Domain::Slice, g.values().to_vec())?;
    let sub = Solver::with_drift(&sub_grid, solver.gamma(), solver.drift(), *solver.options())?;
    let control_nodes = portion.classify(&grid)?;
    let boundary = grid.boundary_nodes();
    let slots: Vec<usize> = boundary
        .iter()
        .enumerate()
        .filter(|(_, k)| control_nodes.contains(k))
        .map(|(i, _)| i)
        .collect();
    if slots.is_empty() {
        return Err(Error::invalid("control portion is empty"));
    }
    let basis = Basis {
        slots,
        knots: opts.time_knots,
        switch_time,
    };
    let term = Terminal {
        solver: &sub,
        weights: sub_grid.space_weights(),
    };
    let linear = nl.is_zero() || nl.is_affine();
    let solve = |c: &[f64]| -> Result<Field> {
        Ok(sub
            .solve_semilinear(nl, &basis.trace(&sub_grid, c), &g_sub, opts.strategy)?
            .solution)
    };

    let mut c = vec![0.0; basis.len()];
    let mut u = solve(&c)?;
    let uncontrolled_norm = term.norm(&u);
    let mut history = vec![uncontrolled_norm];
    let outer = if linear { 1 } else { opts.gauss_newton.max(1) };
    for _ in 0..outer {
        let q = if nl.is_zero() {
            None
        } else {
            Some(sub.derivative_field(nl, &u, 1)?)
        };
        let b: Vec<f64> = u
            .level(sub_grid.steps())
            .iter()
            .zip(&term.weights)
            .map(|(v, w)| w.sqrt() * v)
            .collect();
        let (dc, inner) = cgls(
            |x| term.apply(&basis, q.as_ref(), x),
            |r| term.apply_t(&basis, q.as_ref(), r),
            &b,
            basis.len(),
            opts.alpha,
            opts.cg_max_iter,
            opts.cg_tol,
        )?;
        if linear {
            for (ci, d) in c.iter_mut().zip(&dc) {
                *ci += d;
            }
            history.extend(inner);
            u = solve(&c)?;
            break;
        }
        let current = term.norm(&u);
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-3 {
            let trial: Vec<f64> = c.iter().zip(&dc).map(|(a, d)| a + step * d).collect();
            let ut = solve(&trial)?;
            if term.norm(&ut) < current {
                c = trial;
                u = ut;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(term.norm(&u));
    }
    let terminal_norm = term.norm(&u);

    let sub_control = basis.trace(&sub_grid, &c);
    let mut control = BoundaryTrace::zeros(&grid);
    let nb = control.nodes().len();
    control.values_mut()[..nb * (switch_level + 1)].copy_from_slice(sub_control.values());
    let solution = solver.solve_semilinear(nl, &control, g, opts.strategy)?.solution;
    let weights = grid.space_weights();
    let continued_max = (switch_level..grid.n_levels())
        .map(|n| {
            solution
                .level(n)
                .iter()
                .zip(&weights)
                .map(|(v, w)| w * v * v)
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    Ok(ControlResult {
        control,
        coefficients: c,
        solution,
        switch_level,
        uncontrolled_norm,
        terminal_norm,
        history,
        continued_max,
        partial: uncontrolled_norm > 0.0 && terminal_norm > opts.target_ratio * uncontrolled_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::grid::Face;
    use std::f64::consts::PI;

    fn setup() -> (SpaceTimeGrid, BoundaryPortion) {
        (
            SpaceTimeGrid::new_1d(0.0, 1.0, 33, 40, 0.5).unwrap(),
            BoundaryPortion::Faces {
                faces: vec![Face::Lower(0)],
            },
        )
    }

    #[test]
    fn zero_state_needs_no_control() {
        let (grid, portion) = setup();
        let s = Solver::heat(&grid);
        let r = null_control(&s, &Nonlinearity::zero(), &Field::zeros_slice(&grid), 0.1, &portion, &ControlOptions::default()).unwrap();
        assert_eq!(r.terminal_norm, 0.0);
        assert!(r.control.max_abs() == 0.0 && !r.partial);
    }

    #[test]
    fn linear_steering_is_monotone_and_effective() {
        let (grid, portion) = setup();
        let s = Solver::heat(&grid);
        let g = Field::from_fn_slice(&grid, |x| (PI * x[0]).sin());
        let r = null_control(&s, &Nonlinearity::zero(), &g, 0.1, &portion, &ControlOptions::default()).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(r.reduction() <= 1e-2, "reduction {}", r.reduction());
        assert!(r.control.level(grid.steps()).iter().all(|v| *v == 0.0));
        assert!(r.control.level(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn glued_tail_keeps_the_state_small() {
        let (grid, portion) = setup();
        let s = Solver::heat(&grid);
        let nl = Nonlinearity::glued(Expr::parse("0.2*u^3").unwrap(), Expr::parse("u^2").unwrap(), 0.1, &grid).unwrap();
        let g = Field::from_fn_slice(&grid, |x| 0.5 * (PI * x[0]).sin());
        let r = null_control(&s, &nl, &g, 0.1, &portion, &ControlOptions::default()).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.continued_max <= 10.0 * r.terminal_norm, "{} vs {}", r.continued_max, r.terminal_norm);
    }

    #[test]
    fn rejects_gaps_off_the_time_grid() {
        let (grid, portion) = setup();
        let s = Solver::heat(&grid);
        let g = Field::zeros_slice(&grid);
        assert!(null_control(&s, &Nonlinearity::zero(), &g, 0.013, &portion, &ControlOptions::default()).is_err());
    }
}
