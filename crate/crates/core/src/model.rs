//! Coefficients of the parabolic model: the diffusion tensor γ(x,t) and the
//! zeroth-order term a(x,t,u).
//!
//! The model equation is `u_t − ∇·(γ∇u) + a(x,t,u) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Env, Expr, Var};
use crate::grid::{Domain, Field, SpaceTimeGrid};

/// Number of u-derivatives computed when a nonlinearity is built.
pub const CACHED_ORDERS: usize = 6;

/// Below this |z| the frozen quotient blends towards ∂_u a(·,0).
pub const SWITCH_THRESHOLD: f64 = 1e-8;

fn eval_at(e: &Expr, x: [f64; 2], t: f64, u: f64) -> Result<f64> {
    e.eval(&Env::new(x, t, u)).map_err(|message| Error::Eval {
        x,
        t,
        u,
        message,
    })
}

/// Samples a (u-free) expression on every node of Q.
pub fn sample_field(e: &Expr, grid: &SpaceTimeGrid) -> Result<Field> {
    let mut values = Vec::with_capacity(grid.n_space() * grid.n_levels());
    for n in 0..grid.n_levels() {
        let t = grid.time(n);
        for k in 0..grid.n_space() {
            values.push(eval_at(e, grid.coord(k), t, 0.0)?);
        }
    }
    Field::from_values(grid, Domain::Cylinder, values)
}

/// Samples a (t- and u-free) expression on the nodes of Ω.
pub fn sample_slice(e: &Expr, grid: &SpaceTimeGrid) -> Result<Field> {
    let values = (0..grid.n_space())
        .map(|k| eval_at(e, grid.coord(k), 0.0, 0.0))
        .collect::<Result<Vec<_>>>()?;
    Field::from_values(grid, Domain::Slice, values)
}

/// Symmetric diffusion tensor with entries γ11, γ12, γ22 in (x, y, t).
#[derive(Debug, Clone)]
pub struct DiffusionTensor {
    g11: Expr,
    g12: Expr,
    g22: Expr,
    rho0: f64,
}

impl DiffusionTensor {
    pub fn identity() -> Self {
        Self {
            g11: Expr::constant(1.0),
            g12: Expr::constant(0.0),
            g22: Expr::constant(1.0),
            rho0: 0.5,
        }
    }

    /// γ = s(x,t)·I.
    pub fn scalar(s: Expr, rho0: f64) -> Result<Self> {
        Self::new(s.clone(), Expr::constant(0.0), s, rho0)
    }

    pub fn new(g11: Expr, g12: Expr, g22: Expr, rho0: f64) -> Result<Self> {
        if !(rho0 > 0.0 && rho0 < 1.0) {
            return Err(Error::invalid("ellipticity constant must lie in (0, 1)"));
        }
        for e in [&g11, &g12, &g22] {
            if e.depends_on(Var::U) {
                return Err(Error::invalid("diffusion tensor may not depend on u"));
            }
        }
        Ok(Self { g11, g12, g22, rho0 })
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn is_identity(&self) -> bool {
        self.g11.as_const() == Some(1.0)
            && self.g12.as_const() == Some(0.0)
            && self.g22.as_const() == Some(1.0)
    }

    pub fn depends_on_time(&self) -> bool {
        [&self.g11, &self.g12, &self.g22]
            .iter()
            .any(|e| e.depends_on(Var::T))
    }

    /// `[γ11, γ12, γ22]` at a point.
    pub fn eval(&self, x: [f64; 2], t: f64) -> Result<[f64; 3]> {
        Ok([
            eval_at(&self.g11, x, t, 0.0)?,
            eval_at(&self.g12, x, t, 0.0)?,
            eval_at(&self.g22, x, t, 0.0)?,
        ])
    }

    /// Checks that sampled eigenvalues lie in `[ρ₀, 1/ρ₀]` on every node.
    pub fn validate(&self, grid: &SpaceTimeGrid) -> Result<()> {
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for k in 0..grid.n_space() {
                let x = grid.coord(k);
                let [a, b, d] = self.eval(x, t)?;
                let (lo, hi) = if grid.dim() == 1 {
                    (a, a)
                } else {
                    let m = 0.5 * (a + d);
                    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
                    (m - r, m + r)
                };
                if lo < self.rho0 || hi > 1.0 / self.rho0 {
                    return Err(Error::invalid(format!(
                        "diffusion tensor eigenvalues [{lo}, {hi}] leave [{}, {}] at x={x:?}, t={t}",
                        self.rho0,
                        1.0 / self.rho0
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for DiffusionTensor {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class")]
pub enum ClassTag {
    /// C¹ nonlinearity under the sub-√log growth condition.
    AT,
    /// `a₀` on `t ≤ switch_time`, a zero-at-zero tail `c` afterwards.
    BT { switch_time: f64 },
    /// Analytic in u with `b(x,t,0) = 0`.
    AdmissibleAnalytic,
    /// `q(x,t)·u`.
    LinearPotential,
}

#[derive(Debug, Clone)]
struct Piece {
    derivs: Vec<Expr>,
}

impl Piece {
    fn new(expr: Expr) -> Self {
        let mut derivs = vec![expr];
        for _ in 0..CACHED_ORDERS {
            let d = derivs.last().map(|e| e.derivative(Var::U)).unwrap_or_else(|| Expr::constant(0.0));
            derivs.push(d);
        }
        Self { derivs }
    }

    fn expr(&self) -> &Expr {
        &self.derivs[0]
    }

    fn eval(&self, x: [f64; 2], t: f64, u: f64, k: usize) -> Result<f64> {
        if k < self.derivs.len() {
            return eval_at(&self.derivs[k], x, t, u);
        }
        let mut e = self.derivs[self.derivs.len() - 1].clone();
        for _ in self.derivs.len() - 1..k {
            e = e.derivative(Var::U);
        }
        eval_at(&e, x, t, u)
    }
}

/// The term a(x,t,u) (or b) together with its cached u-derivatives.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    main: Piece,
    tail: Option<Piece>,
    class: ClassTag,
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self {
            main: Piece::new(Expr::constant(0.0)),
            tail: None,
            class: ClassTag::AdmissibleAnalytic,
        }
    }

    /// A general `𝒜_T`-type term; no structural checks beyond parsing.
    pub fn general(expr: Expr) -> Self {
        Self {
            main: Piece::new(expr),
            tail: None,
            class: ClassTag::AT,
        }
    }

    pub fn parse(src: &str) -> Result<Self> {
        Ok(Self::general(Expr::parse(src)?))
    }

    /// `q(x,t)·u` from an expression for q.
    pub fn linear_potential(q: Expr) -> Result<Self> {
        if q.depends_on(Var::U) {
            return Err(Error::invalid("potential may not depend on u"));
        }
        Ok(Self {
            main: Piece::new(crate::expr::mul(q, Expr::var(Var::U))),
            tail: None,
            class: ClassTag::LinearPotential,
        })
    }

    /// Analytic term that must vanish at u = 0; checked on every grid node.
    pub fn admissible_analytic(expr: Expr, grid: &SpaceTimeGrid) -> Result<Self> {
        check_zero_at_zero(&expr, grid, 0.0, f64::INFINITY)?;
        Ok(Self {
            main: Piece::new(expr),
            tail: None,
            class: ClassTag::AdmissibleAnalytic,
        })
    }

    /// Glued term: `a₀` for `t ≤ T − ε`, `c` for `t > T − ε`, with `c(·,·,0) = 0`
    /// checked on the grid nodes of the tail window.
    pub fn glued(a0: Expr, c: Expr, eps: f64, grid: &SpaceTimeGrid) -> Result<Self> {
        if !(eps > 0.0 && eps < grid.horizon()) {
            return Err(Error::invalid("glue width must lie in (0, T)"));
        }
        let switch_time = grid.horizon() - eps;
        check_zero_at_zero(&c, grid, switch_time, f64::INFINITY)?;
        Ok(Self {
            main: Piece::new(a0),
            tail: Some(Piece::new(c)),
            class: ClassTag::BT { switch_time },
        })
    }

    pub fn class(&self) -> ClassTag {
        self.class
    }

    pub fn expr(&self) -> &Expr {
        self.main.expr()
    }

    pub fn tail_expr(&self) -> Option<&Expr> {
        self.tail.as_ref().map(|p| p.expr())
    }

    pub fn is_zero(&self) -> bool {
        self.main.expr().is_zero() && self.tail.as_ref().is_none_or(|p| p.expr().is_zero())
    }

    /// True when the term is affine in u, so a single linear solve suffices.
    pub fn is_affine(&self) -> bool {
        self.main.derivs[2].is_zero() && self.tail.as_ref().is_none_or(|p| p.derivs[2].is_zero())
    }

    fn piece(&self, t: f64) -> &Piece {
        match (&self.tail, self.class) {
            (Some(p), ClassTag::BT { switch_time }) if t > switch_time => p,
            _ => &self.main,
        }
    }

    /// `∂_u^k a(x,t,u)`.
    pub fn evaluate(&self, x: [f64; 2], t: f64, u: f64, k: usize) -> Result<f64> {
        self.piece(t).eval(x, t, u, k)
    }

    /// Restriction to `t ≤ T − ε` as a stand-alone term (the `a₀` part).
    pub fn main_part(&self) -> Nonlinearity {
        Nonlinearity {
            main: self.main.clone(),
            tail: None,
            class: match self.class {
                ClassTag::BT { .. } => ClassTag::AT,
                c => c,
            },
        }
    }
}

fn check_zero_at_zero(e: &Expr, grid: &SpaceTimeGrid, t_from: f64, t_to: f64) -> Result<()> {
    for n in 0..grid.n_levels() {
        let t = grid.time(n);
        if t < t_from || t > t_to {
            continue;
        }
        for k in 0..grid.n_space() {
            let x = grid.coord(k);
            let v = eval_at(e, x, t, 0.0)?;
            if v.abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "term must vanish at u = 0, found {v:e} at x={x:?}, t={t}"
                )));
            }
        }
    }
    Ok(())
}

/// Frozen potential `q_z = (a(x,t,z) − a(x,t,0))/z`, equal to `b(x,t,z)/z`
/// whenever `b(x,t,0) = 0`. Near `z = 0` it blends linearly into `∂_u a(x,t,0)`.
pub fn freeze_quotient(nl: &Nonlinearity, z: &Field) -> Result<Field> {
    let grid = *z.grid();
    let mut out = z.clone();
    let m = grid.n_space();
    for n in 0..z.n_levels() {
        let t = match z.domain() {
            Domain::Cylinder => grid.time(n),
            Domain::Slice => 0.0,
        };
        for k in 0..m {
            let x = grid.coord(k);
            let zv = z.at(k, n);
            let q = frozen_value(nl, x, t, zv)?;
            if !q.is_finite() {
                return Err(Error::NonFinite { node: k, level: n });
            }
            out.level_mut(n)[k] = q;
        }
    }
    Ok(out)
}

pub(crate) fn frozen_value(nl: &Nonlinearity, x: [f64; 2], t: f64, z: f64) -> Result<f64> {
    let a0 = nl.evaluate(x, t, 0.0, 0)?;
    let quotient = |s: f64| -> Result<f64> { Ok((nl.evaluate(x, t, s, 0)? - a0) / s) };
    if z.abs() > SWITCH_THRESHOLD {
        return quotient(z);
    }
    let d0 = nl.evaluate(x, t, 0.0, 1)?;
    let w = z.abs() / SWITCH_THRESHOLD;
    if w == 0.0 {
        return Ok(d0);
    }
    let edge = quotient(SWITCH_THRESHOLD.copysign(z))?;
    Ok((1.0 - w) * d0 + w * edge)
}

/// Coefficient fields `∂_u^k b(x,t,ũ(x,t))`, k = 0..=order, along a base solution.
#[derive(Debug, Clone)]
pub struct TaylorTable {
    pub base: Field,
    pub coeffs: Vec<Field>,
}

impl TaylorTable {
    pub fn build(nl: &Nonlinearity, base: &Field, order: usize) -> Result<Self> {
        let grid = *base.grid();
        let mut coeffs = Vec::with_capacity(order + 1);
        for k in 0..=order {
            let mut f = base.clone();
            for n in 0..base.n_levels() {
                let t = grid.time(n);
                for node in 0..grid.n_space() {
                    let v = nl.evaluate(grid.coord(node), t, base.at(node, n), k)?;
                    f.level_mut(n)[node] = v;
                }
            }
            coeffs.push(f);
        }
        Ok(Self {
            base: base.clone(),
            coeffs,
        })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthReport {
    /// Advisory when true; a sampled certificate of violation when false.
    pub satisfies: bool,
    /// `(y, sup_{x,t} ∂_y a(x,t,y) / ln^{1/2} y)` samples.
    pub curve: Vec<(f64, f64)>,
    /// Maxima of the curve over consecutive log-spaced windows.
    pub window_max: Vec<f64>,
    /// First window pair `(i, j)` with `window_max[j] > window_max[i]`.
    pub witness: Option<(usize, usize)>,
}

/// Sampled check of `limsup_{y→∞} ∂_y a / ln^{1/2}|y| = 0`, uniformly in (x,t).
///
/// The y-range `[e, y_max]` is log-spaced and cut into windows; the verdict
/// requires non-increasing window maxima with the last strictly below the
/// first. Sampling in (x, t) uses every node of `grid`.
pub fn check_growth(
    nl: &Nonlinearity,
    grid: &SpaceTimeGrid,
    y_max: f64,
    samples: usize,
) -> Result<GrowthReport> {
    let e = std::f64::consts::E;
    if !(y_max > e) {
        return Err(Error::invalid("y_max must exceed e"));
    }
    if samples < 8 {
        return Err(Error::invalid("need at least 8 samples"));
    }
    let (l0, l1) = (1.0f64, y_max.ln());
    let mut curve = Vec::with_capacity(samples);
    for s in 0..samples {
        let ly = l0 + (l1 - l0) * s as f64 / (samples - 1) as f64;
        let y = if s == 0 { e } else { ly.exp() };
        let mut sup = f64::NEG_INFINITY;
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for k in 0..grid.n_space() {
                let d = nl.evaluate(grid.coord(k), t, y, 1)?;
                sup = sup.max(d);
            }
        }
        curve.push((y, sup / ly.sqrt()));
    }
    let windows = 8.min(samples / 2);
    let per = samples / windows;
    let window_max: Vec<f64> = (0..windows)
        .map(|w| {
            let end = if w + 1 == windows { samples } else { (w + 1) * per };
            curve[w * per..end]
                .iter()
                .fold(f64::NEG_INFINITY, |m, p| m.max(p.1))
        })
        .collect();
    let tol = 1e-12;
    let mut witness = None;
    for w in 1..windows {
        if window_max[w] > window_max[w - 1] + tol * window_max[w - 1].abs().max(1.0) {
            witness = Some((w - 1, w));
            break;
        }
    }
    if witness.is_none() && window_max[windows - 1] >= window_max[0] && window_max[0] > 0.0 {
        witness = Some((0, windows - 1));
    }
    Ok(GrowthReport {
        satisfies: witness.is_none(),
        curve,
        window_max,
        witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new_1d(0.0, 1.0, 5, 4, 1.0).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let b = Nonlinearity::parse("u^3").unwrap();
        assert_eq!(b.evaluate([0.0; 2], 0.0, 2.0, 2).unwrap(), 12.0);

        let q = Nonlinearity::linear_potential(Expr::parse("1 + x*t").unwrap()).unwrap();
        for u in [-3.0, 0.0, 5.0] {
            assert_eq!(q.evaluate([0.5, 0.0], 2.0, u, 1).unwrap(), 2.0);
        }

        let b = Nonlinearity::parse("sin(x)*exp(u)").unwrap();
        let v = b.evaluate([PI / 2.0, 0.0], 0.0, 0.0, 3).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        // beyond the cache
        let v = b.evaluate([PI / 2.0, 0.0], 0.0, 0.0, CACHED_ORDERS + 2).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn evaluation_errors_carry_location() {
        let b = Nonlinearity::parse("ln(u)").unwrap();
        match b.evaluate([0.25, 0.0], 0.5, -1.0, 0) {
            Err(Error::Eval { x, t, u, .. }) => {
                assert_eq!((x[0], t, u), (0.25, 0.5, -1.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn admissible_class_gate() {
        let g = grid();
        assert!(Nonlinearity::admissible_analytic(Expr::parse("u^2 + x*u").unwrap(), &g).is_ok());
        assert!(Nonlinearity::admissible_analytic(Expr::parse("u^2 + x").unwrap(), &g).is_err());
        assert!(Nonlinearity::admissible_analytic(Expr::parse("cos(u)").unwrap(), &g).is_err());
    }

    #[test]
    fn glued_class_switches_in_time() {
        let g = SpaceTimeGrid::new_1d(0.0, 1.0, 5, 10, 1.0).unwrap();
        let a0 = Expr::parse("1 + sin(u)").unwrap();
        let c = Expr::parse("u^3").unwrap();
        let nl = Nonlinearity::glued(a0.clone(), c, 0.2, &g).unwrap();
        assert_eq!(nl.evaluate([0.5, 0.0], 0.5, 0.0, 0).unwrap(), 1.0);
        assert_eq!(nl.evaluate([0.5, 0.0], 0.9, 2.0, 0).unwrap(), 8.0);
        assert!(Nonlinearity::glued(a0.clone(), a0, 0.2, &g).is_err());
    }

    #[test]
    fn freeze_examples() {
        let g = grid();
        let b = Nonlinearity::parse("u^3").unwrap();
        let q = freeze_quotient(&b, &Field::from_fn(&g, |_, _| 2.0)).unwrap();
        assert!(q.values().iter().all(|&v| (v - 4.0).abs() < 1e-14));
        let q = freeze_quotient(&b, &Field::zeros(&g)).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));

        let s = Nonlinearity::parse("sin(u)").unwrap();
        let q = freeze_quotient(&s, &Field::from_fn(&g, |_, _| 1e-12)).unwrap();
        assert!(q.values().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn freeze_is_continuous_across_the_switch() {
        let s = Nonlinearity::parse("sin(u) + u^2").unwrap();
        let below = frozen_value(&s, [0.0; 2], 0.0, SWITCH_THRESHOLD * (1.0 - 1e-9)).unwrap();
        let above = frozen_value(&s, [0.0; 2], 0.0, SWITCH_THRESHOLD * (1.0 + 1e-9)).unwrap();
        assert!((below - above).abs() < 1e-7);
    }

    #[test]
    fn growth_examples() {
        let g = grid();
        let r = check_growth(&Nonlinearity::parse("sin(u)").unwrap(), &g, 1e6, 400).unwrap();
        assert!(r.satisfies);
        assert!(r.curve.last().unwrap().1 < 0.5);

        let r = check_growth(&Nonlinearity::parse("u*ln(1 + u^2)^0.25").unwrap(), &g, 1e6, 200)
            .unwrap();
        assert!(r.satisfies, "{:?}", r.window_max);

        let r = check_growth(&Nonlinearity::parse("u^2").unwrap(), &g, 1e6, 200).unwrap();
        assert!(!r.satisfies);
        assert!(r.witness.is_some());
    }

    #[test]
    fn tensor_validation() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [4, 4], 2, 1.0).unwrap();
        DiffusionTensor::identity().validate(&g).unwrap();
        let bad = DiffusionTensor::new(
            Expr::parse("1").unwrap(),
            Expr::parse("0.99").unwrap(),
            Expr::parse("1").unwrap(),
            0.5,
        )
        .unwrap();
        assert!(bad.validate(&g).is_err());
        assert!(DiffusionTensor::scalar(Expr::parse("1 + u").unwrap(), 0.5).is_err());
    }

    #[test]
    fn taylor_table_base_order() {
        let g = grid();
        let b = Nonlinearity::parse("u^3 + x*u").unwrap();
        let base = Field::from_fn(&g, |x, t| x[0] + t);
        let tab = TaylorTable::build(&b, &base, 3).unwrap();
        assert_eq!(tab.order(), 3);
        for n in 0..g.n_levels() {
            for k in 0..g.n_space() {
                let u = base.at(k, n);
                let x = g.coord(k)[0];
                assert!((tab.coeffs[0].at(k, n) - (u * u * u + x * u)).abs() < 1e-14);
                assert_eq!(tab.coeffs[3].at(k, n), 6.0);
            }
        }
    }

    proptest! {
        #[test]
        fn first_derivative_matches_fd(x in 0.0f64..1.0, t in 0.0f64..1.0, u in -2.0f64..2.0) {
            let b = Nonlinearity::parse("x*u^3 + tanh(u*t) + exp(-u^2)").unwrap();
            let h = 1e-4;
            let fd = (b.evaluate([x, 0.0], t, u + h, 0).unwrap()
                - b.evaluate([x, 0.0], t, u - h, 0).unwrap()) / (2.0 * h);
            let d = b.evaluate([x, 0.0], t, u, 1).unwrap();
            prop_assert!((fd - d).abs() < 1e-6 * (1.0 + d.abs()));
        }

        #[test]
        fn frozen_quotient_reproduces_term(z in -1e-3f64..1e-3, x in 0.0f64..1.0) {
            let b = Nonlinearity::parse("x*u + u^2 + sin(u)").unwrap();
            let q = frozen_value(&b, [x, 0.0], 0.0, z).unwrap();
            let bz = b.evaluate([x, 0.0], 0.0, z, 0).unwrap();
            prop_assert!((bz - q * z).abs() <= 1e-12 + 1e-6 * z.abs());
        }
    }
}
