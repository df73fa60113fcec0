//! Higher-order linearization of the solution map in boundary amplitudes.
//!
//! For boundary data `f₀ + Σ ε_ℓ f_ℓ` the mixed derivative over a probe set
//! `S` at `ε = 0` solves
//!
//! ```text
//! w_t − ∇·(γ∇w) + a_u(ũ) w = −Σ_π a^{(|π|)}(ũ) Π_{B∈π} w_B
//! ```
//!
//! where `π` runs over the set partitions of `S` with at least two blocks and
//! `w_{ℓ} = v^(ℓ)` solves the linearized equation with data `f_ℓ`. Each order
//! is computed twice: by this direct recursion and by the alternating corner
//! sum of nonlinear solves over `{0, ε}^M`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::dnmap::{self, DNMeasurement};
use crate::error::{Error, Result};
use crate::forward::{Solver, Strategy};
use crate::grid::{BoundaryPortion, BoundaryTrace, Field, SpaceTimeGrid};
use crate::model::Nonlinearity;

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_AMPLITUDES: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// `3s² − 2s³` clipped to [0, 1]: vanishes with its derivative at `s = 0`.
pub fn smooth_ramp(t: f64, ramp: f64) -> f64 {
    let s = (t / ramp).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Boundary data `f₀ + Σ ε_ℓ f_ℓ` and the amplitude schedule.
#[derive(Debug, Clone)]
pub struct ProbeFamily {
    pub base: BoundaryTrace,
    pub probes: Vec<BoundaryTrace>,
    pub amplitudes: Vec<f64>,
}

impl ProbeFamily {
    pub fn new(base: BoundaryTrace, probes: Vec<BoundaryTrace>, amplitudes: Vec<f64>) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::invalid("probe family is empty"));
        }
        for (i, p) in probes.iter().enumerate() {
            if p.grid() != base.grid() {
                return Err(Error::invalid(format!("probe {i} lives on a different grid")));
            }
            if p.level(0).iter().any(|v| *v != 0.0) {
                return Err(Error::invalid(format!("probe {i} does not vanish at t = 0")));
            }
        }
        if amplitudes.is_empty() || amplitudes.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::invalid("amplitudes must be positive and finite"));
        }
        Ok(Self {
            base,
            probes,
            amplitudes,
        })
    }

    /// Probes `r(t)·s_ℓ(x)` with the smooth ramp `r` over `[0, ramp]`, zero base.
    pub fn ramped(grid: &SpaceTimeGrid, shapes: &[&dyn Fn([f64; 2]) -> f64], ramp: f64, amplitudes: Vec<f64>) -> Result<Self> {
        if !(ramp > 0.0) {
            return Err(Error::invalid("ramp length must be positive"));
        }
        let probes = shapes
            .iter()
            .map(|s| BoundaryTrace::from_fn(grid, |x, t| smooth_ramp(t, ramp) * s(x)))
            .collect();
        Self::new(BoundaryTrace::zeros(grid), probes, amplitudes)
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        self.base.grid()
    }
}

/// Gap summary of one linearization order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub order: usize,
    pub probes: Vec<usize>,
    pub amplitudes: Vec<f64>,
    /// `‖quotient(ε) − direct‖_{L²(Q)}` per amplitude.
    pub gaps: Vec<f64>,
    pub relative_gaps: Vec<f64>,
    /// Gap of the Richardson combination of the two smallest amplitudes.
    pub extrapolated_gap: Option<f64>,
    /// Least-squares slope of log gap against log ε.
    pub slope: Option<f64>,
    /// Estimated rounding floor of the quotient relative to its size, per amplitude.
    pub noise_floor: Vec<f64>,
    pub noise_flagged: bool,
    pub corner_solves: usize,
}

impl RateReport {
    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        self.slope.is_some_and(|s| s >= lo && s <= hi)
    }
}

#[derive(Debug, Clone)]
pub struct OrderResult {
    pub direct: Field,
    /// Quotient at the smallest amplitude.
    pub quotient: Field,
    pub extrapolated: Option<Field>,
    pub report: RateReport,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Linearization around the solution `ũ` for data `(g, f₀)`.
pub struct Linearizer {
    solver: Solver,
    nl: Nonlinearity,
    g: Field,
    family: ProbeFamily,
    strategy: Strategy,
    base: Field,
    q: Field,
    derivs: Vec<Field>,
}

impl Linearizer {
    pub fn new(solver: &Solver, nl: &Nonlinearity, g: &Field, family: ProbeFamily, strategy: Strategy) -> Result<Self> {
        if family.grid() != solver.grid() || g.grid() != solver.grid() {
            return Err(Error::invalid("probe family and solver grids differ"));
        }
        let base = solver.solve_semilinear(nl, &family.base, g, strategy)?.solution;
        let mut derivs = Vec::with_capacity(MAX_ORDER + 1);
        for k in 0..=MAX_ORDER {
            derivs.push(solver.derivative_field(nl, &base, k)?);
        }
        let q = derivs[1].clone();
        Ok(Self {
            solver: solver.clone(),
            nl: nl.clone(),
            g: g.clone(),
            family,
            strategy,
            base,
            q,
            derivs,
        })
    }

    pub fn base_solution(&self) -> &Field {
        &self.base
    }

    /// `a_u(ũ)`, the potential of the first linearization.
    pub fn potential(&self) -> &Field {
        &self.q
    }

    pub fn family(&self) -> &ProbeFamily {
        &self.family
    }

    /// `∂_u^k a(·, ũ)`.
    pub fn derivative(&self, k: usize) -> Result<&Field> {
        self.derivs
            .get(k)
            .ok_or_else(|| Error::invalid(format!("derivative order {k} exceeds {MAX_ORDER}")))
    }

    fn check_probes(&self, probes: &[usize]) -> Result<()> {
        if probes.is_empty() || probes.len() > MAX_ORDER {
            return Err(Error::invalid(format!("order must lie in 1..={MAX_ORDER}")));
        }
        for &p in probes {
            if p >= self.family.probes.len() {
                return Err(Error::invalid(format!("probe index {p} out of range")));
            }
        }
        Ok(())
    }

    /// Direct solve of the mixed linearized equation over `probes`.
    pub fn direct(&self, probes: &[usize]) -> Result<Field> {
        self.check_probes(probes)?;
        let mut memo = HashMap::new();
        self.direct_mask(probes, (1usize << probes.len()) - 1, &mut memo)
    }

    fn direct_mask(&self, probes: &[usize], mask: usize, memo: &mut HashMap<usize, Field>) -> Result<Field> {
        if let Some(w) = memo.get(&mask) {
            return Ok(w.clone());
        }
        let grid = self.solver.grid();
        let zero_g = Field::zeros_slice(grid);
        let w = if mask.count_ones() == 1 {
            let f = &self.family.probes[probes[mask.trailing_zeros() as usize]];
            self.solver.solve_linear(Some(&self.q), f, &zero_g, None)?.solution
        } else {
            let mut src = Field::zeros(grid);
            for part in partitions(mask) {
                if part.len() < 2 {
                    continue;
                }
                let mut prod = self.derivs[part.len()].clone();
                for &b in &part {
                    prod = prod.mul(&self.direct_mask(probes, b, memo)?);
                }
                src.axpy(-1.0, &prod);
            }
            let f = BoundaryTrace::zeros(grid);
            self.solver.solve_linear(Some(&self.q), &f, &zero_g, Some(&src))?.solution
        };
        memo.insert(mask, w.clone());
        Ok(w)
    }

    /// Alternating corner sum over `{0, ε}^M` divided by `ε^M`.
    pub fn quotient(&self, probes: &[usize], eps: f64) -> Result<Field> {
        self.check_probes(probes)?;
        let m = probes.len();
        let corners: Vec<usize> = (1..1usize << m).collect();
        let sols = corners
            .par_iter()
            .map(|&c| {
                let mut f = self.family.base.clone();
                for (i, &p) in probes.iter().enumerate() {
                    if c & (1 << i) != 0 {
                        f.axpy(eps, &self.family.probes[p]);
                    }
                }
                Ok(self.solver.solve_semilinear(&self.nl, &f, &self.g, self.strategy)?.solution)
            })
            .collect::<Result<Vec<_>>>()?;
        let sign = |c: usize| if (m - c.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut sum = self.base.scaled(sign(0));
        for (c, u) in corners.iter().zip(&sols) {
            sum.axpy(sign(*c), u);
        }
        Ok(sum.scaled(eps.powi(m as i32).recip()))
    }

    /// Relative accuracy of a single nonlinear solve.
    fn solve_precision(&self) -> f64 {
        let o = self.solver.options();
        let tol = if self.nl.is_affine() || self.nl.is_zero() {
            0.0
        } else {
            match self.strategy {
                Strategy::Newton => o.newton_tol,
                Strategy::Picard => o.tol,
            }
        };
        tol.max(f64::EPSILON)
    }

    /// Quotients over the amplitude schedule against the direct solve.
    pub fn order(&self, probes: &[usize]) -> Result<OrderResult> {
        let direct = self.direct(probes)?;
        let m = probes.len();
        let amps = self.family.amplitudes.clone();
        let dn = direct.l2();
        let mut gaps = Vec::new();
        let mut floors = Vec::new();
        let mut quotients = Vec::new();
        let scale = self.base.max_abs() + amps.iter().fold(0.0f64, |a, e| a.max(*e)) * self.family.probes.iter().fold(0.0f64, |a, p| a.max(p.max_abs()));
        for &e in &amps {
            let qf = self.quotient(probes, e)?;
            gaps.push(qf.sub(&direct).l2());
            let size = qf.max_abs().max(direct.max_abs());
            let floor = (1usize << m) as f64 * self.solve_precision() * scale / e.powi(m as i32);
            floors.push(if size > 0.0 { floor / size } else { 0.0 });
            quotients.push(qf);
        }
        let mut order: Vec<usize> = (0..amps.len()).collect();
        order.sort_by(|a, b| amps[*a].total_cmp(&amps[*b]));
        let extrapolated = (amps.len() >= 2).then(|| {
            let (i, j) = (order[0], order[1]);
            let (ea, eb) = (amps[i], amps[j]);
            // Q(ε) = D + cε + O(ε²)
            let mut ex = quotients[i].scaled(eb / (eb - ea));
            ex.axpy(-ea / (eb - ea), &quotients[j]);
            ex
        });
        let report = RateReport {
            order: m,
            probes: probes.to_vec(),
            amplitudes: amps.clone(),
            relative_gaps: gaps.iter().map(|g| if dn > 0.0 { g / dn } else { *g }).collect(),
            extrapolated_gap: extrapolated.as_ref().map(|e| e.sub(&direct).l2()),
            slope: log_slope(&amps, &gaps),
            noise_flagged: floors.iter().any(|f| *f > 0.1),
            noise_floor: floors,
            gaps,
            corner_solves: amps.len() * ((1usize << m) - 1),
        };
        let quotient = quotients.swap_remove(order[0]);
        Ok(OrderResult {
            direct,
            quotient,
            extrapolated,
            report,
        })
    }

    pub fn first_order(&self, probe: usize) -> Result<OrderResult> {
        self.order(&[probe])
    }

    pub fn second_order(&self, p1: usize, p2: usize) -> Result<OrderResult> {
        self.order(&[p1, p2])
    }

    pub fn higher_order(&self, probes: &[usize]) -> Result<OrderResult> {
        self.order(probes)
    }
}

pub fn linearized_dn(field: &Field, portion: &BoundaryPortion) -> Result<DNMeasurement> {
    dnmap::measure(field, portion)
}

/// Set partitions of the bits of `mask`, each block given as a bit mask.
pub fn partitions(mask: usize) -> Vec<Vec<usize>> {
    if mask == 0 {
        return vec![vec![]];
    }
    let first = mask & mask.wrapping_neg();
    let rest = mask ^ first;
    let mut out = Vec::new();
    // every subset of `rest` joins the block of `first`
    let mut sub = rest;
    loop {
        let block = first | sub;
        for mut p in partitions(rest ^ sub) {
            p.push(block);
            out.push(p);
        }
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & rest;
    }
    out
}
