//! Runge approximation by boundary-data least squares.
//!
//! Candidate data are products of face shapes `cos(mπs)` (tangential
//! coordinate `s`, constant in 1D) and time modes `sin((k + ½)πt/T)`, which
//! vanish at `t = 0` so every candidate is compatible with zero initial data.
//! The basis is enumerated by total degree, so every prefix is nested in the
//! next. Columns `V_{f_i}` are orthogonalized in the weighted `L²` product of
//! the fitting region, which yields the gap of every prefix at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Solver;
use crate::grid::{BoundaryPortion, BoundaryTrace, Domain, Face, Field, SpaceTimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RungeMode {
    /// Data anywhere on Σ, gap in `L²(Q)`.
    Full,
    /// Data vanishing on `excluded`, gap in `L²` of the box `[lower, upper] × (0, T)`.
    Partial {
        excluded: BoundaryPortion,
        lower: [f64; 2],
        upper: [f64; 2],
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct RungeResult {
    /// Basis sizes and the gap `‖Σ c_i V_{f_i} − v‖` achieved with each.
    pub gaps: Vec<(usize, f64)>,
    pub target_norm: f64,
    /// Coefficients for the largest size.
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub boundary: BoundaryTrace,
    #[serde(skip)]
    pub fit: Field,
    /// Basis members dropped as numerically dependent on earlier ones.
    pub dropped: Vec<usize>,
}

impl RungeResult {
    pub fn gap(&self) -> f64 {
        self.gaps.last().map_or(f64::NAN, |g| g.1)
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.gaps.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Member {
    face: usize,
    space: usize,
    time: usize,
}

fn enumerate(n: usize, faces: usize, space_modes: bool) -> Vec<Member> {
    let mut out = Vec::with_capacity(n);
    let mut degree = 0;
    while out.len() < n {
        for space in 0..=if space_modes { degree } else { 0 } {
            for face in 0..faces {
                out.push(Member {
                    face,
                    space,
                    time: degree - space,
                });
            }
        }
        degree += 1;
    }
    out.truncate(n);
    out
}

/// Tangential coordinate in `[0, 1]` of a node on a face of a 2D grid.
fn tangential(grid: &SpaceTimeGrid, face: Face, node: usize) -> f64 {
    let other = 1 - face.axis();
    let x = grid.coord(node)[other];
    (x - grid.lower()[other]) / (grid.upper()[other] - grid.lower()[other])
}

fn trace_of(grid: &SpaceTimeGrid, faces: &[Face], allowed: &[bool], m: Member) -> BoundaryTrace {
    let face = faces[m.face];
    let on_face = grid.face_nodes(face);
    let horizon = grid.horizon();
    let mut f = BoundaryTrace::zeros(grid);
    let slots: Vec<(usize, f64)> = f
        .nodes()
        .iter()
        .enumerate()
        .filter(|(i, k)| allowed[*i] && on_face.contains(k))
        .map(|(i, &k)| {
            let shape = if grid.dim() == 2 {
                (m.space as f64 * std::f64::consts::PI * tangential(grid, face, k)).cos()
            } else {
                1.0
            };
            (i, shape)
        })
        .collect();
    let nb = f.nodes().len();
    for n in 0..grid.n_levels() {
        let s = ((m.time as f64 + 0.5) * std::f64::consts::PI * grid.time(n) / horizon).sin();
        for &(i, shape) in &slots {
            f.values_mut()[n * nb + i] = shape * s;
        }
    }
    f
}

/// Fits `target` by solutions of the linear equation with potential `q`
/// driven by nested boundary bases of every size in `sizes`.
pub fn runge_fit(
    solver: &Solver,
    q: Option<&Field>,
    target: &Field,
    mode: &RungeMode,
    sizes: &[usize],
) -> Result<RungeResult> {
    let grid = *solver.grid();
    if target.grid() != &grid || target.domain() != Domain::Cylinder {
        return Err(Error::invalid("target must be a space-time field on the solver grid"));
    }
    if sizes.is_empty() || sizes.contains(&0) || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("basis sizes must be positive and increasing"));
    }
    let boundary = grid.boundary_nodes();
    let (allowed, region): (Vec<bool>, Vec<bool>) = match mode {
        RungeMode::Full => (vec![true; boundary.len()], vec![true; grid.n_space()]),
        RungeMode::Partial { excluded, lower, upper } => {
            let ex = excluded.classify(&grid)?;
            let inside = (0..grid.n_space())
                .map(|k| {
                    let x = grid.coord(k);
                    (0..grid.dim()).all(|a| x[a] >= lower[a] - 1e-12 && x[a] <= upper[a] + 1e-12)
                })
                .collect::<Vec<_>>();
            if !inside.iter().any(|b| *b) {
                return Err(Error::invalid("fitting region contains no nodes"));
            }
            (boundary.iter().map(|k| !ex.contains(k)).collect(), inside)
        }
    };
    let faces: Vec<Face> = grid
        .faces()
        .into_iter()
        .filter(|f| {
            grid.face_nodes(*f)
                .iter()
                .any(|k| boundary.iter().position(|b| b == k).is_some_and(|i| allowed[i]))
        })
        .collect();
    if faces.is_empty() {
        return Err(Error::invalid("every boundary face is excluded"));
    }
    let n_max = *sizes.last().expect("sizes checked non-empty");
    let members = enumerate(n_max, faces.len(), grid.dim() == 2);

    let m = grid.n_space();
    let sw = grid.space_weights();
    let tw = grid.time_weights();
    let weights: Vec<f64> = (0..grid.n_levels() * m)
        .map(|idx| if region[idx % m] { sw[idx % m] * tw[idx / m] } else { 0.0 })
        .collect();
    let inner = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&weights).map(|((x, y), w)| w * x * y).sum() };

    let g0 = Field::zeros_slice(&grid);
    let v = target.values();
    let target_norm = inner(v, v).sqrt();
    let mut residual = v.to_vec();
    let mut q_cols: Vec<Vec<f64>> = Vec::new();
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut proj: Vec<f64> = Vec::new();
    let mut dropped = Vec::new();
    let mut gaps = Vec::new();
    let mut traces = Vec::with_capacity(n_max);
    for (i, member) in members.iter().enumerate() {
        let f = trace_of(&grid, &faces, &allowed, *member);
        let col = solver.solve_linear(q, &f, &g0, None)?.solution.into_values();
        traces.push(f);
        let col_norm = inner(&col, &col).sqrt();
        let mut w = col.clone();
        let mut r = vec![0.0; q_cols.len() + 1];
        for _ in 0..2 {
            for (j, qj) in q_cols.iter().enumerate() {
                let c = inner(qj, &w);
                r[j] += c;
                for (wk, qk) in w.iter_mut().zip(qj) {
                    *wk -= c * qk;
                }
            }
        }
        let wn = inner(&w, &w).sqrt();
        if wn > 1e-10 * col_norm && col_norm > 0.0 {
            for wk in w.iter_mut() {
                *wk /= wn;
            }
            r[q_cols.len()] = wn;
            let c = inner(&w, &residual);
            for (rk, wk) in residual.iter_mut().zip(&w) {
                *rk -= c * wk;
            }
            proj.push(c);
            q_cols.push(w);
            r_cols.push(r);
            kept.push(i);
        } else {
            dropped.push(i);
        }
        if sizes.contains(&(i + 1)) {
            gaps.push((i + 1, inner(&residual, &residual).max(0.0).sqrt()));
        }
    }

    let k = kept.len();
    let mut c_kept = vec![0.0; k];
    for row in (0..k).rev() {
        let mut s = proj[row];
        for col in row + 1..k {
            s -= r_cols[col][row] * c_kept[col];
        }
        c_kept[row] = s / r_cols[row][row];
    }
    let mut coefficients = vec![0.0; n_max];
    for (j, &i) in kept.iter().enumerate() {
        coefficients[i] = c_kept[j];
    }
    let mut bdata = BoundaryTrace::zeros(&grid);
    for (c, f) in coefficients.iter().zip(&traces) {
        for (b, v) in bdata.values_mut().iter_mut().zip(f.values()) {
            *b += c * v;
        }
    }
    let fit = solver.solve_linear(q, &bdata, &g0, None)?.solution;
    Ok(RungeResult {
        gaps,
        target_norm,
        coefficients,
        boundary: bdata,
        fit,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new_1d(0.0, 1.0, 33, 64, 0.5).unwrap()
    }

    fn target(s: &Solver) -> Field {
        let g = s.grid();
        let f = BoundaryTrace::from_fn(g, |x, t| (1.0 + x[0]) * t * (3.0 * t).exp());
        s.solve_linear(None, &f, &Field::zeros_slice(g), None).unwrap().solution
    }

    #[test]
    fn basis_member_is_fit_exactly() {
        let g = grid();
        let s = Solver::heat(&g);
        let faces = g.faces();
        let allowed = vec![true; g.boundary_nodes().len()];
        let f = trace_of(&g, &faces, &allowed, Member { face: 1, space: 0, time: 1 });
        let v = s.solve_linear(None, &f, &Field::zeros_slice(&g), None).unwrap().solution;
        let r = runge_fit(&s, None, &v, &RungeMode::Full, &[4]).unwrap();
        assert!(r.gap() < 1e-10 * r.target_norm, "{}", r.gap());
        assert!((r.fit.sub(&v)).max_abs() < 1e-9);
    }

    #[test]
    fn gaps_shrink_with_nested_bases() {
        let g = grid();
        let s = Solver::heat(&g);
        let v = target(&s);
        let r = runge_fit(&s, None, &v, &RungeMode::Full, &[2, 4, 8, 16]).unwrap();
        assert!(r.strictly_decreasing(), "{:?}", r.gaps);
        let direct = r.fit.sub(&v).l2();
        assert!((direct - r.gap()).abs() <= 1e-6 * r.target_norm, "{direct} vs {}", r.gap());
    }

    #[test]
    fn partial_data_vanish_on_the_excluded_face() {
        let g = grid();
        let s = Solver::heat(&g);
        let v = target(&s);
        let mode = RungeMode::Partial {
            excluded: BoundaryPortion::Faces {
                faces: vec![Face::Upper(0)],
            },
            lower: [0.0, 0.0],
            upper: [0.3, 0.0],
        };
        let r = runge_fit(&s, None, &v, &mode, &[2, 4, 8]).unwrap();
        let last = g.boundary_nodes().len() - 1;
        assert!((0..g.n_levels()).all(|n| r.boundary.level(n)[last] == 0.0));
        assert!(r.gaps.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn enumeration_is_nested() {
        let a = enumerate(7, 4, true);
        let b = enumerate(12, 4, true);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.face, x.space, x.time), (y.face, y.space, y.time));
        }
    }

    #[test]
    fn rejects_unsorted_sizes() {
        let g = grid();
        let s = Solver::heat(&g);
        let v = target(&s);
        assert!(runge_fit(&s, None, &v, &RungeMode::Full, &[8, 4]).is_err());
    }
}
