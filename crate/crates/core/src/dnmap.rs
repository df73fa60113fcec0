//! Dirichlet-to-Neumann measurements synthesized from solved fields.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Solver, Strategy};
use crate::grid::{entry_weights, BoundaryEntry, BoundaryPortion, BoundaryTrace, Domain, Field, SpaceTimeGrid};
use crate::model::Nonlinearity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    GaussianRelative,
    GaussianAbsolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub model: NoiseModel,
    pub level: f64,
    pub seed: u64,
    /// Standard deviation actually used.
    pub sigma: f64,
}

/// Normal-derivative trace on a boundary portion, one value per (entry, level).
#[derive(Debug, Clone, PartialEq)]
pub struct DNMeasurement {
    grid: SpaceTimeGrid,
    portion: BoundaryPortion,
    entries: Vec<BoundaryEntry>,
    values: Vec<f64>,
    noise: Option<NoiseRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementSidecar {
    pub portion: BoundaryPortion,
    pub noise: Option<NoiseRecord>,
    pub grid: SpaceTimeGrid,
    pub grid_digest: String,
    pub entries: usize,
    pub levels: usize,
}

/// One-sided second-order normal derivative `∂_ν u` at every entry of the
/// portion and every time level.
pub fn measure(u: &Field, portion: &BoundaryPortion) -> Result<DNMeasurement> {
    if u.domain() != Domain::Cylinder {
        return Err(Error::invalid("measurements need a field on Q"));
    }
    let grid = *u.grid();
    let entries = portion.entries(&grid)?;
    if entries.is_empty() {
        return Err(Error::invalid("boundary portion is empty"));
    }
    let stencil: Vec<(usize, usize, usize, f64)> = entries
        .iter()
        .map(|e| {
            let (n0, n1, n2) = inward_nodes(&grid, e);
            (n0, n1, n2, 1.0 / (2.0 * grid.spacing(e.face.axis())))
        })
        .collect();
    let ne = entries.len();
    let mut values = Vec::with_capacity(ne * grid.n_levels());
    for n in 0..grid.n_levels() {
        let lvl = u.level(n);
        for &(a, b, c, s) in &stencil {
            values.push(s * (3.0 * lvl[a] - 4.0 * lvl[b] + lvl[c]));
        }
    }
    Ok(DNMeasurement {
        grid,
        portion: portion.clone(),
        entries,
        values,
        noise: None,
    })
}

/// The boundary node and its first two inward neighbours along the face normal.
pub(crate) fn inward_nodes(grid: &SpaceTimeGrid, e: &BoundaryEntry) -> (usize, usize, usize) {
    let (i, j) = grid.ij(e.node);
    let axis = e.face.axis();
    let step = |s: usize| -> usize {
        match (e.face, axis) {
            (crate::grid::Face::Lower(_), 0) => grid.index(i + s, j),
            (crate::grid::Face::Upper(_), 0) => grid.index(i - s, j),
            (crate::grid::Face::Lower(_), _) => grid.index(i, j + s),
            (crate::grid::Face::Upper(_), _) => grid.index(i, j - s),
        }
    };
    (e.node, step(1), step(2))
}

/// Passive map: the trace generated by the initial data alone (f = 0).
pub fn passive_map(
    solver: &Solver,
    nl: &Nonlinearity,
    g: &Field,
    portion: &BoundaryPortion,
    strategy: Strategy,
) -> Result<DNMeasurement> {
    let f = BoundaryTrace::zeros(solver.grid());
    active_map(solver, nl, g, &f, portion, strategy)
}

/// Active map: the trace for imposed Dirichlet data `f`.
pub fn active_map(
    solver: &Solver,
    nl: &Nonlinearity,
    g: &Field,
    f: &BoundaryTrace,
    portion: &BoundaryPortion,
    strategy: Strategy,
) -> Result<DNMeasurement> {
    let r = solver.solve_semilinear(nl, f, g, strategy)?;
    measure(&r.solution, portion)
}

/// Adds reproducible Gaussian noise. `gaussian-relative` uses `σ = δ·rms(m)`,
/// `gaussian-absolute` uses `σ = δ`.
pub fn add_noise(m: &DNMeasurement, model: NoiseModel, level: f64, seed: u64) -> Result<DNMeasurement> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::invalid("noise level must be finite and nonnegative"));
    }
    let sigma = match model {
        NoiseModel::GaussianAbsolute => level,
        NoiseModel::GaussianRelative => {
            let ms = m.values.iter().map(|v| v * v).sum::<f64>() / m.values.len() as f64;
            level * ms.sqrt()
        }
    };
    let mut out = m.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut out.values {
            *v += normal.sample(&mut rng);
        }
    }
    out.noise = Some(NoiseRecord {
        model,
        level,
        seed,
        sigma,
    });
    Ok(out)
}

impl DNMeasurement {
    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn portion(&self) -> &BoundaryPortion {
        &self.portion
    }
    pub fn entries(&self) -> &[BoundaryEntry] {
        &self.entries
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn noise(&self) -> Option<&NoiseRecord> {
        self.noise.as_ref()
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let ne = self.entries.len();
        &self.values[n * ne..(n + 1) * ne]
    }

    /// Value for an entry index at a level.
    pub fn at(&self, entry: usize, level: usize) -> f64 {
        self.values[level * self.entries.len() + entry]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Quadrature weights per (entry, level), trapezoidal on faces and in time.
    pub fn weights(&self) -> Vec<f64> {
        let ws = entry_weights(&self.grid, &self.entries);
        let wt = self.grid.time_weights();
        let mut w = Vec::with_capacity(self.values.len());
        for t in &wt {
            for s in &ws {
                w.push(t * s);
            }
        }
        w
    }

    /// Discrete `L²(Σ-portion)` norm.
    pub fn norm(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn inner(&self, other: &DNMeasurement) -> f64 {
        self.weights()
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    fn same_layout(&self, other: &DNMeasurement) -> Result<()> {
        if self.grid != other.grid || self.entries != other.entries {
            return Err(Error::invalid("measurements live on different portions or grids"));
        }
        Ok(())
    }

    pub fn sub(&self, other: &DNMeasurement) -> Result<DNMeasurement> {
        self.same_layout(other)?;
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
        out.noise = None;
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> DNMeasurement {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<DNMeasurement> {
        if values.len() != self.values.len() {
            return Err(Error::invalid("value count does not match the measurement layout"));
        }
        let mut out = self.clone();
        out.values = values;
        Ok(out)
    }

    /// Keeps the entries that also belong to `portion`.
    pub fn restrict(&self, portion: &BoundaryPortion) -> Result<DNMeasurement> {
        let keep = portion.entries(&self.grid)?;
        let idx: Vec<usize> = keep
            .iter()
            .map(|e| {
                self.entries
                    .iter()
                    .position(|x| x == e)
                    .ok_or_else(|| Error::invalid("restriction leaves the measured portion"))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(idx.len() * self.grid.n_levels());
        for n in 0..self.grid.n_levels() {
            let lvl = self.level(n);
            values.extend(idx.iter().map(|&i| lvl[i]));
        }
        Ok(DNMeasurement {
            grid: self.grid,
            portion: portion.clone(),
            entries: keep,
            values,
            noise: self.noise,
        })
    }

    /// CSV with columns `t,node_id,x[,y],value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if self.grid.dim() == 1 {
            s.push_str("t,node_id,x,value\n");
        } else {
            s.push_str("t,node_id,x,y,value\n");
        }
        for n in 0..self.grid.n_levels() {
            let t = self.grid.time(n);
            for (e, v) in self.entries.iter().zip(self.level(n)) {
                let x = self.grid.coord(e.node);
                if self.grid.dim() == 1 {
                    let _ = writeln!(s, "{t:e},{},{:e},{v:e}", e.node, x[0]);
                } else {
                    let _ = writeln!(s, "{t:e},{},{:e},{:e},{v:e}", e.node, x[0], x[1]);
                }
            }
        }
        s
    }

    pub fn sidecar(&self) -> MeasurementSidecar {
        MeasurementSidecar {
            portion: self.portion.clone(),
            noise: self.noise,
            grid: self.grid,
            grid_digest: self.grid.digest(),
            entries: self.entries.len(),
            levels: self.grid.n_levels(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.sidecar())?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Face, Sign};
    use std::f64::consts::PI;

    fn oracle(grid: &SpaceTimeGrid) -> Field {
        Field::from_fn(grid, |x, t| (-PI * PI * t).exp() * (PI * x[0]).sin())
    }

    fn left() -> BoundaryPortion {
        BoundaryPortion::Faces {
            faces: vec![Face::Lower(0)],
        }
    }

    #[test]
    fn oracle_trace_at_left_end() {
        let err = |nx: usize| {
            let g = SpaceTimeGrid::new_1d(0.0, 1.0, nx, 10, 0.1).unwrap();
            let m = measure(&oracle(&g), &left()).unwrap();
            (0..g.n_levels())
                .map(|n| (m.at(0, n) + PI * (-PI * PI * g.time(n)).exp()).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(65) < 5e-3);
        assert!((err(33) / err(65)).log2() > 1.8);
    }

    #[test]
    fn zero_field_and_linearity() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [6, 5], 3, 1.0).unwrap();
        let z = measure(&Field::zeros(&g), &BoundaryPortion::Full).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let u1 = Field::from_fn(&g, |x, t| (x[0] * x[1] + t).sin());
        let u2 = Field::from_fn(&g, |x, t| x[0] * x[0] - t * x[1]);
        let combo = u1.scaled(2.0).add(&u2.scaled(-3.0));
        let lhs = measure(&combo, &BoundaryPortion::Full).unwrap();
        let m1 = measure(&u1, &BoundaryPortion::Full).unwrap();
        let m2 = measure(&u2, &BoundaryPortion::Full).unwrap();
        for ((a, b), c) in lhs.values().iter().zip(m1.values()).zip(m2.values()) {
            assert!((a - (2.0 * b - 3.0 * c)).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn quadratics_are_differentiated_exactly() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [2.0, 1.0], [9, 7], 2, 1.0).unwrap();
        let u = Field::from_fn(&g, |x, _| x[0] * x[0] + 3.0 * x[1] * x[1] - x[0]);
        let m = measure(&u, &BoundaryPortion::Full).unwrap();
        for (e, v) in m.entries().iter().zip(m.level(0)) {
            let x = g.coord(e.node);
            let grad = [2.0 * x[0] - 1.0, 6.0 * x[1]];
            let nu = e.face.normal();
            assert!((v - (grad[0] * nu[0] + grad[1] * nu[1])).abs() < 1e-10);
        }
    }

    #[test]
    fn restriction_matches_direct_measurement() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [6, 6], 3, 1.0).unwrap();
        let u = Field::from_fn(&g, |x, t| (x[0] + 2.0 * x[1]).exp() * (1.0 + t));
        let full = measure(&u, &BoundaryPortion::Full).unwrap();
        let minus = BoundaryPortion::directional([0.6, 0.8], 0.0, Sign::Minus);
        assert_eq!(full.restrict(&minus).unwrap(), measure(&u, &minus).unwrap());
    }

    #[test]
    fn empty_portion_rejected() {
        let g = SpaceTimeGrid::new_1d(0.0, 1.0, 5, 3, 1.0).unwrap();
        let p = BoundaryPortion::Faces { faces: vec![] };
        assert!(measure(&Field::zeros(&g), &p).is_err());
    }

    #[test]
    fn noise_contract() {
        let g = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 200, 0.1).unwrap();
        let m = measure(&oracle(&g), &BoundaryPortion::Full).unwrap();
        let same = add_noise(&m, NoiseModel::GaussianRelative, 0.0, 1).unwrap();
        assert_eq!(same.values(), m.values());
        let a = add_noise(&m, NoiseModel::GaussianRelative, 0.01, 7).unwrap();
        let b = add_noise(&m, NoiseModel::GaussianRelative, 0.01, 7).unwrap();
        let c = add_noise(&m, NoiseModel::GaussianRelative, 0.01, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        let rel = |x: &DNMeasurement| {
            let d: f64 = x.values().iter().zip(m.values()).map(|(p, q)| (p - q).powi(2)).sum();
            let s: f64 = m.values().iter().map(|v| v * v).sum();
            (d / s).sqrt()
        };
        for x in [&a, &c] {
            let r = rel(x);
            assert!((0.005..=0.02).contains(&r), "{r}");
        }
        assert!(add_noise(&m, NoiseModel::GaussianAbsolute, -1.0, 0).is_err());
    }

    #[test]
    fn passive_map_of_trivial_configuration_is_zero() {
        let g = SpaceTimeGrid::new_1d(0.0, 1.0, 17, 10, 0.1).unwrap();
        let s = Solver::heat(&g);
        let nl = Nonlinearity::parse("u^3 + sin(u)").unwrap();
        let m = passive_map(&s, &nl, &Field::zeros_slice(&g), &BoundaryPortion::Full, Strategy::Picard).unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn csv_and_sidecar() {
        let g = SpaceTimeGrid::new_1d(0.0, 1.0, 5, 2, 1.0).unwrap();
        let m = measure(&Field::from_fn(&g, |x, t| x[0] * t), &BoundaryPortion::Full).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("t,node_id,x,value\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        let side = serde_json::to_value(m.sidecar()).unwrap();
        assert_eq!(side["grid_digest"].as_str().unwrap().len(), 64);
    }
}
