//! Uniform space-time grids on intervals and rectangles.
//!
//! Space nodes are stored row-major with the last axis fastest, so node
//! `(i, j)` of a 2D grid lives at `i * ny + j`. Time levels run from `0`
//! (`t = 0`) to `steps` (`t = T`). All integrals use the trapezoidal rule
//! in every direction.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    dim: usize,
    lower: [f64; 2],
    upper: [f64; 2],
    nodes: [usize; 2],
    steps: usize,
    horizon: f64,
}

impl SpaceTimeGrid {
    pub fn new_1d(lower: f64, upper: f64, nx: usize, steps: usize, horizon: f64) -> Result<Self> {
        Self::new(&[lower], &[upper], &[nx], steps, horizon)
    }

    pub fn new_2d(
        lower: [f64; 2],
        upper: [f64; 2],
        nodes: [usize; 2],
        steps: usize,
        horizon: f64,
    ) -> Result<Self> {
        Self::new(&lower, &upper, &nodes, steps, horizon)
    }

    pub fn new(
        lower: &[f64],
        upper: &[f64],
        nodes: &[usize],
        steps: usize,
        horizon: f64,
    ) -> Result<Self> {
        let dim = lower.len();
        if !(dim == 1 || dim == 2) || upper.len() != dim || nodes.len() != dim {
            return Err(Error::invalid("grid dimension must be 1 or 2 with matching corner/node lengths"));
        }
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        let mut n = [1usize; 2];
        for a in 0..dim {
            if !(lower[a].is_finite() && upper[a].is_finite() && upper[a] > lower[a]) {
                return Err(Error::invalid(format!("axis {a}: need finite lower < upper")));
            }
            if nodes[a] < 3 {
                return Err(Error::invalid(format!("axis {a}: need at least 3 nodes")));
            }
            lo[a] = lower[a];
            hi[a] = upper[a];
            n[a] = nodes[a];
        }
        if steps < 2 {
            return Err(Error::invalid("need at least 2 time steps"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("time horizon must be positive"));
        }
        Ok(Self {
            dim,
            lower: lo,
            upper: hi,
            nodes: n,
            steps,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lower(&self) -> [f64; 2] {
        self.lower
    }
    pub fn upper(&self) -> [f64; 2] {
        self.upper
    }
    /// Node counts per axis; the second entry is 1 for 1D grids.
    pub fn nodes(&self) -> [usize; 2] {
        self.nodes
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_space(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }
    pub fn n_levels(&self) -> usize {
        self.steps + 1
    }
    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.nodes[axis] - 1) as f64
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Same geometry with a new time discretization.
    pub fn with_time(&self, steps: usize, horizon: f64) -> Result<Self> {
        Self::new(
            &self.lower[..self.dim],
            &self.upper[..self.dim],
            &self.nodes[..self.dim],
            steps,
            horizon,
        )
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        let n = self.nodes[axis] - 1;
        if i == n {
            self.upper[axis]
        } else {
            self.lower[axis] + (self.upper[axis] - self.lower[axis]) * i as f64 / n as f64
        }
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.steps {
            self.horizon
        } else {
            self.horizon * level as f64 / self.steps as f64
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nodes[1] + j
    }

    pub fn ij(&self, node: usize) -> (usize, usize) {
        (node / self.nodes[1], node % self.nodes[1])
    }

    /// Coordinates of a space node; the second entry is 0 in 1D.
    pub fn coord(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.ij(node);
        if self.dim == 1 {
            [self.axis_coord(0, i), 0.0]
        } else {
            [self.axis_coord(0, i), self.axis_coord(1, j)]
        }
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let (i, j) = self.ij(node);
        let on0 = i == 0 || i + 1 == self.nodes[0];
        if self.dim == 1 {
            on0
        } else {
            on0 || j == 0 || j + 1 == self.nodes[1]
        }
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_space()).filter(|&k| !self.is_boundary(k)).collect()
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_space()).filter(|&k| self.is_boundary(k)).collect()
    }

    pub fn faces(&self) -> Vec<Face> {
        (0..self.dim)
            .flat_map(|a| [Face::Lower(a), Face::Upper(a)])
            .collect()
    }

    /// Nodes of a face in increasing index order, corners included.
    pub fn face_nodes(&self, face: Face) -> Vec<usize> {
        let axis = face.axis();
        let fixed = match face {
            Face::Lower(_) => 0,
            Face::Upper(a) => self.nodes[a] - 1,
        };
        if self.dim == 1 {
            return vec![fixed];
        }
        if axis == 0 {
            (0..self.nodes[1]).map(|j| self.index(fixed, j)).collect()
        } else {
            (0..self.nodes[0]).map(|i| self.index(i, fixed)).collect()
        }
    }

    /// Trapezoidal weights of the spatial quadrature over Ω.
    pub fn space_weights(&self) -> Vec<f64> {
        let wa = |a: usize| -> Vec<f64> {
            let n = self.nodes[a];
            let h = self.spacing(a);
            (0..n)
                .map(|i| if i == 0 || i + 1 == n { 0.5 * h } else { h })
                .collect()
        };
        let w0 = wa(0);
        if self.dim == 1 {
            return w0;
        }
        let w1 = wa(1);
        let mut w = Vec::with_capacity(self.n_space());
        for a in &w0 {
            for b in &w1 {
                w.push(a * b);
            }
        }
        w
    }

    pub fn time_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.n_levels())
            .map(|n| if n == 0 || n == self.steps { 0.5 * dt } else { dt })
            .collect()
    }

    pub fn measure(&self) -> f64 {
        (0..self.dim).map(|a| self.upper[a] - self.lower[a]).product()
    }

    /// Stable hex digest of the grid parameters, used to tag output files.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "dim={};lower={:?};upper={:?};nodes={:?};steps={};T={:e}",
            self.dim, self.lower, self.upper, self.nodes, self.steps, self.horizon
        );
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Lower(usize),
    Upper(usize),
}

impl Face {
    pub fn axis(&self) -> usize {
        match *self {
            Face::Lower(a) | Face::Upper(a) => a,
        }
    }

    pub fn normal(&self) -> [f64; 2] {
        let mut n = [0.0; 2];
        match *self {
            Face::Lower(a) => n[a] = -1.0,
            Face::Upper(a) => n[a] = 1.0,
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// A selection of boundary nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundaryPortion {
    Full,
    /// Explicit node list, e.g. an observation set Γ₀.
    Nodes { nodes: Vec<usize> },
    /// Union of whole faces, e.g. the neighborhoods 𝒱±.
    Faces { faces: Vec<Face> },
    /// Faces with `sign * (ν·ω) > aperture`, or `>= 0` when the aperture is 0.
    Directional {
        omega: [f64; 2],
        aperture: f64,
        sign: Sign,
    },
}

/// One boundary node seen from one face. Corner nodes of a rectangle appear
/// once per adjacent face since the outward normal differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryEntry {
    pub face: Face,
    pub node: usize,
}

impl BoundaryPortion {
    pub fn directional(omega: [f64; 2], aperture: f64, sign: Sign) -> Self {
        BoundaryPortion::Directional {
            omega,
            aperture,
            sign,
        }
    }

    fn selected_faces(&self, grid: &SpaceTimeGrid) -> Result<Vec<Face>> {
        match self {
            BoundaryPortion::Full => Ok(grid.faces()),
            BoundaryPortion::Faces { faces } => {
                for f in faces {
                    if f.axis() >= grid.dim() {
                        return Err(Error::invalid(format!("face {f:?} not on a {}D grid", grid.dim())));
                    }
                }
                let mut v = faces.clone();
                v.sort();
                v.dedup();
                Ok(v)
            }
            BoundaryPortion::Directional {
                omega,
                aperture,
                sign,
            } => {
                let d = grid.dim();
                let norm: f64 = omega[..d].iter().map(|w| w * w).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 || (d == 1 && omega[1] != 0.0) {
                    return Err(Error::invalid(format!("direction {omega:?} is not a unit vector")));
                }
                if !(*aperture >= 0.0) {
                    return Err(Error::invalid("aperture must be nonnegative"));
                }
                Ok(grid
                    .faces()
                    .into_iter()
                    .filter(|f| {
                        let nu = f.normal();
                        let s = sign.value() * (nu[0] * omega[0] + nu[1] * omega[1]);
                        if *aperture == 0.0 {
                            s >= -1e-12
                        } else {
                            s > *aperture
                        }
                    })
                    .collect())
            }
            BoundaryPortion::Nodes { .. } => Ok(grid.faces()),
        }
    }

    /// Resolves the portion into (face, node) entries in a fixed order.
    pub fn entries(&self, grid: &SpaceTimeGrid) -> Result<Vec<BoundaryEntry>> {
        let faces = self.selected_faces(grid)?;
        let filter: Option<BTreeSet<usize>> = match self {
            BoundaryPortion::Nodes { nodes } => {
                for &n in nodes {
                    if n >= grid.n_space() || !grid.is_boundary(n) {
                        return Err(Error::invalid(format!("node {n} is not a boundary node")));
                    }
                }
                Some(nodes.iter().copied().collect())
            }
            _ => None,
        };
        let mut out = Vec::new();
        for face in faces {
            for node in grid.face_nodes(face) {
                if filter.as_ref().is_none_or(|s| s.contains(&node)) {
                    out.push(BoundaryEntry { face, node });
                }
            }
        }
        Ok(out)
    }

    /// The boundary node-index set of the portion.
    pub fn classify(&self, grid: &SpaceTimeGrid) -> Result<BTreeSet<usize>> {
        Ok(self.entries(grid)?.into_iter().map(|e| e.node).collect())
    }
}

/// Trapezoidal surface weights of boundary entries (per face, over the
/// contiguous runs of selected nodes). In 1D every entry is a point with
/// unit weight.
pub fn entry_weights(grid: &SpaceTimeGrid, entries: &[BoundaryEntry]) -> Vec<f64> {
    if grid.dim() == 1 {
        return vec![1.0; entries.len()];
    }
    let mut w = vec![0.0; entries.len()];
    for face in grid.faces() {
        let along = 1 - face.axis();
        let h = grid.spacing(along);
        let nodes = grid.face_nodes(face);
        let pos: Vec<Option<usize>> = nodes
            .iter()
            .map(|&n| entries.iter().position(|e| e.face == face && e.node == n))
            .collect();
        for k in 0..nodes.len().saturating_sub(1) {
            if let (Some(a), Some(b)) = (pos[k], pos[k + 1]) {
                w[a] += 0.5 * h;
                w[b] += 0.5 * h;
            }
        }
    }
    w
}

/// Where a field lives: on the whole space-time cylinder or on one time slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Cylinder,
    Slice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormSpace {
    L2Q,
    L2Omega,
    L2Sigma,
}

/// A real grid function on Q (all time levels) or on Ω (one slice).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: SpaceTimeGrid,
    domain: Domain,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            grid: *grid,
            domain: Domain::Cylinder,
            values: vec![0.0; grid.n_space() * grid.n_levels()],
        }
    }

    pub fn zeros_slice(grid: &SpaceTimeGrid) -> Self {
        Self {
            grid: *grid,
            domain: Domain::Slice,
            values: vec![0.0; grid.n_space()],
        }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn([f64; 2], f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_space() * grid.n_levels());
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for k in 0..grid.n_space() {
                values.push(f(grid.coord(k), t));
            }
        }
        Self {
            grid: *grid,
            domain: Domain::Cylinder,
            values,
        }
    }

    pub fn from_fn_slice(grid: &SpaceTimeGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self {
            grid: *grid,
            domain: Domain::Slice,
            values: (0..grid.n_space()).map(|k| f(grid.coord(k))).collect(),
        }
    }

    pub fn from_values(grid: &SpaceTimeGrid, domain: Domain, values: Vec<f64>) -> Result<Self> {
        let levels = match domain {
            Domain::Cylinder => grid.n_levels(),
            Domain::Slice => 1,
        };
        if values.len() != grid.n_space() * levels {
            return Err(Error::invalid(format!(
                "expected {} values for {:?}, got {}",
                grid.n_space() * levels,
                domain,
                values.len()
            )));
        }
        Ok(Self {
            grid: *grid,
            domain,
            values,
        })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn n_levels(&self) -> usize {
        match self.domain {
            Domain::Cylinder => self.grid.n_levels(),
            Domain::Slice => 1,
        }
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let m = self.grid.n_space();
        &self.values[n * m..(n + 1) * m]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let m = self.grid.n_space();
        &mut self.values[n * m..(n + 1) * m]
    }

    pub fn at(&self, node: usize, level: usize) -> f64 {
        self.values[level * self.grid.n_space() + node]
    }

    /// Copy of one time level as a slice field.
    pub fn slice(&self, level: usize) -> Field {
        Field {
            grid: self.grid,
            domain: Domain::Slice,
            values: self.level(level).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            domain: self.domain,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.values.len(), other.values.len(), "field shape mismatch");
        Field {
            grid: self.grid,
            domain: self.domain,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Field {
        self.map(|v| s * v)
    }

    pub fn add(&self, other: &Field) -> Field {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Field {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn axpy(&mut self, a: f64, x: &Field) {
        for (v, w) in self.values.iter_mut().zip(&x.values) {
            *v += a * w;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Trapezoidal integral of the field over Q or Ω.
    pub fn integral(&self) -> f64 {
        let ws = self.grid.space_weights();
        match self.domain {
            Domain::Slice => ws.iter().zip(&self.values).map(|(w, v)| w * v).sum(),
            Domain::Cylinder => {
                let wt = self.grid.time_weights();
                let m = self.grid.n_space();
                let mut s = 0.0;
                for (n, w_t) in wt.iter().enumerate() {
                    let lvl = &self.values[n * m..(n + 1) * m];
                    let inner: f64 = ws.iter().zip(lvl).map(|(w, v)| w * v).sum();
                    s += w_t * inner;
                }
                s
            }
        }
    }

    /// Weighted inner product matching the trapezoidal norm.
    pub fn inner(&self, other: &Field) -> f64 {
        self.mul(other).integral()
    }

    pub fn norm(&self, space: NormSpace) -> Result<f64> {
        match (space, self.domain) {
            (NormSpace::L2Q, Domain::Cylinder) | (NormSpace::L2Omega, Domain::Slice) => {
                Ok(self.map(|v| v * v).integral().max(0.0).sqrt())
            }
            _ => Err(Error::invalid(format!(
                "norm {space:?} is not defined for a {:?} field",
                self.domain
            ))),
        }
    }

    /// `L²(Q)` or `L²(Ω)` according to the domain tag.
    pub fn l2(&self) -> f64 {
        match self.domain {
            Domain::Cylinder => self.norm(NormSpace::L2Q),
            Domain::Slice => self.norm(NormSpace::L2Omega),
        }
        .unwrap_or(f64::NAN)
    }

    /// `L²(Q)` norm restricted to nodes where `mask` holds.
    pub fn l2_masked(&self, mask: &[bool]) -> f64 {
        let masked = Field {
            grid: self.grid,
            domain: self.domain,
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(k, v)| if mask[k % self.grid.n_space()] { v * v } else { 0.0 })
                .collect(),
        };
        masked.integral().max(0.0).sqrt()
    }

    /// CSV text: `# shape: nx[,ny],nt` then one block of row-major values per
    /// time level, blocks separated by a blank line. Slice fields use `nt = 0`.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let nt = match self.domain {
            Domain::Cylinder => g.steps(),
            Domain::Slice => 0,
        };
        let mut s = String::new();
        if g.dim() == 1 {
            let _ = writeln!(s, "# shape: {},{}", g.nodes()[0], nt);
        } else {
            let _ = writeln!(s, "# shape: {},{},{}", g.nodes()[0], g.nodes()[1], nt);
        }
        let ny = g.nodes()[1];
        for n in 0..self.n_levels() {
            if n > 0 {
                s.push('\n');
            }
            let lvl = self.level(n);
            if g.dim() == 1 {
                let row: Vec<String> = lvl.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "{}", row.join(","));
            } else {
                for i in 0..g.nodes()[0] {
                    let row: Vec<String> = lvl[i * ny..(i + 1) * ny]
                        .iter()
                        .map(|v| format!("{v:e}"))
                        .collect();
                    let _ = writeln!(s, "{}", row.join(","));
                }
            }
        }
        s
    }

    /// Parses the CSV layout written by [`Field::to_csv`] against a known grid.
    pub fn from_csv(grid: &SpaceTimeGrid, text: &str) -> Result<Field> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty field CSV"))?;
        let shape: Vec<usize> = header
            .trim()
            .strip_prefix("# shape:")
            .ok_or_else(|| Error::invalid("missing '# shape:' header"))?
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad shape header: {e}")))?;
        if shape.len() != grid.dim() + 1 || shape[..grid.dim()] != grid.nodes()[..grid.dim()] {
            return Err(Error::invalid(format!("shape {shape:?} does not match grid")));
        }
        let nt = shape[grid.dim()];
        let domain = if nt == 0 {
            Domain::Slice
        } else if nt == grid.steps() {
            Domain::Cylinder
        } else {
            return Err(Error::invalid(format!("time steps {nt} do not match grid")));
        };
        let mut values = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            for tok in line.split(',') {
                values.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad value '{tok}': {e}")))?,
                );
            }
        }
        Field::from_values(grid, domain, values)
    }
}

/// Dirichlet data on the whole lateral boundary, one value per boundary node
/// and time level.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    grid: SpaceTimeGrid,
    nodes: Vec<usize>,
    values: Vec<f64>,
}

impl BoundaryTrace {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        let nodes = grid.boundary_nodes();
        let values = vec![0.0; nodes.len() * grid.n_levels()];
        Self {
            grid: *grid,
            nodes,
            values,
        }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn([f64; 2], f64) -> f64) -> Self {
        let nodes = grid.boundary_nodes();
        let mut values = Vec::with_capacity(nodes.len() * grid.n_levels());
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for &k in &nodes {
                values.push(f(grid.coord(k), t));
            }
        }
        Self {
            grid: *grid,
            nodes,
            values,
        }
    }

    /// Boundary values of a cylinder field.
    pub fn from_field(u: &Field) -> Self {
        let grid = *u.grid();
        let nodes = grid.boundary_nodes();
        let mut values = Vec::with_capacity(nodes.len() * grid.n_levels());
        for n in 0..grid.n_levels() {
            for &k in &nodes {
                values.push(u.at(k, n));
            }
        }
        Self {
            grid,
            nodes,
            values,
        }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let m = self.nodes.len();
        &self.values[n * m..(n + 1) * m]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn axpy(&mut self, a: f64, x: &BoundaryTrace) {
        for (v, w) in self.values.iter_mut().zip(&x.values) {
            *v += a * w;
        }
    }

    /// Writes the boundary values into the matching nodes of a full level.
    pub fn scatter_level(&self, n: usize, out: &mut [f64]) {
        for (&k, &v) in self.nodes.iter().zip(self.level(n)) {
            out[k] = v;
        }
    }
}

/// Complex grid function stored as two real fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub re: Field,
    pub im: Field,
}

impl ComplexField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            re: Field::zeros(grid),
            im: Field::zeros(grid),
        }
    }

    pub fn from_real(re: Field) -> Self {
        let im = re.map(|_| 0.0);
        Self { re, im }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn([f64; 2], f64) -> Complex64) -> Self {
        let re = Field::from_fn(grid, |x, t| f(x, t).re);
        let im = Field::from_fn(grid, |x, t| f(x, t).im);
        Self { re, im }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        self.re.grid()
    }

    pub fn at(&self, node: usize, level: usize) -> Complex64 {
        Complex64::new(self.re.at(node, level), self.im.at(node, level))
    }

    pub fn sub(&self, other: &ComplexField) -> ComplexField {
        Self {
            re: self.re.sub(&other.re),
            im: self.im.sub(&other.im),
        }
    }

    pub fn add(&self, other: &ComplexField) -> ComplexField {
        Self {
            re: self.re.add(&other.re),
            im: self.im.add(&other.im),
        }
    }

    pub fn mul(&self, other: &ComplexField) -> ComplexField {
        let re = self.re.mul(&other.re).sub(&self.im.mul(&other.im));
        let im = self.re.mul(&other.im).add(&self.im.mul(&other.re));
        Self { re, im }
    }

    pub fn mul_real(&self, other: &Field) -> ComplexField {
        Self {
            re: self.re.mul(other),
            im: self.im.mul(other),
        }
    }

    pub fn scaled(&self, s: Complex64) -> ComplexField {
        let re = self.re.scaled(s.re).sub(&self.im.scaled(s.im));
        let im = self.re.scaled(s.im).add(&self.im.scaled(s.re));
        Self { re, im }
    }

    pub fn conj(&self) -> ComplexField {
        Self {
            re: self.re.clone(),
            im: self.im.scaled(-1.0),
        }
    }

    /// Trapezoidal integral over Q.
    pub fn integral(&self) -> Complex64 {
        Complex64::new(self.re.integral(), self.im.integral())
    }

    pub fn l2(&self) -> f64 {
        self.re.l2().hypot(self.im.l2())
    }

    pub fn max_abs(&self) -> f64 {
        self.re
            .values()
            .iter()
            .zip(self.im.values())
            .fold(0.0, |m, (a, b)| m.max(a.hypot(*b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_1d(n: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new_1d(0.0, 1.0, n, 4, 1.0).unwrap()
    }

    fn unit_2d(n: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [n, n], 4, 1.0).unwrap()
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(SpaceTimeGrid::new_1d(0.0, 1.0, 2, 4, 1.0).is_err());
        assert!(SpaceTimeGrid::new_1d(0.0, 1.0, 5, 1, 1.0).is_err());
        assert!(SpaceTimeGrid::new_1d(1.0, 1.0, 5, 4, 1.0).is_err());
        assert!(SpaceTimeGrid::new_1d(0.0, 1.0, 5, 4, 0.0).is_err());
    }

    #[test]
    fn coordinates_hit_corners_exactly() {
        let g = SpaceTimeGrid::new_2d([-0.3, 0.1], [0.7, 2.9], [7, 11], 9, 0.3).unwrap();
        assert_eq!(g.coord(0), [-0.3, 0.1]);
        assert_eq!(g.coord(g.n_space() - 1), [0.7, 2.9]);
        assert_eq!(g.time(g.steps()), 0.3);
        assert_eq!(g.coord(g.index(3, 4)), g.coord(g.index(3, 4)));
    }

    #[test]
    fn directional_1d_plus() {
        let g = unit_1d(9);
        let set = BoundaryPortion::directional([1.0, 0.0], 0.0, Sign::Plus)
            .classify(&g)
            .unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![8]);
    }

    #[test]
    fn directional_2d_with_aperture_keeps_right_face() {
        let g = unit_2d(5);
        let e = BoundaryPortion::directional([1.0, 0.0], 0.5, Sign::Plus)
            .entries(&g)
            .unwrap();
        assert!(e.iter().all(|e| e.face == Face::Upper(0)));
        assert_eq!(e.len(), 5);
    }

    #[test]
    fn directional_2d_minus_at_zero_aperture() {
        let g = unit_2d(5);
        let e = BoundaryPortion::directional([1.0, 0.0], 0.0, Sign::Minus)
            .entries(&g)
            .unwrap();
        let mut faces: Vec<Face> = e.iter().map(|e| e.face).collect();
        faces.dedup();
        assert_eq!(faces, vec![Face::Lower(0), Face::Lower(1), Face::Upper(1)]);
    }

    #[test]
    fn directional_halves_cover_boundary() {
        let g = unit_2d(6);
        let w = [0.6, 0.8];
        let p = BoundaryPortion::directional(w, 0.0, Sign::Plus).classify(&g).unwrap();
        let m = BoundaryPortion::directional(w, 0.0, Sign::Minus).classify(&g).unwrap();
        let all: BTreeSet<usize> = g.boundary_nodes().into_iter().collect();
        assert_eq!(p.union(&m).copied().collect::<BTreeSet<_>>(), all);
    }

    #[test]
    fn non_unit_direction_rejected() {
        let g = unit_1d(5);
        assert!(BoundaryPortion::directional([2.0, 0.0], 0.0, Sign::Plus)
            .classify(&g)
            .is_err());
    }

    #[test]
    fn norms_of_simple_fields() {
        let g = unit_1d(201);
        assert_eq!(Field::zeros_slice(&g).norm(NormSpace::L2Omega).unwrap(), 0.0);
        let one = Field::from_fn_slice(&g, |_| 1.0);
        assert!((one.norm(NormSpace::L2Omega).unwrap() - 1.0).abs() < 1e-14);
        let s = Field::from_fn_slice(&g, |x| (PI * x[0]).sin());
        assert!((s.norm(NormSpace::L2Omega).unwrap() - 0.5f64.sqrt()).abs() < 1e-5);
        assert!(one.norm(NormSpace::L2Q).is_err());
        assert!(Field::zeros(&g).norm(NormSpace::L2Sigma).is_err());
    }

    #[test]
    fn piecewise_linear_integrals_are_exact() {
        let g = SpaceTimeGrid::new_2d([0.0, -1.0], [2.0, 1.0], [5, 9], 6, 3.0).unwrap();
        // bilinear in (x, y) and linear in t integrates exactly
        let f = Field::from_fn(&g, |x, t| (1.0 + x[0]) * (2.0 - x[1]) * (0.5 + t));
        let exact = 4.0 * 4.0 * (1.5 + 4.5);
        assert!((f.integral() - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn norm_converges_at_second_order() {
        let err = |n: usize| {
            let g = SpaceTimeGrid::new_1d(0.0, 1.0, n, 8, 1.0).unwrap();
            let f = Field::from_fn_slice(&g, |x| (x[0] * x[0]).exp());
            let exact: f64 = 2.3644538928052095; // ∫ e^{2x²} on (0,1)
            (f.map(|v| v * v).integral() - exact).abs()
        };
        let rate = (err(17) / err(33)).log2();
        assert!(rate > 1.9, "rate {rate}");
    }

    #[test]
    fn csv_round_trip_2d() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [4, 3], 2, 1.0).unwrap();
        let f = Field::from_fn(&g, |x, t| x[0] - 2.0 * x[1] + t);
        let text = f.to_csv();
        assert!(text.starts_with("# shape: 4,3,2\n"));
        let back = Field::from_csv(&g, &text).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn entry_weights_integrate_face_length() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [2.0, 1.0], [5, 7], 2, 1.0).unwrap();
        let e = BoundaryPortion::Full.entries(&g).unwrap();
        let w = entry_weights(&g, &e);
        assert!((w.iter().sum::<f64>() - 6.0).abs() < 1e-12);
    }
}
