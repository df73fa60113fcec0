//! θ-scheme solvers for `u_t − ∇·(γ∇u) + b·∇u + a(x,t,u) = h` with
//! Dirichlet data on the whole lateral boundary.
//!
//! Space uses the conservative flux form with γ at cell midpoints (plus the
//! symmetric central stencil for γ12 and a central drift `b·∇u`, `b`
//! constant). Unknowns are the interior nodes; boundary nodes carry the
//! Dirichlet data. Implicit Euler (θ = 1) is the default, Crank–Nicolson
//! (θ = ½) is available.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryTrace, Domain, Field, NormSpace, SpaceTimeGrid};
use crate::linalg::{BandLu, BandMatrix};
use crate::model::{frozen_value, ClassTag, DiffusionTensor, Nonlinearity};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

impl TimeScheme {
    pub fn theta(self) -> f64 {
        match self {
            TimeScheme::ImplicitEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Picard,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub scheme: TimeScheme,
    /// Relative L²(Q) update tolerance of the fixed-point iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Relative max-norm correction tolerance of the per-step Newton solve.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Data size `‖g‖∞ + ‖f‖∞` up to which well-posedness is asserted for
    /// admissible-analytic terms.
    pub smallness: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            scheme: TimeScheme::ImplicitEuler,
            tol: 1e-10,
            max_iter: 200,
            damping: 0.5,
            newton_tol: 1e-14,
            newton_max_iter: 50,
            smallness: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Field,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub scheme: TimeScheme,
    pub strategy: Option<Strategy>,
    /// `Some(false)` when the data exceed the smallness gate of an
    /// admissible-analytic term; the solve is still attempted.
    pub well_posedness_asserted: Option<bool>,
}

/// Gradients of a functional `J(u)` with respect to the data of a linear solve.
#[derive(Debug, Clone)]
pub struct LinearGradient {
    pub g: Field,
    pub f: BoundaryTrace,
    pub h: Field,
}

/// Spatial operator rows for the interior nodes, columns in full-node indices.
#[derive(Debug, Clone)]
struct Op {
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Op {
    fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col[a..b], &self.val[a..b])
    }
}

#[derive(Debug, Clone)]
pub struct Solver {
    grid: SpaceTimeGrid,
    gamma: DiffusionTensor,
    drift: [f64; 2],
    opts: SolverOptions,
    interior: Vec<usize>,
    pos: Vec<usize>,
    boundary: Vec<usize>,
    ops: Vec<Op>,
    bw: usize,
}

impl Solver {
    pub fn new(grid: &SpaceTimeGrid, gamma: &DiffusionTensor, opts: SolverOptions) -> Result<Self> {
        Self::with_drift(grid, gamma, [0.0, 0.0], opts)
    }

    pub fn heat(grid: &SpaceTimeGrid) -> Self {
        Self::new(grid, &DiffusionTensor::identity(), SolverOptions::default())
            .expect("identity tensor is valid")
    }

    pub fn with_drift(
        grid: &SpaceTimeGrid,
        gamma: &DiffusionTensor,
        drift: [f64; 2],
        opts: SolverOptions,
    ) -> Result<Self> {
        gamma.validate(grid)?;
        if grid.dim() == 1 && drift[1] != 0.0 {
            return Err(Error::invalid("1D drift must have a zero second component"));
        }
        let interior = grid.interior_nodes();
        let boundary = grid.boundary_nodes();
        let mut pos = vec![NONE; grid.n_space()];
        for (r, &k) in interior.iter().enumerate() {
            pos[k] = r;
        }
        let levels: Vec<usize> = if gamma.depends_on_time() {
            (0..grid.n_levels()).collect()
        } else {
            vec![0]
        };
        let ops = levels
            .into_iter()
            .map(|n| assemble(grid, gamma, drift, grid.time(n), &interior))
            .collect::<Result<Vec<_>>>()?;
        let bw = if grid.dim() == 1 { 1 } else { grid.nodes()[1] - 1 };
        Ok(Self {
            grid: *grid,
            gamma: gamma.clone(),
            drift,
            opts,
            interior,
            pos,
            boundary,
            ops,
            bw,
        })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn gamma(&self) -> &DiffusionTensor {
        &self.gamma
    }
    pub fn drift(&self) -> [f64; 2] {
        self.drift
    }
    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    /// Same geometry and coefficients with different options.
    pub fn with_options(&self, opts: SolverOptions) -> Self {
        let mut s = self.clone();
        s.opts = opts;
        s
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    fn op(&self, level: usize, reversed: bool) -> &Op {
        if self.ops.len() == 1 {
            &self.ops[0]
        } else if reversed {
            &self.ops[self.grid.steps() - level]
        } else {
            &self.ops[level]
        }
    }

    fn theta(&self) -> f64 {
        self.opts.scheme.theta()
    }

    fn check_shapes(&self, f: &BoundaryTrace, g: &Field, q: Option<&Field>, h: Option<&Field>) -> Result<()> {
        if f.grid() != &self.grid || g.grid() != &self.grid {
            return Err(Error::invalid("data live on a different grid"));
        }
        if g.domain() != Domain::Slice {
            return Err(Error::invalid("initial data must be a slice field"));
        }
        for c in [q, h].into_iter().flatten() {
            if c.grid() != &self.grid || c.domain() != Domain::Cylinder {
                return Err(Error::invalid("coefficient fields must live on Q of the same grid"));
            }
        }
        Ok(())
    }

    /// `(A u)` at interior nodes for a full slice `u`, plus `q u`.
    fn apply(&self, op: &Op, u: &[f64], q: Option<&[f64]>, out: &mut [f64]) {
        for (r, &k) in self.interior.iter().enumerate() {
            let (cols, vals) = op.row(r);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                s += v * u[*c];
            }
            if let Some(q) = q {
                s += q[k] * u[k];
            }
            out[r] = s;
        }
    }

    /// Interior rows applied to boundary values only: `A_IB f`.
    fn apply_boundary(&self, op: &Op, full: &[f64], out: &mut [f64]) {
        for r in 0..self.interior.len() {
            let (cols, vals) = op.row(r);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                if self.pos[*c] == NONE {
                    s += v * full[*c];
                }
            }
            out[r] = s;
        }
    }

    fn step_matrix(&self, op: &Op, q: Option<&[f64]>, diag_extra: Option<&[f64]>) -> BandMatrix {
        let n = self.interior.len();
        let th = self.theta();
        let idt = 1.0 / self.grid.dt();
        let mut m = BandMatrix::zeros(n, self.bw);
        for (r, &k) in self.interior.iter().enumerate() {
            let (cols, vals) = op.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let p = self.pos[*c];
                if p != NONE {
                    m.add(r, p, th * v);
                }
            }
            let mut d = idt;
            if let Some(q) = q {
                d += th * q[k];
            }
            if let Some(e) = diag_extra {
                d += th * e[r];
            }
            m.add(r, r, d);
        }
        m
    }

    fn initial_slice(&self, g: &Field, f: &BoundaryTrace) -> Vec<f64> {
        let mut u0 = g.values().to_vec();
        f.scatter_level(0, &mut u0);
        u0
    }

    /// Marches the linear scheme. With `reversed`, level `n` uses the spatial
    /// operator of physical level `N − n`.
    fn march(
        &self,
        q: Option<&Field>,
        f: &BoundaryTrace,
        g: &Field,
        h: Option<&Field>,
        reversed: bool,
    ) -> Result<Field> {
        let grid = &self.grid;
        let m = grid.n_space();
        let ni = self.interior.len();
        let th = self.theta();
        let idt = 1.0 / grid.dt();
        let mut u = Field::zeros(grid);
        u.level_mut(0).copy_from_slice(&self.initial_slice(g, f));

        let mut cache: Option<(usize, Vec<f64>, BandLu)> = None;
        let mut rhs = vec![0.0; ni];
        let mut tmp = vec![0.0; ni];
        let zero_q = vec![0.0; m];
        for n in 0..grid.steps() {
            let (prev, next) = u.values_mut().split_at_mut((n + 1) * m);
            let prev = &prev[n * m..];
            let next = &mut next[..m];
            f.scatter_level(n + 1, next);

            for (r, &k) in self.interior.iter().enumerate() {
                rhs[r] = idt * prev[k];
            }
            if th < 1.0 {
                self.apply(self.op(n, reversed), prev, q.map(|q| q.level(n)), &mut tmp);
                for r in 0..ni {
                    rhs[r] -= (1.0 - th) * tmp[r];
                }
                if let Some(h) = h {
                    let hn = h.level(n);
                    for (r, &k) in self.interior.iter().enumerate() {
                        rhs[r] += (1.0 - th) * hn[k];
                    }
                }
            }
            if let Some(h) = h {
                let hn = h.level(n + 1);
                for (r, &k) in self.interior.iter().enumerate() {
                    rhs[r] += th * hn[k];
                }
            }
            let op = self.op(n + 1, reversed);
            self.apply_boundary(op, next, &mut tmp);
            for r in 0..ni {
                rhs[r] -= th * tmp[r];
            }

            let q_next = q.map(|q| q.level(n + 1)).unwrap_or(&zero_q);
            let op_id = if self.ops.len() == 1 { 0 } else { n + 1 };
            let reuse = matches!(&cache, Some((id, qc, _)) if *id == op_id && qc.as_slice() == q_next);
            if !reuse {
                let lu = self.step_matrix(op, Some(q_next), None).factor(n + 1)?;
                cache = Some((op_id, q_next.to_vec(), lu));
            }
            let lu = &cache.as_ref().expect("factor cached").2;
            lu.solve_in_place(&mut rhs);
            for (r, &k) in self.interior.iter().enumerate() {
                if !rhs[r].is_finite() {
                    return Err(Error::NonFinite { node: k, level: n + 1 });
                }
                next[k] = rhs[r];
            }
        }
        Ok(u)
    }

    /// Solves `u_t − ∇·(γ∇u) + qu = h`, `u = f` on Σ, `u(·,0) = g`.
    pub fn solve_linear(
        &self,
        q: Option<&Field>,
        f: &BoundaryTrace,
        g: &Field,
        h: Option<&Field>,
    ) -> Result<SolveReport> {
        self.check_shapes(f, g, q, h)?;
        let u = self.march(q, f, g, h, false)?;
        Ok(SolveReport {
            solution: u,
            iterations: 1,
            residuals: vec![],
            converged: true,
            scheme: self.opts.scheme,
            strategy: None,
            well_posedness_asserted: None,
        })
    }

    /// Solves `−v_t − ∇·(γ∇v) + qv = h`, `v = f` on Σ, `v(·,T) = terminal`
    /// by marching in `s = T − t`.
    pub fn solve_backward(
        &self,
        q: Option<&Field>,
        terminal: &Field,
        f: &BoundaryTrace,
        h: Option<&Field>,
    ) -> Result<SolveReport> {
        self.check_shapes(f, terminal, q, h)?;
        let qr = q.map(reverse_levels);
        let hr = h.map(reverse_levels);
        let fr = reverse_trace(f);
        let v = self.march(qr.as_ref(), &fr, terminal, hr.as_ref(), true)?;
        Ok(SolveReport {
            solution: reverse_levels(&v),
            iterations: 1,
            residuals: vec![],
            converged: true,
            scheme: self.opts.scheme,
            strategy: None,
            well_posedness_asserted: None,
        })
    }

    /// Exact transpose of the linear scheme: given `∂J/∂u` on every node and
    /// level, returns `∂J/∂g`, `∂J/∂f` and `∂J/∂h`.
    pub fn vjp_linear(&self, q: Option<&Field>, seed: &Field) -> Result<LinearGradient> {
        let grid = &self.grid;
        let m = grid.n_space();
        let nb = self.boundary.len();
        let th = self.theta();
        let idt = 1.0 / grid.dt();
        let nt = grid.steps();
        let zero_q = vec![0.0; m];

        let mut gf = vec![0.0; nb * grid.n_levels()];
        for n in 0..=nt {
            let s = seed.level(n);
            for (b, &k) in self.boundary.iter().enumerate() {
                gf[n * nb + b] = s[k];
            }
        }
        let mut gh = Field::zeros(grid);
        let mut mu: Vec<f64> = self.interior.iter().map(|&k| seed.at(k, nt)).collect();
        let mut full = vec![0.0; m];
        let mut cache: Option<(usize, Vec<f64>, BandLu)> = None;

        for n in (1..=nt).rev() {
            let q_n = q.map(|q| q.level(n)).unwrap_or(&zero_q);
            let op_id = if self.ops.len() == 1 { 0 } else { n };
            let reuse = matches!(&cache, Some((id, qc, _)) if *id == op_id && qc.as_slice() == q_n);
            if !reuse {
                let lu = self.step_matrix(self.op(n, false), Some(q_n), None).factor(n)?;
                cache = Some((op_id, q_n.to_vec(), lu));
            }
            let lu = &cache.as_ref().expect("factor cached").2;
            let mut p = mu.clone();
            lu.solve_transpose_in_place(&mut p);

            {
                let hn = gh.level_mut(n);
                for (r, &k) in self.interior.iter().enumerate() {
                    hn[k] += th * p[r];
                }
            }
            if th < 1.0 {
                let hp = gh.level_mut(n - 1);
                for (r, &k) in self.interior.iter().enumerate() {
                    hp[k] += (1.0 - th) * p[r];
                }
            }
            // −θ A^n_IBᵀ p into f^n
            self.apply_transpose(self.op(n, false), &p, &mut full);
            for (b, &k) in self.boundary.iter().enumerate() {
                gf[n * nb + b] -= th * full[k];
            }
            // level n−1 interior
            let s = seed.level(n - 1);
            for (r, &k) in self.interior.iter().enumerate() {
                mu[r] = s[k] + idt * p[r];
            }
            if th < 1.0 {
                self.apply_transpose(self.op(n - 1, false), &p, &mut full);
                let qp = q.map(|q| q.level(n - 1)).unwrap_or(&zero_q);
                for (r, &k) in self.interior.iter().enumerate() {
                    mu[r] -= (1.0 - th) * (full[k] + qp[k] * p[r]);
                }
                for (b, &k) in self.boundary.iter().enumerate() {
                    gf[(n - 1) * nb + b] -= (1.0 - th) * full[k];
                }
            }
        }
        let mut gg = Field::zeros_slice(grid);
        for (r, &k) in self.interior.iter().enumerate() {
            gg.values_mut()[k] = mu[r];
        }
        let mut ftrace = BoundaryTrace::zeros(grid);
        ftrace.values_mut().copy_from_slice(&gf);
        Ok(LinearGradient {
            g: gg,
            f: ftrace,
            h: gh,
        })
    }

    fn apply_transpose(&self, op: &Op, p: &[f64], full: &mut [f64]) {
        full.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.interior.len() {
            let (cols, vals) = op.row(r);
            for (c, v) in cols.iter().zip(vals) {
                full[*c] += v * p[r];
            }
        }
    }

    /// Residual of the discrete scheme for a given field:
    /// `(u^{n+1} − u^n)/Δt + θ(Au + qu − h)^{n+1} + (1−θ)(Au + qu − h)^n` at
    /// interior nodes, levels 1..N; zero elsewhere.
    pub fn scheme_residual(&self, u: &Field, q: Option<&Field>, h: Option<&Field>) -> Field {
        let grid = &self.grid;
        let th = self.theta();
        let idt = 1.0 / grid.dt();
        let ni = self.interior.len();
        let mut out = Field::zeros(grid);
        let mut a_prev = vec![0.0; ni];
        let mut a_next = vec![0.0; ni];
        self.apply(self.op(0, false), u.level(0), q.map(|q| q.level(0)), &mut a_prev);
        for n in 0..grid.steps() {
            self.apply(self.op(n + 1, false), u.level(n + 1), q.map(|q| q.level(n + 1)), &mut a_next);
            let r_out = out.level_mut(n + 1);
            for (r, &k) in self.interior.iter().enumerate() {
                let mut v = idt * (u.at(k, n + 1) - u.at(k, n)) + th * a_next[r] + (1.0 - th) * a_prev[r];
                if let Some(h) = h {
                    v -= th * h.at(k, n + 1) + (1.0 - th) * h.at(k, n);
                }
                r_out[k] = v;
            }
            std::mem::swap(&mut a_prev, &mut a_next);
        }
        out
    }

    fn smallness_gate(&self, nl: &Nonlinearity, f: &BoundaryTrace, g: &Field) -> Option<bool> {
        match nl.class() {
            ClassTag::AdmissibleAnalytic => Some(g.max_abs() + f.max_abs() <= self.opts.smallness),
            _ => None,
        }
    }

    /// Solves `u_t − ∇·(γ∇u) + a(x,t,u) = 0` with the chosen strategy.
    pub fn solve_semilinear(
        &self,
        nl: &Nonlinearity,
        f: &BoundaryTrace,
        g: &Field,
        strategy: Strategy,
    ) -> Result<SolveReport> {
        self.solve_semilinear_with_source(nl, f, g, None, strategy)
    }

    pub fn solve_semilinear_with_source(
        &self,
        nl: &Nonlinearity,
        f: &BoundaryTrace,
        g: &Field,
        h: Option<&Field>,
        strategy: Strategy,
    ) -> Result<SolveReport> {
        self.check_shapes(f, g, None, h)?;
        let gate = self.smallness_gate(nl, f, g);
        let mut report = if nl.is_zero() {
            self.solve_linear(None, f, g, h)?
        } else if nl.is_affine() {
            let zero = Field::zeros(&self.grid);
            let q = self.derivative_field(nl, &zero, 1)?;
            let src = self.source_with_offset(nl, h)?;
            self.solve_linear(Some(&q), f, g, Some(&src))?
        } else {
            match strategy {
                Strategy::Picard => self.picard(nl, f, g, h)?,
                Strategy::Newton => self.newton(nl, f, g, h)?,
            }
        };
        report.strategy = Some(strategy);
        report.well_posedness_asserted = gate;
        Ok(report)
    }

    /// `∂_u^k a(x,t,base(x,t))` on every node.
    pub fn derivative_field(&self, nl: &Nonlinearity, base: &Field, k: usize) -> Result<Field> {
        let grid = &self.grid;
        let mut out = Field::zeros(grid);
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            let lvl = out.level_mut(n);
            for (node, v) in lvl.iter_mut().enumerate() {
                *v = nl.evaluate(grid.coord(node), t, base.at(node, n), k)?;
            }
        }
        Ok(out)
    }

    /// `h − a(x,t,0)`.
    fn source_with_offset(&self, nl: &Nonlinearity, h: Option<&Field>) -> Result<Field> {
        let zero = Field::zeros(&self.grid);
        let a0 = self.derivative_field(nl, &zero, 0)?;
        Ok(match h {
            Some(h) => h.sub(&a0),
            None => a0.scaled(-1.0),
        })
    }

    fn frozen(&self, nl: &Nonlinearity, z: &Field) -> Result<Field> {
        let grid = &self.grid;
        let mut out = Field::zeros(grid);
        for n in 0..grid.n_levels() {
            let t = grid.time(n);
            for node in 0..grid.n_space() {
                let v = frozen_value(nl, grid.coord(node), t, z.at(node, n))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite { node, level: n });
                }
                out.level_mut(n)[node] = v;
            }
        }
        Ok(out)
    }

    fn picard(
        &self,
        nl: &Nonlinearity,
        f: &BoundaryTrace,
        g: &Field,
        h: Option<&Field>,
    ) -> Result<SolveReport> {
        let src = self.source_with_offset(nl, h)?;
        let mut z = Field::zeros(&self.grid);
        let mut residuals = Vec::new();
        let mut prev_update = f64::INFINITY;
        for it in 1..=self.opts.max_iter {
            let q = self.frozen(nl, &z)?;
            let u = self.march(Some(&q), f, g, Some(&src), false)?;
            let diff = u.sub(&z);
            let update = diff.norm(NormSpace::L2Q)?;
            let scale = u.norm(NormSpace::L2Q)?;
            let rel = if scale > 0.0 { update / scale } else { update };
            residuals.push(rel);
            if rel <= self.opts.tol {
                return Ok(SolveReport {
                    solution: u,
                    iterations: it,
                    residuals,
                    converged: true,
                    scheme: self.opts.scheme,
                    strategy: Some(Strategy::Picard),
                    well_posedness_asserted: None,
                });
            }
            if update > prev_update {
                z.axpy(self.opts.damping, &diff);
            } else {
                z = u;
            }
            prev_update = update;
        }
        Err(Error::NotConverged {
            report: Box::new(SolveReport {
                solution: z,
                iterations: self.opts.max_iter,
                residuals,
                converged: false,
                scheme: self.opts.scheme,
                strategy: Some(Strategy::Picard),
                well_posedness_asserted: None,
            }),
        })
    }

    fn newton(
        &self,
        nl: &Nonlinearity,
        f: &BoundaryTrace,
        g: &Field,
        h: Option<&Field>,
    ) -> Result<SolveReport> {
        let grid = &self.grid;
        let m = grid.n_space();
        let ni = self.interior.len();
        let th = self.theta();
        let idt = 1.0 / grid.dt();
        let mut u = Field::zeros(grid);
        u.level_mut(0).copy_from_slice(&self.initial_slice(g, f));
        let mut residuals = Vec::with_capacity(grid.steps());
        let mut total = 0;
        let mut base = vec![0.0; ni];
        let mut tmp = vec![0.0; ni];
        let mut av = vec![0.0; ni];
        let mut dav = vec![0.0; ni];
        let coords: Vec<[f64; 2]> = self.interior.iter().map(|&k| grid.coord(k)).collect();

        for n in 0..grid.steps() {
            let (t0, t1) = (grid.time(n), grid.time(n + 1));
            let (prev, next) = u.values_mut().split_at_mut((n + 1) * m);
            let prev = &prev[n * m..];
            let next = &mut next[..m];
            f.scatter_level(n + 1, next);

            for (r, &k) in self.interior.iter().enumerate() {
                base[r] = idt * prev[k];
            }
            if th < 1.0 {
                self.apply(self.op(n, false), prev, None, &mut tmp);
                for (r, &k) in self.interior.iter().enumerate() {
                    let a = nl.evaluate(coords[r], t0, prev[k], 0)?;
                    base[r] -= (1.0 - th) * (tmp[r] + a);
                    if let Some(h) = h {
                        base[r] += (1.0 - th) * h.at(k, n);
                    }
                }
            }
            if let Some(h) = h {
                for (r, &k) in self.interior.iter().enumerate() {
                    base[r] += th * h.at(k, n + 1);
                }
            }
            // the residual below applies A to the full level, boundary data included
            let op = self.op(n + 1, false);

            let mut v: Vec<f64> = self.interior.iter().map(|&k| prev[k]).collect();
            let mut converged = false;
            let mut last = f64::INFINITY;
            for it in 0..self.opts.newton_max_iter {
                total += 1;
                for (r, &k) in self.interior.iter().enumerate() {
                    next[k] = v[r];
                    av[r] = nl.evaluate(coords[r], t1, v[r], 0)?;
                    dav[r] = nl.evaluate(coords[r], t1, v[r], 1)?;
                }
                self.apply(op, next, None, &mut tmp);
                let mut res: Vec<f64> = (0..ni)
                    .map(|r| idt * v[r] + th * (tmp[r] + av[r]) - base[r])
                    .collect();
                let lu = self.step_matrix(op, None, Some(&dav)).factor(n + 1)?;
                lu.solve_in_place(&mut res);
                let mut corr = 0.0f64;
                let mut size = 0.0f64;
                for r in 0..ni {
                    v[r] -= res[r];
                    corr = corr.max(res[r].abs());
                    size = size.max(v[r].abs());
                }
                if !corr.is_finite() {
                    let r = res.iter().position(|x| !x.is_finite()).unwrap_or(0);
                    return Err(Error::NonFinite {
                        node: self.interior[r],
                        level: n + 1,
                    });
                }
                let stalled = it >= 2 && corr >= 0.5 * last && corr <= 1e-9 * size.max(1e-300);
                last = corr;
                if corr <= self.opts.newton_tol * size || corr == 0.0 || stalled {
                    converged = true;
                    break;
                }
            }
            for (r, &k) in self.interior.iter().enumerate() {
                next[k] = v[r];
            }
            residuals.push(last);
            if !converged {
                return Err(Error::NotConverged {
                    report: Box::new(SolveReport {
                        solution: u,
                        iterations: total,
                        residuals,
                        converged: false,
                        scheme: self.opts.scheme,
                        strategy: Some(Strategy::Newton),
                        well_posedness_asserted: None,
                    }),
                });
            }
        }
        Ok(SolveReport {
            solution: u,
            iterations: total,
            residuals,
            converged: true,
            scheme: self.opts.scheme,
            strategy: Some(Strategy::Newton),
            well_posedness_asserted: None,
        })
    }
}

fn reverse_levels(f: &Field) -> Field {
    let grid = *f.grid();
    let mut out = f.clone();
    let nl = f.n_levels();
    for n in 0..nl {
        out.level_mut(n).copy_from_slice(f.level(nl - 1 - n));
    }
    debug_assert_eq!(out.grid(), &grid);
    out
}

fn reverse_trace(f: &BoundaryTrace) -> BoundaryTrace {
    let nl = f.grid().n_levels();
    let mut out = f.clone();
    let nb = f.nodes().len();
    for n in 0..nl {
        out.values_mut()[n * nb..(n + 1) * nb].copy_from_slice(f.level(nl - 1 - n));
    }
    out
}

fn assemble(
    grid: &SpaceTimeGrid,
    gamma: &DiffusionTensor,
    drift: [f64; 2],
    t: f64,
    interior: &[usize],
) -> Result<Op> {
    let mut row_ptr = Vec::with_capacity(interior.len() + 1);
    let mut col = Vec::new();
    let mut val = Vec::new();
    row_ptr.push(0);
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(9);
    let push = |entries: &mut Vec<(usize, f64)>, c: usize, v: f64| {
        if v == 0.0 {
            return;
        }
        match entries.iter_mut().find(|e| e.0 == c) {
            Some(e) => e.1 += v,
            None => entries.push((c, v)),
        }
    };
    let hx = grid.spacing(0);
    for &k in interior {
        entries.clear();
        let (i, j) = grid.ij(k);
        let x = grid.coord(k);
        if grid.dim() == 1 {
            let xm = 0.5 * (x[0] + grid.axis_coord(0, i - 1));
            let xp = 0.5 * (x[0] + grid.axis_coord(0, i + 1));
            let gm = gamma.eval([xm, 0.0], t)?[0];
            let gp = gamma.eval([xp, 0.0], t)?[0];
            let h2 = hx * hx;
            push(&mut entries, k - 1, -gm / h2 - drift[0] / (2.0 * hx));
            push(&mut entries, k, (gm + gp) / h2);
            push(&mut entries, k + 1, -gp / h2 + drift[0] / (2.0 * hx));
        } else {
            let hy = grid.spacing(1);
            let id = |a: usize, b: usize| grid.index(a, b);
            let xm = 0.5 * (x[0] + grid.axis_coord(0, i - 1));
            let xp = 0.5 * (x[0] + grid.axis_coord(0, i + 1));
            let ym = 0.5 * (x[1] + grid.axis_coord(1, j - 1));
            let yp = 0.5 * (x[1] + grid.axis_coord(1, j + 1));
            let g11m = gamma.eval([xm, x[1]], t)?[0];
            let g11p = gamma.eval([xp, x[1]], t)?[0];
            let g22m = gamma.eval([x[0], ym], t)?[2];
            let g22p = gamma.eval([x[0], yp], t)?[2];
            push(&mut entries, id(i - 1, j), -g11m / (hx * hx) - drift[0] / (2.0 * hx));
            push(&mut entries, id(i + 1, j), -g11p / (hx * hx) + drift[0] / (2.0 * hx));
            push(&mut entries, id(i, j - 1), -g22m / (hy * hy) - drift[1] / (2.0 * hy));
            push(&mut entries, id(i, j + 1), -g22p / (hy * hy) + drift[1] / (2.0 * hy));
            push(
                &mut entries,
                k,
                (g11m + g11p) / (hx * hx) + (g22m + g22p) / (hy * hy),
            );
            // −∂x(γ12 ∂y u) − ∂y(γ12 ∂x u), central differences
            let c = 1.0 / (4.0 * hx * hy);
            let g12 = |a: usize, b: usize| -> Result<f64> { Ok(gamma.eval(grid.coord(id(a, b)), t)?[1]) };
            let (ge, gw, gn, gs) = (g12(i + 1, j)?, g12(i - 1, j)?, g12(i, j + 1)?, g12(i, j - 1)?);
            if ge != 0.0 || gw != 0.0 || gn != 0.0 || gs != 0.0 {
                push(&mut entries, id(i + 1, j + 1), -c * (ge + gn));
                push(&mut entries, id(i + 1, j - 1), c * (ge + gs));
                push(&mut entries, id(i - 1, j + 1), c * (gw + gn));
                push(&mut entries, id(i - 1, j - 1), -c * (gw + gs));
            }
        }
        for &(c, v) in &entries {
            col.push(c);
            val.push(v);
        }
        row_ptr.push(col.len());
    }
    Ok(Op { row_ptr, col, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use std::f64::consts::PI;

    fn heat_grid(nx: usize, nt: usize, t: f64) -> SpaceTimeGrid {
        SpaceTimeGrid::new_1d(0.0, 1.0, nx, nt, t).unwrap()
    }

    fn sine(grid: &SpaceTimeGrid) -> Field {
        Field::from_fn_slice(grid, |x| (PI * x[0]).sin())
    }

    fn rel_err(a: &Field, b: &Field) -> f64 {
        a.sub(b).l2() / b.l2()
    }

    #[test]
    fn zero_data_gives_zero() {
        let g = heat_grid(17, 10, 0.1);
        let s = Solver::heat(&g);
        let r = s
            .solve_linear(None, &BoundaryTrace::zeros(&g), &Field::zeros_slice(&g), None)
            .unwrap();
        assert_eq!(r.solution.max_abs(), 0.0);
    }

    #[test]
    fn separation_oracle_with_potential() {
        let g = heat_grid(129, 400, 0.1);
        let opts = SolverOptions {
            scheme: TimeScheme::CrankNicolson,
            ..Default::default()
        };
        let s = Solver::new(&g, &DiffusionTensor::identity(), opts).unwrap();
        for c in [0.0, 3.0] {
            let q = Field::from_fn(&g, |_, _| c);
            let r = s
                .solve_linear(Some(&q), &BoundaryTrace::zeros(&g), &sine(&g), None)
                .unwrap();
            let exact = Field::from_fn(&g, |x, t| (-(PI * PI + c) * t).exp() * (PI * x[0]).sin());
            assert!(rel_err(&r.solution, &exact) < 1e-4);
        }
    }

    #[test]
    fn implicit_euler_is_first_order_in_time() {
        let err = |nt: usize| {
            let g = heat_grid(257, nt, 0.1);
            let r = Solver::heat(&g)
                .solve_linear(None, &BoundaryTrace::zeros(&g), &sine(&g), None)
                .unwrap();
            let exact = Field::from_fn(&g, |x, t| (-PI * PI * t).exp() * (PI * x[0]).sin());
            r.solution.sub(&exact).l2()
        };
        let rate = (err(20) / err(40)).log2();
        assert!(rate > 0.9, "rate {rate}");
    }

    #[test]
    fn backward_oracle() {
        let g = heat_grid(129, 400, 0.1);
        let opts = SolverOptions {
            scheme: TimeScheme::CrankNicolson,
            ..Default::default()
        };
        let s = Solver::new(&g, &DiffusionTensor::identity(), opts).unwrap();
        let r = s
            .solve_backward(None, &sine(&g), &BoundaryTrace::zeros(&g), None)
            .unwrap();
        let exact = Field::from_fn(&g, |x, t| (-PI * PI * (0.1 - t)).exp() * (PI * x[0]).sin());
        assert!(rel_err(&r.solution, &exact) < 1e-4);
        let z = s
            .solve_backward(None, &Field::zeros_slice(&g), &BoundaryTrace::zeros(&g), None)
            .unwrap();
        assert_eq!(z.solution.max_abs(), 0.0);
    }

    #[test]
    fn continuous_adjoint_pairing() {
        let g = heat_grid(101, 400, 0.2);
        let opts = SolverOptions {
            scheme: TimeScheme::CrankNicolson,
            ..Default::default()
        };
        let s = Solver::new(&g, &DiffusionTensor::identity(), opts).unwrap();
        let q = Field::from_fn(&g, |x, t| 1.0 + x[0] * t);
        let h = Field::from_fn(&g, |x, t| (3.0 * x[0]).cos() * (1.0 + t) * x[0] * (1.0 - x[0]));
        let w_t = Field::from_fn_slice(&g, |x| x[0] * x[0] * (1.0 - x[0]));
        let zf = BoundaryTrace::zeros(&g);
        let u = s.solve_linear(Some(&q), &zf, &Field::zeros_slice(&g), Some(&h)).unwrap();
        let w = s.solve_backward(Some(&q), &w_t, &zf, None).unwrap();
        let lhs = u.solution.slice(g.steps()).inner(&w_t);
        let rhs = h.inner(&w.solution);
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs(), "{lhs} vs {rhs}");
    }

    #[test]
    fn vjp_matches_directional_derivative() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [7, 6], 5, 0.3).unwrap();
        let gamma = DiffusionTensor::new(
            Expr::parse("1 + 0.2*x*t").unwrap(),
            Expr::parse("0.1*y").unwrap(),
            Expr::parse("1.2").unwrap(),
            0.5,
        )
        .unwrap();
        for scheme in [TimeScheme::ImplicitEuler, TimeScheme::CrankNicolson] {
            let opts = SolverOptions {
                scheme,
                ..Default::default()
            };
            let s = Solver::with_drift(&g, &gamma, [0.3, -0.7], opts).unwrap();
            let q = Field::from_fn(&g, |x, t| 0.5 + x[1] + t);
            let seed = Field::from_fn(&g, |x, t| (x[0] + 2.0 * x[1] + 3.0 * t).sin());
            let dg = Field::from_fn_slice(&g, |x| (x[0] * 5.0).cos() + x[1]);
            let df = BoundaryTrace::from_fn(&g, |x, t| t * (x[0] - x[1]) + t * t);
            let dh = Field::from_fn(&g, |x, t| x[0] * x[1] - t);
            let u = s.solve_linear(Some(&q), &df, &dg, Some(&dh)).unwrap().solution;
            let j: f64 = u.values().iter().zip(seed.values()).map(|(a, b)| a * b).sum();
            let grad = s.vjp_linear(Some(&q), &seed).unwrap();
            // the initial slice takes boundary values from f, so only interior g counts
            let mut dg_int = dg.clone();
            for k in g.boundary_nodes() {
                dg_int.values_mut()[k] = 0.0;
            }
            let pred: f64 = grad.g.values().iter().zip(dg_int.values()).map(|(a, b)| a * b).sum::<f64>()
                + grad.f.values().iter().zip(df.values()).map(|(a, b)| a * b).sum::<f64>()
                + grad.h.values().iter().zip(dh.values()).map(|(a, b)| a * b).sum::<f64>();
            assert!((j - pred).abs() < 1e-10 * j.abs().max(1.0), "{scheme:?}: {j} vs {pred}");
        }
    }

    #[test]
    fn scheme_residual_vanishes_on_solutions() {
        let g = SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 2.0], [9, 11], 8, 0.4).unwrap();
        let s = Solver::with_drift(&g, &DiffusionTensor::identity(), [1.0, 0.5], SolverOptions::default()).unwrap();
        let q = Field::from_fn(&g, |x, _| x[0]);
        let f = BoundaryTrace::from_fn(&g, |x, t| t * x[1]);
        let u = s.solve_linear(Some(&q), &f, &Field::zeros_slice(&g), None).unwrap().solution;
        let r = s.scheme_residual(&u, Some(&q), None);
        assert!(r.max_abs() < 1e-10);
    }

    #[test]
    fn semilinear_consistency() {
        let g = heat_grid(33, 40, 0.2);
        let s = Solver::heat(&g);
        let zf = BoundaryTrace::zeros(&g);
        let g0 = sine(&g);
        let lin = s.solve_linear(None, &zf, &g0, None).unwrap().solution;
        let r = s.solve_semilinear(&Nonlinearity::zero(), &zf, &g0, Strategy::Picard).unwrap();
        assert_eq!(r.solution, lin);

        let qe = Expr::parse("1 + x*t").unwrap();
        let nl = Nonlinearity::linear_potential(qe.clone()).unwrap();
        let q = crate::model::sample_field(&qe, &g).unwrap();
        let lin = s.solve_linear(Some(&q), &zf, &g0, None).unwrap().solution;
        for st in [Strategy::Picard, Strategy::Newton] {
            let r = s.solve_semilinear(&nl, &zf, &g0, st).unwrap();
            assert!(rel_err(&r.solution, &lin) < 1e-12);
        }
    }

    #[test]
    fn picard_and_newton_agree() {
        let g = heat_grid(33, 40, 0.5);
        let s = Solver::heat(&g);
        let zf = BoundaryTrace::zeros(&g);
        let g0 = sine(&g).scaled(0.8);
        let nl = Nonlinearity::parse("u^3 + 0.5*sin(u) + 0.2").unwrap();
        let p = s.solve_semilinear(&nl, &zf, &g0, Strategy::Picard).unwrap();
        let n = s.solve_semilinear(&nl, &zf, &g0, Strategy::Newton).unwrap();
        assert!(p.converged && n.converged);
        assert!(rel_err(&p.solution, &n.solution) < 1e-9);
        for w in p.residuals.windows(2).skip(1) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6));
        }
    }

    #[test]
    fn picard_and_newton_agree_with_boundary_data() {
        let g = heat_grid(33, 40, 0.5);
        let s = Solver::heat(&g);
        let f = BoundaryTrace::from_fn(&g, |x, t| (1.0 - x[0]) * t.min(0.1) * 5.0);
        let g0 = Field::zeros_slice(&g);
        let nl = Nonlinearity::parse("u^3 + 0.5*u").unwrap();
        let p = s.solve_semilinear(&nl, &f, &g0, Strategy::Picard).unwrap();
        let n = s.solve_semilinear(&nl, &f, &g0, Strategy::Newton).unwrap();
        assert!(rel_err(&p.solution, &n.solution) < 1e-9);
        assert_eq!(BoundaryTrace::from_field(&n.solution), f);
        let r = s.scheme_residual(&n.solution, Some(&n.solution.map(|u| u * u + 0.5)), None);
        assert!(r.max_abs() < 1e-9, "{}", r.max_abs());
    }

    #[test]
    fn cubic_self_convergence() {
        // fine reference with 4x refinement in h and Δt
        let coarse = heat_grid(33, 50, 0.5);
        let fine = heat_grid(129, 200, 0.5);
        let nl = Nonlinearity::parse("u^3").unwrap();
        let opts = SolverOptions {
            scheme: TimeScheme::CrankNicolson,
            ..Default::default()
        };
        let run = |g: &SpaceTimeGrid| {
            Solver::new(g, &DiffusionTensor::identity(), opts)
                .unwrap()
                .solve_semilinear(&nl, &BoundaryTrace::zeros(g), &sine(g).scaled(0.1), Strategy::Newton)
                .unwrap()
                .solution
        };
        let uc = run(&coarse);
        let uf = run(&fine);
        let restricted = Field::from_fn(&coarse, |_, _| 0.0);
        let mut r = restricted;
        for n in 0..coarse.n_levels() {
            for k in 0..coarse.n_space() {
                r.level_mut(n)[k] = uf.at(4 * k, 4 * n);
            }
        }
        assert!(rel_err(&uc, &r) < 0.01);
    }

    #[test]
    fn energy_decays() {
        let g = heat_grid(33, 40, 0.5);
        let s = Solver::heat(&g);
        let g0 = Field::from_fn_slice(&g, |x| x[0] * (1.0 - x[0]) * (7.0 * x[0]).sin());
        let q = Field::from_fn(&g, |x, t| x[0] + t);
        let u = s.solve_linear(Some(&q), &BoundaryTrace::zeros(&g), &g0, None).unwrap().solution;
        let norms: Vec<f64> = (0..g.n_levels()).map(|n| u.slice(n).l2()).collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-14);
        }
    }

    #[test]
    fn divergent_fixed_point_reports_last_iterate() {
        let g = heat_grid(17, 20, 1.0);
        let opts = SolverOptions {
            max_iter: 5,
            ..Default::default()
        };
        let s = Solver::new(&g, &DiffusionTensor::identity(), opts).unwrap();
        let nl = Nonlinearity::parse("-u^3").unwrap();
        let res = s.solve_semilinear(&nl, &BoundaryTrace::zeros(&g), &sine(&g).scaled(3.0), Strategy::Picard);
        match res {
            Err(Error::NotConverged { report }) => {
                assert_eq!(report.residuals.len(), 5);
                assert!(!report.converged);
            }
            Err(Error::NonFinite { .. }) => {}
            other => panic!("{:?}", other.map(|r| r.iterations)),
        }
    }

    #[test]
    fn smallness_gate_is_reported() {
        let g = heat_grid(17, 20, 0.2);
        let s = Solver::heat(&g);
        let nl = Nonlinearity::admissible_analytic(Expr::parse("u^3").unwrap(), &g).unwrap();
        let r = s
            .solve_semilinear(&nl, &BoundaryTrace::zeros(&g), &sine(&g).scaled(2.0), Strategy::Newton)
            .unwrap();
        assert_eq!(r.well_posedness_asserted, Some(false));
        let r = s
            .solve_semilinear(&nl, &BoundaryTrace::zeros(&g), &sine(&g).scaled(0.1), Strategy::Newton)
            .unwrap();
        assert_eq!(r.well_posedness_asserted, Some(true));
    }

    #[test]
    fn deterministic() {
        let g = heat_grid(33, 40, 0.5);
        let s = Solver::heat(&g);
        let nl = Nonlinearity::parse("u^3").unwrap();
        let a = s.solve_semilinear(&nl, &BoundaryTrace::zeros(&g), &sine(&g), Strategy::Picard).unwrap();
        let b = s.solve_semilinear(&nl, &BoundaryTrace::zeros(&g), &sine(&g), Strategy::Picard).unwrap();
        assert_eq!(a.solution, b.solution);
    }
}
