//! One runner per experiment kind. Each writes its artifacts and returns a
//! JSON summary with the pass/fail checks.

use std::f64::consts::PI;

use serde::Serialize;
use serde_json::{json, Value};

use pipl_core::analysis::{self, CarlemanConfig, InequalityReport};
use pipl_core::cgo::{self, CGOParameters};
use pipl_core::dnmap;
use pipl_core::expr::{self, Env, Expr, Var};
use pipl_core::forward::{Solver, SolverOptions};
use pipl_core::grid::{BoundaryTrace, Field, SpaceTimeGrid};
use pipl_core::linearize::{self, Linearizer, ProbeFamily};
use pipl_core::model::{ClassTag, Nonlinearity};
use pipl_core::recon;
use pipl_core::{Error, Result};

use crate::config::{self, ClassSpec, Config, DirectionSpec, GridSection, Kind, NoiseSection};
use crate::output::{Check, Outputs};

pub struct Report {
    pub summary: Value,
    pub checks: Vec<Check>,
}

struct Ctx<'a> {
    cfg: &'a Config,
    grid: SpaceTimeGrid,
    seed: u64,
}

impl Ctx<'_> {
    fn opts(&self) -> SolverOptions {
        SolverOptions {
            scheme: self.cfg.model.scheme,
            ..SolverOptions::default()
        }
    }

    fn solver(&self) -> Result<Solver> {
        self.cfg.model.solver(&self.grid)
    }

    fn nl(&self) -> Result<Nonlinearity> {
        self.cfg.model.nonlinearity(&self.grid)
    }

    fn initial(&self) -> Result<Field> {
        config::slice(&self.cfg.data.initial, &self.grid)
    }

    fn boundary(&self) -> Result<BoundaryTrace> {
        config::trace(&self.cfg.data.boundary, &self.grid)
    }

    /// A potential field, or `None` when the expression is identically zero.
    fn potential(&self, src: &str) -> Result<Option<Field>> {
        if Expr::parse(src)?.is_zero() {
            Ok(None)
        } else {
            config::field(src, &self.grid).map(Some)
        }
    }

    fn noisy(&self, m: dnmap::DNMeasurement, noise: Option<&NoiseSection>) -> Result<dnmap::DNMeasurement> {
        match noise {
            Some(n) => dnmap::add_noise(&m, n.model, n.level, self.seed),
            None => Ok(m),
        }
    }
}

pub fn run(kind: Kind, cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Report> {
    let ctx = Ctx {
        cfg,
        grid: cfg.grid.build()?,
        seed,
    };
    match kind {
        Kind::Forward => forward(&ctx, out),
        Kind::Dnmap => dn_map(&ctx, out),
        Kind::CgoVerify => cgo_verify(&ctx, out),
        Kind::Linearize => linearize(&ctx, out),
        Kind::RecoverQ => recover_q(&ctx, out),
        Kind::RecoverB => recover_b(&ctx, out),
        Kind::RecoverG => recover_g(&ctx, out),
        Kind::Stability => stability(&ctx, out),
        Kind::Carleman => carleman(&ctx, out),
        Kind::Maxprin => maxprin(&ctx, out),
        Kind::Runge => runge(&ctx, out),
        Kind::Control => control(&ctx, out),
        Kind::NonuniqueDemo => nonunique(&ctx, out),
    }
}

fn section<T>(s: &Option<T>) -> &T {
    s.as_ref().expect("section filled by Config::resolve")
}

fn eval(e: &Expr, x: [f64; 2], t: f64) -> Result<f64> {
    e.eval(&Env::new(x, t, 0.0)).map_err(Error::invalid)
}

/// Doubles the spatial and temporal resolution.
fn refined(g: &GridSection) -> GridSection {
    GridSection {
        nodes: g.nodes.iter().map(|n| 2 * (n - 1) + 1).collect(),
        steps: 2 * g.steps,
        ..g.clone()
    }
}

#[derive(Serialize)]
struct ConvergenceRow {
    nodes: usize,
    steps: usize,
    h: f64,
    error: f64,
}

fn forward(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.forward);
    let m = &ctx.cfg.model;
    let solve = |gs: &GridSection| -> Result<(SpaceTimeGrid, pipl_core::forward::SolveReport)> {
        let grid = gs.build()?;
        let solver = m.solver(&grid)?;
        let nl = m.nonlinearity(&grid)?;
        let g = config::slice(&ctx.cfg.data.initial, &grid)?;
        let f = config::trace(&ctx.cfg.data.boundary, &grid)?;
        Ok((grid, solver.solve_semilinear(&nl, &f, &g, m.strategy)?))
    };
    let (grid, base) = solve(&ctx.cfg.grid)?;
    out.field("solution.csv", &base.solution)?;
    let mut summary = json!({
        "iterations": base.iterations,
        "converged": base.converged,
        "max_abs": base.solution.max_abs(),
        "l2": base.solution.l2(),
        "well_posedness_asserted": base.well_posedness_asserted,
    });
    let mut checks = vec![Check::holds("converged", base.converged)];
    if let Some(oracle) = &sec.oracle {
        let mut rows = Vec::new();
        let mut gs = ctx.cfg.grid.clone();
        for level in 0..=sec.refinements {
            let (g, u) = if level == 0 {
                (grid, base.solution.clone())
            } else {
                gs = refined(&gs);
                let (g, r) = solve(&gs)?;
                (g, r.solution)
            };
            rows.push(ConvergenceRow {
                nodes: g.nodes()[0],
                steps: g.steps(),
                h: g.spacing(0),
                error: u.sub(&config::field(oracle, &g)?).l2(),
            });
        }
        out.table("convergence.csv", &["nodes", "steps", "h", "error"], &rows)?;
        let orders: Vec<f64> = rows.windows(2).map(|w| (w[0].error / w[1].error).log2()).collect();
        summary["oracle_error"] = json!(rows[0].error);
        summary["orders"] = json!(orders);
        if let Some(max) = sec.max_error {
            checks.push(Check::at_most("oracle_error", rows[0].error, max));
        }
        if !orders.is_empty() {
            let min = orders.iter().copied().fold(f64::INFINITY, f64::min);
            checks.push(Check::at_least("min_order", min, sec.min_order));
        }
    }
    Ok(Report { summary, checks })
}

fn dn_map(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.dnmap);
    let solver = ctx.solver()?;
    let nl = ctx.nl()?;
    let g = ctx.initial()?;
    let f = if sec.active {
        ctx.boundary()?
    } else {
        BoundaryTrace::zeros(&ctx.grid)
    };
    let portion = &ctx.cfg.data.portion;
    let clean = dnmap::active_map(&solver, &nl, &g, &f, portion, ctx.cfg.model.strategy)?;
    let m = ctx.noisy(clean.clone(), sec.noise.as_ref())?;
    m.write(out.dir(), "dn")?;
    out.record("dn.csv");
    out.record("dn.json");
    let mut summary = json!({
        "entries": m.entries().len(),
        "levels": ctx.grid.n_levels(),
        "max_abs": m.max_abs(),
        "norm": m.norm(),
        "noise": m.noise(),
        "noise_norm": m.sub(&clean)?.norm(),
    });
    let mut checks = Vec::new();
    if let Some(oracle) = &sec.oracle {
        let u = Expr::parse(oracle)?;
        let du = [u.derivative(Var::X), u.derivative(Var::Y)];
        let mut err = 0.0f64;
        for (i, e) in clean.entries().iter().enumerate() {
            let x = ctx.grid.coord(e.node);
            let nu = e.face.normal();
            for n in 0..ctx.grid.n_levels() {
                let t = ctx.grid.time(n);
                let exact = nu[0] * eval(&du[0], x, t)? + nu[1] * eval(&du[1], x, t)?;
                err = err.max((clean.at(i, n) - exact).abs());
            }
        }
        summary["oracle_error"] = json!(err);
        if let Some(max) = sec.max_error {
            checks.push(Check::at_most("oracle_error", err, max));
        }
    }
    Ok(Report { summary, checks })
}

#[derive(Serialize)]
struct SweepRow {
    rho: f64,
    remainder_norm: f64,
    residual: f64,
}

fn cgo_verify(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.cgo);
    let q = ctx.potential(&sec.q)?;
    let rho = sec.rhos.first().copied().unwrap_or(1.0);
    let params = match sec.direction {
        DirectionSpec::Forward => CGOParameters::forward(rho, sec.omega, sec.xi, sec.tau),
        DirectionSpec::Backward => CGOParameters::backward(rho, sec.omega),
    };
    let r = cgo::sweep(&ctx.grid, q.as_ref(), &params, &sec.rhos, ctx.opts())?;
    let rows: Vec<SweepRow> = r
        .entries
        .iter()
        .map(|e| SweepRow {
            rho: e.rho,
            remainder_norm: e.remainder_norm,
            residual: e.residual,
        })
        .collect();
    out.table("cgo_sweep.csv", &["rho", "remainder_norm", "residual"], &rows)?;
    let warnings: Vec<String> = r
        .entries
        .iter()
        .flat_map(|e| e.warnings.iter().map(move |w| format!("ρ = {}: {w}", e.rho)))
        .collect();
    let summary = json!({
        "params": r.params,
        "strictly_decreasing": r.strictly_decreasing,
        "ratio": r.ratio,
        "max_residual": r.max_residual,
        "warnings": warnings,
    });
    let checks = vec![
        Check::holds("strictly_decreasing", r.strictly_decreasing),
        Check::at_most("ratio", r.ratio, sec.max_ratio),
        Check::holds("resolved", warnings.is_empty()),
    ];
    Ok(Report { summary, checks })
}

#[derive(Serialize)]
struct RateRow {
    order: usize,
    amplitude: f64,
    gap: f64,
    relative_gap: f64,
}

fn linearize(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.linearize);
    if sec.shapes.is_empty() {
        return Err(Error::invalid("linearize needs at least one probe shape"));
    }
    let exprs = sec.shapes.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>()?;
    for e in &exprs {
        for k in 0..ctx.grid.n_space() {
            eval(e, ctx.grid.coord(k), 0.0)?;
        }
    }
    let closures: Vec<Box<dyn Fn([f64; 2]) -> f64>> = exprs
        .iter()
        .map(|e| Box::new(move |x| e.eval(&Env::new(x, 0.0, 0.0)).unwrap_or(f64::NAN)) as Box<dyn Fn([f64; 2]) -> f64>)
        .collect();
    let shapes: Vec<&dyn Fn([f64; 2]) -> f64> = closures.iter().map(|b| b.as_ref()).collect();
    let family = ProbeFamily::ramped(&ctx.grid, &shapes, sec.ramp, sec.amplitudes.clone())?;
    let lin = Linearizer::new(&ctx.solver()?, &ctx.nl()?, &ctx.initial()?, family, ctx.cfg.model.strategy)?;
    let orders: Vec<usize> = match sec.order {
        Some(k) => vec![k],
        None => (1..=sec.shapes.len().min(linearize::MAX_ORDER)).collect(),
    };
    let [lo, hi] = sec.slope_range;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for k in orders {
        if k == 0 || k > sec.shapes.len() {
            return Err(Error::invalid(format!("order {k} needs 1..={} probe shapes", sec.shapes.len())));
        }
        let probes: Vec<usize> = (0..k).collect();
        let r = lin.order(&probes)?.report;
        for (i, &a) in r.amplitudes.iter().enumerate() {
            rows.push(RateRow {
                order: k,
                amplitude: a,
                gap: r.gaps[i],
                relative_gap: r.relative_gaps[i],
            });
        }
        checks.push(Check::within(
            &format!("order_{k}_slope"),
            r.slope.unwrap_or(f64::NAN),
            Some(lo),
            Some(hi),
        ));
        checks.push(Check::holds(&format!("order_{k}_above_rounding"), !r.noise_flagged));
        reports.push(r);
    }
    out.table("rates.csv", &["order", "amplitude", "gap", "relative_gap"], &rows)?;
    Ok(Report {
        summary: json!({ "orders": reports }),
        checks,
    })
}

#[derive(Serialize)]
struct SampleRow {
    xi_x: f64,
    xi_y: f64,
    tau: f64,
    omega_x: f64,
    omega_y: f64,
    rho: f64,
    re: f64,
    im: f64,
    remainder_norm: f64,
}

fn recover_q(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.recover_q);
    let q_meas = config::field(&sec.q_measured, &ctx.grid)?;
    let q_ref = config::field(&sec.q_reference, &ctx.grid)?;
    let mut twin = recon::SyntheticTwin::new(&ctx.grid, Some(q_meas.clone()));
    twin.solver = ctx.opts();
    twin.noise = sec.noise.as_ref().map(|n| (n.model, n.level, ctx.seed));
    let mut opts = recon::PotentialOptions {
        rhos: sec.rhos.clone(),
        alpha: sec.alpha,
        mode: sec.mode,
        solver: ctx.opts(),
        ..Default::default()
    };
    if let Some(s) = sec.space_modes {
        opts.space_modes = s;
    }
    if let Some(t) = sec.time_modes {
        opts.time_modes = t;
    }
    let truth = q_ref.sub(&q_meas);
    let (r, samples) = recon::recover_potential(&twin, Some(&q_ref), &opts, Some(&truth))?;
    r.write(out.dir(), "recovered_q")?;
    out.record("recovered_q.csv");
    out.record("recovered_q.json");
    out.field("truth_q.csv", &truth)?;
    let rows: Vec<SampleRow> = samples
        .samples
        .iter()
        .map(|s| SampleRow {
            xi_x: s.xi[0],
            xi_y: s.xi[1],
            tau: s.tau,
            omega_x: s.omega[0],
            omega_y: s.omega[1],
            rho: s.rho,
            re: s.value.re,
            im: s.value.im,
            remainder_norm: s.remainder_norm,
        })
        .collect();
    out.table(
        "fourier_samples.csv",
        &["xi_x", "xi_y", "tau", "omega_x", "omega_y", "rho", "re", "im", "remainder_norm"],
        &rows,
    )?;
    let err = r.relative_error.unwrap_or(f64::NAN);
    let summary = json!({
        "relative_error": err,
        "residual_norm": r.residual_norm,
        "data_norm": r.data_norm,
        "regularization": r.regularization,
        "iterations": r.iterations,
        "samples": rows.len(),
        "conjugate_defect": samples.conjugate_defect,
        "warnings": r.warnings,
    });
    Ok(Report {
        summary,
        checks: vec![Check::at_most("relative_error", err, sec.max_error)],
    })
}

#[derive(Serialize)]
struct TaylorRow {
    order: usize,
    l2: f64,
    relative_error: f64,
}

fn recover_b(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.recover_b);
    let solver = ctx.solver()?;
    let g = ctx.initial()?;
    let m = &ctx.cfg.model;
    let measured = recon::SemilinearModel {
        solver: solver.clone(),
        nl: ctx.nl()?,
        g: g.clone(),
    };
    let reference = recon::SemilinearModel {
        solver: solver.clone(),
        nl: config::nonlinearity(&sec.reference, ClassSpec::General, None, None, &ctx.grid)?,
        g,
    };
    let mut opts = recon::TaylorOptions {
        order: sec.order,
        inversion: sec.inversion,
        strategy: m.strategy,
        ..Default::default()
    };
    if let Some(r) = &sec.rhos {
        opts.rhos = r.clone();
    }
    if let Some(a) = sec.alpha {
        opts.alpha = a;
    }
    let f0 = ctx.boundary()?;
    let r = recon::recover_taylor(&measured, &reference, &f0, &opts, None)?;
    // exact δ_k = ∂_u^k (a_measured − a_reference) along the base solution
    let diff = Nonlinearity::general(expr::sub(Expr::parse(&m.nonlinearity)?, Expr::parse(&sec.reference)?));
    let mut rows = Vec::new();
    for (i, o) in r.orders.iter().enumerate() {
        let k = i + 1;
        let truth = solver.derivative_field(&diff, &r.base, k)?;
        let err = recon::relative_error(&o.recovered, &truth);
        o.clone().with_truth(&truth).write(out.dir(), &format!("delta_{k}"))?;
        out.record(format!("delta_{k}.csv"));
        out.record(format!("delta_{k}.json"));
        rows.push(TaylorRow {
            order: k,
            l2: o.recovered.l2(),
            relative_error: err,
        });
    }
    out.table("taylor.csv", &["order", "l2", "relative_error"], &rows)?;
    let top = rows.last().map_or(f64::NAN, |r| r.relative_error);
    let summary = json!({
        "orders": rows.len(),
        "relative_error": top,
        "positive_min": r.positive_min,
        "masked_nodes": r.masked_nodes.len(),
        "probes": r.probes,
        "seeds": r.seeds,
    });
    Ok(Report {
        summary,
        checks: vec![Check::at_most(&format!("order_{}_relative_error", sec.order), top, sec.max_error)],
    })
}

fn recover_g(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.recover_g);
    let solver = ctx.solver()?;
    let nl = ctx.nl()?;
    let truth = config::slice(sec.truth.as_deref().unwrap_or(&ctx.cfg.data.initial), &ctx.grid)?;
    let clean = dnmap::passive_map(&solver, &nl, &truth, &ctx.cfg.data.portion, ctx.cfg.model.strategy)?;
    let data = ctx.noisy(clean, sec.noise.as_ref())?;
    let opts = recon::InitialOptions {
        alpha: sec.alpha,
        strategy: ctx.cfg.model.strategy,
        ..Default::default()
    };
    let r = recon::recover_initial(&solver, &nl, &data, &opts, Some(&truth))?;
    r.write(out.dir(), "recovered_g")?;
    out.record("recovered_g.csv");
    out.record("recovered_g.json");
    out.field("truth_g.csv", &truth)?;
    let err = r.relative_error.unwrap_or(f64::NAN);
    let summary = json!({
        "relative_error": err,
        "residual_norm": r.residual_norm,
        "data_norm": r.data_norm,
        "regularization": r.regularization,
        "iterations": r.iterations,
        "converged": r.converged,
        "warnings": r.warnings,
    });
    Ok(Report {
        summary,
        checks: vec![Check::at_most("relative_error", err, sec.max_error)],
    })
}

fn stability(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.stability);
    let solver = ctx.solver()?;
    let nl = ctx.nl()?;
    let g = ctx.initial()?;
    let portion = &ctx.cfg.data.portion;
    let opts = recon::InitialOptions {
        strategy: ctx.cfg.model.strategy,
        ..Default::default()
    };
    let curve = recon::stability_curve(&solver, &nl, &g, portion, &sec.deltas, sec.trials, ctx.seed, &opts)?;
    out.table("stability.csv", &["delta", "trial", "error", "dn_diff_norm"], &curve.points)?;
    let mut checks = vec![
        Check::at_least("rank_correlation", curve.rank_correlation, sec.min_rank_correlation),
        Check::at_most("two_term_residual", curve.two_term_residual, curve.linear_residual),
    ];
    let mut summary = json!({
        "floor": curve.floor,
        "rank_correlation": curve.rank_correlation,
        "c1": curve.c1,
        "c2": curve.c2,
        "delta0": curve.delta0,
        "two_term_residual": curve.two_term_residual,
        "linear_coef": curve.linear_coef,
        "linear_residual": curve.linear_residual,
    });
    if let Some(dir) = &sec.audit_direction {
        let direction = config::slice(dir, &ctx.grid)?;
        let a = analysis::stability_audit(&solver, &nl, &g, &direction, portion, &sec.audit_scales, sec.m_bound)?;
        out.table("audit.csv", &["scale", "lhs", "dn_difference"], &a.points)?;
        checks.push(Check::holds("audit_bound_dominates", a.bound_dominates));
        summary["audit"] = json!({
            "m_bound": a.m_bound,
            "c": a.c,
            "delta0": a.delta0,
            "monotone": a.monotone,
            "bound_dominates": a.bound_dominates,
        });
    }
    Ok(Report { summary, checks })
}

#[derive(Serialize)]
struct InequalityRow {
    inequality: usize,
    lambda: f64,
    mu: Option<f64>,
    l: Option<f64>,
    lhs: f64,
    rhs: f64,
    ratio: f64,
    log_scale: f64,
}

#[derive(Serialize)]
struct WeightRow {
    node: usize,
    x: f64,
    y: f64,
    log_theta1_sq: f64,
}

fn carleman(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.carleman);
    let gamma = ctx.cfg.model.gamma()?;
    let evaluate = |grid: &SpaceTimeGrid| -> Result<(CarlemanConfig, Vec<String>, Vec<InequalityRow>)> {
        let u = config::field(&sec.solution, grid)?;
        let f = config::field(&sec.source, grid)?;
        let mut cfg = CarlemanConfig::for_grid(grid, sec.gamma0.clone())?;
        if let Some(v) = &sec.lambdas {
            cfg.lambdas = v.clone();
        }
        if let Some(v) = &sec.mus {
            cfg.mus = v.clone();
        }
        if let Some(v) = &sec.ls {
            cfg.ls = v.clone();
        }
        if let Some(v) = sec.k {
            cfg.k = v;
        }
        if let Some(v) = sec.t0 {
            cfg.t0 = v;
        }
        let notes = cfg.validate(grid, &gamma)?;
        let row = |i: usize, r: &InequalityReport| InequalityRow {
            inequality: i,
            lambda: r.lambda,
            mu: r.mu,
            l: r.l,
            lhs: r.lhs,
            rhs: r.rhs,
            ratio: r.ratio,
            log_scale: r.log_scale,
        };
        let mut rows: Vec<InequalityRow> = analysis::carleman_sweep_1(&u, &f, &cfg)?.iter().map(|r| row(1, r)).collect();
        rows.extend(analysis::carleman_sweep_2(&u, &f, &gamma, &cfg)?.iter().map(|r| row(2, r)));
        Ok((cfg, notes, rows))
    };
    let (cfg, notes, rows) = evaluate(&ctx.grid)?;
    out.table(
        "carleman.csv",
        &["inequality", "lambda", "mu", "l", "lhs", "rhs", "ratio", "log_scale"],
        &rows,
    )?;
    let level = ctx.grid.steps() / 2;
    let weights: Vec<WeightRow> = match (cfg.lambdas.first(), cfg.mus.first()) {
        (Some(&l), Some(&m)) => cfg
            .log_theta1_sq(&ctx.grid, level, l, m)
            .map(|w| {
                w.iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let x = ctx.grid.coord(k);
                        WeightRow {
                            node: k,
                            x: x[0],
                            y: x[1],
                            log_theta1_sq: v,
                        }
                    })
                    .collect()
            })
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    out.table("weight_slice.csv", &["node", "x", "y", "log_theta1_sq"], &weights)?;
    let finite = rows.iter().all(|r| r.ratio.is_finite() && r.ratio > 0.0);
    let mut checks = vec![Check::holds("ratios_finite", finite)];
    let mut summary = json!({
        "psi": cfg.psi,
        "t0": cfg.t0,
        "points": rows.len(),
        "degenerate": rows.len() - rows.iter().filter(|r| r.ratio.is_finite()).count(),
        "notes": notes,
    });
    if sec.refine {
        let fine = refined(&ctx.cfg.grid).build()?;
        let (_, _, fine_rows) = evaluate(&fine)?;
        let change = rows
            .iter()
            .zip(&fine_rows)
            .map(|(a, b)| (a.ratio - b.ratio).abs() / b.ratio)
            .fold(0.0, f64::max);
        summary["refinement_change"] = json!(change);
        checks.push(Check::at_most("refinement_change", change, sec.max_change));
    }
    Ok(Report { summary, checks })
}

fn maxprin(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.maxprin);
    let q = ctx.potential(&sec.q)?;
    match analysis::max_principle_check(&ctx.solver()?, q.as_ref(), &ctx.boundary()?) {
        Ok(c) => {
            out.json("certificate.json", &c)?;
            Ok(Report {
                summary: json!({ "certificate": c }),
                checks: vec![
                    Check::holds("nonnegative", true),
                    Check::holds("strictly_positive", c.positive),
                ],
            })
        }
        Err(Error::CheckFailed(msg)) => Ok(Report {
            summary: json!({ "violation": msg }),
            checks: vec![Check::holds("nonnegative", false)],
        }),
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct GapRow {
    n: usize,
    gap: f64,
    relative_gap: f64,
}

fn runge(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.runge);
    let grid = ctx.grid;
    let solver = ctx.solver()?;
    let q = ctx.potential(&sec.q)?;
    let zero = Field::zeros_slice(&grid);
    let lateral = match &sec.target_boundary {
        Some(b) => config::trace(b, &grid)?,
        None => {
            let params = CGOParameters::forward(sec.cgo_rho, [1.0, 0.0], [0.0, 0.0], 2.0 * PI);
            let c = cgo::build(&grid, None, &params, ctx.opts())?.materialize()?;
            let mut re = Field::zeros(&grid);
            for n in 0..grid.n_levels() {
                for (k, v) in re.level_mut(n).iter_mut().enumerate() {
                    *v = c.at(k, n).re;
                }
            }
            BoundaryTrace::from_field(&re)
        }
    };
    let target = solver.solve_linear(q.as_ref(), &lateral, &zero, None)?.solution;
    let r = recon::runge_fit(&solver, q.as_ref(), &target, &sec.mode, &sec.sizes)?;
    let rows: Vec<GapRow> = r
        .gaps
        .iter()
        .map(|&(n, gap)| GapRow {
            n,
            gap,
            relative_gap: gap / r.target_norm,
        })
        .collect();
    out.table("runge.csv", &["n", "gap", "relative_gap"], &rows)?;
    out.field("target.csv", &target)?;
    out.field("fit.csv", &r.fit)?;
    let summary = json!({
        "target_norm": r.target_norm,
        "gap": r.gap(),
        "dropped": r.dropped,
        "coefficients": r.coefficients,
    });
    Ok(Report {
        summary,
        checks: vec![Check::holds("strictly_decreasing", r.strictly_decreasing())],
    })
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    terminal_norm: f64,
}

fn control(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.control);
    let nl = ctx.nl()?;
    let opts = recon::ControlOptions {
        time_knots: sec.time_knots,
        alpha: sec.alpha,
        strategy: ctx.cfg.model.strategy,
        ..Default::default()
    };
    let r = recon::null_control(&ctx.solver()?, &nl, &ctx.initial()?, sec.epsilon, &sec.portion, &opts)?;
    let rows: Vec<HistoryRow> = r
        .history
        .iter()
        .enumerate()
        .map(|(i, &v)| HistoryRow {
            iteration: i,
            terminal_norm: v,
        })
        .collect();
    out.table("control_history.csv", &["iteration", "terminal_norm"], &rows)?;
    out.field("controlled_solution.csv", &r.solution)?;
    let summary = json!({
        "switch_level": r.switch_level,
        "uncontrolled_norm": r.uncontrolled_norm,
        "terminal_norm": r.terminal_norm,
        "reduction": r.reduction(),
        "continued_max": r.continued_max,
        "partial": r.partial,
        "coefficients": r.coefficients,
    });
    let check = if matches!(nl.class(), ClassTag::BT { .. }) {
        Check::at_most(
            "continuation_growth",
            r.continued_max / r.terminal_norm,
            sec.continuation_factor,
        )
    } else {
        Check::at_most("reduction", r.reduction(), 1.0 / sec.min_reduction)
    };
    Ok(Report {
        summary,
        checks: vec![check],
    })
}

fn nonunique(ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let sec = section(&ctx.cfg.nonunique);
    let bumps = sec.bumps.unwrap_or_else(|| analysis::default_bumps(&ctx.grid, sec.collar));
    let d = analysis::nonuniqueness_demo(&ctx.solver()?, sec.collar, &bumps)?;
    for i in 0..2 {
        out.field(&format!("g{}.csv", i + 1), &d.g[i])?;
        out.field(&format!("a{}.csv", i + 1), &d.a[i])?;
    }
    let trace_sup = d.trace_sup[0].max(d.trace_sup[1]);
    let summary = json!({
        "bumps": bumps,
        "g_difference": d.g_difference,
        "trace_sup": d.trace_sup,
        "solution_sup": d.solution_sup,
    });
    Ok(Report {
        summary,
        checks: vec![
            Check::at_least("g_difference", d.g_difference, sec.min_difference),
            Check::at_most("trace_sup", trace_sup, sec.trace_tolerance),
        ],
    })
}
