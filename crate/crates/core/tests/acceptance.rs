//! Acceptance suite: one line per criterion, nonzero exit when any fails.

use std::f64::consts::PI;
use std::time::Instant;

use pipl_core::analysis;
use pipl_core::cgo::{self, CGOParameters};
use pipl_core::dnmap;
use pipl_core::forward::{Solver, SolverOptions, Strategy, TimeScheme};
use pipl_core::grid::{BoundaryPortion, BoundaryTrace, Face, Field, SpaceTimeGrid};
use pipl_core::linearize::{self, Linearizer, ProbeFamily};
use pipl_core::model::{DiffusionTensor, Nonlinearity};
use pipl_core::recon;

type Outcome = pipl_core::Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

fn cn() -> SolverOptions {
    SolverOptions {
        scheme: TimeScheme::CrankNicolson,
        ..SolverOptions::default()
    }
}

fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

fn heat_oracle(nx: usize) -> pipl_core::Result<(Field, Field)> {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, nx + 1, nx, 0.5)?;
    let exact = Field::from_fn(&grid, |x, t| (-PI * PI * t).exp() * (PI * x[0]).sin());
    let solver = Solver::new(&grid, &DiffusionTensor::identity(), cn())?;
    let g = Field::from_fn_slice(&grid, |x| (PI * x[0]).sin());
    let u = solver
        .solve_linear(None, &BoundaryTrace::zeros(&grid), &g, None)?
        .solution;
    Ok((u, exact))
}

fn forward_convergence() -> Outcome {
    let start = Instant::now();
    let mut errs = Vec::new();
    for nx in [32, 64, 128, 256] {
        let (u, exact) = heat_oracle(nx)?;
        errs.push(u.sub(&exact).l2());
    }
    let secs = start.elapsed().as_secs_f64();
    let ord = orders(&errs);
    let min = ord.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min >= 1.8 && secs < 10.0, format!("orders {ord:.3?}, {secs:.2} s")))
}

fn dn_accuracy() -> Outcome {
    let portion = BoundaryPortion::Faces {
        faces: vec![Face::Lower(0)],
    };
    let mut errs = Vec::new();
    for nx in [32, 64, 128, 256] {
        let (u, _) = heat_oracle(nx)?;
        let m = dnmap::measure(&u, &portion)?;
        let grid = *u.grid();
        let err = (0..grid.n_levels())
            .map(|n| (m.at(0, n) + PI * (-PI * PI * grid.time(n)).exp()).abs())
            .fold(0.0, f64::max);
        errs.push(err);
    }
    let ord = orders(&errs);
    let min = ord.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min >= 1.8, format!("orders {ord:.3?}")))
}

fn bump_1d(grid: &SpaceTimeGrid) -> Field {
    Field::from_fn(grid, |x, t| 3.0 * (-25.0 * ((x[0] - 0.45).powi(2) + (t - 0.5).powi(2))).exp())
}

fn cgo_decay() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 128, 256, 1.0)?;
    let q = bump_1d(&grid);
    let mut lines = Vec::new();
    let mut ok = true;
    for (omega, tau) in [(1.0, 0.0), (-1.0, 2.0 * PI)] {
        let p = CGOParameters::forward(8.0, [omega, 0.0], [0.0, 0.0], tau);
        let fwd = cgo::sweep(&grid, Some(&q), &p, &cgo::DEFAULT_SWEEP, SolverOptions::default())?;
        let b = CGOParameters::backward(8.0, [omega, 0.0]);
        let bwd = cgo::sweep(&grid, Some(&q), &b, &cgo::DEFAULT_SWEEP, SolverOptions::default())?;
        for r in [&fwd, &bwd] {
            ok &= r.decays() && r.entries.iter().all(|e| e.remainder_norm.is_finite());
            let norms: Vec<String> = r.entries.iter().map(|e| format!("{:.3e}", e.remainder_norm)).collect();
            lines.push(format!("{:?} ω={omega}: {norms:?} ratio {:.3}", r.params.direction, r.ratio));
        }
    }
    Ok((ok, lines.join("; ")))
}

fn fourier_pairing() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 128, 256, 1.0)?;
    let f = bump_1d(&grid);
    let mut ok = true;
    let mut points = 0;
    let mut worst = Vec::new();
    for m in -3i32..=3 {
        let tau = 2.0 * PI * m as f64;
        let fhat = cgo::fourier_sample(&f, [0.0, 0.0], tau);
        let gaps: Vec<f64> = cgo::DEFAULT_SWEEP
            .iter()
            .map(|&rho| {
                let fp = CGOParameters::forward(rho, [1.0, 0.0], [0.0, 0.0], tau);
                let bp = CGOParameters::backward(rho, [1.0, 0.0]);
                let a = cgo::build(&grid, None, &fp, SolverOptions::default())?;
                let b = cgo::build(&grid, None, &bp, SolverOptions::default())?;
                Ok((cgo::pairing(&f, &a, &b)?.value - fhat).norm())
            })
            .collect::<pipl_core::Result<_>>()?;
        let mono = gaps.windows(2).all(|w| w[1] < w[0]);
        ok &= mono;
        points += 1;
        worst.push(format!("τ={m}·2π {:.2e}→{:.2e}", gaps[0], gaps[gaps.len() - 1]));
    }
    Ok((ok && points >= 6, format!("{points} lattice points; {}", worst.join(", "))))
}

fn linearization_rates() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 40, 0.5)?;
    let solver = Solver::heat(&grid);
    let nl = Nonlinearity::parse("u^3")?;
    // nonzero base state so that the second u-derivative does not vanish
    let g = Field::from_fn_slice(&grid, |x| 0.8 * (PI * x[0]).sin());
    let shapes: [&dyn Fn([f64; 2]) -> f64; 3] = [&|x| 1.0 - x[0], &|x| 0.5 + x[0], &|_| 1.0];
    let schedules: [(&[usize], Vec<f64>); 3] = [
        (&[0], vec![1e-2, 1e-3, 1e-4]),
        (&[0, 1], vec![1e-2, 1e-3, 1e-4]),
        (&[0, 1, 2], vec![1e-2, 3e-3, 1e-3]),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (probes, amps) in schedules {
        let fam = ProbeFamily::ramped(&grid, &shapes, 0.1, amps)?;
        let lin = Linearizer::new(&solver, &nl, &g, fam, Strategy::Newton)?;
        let r = lin.order(probes)?.report;
        ok &= r.slope_within(0.8, 1.2) && !r.noise_flagged;
        lines.push(format!("order {} slope {:.3}", r.order, r.slope.unwrap_or(f64::NAN)));
    }
    Ok((ok, lines.join(", ")))
}

fn reciprocity_gap() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 128, 128, 1.0)?;
    let solver = Solver::new(&grid, &DiffusionTensor::identity(), cn())?;
    let q1 = bump_1d(&grid);
    let q2 = Field::from_fn(&grid, |x, t| 0.5 * (PI * x[0]).sin() * t);
    let f = BoundaryTrace::from_fn(&grid, |x, t| (1.0 + x[0]) * (2.0 * t).min(1.0).powi(2));
    let ft = BoundaryTrace::from_fn(&grid, |x, t| (2.0 - x[0]) * (1.0 - t).powi(2));
    let r = recon::reciprocity(&solver, &q1, &q2, &f, &ft)?;
    Ok((
        r.relative_gap <= 0.05,
        format!("volume {:.6e}, boundary {:.6e}, gap {:.2e}", r.volume, r.boundary, r.relative_gap),
    ))
}

fn separable_bump(grid: &SpaceTimeGrid) -> Field {
    Field::from_fn(grid, |x, t| {
        let y = if grid.dim() == 2 { (-((x[1] - 0.45).powi(2)) / 0.06).exp() } else { 1.0 };
        2.0 * (-((x[0] - 0.5).powi(2)) / 0.06).exp() * y * (1.0 + 0.5 * (2.0 * PI * t).sin())
    })
}

fn potential_recovery() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for grid in [
        SpaceTimeGrid::new_1d(0.0, 1.0, 65, 64, 1.0)?,
        SpaceTimeGrid::new_2d([0.0, 0.0], [1.0, 1.0], [17, 17], 32, 1.0)?,
    ] {
        let dq = separable_bump(&grid);
        let q_ref = Field::from_fn(&grid, |x, _| 0.5 * x[0]);
        let opts = recon::PotentialOptions::default();
        let twin = recon::SyntheticTwin::new(&grid, Some(q_ref.sub(&dq)));
        let (r, _) = recon::recover_potential(&twin, Some(&q_ref), &opts, Some(&dq))?;
        let err = r.relative_error.unwrap_or(f64::NAN);
        let same = recon::SyntheticTwin::new(&grid, Some(q_ref.clone()));
        let (z, _) = recon::recover_potential(&same, Some(&q_ref), &opts, None)?;
        let zero = z.recovered.l2() / dq.l2();
        ok &= err <= 0.2 && zero <= 1e-6;
        lines.push(format!("{}D relative error {err:.3}, control {zero:.1e}", grid.dim()));
    }
    Ok((ok, lines.join("; ")))
}

fn taylor_recovery() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 40, 1.0)?;
    let q3 = |x: [f64; 2], t: f64| 1.0 + 0.5 * (-(x[0] - 0.5).powi(2) / 0.1).exp() * (1.0 + t);
    let model = |nl: &str| -> pipl_core::Result<recon::SemilinearModel> {
        Ok(recon::SemilinearModel {
            solver: Solver::heat(&grid),
            nl: Nonlinearity::parse(nl)?,
            g: Field::zeros_slice(&grid),
        })
    };
    let truth = vec![Field::zeros(&grid), Field::zeros(&grid), Field::from_fn(&grid, |x, t| 6.0 * q3(x, t))];
    let opts = recon::TaylorOptions::default();
    let r = recon::recover_taylor(
        &model("(1+0.5*exp(-(x-0.5)^2/0.1)*(1+t))*u^3")?,
        &model("0")?,
        &BoundaryTrace::zeros(&grid),
        &opts,
        Some(&truth),
    )?;
    let q3_rec = r.orders[2].recovered.scaled(1.0 / 6.0);
    let err = recon::relative_error(&q3_rec, &Field::from_fn(&grid, q3));
    let lower: Vec<String> = r.orders[..2].iter().map(|o| format!("{:.1e}", o.recovered.l2())).collect();
    Ok((
        err <= 0.25,
        format!("cubic coefficient relative error {err:.3}; lower orders |δ| {lower:?}; {} probes", r.probes),
    ))
}

fn initial_recovery() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 65, 64, 0.5)?;
    let solver = Solver::heat(&grid);
    let nl = Nonlinearity::zero();
    let portion = BoundaryPortion::Faces {
        faces: vec![Face::Lower(0)],
    };
    let g = Field::from_fn_slice(&grid, |x| (PI * x[0]).sin());
    let opts = recon::InitialOptions::default();
    let data = dnmap::passive_map(&solver, &nl, &g, &portion, Strategy::Newton)?;
    let err = recon::recover_initial(&solver, &nl, &data, &opts, Some(&g))?
        .relative_error
        .unwrap_or(f64::NAN);
    let curve = recon::stability_curve(&solver, &nl, &g, &portion, &[1e-1, 1e-2, 1e-3, 1e-4], 5, 11, &opts)?;
    let ok = err <= 0.1 && curve.rank_correlation >= 0.9 && curve.two_term_residual <= curve.linear_residual;
    Ok((
        ok,
        format!(
            "noiseless error {err:.4}; rank correlation {:.3}; two-term residual {:.3e} vs linear {:.3e} (δ₀ {:.3})",
            curve.rank_correlation, curve.two_term_residual, curve.linear_residual, curve.delta0
        ),
    ))
}

fn carleman_ratios() -> Outcome {
    let portion = BoundaryPortion::Faces {
        faces: vec![Face::Lower(0)],
    };
    let id = DiffusionTensor::identity();
    let mut runs = Vec::new();
    for (nx, nt) in [(65, 128), (129, 256)] {
        let grid = SpaceTimeGrid::new_1d(0.0, 1.0, nx, nt, 0.5)?;
        let u = Field::from_fn(&grid, |x, t| (-PI * PI * t).exp() * (PI * x[0]).sin());
        let f = Field::zeros(&grid);
        let cfg = analysis::CarlemanConfig::for_grid(&grid, portion.clone())?;
        cfg.validate(&grid, &id)?;
        let mut ratios: Vec<f64> = analysis::carleman_sweep_1(&u, &f, &cfg)?.iter().map(|r| r.ratio).collect();
        ratios.extend(analysis::carleman_sweep_2(&u, &f, &id, &cfg)?.iter().map(|r| r.ratio));
        runs.push(ratios);
    }
    let finite = runs.iter().flatten().all(|r| r.is_finite() && *r > 0.0);
    let change = runs[0]
        .iter()
        .zip(&runs[1])
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    Ok((
        finite && change < 0.2,
        format!("{} parameter points, ratios finite: {finite}; largest change under refinement {:.2}%", runs[0].len(), 100.0 * change),
    ))
}

fn max_principle() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 65, 64, 0.5)?;
    let solver = Solver::heat(&grid);
    let f = BoundaryTrace::from_fn(&grid, |x, t| if x[0] == 0.0 { linearize::smooth_ramp(t, 0.1) } else { 0.0 });
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, q) in [("q = 0", None), ("q = 50", Some(Field::from_fn(&grid, |_, _| 50.0)))] {
        let c = analysis::max_principle_check(&solver, q.as_ref(), &f)?;
        ok &= c.min >= -1e-8 * c.max_abs && c.later_min > 0.0;
        lines.push(format!("{name}: min {:.2e}, min beyond level 0 {:.2e}", c.min, c.later_min));
    }
    Ok((ok, lines.join("; ")))
}

fn nonuniqueness() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 129, 64, 0.5)?;
    let solver = Solver::heat(&grid);
    let d = analysis::nonuniqueness_demo(&solver, 0.1, &analysis::default_bumps(&grid, 0.1))?;
    Ok((
        d.holds(1e-8, 0.1),
        format!(
            "‖g₁−g₂‖ {:.3}; trace sup-norms {:.1e}, {:.1e}",
            d.g_difference, d.trace_sup[0], d.trace_sup[1]
        ),
    ))
}

fn null_control() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 65, 80, 0.5)?;
    let solver = Solver::heat(&grid);
    let portion = BoundaryPortion::Faces {
        faces: vec![Face::Lower(0)],
    };
    let opts = recon::ControlOptions::default();
    let g = Field::from_fn_slice(&grid, |x| (PI * x[0]).sin());
    let lin = recon::null_control(&solver, &Nonlinearity::zero(), &g, 0.1, &portion, &opts)?;
    let nl = Nonlinearity::glued(
        pipl_core::expr::Expr::parse("0.5*u^3")?,
        pipl_core::expr::Expr::parse("u^2")?,
        0.1,
        &grid,
    )?;
    let g = Field::from_fn_slice(&grid, |x| 0.5 * (PI * x[0]).sin());
    let glued = recon::null_control(&solver, &nl, &g, 0.1, &portion, &opts)?;
    let ok = lin.reduction() <= 1e-2 && glued.continued_max <= 10.0 * glued.terminal_norm;
    Ok((
        ok,
        format!(
            "linear reduction {:.2e}; glued terminal {:.2e}, continued max {:.2e}",
            lin.reduction(),
            glued.terminal_norm,
            glued.continued_max
        ),
    ))
}

fn runge_fit() -> Outcome {
    let grid = SpaceTimeGrid::new_1d(0.0, 1.0, 65, 128, 0.5)?;
    let solver = Solver::heat(&grid);
    let params = CGOParameters::forward(2.0, [1.0, 0.0], [0.0, 0.0], 2.0 * PI);
    let cgo = cgo::build(&grid, None, &params, SolverOptions::default())?.materialize()?;
    let mut re = Field::zeros(&grid);
    for n in 0..grid.n_levels() {
        for (k, v) in re.level_mut(n).iter_mut().enumerate() {
            *v = cgo.at(k, n).re;
        }
    }
    let target = solver
        .solve_linear(None, &BoundaryTrace::from_field(&re), &Field::zeros_slice(&grid), None)?
        .solution;
    let sizes = [4, 8, 16, 32];
    let full = recon::runge_fit(&solver, None, &target, &recon::RungeMode::Full, &sizes)?;
    let partial_mode = recon::RungeMode::Partial {
        excluded: BoundaryPortion::Faces {
            faces: vec![Face::Lower(0)],
        },
        lower: [0.7, 0.0],
        upper: [1.0, 0.0],
    };
    let partial = recon::runge_fit(&solver, None, &target, &partial_mode, &sizes)?;
    let fmt = |r: &recon::RungeResult| -> Vec<String> { r.gaps.iter().map(|(_, g)| format!("{:.2e}", g / r.target_norm)).collect() };
    Ok((
        full.strictly_decreasing() && partial.strictly_decreasing(),
        format!("relative gaps full {:?}; partial {:?}", fmt(&full), fmt(&partial)),
    ))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 forward convergence", forward_convergence),
        ("2 DN trace accuracy", dn_accuracy),
        ("3 CGO remainder decay", cgo_decay),
        ("4 Fourier pairing", fourier_pairing),
        ("5 integral-identity reciprocity", reciprocity_gap),
        ("6 linearization rates", linearization_rates),
        ("7 potential recovery", potential_recovery),
        ("8 Taylor-coefficient recovery", taylor_recovery),
        ("9 initial-data recovery and stability shape", initial_recovery),
        ("10 Carleman ratio stability", carleman_ratios),
        ("11 maximum principle", max_principle),
        ("12 non-uniqueness", nonuniqueness),
        ("13 null control", null_control),
        ("14 Runge fit", runge_fit),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("[{tag}] {name} ({:.1} s): {detail}", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
