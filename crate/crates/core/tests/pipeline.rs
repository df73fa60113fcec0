//! End-to-end pipelines and solver invariants across modules.

use std::f64::consts::PI;

use proptest::prelude::*;

use pipl_core::dnmap::{self, NoiseModel};
use pipl_core::forward::{Solver, Strategy};
use pipl_core::grid::{BoundaryPortion, BoundaryTrace, Face, Field, SpaceTimeGrid};
use pipl_core::model::Nonlinearity;
use pipl_core::recon;

fn grid() -> SpaceTimeGrid {
    SpaceTimeGrid::new_1d(0.0, 1.0, 17, 16, 0.25).unwrap()
}

fn left() -> BoundaryPortion {
    BoundaryPortion::Faces {
        faces: vec![Face::Lower(0)],
    }
}

fn bumps(grid: &SpaceTimeGrid, c: &[f64]) -> Field {
    Field::from_fn_slice(grid, |x| {
        c.iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * PI * x[0]).sin())
            .sum()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_solves_superpose(a in prop::collection::vec(-1.0f64..1.0, 3), b in prop::collection::vec(-1.0f64..1.0, 3), s in -2.0f64..2.0) {
        let g = grid();
        let solver = Solver::heat(&g);
        let f = BoundaryTrace::zeros(&g);
        let (ga, gb) = (bumps(&g, &a), bumps(&g, &b));
        let ua = solver.solve_linear(None, &f, &ga, None).unwrap().solution;
        let ub = solver.solve_linear(None, &f, &gb, None).unwrap().solution;
        let mix = solver.solve_linear(None, &f, &ga.add(&gb.scaled(s)), None).unwrap().solution;
        let err = mix.sub(&ua.add(&ub.scaled(s))).max_abs();
        prop_assert!(err <= 1e-12 * (1.0 + mix.max_abs()), "{}", err);
    }

    #[test]
    fn implicit_euler_keeps_nonnegative_data_nonnegative(a in 0.0f64..2.0, b in 0.0f64..2.0, q in 0.0f64..20.0) {
        let g = grid();
        let solver = Solver::heat(&g);
        let f = BoundaryTrace::from_fn(&g, |x, t| if x[0] == 0.0 { a * t } else { b * t * t });
        let g0 = Field::from_fn_slice(&g, |x| (PI * x[0]).sin());
        let qf = Field::from_fn(&g, |_, _| q);
        let u = solver.solve_linear(Some(&qf), &f, &g0, None).unwrap().solution;
        prop_assert!(u.values().iter().all(|v| *v >= -1e-12));
    }

    #[test]
    fn noise_is_reproducible_per_seed(seed in any::<u64>(), level in 1e-4f64..1e-1) {
        let g = grid();
        let solver = Solver::heat(&g);
        let m = dnmap::passive_map(&solver, &Nonlinearity::zero(), &bumps(&g, &[1.0]), &left(), Strategy::Newton).unwrap();
        let a = dnmap::add_noise(&m, NoiseModel::GaussianRelative, level, seed).unwrap();
        let b = dnmap::add_noise(&m, NoiseModel::GaussianRelative, level, seed).unwrap();
        prop_assert_eq!(a.values(), b.values());
        let c = dnmap::add_noise(&m, NoiseModel::GaussianRelative, level, seed.wrapping_add(1)).unwrap();
        prop_assert!(a.values() != c.values());
    }

    #[test]
    fn field_csv_round_trips(c in prop::collection::vec(-1e3f64..1e3, 2)) {
        let g = grid();
        let u = Field::from_fn(&g, |x, t| c[0] * x[0] + c[1] * t * t);
        let back = Field::from_csv(&g, &u.to_csv()).unwrap();
        prop_assert_eq!(u.values(), back.values());
    }
}

#[test]
fn semilinear_strategies_agree_with_boundary_data() {
    let g = grid();
    let solver = Solver::heat(&g);
    let nl = Nonlinearity::parse("u^3 + 0.5*u").unwrap();
    let f = BoundaryTrace::from_fn(&g, |x, t| 0.3 * t * (1.0 + x[0]));
    let g0 = bumps(&g, &[0.5, 0.2]);
    let p = solver.solve_semilinear(&nl, &f, &g0, Strategy::Picard).unwrap();
    let n = solver.solve_semilinear(&nl, &f, &g0, Strategy::Newton).unwrap();
    assert!(p.converged && n.converged);
    assert!(p.solution.sub(&n.solution).max_abs() < 1e-8);
}

#[test]
fn affine_nonlinearity_matches_linear_solve() {
    let g = grid();
    let solver = Solver::heat(&g);
    let nl = Nonlinearity::parse("(1 + x)*u").unwrap();
    let g0 = bumps(&g, &[1.0]);
    let f = BoundaryTrace::zeros(&g);
    let a = solver.solve_semilinear(&nl, &f, &g0, Strategy::Newton).unwrap().solution;
    let q = Field::from_fn(&g, |x, _| 1.0 + x[0]);
    let b = solver.solve_linear(Some(&q), &f, &g0, None).unwrap().solution;
    assert!(a.sub(&b).max_abs() < 1e-12);
}

#[test]
fn measurement_write_produces_csv_and_sidecar() {
    let g = grid();
    let solver = Solver::heat(&g);
    let m = dnmap::passive_map(&solver, &Nonlinearity::zero(), &bumps(&g, &[1.0]), &left(), Strategy::Newton).unwrap();
    let dir = std::env::temp_dir().join(format!("pipl-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    m.write(&dir, "dn").unwrap();
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("dn.json")).unwrap()).unwrap();
    assert_eq!(side["entries"], 1);
    assert_eq!(side["levels"], g.n_levels());
    assert_eq!(side["grid_digest"], g.digest());
    assert!(std::fs::read_to_string(dir.join("dn.csv")).unwrap().lines().count() > g.steps());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn measure_then_recover_initial_data() {
    let g = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 32, 0.25).unwrap();
    let solver = Solver::heat(&g);
    let nl = Nonlinearity::zero();
    let truth = bumps(&g, &[1.0, 0.3]);
    let data = dnmap::passive_map(&solver, &nl, &truth, &BoundaryPortion::Full, Strategy::Newton).unwrap();
    let r = recon::recover_initial(&solver, &nl, &data, &recon::InitialOptions::default(), Some(&truth)).unwrap();
    assert!(r.relative_error.unwrap() < 0.1, "{:?}", r.relative_error);
}

#[test]
fn identical_potentials_recover_zero_difference() {
    let g = SpaceTimeGrid::new_1d(0.0, 1.0, 33, 32, 1.0).unwrap();
    let q = Field::from_fn(&g, |x, t| 0.5 * x[0] + t);
    let twin = recon::SyntheticTwin::new(&g, Some(q.clone()));
    let opts = recon::PotentialOptions {
        rhos: vec![1.0, 2.0],
        space_modes: 1,
        time_modes: 1,
        ..Default::default()
    };
    let (r, samples) = recon::recover_potential(&twin, Some(&q), &opts, None).unwrap();
    assert!(!samples.samples.is_empty());
    assert!(r.recovered.max_abs() < 1e-8, "{}", r.recovered.max_abs());
}
