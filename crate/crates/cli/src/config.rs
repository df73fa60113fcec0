//! Experiment configuration: one TOML file with named sections.

use std::path::PathBuf;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use pipl_core::analysis::Bump;
use pipl_core::dnmap::NoiseModel;
use pipl_core::expr::Expr;
use pipl_core::forward::{Solver, SolverOptions, Strategy, TimeScheme};
use pipl_core::grid::{BoundaryPortion, BoundaryTrace, Face, Field, SpaceTimeGrid};
use pipl_core::model::{self, DiffusionTensor, Nonlinearity};
use pipl_core::recon::{PotentialMode, RungeMode, TaylorInversion};
use pipl_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Forward,
    Dnmap,
    CgoVerify,
    Linearize,
    RecoverQ,
    RecoverB,
    RecoverG,
    Stability,
    Carleman,
    Maxprin,
    Runge,
    Control,
    NonuniqueDemo,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Forward => "forward",
            Kind::Dnmap => "dnmap",
            Kind::CgoVerify => "cgo-verify",
            Kind::Linearize => "linearize",
            Kind::RecoverQ => "recover-q",
            Kind::RecoverB => "recover-b",
            Kind::RecoverG => "recover-g",
            Kind::Stability => "stability",
            Kind::Carleman => "carleman",
            Kind::Maxprin => "maxprin",
            Kind::Runge => "runge",
            Kind::Control => "control",
            Kind::NonuniqueDemo => "nonunique-demo",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub kind: Option<Kind>,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub grid: GridSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    pub forward: Option<ForwardSection>,
    pub dnmap: Option<DnmapSection>,
    pub cgo: Option<CgoSection>,
    pub linearize: Option<LinearizeSection>,
    pub recover_q: Option<RecoverQSection>,
    pub recover_b: Option<RecoverBSection>,
    pub recover_g: Option<RecoverGSection>,
    pub stability: Option<StabilitySection>,
    pub carleman: Option<CarlemanSection>,
    pub maxprin: Option<MaxprinSection>,
    pub runge: Option<RungeSection>,
    pub control: Option<ControlSection>,
    pub nonunique: Option<NonuniqueSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
    pub steps: usize,
    pub horizon: f64,
}

impl GridSection {
    pub fn build(&self) -> Result<SpaceTimeGrid> {
        match (self.lower.as_slice(), self.upper.as_slice(), self.nodes.as_slice()) {
            ([a], [b], [n]) => SpaceTimeGrid::new_1d(*a, *b, *n, self.steps, self.horizon),
            ([a0, a1], [b0, b1], [n0, n1]) => {
                SpaceTimeGrid::new_2d([*a0, *a1], [*b0, *b1], [*n0, *n1], self.steps, self.horizon)
            }
            _ => Err(Error::invalid("grid lower, upper and nodes need one or two matching entries")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Scalar(String),
    Tensor([String; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassSpec {
    #[default]
    General,
    Admissible,
    LinearPotential,
    Glued,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub gamma: GammaSpec,
    /// Ellipticity bound checked on the grid.
    pub rho0: f64,
    pub drift: [f64; 2],
    pub nonlinearity: String,
    pub class: ClassSpec,
    /// Tail `c(x, t, u)` of a glued term, active on `(T − epsilon, T]`.
    pub tail: Option<String>,
    pub epsilon: Option<f64>,
    pub scheme: TimeScheme,
    pub strategy: Strategy,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            gamma: GammaSpec::Scalar("1".into()),
            rho0: 1e-3,
            drift: [0.0, 0.0],
            nonlinearity: "0".into(),
            class: ClassSpec::General,
            tail: None,
            epsilon: None,
            scheme: TimeScheme::default(),
            strategy: Strategy::Newton,
        }
    }
}

impl ModelSection {
    pub fn gamma(&self) -> Result<DiffusionTensor> {
        match &self.gamma {
            GammaSpec::Scalar(s) if s.trim() == "1" => Ok(DiffusionTensor::identity()),
            GammaSpec::Scalar(s) => DiffusionTensor::scalar(Expr::parse(s)?, self.rho0),
            GammaSpec::Tensor([a, b, c]) => {
                DiffusionTensor::new(Expr::parse(a)?, Expr::parse(b)?, Expr::parse(c)?, self.rho0)
            }
        }
    }

    pub fn solver(&self, grid: &SpaceTimeGrid) -> Result<Solver> {
        let opts = SolverOptions {
            scheme: self.scheme,
            ..SolverOptions::default()
        };
        Solver::with_drift(grid, &self.gamma()?, self.drift, opts)
    }

    pub fn nonlinearity(&self, grid: &SpaceTimeGrid) -> Result<Nonlinearity> {
        nonlinearity(&self.nonlinearity, self.class, self.tail.as_deref(), self.epsilon, grid)
    }
}

pub fn nonlinearity(
    src: &str,
    class: ClassSpec,
    tail: Option<&str>,
    epsilon: Option<f64>,
    grid: &SpaceTimeGrid,
) -> Result<Nonlinearity> {
    let e = Expr::parse(src)?;
    match class {
        ClassSpec::General if e.is_zero() => Ok(Nonlinearity::zero()),
        ClassSpec::General => Ok(Nonlinearity::general(e)),
        ClassSpec::Admissible => Nonlinearity::admissible_analytic(e, grid),
        ClassSpec::LinearPotential => Nonlinearity::linear_potential(e),
        ClassSpec::Glued => {
            let tail = tail.ok_or_else(|| Error::invalid("glued model needs a tail expression"))?;
            let eps = epsilon.ok_or_else(|| Error::invalid("glued model needs epsilon"))?;
            Nonlinearity::glued(e, Expr::parse(tail)?, eps, grid)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Initial data `g(x, y)`.
    pub initial: String,
    /// Lateral Dirichlet data `f(x, y, t)`.
    pub boundary: String,
    /// Observation portion of the boundary.
    pub portion: BoundaryPortion,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            initial: "0".into(),
            boundary: "0".into(),
            portion: BoundaryPortion::Full,
        }
    }
}

pub fn slice(src: &str, grid: &SpaceTimeGrid) -> Result<Field> {
    model::sample_slice(&Expr::parse(src)?, grid)
}

pub fn field(src: &str, grid: &SpaceTimeGrid) -> Result<Field> {
    model::sample_field(&Expr::parse(src)?, grid)
}

pub fn trace(src: &str, grid: &SpaceTimeGrid) -> Result<BoundaryTrace> {
    Ok(BoundaryTrace::from_field(&field(src, grid)?))
}

fn lower_face() -> BoundaryPortion {
    BoundaryPortion::Faces {
        faces: vec![Face::Lower(0)],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub model: NoiseModel,
    pub level: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardSection {
    /// Exact solution used as oracle.
    pub oracle: Option<String>,
    /// Number of grid doublings for the convergence study.
    pub refinements: usize,
    pub min_order: f64,
    pub max_error: Option<f64>,
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self {
            oracle: None,
            refinements: 0,
            min_order: 1.8,
            max_error: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DnmapSection {
    /// Use `data.boundary` as lateral data instead of zero.
    pub active: bool,
    pub noise: Option<NoiseSection>,
    /// Exact solution whose normal derivative is compared with the trace.
    pub oracle: Option<String>,
    pub max_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSpec {
    #[default]
    Forward,
    Backward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgoSection {
    pub rhos: Vec<f64>,
    pub omega: [f64; 2],
    pub xi: [f64; 2],
    pub tau: f64,
    pub direction: DirectionSpec,
    /// Potential `q(x, y, t)`.
    pub q: String,
    pub max_ratio: f64,
}

impl Default for CgoSection {
    fn default() -> Self {
        Self {
            rhos: pipl_core::cgo::DEFAULT_SWEEP.to_vec(),
            omega: [1.0, 0.0],
            xi: [0.0, 0.0],
            tau: 0.0,
            direction: DirectionSpec::Forward,
            q: "0".into(),
            max_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearizeSection {
    /// Spatial probe shapes `f_ℓ(x, y)`, ramped in time.
    pub shapes: Vec<String>,
    pub order: Option<usize>,
    pub amplitudes: Vec<f64>,
    pub ramp: f64,
    pub slope_range: [f64; 2],
}

impl Default for LinearizeSection {
    fn default() -> Self {
        Self {
            shapes: vec!["1".into(), "1".into(), "1".into()],
            order: None,
            amplitudes: pipl_core::linearize::DEFAULT_AMPLITUDES.to_vec(),
            ramp: 0.1,
            slope_range: [0.8, 1.2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverQSection {
    /// Potential of the measured model.
    pub q_measured: String,
    /// Potential of the reference model; the difference `q_reference − q_measured` is recovered.
    pub q_reference: String,
    pub mode: PotentialMode,
    pub rhos: Vec<f64>,
    pub space_modes: Option<usize>,
    pub time_modes: Option<usize>,
    pub alpha: Option<f64>,
    pub noise: Option<NoiseSection>,
    pub max_error: f64,
}

impl Default for RecoverQSection {
    fn default() -> Self {
        Self {
            q_measured: "0".into(),
            q_reference: "0".into(),
            mode: PotentialMode::Full,
            rhos: Vec::new(),
            space_modes: None,
            time_modes: None,
            alpha: None,
            noise: None,
            max_error: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverBSection {
    /// Nonlinearity of the reference model; the measured one is `model.nonlinearity`.
    pub reference: String,
    pub order: usize,
    pub rhos: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub inversion: TaylorInversion,
    pub max_error: f64,
}

impl Default for RecoverBSection {
    fn default() -> Self {
        Self {
            reference: "0".into(),
            order: 3,
            rhos: None,
            alpha: None,
            inversion: TaylorInversion::WeightedKernel,
            max_error: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverGSection {
    /// True initial data; `data.initial` when absent.
    pub truth: Option<String>,
    pub noise: Option<NoiseSection>,
    pub alpha: Option<f64>,
    pub max_error: f64,
}

impl Default for RecoverGSection {
    fn default() -> Self {
        Self {
            truth: None,
            noise: None,
            alpha: None,
            max_error: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub deltas: Vec<f64>,
    pub trials: usize,
    pub min_rank_correlation: f64,
    /// Perturbation direction for the audit of `g₂ = g₁ + s·direction`.
    pub audit_direction: Option<String>,
    pub audit_scales: Vec<f64>,
    pub m_bound: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            deltas: vec![1e-1, 1e-2, 1e-3, 1e-4],
            trials: 5,
            min_rank_correlation: 0.9,
            audit_direction: None,
            audit_scales: vec![1e-1, 1e-2, 1e-3, 1e-4],
            m_bound: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarlemanSection {
    /// Solution `u(x, y, t)` of the linear equation.
    pub solution: String,
    /// Its source `F(x, y, t)`.
    pub source: String,
    pub gamma0: BoundaryPortion,
    pub lambdas: Option<Vec<f64>>,
    pub mus: Option<Vec<f64>>,
    pub ls: Option<Vec<f64>>,
    pub k: Option<f64>,
    pub t0: Option<f64>,
    /// Repeat on a once-refined grid and compare the ratios.
    pub refine: bool,
    pub max_change: f64,
}

impl Default for CarlemanSection {
    fn default() -> Self {
        Self {
            solution: "exp(-pi^2*t)*sin(pi*x)".into(),
            source: "0".into(),
            gamma0: lower_face(),
            lambdas: None,
            mus: None,
            ls: None,
            k: None,
            t0: None,
            refine: true,
            max_change: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxprinSection {
    pub q: String,
}

impl Default for MaxprinSection {
    fn default() -> Self {
        Self { q: "0".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RungeSection {
    /// Lateral data of the target solution; a forward CGO trace when absent.
    pub target_boundary: Option<String>,
    pub cgo_rho: f64,
    pub q: String,
    pub sizes: Vec<usize>,
    pub mode: RungeMode,
}

impl Default for RungeSection {
    fn default() -> Self {
        Self {
            target_boundary: None,
            cgo_rho: 2.0,
            q: "0".into(),
            sizes: vec![4, 8, 16, 32],
            mode: RungeMode::Full,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub epsilon: f64,
    pub portion: BoundaryPortion,
    pub time_knots: usize,
    pub alpha: f64,
    pub min_reduction: f64,
    pub continuation_factor: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            portion: lower_face(),
            time_knots: 16,
            alpha: 0.0,
            min_reduction: 100.0,
            continuation_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonuniqueSection {
    pub collar: f64,
    pub bumps: Option<[Bump; 2]>,
    pub min_difference: f64,
    pub trace_tolerance: f64,
}

impl Default for NonuniqueSection {
    fn default() -> Self {
        Self {
            collar: 0.1,
            bumps: None,
            min_difference: 0.1,
            trace_tolerance: 1e-8,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Fills absent kind sections with defaults and rejects kinds whose
    /// required inputs are missing.
    pub fn resolve(&mut self, kind: Kind) -> Result<()> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(Error::invalid(format!(
                    "config is for `{}` but `{}` was requested",
                    k.name(),
                    kind.name()
                )));
            }
        }
        self.kind = Some(kind);
        match kind {
            Kind::Forward => {
                self.forward.get_or_insert_with(Default::default);
            }
            Kind::Dnmap => {
                self.dnmap.get_or_insert_with(Default::default);
            }
            Kind::CgoVerify => {
                self.cgo.get_or_insert_with(Default::default);
            }
            Kind::Linearize => {
                self.linearize.get_or_insert_with(Default::default);
            }
            Kind::RecoverQ => {
                if self.recover_q.is_none() {
                    return Err(Error::invalid("recover-q needs a [recover_q] section"));
                }
            }
            Kind::RecoverB => {
                self.recover_b.get_or_insert_with(Default::default);
            }
            Kind::RecoverG => {
                self.recover_g.get_or_insert_with(Default::default);
            }
            Kind::Stability => {
                self.stability.get_or_insert_with(Default::default);
            }
            Kind::Carleman => {
                self.carleman.get_or_insert_with(Default::default);
            }
            Kind::Maxprin => {
                self.maxprin.get_or_insert_with(Default::default);
            }
            Kind::Runge => {
                self.runge.get_or_insert_with(Default::default);
            }
            Kind::Control => {
                self.control.get_or_insert_with(Default::default);
            }
            Kind::NonuniqueDemo => {
                self.nonunique.get_or_insert_with(Default::default);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [grid]
        lower = [0.0]
        upper = [1.0]
        nodes = [17]
        steps = 16
        horizon = 0.5
    "#;

    #[test]
    fn minimal_config_takes_defaults() {
        let mut c = Config::parse(MINIMAL).unwrap();
        c.resolve(Kind::Control).unwrap();
        assert_eq!(c.control.as_ref().unwrap().epsilon, 0.1);
        assert_eq!(c.grid.build().unwrap().n_space(), 17);
        assert!(c.model.nonlinearity(&c.grid.build().unwrap()).unwrap().is_zero());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let mut c = Config::parse(&format!("kind = \"runge\"\n{MINIMAL}")).unwrap();
        assert!(c.resolve(Kind::Forward).is_err());
        assert!(c.resolve(Kind::Runge).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse(&format!("{MINIMAL}\nsteps_typo = 3")).is_err());
    }

    #[test]
    fn portions_and_tensors_parse() {
        let text = format!(
            "{MINIMAL}\n[model]\ngamma = [\"1\", \"0\", \"2\"]\nscheme = \"crank-nicolson\"\n[data]\nportion = {{ kind = \"faces\", faces = [{{ lower = 0 }}] }}\n"
        );
        let c = Config::parse(&text).unwrap();
        assert!(matches!(c.model.gamma, GammaSpec::Tensor(_)));
        assert_eq!(c.model.scheme, TimeScheme::CrankNicolson);
        assert!(matches!(c.data.portion, BoundaryPortion::Faces { .. }));
    }

    #[test]
    fn recover_q_requires_its_section() {
        let mut c = Config::parse(MINIMAL).unwrap();
        assert!(c.resolve(Kind::RecoverQ).is_err());
    }
}
