//! Python bindings for the laboratory: coefficient expressions, scenario
//! loading, hypothesis diagnostics, PDE solving, Hamiltonian gap reports,
//! closed-loop simulation and the Monte-Carlo verification suite.
//!
//! The module mirrors the library's Rust surface: build a [`Scenario`] from a
//! scenario file, `solve` it into a [`Field`], then feed both to the
//! simulation/verification entry points. Policies are given in the same
//! textual form the command-line tool accepts (`"star"`, `"const 0.5"`,
//! `"expr sin(x1)"`).

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use isaacslab::bi_solver as bi;
use isaacslab::expr;
use isaacslab::game_model as gm;
use isaacslab::hamiltonian as ham;
use isaacslab::sde_engine as sde;
use isaacslab::verifier as ver;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// ---------------------------------------------------------------------------
// Expressions
// ---------------------------------------------------------------------------

/// A parsed coefficient expression.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Expr {
    ast: expr::Ast,
}

#[pymethods]
impl Expr {
    /// Parses the expression language used in scenario files.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Expr> {
        Ok(Expr { ast: expr::parse(text).map_err(err)? })
    }

    /// Evaluates under a `{name: value}` environment, e.g. `{"x1": 0.5}`.
    fn eval(&self, env: HashMap<String, f64>) -> PyResult<f64> {
        expr::eval(&self.ast, &env).map_err(err)
    }

    /// Names of the variables the expression reads, sorted.
    fn free_vars(&self) -> Vec<String> {
        self.ast.free_vars().iter().map(|v| v.to_string()).collect()
    }

    /// Returns a copy with constant subtrees folded.
    fn fold_constants(&self) -> Expr {
        Expr { ast: self.ast.clone().fold_constants() }
    }

    fn __str__(&self) -> String {
        self.ast.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expr(\"{}\")", self.ast)
    }
}

// ---------------------------------------------------------------------------
// Scenarios and diagnostics
// ---------------------------------------------------------------------------

/// A scenario file: the model plus grid/simulation defaults.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Scenario {
    inner: gm::Scenario,
}

/// Hypothesis diagnostics over a sampled cloud: coefficient growth and
/// diffusion non-degeneracy/integrability.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Diagnostics {
    #[pyo3(get)]
    pub k_hat: f64,
    #[pyo3(get)]
    pub k_hat_doubled_radius: f64,
    #[pyo3(get)]
    pub unbounded_suspicion: bool,
    #[pyo3(get)]
    pub c_hat: f64,
    #[pyo3(get)]
    pub max_condition: f64,
    /// Sup of the Girsanov kernel norm; `None` when the diffusion was
    /// degenerate at a sample with a live control term.
    #[pyo3(get)]
    pub kernel_bound: Option<f64>,
    #[pyo3(get)]
    pub degenerate: bool,
    #[pyo3(get)]
    pub samples: usize,
}

fn default_radius(sc: &gm::Scenario) -> f64 {
    match &sc.grid {
        Some(g) => g
            .x_lo
            .iter()
            .chain(g.x_hi.iter())
            .fold(0.0f64, |acc, v| if v.abs() > acc { v.abs() } else { acc }),
        None => 2.0,
    }
}

#[pymethods]
impl Scenario {
    /// Loads and validates a scenario file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Scenario> {
        Ok(Scenario { inner: gm::Scenario::load(&path).map_err(err)? })
    }

    /// `"game"` or `"control"`.
    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.spec.kind {
            gm::ModelKind::Game => "game",
            gm::ModelKind::Control => "control",
        }
    }

    /// State dimension.
    #[getter]
    fn d(&self) -> usize {
        self.inner.spec.d
    }

    /// Driving-noise dimension.
    #[getter]
    fn m(&self) -> usize {
        self.inner.spec.m
    }

    /// Horizon `T`.
    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.spec.horizon
    }

    /// Canonical, normalized echo of the model definition.
    fn canonical(&self) -> String {
        self.inner.canonical_echo()
    }

    /// Runs the hypothesis diagnostics on a sampled state cloud. The radius
    /// defaults to the largest grid-corner coordinate (2.0 without a grid).
    #[pyo3(signature = (radius = None, samples = 512, seed = 0))]
    fn diagnostics(&self, radius: Option<f64>, samples: usize, seed: u64) -> PyResult<Diagnostics> {
        let radius = radius.unwrap_or_else(|| default_radius(&self.inner));
        let cloud = gm::SampleCloud::generate(&self.inner.spec, radius, samples, seed);
        let rep = gm::diagnostics(&self.inner.spec, &cloud).map_err(err)?;
        Ok(Diagnostics {
            k_hat: rep.growth.k_hat,
            k_hat_doubled_radius: rep.growth.k_hat_doubled_radius,
            unbounded_suspicion: rep.growth.unbounded_suspicion,
            c_hat: rep.novikov.c_hat,
            max_condition: rep.novikov.max_condition,
            kernel_bound: rep.novikov.sigma_inv_f1_bound,
            degenerate: rep.novikov.degenerate,
            samples: rep.growth.samples,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(kind=\"{}\", d={}, m={}, horizon={})",
            self.kind(),
            self.inner.spec.d,
            self.inner.spec.m,
            self.inner.spec.horizon
        )
    }
}

// ---------------------------------------------------------------------------
// Solved value fields
// ---------------------------------------------------------------------------

/// Discrete residual statistics of a solved field.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Residual {
    #[pyo3(get)]
    pub max_abs: f64,
    #[pyo3(get)]
    pub rms: f64,
    #[pyo3(get)]
    pub samples: usize,
}

/// A solved value field together with the model it solves.
#[pyclass(frozen)]
pub struct Field {
    spec: gm::GameSpec,
    inner: Arc<bi::ValueField>,
}

#[pymethods]
impl Field {
    /// Which equation the field solves: `"upper"`, `"lower"` or `"control"`.
    #[getter]
    fn equation(&self) -> &'static str {
        match self.inner.equation {
            bi::EquationKind::BiUpper => "upper",
            bi::EquationKind::BiLower => "lower",
            bi::EquationKind::HjbControl => "control",
        }
    }

    /// Nodes per state dimension.
    #[getter]
    fn nx(&self) -> Vec<usize> {
        self.inner.grid.nx.clone()
    }

    /// Time levels.
    #[getter]
    fn nt(&self) -> usize {
        self.inner.grid.nt
    }

    /// State dimension.
    #[getter]
    fn d(&self) -> usize {
        self.inner.grid.d
    }

    /// Interpolated field value at `(s, x)`; `x` outside the grid is clamped.
    fn value(&self, s: f64, x: Vec<f64>) -> PyResult<f64> {
        self.check_point(&x)?;
        Ok(self.inner.interp_value(s, &x).0)
    }

    /// Interpolated spatial gradient at `(s, x)`.
    fn gradient(&self, s: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_point(&x)?;
        let mut out = vec![0.0; self.inner.grid.d];
        self.inner.interp_gradient_into(s, &x, &mut out);
        Ok(out)
    }

    /// Samples the discrete equation residual of the solved field.
    #[pyo3(signature = (max_samples = 4096))]
    fn residual(&self, max_samples: usize) -> PyResult<Residual> {
        let stats = bi::residual(&self.spec, &self.inner, max_samples).map_err(err)?;
        Ok(Residual { max_abs: stats.max_abs, rms: stats.rms, samples: stats.samples })
    }

    fn __repr__(&self) -> String {
        format!(
            "Field(equation=\"{}\", nx={:?}, nt={})",
            self.equation(),
            self.inner.grid.nx,
            self.inner.grid.nt
        )
    }
}

impl Field {
    fn check_point(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.grid.d {
            return Err(err(format!(
                "point has {} coordinates, field has d = {}",
                x.len(),
                self.inner.grid.d
            )));
        }
        Ok(())
    }
}

/// Solves the scenario's equation on its grid. For two-player models `side`
/// selects the upper or lower equation (defaulting to the scenario's own
/// setting, then to `"lower"`); single-controller models ignore it.
#[pyfunction]
#[pyo3(signature = (scenario, side = None))]
fn solve(scenario: &Scenario, side: Option<&str>) -> PyResult<Field> {
    let sc = &scenario.inner;
    let grid_cfg = sc
        .grid
        .as_ref()
        .ok_or_else(|| err("scenario has no [grid] section"))?;
    let grid = bi::Grid::from_config(sc.spec.horizon, grid_cfg).map_err(err)?;
    let field = match sc.spec.kind {
        gm::ModelKind::Control => bi::solve_hjb_control(&sc.spec, &grid).map_err(err)?,
        gm::ModelKind::Game => {
            let side = match side.or(grid_cfg.side.as_deref()) {
                Some(text) => bi::Side::parse(text)
                    .ok_or_else(|| err(format!("unknown side `{text}` (expected `upper` or `lower`)")))?,
                None => bi::Side::Lower,
            };
            bi::solve_bi(&sc.spec, &grid, side).map_err(err)?
        }
    };
    Ok(Field { spec: sc.spec.clone(), inner: Arc::new(field) })
}

// ---------------------------------------------------------------------------
// Hamiltonian reports
// ---------------------------------------------------------------------------

/// Pointwise upper/lower Hamiltonian comparison at one `(s, x, p)`.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct HamiltonianSummary {
    #[pyo3(get)]
    pub h_lower: f64,
    #[pyo3(get)]
    pub h_upper: f64,
    #[pyo3(get)]
    pub gap: f64,
    /// Index into the first player's control grid attaining the lower value.
    #[pyo3(get)]
    pub argmax_u1: usize,
    /// Index into the second player's control grid attaining it.
    #[pyo3(get)]
    pub argmin_u2: usize,
}

/// Evaluates both optimized Hamiltonians at one phase point.
#[pyfunction]
fn hamiltonian(scenario: &Scenario, s: f64, x: Vec<f64>, p: Vec<f64>) -> PyResult<HamiltonianSummary> {
    let rep = ham::hamiltonian_report(&scenario.inner.spec, s, &x, &p).map_err(err)?;
    Ok(HamiltonianSummary {
        h_lower: rep.h_lower,
        h_upper: rep.h_upper,
        gap: rep.gap,
        argmax_u1: rep.argmax_u1,
        argmin_u2: rep.argmin_u2,
    })
}

/// Gap statistics over a sampled phase cloud.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct GapSummary {
    #[pyo3(get)]
    pub max_gap: f64,
    #[pyo3(get)]
    pub mean_gap: f64,
    /// Fraction of samples whose minimax gap is numerically zero.
    #[pyo3(get)]
    pub saddle_fraction: f64,
    #[pyo3(get)]
    pub samples: usize,
}

/// Measures the upper/lower Hamiltonian gap over a random phase cloud:
/// `s` uniform on the horizon, `x` and `p` uniform in boxes.
#[pyfunction]
#[pyo3(signature = (scenario, x_radius = None, p_radius = 2.0, samples = 1000, seed = 0))]
fn isaacs_gap(
    scenario: &Scenario,
    x_radius: Option<f64>,
    p_radius: f64,
    samples: usize,
    seed: u64,
) -> PyResult<GapSummary> {
    let x_radius = x_radius.unwrap_or_else(|| default_radius(&scenario.inner));
    let cloud = ham::sample_phase_cloud(&scenario.inner.spec, x_radius, p_radius, samples, seed);
    let rep = ham::isaacs_gap(&scenario.inner.spec, &cloud).map_err(err)?;
    Ok(GapSummary {
        max_gap: rep.max_gap,
        mean_gap: rep.mean_gap,
        saddle_fraction: rep.saddle_fraction,
        samples: rep.samples,
    })
}

// ---------------------------------------------------------------------------
// Simulation and verification
// ---------------------------------------------------------------------------

/// Monte-Carlo payoff estimate for one policy pair.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Payoff {
    #[pyo3(get)]
    pub label: String,
    #[pyo3(get)]
    pub n_paths: usize,
    #[pyo3(get)]
    pub n_used: usize,
    #[pyo3(get)]
    pub mean: f64,
    #[pyo3(get)]
    pub se: f64,
    #[pyo3(get)]
    pub running_mean: f64,
    #[pyo3(get)]
    pub terminal_mean: f64,
    #[pyo3(get)]
    pub non_finite_fraction: f64,
    #[pyo3(get)]
    pub ill_defined: bool,
}

impl Payoff {
    fn from_core(est: &ver::PayoffEstimate) -> Payoff {
        Payoff {
            label: est.label.clone(),
            n_paths: est.n_paths,
            n_used: est.n_used,
            mean: est.mean,
            se: est.se,
            running_mean: est.running_mean,
            terminal_mean: est.terminal_mean,
            non_finite_fraction: est.non_finite_fraction,
            ill_defined: est.ill_defined,
        }
    }
}

struct McArgs {
    t0: f64,
    x0: Vec<f64>,
    paths: usize,
    steps: usize,
    seed: u64,
}

fn resolve_mc(
    sc: &gm::Scenario,
    t0: Option<f64>,
    x0: Option<Vec<f64>>,
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<McArgs> {
    let mc = sc.mc.as_ref();
    let missing = || err("scenario has no [mc] section; pass t0, x0, paths, steps and seed explicitly");
    Ok(McArgs {
        t0: match t0 {
            Some(v) => v,
            None => mc.ok_or_else(missing)?.t0,
        },
        x0: match x0 {
            Some(v) => v,
            None => mc.ok_or_else(missing)?.x0.clone(),
        },
        paths: match paths {
            Some(v) => v,
            None => mc.ok_or_else(missing)?.paths,
        },
        steps: match steps {
            Some(v) => v,
            None => mc.ok_or_else(missing)?.steps,
        },
        seed: match seed {
            Some(v) => v,
            None => mc.ok_or_else(missing)?.seed,
        },
    })
}

fn policy_from_text(
    spec: &gm::GameSpec,
    role: sde::PlayerRole,
    text: &str,
    field: Option<&Field>,
) -> PyResult<sde::FeedbackPolicy> {
    sde::FeedbackPolicy::from_text(spec, role, text, field.map(|f| &f.inner)).map_err(err)
}

/// Simulates the closed-loop system under a policy pair and estimates the
/// payoff. Policies use the textual form `"star"` (needs `field`),
/// `"const v1 v2 ..."` or `"expr e1; e2; ..."`; simulation parameters default
/// to the scenario's `[mc]` section.
#[pyfunction]
#[pyo3(signature = (scenario, policy1 = "star", policy2 = "star", field = None,
                    t0 = None, x0 = None, paths = None, steps = None, seed = None))]
#[allow(clippy::too_many_arguments)]
fn simulate_payoff(
    scenario: &Scenario,
    policy1: &str,
    policy2: &str,
    field: Option<&Field>,
    t0: Option<f64>,
    x0: Option<Vec<f64>>,
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Payoff> {
    let sc = &scenario.inner;
    let mc = resolve_mc(sc, t0, x0, paths, steps, seed)?;
    let p1 = policy_from_text(&sc.spec, sde::PlayerRole::One, policy1, field)?;
    let p2 = policy_from_text(&sc.spec, sde::PlayerRole::Two, policy2, field)?;
    let bundle = sde::simulate(&sc.spec, &p1, &p2, mc.t0, &mc.x0, mc.paths, mc.steps, mc.seed)
        .map_err(err)?;
    let label = format!("{}|{}", p1.label(), p2.label());
    let est = ver::payoff(&sc.spec, &bundle, &label).map_err(err)?;
    Ok(Payoff::from_core(&est))
}

/// Pathwise payoff-decomposition statistics.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Decomposition {
    #[pyo3(get)]
    pub n_paths: usize,
    #[pyo3(get)]
    pub n_used: usize,
    /// Field value at the start point.
    #[pyo3(get)]
    pub v0: f64,
    /// Mean and standard error of the pathwise residual
    /// `payoff - v0 - gap integral - martingale`.
    #[pyo3(get)]
    pub r_mean: f64,
    #[pyo3(get)]
    pub r_se: f64,
    #[pyo3(get)]
    pub gap_integral_mean: f64,
    #[pyo3(get)]
    pub gap_integral_se: f64,
    /// Correlation between the martingale term and the payoff.
    #[pyo3(get)]
    pub martingale_corr: f64,
    #[pyo3(get)]
    pub payoff_mean: f64,
    #[pyo3(get)]
    pub payoff_se: f64,
    /// `|mean(R)| <= 3 SE(R)`.
    #[pyo3(get)]
    pub pass_mean_zero: bool,
}

/// Simulates one policy pair and decomposes every path's payoff into the
/// field value, the accumulated Hamiltonian-gap term and a martingale part,
/// returning statistics of the leftover residual.
#[pyfunction]
#[pyo3(signature = (scenario, field, policy1 = "star", policy2 = "star",
                    t0 = None, x0 = None, paths = None, steps = None, seed = None))]
#[allow(clippy::too_many_arguments)]
fn decompose(
    scenario: &Scenario,
    field: &Field,
    policy1: &str,
    policy2: &str,
    t0: Option<f64>,
    x0: Option<Vec<f64>>,
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Decomposition> {
    let sc = &scenario.inner;
    let mc = resolve_mc(sc, t0, x0, paths, steps, seed)?;
    let p1 = policy_from_text(&sc.spec, sde::PlayerRole::One, policy1, Some(field))?;
    let p2 = policy_from_text(&sc.spec, sde::PlayerRole::Two, policy2, Some(field))?;
    let bundle = sde::simulate(&sc.spec, &p1, &p2, mc.t0, &mc.x0, mc.paths, mc.steps, mc.seed)
        .map_err(err)?;
    let rep = ver::fundamental_decomposition(&sc.spec, &field.inner, &bundle).map_err(err)?;
    Ok(Decomposition {
        n_paths: rep.n_paths,
        n_used: rep.n_used,
        v0: rep.v0,
        r_mean: rep.r_mean,
        r_se: rep.r_se,
        gap_integral_mean: rep.gap_integral_mean,
        gap_integral_se: rep.gap_integral_se,
        martingale_corr: rep.martingale_corr,
        payoff_mean: rep.payoff.mean,
        payoff_se: rep.payoff.se,
        pass_mean_zero: rep.pass,
    })
}

/// One unilateral-deviation comparison, paired through common random numbers.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Deviation {
    #[pyo3(get)]
    pub label: String,
    /// Mean of the per-path difference `J(deviation) - J(star)`.
    #[pyo3(get)]
    pub diff_mean: f64,
    #[pyo3(get)]
    pub diff_se: f64,
    #[pyo3(get)]
    pub n_pairs: usize,
    #[pyo3(get)]
    pub pass: bool,
}

/// Saddle-point verification results.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct SaddleSummary {
    #[pyo3(get)]
    pub star: Payoff,
    #[pyo3(get)]
    pub v0: f64,
    #[pyo3(get)]
    pub value_gap: f64,
    #[pyo3(get)]
    pub scheme_allowance: f64,
    #[pyo3(get)]
    pub value_pass: bool,
    #[pyo3(get)]
    pub deviations1: Vec<Deviation>,
    #[pyo3(get)]
    pub deviations2: Vec<Deviation>,
    #[pyo3(get)]
    pub all_pass: bool,
}

fn deviation_rows(rows: &[ver::DeviationRow]) -> Vec<Deviation> {
    rows.iter()
        .map(|r| Deviation {
            label: r.label.clone(),
            diff_mean: r.diff_mean,
            diff_se: r.diff_se,
            n_pairs: r.n_pairs,
            pass: r.pass,
        })
        .collect()
}

fn scheme_allowance(field: &Field, allowance: Option<f64>) -> PyResult<f64> {
    match allowance {
        Some(v) => Ok(v),
        None => Ok(5.0 * bi::residual(&field.spec, &field.inner, 4096).map_err(err)?.max_abs),
    }
}

/// Checks the synthesized policy pair for the saddle property: its payoff
/// matches the field value, and unilateral constant deviations to either
/// control-box corner do not help the deviating player. The allowance added
/// to the value comparison defaults to five times the field's sampled
/// residual norm.
#[pyfunction]
#[pyo3(signature = (scenario, field, allowance = None,
                    t0 = None, x0 = None, paths = None, steps = None, seed = None))]
#[allow(clippy::too_many_arguments)]
fn verify_saddle(
    scenario: &Scenario,
    field: &Field,
    allowance: Option<f64>,
    t0: Option<f64>,
    x0: Option<Vec<f64>>,
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<SaddleSummary> {
    let sc = &scenario.inner;
    if sc.spec.kind != gm::ModelKind::Game {
        return Err(err("saddle verification needs a two-player model"));
    }
    let mc = resolve_mc(sc, t0, x0, paths, steps, seed)?;
    let allowance = scheme_allowance(field, allowance)?;
    let inputs = ver::SaddleInputs {
        spec: &sc.spec,
        field: field.inner.clone(),
        t0: mc.t0,
        x0: mc.x0,
        n_paths: mc.paths,
        n_steps: mc.steps,
        seed: mc.seed,
        deviations1: vec![
            sde::FeedbackPolicy::constant(sde::PlayerRole::One, sc.spec.u1.lo().to_vec()),
            sde::FeedbackPolicy::constant(sde::PlayerRole::One, sc.spec.u1.hi().to_vec()),
        ],
        deviations2: vec![
            sde::FeedbackPolicy::constant(sde::PlayerRole::Two, sc.spec.u2.lo().to_vec()),
            sde::FeedbackPolicy::constant(sde::PlayerRole::Two, sc.spec.u2.hi().to_vec()),
        ],
        scheme_allowance: allowance,
    };
    let rep = ver::verify_saddle(&inputs).map_err(err)?;
    Ok(SaddleSummary {
        star: Payoff::from_core(&rep.star),
        v0: rep.v0,
        value_gap: rep.value_gap,
        scheme_allowance: rep.scheme_allowance,
        value_pass: rep.value_pass,
        deviations1: deviation_rows(&rep.rows1),
        deviations2: deviation_rows(&rep.rows2),
        all_pass: rep.all_pass,
    })
}

/// Finite-family game-value estimate.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct ValueSummary {
    #[pyo3(get)]
    pub labels1: Vec<String>,
    #[pyo3(get)]
    pub labels2: Vec<String>,
    /// Payoff means, row-major over `(labels1, labels2)`.
    #[pyo3(get)]
    pub means: Vec<f64>,
    #[pyo3(get)]
    pub ses: Vec<f64>,
    /// `max_i min_j` of the mean matrix.
    #[pyo3(get)]
    pub lower_value: f64,
    /// `min_j max_i` of the mean matrix.
    #[pyo3(get)]
    pub upper_value: f64,
    #[pyo3(get)]
    pub max_se: f64,
    #[pyo3(get)]
    pub collapse_pass: bool,
    #[pyo3(get)]
    pub v0: Option<f64>,
    #[pyo3(get)]
    pub value_pass: Option<bool>,
    #[pyo3(get)]
    pub all_pass: bool,
}

fn family_from_texts(
    spec: &gm::GameSpec,
    role: sde::PlayerRole,
    texts: Option<Vec<String>>,
    field: &Field,
) -> PyResult<Vec<sde::FeedbackPolicy>> {
    match texts {
        Some(texts) => texts
            .iter()
            .map(|t| policy_from_text(spec, role, t, Some(field)))
            .collect(),
        None => {
            let set = match role {
                sde::PlayerRole::One => &spec.u1,
                sde::PlayerRole::Two => &spec.u2,
            };
            let mid: Vec<f64> = set
                .lo()
                .iter()
                .zip(set.hi())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            Ok(vec![
                sde::FeedbackPolicy::synthesized(role, field.inner.clone()),
                sde::FeedbackPolicy::constant(role, set.lo().to_vec()),
                sde::FeedbackPolicy::constant(role, mid),
                sde::FeedbackPolicy::constant(role, set.hi().to_vec()),
            ])
        }
    }
}

/// Estimates the value of the game restricted to finite policy families
/// (defaulting to the synthesized policy plus three constants per player)
/// and checks that the matrix's upper and lower values collapse onto the
/// field value at the start point.
#[pyfunction]
#[pyo3(signature = (scenario, field, family1 = None, family2 = None, allowance = None,
                    t0 = None, x0 = None, paths = None, steps = None, seed = None))]
#[allow(clippy::too_many_arguments)]
fn game_value(
    scenario: &Scenario,
    field: &Field,
    family1: Option<Vec<String>>,
    family2: Option<Vec<String>>,
    allowance: Option<f64>,
    t0: Option<f64>,
    x0: Option<Vec<f64>>,
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<ValueSummary> {
    let sc = &scenario.inner;
    if sc.spec.kind != gm::ModelKind::Game {
        return Err(err("game-value estimation needs a two-player model"));
    }
    let mc = resolve_mc(sc, t0, x0, paths, steps, seed)?;
    let allowance = scheme_allowance(field, allowance)?;
    let fam1 = family_from_texts(&sc.spec, sde::PlayerRole::One, family1, field)?;
    let fam2 = family_from_texts(&sc.spec, sde::PlayerRole::Two, family2, field)?;
    let v0 = field.inner.interp_value(mc.t0, &mc.x0).0;
    let rep = ver::estimate_game_values(
        &sc.spec,
        &fam1,
        &fam2,
        mc.t0,
        &mc.x0,
        mc.paths,
        mc.steps,
        mc.seed,
        Some(v0),
        allowance,
    )
    .map_err(err)?;
    let all_pass = rep.collapse_pass && rep.value_pass.unwrap_or(true);
    Ok(ValueSummary {
        labels1: rep.labels1,
        labels2: rep.labels2,
        means: rep.means,
        ses: rep.ses,
        lower_value: rep.lower_value,
        upper_value: rep.upper_value,
        max_se: rep.max_se,
        collapse_pass: rep.collapse_pass,
        v0: rep.v0,
        value_pass: rep.value_pass,
        all_pass,
    })
}

/// One candidate policy in a control-verification run.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct CandidateRow {
    #[pyo3(get)]
    pub label: String,
    #[pyo3(get)]
    pub mean: f64,
    #[pyo3(get)]
    pub se: f64,
    /// Excess cost over the field value at the start point.
    #[pyo3(get)]
    pub margin: f64,
    #[pyo3(get)]
    pub pass: bool,
}

/// Control-verification results.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct ControlSummary {
    #[pyo3(get)]
    pub v0: f64,
    #[pyo3(get)]
    pub star: Payoff,
    #[pyo3(get)]
    pub star_gap: f64,
    #[pyo3(get)]
    pub star_tol: f64,
    #[pyo3(get)]
    pub star_pass: bool,
    #[pyo3(get)]
    pub candidates: Vec<CandidateRow>,
    #[pyo3(get)]
    pub all_pass: bool,
}

/// Checks a single-controller model: the synthesized policy's payoff matches
/// the field value within `star_tol` (default: five times the sampled
/// residual norm) plus Monte-Carlo error, and every candidate policy costs
/// strictly more. Candidates default to three random constants drawn from
/// the control box with the scenario seed.
#[pyfunction]
#[pyo3(signature = (scenario, field, candidates = None, star_tol = None,
                    t0 = None, x0 = None, paths = None, steps = None, seed = None))]
#[allow(clippy::too_many_arguments)]
fn verify_control(
    scenario: &Scenario,
    field: &Field,
    candidates: Option<Vec<String>>,
    star_tol: Option<f64>,
    t0: Option<f64>,
    x0: Option<Vec<f64>>,
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<ControlSummary> {
    use rand::Rng as _;
    use rand::SeedableRng as _;

    let sc = &scenario.inner;
    if sc.spec.kind != gm::ModelKind::Control {
        return Err(err("control verification needs a single-controller model"));
    }
    let mc = resolve_mc(sc, t0, x0, paths, steps, seed)?;
    let star_tol = match star_tol {
        Some(v) => v,
        None => scheme_allowance(field, None)?,
    };
    let policies: Vec<sde::FeedbackPolicy> = match candidates {
        Some(texts) => texts
            .iter()
            .map(|t| policy_from_text(&sc.spec, sde::PlayerRole::Two, t, Some(field)))
            .collect::<PyResult<_>>()?,
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mc.seed);
            (0..3)
                .map(|_| {
                    let u: Vec<f64> = sc
                        .spec
                        .u2
                        .lo()
                        .iter()
                        .zip(sc.spec.u2.hi())
                        .map(|(a, b)| rng.gen_range(*a..*b))
                        .collect();
                    sde::FeedbackPolicy::constant(sde::PlayerRole::Two, u)
                })
                .collect()
        }
    };
    let rep = ver::verify_control(
        &sc.spec,
        field.inner.clone(),
        &policies,
        mc.t0,
        &mc.x0,
        mc.paths,
        mc.steps,
        mc.seed,
        star_tol,
    )
    .map_err(err)?;
    Ok(ControlSummary {
        v0: rep.v0,
        star: Payoff::from_core(&rep.star),
        star_gap: rep.star_gap,
        star_tol: rep.star_tol,
        star_pass: rep.star_pass,
        candidates: rep
            .rows
            .iter()
            .map(|r| CandidateRow {
                label: r.label.clone(),
                mean: r.payoff.mean,
                se: r.payoff.se,
                margin: r.margin,
                pass: r.pass,
            })
            .collect(),
        all_pass: rep.all_pass,
    })
}

// ---------------------------------------------------------------------------
// Module
// ---------------------------------------------------------------------------

/// Numerical laboratory for zero-sum stochastic differential games under
/// feedback controls: PDE solving, Hamiltonian analysis, closed-loop
/// simulation and Monte-Carlo verification.
#[pymodule]
fn isaacslab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Expr>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<Diagnostics>()?;
    m.add_class::<Field>()?;
    m.add_class::<Residual>()?;
    m.add_class::<HamiltonianSummary>()?;
    m.add_class::<GapSummary>()?;
    m.add_class::<Payoff>()?;
    m.add_class::<Decomposition>()?;
    m.add_class::<Deviation>()?;
    m.add_class::<SaddleSummary>()?;
    m.add_class::<ValueSummary>()?;
    m.add_class::<CandidateRow>()?;
    m.add_class::<ControlSummary>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian, m)?)?;
    m.add_function(wrap_pyfunction!(isaacs_gap, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_payoff, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(verify_saddle, m)?)?;
    m.add_function(wrap_pyfunction!(game_value, m)?)?;
    m.add_function(wrap_pyfunction!(verify_control, m)?)?;
    Ok(())
}
