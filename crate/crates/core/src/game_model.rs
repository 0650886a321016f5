//! Game specifications and hypothesis diagnostics.
//!
//! A [`GameSpec`] holds the data of a two-player zero-sum stochastic
//! differential game on a finite horizon:
//!
//! ```text
//! dy(s) = [ b(s, y) + f1(s, y, u1, u2) ] ds + sigma(s, y) dW(s)
//! J     = E[ integral of l(s, y, u1, u2) ds  +  g(y(T)) ]
//! ```
//!
//! Player 1 maximizes `J`, player 2 minimizes. Controls take values in
//! compact boxes carrying an explicit finite discretization ([`ControlSet`]).
//! A single-controller problem (`ModelKind::Control`) is stored in the same
//! structure: the first player's control set degenerates to one point of
//! dimension zero, the minimizing controller owns the remaining set, and
//! coefficient text refers to the control as `u_1 .. u_k`.
//!
//! The module also estimates, on sampled clouds, the standing hypotheses the
//! verification statements lean on: a linear-growth constant for the
//! coefficients, the smallest eigenvalue of `sigma sigma^T` (non-degeneracy)
//! and the sup of `|sigma^{-1} f1|` with `sigma^{-1}` the right
//! pseudo-inverse (the boundedness used for Girsanov/Novikov arguments).
//! These are diagnostics over finite samples — evidence, not proofs.

use crate::expr::{self, Ast, Bindings, EvalError, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("in `{field}`: {source}")]
    Parse {
        field: String,
        source: expr::ParseError,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite value in `{field}` at s={s}, x={x:?}")]
    NonFinite { field: String, s: f64, x: Vec<f64> },
    #[error("io error reading `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Control sets
// ---------------------------------------------------------------------------

/// A compact control box `[lo_j, hi_j]^k` together with a finite list of
/// admissible points. Optimization over the set always means exhaustive
/// enumeration of the list, and "first" means first in the stored order,
/// which is lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Flattened points, `n * dim` entries, sorted lexicographically.
    points: Vec<f64>,
    n: usize,
}

impl ControlSet {
    /// Cartesian product of per-axis uniform grids with `counts[j]` points on
    /// `[lo[j], hi[j]]`. A one-point axis uses the midpoint of its interval.
    pub fn from_axis_grids(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self, ModelError> {
        let dim = lo.len();
        if hi.len() != dim || counts.len() != dim {
            return Err(ModelError::Validation(
                "control set lo/hi/points must have equal lengths".into(),
            ));
        }
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(dim);
        for j in 0..dim {
            if !(lo[j].is_finite() && hi[j].is_finite()) || lo[j] > hi[j] {
                return Err(ModelError::Validation(format!(
                    "control axis {j}: invalid bounds [{}, {}]",
                    lo[j], hi[j]
                )));
            }
            let n = counts[j];
            if n == 0 {
                return Err(ModelError::Validation(format!("control axis {j}: zero points")));
            }
            let axis = if n == 1 {
                vec![0.5 * (lo[j] + hi[j])]
            } else {
                // (lo*(n-1-i) + hi*i)/(n-1): endpoint-exact, and rational
                // interior nodes land on their shortest decimal representation.
                (0..n)
                    .map(|i| (lo[j] * ((n - 1 - i) as f64) + hi[j] * (i as f64)) / ((n - 1) as f64))
                    .collect()
            };
            axes.push(axis);
        }
        let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            let mut next = Vec::with_capacity(pts.len() * axis.len());
            for p in &pts {
                for &v in axis {
                    let mut q = p.clone();
                    q.push(v);
                    next.push(q);
                }
            }
            pts = next;
        }
        Self::from_points(lo.to_vec(), hi.to_vec(), pts)
    }

    /// Build from an explicit point list. Points are validated to be finite
    /// and within bounds, then sorted lexicographically and deduplicated.
    pub fn from_points(lo: Vec<f64>, hi: Vec<f64>, mut pts: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let dim = lo.len();
        if hi.len() != dim {
            return Err(ModelError::Validation("control set lo/hi must have equal lengths".into()));
        }
        if pts.is_empty() {
            return Err(ModelError::Validation("control set has no points".into()));
        }
        for p in &pts {
            if p.len() != dim {
                return Err(ModelError::Validation(format!(
                    "control point {p:?} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            for j in 0..dim {
                if !p[j].is_finite() {
                    return Err(ModelError::Validation(format!("control point {p:?} is not finite")));
                }
                if p[j] < lo[j] || p[j] > hi[j] {
                    return Err(ModelError::Validation(format!(
                        "control point {p:?} outside [{:?}, {:?}]",
                        lo, hi
                    )));
                }
            }
        }
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates are totally ordered"));
        pts.dedup();
        let n = pts.len();
        let mut flat = Vec::with_capacity(n * dim);
        for p in pts {
            flat.extend_from_slice(&p);
        }
        Ok(ControlSet { dim, lo, hi, points: flat, n })
    }

    /// The zero-dimensional set whose only element is the empty tuple. Used
    /// as the frozen first-player set of single-controller problems.
    pub fn singleton_empty() -> Self {
        ControlSet {
            dim: 0,
            lo: Vec::new(),
            hi: Vec::new(),
            points: Vec::new(),
            n: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n).map(move |i| self.point(i))
    }

    /// Clamp `u` into the box in place; returns true when any coordinate moved.
    pub fn clamp(&self, u: &mut [f64]) -> bool {
        let mut clamped = false;
        for j in 0..self.dim.min(u.len()) {
            let v = u[j].max(self.lo[j]).min(self.hi[j]);
            if v != u[j] {
                u[j] = v;
                clamped = true;
            }
        }
        clamped
    }
}

// ---------------------------------------------------------------------------
// Game specification
// ---------------------------------------------------------------------------

/// Whether the model is a two-player game or a single-controller problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Game,
    Control,
}

/// Validated model: dimensions, horizon, coefficient expressions (constant-
/// folded for evaluation, with the canonical source text kept for echoing)
/// and the discretized control sets.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub kind: ModelKind,
    pub d: usize,
    pub m: usize,
    /// Horizon `T`; the game runs on `[0, T]`.
    pub horizon: f64,
    pub b: Vec<Ast>,
    pub f1: Vec<Ast>,
    /// Row-major `d x m`.
    pub sigma: Vec<Ast>,
    pub l: Ast,
    pub g: Ast,
    pub u1: ControlSet,
    pub u2: ControlSet,
    /// Pretty-printed (unfolded) coefficient text, for canonical echo.
    pub canonical: CanonicalText,
}

#[derive(Debug, Clone)]
pub struct CanonicalText {
    pub b: Vec<String>,
    pub f1: Vec<String>,
    pub sigma: Vec<String>,
    pub l: String,
    pub g: String,
}

fn parse_field(field: &str, text: &str) -> Result<Ast, ModelError> {
    expr::parse(text).map_err(|source| ModelError::Parse { field: field.into(), source })
}

impl GameSpec {
    /// Parse and validate a model from coefficient text. `sigma_texts` is
    /// row-major `d x m`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: ModelKind,
        d: usize,
        m: usize,
        horizon: f64,
        b_texts: &[String],
        f1_texts: &[String],
        sigma_texts: &[String],
        l_text: &str,
        g_text: &str,
        u1: ControlSet,
        u2: ControlSet,
    ) -> Result<GameSpec, ModelError> {
        if d == 0 {
            return Err(ModelError::Validation("state dimension d must be >= 1".into()));
        }
        if m == 0 {
            return Err(ModelError::Validation("noise dimension m must be >= 1".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::Validation(format!("horizon T must be positive, got {horizon}")));
        }
        if b_texts.len() != d {
            return Err(ModelError::Validation(format!("b has {} entries, expected d={d}", b_texts.len())));
        }
        if f1_texts.len() != d {
            return Err(ModelError::Validation(format!("f1 has {} entries, expected d={d}", f1_texts.len())));
        }
        if sigma_texts.len() != d * m {
            return Err(ModelError::Validation(format!(
                "sigma has {} entries, expected d*m={}",
                sigma_texts.len(),
                d * m
            )));
        }
        if kind == ModelKind::Control && u1.dim() != 0 {
            return Err(ModelError::Validation(
                "single-controller problems freeze player 1's set to the empty-tuple singleton".into(),
            ));
        }

        let parse_all = |field: &str, texts: &[String]| -> Result<(Vec<Ast>, Vec<String>), ModelError> {
            let mut asts = Vec::with_capacity(texts.len());
            let mut canon = Vec::with_capacity(texts.len());
            for (i, t) in texts.iter().enumerate() {
                let ast = parse_field(&format!("{field}[{i}]"), t)?;
                canon.push(ast.to_string());
                asts.push(ast);
            }
            Ok((asts, canon))
        };
        let (b_raw, b_canon) = parse_all("b", b_texts)?;
        let (f1_raw, f1_canon) = parse_all("f1", f1_texts)?;
        let (sigma_raw, sigma_canon) = parse_all("sigma", sigma_texts)?;
        let l_raw = parse_field("l", l_text)?;
        let g_raw = parse_field("g", g_text)?;
        let canonical = CanonicalText {
            b: b_canon,
            f1: f1_canon,
            sigma: sigma_canon,
            l: l_raw.to_string(),
            g: g_raw.to_string(),
        };

        let spec = GameSpec {
            kind,
            d,
            m,
            horizon,
            b: b_raw.into_iter().map(Ast::fold_constants).collect(),
            f1: f1_raw.into_iter().map(Ast::fold_constants).collect(),
            sigma: sigma_raw.into_iter().map(Ast::fold_constants).collect(),
            l: l_raw.fold_constants(),
            g: g_raw.fold_constants(),
            u1,
            u2,
            canonical,
        };
        spec.validate_vocabulary()?;
        Ok(spec)
    }

    /// Each coefficient may only mention variables from its declared
    /// signature: `b`, `sigma` see `(s, x)`; `f1`, `l` additionally see the
    /// controls; `g` sees `x` alone. Gradient slots `p*` never appear in
    /// model coefficients.
    fn validate_vocabulary(&self) -> Result<(), ModelError> {
        let check = |field: &str, ast: &Ast, allow_controls: bool, allow_s: bool| -> Result<(), ModelError> {
            for var in ast.free_vars() {
                let ok = match var {
                    Var::S => allow_s,
                    Var::X(i) => i < self.d,
                    Var::P(_) => false,
                    Var::U1(i) => {
                        allow_controls && self.kind == ModelKind::Game && i < self.u1.dim()
                    }
                    Var::U2(i) => {
                        allow_controls && self.kind == ModelKind::Game && i < self.u2.dim()
                    }
                    Var::U(i) => {
                        allow_controls && self.kind == ModelKind::Control && i < self.u2.dim()
                    }
                };
                if !ok {
                    return Err(ModelError::Validation(format!(
                        "variable `{var}` is not allowed in `{field}` \
                         (kind {:?}, d={}, controls {}x{})",
                        self.kind,
                        self.d,
                        self.u1.dim(),
                        self.u2.dim()
                    )));
                }
            }
            Ok(())
        };
        for (i, ast) in self.b.iter().enumerate() {
            check(&format!("b[{i}]"), ast, false, true)?;
        }
        for (i, ast) in self.sigma.iter().enumerate() {
            check(&format!("sigma[{i}]"), ast, false, true)?;
        }
        for (i, ast) in self.f1.iter().enumerate() {
            check(&format!("f1[{i}]"), ast, true, true)?;
        }
        check("l", &self.l, true, true)?;
        check("g", &self.g, false, false)?;
        Ok(())
    }

    /// Bindings for coefficient evaluation. In single-controller models the
    /// control point is exposed through the `u_*` slots.
    pub fn bindings<'a>(&self, s: f64, x: &'a [f64], u1: &'a [f64], u2: &'a [f64]) -> Bindings<'a> {
        match self.kind {
            ModelKind::Game => Bindings {
                s: Some(s),
                x,
                u1,
                u2,
                ..Bindings::default()
            },
            ModelKind::Control => Bindings {
                s: Some(s),
                x,
                u: u2,
                ..Bindings::default()
            },
        }
    }

    /// Evaluate drift `b + f1` and diffusion `sigma` into caller buffers
    /// (`drift`: `d`, `sigma_out`: `d*m`, row-major). Entries must be finite.
    pub fn eval_dynamics_into(
        &self,
        s: f64,
        x: &[f64],
        u1: &[f64],
        u2: &[f64],
        drift: &mut [f64],
        sigma_out: &mut [f64],
    ) -> Result<(), ModelError> {
        let ctx = self.bindings(s, x, u1, u2);
        for i in 0..self.d {
            let bi = expr::eval_ctx(&self.b[i], &ctx)?;
            let fi = expr::eval_ctx(&self.f1[i], &ctx)?;
            let v = bi + fi;
            if !v.is_finite() {
                return Err(ModelError::NonFinite { field: format!("b[{i}]+f1[{i}]"), s, x: x.to_vec() });
            }
            drift[i] = v;
        }
        for k in 0..self.d * self.m {
            let v = expr::eval_ctx(&self.sigma[k], &ctx)?;
            if !v.is_finite() {
                return Err(ModelError::NonFinite { field: format!("sigma[{k}]"), s, x: x.to_vec() });
            }
            sigma_out[k] = v;
        }
        Ok(())
    }

    /// Like [`GameSpec::eval_dynamics_into`] but without the finite guard:
    /// overflow to infinity passes through, letting a path simulator mark
    /// the offending trajectory instead of aborting the whole batch.
    pub fn eval_dynamics_into_unchecked(
        &self,
        s: f64,
        x: &[f64],
        u1: &[f64],
        u2: &[f64],
        drift: &mut [f64],
        sigma_out: &mut [f64],
    ) -> Result<(), ModelError> {
        let ctx = self.bindings(s, x, u1, u2);
        for i in 0..self.d {
            let bi = expr::eval_ctx(&self.b[i], &ctx)?;
            let fi = expr::eval_ctx(&self.f1[i], &ctx)?;
            drift[i] = bi + fi;
        }
        for k in 0..self.d * self.m {
            sigma_out[k] = expr::eval_ctx(&self.sigma[k], &ctx)?;
        }
        Ok(())
    }

    /// Allocating convenience wrapper around [`GameSpec::eval_dynamics_into`].
    pub fn eval_dynamics(
        &self,
        s: f64,
        x: &[f64],
        u1: &[f64],
        u2: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut drift = vec![0.0; self.d];
        let mut sigma = vec![0.0; self.d * self.m];
        self.eval_dynamics_into(s, x, u1, u2, &mut drift, &mut sigma)?;
        Ok((drift, sigma))
    }

    /// Diffusion matrix alone (no controls involved).
    pub fn eval_sigma_into(&self, s: f64, x: &[f64], sigma_out: &mut [f64]) -> Result<(), ModelError> {
        let ctx = self.bindings(s, x, &[], &[]);
        for k in 0..self.d * self.m {
            let v = expr::eval_ctx(&self.sigma[k], &ctx)?;
            if !v.is_finite() {
                return Err(ModelError::NonFinite { field: format!("sigma[{k}]"), s, x: x.to_vec() });
            }
            sigma_out[k] = v;
        }
        Ok(())
    }

    /// Uncontrolled drift part `b` alone.
    pub fn eval_b_into(&self, s: f64, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let ctx = self.bindings(s, x, &[], &[]);
        for i in 0..self.d {
            let v = expr::eval_ctx(&self.b[i], &ctx)?;
            if !v.is_finite() {
                return Err(ModelError::NonFinite { field: format!("b[{i}]"), s, x: x.to_vec() });
            }
            out[i] = v;
        }
        Ok(())
    }

    /// Controlled drift part `f1` alone.
    pub fn eval_f1_into(
        &self,
        s: f64,
        x: &[f64],
        u1: &[f64],
        u2: &[f64],
        out: &mut [f64],
    ) -> Result<(), ModelError> {
        let ctx = self.bindings(s, x, u1, u2);
        for i in 0..self.d {
            out[i] = expr::eval_ctx(&self.f1[i], &ctx)?;
        }
        Ok(())
    }

    /// Running cost `l(s, x, u1, u2)`.
    pub fn eval_l(&self, s: f64, x: &[f64], u1: &[f64], u2: &[f64]) -> Result<f64, ModelError> {
        Ok(expr::eval_ctx(&self.l, &self.bindings(s, x, u1, u2))?)
    }

    /// Terminal cost `g(x)`.
    pub fn eval_g(&self, x: &[f64]) -> Result<f64, ModelError> {
        let ctx = Bindings { x, ..Bindings::default() };
        Ok(expr::eval_ctx(&self.g, &ctx)?)
    }

    /// Which inputs the controlled coefficients (`f1`, `l`) actually read.
    /// Drives table caching in the Hamiltonian enumeration: coefficients
    /// independent of `x` admit one table per time level, coefficients
    /// independent of both `s` and `x` admit a single table per run.
    pub fn control_coefficient_deps(&self) -> CoefficientDeps {
        let mut vars: BTreeSet<Var> = self.l.free_vars();
        for ast in &self.f1 {
            vars.extend(ast.free_vars());
        }
        CoefficientDeps {
            on_x: vars.iter().any(|v| matches!(v, Var::X(_))),
            on_s: vars.contains(&Var::S),
        }
    }
}

/// See [`GameSpec::control_coefficient_deps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoefficientDeps {
    pub on_x: bool,
    pub on_s: bool,
}

// ---------------------------------------------------------------------------
// Sample clouds and hypothesis diagnostics
// ---------------------------------------------------------------------------

/// One diagnostic sample: a time, a state and one control point per player.
#[derive(Debug, Clone)]
pub struct CloudSample {
    pub s: f64,
    pub x: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

/// A finite cloud of samples used by the hypothesis diagnostics.
#[derive(Debug, Clone)]
pub struct SampleCloud {
    pub radius: f64,
    pub samples: Vec<CloudSample>,
}

impl SampleCloud {
    /// Deterministic cloud: `n` samples with `s` uniform on `[0, T]`, `x`
    /// uniform on `[-radius, radius]^d` and controls drawn uniformly from
    /// the discretized sets. The same `seed` reproduces the same cloud.
    pub fn generate(spec: &GameSpec, radius: f64, n: usize, seed: u64) -> SampleCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let s = rng.gen::<f64>() * spec.horizon;
            let x: Vec<f64> = (0..spec.d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * radius).collect();
            let u1 = spec.u1.point(rng.gen_range(0..spec.u1.n_points())).to_vec();
            let u2 = spec.u2.point(rng.gen_range(0..spec.u2.n_points())).to_vec();
            samples.push(CloudSample { s, x, u1, u2 });
        }
        SampleCloud { radius, samples }
    }

    /// Exhaustive control coverage at a fixed list of `(s, x)` anchors:
    /// every admissible control pair appears at every anchor. Used where the
    /// diagnostics must see control extremes (e.g. sup |sigma^{-1} f1|).
    pub fn exhaustive_controls(spec: &GameSpec, anchors: &[(f64, Vec<f64>)]) -> SampleCloud {
        let mut samples = Vec::new();
        let mut radius = 0.0f64;
        for (s, x) in anchors {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            radius = radius.max(norm);
            for u1 in spec.u1.iter_points() {
                for u2 in spec.u2.iter_points() {
                    samples.push(CloudSample {
                        s: *s,
                        x: x.clone(),
                        u1: u1.to_vec(),
                        u2: u2.to_vec(),
                    });
                }
            }
        }
        SampleCloud { radius, samples }
    }
}

/// Estimated linear-growth constant: largest sampled value of
/// `(|b| + |f1| + ||sigma||_F) / (1 + |x|)`.
#[derive(Debug, Clone)]
pub struct GrowthReport {
    pub k_hat: f64,
    /// K-hat re-evaluated on the same cloud with states scaled by 2.
    pub k_hat_doubled_radius: f64,
    /// Set when doubling the radius grows the constant by more than 1.5x,
    /// i.e. the coefficients look super-linear on the sampled range.
    pub unbounded_suspicion: bool,
    pub samples: usize,
}

/// Non-degeneracy and Girsanov-kernel diagnostics over a cloud.
#[derive(Debug, Clone)]
pub struct NovikovReport {
    /// Smallest sampled eigenvalue of `sigma sigma^T`.
    pub c_hat: f64,
    /// Largest sampled condition number of `sigma sigma^T`.
    pub max_condition: f64,
    /// Sup of `|sigma^T (sigma sigma^T)^{-1} f1|` over the cloud. `None`
    /// when a sample with `f1 != 0` had a degenerate diffusion there.
    pub sigma_inv_f1_bound: Option<f64>,
    /// Set when any sample has `sigma sigma^T` singular or with condition
    /// estimate above 1e12.
    pub degenerate: bool,
    pub samples: usize,
}

/// Combined hypothesis diagnostics for reporting.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub growth: GrowthReport,
    pub novikov: NovikovReport,
}

const CONDITION_LIMIT: f64 = 1e12;

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest sampled `(|b| + |f1| + ||sigma||_F)/(1 + |x|)`, with a doubled-
/// radius re-evaluation to flag super-linear growth. The estimate is
/// monotone non-decreasing in the cloud (it is a running maximum).
pub fn check_linear_growth(spec: &GameSpec, cloud: &SampleCloud) -> Result<GrowthReport, ModelError> {
    let mut drift_b = vec![0.0; spec.d];
    let mut f1 = vec![0.0; spec.d];
    let mut sig = vec![0.0; spec.d * spec.m];
    let mut ratio_at = |s: f64, x: &[f64], u1: &[f64], u2: &[f64]| -> Result<f64, ModelError> {
        spec.eval_b_into(s, x, &mut drift_b)?;
        spec.eval_f1_into(s, x, u1, u2, &mut f1)?;
        spec.eval_sigma_into(s, x, &mut sig)?;
        Ok((norm2(&drift_b) + norm2(&f1) + frobenius(&sig)) / (1.0 + norm2(x)))
    };
    let mut k_hat = 0.0f64;
    let mut k_hat_2 = 0.0f64;
    for sm in &cloud.samples {
        k_hat = k_hat.max(ratio_at(sm.s, &sm.x, &sm.u1, &sm.u2)?);
        let x2: Vec<f64> = sm.x.iter().map(|v| 2.0 * v).collect();
        k_hat_2 = k_hat_2.max(ratio_at(sm.s, &x2, &sm.u1, &sm.u2)?);
    }
    Ok(GrowthReport {
        k_hat,
        k_hat_doubled_radius: k_hat_2,
        unbounded_suspicion: k_hat_2 > 1.5 * k_hat,
        samples: cloud.samples.len(),
    })
}

/// Smallest eigenvalue of `sigma sigma^T`, its worst condition number, and
/// the sampled sup of `|sigma^{-1} f1|` with the right pseudo-inverse
/// `sigma^{-1} = sigma^T (sigma sigma^T)^{-1}`. A sample where `f1 = 0`
/// contributes zero to the bound regardless of the diffusion there.
pub fn check_novikov_boundedness(spec: &GameSpec, cloud: &SampleCloud) -> Result<NovikovReport, ModelError> {
    let d = spec.d;
    let m = spec.m;
    let mut sig = vec![0.0; d * m];
    let mut f1 = vec![0.0; d];
    let mut c_hat = f64::INFINITY;
    let mut max_condition = 0.0f64;
    let mut degenerate = false;
    let mut bound = 0.0f64;
    let mut bound_defined = true;

    for sm in &cloud.samples {
        spec.eval_sigma_into(sm.s, &sm.x, &mut sig)?;
        spec.eval_f1_into(sm.s, &sm.x, &sm.u1, &sm.u2, &mut f1)?;

        let sigma = DMatrix::from_row_slice(d, m, &sig);
        let gram = &sigma * sigma.transpose();
        let eigs = gram.clone().symmetric_eigenvalues();
        let lam_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let lam_max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        c_hat = c_hat.min(lam_min);

        let cond = if lam_min > 0.0 { lam_max / lam_min } else { f64::INFINITY };
        max_condition = max_condition.max(cond);
        let sample_degenerate = !(lam_min > 0.0) || cond > CONDITION_LIMIT;
        degenerate |= sample_degenerate;

        let f1_norm = norm2(&f1);
        if f1_norm == 0.0 {
            continue; // kernel is exactly zero here, irrespective of sigma
        }
        if sample_degenerate {
            bound_defined = false;
            continue;
        }
        let rhs = nalgebra::DVector::from_column_slice(&f1);
        let solved = gram
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| ModelError::Validation("sigma sigma^T reported non-singular but failed to solve".into()))?;
        let kernel = sigma.transpose() * solved;
        bound = bound.max(kernel.norm());
    }

    Ok(NovikovReport {
        c_hat: if c_hat.is_finite() { c_hat } else { 0.0 },
        max_condition,
        sigma_inv_f1_bound: if bound_defined { Some(bound) } else { None },
        degenerate,
        samples: cloud.samples.len(),
    })
}

/// Run both hypothesis diagnostics on the same cloud.
pub fn diagnostics(spec: &GameSpec, cloud: &SampleCloud) -> Result<DiagnosticsReport, ModelError> {
    Ok(DiagnosticsReport {
        growth: check_linear_growth(spec, cloud)?,
        novikov: check_novikov_boundedness(spec, cloud)?,
    })
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

/// Per-run grid settings from a scenario file (`[grid]`).
#[derive(Debug, Clone)]
pub struct GridConfig {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub nx: Vec<usize>,
    pub nt: usize,
    /// `"upper"` or `"lower"`; which envelope `solve` runs by default.
    pub side: Option<String>,
}

/// Per-run Monte-Carlo settings from a scenario file (`[mc]`).
#[derive(Debug, Clone)]
pub struct McConfig {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    /// Optional policy selectors for `simulate`/`decompose` runs:
    /// `"star"` (default), `"const <v1> <v2> ..."`, or an expression list
    /// `"expr <e1>; <e2>; ..."` in `(s, x)`.
    pub policy1: Option<String>,
    pub policy2: Option<String>,
}

/// `[output]` section.
#[derive(Debug, Clone, Default)]
pub struct OutputConfig {
    pub dir: Option<String>,
    /// When set, `simulate` also writes the full per-step trajectory CSV.
    pub dump_paths: bool,
}

/// A parsed scenario file: the model plus run defaults.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: GameSpec,
    pub grid: Option<GridConfig>,
    pub mc: Option<McConfig>,
    pub output: OutputConfig,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// `sigma` accepts a scalar (1x1), a column (d x 1) or a full row-major
/// matrix. The named builtin `"identity"` expands to the d x m identity
/// pattern; `"zero"` works for any coefficient field.
#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixField {
    Scalar(String),
    Column(Vec<String>),
    Matrix(Vec<Vec<String>>),
}

#[derive(Deserialize)]
struct ModelSection {
    d: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(default)]
    kind: Option<String>,
}

#[derive(Deserialize)]
struct DynamicsSection {
    b: OneOrMany<String>,
    f1: OneOrMany<String>,
    sigma: MatrixField,
}

#[derive(Deserialize)]
struct CostSection {
    l: String,
    g: String,
}

#[derive(Deserialize)]
struct ControlSection {
    lo: OneOrMany<f64>,
    hi: OneOrMany<f64>,
    #[serde(default)]
    points: Option<OneOrMany<usize>>,
    #[serde(default)]
    list: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize, Default)]
struct ControlsSection {
    u1: Option<ControlSection>,
    u2: Option<ControlSection>,
    u: Option<ControlSection>,
}

#[derive(Deserialize)]
struct GridSection {
    x_lo: OneOrMany<f64>,
    x_hi: OneOrMany<f64>,
    nx: OneOrMany<usize>,
    nt: usize,
    #[serde(default)]
    side: Option<String>,
}

#[derive(Deserialize)]
struct McSection {
    #[serde(default)]
    t0: f64,
    x0: OneOrMany<f64>,
    paths: usize,
    steps: usize,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    policy1: Option<String>,
    #[serde(default)]
    policy2: Option<String>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Deserialize, Default)]
struct OutputSection {
    #[serde(default)]
    dir: Option<String>,
    #[serde(default)]
    dump_paths: Option<bool>,
}

#[derive(Deserialize)]
struct ScenarioFile {
    model: ModelSection,
    dynamics: DynamicsSection,
    cost: CostSection,
    #[serde(default)]
    controls: ControlsSection,
    #[serde(default)]
    grid: Option<GridSection>,
    #[serde(default)]
    mc: Option<McSection>,
    #[serde(default)]
    output: Option<OutputSection>,
}

fn expand_builtin_vector(texts: Vec<String>, d: usize, field: &str) -> Result<Vec<String>, ModelError> {
    // Whole-field builtins: a single "zero" stands for the d-dimensional
    // zero vector.
    if texts.len() == 1 && texts[0] == "zero" {
        return Ok(vec!["0".to_string(); d]);
    }
    if texts.len() == 1 && d > 1 {
        return Err(ModelError::Config(format!(
            "`{field}` is scalar but d={d}; provide {d} entries"
        )));
    }
    Ok(texts)
}

fn expand_sigma(field: MatrixField, d: usize, m: usize) -> Result<Vec<String>, ModelError> {
    let rows: Vec<Vec<String>> = match field {
        MatrixField::Scalar(s) => {
            if s == "zero" {
                return Ok(vec!["0".to_string(); d * m]);
            }
            if s == "identity" {
                let mut out = vec!["0".to_string(); d * m];
                for i in 0..d.min(m) {
                    out[i * m + i] = "1".to_string();
                }
                return Ok(out);
            }
            if d == 1 && m == 1 {
                return Ok(vec![s]);
            }
            return Err(ModelError::Config(format!(
                "`sigma` is scalar but d x m = {d} x {m}; provide a matrix"
            )));
        }
        MatrixField::Column(col) => {
            if m != 1 {
                return Err(ModelError::Config(format!(
                    "`sigma` given as a column but m={m}; provide a {d} x {m} matrix"
                )));
            }
            col.into_iter().map(|e| vec![e]).collect()
        }
        MatrixField::Matrix(rows) => rows,
    };
    if rows.len() != d || rows.iter().any(|r| r.len() != m) {
        return Err(ModelError::Config(format!("`sigma` must be a {d} x {m} matrix")));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn build_control_set(section: ControlSection, name: &str) -> Result<ControlSet, ModelError> {
    let lo = section.lo.into_vec();
    let hi = section.hi.into_vec();
    if let Some(list) = section.list {
        return ControlSet::from_points(lo, hi, list);
    }
    let points = section
        .points
        .ok_or_else(|| ModelError::Config(format!("[controls.{name}] needs `points` or `list`")))?
        .into_vec();
    let counts = if points.len() == 1 && lo.len() > 1 {
        vec![points[0]; lo.len()]
    } else {
        points
    };
    ControlSet::from_axis_grids(&lo, &hi, &counts)
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ModelError> {
        let file: ScenarioFile = toml::from_str(text)?;
        let d = file.model.d;
        let m = file.model.m;
        let kind = match file.model.kind.as_deref() {
            None | Some("game") => ModelKind::Game,
            Some("control") => ModelKind::Control,
            Some(other) => {
                return Err(ModelError::Config(format!(
                    "unknown model kind `{other}` (expected `game` or `control`)"
                )))
            }
        };

        let (u1, u2) = match kind {
            ModelKind::Game => {
                let c1 = file.controls.u1.ok_or_else(|| ModelError::Config("missing [controls.u1]".into()))?;
                let c2 = file.controls.u2.ok_or_else(|| ModelError::Config("missing [controls.u2]".into()))?;
                if file.controls.u.is_some() {
                    return Err(ModelError::Config("[controls.u] is for kind = \"control\" models".into()));
                }
                (build_control_set(c1, "u1")?, build_control_set(c2, "u2")?)
            }
            ModelKind::Control => {
                if file.controls.u1.is_some() || file.controls.u2.is_some() {
                    return Err(ModelError::Config(
                        "kind = \"control\" models take a single [controls.u] section".into(),
                    ));
                }
                let c = file.controls.u.ok_or_else(|| ModelError::Config("missing [controls.u]".into()))?;
                (ControlSet::singleton_empty(), build_control_set(c, "u")?)
            }
        };

        let b = expand_builtin_vector(file.dynamics.b.into_vec(), d, "b")?;
        let f1 = expand_builtin_vector(file.dynamics.f1.into_vec(), d, "f1")?;
        let sigma = expand_sigma(file.dynamics.sigma, d, m)?;

        let spec = GameSpec::from_parts(
            kind,
            d,
            m,
            file.model.horizon,
            &b,
            &f1,
            &sigma,
            &file.cost.l,
            &file.cost.g,
            u1,
            u2,
        )?;

        let grid = match file.grid {
            None => None,
            Some(gs) => {
                let cfg = GridConfig {
                    x_lo: gs.x_lo.into_vec(),
                    x_hi: gs.x_hi.into_vec(),
                    nx: gs.nx.into_vec(),
                    nt: gs.nt,
                    side: gs.side,
                };
                if cfg.x_lo.len() != d || cfg.x_hi.len() != d || cfg.nx.len() != d {
                    return Err(ModelError::Config(format!("[grid] x_lo/x_hi/nx must have d={d} entries")));
                }
                Some(cfg)
            }
        };
        let mc = match file.mc {
            None => None,
            Some(ms) => {
                let cfg = McConfig {
                    t0: ms.t0,
                    x0: ms.x0.into_vec(),
                    paths: ms.paths,
                    steps: ms.steps,
                    seed: ms.seed,
                    workers: ms.workers,
                    policy1: ms.policy1,
                    policy2: ms.policy2,
                };
                if cfg.x0.len() != d {
                    return Err(ModelError::Config(format!("[mc] x0 must have d={d} entries")));
                }
                if !(cfg.t0 >= 0.0 && cfg.t0 < spec.horizon) {
                    return Err(ModelError::Config(format!(
                        "[mc] t0={} must lie in [0, T={})",
                        cfg.t0, spec.horizon
                    )));
                }
                Some(cfg)
            }
        };
        let output = {
            let section = file.output.unwrap_or_default();
            OutputConfig {
                dir: section.dir,
                dump_paths: section.dump_paths.unwrap_or(false),
            }
        };

        Ok(Scenario { spec, grid, mc, output })
    }

    pub fn load(path: &Path) -> Result<Scenario, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml_str(&text)
    }

    /// Deterministic canonical echo of the scenario: fixed section and key
    /// order, expressions normalized through the parser's printer.
    pub fn canonical_echo(&self) -> String {
        let spec = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "d = {}", spec.d);
        let _ = writeln!(out, "m = {}", spec.m);
        let _ = writeln!(out, "T = {}", spec.horizon);
        let _ = writeln!(
            out,
            "kind = \"{}\"",
            match spec.kind {
                ModelKind::Game => "game",
                ModelKind::Control => "control",
            }
        );
        let quote_list = |items: &[String]| -> String {
            let quoted: Vec<String> = items.iter().map(|s| format!("\"{s}\"")).collect();
            format!("[{}]", quoted.join(", "))
        };
        let _ = writeln!(out, "\n[dynamics]");
        let _ = writeln!(out, "b = {}", quote_list(&spec.canonical.b));
        let _ = writeln!(out, "f1 = {}", quote_list(&spec.canonical.f1));
        let sigma_rows: Vec<String> = (0..spec.d)
            .map(|i| quote_list(&spec.canonical.sigma[i * spec.m..(i + 1) * spec.m]))
            .collect();
        let _ = writeln!(out, "sigma = [{}]", sigma_rows.join(", "));
        let _ = writeln!(out, "\n[cost]");
        let _ = writeln!(out, "l = \"{}\"", spec.canonical.l);
        let _ = writeln!(out, "g = \"{}\"", spec.canonical.g);
        let fmt_floats = |v: &[f64]| -> String {
            let items: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            format!("[{}]", items.join(", "))
        };
        let dump_set = |out: &mut String, name: &str, set: &ControlSet| {
            let _ = writeln!(out, "\n[controls.{name}]");
            let _ = writeln!(out, "lo = {}", fmt_floats(set.lo()));
            let _ = writeln!(out, "hi = {}", fmt_floats(set.hi()));
            let _ = writeln!(out, "n_points = {}", set.n_points());
        };
        match spec.kind {
            ModelKind::Game => {
                dump_set(&mut out, "u1", &spec.u1);
                dump_set(&mut out, "u2", &spec.u2);
            }
            ModelKind::Control => dump_set(&mut out, "u", &spec.u2),
        }
        if let Some(grid) = &self.grid {
            let _ = writeln!(out, "\n[grid]");
            let _ = writeln!(out, "x_lo = {}", fmt_floats(&grid.x_lo));
            let _ = writeln!(out, "x_hi = {}", fmt_floats(&grid.x_hi));
            let nx: Vec<String> = grid.nx.iter().map(|n| n.to_string()).collect();
            let _ = writeln!(out, "nx = [{}]", nx.join(", "));
            let _ = writeln!(out, "nt = {}", grid.nt);
            if let Some(side) = &grid.side {
                let _ = writeln!(out, "side = \"{side}\"");
            }
        }
        if let Some(mc) = &self.mc {
            let _ = writeln!(out, "\n[mc]");
            let _ = writeln!(out, "t0 = {}", mc.t0);
            let _ = writeln!(out, "x0 = {}", fmt_floats(&mc.x0));
            let _ = writeln!(out, "paths = {}", mc.paths);
            let _ = writeln!(out, "steps = {}", mc.steps);
            let _ = writeln!(out, "seed = {}", mc.seed);
            if let Some(w) = mc.workers {
                let _ = writeln!(out, "workers = {w}");
            }
            if let Some(p) = &mc.policy1 {
                let _ = writeln!(out, "policy1 = \"{p}\"");
            }
            if let Some(p) = &mc.policy2 {
                let _ = writeln!(out, "policy2 = \"{p}\"");
            }
        }
        if self.output.dir.is_some() || self.output.dump_paths {
            let _ = writeln!(out, "\n[output]");
            if let Some(dir) = &self.output.dir {
                let _ = writeln!(out, "dir = \"{dir}\"");
            }
            if self.output.dump_paths {
                let _ = writeln!(out, "dump_paths = true");
            }
        }
        out
    }
}
