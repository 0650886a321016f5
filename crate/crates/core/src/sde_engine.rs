//! Closed-loop Euler–Maruyama simulation under feedback policies, with
//! counter-based per-path seeding and stored Brownian increments.
//!
//! The state equation integrated on `[t0, T]` with `n_steps` uniform steps is
//!
//! ```text
//! y[k+1] = y[k] + ( b(s_k, y_k) + f1(s_k, y_k, u1_k, u2_k) ) dt + sigma(s_k, y_k) dW_k
//! u_i[k] = policy_i(s_k, y_k)      (left endpoint, Ito-consistent)
//! cost  += l(s_k, y_k, u1_k, u2_k) dt
//! ```
//!
//! Reproducibility contract: path `i` is fully determined by
//! `(base_seed, i)` — its generator is seeded by a SplitMix64 mix of the two
//! — and every Brownian increment of a path is drawn *before* the dynamics
//! are stepped. Consequences:
//!
//! * results are independent of scheduling and worker count (paths are
//!   assembled by index), and
//! * two runs with the same seed and *different policies* consume identical
//!   `dW` arrays — common random numbers for low-variance payoff
//!   comparisons.

use crate::bi_solver::ValueField;
use crate::expr::{self, Ast, Var};
use crate::game_model::{GameSpec, ModelError};
use crate::hamiltonian::{ControlTable, EnvelopeScratch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("policy error: {0}")]
    Policy(String),
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer (public-domain constants), the standard 64-bit mix.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of path `index` under `base_seed`: a SplitMix64 mix of the pair.
pub fn path_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(base_seed) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---------------------------------------------------------------------------
// Feedback policies
// ---------------------------------------------------------------------------

/// Which player's control set a policy feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlayerRole {
    One,
    Two,
}

/// Control values on an independent lookup grid, nearest-node in space and
/// time.
#[derive(Debug, Clone)]
pub struct TabulatedPolicy {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub nx: Vec<usize>,
    pub nt: usize,
    pub horizon: f64,
    /// `values[(level * n_nodes + node) * k + j]`, row-major nodes.
    pub values: Vec<f64>,
    pub k: usize,
}

impl TabulatedPolicy {
    fn n_nodes(&self) -> usize {
        self.nx.iter().product()
    }

    fn lookup_into(&self, s: f64, x: &[f64], out: &mut [f64]) {
        let level = if self.nt <= 1 {
            0
        } else {
            let dt = self.horizon / ((self.nt - 1) as f64);
            ((s / dt).round().max(0.0) as usize).min(self.nt - 1)
        };
        let mut node = 0usize;
        let mut stride = self.n_nodes();
        for dim in 0..self.x_lo.len() {
            stride /= self.nx[dim];
            let h = (self.x_hi[dim] - self.x_lo[dim]) / ((self.nx[dim] - 1) as f64);
            let i = (((x[dim] - self.x_lo[dim]) / h).round().max(0.0) as usize).min(self.nx[dim] - 1);
            node += i * stride;
        }
        let base = (level * self.n_nodes() + node) * self.k;
        out.copy_from_slice(&self.values[base..base + self.k]);
    }
}

#[derive(Debug, Clone)]
enum PolicyKind {
    /// Saddle controls synthesized from a solved field:
    /// `z*(s, x) = argmax/argmin of H0(s, x, Dv(s, x))` with the gradient
    /// interpolated multilinearly in `x` and piecewise-constant in `t`.
    Synthesized(Arc<ValueField>),
    Constant(Vec<f64>),
    Tabulated(TabulatedPolicy),
    /// One expression per control coordinate, in `(s, x)`.
    Expression(Vec<Ast>),
}

/// A feedback control map `z(s, x)` for one player. Outputs are always
/// clamped into the owning control set's box; the engine reports the
/// fraction of evaluations that needed clamping.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub role: PlayerRole,
    kind: PolicyKind,
}

impl FeedbackPolicy {
    pub fn synthesized(role: PlayerRole, field: Arc<ValueField>) -> FeedbackPolicy {
        FeedbackPolicy { role, kind: PolicyKind::Synthesized(field) }
    }

    pub fn constant(role: PlayerRole, u: Vec<f64>) -> FeedbackPolicy {
        FeedbackPolicy { role, kind: PolicyKind::Constant(u) }
    }

    pub fn tabulated(role: PlayerRole, table: TabulatedPolicy) -> FeedbackPolicy {
        FeedbackPolicy { role, kind: PolicyKind::Tabulated(table) }
    }

    /// Expression policy; each coordinate may read `s` and `x1..xd` only.
    pub fn expression(role: PlayerRole, spec: &GameSpec, texts: &[String]) -> Result<FeedbackPolicy, EngineError> {
        let mut exprs = Vec::with_capacity(texts.len());
        for (i, t) in texts.iter().enumerate() {
            let ast = expr::parse(t)
                .map_err(|e| EngineError::Policy(format!("expression policy coordinate {i}: {e}")))?;
            for var in ast.free_vars() {
                let ok = matches!(var, Var::S) || matches!(var, Var::X(j) if j < spec.d);
                if !ok {
                    return Err(EngineError::Policy(format!(
                        "expression policy may only read s and x1..x{}, found `{var}`",
                        spec.d
                    )));
                }
            }
            exprs.push(ast.fold_constants());
        }
        Ok(FeedbackPolicy { role, kind: PolicyKind::Expression(exprs) })
    }

    /// Builds a policy from the little textual language used by scenario
    /// files and command-line overrides: `star` (synthesized from a solved
    /// field; a zero-dimensional control set needs no field), `const v1 v2
    /// ...`, or `expr e1; e2; ...`.
    pub fn from_text(
        spec: &GameSpec,
        role: PlayerRole,
        text: &str,
        field: Option<&Arc<ValueField>>,
    ) -> Result<FeedbackPolicy, EngineError> {
        let dim = match role {
            PlayerRole::One => spec.u1.dim(),
            PlayerRole::Two => spec.u2.dim(),
        };
        let t = text.trim();
        if t == "star" {
            if dim == 0 {
                return Ok(FeedbackPolicy::constant(role, Vec::new()));
            }
            let field = field.ok_or_else(|| {
                EngineError::Policy("star policy requires a solved value field".into())
            })?;
            return Ok(FeedbackPolicy::synthesized(role, field.clone()));
        }
        if let Some(rest) = t.strip_prefix("const") {
            let values: Result<Vec<f64>, _> = rest
                .split([' ', ','])
                .filter(|p| !p.is_empty())
                .map(str::parse::<f64>)
                .collect();
            let values =
                values.map_err(|e| EngineError::Policy(format!("bad constant policy `{t}`: {e}")))?;
            if values.len() != dim {
                return Err(EngineError::Policy(format!(
                    "constant policy `{t}` has {} values, control set has dimension {dim}",
                    values.len()
                )));
            }
            return Ok(FeedbackPolicy::constant(role, values));
        }
        if let Some(rest) = t.strip_prefix("expr") {
            let texts: Vec<String> = rest
                .split(';')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect();
            return FeedbackPolicy::expression(role, spec, &texts);
        }
        Err(EngineError::Policy(format!(
            "unknown policy `{t}` (expected `star`, `const v1 v2 ...`, or `expr e1; e2; ...`)"
        )))
    }

    /// Human-readable label used in reports and CSV headers.
    pub fn label(&self) -> String {
        match &self.kind {
            PolicyKind::Synthesized(_) => "star".to_string(),
            PolicyKind::Constant(u) => {
                let coords: Vec<String> = u.iter().map(|v| format!("{v}")).collect();
                format!("const({})", coords.join(","))
            }
            PolicyKind::Tabulated(_) => "tabulated".to_string(),
            PolicyKind::Expression(exprs) => {
                let coords: Vec<String> = exprs.iter().map(|e| e.to_string()).collect();
                format!("expr({})", coords.join(","))
            }
        }
    }

    fn dim_for(&self, spec: &GameSpec) -> usize {
        match self.role {
            PlayerRole::One => spec.u1.dim(),
            PlayerRole::Two => spec.u2.dim(),
        }
    }

    fn validate(&self, spec: &GameSpec) -> Result<(), EngineError> {
        let want = self.dim_for(spec);
        let got = match &self.kind {
            PolicyKind::Synthesized(field) => {
                if field.grid.d != spec.d {
                    return Err(EngineError::Policy(format!(
                        "synthesized policy field has d = {}, model has d = {}",
                        field.grid.d, spec.d
                    )));
                }
                want
            }
            PolicyKind::Constant(u) => u.len(),
            PolicyKind::Tabulated(t) => t.k,
            PolicyKind::Expression(e) => e.len(),
        };
        if got != want {
            return Err(EngineError::Policy(format!(
                "policy produces {got} control coordinates, the owning set has dimension {want}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pair evaluator
// ---------------------------------------------------------------------------

/// Evaluates both players' policies at `(s, x)`, sharing the Hamiltonian
/// enumeration when both are synthesized from pointer-identical fields.
struct PairEvaluator<'a> {
    spec: &'a GameSpec,
    p1: &'a FeedbackPolicy,
    p2: &'a FeedbackPolicy,
    /// Control table reused across evaluations when `f1`, `l` read neither
    /// `s` nor `x`.
    static_table: Option<ControlTable>,
    table_static: bool,
    scratch: EnvelopeScratch,
    grad: Vec<f64>,
    shared_field: bool,
    grad_evals: u64,
    grad_clamped: u64,
    control_evals: u64,
    control_clamped: u64,
}

impl<'a> PairEvaluator<'a> {
    fn new(spec: &'a GameSpec, p1: &'a FeedbackPolicy, p2: &'a FeedbackPolicy) -> Result<Self, EngineError> {
        let deps = spec.control_coefficient_deps();
        let table_static = !deps.on_s && !deps.on_x;
        let needs_table = matches!(p1.kind, PolicyKind::Synthesized(_))
            || matches!(p2.kind, PolicyKind::Synthesized(_));
        let static_table = if table_static && needs_table {
            let x0 = vec![0.0; spec.d];
            Some(ControlTable::build(spec, 0.0, &x0)?)
        } else {
            None
        };
        let shared_field = match (&p1.kind, &p2.kind) {
            (PolicyKind::Synthesized(f1), PolicyKind::Synthesized(f2)) => Arc::ptr_eq(f1, f2),
            _ => false,
        };
        Ok(PairEvaluator {
            spec,
            p1,
            p2,
            static_table,
            table_static,
            scratch: EnvelopeScratch::default(),
            grad: vec![0.0; spec.d],
            shared_field,
            grad_evals: 0,
            grad_clamped: 0,
            control_evals: 0,
            control_clamped: 0,
        })
    }

    fn envelope_at(
        &mut self,
        field: &ValueField,
        s: f64,
        x: &[f64],
    ) -> Result<crate::hamiltonian::Envelopes, EngineError> {
        let clamped = field.interp_gradient_into(s, x, &mut self.grad);
        self.grad_evals += 1;
        if clamped {
            self.grad_clamped += 1;
        }
        let env = if let Some(table) = &self.static_table {
            table.envelopes(&self.grad, &mut self.scratch)
        } else {
            debug_assert!(!self.table_static);
            let table = ControlTable::build(self.spec, s, x)?;
            table.envelopes(&self.grad, &mut self.scratch)
        };
        Ok(env)
    }

    fn eval_single(
        &mut self,
        which: PlayerRole,
        s: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<(), EngineError> {
        let policy = match which {
            PlayerRole::One => self.p1,
            PlayerRole::Two => self.p2,
        };
        let set = match policy.role {
            PlayerRole::One => &self.spec.u1,
            PlayerRole::Two => &self.spec.u2,
        };
        match &policy.kind {
            PolicyKind::Synthesized(field) => {
                let field = field.clone();
                let env = self.envelope_at(&field, s, x)?;
                let point = match policy.role {
                    PlayerRole::One => self.spec.u1.point(env.i_star),
                    PlayerRole::Two => self.spec.u2.point(env.j_star),
                };
                out.copy_from_slice(point);
                self.control_evals += 1;
            }
            PolicyKind::Constant(u) => {
                out.copy_from_slice(u);
                self.control_evals += 1;
                if set.clamp(out) {
                    self.control_clamped += 1;
                }
            }
            PolicyKind::Tabulated(table) => {
                table.lookup_into(s, x, out);
                self.control_evals += 1;
                if set.clamp(out) {
                    self.control_clamped += 1;
                }
            }
            PolicyKind::Expression(exprs) => {
                let ctx = expr::Bindings { s: Some(s), x, ..Default::default() };
                for (j, ast) in exprs.iter().enumerate() {
                    out[j] = expr::eval_ctx(ast, &ctx).map_err(ModelError::from)?;
                }
                self.control_evals += 1;
                if set.clamp(out) {
                    self.control_clamped += 1;
                }
            }
        }
        Ok(())
    }

    /// Both controls at `(s, x)`. When the two policies are synthesized from
    /// the same field, one envelope sweep yields both.
    fn controls_into(&mut self, s: f64, x: &[f64], u1: &mut [f64], u2: &mut [f64]) -> Result<(), EngineError> {
        if self.shared_field {
            let field = match &self.p1.kind {
                PolicyKind::Synthesized(f) => f.clone(),
                _ => unreachable!("shared_field implies synthesized"),
            };
            let env = self.envelope_at(&field, s, x)?;
            u1.copy_from_slice(self.spec.u1.point(env.i_star));
            u2.copy_from_slice(self.spec.u2.point(env.j_star));
            self.control_evals += 2;
            return Ok(());
        }
        self.eval_single(PlayerRole::One, s, x, u1)?;
        self.eval_single(PlayerRole::Two, s, x, u2)?;
        Ok(())
    }
}

/// One-shot policy evaluation (used by tests and diagnostics).
pub fn eval_policy(spec: &GameSpec, policy: &FeedbackPolicy, s: f64, x: &[f64]) -> Result<Vec<f64>, EngineError> {
    policy.validate(spec)?;
    let other = FeedbackPolicy::constant(
        match policy.role {
            PlayerRole::One => PlayerRole::Two,
            PlayerRole::Two => PlayerRole::One,
        },
        match policy.role {
            PlayerRole::One => spec.u2.point(0).to_vec(),
            PlayerRole::Two => spec.u1.point(0).to_vec(),
        },
    );
    let (p1, p2) = match policy.role {
        PlayerRole::One => (policy, &other),
        PlayerRole::Two => (&other, policy),
    };
    let mut ev = PairEvaluator::new(spec, p1, p2)?;
    let mut out = vec![0.0; policy.dim_for(spec)];
    ev.eval_single(policy.role, s, x, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Path bundles
// ---------------------------------------------------------------------------

/// Simulated trajectories with their Brownian increments, applied controls
/// and running-cost integrals. Flat row-major storage, one block per path.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub d: usize,
    pub m: usize,
    pub k1: usize,
    pub k2: usize,
    pub base_seed: u64,
    pub dt: f64,
    /// States `y[(path * (n_steps + 1) + step) * d ..]`.
    pub y: Vec<f64>,
    /// Brownian increments `dw[(path * n_steps + step) * m ..]`.
    pub dw: Vec<f64>,
    /// Player-1 controls per step (empty when `k1 = 0`).
    pub u1: Vec<f64>,
    /// Player-2 controls per step.
    pub u2: Vec<f64>,
    /// Left-endpoint running-cost integral per path.
    pub running_cost: Vec<f64>,
    /// `(path, step)` of the first non-finite state per failed path.
    pub failures: Vec<(usize, usize)>,
    /// Fraction of gradient interpolations that clamped `x` into the box.
    pub grad_clamped_fraction: f64,
    /// Fraction of policy outputs that needed clamping into the control box.
    pub control_clamped_fraction: f64,
}

impl PathBundle {
    pub fn is_failed(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Run flagged when more than 1% of gradient lookups left the box — the
    /// grid should be enlarged.
    pub fn box_exit_flagged(&self) -> bool {
        self.grad_clamped_fraction > 0.01
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + self.dt * step as f64
    }

    pub fn y_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * (self.n_steps + 1) + step) * self.d;
        &self.y[base..base + self.d]
    }

    pub fn y_terminal(&self, path: usize) -> &[f64] {
        self.y_at(path, self.n_steps)
    }

    pub fn dw_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.n_steps + step) * self.m;
        &self.dw[base..base + self.m]
    }

    pub fn u1_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.n_steps + step) * self.k1;
        &self.u1[base..base + self.k1]
    }

    pub fn u2_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.n_steps + step) * self.k2;
        &self.u2[base..base + self.k2]
    }
}

struct PathResult {
    y: Vec<f64>,
    dw: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    running_cost: f64,
    failure: Option<usize>,
    grad_evals: u64,
    grad_clamped: u64,
    control_evals: u64,
    control_clamped: u64,
}

fn simulate_path(
    spec: &GameSpec,
    ev: &mut PairEvaluator<'_>,
    t0: f64,
    x0: &[f64],
    n_steps: usize,
    dt: f64,
    seed: u64,
) -> Result<PathResult, EngineError> {
    let d = spec.d;
    let m = spec.m;
    let k1 = spec.u1.dim();
    let k2 = spec.u2.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqrt_dt = dt.sqrt();

    // All Brownian increments are drawn before any dynamics: the noise of a
    // path is a function of the seed alone, never of the policies.
    let mut dw = vec![0.0; n_steps * m];
    for z in dw.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *z = n * sqrt_dt;
    }

    let mut y = vec![0.0; (n_steps + 1) * d];
    y[..d].copy_from_slice(x0);
    let mut u1 = vec![0.0; n_steps * k1];
    let mut u2 = vec![0.0; n_steps * k2];
    let mut running_cost = 0.0f64;
    let mut drift = vec![0.0; d];
    let mut sig = vec![0.0; d * m];
    let mut failure = None;

    let grad_evals_before = ev.grad_evals;
    let grad_clamped_before = ev.grad_clamped;
    let control_evals_before = ev.control_evals;
    let control_clamped_before = ev.control_clamped;

    'steps: for k in 0..n_steps {
        let s = t0 + dt * k as f64;
        let (y_k, y_next) = {
            let (a, b) = y.split_at_mut((k + 1) * d);
            (&a[k * d..], &mut b[..d])
        };
        let u1_k = &mut u1[k * k1..(k + 1) * k1];
        let u2_k = &mut u2[k * k2..(k + 1) * k2];
        ev.controls_into(s, y_k, u1_k, u2_k)?;

        // Running cost may legitimately blow up to +/-inf (the payoff
        // bookkeeping downstream flags it); a non-finite *state* fails the
        // path.
        running_cost += spec.eval_l(s, y_k, u1_k, u2_k)? * dt;

        spec.eval_dynamics_into_unchecked(s, y_k, u1_k, u2_k, &mut drift, &mut sig)?;
        let dw_k = &dw[k * m..(k + 1) * m];
        for i in 0..d {
            let mut acc = y_k[i] + drift[i] * dt;
            for j in 0..m {
                acc += sig[i * m + j] * dw_k[j];
            }
            y_next[i] = acc;
        }
        if y_next.iter().any(|v| !v.is_finite()) {
            failure = Some(k);
            // Freeze the remainder (including the bad state just written) at
            // the last finite value so the arrays stay rectangular and finite.
            let frozen: Vec<f64> = y[k * d..(k + 1) * d].to_vec();
            for step in k..n_steps {
                y[(step + 1) * d..(step + 2) * d].copy_from_slice(&frozen);
            }
            break 'steps;
        }
    }

    Ok(PathResult {
        y,
        dw,
        u1,
        u2,
        running_cost,
        failure,
        grad_evals: ev.grad_evals - grad_evals_before,
        grad_clamped: ev.grad_clamped - grad_clamped_before,
        control_evals: ev.control_evals - control_evals_before,
        control_clamped: ev.control_clamped - control_clamped_before,
    })
}

/// Simulate `n_paths` closed-loop trajectories from `(t0, x0)`.
///
/// Paths are independent units of work executed on the current Rayon pool
/// and assembled by index, so the bundle is bit-identical across worker
/// counts and runs.
pub fn simulate(
    spec: &GameSpec,
    policy1: &FeedbackPolicy,
    policy2: &FeedbackPolicy,
    t0: f64,
    x0: &[f64],
    n_paths: usize,
    n_steps: usize,
    base_seed: u64,
) -> Result<PathBundle, EngineError> {
    if policy1.role != PlayerRole::One || policy2.role != PlayerRole::Two {
        return Err(EngineError::Policy(
            "simulate takes (player-1 policy, player-2 policy) in that order".into(),
        ));
    }
    policy1.validate(spec)?;
    policy2.validate(spec)?;
    if x0.len() != spec.d {
        return Err(EngineError::Policy(format!(
            "x0 has {} coordinates, model has d = {}",
            x0.len(),
            spec.d
        )));
    }
    if n_steps == 0 {
        return Err(EngineError::Policy("n_steps must be at least 1".into()));
    }
    if !(t0 >= 0.0 && t0 < spec.horizon) {
        return Err(EngineError::Policy(format!(
            "t0 = {t0} must lie in [0, T = {})",
            spec.horizon
        )));
    }
    let dt = (spec.horizon - t0) / n_steps as f64;

    let results: Vec<Result<PathResult, EngineError>> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || PairEvaluator::new(spec, policy1, policy2),
            |ev, path| {
                let ev = ev.as_mut().map_err(|e| EngineError::Policy(e.to_string()))?;
                simulate_path(spec, ev, t0, x0, n_steps, dt, path_seed(base_seed, path))
            },
        )
        .collect();

    let d = spec.d;
    let m = spec.m;
    let k1 = spec.u1.dim();
    let k2 = spec.u2.dim();
    let mut bundle = PathBundle {
        t0,
        x0: x0.to_vec(),
        n_paths,
        n_steps,
        d,
        m,
        k1,
        k2,
        base_seed,
        dt,
        y: Vec::with_capacity(n_paths * (n_steps + 1) * d),
        dw: Vec::with_capacity(n_paths * n_steps * m),
        u1: Vec::with_capacity(n_paths * n_steps * k1),
        u2: Vec::with_capacity(n_paths * n_steps * k2),
        running_cost: Vec::with_capacity(n_paths),
        failures: Vec::new(),
        grad_clamped_fraction: 0.0,
        control_clamped_fraction: 0.0,
    };
    let mut grad_evals = 0u64;
    let mut grad_clamped = 0u64;
    let mut control_evals = 0u64;
    let mut control_clamped = 0u64;
    for (path, result) in results.into_iter().enumerate() {
        let r = result?;
        bundle.y.extend_from_slice(&r.y);
        bundle.dw.extend_from_slice(&r.dw);
        bundle.u1.extend_from_slice(&r.u1);
        bundle.u2.extend_from_slice(&r.u2);
        bundle.running_cost.push(r.running_cost);
        if let Some(step) = r.failure {
            bundle.failures.push((path, step));
        }
        grad_evals += r.grad_evals;
        grad_clamped += r.grad_clamped;
        control_evals += r.control_evals;
        control_clamped += r.control_clamped;
    }
    bundle.grad_clamped_fraction = if grad_evals > 0 {
        grad_clamped as f64 / grad_evals as f64
    } else {
        0.0
    };
    bundle.control_clamped_fraction = if control_evals > 0 {
        control_clamped as f64 / control_evals as f64
    } else {
        0.0
    };
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimate {
    pub mean: f64,
    pub se: f64,
    pub order: u32,
    pub n_paths: usize,
}

/// Estimate `E sup over steps of |y|^p` (`p` even) with standard error.
pub fn estimate_moments(bundle: &PathBundle, p: u32) -> Result<MomentEstimate, EngineError> {
    if p == 0 || p % 2 != 0 {
        return Err(EngineError::Policy(format!("moment order must be a positive even integer, got {p}")));
    }
    if bundle.is_failed() {
        return Err(EngineError::Policy(format!(
            "bundle failed at (path, step) = {:?}; moments undefined",
            bundle.failures[0]
        )));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for path in 0..bundle.n_paths {
        let mut sup = 0.0f64;
        for step in 0..=bundle.n_steps {
            let y = bundle.y_at(path, step);
            let norm_sq: f64 = y.iter().map(|v| v * v).sum();
            sup = sup.max(norm_sq.powf(p as f64 / 2.0));
        }
        sum += sup;
        sum_sq += sup * sup;
    }
    let n = bundle.n_paths as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(MomentEstimate {
        mean,
        se: if bundle.n_paths > 1 { (var / (n - 1.0)).sqrt() } else { 0.0 },
        order: p,
        n_paths: bundle.n_paths,
    })
}
