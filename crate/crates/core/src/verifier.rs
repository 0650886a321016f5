//! Monte-Carlo verification of the dynamic-programming structure: payoff
//! estimation, the pathwise payoff decomposition, saddle-point checks,
//! game-value collapse, and single-controller verification.
//!
//! Every routine here consumes [`PathBundle`]s produced by the simulation
//! engine and judges theorem-shaped statements at explicit `3 * SE`
//! tolerances (plus a scheme-error allowance where a PDE value enters).
//! Comparisons between policies always reuse one base seed, so they are
//! paired through common random numbers and the standard error of the
//! *difference* is the deciding scale.

use crate::bi_solver::{EquationKind, ValueField};
use crate::game_model::{GameSpec, ModelError, ModelKind};
use crate::hamiltonian::{h0_cv, minimax_table, ControlTable, EnvelopeScratch};
use crate::sde_engine::{simulate, EngineError, FeedbackPolicy, PathBundle, PlayerRole};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("verifier input error: {0}")]
    Input(String),
}

/// One PASS/FAIL line of a verdict summary.
#[derive(Debug, Clone)]
pub struct VerdictLine {
    pub item: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return f64::NAN;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        // Degenerate exactness (both sides constant) counts as agreement.
        return 1.0;
    }
    cov / (va * vb).sqrt()
}

// ---------------------------------------------------------------------------
// Payoff estimation
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate of `E[ integral of l + g(y(T)) ]` for one policy
/// pair. The mean is assembled as `running_mean + terminal_mean`, so the two
/// components add up to the total exactly.
#[derive(Debug, Clone)]
pub struct PayoffEstimate {
    pub label: String,
    pub n_paths: usize,
    /// Paths entering the averages (finite payoff, no failure).
    pub n_used: usize,
    pub running_mean: f64,
    pub terminal_mean: f64,
    pub mean: f64,
    pub se: f64,
    pub non_finite_fraction: f64,
    /// Set when any path produced a non-finite payoff: the estimate is a
    /// conditional average, not the expectation.
    pub ill_defined: bool,
}

/// Pathwise payoffs `J~_i = running_cost_i + g(y_i(T))`. Failed paths are
/// reported as NaN.
pub fn per_path_payoffs(spec: &GameSpec, bundle: &PathBundle) -> Result<Vec<f64>, VerifierError> {
    let mut failed = vec![false; bundle.n_paths];
    for &(path, _) in &bundle.failures {
        failed[path] = true;
    }
    let mut out = Vec::with_capacity(bundle.n_paths);
    for path in 0..bundle.n_paths {
        if failed[path] {
            out.push(f64::NAN);
            continue;
        }
        let terminal = spec.eval_g(bundle.y_terminal(path))?;
        out.push(bundle.running_cost[path] + terminal);
    }
    Ok(out)
}

/// Estimate the payoff of the policy pair that produced `bundle`.
pub fn payoff(spec: &GameSpec, bundle: &PathBundle, label: &str) -> Result<PayoffEstimate, VerifierError> {
    let mut failed = vec![false; bundle.n_paths];
    for &(path, _) in &bundle.failures {
        failed[path] = true;
    }
    let mut running = Vec::with_capacity(bundle.n_paths);
    let mut terminal = Vec::with_capacity(bundle.n_paths);
    let mut totals = Vec::with_capacity(bundle.n_paths);
    let mut non_finite = 0usize;
    for path in 0..bundle.n_paths {
        if failed[path] {
            non_finite += 1;
            continue;
        }
        let r = bundle.running_cost[path];
        let t = spec.eval_g(bundle.y_terminal(path))?;
        let total = r + t;
        if !total.is_finite() {
            non_finite += 1;
            continue;
        }
        running.push(r);
        terminal.push(t);
        totals.push(total);
    }
    let (running_mean, _) = mean_se(&running);
    let (terminal_mean, _) = mean_se(&terminal);
    let (_, se) = mean_se(&totals);
    Ok(PayoffEstimate {
        label: label.to_string(),
        n_paths: bundle.n_paths,
        n_used: totals.len(),
        running_mean,
        terminal_mean,
        mean: running_mean + terminal_mean,
        se,
        non_finite_fraction: non_finite as f64 / bundle.n_paths.max(1) as f64,
        ill_defined: non_finite > 0,
    })
}

// ---------------------------------------------------------------------------
// Pathwise decomposition
// ---------------------------------------------------------------------------

/// Pathwise decomposition of the payoff around a solved value field:
///
/// ```text
/// R_i = J~_i - v(t0, x0) - sum_k [ H0_CV(s_k, y_k, u1_k, u2_k, p_k) - H0(s_k, y_k, p_k) ] dt
/// ```
///
/// with `p_k` the interpolated gradient of the field — the same lookup the
/// simulator uses — and `H0` the field's own optimised Hamiltonian. The
/// statement under test is `E[R] = 0` for *any* admissible policy pair, with
/// `R` a discretised stochastic integral; its correlation with the explicit
/// martingale `M_i = sum_k <p_k, sigma dW_k>` should be near one.
#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub n_paths: usize,
    pub n_used: usize,
    pub v0: f64,
    /// Per-path `R_i` (NaN for excluded paths).
    pub r: Vec<f64>,
    /// Per-path gap integral.
    pub gap_integral: Vec<f64>,
    /// Per-path explicit martingale sum.
    pub martingale: Vec<f64>,
    /// Per-path payoff.
    pub payoffs: Vec<f64>,
    pub r_mean: f64,
    pub r_se: f64,
    pub gap_integral_mean: f64,
    pub gap_integral_se: f64,
    pub martingale_corr: f64,
    pub payoff: PayoffEstimate,
    /// `|mean(R)| <= 3 SE(R)`.
    pub pass: bool,
}

impl DecompositionReport {
    pub fn verdicts(&self) -> Vec<VerdictLine> {
        vec![
            VerdictLine {
                item: "decomposition_mean_zero".into(),
                value: self.r_mean.abs(),
                threshold: 3.0 * self.r_se,
                pass: self.pass,
            },
            VerdictLine {
                item: "martingale_correlation".into(),
                value: self.martingale_corr,
                threshold: 0.95,
                pass: self.martingale_corr >= 0.95,
            },
        ]
    }
}

/// Evaluate the decomposition residuals of `bundle` against `field`.
pub fn fundamental_decomposition(
    spec: &GameSpec,
    field: &ValueField,
    bundle: &PathBundle,
) -> Result<DecompositionReport, VerifierError> {
    if field.grid.d != spec.d {
        return Err(VerifierError::Input(format!(
            "field has d = {}, model has d = {}",
            field.grid.d, spec.d
        )));
    }
    let use_upper = matches!(field.equation, EquationKind::BiUpper);
    let deps = spec.control_coefficient_deps();
    let table_static = !deps.on_s && !deps.on_x;
    let static_table = if table_static {
        Some(ControlTable::build(spec, 0.0, &bundle.x0)?)
    } else {
        None
    };
    let mut scratch = EnvelopeScratch::default();
    let mut p = vec![0.0; spec.d];
    let mut sigma = vec![0.0; spec.d * bundle.m];
    let v0 = field.interp_value(bundle.t0, &bundle.x0).0;
    let payoffs = per_path_payoffs(spec, bundle)?;
    let dt = bundle.dt;

    let mut r = vec![f64::NAN; bundle.n_paths];
    let mut gap_integral = vec![f64::NAN; bundle.n_paths];
    let mut martingale = vec![f64::NAN; bundle.n_paths];
    let mut used_r = Vec::new();
    let mut used_gap = Vec::new();
    let mut used_m = Vec::new();

    for path in 0..bundle.n_paths {
        if !payoffs[path].is_finite() {
            continue;
        }
        let mut acc_gap = 0.0f64;
        let mut acc_m = 0.0f64;
        for k in 0..bundle.n_steps {
            let s = bundle.time(k);
            let y = bundle.y_at(path, k);
            let u1 = bundle.u1_at(path, k);
            let u2 = bundle.u2_at(path, k);
            field.interp_gradient_into(s, y, &mut p);
            let h_cv = h0_cv(spec, s, y, &p, u1, u2)?;
            let env = match &static_table {
                Some(t) => t.envelopes(&p, &mut scratch),
                None => ControlTable::build(spec, s, y)?.envelopes(&p, &mut scratch),
            };
            let h_opt = if use_upper { env.upper } else { env.lower };
            acc_gap += (h_cv - h_opt) * dt;

            spec.eval_sigma_into(s, y, &mut sigma)?;
            let dw = bundle.dw_at(path, k);
            for i in 0..spec.d {
                let mut row = 0.0;
                for j in 0..bundle.m {
                    row += sigma[i * bundle.m + j] * dw[j];
                }
                acc_m += p[i] * row;
            }
        }
        let ri = payoffs[path] - v0 - acc_gap;
        r[path] = ri;
        gap_integral[path] = acc_gap;
        martingale[path] = acc_m;
        if ri.is_finite() {
            used_r.push(ri);
            used_gap.push(acc_gap);
            used_m.push(acc_m);
        }
    }

    let (r_mean, r_se) = mean_se(&used_r);
    let (gap_mean, gap_se) = mean_se(&used_gap);
    let corr = pearson(&used_r, &used_m);
    let est = payoff(spec, bundle, "decomposition")?;
    Ok(DecompositionReport {
        n_paths: bundle.n_paths,
        n_used: used_r.len(),
        v0,
        r,
        gap_integral,
        martingale,
        payoffs,
        r_mean,
        r_se,
        gap_integral_mean: gap_mean,
        gap_integral_se: gap_se,
        martingale_corr: corr,
        payoff: est,
        pass: r_mean.abs() <= 3.0 * r_se,
    })
}

// ---------------------------------------------------------------------------
// Saddle-point verification
// ---------------------------------------------------------------------------

/// Inputs for [`verify_saddle`].
pub struct SaddleInputs<'a> {
    pub spec: &'a GameSpec,
    pub field: Arc<ValueField>,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Player-1 deviation policies (role `One`).
    pub deviations1: Vec<FeedbackPolicy>,
    /// Player-2 deviation policies (role `Two`).
    pub deviations2: Vec<FeedbackPolicy>,
    /// Extra tolerance granted to `|J(star) - v|` for PDE discretisation
    /// error, typically a small multiple of the solver's residual norm.
    pub scheme_allowance: f64,
}

/// One unilateral-deviation comparison, paired through common random
/// numbers.
#[derive(Debug, Clone)]
pub struct DeviationRow {
    pub label: String,
    pub payoff: PayoffEstimate,
    /// Mean of the per-path difference `J~(deviation) - J~(star)`.
    pub diff_mean: f64,
    pub diff_se: f64,
    /// Pairs where both payoffs were finite.
    pub n_pairs: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct SaddleReport {
    pub star: PayoffEstimate,
    pub v0: f64,
    pub scheme_allowance: f64,
    /// `|J(star, star) - v(t0, x0)|`.
    pub value_gap: f64,
    pub value_pass: bool,
    pub rows1: Vec<DeviationRow>,
    pub rows2: Vec<DeviationRow>,
    pub all_pass: bool,
}

impl SaddleReport {
    pub fn verdicts(&self) -> Vec<VerdictLine> {
        let mut out = vec![VerdictLine {
            item: "star_payoff_matches_value".into(),
            value: self.value_gap,
            threshold: 3.0 * self.star.se + self.scheme_allowance,
            pass: self.value_pass,
        }];
        for row in &self.rows1 {
            out.push(VerdictLine {
                item: format!("player1_deviation_{}_no_gain", row.label),
                value: row.diff_mean,
                threshold: 3.0 * row.diff_se,
                pass: row.pass,
            });
        }
        for row in &self.rows2 {
            out.push(VerdictLine {
                item: format!("player2_deviation_{}_no_gain", row.label),
                value: -row.diff_mean,
                threshold: 3.0 * row.diff_se,
                pass: row.pass,
            });
        }
        out
    }
}

fn paired_diff(a: &[f64], b: &[f64]) -> (f64, f64, usize) {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| x - y)
        .collect();
    let (mean, se) = mean_se(&diffs);
    (mean, se, diffs.len())
}

/// Simulate the synthesized pair and unilateral deviations from it under one
/// seed, and test the saddle inequalities
/// `J(u1, z2*) <= J(z1*, z2*) <= J(z1*, u2)` at `3 * SE` of the paired
/// differences, plus `|J(z1*, z2*) - v(t0, x0)| <= 3 SE + allowance`.
pub fn verify_saddle(inp: &SaddleInputs<'_>) -> Result<SaddleReport, VerifierError> {
    let spec = inp.spec;
    let star1 = FeedbackPolicy::synthesized(PlayerRole::One, inp.field.clone());
    let star2 = FeedbackPolicy::synthesized(PlayerRole::Two, inp.field.clone());
    let star_bundle = simulate(spec, &star1, &star2, inp.t0, &inp.x0, inp.n_paths, inp.n_steps, inp.seed)?;
    let star_payoffs = per_path_payoffs(spec, &star_bundle)?;
    let star = payoff(spec, &star_bundle, "star")?;
    drop(star_bundle);

    let v0 = inp.field.interp_value(inp.t0, &inp.x0).0;
    let value_gap = (star.mean - v0).abs();
    let value_pass = value_gap <= 3.0 * star.se + inp.scheme_allowance;

    let mut rows1 = Vec::new();
    for dev in &inp.deviations1 {
        if dev.role != PlayerRole::One {
            return Err(VerifierError::Input("deviations1 must have role One".into()));
        }
        let bundle = simulate(spec, dev, &star2, inp.t0, &inp.x0, inp.n_paths, inp.n_steps, inp.seed)?;
        let payoffs = per_path_payoffs(spec, &bundle)?;
        let est = payoff(spec, &bundle, &dev.label())?;
        let (diff_mean, diff_se, n_pairs) = paired_diff(&payoffs, &star_payoffs);
        rows1.push(DeviationRow {
            label: dev.label(),
            payoff: est,
            diff_mean,
            diff_se,
            n_pairs,
            // The maximizer deviating unilaterally must not gain.
            pass: diff_mean <= 3.0 * diff_se,
        });
    }
    let mut rows2 = Vec::new();
    for dev in &inp.deviations2 {
        if dev.role != PlayerRole::Two {
            return Err(VerifierError::Input("deviations2 must have role Two".into()));
        }
        let bundle = simulate(spec, &star1, dev, inp.t0, &inp.x0, inp.n_paths, inp.n_steps, inp.seed)?;
        let payoffs = per_path_payoffs(spec, &bundle)?;
        let est = payoff(spec, &bundle, &dev.label())?;
        let (diff_mean, diff_se, n_pairs) = paired_diff(&payoffs, &star_payoffs);
        rows2.push(DeviationRow {
            label: dev.label(),
            payoff: est,
            diff_mean,
            diff_se,
            n_pairs,
            // The minimizer deviating unilaterally must not push the payoff
            // down.
            pass: diff_mean >= -3.0 * diff_se,
        });
    }
    let all_pass = value_pass && rows1.iter().all(|r| r.pass) && rows2.iter().all(|r| r.pass);
    Ok(SaddleReport {
        star,
        v0,
        scheme_allowance: inp.scheme_allowance,
        value_gap,
        value_pass,
        rows1,
        rows2,
        all_pass,
    })
}

// ---------------------------------------------------------------------------
// Value of the game over finite policy families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GameValueReport {
    pub labels1: Vec<String>,
    pub labels2: Vec<String>,
    /// Payoff means, `n1 x n2` row-major.
    pub means: Vec<f64>,
    pub ses: Vec<f64>,
    /// `max_i min_j` of the mean matrix.
    pub lower_value: f64,
    /// `min_j max_i` of the mean matrix.
    pub upper_value: f64,
    pub i_star: usize,
    pub j_star: usize,
    pub max_se: f64,
    /// Upper and lower values agree within `3 * max SE`.
    pub collapse_pass: bool,
    pub v0: Option<f64>,
    pub allowance: f64,
    /// Both values match `v0` within `3 * max SE + allowance` (when given).
    pub value_pass: Option<bool>,
}

impl GameValueReport {
    pub fn verdicts(&self) -> Vec<VerdictLine> {
        let mut out = vec![VerdictLine {
            item: "upper_equals_lower_value".into(),
            value: self.upper_value - self.lower_value,
            threshold: 3.0 * self.max_se,
            pass: self.collapse_pass,
        }];
        if let (Some(v0), Some(pass)) = (self.v0, self.value_pass) {
            let dev = (self.lower_value - v0).abs().max((self.upper_value - v0).abs());
            out.push(VerdictLine {
                item: "family_value_matches_field".into(),
                value: dev,
                threshold: 3.0 * self.max_se + self.allowance,
                pass,
            });
        }
        out
    }
}

/// Estimate the payoff matrix over finite policy families (all pairs under
/// one seed — common random numbers) and compare its upper and lower values.
#[allow(clippy::too_many_arguments)]
pub fn estimate_game_values(
    spec: &GameSpec,
    family1: &[FeedbackPolicy],
    family2: &[FeedbackPolicy],
    t0: f64,
    x0: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    v0: Option<f64>,
    allowance: f64,
) -> Result<GameValueReport, VerifierError> {
    if family1.is_empty() || family2.is_empty() {
        return Err(VerifierError::Input("policy families must be non-empty".into()));
    }
    let n1 = family1.len();
    let n2 = family2.len();
    let mut means = vec![0.0; n1 * n2];
    let mut ses = vec![0.0; n1 * n2];
    for (i, p1) in family1.iter().enumerate() {
        for (j, p2) in family2.iter().enumerate() {
            let bundle = simulate(spec, p1, p2, t0, x0, n_paths, n_steps, seed)?;
            let est = payoff(spec, &bundle, &format!("{}|{}", p1.label(), p2.label()))?;
            if est.ill_defined {
                return Err(VerifierError::Input(format!(
                    "payoff of pair ({}, {}) is ill-defined ({}% non-finite)",
                    p1.label(),
                    p2.label(),
                    est.non_finite_fraction * 100.0
                )));
            }
            means[i * n2 + j] = est.mean;
            ses[i * n2 + j] = est.se;
        }
    }
    let mm = minimax_table(&means, n1, n2);
    let max_se = ses.iter().cloned().fold(0.0f64, f64::max);
    let collapse_pass = mm.upper - mm.lower <= 3.0 * max_se;
    let value_pass = v0.map(|v| {
        (mm.lower - v).abs() <= 3.0 * max_se + allowance && (mm.upper - v).abs() <= 3.0 * max_se + allowance
    });
    Ok(GameValueReport {
        labels1: family1.iter().map(|p| p.label()).collect(),
        labels2: family2.iter().map(|p| p.label()).collect(),
        means,
        ses,
        lower_value: mm.lower,
        upper_value: mm.upper,
        i_star: mm.i_star,
        j_star: mm.j_star,
        max_se,
        collapse_pass,
        v0,
        allowance,
        value_pass,
    })
}

// ---------------------------------------------------------------------------
// Single-controller verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ControlRow {
    pub label: String,
    pub payoff: PayoffEstimate,
    /// `J(z) - v0`.
    pub margin: f64,
    /// `J(z) >= v0 - 3 SE`.
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ControlReport {
    pub v0: f64,
    pub star: PayoffEstimate,
    pub star_gap: f64,
    pub star_tol: f64,
    pub star_pass: bool,
    pub rows: Vec<ControlRow>,
    pub all_pass: bool,
}

impl ControlReport {
    pub fn verdicts(&self) -> Vec<VerdictLine> {
        let mut out = vec![VerdictLine {
            item: "synthesized_control_attains_value".into(),
            value: self.star_gap,
            threshold: 3.0 * self.star.se + self.star_tol,
            pass: self.star_pass,
        }];
        for row in &self.rows {
            out.push(VerdictLine {
                item: format!("candidate_{}_not_below_value", row.label),
                value: row.margin,
                threshold: -3.0 * row.payoff.se,
                pass: row.pass,
            });
        }
        out
    }
}

/// Verify a single-controller (minimisation) model: the synthesized control
/// attains `v(t0, x0)` within `3 SE + star_tol`, and no candidate policy
/// beats the value beyond noise.
#[allow(clippy::too_many_arguments)]
pub fn verify_control(
    spec: &GameSpec,
    field: Arc<ValueField>,
    candidates: &[FeedbackPolicy],
    t0: f64,
    x0: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    star_tol: f64,
) -> Result<ControlReport, VerifierError> {
    if spec.kind != ModelKind::Control {
        return Err(VerifierError::Input(
            "verify_control requires a single-controller model".into(),
        ));
    }
    let shadow = FeedbackPolicy::constant(PlayerRole::One, spec.u1.point(0).to_vec());
    let star2 = FeedbackPolicy::synthesized(PlayerRole::Two, field.clone());
    let bundle = simulate(spec, &shadow, &star2, t0, x0, n_paths, n_steps, seed)?;
    let star = payoff(spec, &bundle, "star")?;
    drop(bundle);
    let v0 = field.interp_value(t0, x0).0;
    let star_gap = (star.mean - v0).abs();
    let star_pass = star_gap <= 3.0 * star.se + star_tol;

    let mut rows = Vec::new();
    for cand in candidates {
        if cand.role != PlayerRole::Two {
            return Err(VerifierError::Input("candidate policies must have role Two".into()));
        }
        let bundle = simulate(spec, &shadow, cand, t0, x0, n_paths, n_steps, seed)?;
        let est = payoff(spec, &bundle, &cand.label())?;
        let margin = est.mean - v0;
        rows.push(ControlRow {
            pass: margin >= -3.0 * est.se,
            label: cand.label(),
            margin,
            payoff: est,
        });
    }
    let all_pass = star_pass && rows.iter().all(|r| r.pass);
    Ok(ControlReport { v0, star, star_gap, star_tol, star_pass, rows, all_pass })
}
