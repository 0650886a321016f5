//! Acceptance gate: one test per shipped guarantee, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them). Every tolerance and
//! runtime budget asserted here is part of the package contract.

use isaacslab::bi_solver::{residual, solve_bi, solve_hjb_control, Grid, Side};
use isaacslab::game_model::{GridConfig, ModelKind, Scenario};
use isaacslab::hamiltonian::{
    hamiltonian_report, isaacs_gap, minimax_table, sample_phase_cloud, table_saddle_check, SADDLE_TOL,
};
use isaacslab::sde_engine::{simulate, FeedbackPolicy, PlayerRole};
use isaacslab::verifier::{
    estimate_game_values, fundamental_decomposition, verify_control, verify_saddle, SaddleInputs,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.cfg"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("loading {name}: {e}"))
}

fn report(id: &str, pass: bool, detail: &str) {
    println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id}: {detail}");
}

/// Closed-form value of the sine-heat benchmark at `(t, x)`.
fn sine_heat_exact(sigma: f64, horizon: f64, t: f64, x: f64) -> f64 {
    (-sigma * sigma * (horizon - t) / 2.0).exp() * x.sin()
}

// ---------------------------------------------------------------------------
// 1. Benchmark solve against the closed form
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_sine_heat_solve_matches_closed_form() {
    let sc = scenario("sine_heat");
    let spec = &sc.spec;
    let grid_cfg = sc.grid.as_ref().unwrap();
    assert_eq!((grid_cfg.nx[0], grid_cfg.nt), (401, 1001));

    let started = Instant::now();
    let grid = Grid::from_config(spec.horizon, grid_cfg).unwrap();
    let field = solve_bi(spec, &grid, Side::Lower).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let mut max_err = 0.0f64;
    let mut coords = [0.0f64];
    for k in 0..grid.nt {
        let t = grid.time(k);
        for node in 0..grid.node_count() {
            if !grid.is_measurement_interior(node) {
                continue;
            }
            grid.coords(node, &mut coords);
            let err = (field.value(k, node) - sine_heat_exact(0.5, 1.0, t, coords[0])).abs();
            if err > max_err {
                max_err = err;
            }
        }
    }
    let spot = field.interp_value(0.0, &[std::f64::consts::FRAC_PI_2]).0;
    let spot_err = (spot - (-0.125f64).exp()).abs();

    let pass = max_err <= 1e-3 && spot_err <= 1e-3 && elapsed <= 5.0;
    report(
        "criterion-01 benchmark-solve",
        pass,
        &format!("max interior error {max_err:.2e} (tol 1e-3), spot error {spot_err:.2e} (tol 1e-3), solve {elapsed:.2}s (budget 5s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. Upper/lower Hamiltonian gap
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_hamiltonian_gap_separable_and_bilinear() {
    let started = Instant::now();

    // Separable-coefficient models: both optimized Hamiltonians coincide.
    let mut worst_separable = 0.0f64;
    for name in ["sine_heat", "regime_switch", "degenerate", "hopf_cole"] {
        let sc = scenario(name);
        let x_radius = sc.grid.as_ref().map(|g| g.x_hi[0]).unwrap_or(2.0);
        let cloud = sample_phase_cloud(&sc.spec, x_radius, 2.0, 1000, 42);
        assert_eq!(cloud.len(), 1000);
        let rep = isaacs_gap(&sc.spec, &cloud).unwrap();
        if rep.max_gap > worst_separable {
            worst_separable = rep.max_gap;
        }
    }

    // Bilinear two-point game: the gap is exactly 2|p| at every sample.
    let sc = scenario("bilinear");
    let cloud = sample_phase_cloud(&sc.spec, 3.0, 2.0, 100, 7);
    assert_eq!(cloud.len(), 100);
    let mut bilinear_exact = true;
    for sample in &cloud {
        let rep = hamiltonian_report(&sc.spec, sample.s, &sample.x, &sample.p).unwrap();
        if rep.gap != 2.0 * sample.p[0].abs() {
            bilinear_exact = false;
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst_separable <= 1e-12 && bilinear_exact && elapsed <= 1.0;
    report(
        "criterion-02 hamiltonian-gap",
        pass,
        &format!("separable max gap {worst_separable:.2e} (tol 1e-12), bilinear gap == 2|p| exactly: {bilinear_exact}, {elapsed:.2}s (budget 1s)"),
    );
}

// ---------------------------------------------------------------------------
// 3. Saddle inequalities <=> zero minimax gap on finite tables
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_table_saddle_iff_zero_gap() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut zero_gap_cases = 0usize;
    let mut positive_gap_cases = 0usize;

    for case in 0..200usize {
        let n1 = rng.gen_range(1..=31);
        let n2 = rng.gen_range(1..=31);
        let mut values = vec![0.0f64; n1 * n2];
        match case % 4 {
            // Plain random table: generically no saddle.
            0 | 2 => {
                for v in values.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            // Separable a_i + b_j: a saddle always exists.
            1 => {
                let a: Vec<f64> = (0..n1).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..n2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for i in 0..n1 {
                    for j in 0..n2 {
                        values[i * n2 + j] = a[i] + b[j];
                    }
                }
            }
            // Random table with a saddle planted at a random cell.
            _ => {
                for v in values.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let i0 = rng.gen_range(0..n1);
                let j0 = rng.gen_range(0..n2);
                let v0: f64 = rng.gen_range(-0.5..0.5);
                for j in 0..n2 {
                    values[i0 * n2 + j] = v0 + rng.gen_range(0.0..1.0);
                }
                for i in 0..n1 {
                    values[i * n2 + j0] = v0 - rng.gen_range(0.0..1.0);
                }
                values[i0 * n2 + j0] = v0;
            }
        }
        let mm = minimax_table(&values, n1, n2);
        let check = table_saddle_check(&values, n1, n2, mm.i_star, mm.j_star, SADDLE_TOL);
        let zero_gap = mm.gap <= SADDLE_TOL;
        assert_eq!(
            check.holds, zero_gap,
            "case {case} ({n1}x{n2}): saddle inequalities {} but gap {:.3e}",
            check.holds, mm.gap
        );
        if zero_gap {
            zero_gap_cases += 1;
        } else {
            positive_gap_cases += 1;
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    // Both sides of the equivalence must actually be exercised.
    let pass = zero_gap_cases >= 50 && positive_gap_cases >= 50 && elapsed <= 10.0;
    report(
        "criterion-03 saddle-equivalence",
        pass,
        &format!("200 tables: {zero_gap_cases} with saddle, {positive_gap_cases} without, equivalence held on all, {elapsed:.2}s (budget 10s)"),
    );
}

// ---------------------------------------------------------------------------
// 4. Monte-Carlo saddle verification on the benchmark game
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_saddle_verification_sine_heat() {
    let sc = scenario("sine_heat");
    let spec = &sc.spec;
    let mc = sc.mc.as_ref().unwrap();
    assert_eq!((mc.paths, mc.steps), (20000, 400));

    let started = Instant::now();
    let grid = Grid::from_config(spec.horizon, sc.grid.as_ref().unwrap()).unwrap();
    let field = Arc::new(solve_bi(spec, &grid, Side::Lower).unwrap());
    let stats = residual(spec, &field, 4096).unwrap();
    let allowance = 5.0 * stats.max_abs;

    let inputs = SaddleInputs {
        spec,
        field: field.clone(),
        t0: mc.t0,
        x0: mc.x0.clone(),
        n_paths: mc.paths,
        n_steps: mc.steps,
        seed: mc.seed,
        deviations1: vec![
            FeedbackPolicy::constant(PlayerRole::One, vec![-1.0]),
            FeedbackPolicy::constant(PlayerRole::One, vec![1.0]),
        ],
        deviations2: vec![
            FeedbackPolicy::constant(PlayerRole::Two, vec![-1.0]),
            FeedbackPolicy::constant(PlayerRole::Two, vec![1.0]),
        ],
        scheme_allowance: allowance,
    };
    let rep = verify_saddle(&inputs).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let exact = (-0.125f64).exp();
    let value_err = (rep.star.mean - exact).abs();
    let value_ok = value_err <= 3.0 * rep.star.se + allowance;
    // Player 1 maximizes: every unilateral deviation must strictly lose.
    let p1_ok = rep.rows1.iter().all(|r| r.diff_mean < -2.0 * r.diff_se);
    // Player 2 minimizes: every unilateral deviation must strictly pay more.
    let p2_ok = rep.rows2.iter().all(|r| r.diff_mean > 2.0 * r.diff_se);

    let pass = value_ok && p1_ok && p2_ok && elapsed <= 30.0;
    report(
        "criterion-04 saddle-verification",
        pass,
        &format!(
            "|J(star,star) - {exact:.5}| = {value_err:.2e} vs 3se+allowance {:.2e}, deviations strict (p1 {p1_ok}, p2 {p2_ok}), {elapsed:.1}s (budget 30s)",
            3.0 * rep.star.se + allowance
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Value of the game over finite policy families
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_game_value_matrix_collapses() {
    let sc = scenario("sine_heat");
    let spec = &sc.spec;
    let mc = sc.mc.as_ref().unwrap();

    let started = Instant::now();
    let grid = Grid::from_config(spec.horizon, sc.grid.as_ref().unwrap()).unwrap();
    let field = Arc::new(solve_bi(spec, &grid, Side::Lower).unwrap());
    let stats = residual(spec, &field, 4096).unwrap();
    let allowance = 5.0 * stats.max_abs;
    let v0 = field.interp_value(mc.t0, &mc.x0).0;

    let family = |role: PlayerRole| -> Vec<FeedbackPolicy> {
        vec![
            FeedbackPolicy::synthesized(role, field.clone()),
            FeedbackPolicy::constant(role, vec![-1.0]),
            FeedbackPolicy::constant(role, vec![0.0]),
            FeedbackPolicy::constant(role, vec![1.0]),
        ]
    };
    let rep = estimate_game_values(
        spec,
        &family(PlayerRole::One),
        &family(PlayerRole::Two),
        mc.t0,
        &mc.x0,
        mc.paths,
        mc.steps,
        mc.seed,
        Some(v0),
        allowance,
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    assert_eq!((rep.labels1.len(), rep.labels2.len()), (4, 4));
    let star_cell = rep.means[0]; // (star, star) sits at row 0, column 0
    let spread = (rep.upper_value - rep.lower_value)
        .abs()
        .max((rep.lower_value - star_cell).abs())
        .max((rep.upper_value - star_cell).abs());
    let pass = spread <= 3.0 * rep.max_se && elapsed <= 120.0;
    report(
        "criterion-05 game-value",
        pass,
        &format!(
            "sup-inf {:.6}, inf-sup {:.6}, J(star,star) {:.6}: spread {spread:.2e} vs 3*maxSE {:.2e}, {elapsed:.1}s (budget 120s)",
            rep.lower_value,
            rep.upper_value,
            star_cell,
            3.0 * rep.max_se
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Pathwise payoff decomposition across the whole gallery
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_decomposition_mean_zero_across_gallery() {
    let started = Instant::now();
    let mut details = Vec::new();
    let mut all_ok = true;

    // Star-pair run on every shipped scenario.
    for name in ["sine_heat", "bilinear", "regime_switch", "hopf_cole", "degenerate"] {
        let sc = scenario(name);
        let spec = &sc.spec;
        let mc = sc.mc.as_ref().unwrap();
        let grid = Grid::from_config(spec.horizon, sc.grid.as_ref().unwrap()).unwrap();
        let field = Arc::new(match spec.kind {
            ModelKind::Game => solve_bi(spec, &grid, Side::Lower).unwrap(),
            ModelKind::Control => solve_hjb_control(spec, &grid).unwrap(),
        });
        let (p1, p2) = match spec.kind {
            ModelKind::Game => (
                FeedbackPolicy::synthesized(PlayerRole::One, field.clone()),
                FeedbackPolicy::synthesized(PlayerRole::Two, field.clone()),
            ),
            ModelKind::Control => (
                FeedbackPolicy::constant(PlayerRole::One, Vec::new()),
                FeedbackPolicy::synthesized(PlayerRole::Two, field.clone()),
            ),
        };
        let bundle = simulate(spec, &p1, &p2, mc.t0, &mc.x0, mc.paths, mc.steps, mc.seed).unwrap();
        let rep = fundamental_decomposition(spec, &field, &bundle).unwrap();
        let ok = rep.r_mean.abs() <= 3.0 * rep.r_se;
        all_ok &= ok;
        details.push(format!("{name} |{:.1e}|<=3*{:.1e}:{}", rep.r_mean, rep.r_se, ok));
    }

    // Suboptimal-control run: the payoff excess over the value must match the
    // accumulated Hamiltonian gap term.
    {
        let sc = scenario("hopf_cole");
        let spec = &sc.spec;
        let mc = sc.mc.as_ref().unwrap();
        let grid = Grid::from_config(spec.horizon, sc.grid.as_ref().unwrap()).unwrap();
        let field = Arc::new(solve_hjb_control(spec, &grid).unwrap());
        let p1 = FeedbackPolicy::constant(PlayerRole::One, Vec::new());
        let p2 = FeedbackPolicy::constant(PlayerRole::Two, vec![0.7]);
        let bundle = simulate(spec, &p1, &p2, mc.t0, &mc.x0, mc.paths, mc.steps, mc.seed).unwrap();
        let rep = fundamental_decomposition(spec, &field, &bundle).unwrap();
        // mean(payoff) - v0 - mean(gap integral) = mean(R); the identity holds
        // within 3 standard errors iff |mean(R)| does.
        let ok = rep.r_mean.abs() <= 3.0 * rep.r_se
            && rep.gap_integral_mean > 3.0 * rep.gap_integral_se;
        all_ok &= ok;
        details.push(format!(
            "hopf_cole-suboptimal |{:.1e}|<=3*{:.1e} and gap-term {:.3e}>0:{}",
            rep.r_mean, rep.r_se, rep.gap_integral_mean, ok
        ));
    }

    let elapsed = started.elapsed().as_secs_f64();
    let pass = all_ok && elapsed <= 60.0;
    report(
        "criterion-06 decomposition",
        pass,
        &format!("{} ({elapsed:.1}s, budget 60s)", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 7. Control verification against the quadrature oracle
// ---------------------------------------------------------------------------

/// Independent oracle for the single-controller benchmark: Simpson quadrature
/// of the log-transformed heat kernel representation
/// `v(0, x) = -sigma^2 * ln E[exp(-g(x + sigma*sqrt(T) Z) / sigma^2)]`.
fn hopf_cole_oracle(x0: f64, sigma: f64, horizon: f64) -> f64 {
    let s2 = sigma * sigma;
    let scale = sigma * horizon.sqrt();
    let f = |y: f64| -> f64 {
        ((x0 + scale * y).cos() / s2).exp() * (-y * y / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    let (a, b, n) = (-10.0f64, 10.0f64, 40001usize); // odd node count
    let h = (b - a) / (n - 1) as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n - 1 {
        sum += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    -s2 * (sum * h / 3.0).ln()
}

#[test]
fn criterion_07_control_verification_matches_oracle() {
    let sc = scenario("hopf_cole");
    let spec = &sc.spec;
    let mc = sc.mc.as_ref().unwrap();

    let started = Instant::now();
    let grid = Grid::from_config(spec.horizon, sc.grid.as_ref().unwrap()).unwrap();
    let field = Arc::new(solve_hjb_control(spec, &grid).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let candidates: Vec<FeedbackPolicy> = (0..3)
        .map(|_| FeedbackPolicy::constant(PlayerRole::Two, vec![rng.gen_range(-2.0..2.0)]))
        .collect();
    let rep = verify_control(
        spec,
        field.clone(),
        &candidates,
        mc.t0,
        &mc.x0,
        mc.paths,
        mc.steps,
        mc.seed,
        2e-3,
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let oracle = hopf_cole_oracle(mc.x0[0], 1.0, 1.0);
    let grid_vs_oracle = (rep.v0 - oracle).abs();
    let star_vs_oracle = (rep.star.mean - oracle).abs();
    let star_ok = star_vs_oracle <= 3.0 * rep.star.se + 2e-3;
    let oracle_ok = grid_vs_oracle <= 2e-3;
    let candidates_ok = rep.rows.iter().all(|r| r.margin > 2.0 * r.payoff.se);

    let pass = star_ok && oracle_ok && candidates_ok && rep.star_pass && elapsed <= 60.0;
    report(
        "criterion-07 control-verification",
        pass,
        &format!(
            "|J(star) - oracle| = {star_vs_oracle:.2e} vs {:.2e}, |v0 - oracle| = {grid_vs_oracle:.2e} (tol 2e-3), 3 random constants all beyond 2se: {candidates_ok}, {elapsed:.1}s (budget 60s)",
            3.0 * rep.star.se + 2e-3
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Spatio-temporal refinement order
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_refinement_reduces_residual_at_second_order() {
    let sc = scenario("sine_heat");
    let spec = &sc.spec;
    let base = sc.grid.as_ref().unwrap();

    // Halve h at each level and scale dt with h^2 (parabolic refinement).
    let levels = [(51usize, 126usize), (101, 501), (201, 2001)];
    let mut max_abs = Vec::new();
    for (nx, nt) in levels {
        let cfg = GridConfig {
            x_lo: base.x_lo.clone(),
            x_hi: base.x_hi.clone(),
            nx: vec![nx],
            nt,
            side: None,
        };
        let grid = Grid::from_config(spec.horizon, &cfg).unwrap();
        let field = solve_bi(spec, &grid, Side::Lower).unwrap();
        max_abs.push(residual(spec, &field, 20000).unwrap().max_abs);
    }
    let r1 = max_abs[0] / max_abs[1];
    let r2 = max_abs[1] / max_abs[2];
    let pass = (3.0..=5.0).contains(&r1) && (3.0..=5.0).contains(&r2);
    report(
        "criterion-08 refinement-order",
        pass,
        &format!(
            "residual {:.2e} -> {:.2e} -> {:.2e}, ratios {r1:.2} and {r2:.2} (required within [3, 5])",
            max_abs[0], max_abs[1], max_abs[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Worker-count determinism of the command-line pipeline
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_csv_outputs_identical_across_worker_counts() {
    let bin = env!("CARGO_BIN_EXE_isaacslab");
    let scenario_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/sine_heat.cfg");
    let tmp = tempfile::tempdir().unwrap();

    let mut dirs = Vec::new();
    for workers in ["1", "4"] {
        let out = tmp.path().join(format!("w{workers}"));
        let status = std::process::Command::new(bin)
            .arg("verify-saddle")
            .arg(&scenario_path)
            .args(["--seed", "7", "--paths", "2000", "--steps", "100", "--workers", workers])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "verify-saddle --workers {workers} exited {status}");
        dirs.push(out);
    }

    let mut identical = true;
    let mut compared = 0usize;
    for name in ["saddle.csv", "saddle_verdict.csv"] {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        let b = std::fs::read(dirs[1].join(name)).unwrap();
        identical &= a == b;
        compared += 1;
    }
    let pass = identical && compared == 2;
    report(
        "criterion-09 determinism",
        pass,
        &format!("verify-saddle with --workers 1 vs 4: {compared} CSVs byte-identical: {identical}"),
    );
}

// ---------------------------------------------------------------------------
// 10. Expression parser: precedence, associativity, error positions,
//     print/re-parse round trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_parser_suite_and_round_trip() {
    use isaacslab::expr::{eval, parse, ParseError};
    use std::collections::HashMap;

    let env: HashMap<String, f64> = [
        ("s", 0.25),
        ("x1", 2.0),
        ("x2", -3.0),
        ("u1_1", 0.5),
        ("u2_1", -0.5),
        ("u_1", 1.5),
        ("p1", 4.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    // (input, expected value) — precedence, associativity, unary minus,
    // function application, variables.
    let value_cases: &[(&str, f64)] = &[
        ("1 + 2 * 3", 7.0),
        ("2 * 3 + 1", 7.0),
        ("(1 + 2) * 3", 9.0),
        ("1 - 2 - 3", -4.0),
        ("1 - (2 - 3)", 2.0),
        ("8 / 4 / 2", 1.0),
        ("8 / (4 / 2)", 4.0),
        ("1 + 2 - 3 + 4", 4.0),
        ("2 ^ 3 ^ 2", 512.0),
        ("(2 ^ 3) ^ 2", 64.0),
        ("2 * 3 ^ 2", 18.0),
        ("2 ^ 3 * 2", 16.0),
        ("-2 ^ 2", 4.0),   // unary minus binds tighter than ^
        ("-(2 ^ 2)", -4.0),
        ("2 ^ -1", 0.5),
        ("-2 * 3", -6.0),
        ("1 - -2", 3.0),
        ("--2", 2.0),
        ("6 / 2 * 3", 9.0),
        ("2 + -3", -1.0),
        ("1e2 + 1", 101.0),
        ("2.5e-1 * 4", 1.0),
        (".5 + .25", 0.75),
        ("sin(0)", 0.0),
        ("cos(0)", 1.0),
        ("exp(0)", 1.0),
        ("log(1)", 0.0),
        ("sqrt(9)", 3.0),
        ("abs(-3.5)", 3.5),
        ("sign(-2)", -1.0),
        ("step(0)", 1.0),
        ("step(-0.001)", 0.0),
        ("min(2, 3)", 2.0),
        ("max(2, 3)", 3.0),
        ("pow(2, 10)", 1024.0),
        ("clamp(5, -1, 1)", 1.0),
        ("clamp(-5, -1, 1)", -1.0),
        ("min(1 + 1, 2 * 3)", 2.0),
        ("abs(-3) + min(1, 2) * max(3, 4)", 7.0),
        ("sin(0) * 100 + cos(0)", 1.0),
        ("x1 * p1", 8.0),
        ("u1_1 - u2_1", 1.0),
        ("s * 4", 1.0),
        ("x1 ^ 2 + x2 ^ 2", 13.0),
        ("u_1 * 2", 3.0),
        ("x1 * -p1", -8.0),
        ("2 * (x1 + x2)", -2.0),
    ];

    // (input, byte offset of the reported error).
    let error_cases: &[(&str, usize)] = &[
        ("1 +", 3),          // operand missing at end of input
        ("(1 + 2", 6),       // unclosed parenthesis
        ("1 + * 2", 4),      // operator where an operand must appear
        (")", 0),            // stray closing parenthesis
        ("1 2", 2),          // trailing token after a full expression
        ("2 ^ ^ 3", 4),      // doubled operator
        ("foo(1)", 0),       // unknown function name
        ("x0", 0),           // state indices are one-based
        ("u1_0", 0),         // control indices are one-based
        ("sin(1, 2)", 0),    // too many arguments
        ("min(1)", 0),       // too few arguments
        ("clamp(1, 2)", 0),  // ternary needs three arguments
        ("min(1 2)", 6),     // missing comma between arguments
        ("@", 0),            // byte that can start no token
        ("1 + $", 4),        // invalid byte after operator
        ("1 % 2", 2),        // '%' is not an operator: trailing-input error
    ];

    let mut failures = Vec::new();
    let mut cases = 0usize;

    for &(text, expected) in value_cases {
        cases += 1;
        match parse(text) {
            Ok(ast) => match eval(&ast, &env) {
                Ok(v) if (v - expected).abs() <= 1e-12 => {}
                Ok(v) => failures.push(format!("`{text}` evaluated to {v}, expected {expected}")),
                Err(e) => failures.push(format!("`{text}` failed to evaluate: {e}")),
            },
            Err(e) => failures.push(format!("`{text}` failed to parse: {e}")),
        }
    }

    for &(text, want_offset) in error_cases {
        cases += 1;
        match parse(text) {
            Ok(_) => failures.push(format!("`{text}` parsed but must be rejected")),
            Err(err) => {
                let offset = match &err {
                    ParseError::Syntax { offset, .. }
                    | ParseError::UnknownIdentifier { offset, .. }
                    | ParseError::Arity { offset, .. } => *offset,
                };
                if offset != want_offset {
                    failures.push(format!("`{text}` reported offset {offset}, expected {want_offset}"));
                }
            }
        }
    }

    let pass = failures.is_empty() && cases >= 50;
    report(
        "criterion-10 parser-suite",
        pass,
        &format!("{cases} precedence/associativity/error-position cases; failures: {:?}", failures),
    );
}

mod round_trip {
    use isaacslab::expr::{parse, Ast, BinOp, Func, Span, Var};
    use proptest::prelude::*;

    fn sp() -> Span {
        Span::new(0, 0)
    }

    fn arb_var() -> impl Strategy<Value = Var> {
        prop_oneof![
            Just(Var::S),
            (0usize..3).prop_map(Var::X),
            (0usize..2).prop_map(Var::U1),
            (0usize..2).prop_map(Var::U2),
            (0usize..2).prop_map(Var::U),
            (0usize..3).prop_map(Var::P),
        ]
    }

    /// The parser only ever produces non-negative literals (a leading minus
    /// becomes a negation node), so generated trees follow the same shape.
    fn arb_leaf() -> impl Strategy<Value = Ast> {
        prop_oneof![
            (0.0f64..1e6).prop_map(|v| Ast::Num(v, sp())),
            (0u32..100).prop_map(|v| Ast::Num(v as f64, sp())),
            arb_var().prop_map(|v| Ast::Var(v, sp())),
        ]
    }

    fn arb_ast() -> impl Strategy<Value = Ast> {
        arb_leaf().prop_recursive(6, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Ast::Neg(Box::new(a), sp())),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Ast::Bin(op, Box::new(a), Box::new(b), sp())),
                (
                    prop_oneof![
                        Just(Func::Sin),
                        Just(Func::Cos),
                        Just(Func::Exp),
                        Just(Func::Log),
                        Just(Func::Abs),
                        Just(Func::Sqrt),
                        Just(Func::Sign),
                        Just(Func::Step)
                    ],
                    inner.clone()
                )
                    .prop_map(|(f, a)| Ast::Call(f, vec![a], sp())),
                (
                    prop_oneof![Just(Func::Min), Just(Func::Max), Just(Func::Pow)],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(f, a, b)| Ast::Call(f, vec![a, b], sp())),
                (inner.clone(), inner.clone(), inner)
                    .prop_map(|(a, b, c)| Ast::Call(Func::Clamp, vec![a, b, c], sp())),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig {
            cases: 1000,
            failure_persistence: None,
            ..ProptestConfig::default()
        })]
        #[test]
        fn criterion_10_print_reparse_round_trip(ast in arb_ast()) {
            let text = ast.to_string();
            let reparsed = parse(&text)
                .unwrap_or_else(|e| panic!("printed form `{text}` failed to parse: {e}"));
            prop_assert!(
                reparsed.structurally_eq(&ast),
                "round trip changed the tree for `{text}`"
            );
        }
    }
}
