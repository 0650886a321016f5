//! Batch entry point: scenario files in, deterministic CSV artifacts out.
//!
//! Every subcommand writes its artifacts into one output directory together
//! with a `manifest.json` listing each CSV with a SHA-256 content hash, the
//! effective seed, the flag overrides and wall-clock timings. CSV cells use
//! `.` decimals, `,` separators, a header row and 17 significant digits, so
//! identical `(config, seed, flags)` runs produce byte-identical files
//! regardless of worker count.
//!
//! Exit codes: `0` success (and every theorem check PASS), `2` at least one
//! check FAIL, `1` usage or configuration error.

use crate::bi_solver::{residual, solve_bi, solve_hjb_control, EquationKind, Grid, Side, SolverError, ValueField};
use crate::game_model::{diagnostics, GridConfig, McConfig, ModelError, ModelKind, SampleCloud, Scenario};
use crate::hamiltonian::{hamiltonian_report, isaacs_gap, sample_phase_cloud};
use crate::sde_engine::{estimate_moments, simulate, EngineError, FeedbackPolicy, PathBundle, PlayerRole};
use crate::verifier::{
    estimate_game_values, fundamental_decomposition, payoff, verify_control, verify_saddle, SaddleInputs,
    VerdictLine, VerifierError,
};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

const TOOL_NAME: &str = "isaacslab";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Parser)]
#[command(name = TOOL_NAME, version, about = "Numerical laboratory for zero-sum stochastic differential games under feedback controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all subcommands. Each has a scenario-file equivalent;
/// a flag overrides the file.
#[derive(Args, Clone, Default)]
struct CommonFlags {
    /// Base RNG seed (overrides [mc] seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Spatial grid nodes per axis, comma-separated (overrides [grid] nx)
    #[arg(long, value_delimiter = ',', value_name = "N[,N]")]
    grid_nx: Option<Vec<usize>>,
    /// Time levels (overrides [grid] nt)
    #[arg(long)]
    grid_nt: Option<usize>,
    /// Monte-Carlo path count (overrides [mc] paths)
    #[arg(long)]
    paths: Option<usize>,
    /// Euler steps per path (overrides [mc] steps)
    #[arg(long)]
    steps: Option<usize>,
    /// Equation side: upper or lower (overrides [grid] side)
    #[arg(long)]
    side: Option<String>,
    /// Worker-thread cap (overrides [mc] workers)
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (overrides [output] dir; env ISAACSLAB_OUT overrides both)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a scenario file, run hypothesis diagnostics, echo canonical form
    Validate {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Solve the dynamic-programming PDE and export value/gradient slices
    Solve {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Sample both optimised Hamiltonians over a random phase cloud
    IsaacsGap {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Simulate closed-loop paths and report moments and payoff
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
        /// Also write the full per-step trajectory CSV
        #[arg(long)]
        dump_paths: bool,
    },
    /// Check the saddle-point property of the synthesized feedback pair
    VerifySaddle {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Estimate the payoff matrix of finite policy families and its value
    GameValue {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Check that the synthesized control attains the value (control models)
    VerifyControl {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Evaluate the pathwise payoff decomposition around the solved value
    Decompose {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
}

/// Run the CLI on `argv` (including the program name) and return the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let (name, scenario, flags, dump_paths) = match cli.command {
        Command::Validate { scenario, flags } => ("validate", scenario, flags, false),
        Command::Solve { scenario, flags } => ("solve", scenario, flags, false),
        Command::IsaacsGap { scenario, flags } => ("isaacs-gap", scenario, flags, false),
        Command::Simulate { scenario, flags, dump_paths } => ("simulate", scenario, flags, dump_paths),
        Command::VerifySaddle { scenario, flags } => ("verify-saddle", scenario, flags, false),
        Command::GameValue { scenario, flags } => ("game-value", scenario, flags, false),
        Command::VerifyControl { scenario, flags } => ("verify-control", scenario, flags, false),
        Command::Decompose { scenario, flags } => ("decompose", scenario, flags, false),
    };
    match execute(name, &scenario, &flags, dump_paths) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

// ---------------------------------------------------------------------------
// Run context: output directory, CSV writing, manifest
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    overrides: serde_json::Value,
    output_dir: String,
    outputs: Vec<OutputEntry>,
    timings_s: BTreeMap<String, f64>,
    /// False when any verification check failed; measurement-only commands
    /// record true, matching their zero exit status.
    pass: bool,
}

/// One CSV cell; numbers are rendered with 17 significant digits so byte
/// identity and numeric identity coincide.
enum Cell {
    U(u64),
    F(f64),
    S(String),
    B(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::U(v) => v.to_string(),
            Cell::F(v) => format!("{v:.16e}"),
            Cell::S(t) => {
                if t.contains(',') || t.contains('"') || t.contains('\n') {
                    format!("\"{}\"", t.replace('"', "\"\""))
                } else {
                    t.clone()
                }
            }
            Cell::B(b) => b.to_string(),
        }
    }
}

struct RunContext {
    subcommand: &'static str,
    scenario_path: PathBuf,
    scenario: Scenario,
    flags: CommonFlags,
    out_dir: PathBuf,
    outputs: Vec<OutputEntry>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl RunContext {
    fn new(subcommand: &'static str, scenario_path: &Path, flags: &CommonFlags) -> Result<RunContext, CliError> {
        let scenario = Scenario::load(scenario_path)?;
        if let Some(side) = &flags.side {
            if Side::parse(side).is_none() {
                return Err(CliError::Config(format!("--side must be `upper` or `lower`, got `{side}`")));
            }
        }
        let out_dir = std::env::var_os("ISAACSLAB_OUT")
            .map(PathBuf::from)
            .or_else(|| flags.out.clone())
            .or_else(|| scenario.output.dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| {
                let stem = scenario_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "scenario".into());
                PathBuf::from("runs").join(format!("{stem}_{subcommand}"))
            });
        std::fs::create_dir_all(&out_dir).map_err(|source| CliError::Io {
            path: out_dir.display().to_string(),
            source,
        })?;
        Ok(RunContext {
            subcommand,
            scenario_path: scenario_path.to_path_buf(),
            scenario,
            flags: flags.clone(),
            out_dir,
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn grid_config(&self) -> Result<GridConfig, CliError> {
        let mut cfg = self
            .scenario
            .grid
            .clone()
            .ok_or_else(|| CliError::Config("scenario has no [grid] section".into()))?;
        if let Some(nx) = &self.flags.grid_nx {
            if nx.len() != self.scenario.spec.d {
                return Err(CliError::Config(format!(
                    "--grid-nx needs {} comma-separated entries",
                    self.scenario.spec.d
                )));
            }
            cfg.nx = nx.clone();
        }
        if let Some(nt) = self.flags.grid_nt {
            cfg.nt = nt;
        }
        if let Some(side) = &self.flags.side {
            cfg.side = Some(side.clone());
        }
        Ok(cfg)
    }

    fn mc_config(&self) -> Result<McConfig, CliError> {
        let mut cfg = self
            .scenario
            .mc
            .clone()
            .ok_or_else(|| CliError::Config("scenario has no [mc] section".into()))?;
        if let Some(seed) = self.flags.seed {
            cfg.seed = seed;
        }
        if let Some(paths) = self.flags.paths {
            cfg.paths = paths;
        }
        if let Some(steps) = self.flags.steps {
            cfg.steps = steps;
        }
        if let Some(workers) = self.flags.workers {
            cfg.workers = Some(workers);
        }
        Ok(cfg)
    }

    fn side(&self, grid: &GridConfig) -> Result<Side, CliError> {
        if self.scenario.spec.kind == ModelKind::Control {
            return Ok(Side::Lower);
        }
        match grid.side.as_deref() {
            None => Ok(Side::Lower),
            Some(text) => {
                Side::parse(text).ok_or_else(|| CliError::Config(format!("side must be `upper` or `lower`, got `{text}`")))
            }
        }
    }

    fn time<R>(&mut self, key: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let out = f();
        self.timings.insert(key.to_string(), t.elapsed().as_secs_f64());
        out
    }

    fn write_file(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, content).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut hasher = Sha256::new();
        hasher.update(content.as_bytes());
        let digest = hasher.finalize();
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect::<String>();
        self.outputs.push(OutputEntry { file: name.to_string(), sha256 });
        Ok(())
    }

    fn write_csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<Cell>>) -> Result<(), CliError> {
        let mut text = String::with_capacity(rows.len() * 32 + 64);
        text.push_str(&header.join(","));
        text.push('\n');
        for row in rows {
            debug_assert_eq!(row.len(), header.len(), "csv row width mismatch in {name}");
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        self.write_file(name, &text)
    }

    fn finish(mut self, seed: Option<u64>, pass: Option<bool>) -> Result<bool, CliError> {
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let mut overrides = serde_json::Map::new();
        if let Some(v) = self.flags.seed {
            overrides.insert("seed".into(), v.into());
        }
        if let Some(v) = &self.flags.grid_nx {
            overrides.insert("grid_nx".into(), v.clone().into());
        }
        if let Some(v) = self.flags.grid_nt {
            overrides.insert("grid_nt".into(), v.into());
        }
        if let Some(v) = self.flags.paths {
            overrides.insert("paths".into(), v.into());
        }
        if let Some(v) = self.flags.steps {
            overrides.insert("steps".into(), v.into());
        }
        if let Some(v) = &self.flags.side {
            overrides.insert("side".into(), v.clone().into());
        }
        if let Some(v) = self.flags.workers {
            overrides.insert("workers".into(), v.into());
        }
        if let Some(v) = &self.flags.out {
            overrides.insert("out".into(), v.display().to_string().into());
        }
        let mut outputs = std::mem::take(&mut self.outputs);
        outputs.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = RunManifest {
            tool: TOOL_NAME,
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand.to_string(),
            scenario: self.scenario_path.display().to_string(),
            seed,
            overrides: serde_json::Value::Object(overrides),
            output_dir: self.out_dir.display().to_string(),
            outputs,
            timings_s: self.timings.clone(),
            pass: pass.unwrap_or(true),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Config(format!("manifest serialization failed: {e}")))?;
        let path = self.out_dir.join("manifest.json");
        std::fs::write(&path, text).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(pass.unwrap_or(true))
    }
}

fn with_pool<R>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError>
where
    R: Send,
{
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn print_verdicts(lines: &[VerdictLine]) {
    for line in lines {
        println!(
            "{}  {}  value={:.6e} threshold={:.6e}",
            if line.pass { "PASS" } else { "FAIL" },
            line.item,
            line.value,
            line.threshold
        );
    }
}

fn verdict_rows(lines: &[VerdictLine]) -> Vec<Vec<Cell>> {
    lines
        .iter()
        .map(|l| {
            vec![
                Cell::S(l.item.clone()),
                Cell::F(l.value),
                Cell::F(l.threshold),
                Cell::B(l.pass),
            ]
        })
        .collect()
}

/// Solve the scenario's equation on its (possibly overridden) grid.
fn solve_field(spec: &crate::game_model::GameSpec, grid_cfg: &GridConfig, side: Side) -> Result<ValueField, CliError> {
    let grid = Grid::from_config(spec.horizon, grid_cfg)?;
    let field = match spec.kind {
        ModelKind::Control => solve_hjb_control(spec, &grid)?,
        ModelKind::Game => solve_bi(spec, &grid, side)?,
    };
    Ok(field)
}

const RESIDUAL_SAMPLES: usize = 4096;

fn equation_file_label(kind: EquationKind) -> &'static str {
    match kind {
        EquationKind::BiUpper => "upper",
        EquationKind::BiLower => "lower",
        EquationKind::HjbControl => "control",
    }
}

/// Parse a policy selector string: `star`, `const v1 v2 ...`, or
/// `expr e1; e2; ...`.
fn parse_policy_text(
    ctx: &RunContext,
    role: PlayerRole,
    text: &str,
    field: Option<&Arc<ValueField>>,
) -> Result<FeedbackPolicy, CliError> {
    Ok(FeedbackPolicy::from_text(&ctx.scenario.spec, role, text, field)?)
}

fn policy_texts(mc: &McConfig) -> (String, String) {
    (
        mc.policy1.clone().unwrap_or_else(|| "star".into()),
        mc.policy2.clone().unwrap_or_else(|| "star".into()),
    )
}

fn control_header_names(spec: &crate::game_model::GameSpec) -> (Vec<String>, Vec<String>) {
    let u1: Vec<String> = (1..=spec.u1.dim()).map(|j| format!("u1_{j}")).collect();
    let u2: Vec<String> = match spec.kind {
        ModelKind::Game => (1..=spec.u2.dim()).map(|j| format!("u2_{j}")).collect(),
        ModelKind::Control => (1..=spec.u2.dim()).map(|j| format!("u_{j}")).collect(),
    };
    (u1, u2)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn execute(name: &'static str, scenario_path: &Path, flags: &CommonFlags, dump_paths: bool) -> Result<bool, CliError> {
    let ctx = RunContext::new(name, scenario_path, flags)?;
    match name {
        "validate" => cmd_validate(ctx),
        "solve" => cmd_solve(ctx),
        "isaacs-gap" => cmd_isaacs_gap(ctx),
        "simulate" => cmd_simulate(ctx, dump_paths),
        "verify-saddle" => cmd_verify_saddle(ctx),
        "game-value" => cmd_game_value(ctx),
        "verify-control" => cmd_verify_control(ctx),
        "decompose" => cmd_decompose(ctx),
        _ => unreachable!("subcommand dispatch"),
    }
}

fn cmd_validate(mut ctx: RunContext) -> Result<bool, CliError> {
    let echo = ctx.scenario.canonical_echo();
    print!("{echo}");
    ctx.write_file("canonical.cfg", &echo)?;

    let spec = ctx.scenario.spec.clone();
    let radius = ctx
        .scenario
        .grid
        .as_ref()
        .map(|g| {
            g.x_lo
                .iter()
                .chain(&g.x_hi)
                .fold(0.0f64, |acc, v| acc.max(v.abs()))
        })
        .unwrap_or(2.0);
    let seed = ctx.flags.seed.or(ctx.scenario.mc.as_ref().map(|m| m.seed)).unwrap_or(1);
    let cloud = SampleCloud::generate(&spec, radius, 512, seed);
    let report = diagnostics(&spec, &cloud)?;
    let g = &report.growth;
    let n = &report.novikov;
    ctx.write_csv(
        "diagnostics.csv",
        &[
            "k_hat",
            "k_hat_doubled_radius",
            "unbounded_suspicion",
            "c_hat",
            "max_condition",
            "kernel_bound",
            "degenerate",
            "samples",
        ],
        vec![vec![
            Cell::F(g.k_hat),
            Cell::F(g.k_hat_doubled_radius),
            Cell::B(g.unbounded_suspicion),
            Cell::F(n.c_hat),
            Cell::F(n.max_condition),
            match n.sigma_inv_f1_bound {
                Some(b) => Cell::F(b),
                None => Cell::S(String::new()),
            },
            Cell::B(n.degenerate),
            Cell::U(g.samples as u64),
        ]],
    )?;
    println!(
        "diagnostics: k_hat={:.3e} c_hat={:.3e} degenerate={} unbounded_suspicion={}",
        g.k_hat, n.c_hat, n.degenerate, g.unbounded_suspicion
    );
    ctx.finish(Some(seed), None)
}

fn cmd_solve(mut ctx: RunContext) -> Result<bool, CliError> {
    let grid_cfg = ctx.grid_config()?;
    let side = ctx.side(&grid_cfg)?;
    let spec = ctx.scenario.spec.clone();
    let workers = ctx.flags.workers.or(ctx.scenario.mc.as_ref().and_then(|m| m.workers));
    let field = {
        let spec_ref = &spec;
        with_pool(workers, move || solve_field(spec_ref, &grid_cfg, side))??
    };
    ctx.timings.insert("solve".into(), ctx.started.elapsed().as_secs_f64());
    let stats = residual(&spec, &field, RESIDUAL_SAMPLES)?;

    let grid = &field.grid;
    let nn = grid.node_count();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=grid.d).map(|i| format!("x{i}")));
    header.push("v".into());
    header.extend((1..=grid.d).map(|i| format!("dv_dx{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();

    let mut levels: Vec<usize> = (0..5).map(|q| q * (grid.nt - 1) / 4).collect();
    levels.dedup();
    let mut rows = Vec::with_capacity(levels.len() * nn);
    let mut coords = vec![0.0; grid.d];
    for &k in &levels {
        let t = grid.time(k);
        for node in 0..nn {
            grid.coords(node, &mut coords);
            let mut row = Vec::with_capacity(header.len());
            row.push(Cell::F(t));
            row.extend(coords.iter().map(|&c| Cell::F(c)));
            row.push(Cell::F(field.value(k, node)));
            row.extend(field.gradient(k, node).iter().map(|&g| Cell::F(g)));
            rows.push(row);
        }
    }
    let label = equation_file_label(field.equation);
    ctx.write_csv(&format!("value_{label}.csv"), &header_refs, rows)?;
    ctx.write_csv(
        "residual.csv",
        &["max_abs", "rms", "samples", "argmax_level", "argmax_node"],
        vec![vec![
            Cell::F(stats.max_abs),
            Cell::F(stats.rms),
            Cell::U(stats.samples as u64),
            Cell::U(stats.argmax.0 as u64),
            Cell::U(stats.argmax.1 as u64),
        ]],
    )?;
    println!(
        "solved {} ({} nodes x {} levels): residual max {:.3e}, rms {:.3e}",
        field.equation.label(),
        nn,
        grid.nt,
        stats.max_abs,
        stats.rms
    );

    if let Some(mc) = ctx.scenario.mc.clone() {
        let (v, clamped) = field.interp_value(mc.t0, &mc.x0);
        let mut grad = vec![0.0; grid.d];
        field.interp_gradient_into(mc.t0, &mc.x0, &mut grad);
        let mut header: Vec<String> = vec!["t0".into()];
        header.extend((1..=grid.d).map(|i| format!("x0_{i}")));
        header.push("v".into());
        header.extend((1..=grid.d).map(|i| format!("dv_dx{i}")));
        header.push("clamped".into());
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut row = vec![Cell::F(mc.t0)];
        row.extend(mc.x0.iter().map(|&c| Cell::F(c)));
        row.push(Cell::F(v));
        row.extend(grad.iter().map(|&g| Cell::F(g)));
        row.push(Cell::B(clamped));
        ctx.write_csv("spot.csv", &header_refs, vec![row])?;
        println!("v({}, {:?}) = {:.10}", mc.t0, mc.x0, v);
    }
    ctx.finish(None, None)
}

fn cmd_isaacs_gap(mut ctx: RunContext) -> Result<bool, CliError> {
    let spec = ctx.scenario.spec.clone();
    let seed = ctx.flags.seed.or(ctx.scenario.mc.as_ref().map(|m| m.seed)).unwrap_or(1);
    let x_radius = ctx
        .scenario
        .grid
        .as_ref()
        .map(|g| g.x_lo.iter().chain(&g.x_hi).fold(0.0f64, |acc, v| acc.max(v.abs())))
        .unwrap_or(2.0);
    const P_RADIUS: f64 = 2.0;
    const N_SAMPLES: usize = 1000;
    let cloud = sample_phase_cloud(&spec, x_radius, P_RADIUS, N_SAMPLES, seed);

    let mut header: Vec<String> = vec!["s".into()];
    header.extend((1..=spec.d).map(|i| format!("x{i}")));
    header.extend((1..=spec.d).map(|i| format!("p{i}")));
    header.extend(["h_lower".into(), "h_upper".into(), "gap".into()]);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(cloud.len());
    for sample in &cloud {
        let rep = hamiltonian_report(&spec, sample.s, &sample.x, &sample.p)?;
        let mut row = vec![Cell::F(rep.s)];
        row.extend(rep.x.iter().map(|&v| Cell::F(v)));
        row.extend(rep.p.iter().map(|&v| Cell::F(v)));
        row.push(Cell::F(rep.h_lower));
        row.push(Cell::F(rep.h_upper));
        row.push(Cell::F(rep.gap));
        rows.push(row);
    }
    ctx.write_csv("gap.csv", &header_refs, rows)?;

    let report = isaacs_gap(&spec, &cloud)?;
    ctx.write_csv(
        "gap_summary.csv",
        &["max_gap", "mean_gap", "saddle_fraction", "samples"],
        vec![vec![
            Cell::F(report.max_gap),
            Cell::F(report.mean_gap),
            Cell::F(report.saddle_fraction),
            Cell::U(report.samples as u64),
        ]],
    )?;
    println!(
        "isaacs gap over {} samples: max {:.3e}, mean {:.3e}, saddle fraction {:.3}",
        report.samples, report.max_gap, report.mean_gap, report.saddle_fraction
    );
    ctx.finish(Some(seed), None)
}

fn cmd_simulate(mut ctx: RunContext, dump_flag: bool) -> Result<bool, CliError> {
    let mc = ctx.mc_config()?;
    let spec = ctx.scenario.spec.clone();
    let (t1, t2) = policy_texts(&mc);
    let needs_field = (t1.trim() == "star" && spec.u1.dim() > 0) || t2.trim() == "star";
    let field = if needs_field {
        let grid_cfg = ctx.grid_config()?;
        let side = ctx.side(&grid_cfg)?;
        let f = ctx.time("solve", || solve_field(&spec, &grid_cfg, side));
        Some(Arc::new(f?))
    } else {
        None
    };
    let policy1 = parse_policy_text(&ctx, PlayerRole::One, &t1, field.as_ref())?;
    let policy2 = parse_policy_text(&ctx, PlayerRole::Two, &t2, field.as_ref())?;

    let bundle = {
        let spec_ref = &spec;
        let (p1, p2) = (&policy1, &policy2);
        let (t0, x0, paths, steps, seed) = (mc.t0, mc.x0.clone(), mc.paths, mc.steps, mc.seed);
        ctx.time("mc", move || {
            with_pool(mc.workers, move || simulate(spec_ref, p1, p2, t0, &x0, paths, steps, seed))
        })??
    };

    ctx.write_csv(
        "summary.csv",
        &[
            "policy1",
            "policy2",
            "n_paths",
            "n_steps",
            "dt",
            "n_failures",
            "grad_clamped_fraction",
            "control_clamped_fraction",
            "box_exit_flagged",
        ],
        vec![vec![
            Cell::S(policy1.label()),
            Cell::S(policy2.label()),
            Cell::U(bundle.n_paths as u64),
            Cell::U(bundle.n_steps as u64),
            Cell::F(bundle.dt),
            Cell::U(bundle.failures.len() as u64),
            Cell::F(bundle.grad_clamped_fraction),
            Cell::F(bundle.control_clamped_fraction),
            Cell::B(bundle.box_exit_flagged()),
        ]],
    )?;

    if bundle.is_failed() {
        println!(
            "bundle FAILED: {} paths hit non-finite states (first at path {}, step {})",
            bundle.failures.len(),
            bundle.failures[0].0,
            bundle.failures[0].1
        );
    } else {
        let mut rows = Vec::new();
        for p in [2u32, 4] {
            let m = estimate_moments(&bundle, p)?;
            rows.push(vec![Cell::U(p as u64), Cell::F(m.mean), Cell::F(m.se)]);
        }
        ctx.write_csv("moments.csv", &["order", "mean", "se"], rows)?;
    }

    let est = payoff(&spec, &bundle, &format!("{}|{}", policy1.label(), policy2.label()))?;
    ctx.write_csv(
        "payoff.csv",
        &[
            "label",
            "n_paths",
            "n_used",
            "running_mean",
            "terminal_mean",
            "mean",
            "se",
            "non_finite_fraction",
            "ill_defined",
        ],
        vec![vec![
            Cell::S(est.label.clone()),
            Cell::U(est.n_paths as u64),
            Cell::U(est.n_used as u64),
            Cell::F(est.running_mean),
            Cell::F(est.terminal_mean),
            Cell::F(est.mean),
            Cell::F(est.se),
            Cell::F(est.non_finite_fraction),
            Cell::B(est.ill_defined),
        ]],
    )?;
    println!(
        "payoff J = {:.6e} (se {:.2e}, {} of {} paths){}",
        est.mean,
        est.se,
        est.n_used,
        est.n_paths,
        if est.ill_defined { " [ILL-DEFINED]" } else { "" }
    );

    if dump_flag || ctx.scenario.output.dump_paths {
        write_path_dump(&mut ctx, &spec, &bundle)?;
    }
    ctx.finish(Some(mc.seed), None)
}

fn write_path_dump(ctx: &mut RunContext, spec: &crate::game_model::GameSpec, bundle: &PathBundle) -> Result<(), CliError> {
    let (u1_names, u2_names) = control_header_names(spec);
    let mut header: Vec<String> = vec!["path".into(), "step".into(), "s".into()];
    header.extend((1..=bundle.d).map(|i| format!("y{i}")));
    header.extend(u1_names);
    header.extend(u2_names);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(bundle.n_paths * (bundle.n_steps + 1));
    for path in 0..bundle.n_paths {
        for step in 0..=bundle.n_steps {
            let mut row = Vec::with_capacity(header_refs.len());
            row.push(Cell::U(path as u64));
            row.push(Cell::U(step as u64));
            row.push(Cell::F(bundle.time(step)));
            row.extend(bundle.y_at(path, step).iter().map(|&v| Cell::F(v)));
            // Controls act on [s_k, s_{k+1}); the terminal row repeats the
            // final applied control to keep the table rectangular.
            let k = step.min(bundle.n_steps - 1);
            row.extend(bundle.u1_at(path, k).iter().map(|&v| Cell::F(v)));
            row.extend(bundle.u2_at(path, k).iter().map(|&v| Cell::F(v)));
            rows.push(row);
        }
    }
    ctx.write_csv("paths.csv", &header_refs, rows)
}

fn cmd_verify_saddle(mut ctx: RunContext) -> Result<bool, CliError> {
    if ctx.scenario.spec.kind != ModelKind::Game {
        return Err(CliError::Config(
            "verify-saddle applies to two-player models; use verify-control for kind = \"control\"".into(),
        ));
    }
    let grid_cfg = ctx.grid_config()?;
    let side = ctx.side(&grid_cfg)?;
    let mc = ctx.mc_config()?;
    let spec = ctx.scenario.spec.clone();
    let field = Arc::new(ctx.time("solve", || solve_field(&spec, &grid_cfg, side))?);
    let stats = residual(&spec, &field, RESIDUAL_SAMPLES)?;
    let allowance = 5.0 * stats.max_abs;

    let corner = |set: &crate::game_model::ControlSet, hi: bool| -> Vec<f64> {
        if hi {
            set.hi().to_vec()
        } else {
            set.lo().to_vec()
        }
    };
    let inputs = SaddleInputs {
        spec: &spec,
        field: field.clone(),
        t0: mc.t0,
        x0: mc.x0.clone(),
        n_paths: mc.paths,
        n_steps: mc.steps,
        seed: mc.seed,
        deviations1: vec![
            FeedbackPolicy::constant(PlayerRole::One, corner(&spec.u1, false)),
            FeedbackPolicy::constant(PlayerRole::One, corner(&spec.u1, true)),
        ],
        deviations2: vec![
            FeedbackPolicy::constant(PlayerRole::Two, corner(&spec.u2, false)),
            FeedbackPolicy::constant(PlayerRole::Two, corner(&spec.u2, true)),
        ],
        scheme_allowance: allowance,
    };
    let report = {
        let inputs_ref = &inputs;
        ctx.time("mc", move || with_pool(mc.workers, move || verify_saddle(inputs_ref)))??
    };

    let mut rows = vec![vec![
        Cell::S("star".into()),
        Cell::S(report.star.label.clone()),
        Cell::F(report.star.mean),
        Cell::F(report.star.se),
        Cell::U(report.star.n_used as u64),
        Cell::F(0.0),
        Cell::F(0.0),
        Cell::U(report.star.n_paths as u64),
        Cell::B(true),
    ]];
    for (scope, set) in [("player1", &report.rows1), ("player2", &report.rows2)] {
        for row in set.iter() {
            rows.push(vec![
                Cell::S(scope.into()),
                Cell::S(row.label.clone()),
                Cell::F(row.payoff.mean),
                Cell::F(row.payoff.se),
                Cell::U(row.payoff.n_used as u64),
                Cell::F(row.diff_mean),
                Cell::F(row.diff_se),
                Cell::U(row.n_pairs as u64),
                Cell::B(row.pass),
            ]);
        }
    }
    ctx.write_csv(
        "saddle.csv",
        &["scope", "label", "mean", "se", "n_used", "diff_mean", "diff_se", "n_pairs", "pass"],
        rows,
    )?;
    let verdicts = report.verdicts();
    ctx.write_csv("saddle_verdict.csv", &["item", "value", "threshold", "pass"], verdict_rows(&verdicts))?;
    println!(
        "J(star, star) = {:.6e} (se {:.2e}); v(t0, x0) = {:.6e}; allowance {:.2e}",
        report.star.mean, report.star.se, report.v0, allowance
    );
    print_verdicts(&verdicts);
    let pass = report.all_pass;
    ctx.finish(Some(mc.seed), Some(pass))
}

fn cmd_game_value(mut ctx: RunContext) -> Result<bool, CliError> {
    if ctx.scenario.spec.kind != ModelKind::Game {
        return Err(CliError::Config("game-value applies to two-player models".into()));
    }
    let grid_cfg = ctx.grid_config()?;
    let side = ctx.side(&grid_cfg)?;
    let mc = ctx.mc_config()?;
    let spec = ctx.scenario.spec.clone();
    let field = Arc::new(ctx.time("solve", || solve_field(&spec, &grid_cfg, side))?);
    let stats = residual(&spec, &field, RESIDUAL_SAMPLES)?;
    let allowance = 5.0 * stats.max_abs;
    let v0 = field.interp_value(mc.t0, &mc.x0).0;

    // Family per player: the synthesized policy plus constants at the low
    // corner, midpoint and high corner of the control box.
    let family = |role: PlayerRole| -> Vec<FeedbackPolicy> {
        let set = match role {
            PlayerRole::One => &spec.u1,
            PlayerRole::Two => &spec.u2,
        };
        let mid: Vec<f64> = set.lo().iter().zip(set.hi()).map(|(a, b)| (a + b) / 2.0).collect();
        vec![
            FeedbackPolicy::synthesized(role, field.clone()),
            FeedbackPolicy::constant(role, set.lo().to_vec()),
            FeedbackPolicy::constant(role, mid),
            FeedbackPolicy::constant(role, set.hi().to_vec()),
        ]
    };
    let family1 = family(PlayerRole::One);
    let family2 = family(PlayerRole::Two);

    let report = {
        let (spec_ref, f1, f2) = (&spec, &family1, &family2);
        let (t0, x0, paths, steps, seed) = (mc.t0, mc.x0.clone(), mc.paths, mc.steps, mc.seed);
        ctx.time("mc", move || {
            with_pool(mc.workers, move || {
                estimate_game_values(spec_ref, f1, f2, t0, &x0, paths, steps, seed, Some(v0), allowance)
            })
        })??
    };

    let n2 = report.labels2.len();
    let mut header: Vec<String> = vec!["policy1".into()];
    header.extend(report.labels2.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let matrix_rows = |values: &[f64]| -> Vec<Vec<Cell>> {
        report
            .labels1
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let mut row = vec![Cell::S(label.clone())];
                row.extend((0..n2).map(|j| Cell::F(values[i * n2 + j])));
                row
            })
            .collect()
    };
    ctx.write_csv("matrix_mean.csv", &header_refs, matrix_rows(&report.means))?;
    ctx.write_csv("matrix_se.csv", &header_refs, matrix_rows(&report.ses))?;
    ctx.write_csv(
        "value.csv",
        &["lower_value", "upper_value", "i_star", "j_star", "max_se", "v0", "allowance"],
        vec![vec![
            Cell::F(report.lower_value),
            Cell::F(report.upper_value),
            Cell::U(report.i_star as u64),
            Cell::U(report.j_star as u64),
            Cell::F(report.max_se),
            Cell::F(v0),
            Cell::F(allowance),
        ]],
    )?;
    let verdicts = report.verdicts();
    ctx.write_csv("value_verdict.csv", &["item", "value", "threshold", "pass"], verdict_rows(&verdicts))?;
    println!(
        "sup-inf = {:.6e}, inf-sup = {:.6e}, star cell = ({}, {}), v0 = {:.6e}",
        report.lower_value, report.upper_value, report.i_star, report.j_star, v0
    );
    print_verdicts(&verdicts);
    let pass = verdicts.iter().all(|v| v.pass);
    ctx.finish(Some(mc.seed), Some(pass))
}

fn cmd_verify_control(mut ctx: RunContext) -> Result<bool, CliError> {
    if ctx.scenario.spec.kind != ModelKind::Control {
        return Err(CliError::Config("verify-control requires kind = \"control\"".into()));
    }
    let grid_cfg = ctx.grid_config()?;
    let mc = ctx.mc_config()?;
    let spec = ctx.scenario.spec.clone();
    let field = Arc::new(ctx.time("solve", || solve_field(&spec, &grid_cfg, Side::Lower))?);
    let stats = residual(&spec, &field, RESIDUAL_SAMPLES)?;
    let star_tol = 5.0 * stats.max_abs;

    // Three random constant candidates drawn uniformly from the control box.
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let candidates: Vec<FeedbackPolicy> = (0..3)
        .map(|_| {
            let u: Vec<f64> = spec
                .u2
                .lo()
                .iter()
                .zip(spec.u2.hi())
                .map(|(lo, hi)| lo + rng.gen::<f64>() * (hi - lo))
                .collect();
            FeedbackPolicy::constant(PlayerRole::Two, u)
        })
        .collect();

    let report = {
        let (spec_ref, field_ref, cands) = (&spec, field.clone(), &candidates);
        let (t0, x0, paths, steps, seed) = (mc.t0, mc.x0.clone(), mc.paths, mc.steps, mc.seed);
        ctx.time("mc", move || {
            with_pool(mc.workers, move || {
                verify_control(spec_ref, field_ref, cands, t0, &x0, paths, steps, seed, star_tol)
            })
        })??
    };

    let mut rows = vec![vec![
        Cell::S("star".into()),
        Cell::F(report.star.mean),
        Cell::F(report.star.se),
        Cell::U(report.star.n_used as u64),
        Cell::F(report.star.mean - report.v0),
        Cell::B(report.star_pass),
    ]];
    for row in &report.rows {
        rows.push(vec![
            Cell::S(row.label.clone()),
            Cell::F(row.payoff.mean),
            Cell::F(row.payoff.se),
            Cell::U(row.payoff.n_used as u64),
            Cell::F(row.margin),
            Cell::B(row.pass),
        ]);
    }
    ctx.write_csv("control.csv", &["label", "mean", "se", "n_used", "margin_vs_value", "pass"], rows)?;
    let verdicts = report.verdicts();
    ctx.write_csv("control_verdict.csv", &["item", "value", "threshold", "pass"], verdict_rows(&verdicts))?;
    println!(
        "J(star) = {:.6e} (se {:.2e}); v(t0, x0) = {:.6e}; tol {:.2e}",
        report.star.mean, report.star.se, report.v0, star_tol
    );
    print_verdicts(&verdicts);
    let pass = report.all_pass;
    ctx.finish(Some(mc.seed), Some(pass))
}

fn cmd_decompose(mut ctx: RunContext) -> Result<bool, CliError> {
    let grid_cfg = ctx.grid_config()?;
    let side = ctx.side(&grid_cfg)?;
    let mc = ctx.mc_config()?;
    let spec = ctx.scenario.spec.clone();
    let field = Arc::new(ctx.time("solve", || solve_field(&spec, &grid_cfg, side))?);
    let (t1, t2) = policy_texts(&mc);
    let policy1 = parse_policy_text(&ctx, PlayerRole::One, &t1, Some(&field))?;
    let policy2 = parse_policy_text(&ctx, PlayerRole::Two, &t2, Some(&field))?;

    let report = {
        let (spec_ref, field_ref) = (&spec, field.clone());
        let (p1, p2) = (&policy1, &policy2);
        let (t0, x0, paths, steps, seed) = (mc.t0, mc.x0.clone(), mc.paths, mc.steps, mc.seed);
        ctx.time("mc", move || {
            with_pool(mc.workers, move || -> Result<_, CliError> {
                let bundle = simulate(spec_ref, p1, p2, t0, &x0, paths, steps, seed)?;
                Ok(fundamental_decomposition(spec_ref, &field_ref, &bundle)?)
            })
        })??
    };

    let rows: Vec<Vec<Cell>> = (0..report.n_paths)
        .map(|i| {
            vec![
                Cell::U(i as u64),
                Cell::F(report.payoffs[i]),
                Cell::F(report.gap_integral[i]),
                Cell::F(report.martingale[i]),
                Cell::F(report.r[i]),
            ]
        })
        .collect();
    ctx.write_csv("residuals.csv", &["path", "payoff", "gap_integral", "martingale", "r"], rows)?;

    // Histogram of the finite residuals, 30 uniform bins.
    let finite: Vec<f64> = report.r.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bins = 30usize;
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0u64; bins];
        for &v in &finite {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let rows: Vec<Vec<Cell>> = (0..bins)
            .map(|b| {
                vec![
                    Cell::F(lo + width * b as f64),
                    Cell::F(lo + width * (b + 1) as f64),
                    Cell::U(counts[b]),
                ]
            })
            .collect();
        ctx.write_csv("histogram.csv", &["bin_lo", "bin_hi", "count"], rows)?;
    }

    ctx.write_csv(
        "decompose_summary.csv",
        &["n_paths", "n_used", "v0", "r_mean", "r_se", "gap_integral_mean", "gap_integral_se", "martingale_corr", "payoff_mean", "payoff_se"],
        vec![vec![
            Cell::U(report.n_paths as u64),
            Cell::U(report.n_used as u64),
            Cell::F(report.v0),
            Cell::F(report.r_mean),
            Cell::F(report.r_se),
            Cell::F(report.gap_integral_mean),
            Cell::F(report.gap_integral_se),
            Cell::F(report.martingale_corr),
            Cell::F(report.payoff.mean),
            Cell::F(report.payoff.se),
        ]],
    )?;
    let verdicts = report.verdicts();
    ctx.write_csv("decompose_verdict.csv", &["item", "value", "threshold", "pass"], verdict_rows(&verdicts))?;
    println!(
        "decomposition over {} paths: mean(R) = {:.4e} (se {:.2e}), corr = {:.4}",
        report.n_used, report.r_mean, report.r_se, report.martingale_corr
    );
    print_verdicts(&verdicts);
    let pass = verdicts.iter().all(|v| v.pass);
    ctx.finish(Some(mc.seed), Some(pass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn small_sine_heat(dir: &Path, extra_mc: &str) -> PathBuf {
        let text = format!(
            r#"
[model]
d = 1
m = 1
T = 1.0

[dynamics]
b = "0"
f1 = "u1_1 - u2_1"
sigma = "0.5"

[cost]
l = "u2_1^2/2 - u1_1^2/2"
g = "sin(x1)"

[controls.u1]
lo = -1.0
hi = 1.0
points = 21

[controls.u2]
lo = -1.0
hi = 1.0
points = 21

[grid]
x_lo = -6.283185307179586
x_hi = 6.283185307179586
nx = 161
nt = 501

[mc]
x0 = 1.5707963267948966
paths = 400
steps = 80
seed = 7
{extra_mc}
"#
        );
        let path = dir.join("scenario.cfg");
        fs::write(&path, text).unwrap();
        path
    }

    fn args(items: &[&str]) -> Vec<OsString> {
        std::iter::once("isaacslab")
            .chain(items.iter().copied())
            .map(OsString::from)
            .collect()
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run(args(&["no-such-command"])), 1);
        assert_eq!(run(args(&["solve"])), 1); // missing scenario
        assert_eq!(run(args(&["--help"])), 0);
    }

    #[test]
    fn missing_scenario_file_is_a_config_error() {
        let code = run(args(&["validate", "/nonexistent/nowhere.cfg"]));
        assert_eq!(code, 1);
    }

    #[test]
    fn validate_writes_echo_diagnostics_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "");
        let out = dir.path().join("out");
        let code = run(args(&["validate", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, 0);
        let echo = fs::read_to_string(out.join("canonical.cfg")).unwrap();
        assert!(echo.contains("[model]"));
        assert!(echo.contains("kind = \"game\""));
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["subcommand"], "validate");
        let listed: Vec<&str> = manifest["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["file"].as_str().unwrap())
            .collect();
        assert_eq!(listed, vec!["canonical.cfg", "diagnostics.csv"]);
        for entry in manifest["outputs"].as_array().unwrap() {
            assert_eq!(entry["sha256"].as_str().unwrap().len(), 64);
        }
    }

    #[test]
    fn solve_emits_value_slices_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "");
        let out1 = dir.path().join("a");
        let out2 = dir.path().join("b");
        for out in [&out1, &out2] {
            let code = run(args(&["solve", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]));
            assert_eq!(code, 0);
        }
        let a = fs::read(out1.join("value_lower.csv")).unwrap();
        let b = fs::read(out2.join("value_lower.csv")).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,v,dv_dx1");
        // 5 time slices x 161 nodes.
        assert_eq!(text.lines().count() - 1, 5 * 161);
        assert!(out1.join("residual.csv").exists());
        assert!(out1.join("spot.csv").exists());
    }

    #[test]
    fn solve_respects_side_and_grid_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "");
        let out = dir.path().join("up");
        let code = run(args(&[
            "solve",
            scenario.to_str().unwrap(),
            "--side",
            "upper",
            "--grid-nx",
            "81",
            "--grid-nt",
            "301",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let text = fs::read_to_string(out.join("value_upper.csv")).unwrap();
        assert_eq!(text.lines().count() - 1, 5 * 81);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["overrides"]["grid_nt"], 301);
        assert_eq!(manifest["overrides"]["side"], "upper");
    }

    #[test]
    fn isaacs_gap_reports_zero_for_the_separable_game() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "");
        let out = dir.path().join("gap");
        let code = run(args(&["isaacs-gap", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, 0);
        let text = fs::read_to_string(out.join("gap.csv")).unwrap();
        assert_eq!(text.lines().count() - 1, 1000);
        let summary = fs::read_to_string(out.join("gap_summary.csv")).unwrap();
        let row = summary.lines().nth(1).unwrap();
        let max_gap: f64 = row.split(',').next().unwrap().parse().unwrap();
        assert!(max_gap <= 1e-12, "max gap {max_gap}");
    }

    #[test]
    fn simulate_with_constant_policies_skips_the_solve() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "policy1 = \"const 0.5\"\npolicy2 = \"const -0.5\"");
        let out = dir.path().join("sim");
        let code = run(args(&[
            "simulate",
            scenario.to_str().unwrap(),
            "--paths",
            "50",
            "--steps",
            "20",
            "--dump-paths",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert!(manifest["timings_s"].get("solve").is_none());
        assert_eq!(manifest["seed"], 7);
        let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
        assert_eq!(paths.lines().next().unwrap(), "path,step,s,y1,u1_1,u2_1");
        assert_eq!(paths.lines().count() - 1, 50 * 21);
        assert!(out.join("moments.csv").exists());
        assert!(out.join("payoff.csv").exists());
    }

    #[test]
    fn verify_saddle_small_run_passes_and_is_worker_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "");
        let out1 = dir.path().join("w1");
        let out2 = dir.path().join("w4");
        for (out, workers) in [(&out1, "1"), (&out2, "4")] {
            let code = run(args(&[
                "verify-saddle",
                scenario.to_str().unwrap(),
                "--workers",
                workers,
                "--out",
                out.to_str().unwrap(),
            ]));
            assert_eq!(code, 0);
        }
        for name in ["saddle.csv", "saddle_verdict.csv"] {
            let a = fs::read(out1.join(name)).unwrap();
            let b = fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across worker counts");
        }
        let verdicts = fs::read_to_string(out1.join("saddle_verdict.csv")).unwrap();
        assert!(verdicts.lines().skip(1).all(|l| l.ends_with("true")), "{verdicts}");
    }

    #[test]
    fn decompose_writes_residuals_and_passes() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "policy1 = \"const 0.25\"\npolicy2 = \"const -0.25\"");
        let out = dir.path().join("dec");
        let code = run(args(&["decompose", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, 0);
        let residuals = fs::read_to_string(out.join("residuals.csv")).unwrap();
        assert_eq!(residuals.lines().count() - 1, 400);
        assert!(out.join("histogram.csv").exists());
        assert!(out.join("decompose_summary.csv").exists());
    }

    #[test]
    fn game_value_on_game_and_control_guard() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = small_sine_heat(dir.path(), "");
        let out = dir.path().join("gv");
        let code = run(args(&[
            "game-value",
            scenario.to_str().unwrap(),
            "--paths",
            "150",
            "--steps",
            "40",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0, "game-value failed");
        let mean = fs::read_to_string(out.join("matrix_mean.csv")).unwrap();
        assert_eq!(mean.lines().count() - 1, 4);
        assert!(mean.lines().next().unwrap().starts_with("policy1,star,const("));

        // verify-control on a game model is a configuration error.
        let code = run(args(&["verify-control", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, 1);
    }

    #[test]
    fn verify_control_runs_on_a_control_model() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
[model]
kind = "control"
d = 1
m = 1
T = 1.0

[dynamics]
b = "0"
f1 = "u_1"
sigma = "0.5"

[cost]
l = "u_1^2/2"
g = "x1^2"

[controls.u]
lo = -2.0
hi = 2.0
points = 41

[grid]
x_lo = -4.0
x_hi = 4.0
nx = 161
nt = 1001

[mc]
x0 = 0.5
paths = 500
steps = 100
seed = 5
"#;
        let scenario = dir.path().join("control.cfg");
        fs::write(&scenario, text).unwrap();
        let out = dir.path().join("vc");
        let code = run(args(&["verify-control", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, 0);
        let control = fs::read_to_string(out.join("control.csv")).unwrap();
        assert_eq!(control.lines().count() - 1, 4); // star + 3 candidates
        let verdicts = fs::read_to_string(out.join("control_verdict.csv")).unwrap();
        assert!(verdicts.lines().skip(1).all(|l| l.ends_with("true")), "{verdicts}");
    }
}
