//! Current-value Hamiltonian, its upper/lower envelopes over discretized
//! control sets, the minimax gap, and saddle-point selection.
//!
//! For a gradient slot `p` the current-value Hamiltonian is
//!
//! ```text
//! H0(s, x, p, u1, u2) = <f1(s, x, u1, u2), p> + l(s, x, u1, u2)
//! ```
//!
//! With both control sets finite, the envelopes are exhaustive enumerations:
//!
//! ```text
//! H_lower(s, x, p) = max over u1 of  min over u2 of  H0   (maximizer moves first)
//! H_upper(s, x, p) = min over u2 of  max over u1 of  H0   (minimizer moves first)
//! ```
//!
//! `H_lower <= H_upper` always (an exact comparison of floats computed by the
//! same sweep, not an analytic approximation), and the difference is the
//! minimax gap. The gap vanishes at a point exactly when the enumeration
//! table has a saddle there; [`select_saddle`] returns the deterministic
//! first-index choice, which is a piecewise-constant (hence Borel) selection
//! in `(s, x, p)` at grid resolution.
//!
//! Optimization is always over the stored point lists; ties break to the
//! first point in enumeration (lexicographic) order. No smoothness in the
//! controls is assumed anywhere — enumeration does not care.

use crate::expr;
use crate::game_model::{GameSpec, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Current-value Hamiltonian `<f1, p> + l` at one control pair.
pub fn h0_cv(
    spec: &GameSpec,
    s: f64,
    x: &[f64],
    p: &[f64],
    u1: &[f64],
    u2: &[f64],
) -> Result<f64, ModelError> {
    let ctx = spec.bindings(s, x, u1, u2);
    let mut dot = 0.0;
    for i in 0..spec.d {
        dot += expr::eval_ctx(&spec.f1[i], &ctx)? * p[i];
    }
    Ok(dot + expr::eval_ctx(&spec.l, &ctx)?)
}

// ---------------------------------------------------------------------------
// Control tables
// ---------------------------------------------------------------------------

/// Cached evaluations of `f1` and `l` over the full `n1 x n2` control grid at
/// one `(s, x)`. Building the table costs `n1 * n2` expression sweeps; every
/// envelope query afterwards is pure float arithmetic in `p`. The PDE solver
/// reuses one table across a whole time level (or the whole run) whenever the
/// controlled coefficients do not read `x` (or `s`).
#[derive(Debug, Clone)]
pub struct ControlTable {
    d: usize,
    n1: usize,
    n2: usize,
    /// `f1` vectors, `(i * n2 + j) * d ..`, row-major over control pairs.
    f1: Vec<f64>,
    /// `l` values, `i * n2 + j`.
    l: Vec<f64>,
}

/// Reusable buffers for envelope sweeps (per-column maxima and one row of
/// Hamiltonian values).
#[derive(Debug, Default, Clone)]
pub struct EnvelopeScratch {
    col_max: Vec<f64>,
    row_h: Vec<f64>,
}

/// Result of one envelope sweep at a fixed `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelopes {
    /// `max_i min_j` of the table.
    pub lower: f64,
    /// `min_j max_i` of the table.
    pub upper: f64,
    /// `upper - lower` (never negative: sup-inf <= inf-sup holds exactly for
    /// the computed table).
    pub gap: f64,
    /// First index attaining the outer max of `lower`.
    pub i_star: usize,
    /// First index attaining the outer min of `upper`.
    pub j_star: usize,
}

impl ControlTable {
    pub fn build(spec: &GameSpec, s: f64, x: &[f64]) -> Result<ControlTable, ModelError> {
        let d = spec.d;
        let n1 = spec.u1.n_points();
        let n2 = spec.u2.n_points();
        let mut f1 = vec![0.0; n1 * n2 * d];
        let mut l = vec![0.0; n1 * n2];
        let mut f1_buf = vec![0.0; d];
        for i in 0..n1 {
            let u1 = spec.u1.point(i);
            for j in 0..n2 {
                let u2 = spec.u2.point(j);
                spec.eval_f1_into(s, x, u1, u2, &mut f1_buf)?;
                let idx = i * n2 + j;
                f1[idx * d..(idx + 1) * d].copy_from_slice(&f1_buf);
                l[idx] = spec.eval_l(s, x, u1, u2)?;
            }
        }
        Ok(ControlTable { d, n1, n2, f1, l })
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    /// Hamiltonian value at one control pair, identical float path to the
    /// envelope sweep (dot product first, running cost added last).
    pub fn h(&self, p: &[f64], i: usize, j: usize) -> f64 {
        let idx = i * self.n2 + j;
        let base = idx * self.d;
        let mut dot = 0.0;
        for k in 0..self.d {
            dot += self.f1[base + k] * p[k];
        }
        dot + self.l[idx]
    }

    /// One sweep over all control pairs computing both envelopes and their
    /// first-index argument pair.
    ///
    /// The sweep is the inner loop of both the PDE solver and the closed-loop
    /// simulator, so each row is materialised into a scratch buffer first and
    /// reduced with branch-free `min`/`max` folds that the optimiser can
    /// vectorise. The float path per entry (dot product, then the running
    /// cost) matches [`ControlTable::h`] exactly.
    pub fn envelopes(&self, p: &[f64], scratch: &mut EnvelopeScratch) -> Envelopes {
        let EnvelopeScratch { col_max, row_h } = scratch;
        col_max.clear();
        col_max.resize(self.n2, f64::NEG_INFINITY);
        row_h.clear();
        row_h.resize(self.n2, 0.0);
        let n2 = self.n2;
        let mut lower = f64::NEG_INFINITY;
        let mut i_star = 0usize;
        for i in 0..self.n1 {
            let base = i * n2;
            let row_h = &mut row_h[..n2];
            let col_max = &mut col_max[..n2];
            if self.d == 1 {
                let p0 = p[0];
                let f1_row = &self.f1[base..base + n2];
                let l_row = &self.l[base..base + n2];
                for j in 0..n2 {
                    row_h[j] = f1_row[j] * p0 + l_row[j];
                }
            } else {
                for (j, h) in row_h.iter_mut().enumerate() {
                    let off = (base + j) * self.d;
                    let mut dot = 0.0;
                    for k in 0..self.d {
                        dot += self.f1[off + k] * p[k];
                    }
                    *h = dot + self.l[base + j];
                }
            }
            // Branch-free select form: tables are finite by construction, so
            // plain ordered comparisons compute the exact min/max and map to
            // single hardware min/max instructions.
            let mut m = [f64::INFINITY; 4];
            let mut chunks = row_h.chunks_exact(4);
            for c in &mut chunks {
                m[0] = if c[0] < m[0] { c[0] } else { m[0] };
                m[1] = if c[1] < m[1] { c[1] } else { m[1] };
                m[2] = if c[2] < m[2] { c[2] } else { m[2] };
                m[3] = if c[3] < m[3] { c[3] } else { m[3] };
            }
            let mut row_min = m[0];
            for &v in &m[1..] {
                row_min = if v < row_min { v } else { row_min };
            }
            for &h in chunks.remainder() {
                row_min = if h < row_min { h } else { row_min };
            }
            for j in 0..n2 {
                let h = row_h[j];
                col_max[j] = if h > col_max[j] { h } else { col_max[j] };
            }
            if row_min > lower {
                lower = row_min;
                i_star = i;
            }
        }
        let mut upper = f64::INFINITY;
        let mut j_star = 0usize;
        for (j, &cm) in col_max.iter().enumerate() {
            if cm < upper {
                upper = cm;
                j_star = j;
            }
        }
        Envelopes { lower, upper, gap: upper - lower, i_star, j_star }
    }
}

// ---------------------------------------------------------------------------
// Plain-table minimax (also used on Monte-Carlo payoff matrices)
// ---------------------------------------------------------------------------

/// Minimax data of a row-major `n1 x n2` table (`values[i * n2 + j]`; rows
/// indexed by the maximizer).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableMinimax {
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
    pub i_star: usize,
    pub j_star: usize,
}

pub fn minimax_table(values: &[f64], n1: usize, n2: usize) -> TableMinimax {
    assert_eq!(values.len(), n1 * n2, "table shape mismatch");
    assert!(n1 > 0 && n2 > 0, "empty table");
    let mut col_max = vec![f64::NEG_INFINITY; n2];
    let mut lower = f64::NEG_INFINITY;
    let mut i_star = 0usize;
    for i in 0..n1 {
        let mut row_min = f64::INFINITY;
        for j in 0..n2 {
            let h = values[i * n2 + j];
            if h < row_min {
                row_min = h;
            }
            if h > col_max[j] {
                col_max[j] = h;
            }
        }
        if row_min > lower {
            lower = row_min;
            i_star = i;
        }
    }
    let mut upper = f64::INFINITY;
    let mut j_star = 0usize;
    for (j, &cm) in col_max.iter().enumerate() {
        if cm < upper {
            upper = cm;
            j_star = j;
        }
    }
    TableMinimax { lower, upper, gap: upper - lower, i_star, j_star }
}

/// Saddle verdict at one table cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleCheck {
    pub holds: bool,
    /// Largest violation of the two-sided inequalities, floored at zero.
    pub worst_violation: f64,
}

/// Check `values[i', j] <= values[i, j] <= values[i, j']` for all `i'`, `j'`
/// (maximizer rows, minimizer columns) within `tol`.
pub fn table_saddle_check(values: &[f64], n1: usize, n2: usize, i: usize, j: usize, tol: f64) -> SaddleCheck {
    assert_eq!(values.len(), n1 * n2, "table shape mismatch");
    let center = values[i * n2 + j];
    let mut worst = 0.0f64;
    for i2 in 0..n1 {
        worst = worst.max(values[i2 * n2 + j] - center);
    }
    for j2 in 0..n2 {
        worst = worst.max(center - values[i * n2 + j2]);
    }
    SaddleCheck { holds: worst <= tol, worst_violation: worst }
}

// ---------------------------------------------------------------------------
// Point-level API
// ---------------------------------------------------------------------------

/// Lower Hamiltonian `max_{u1} min_{u2} H0` with its first maximizer.
pub fn h_lower(spec: &GameSpec, s: f64, x: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
    let table = ControlTable::build(spec, s, x)?;
    let env = table.envelopes(p, &mut EnvelopeScratch::default());
    Ok((env.lower, spec.u1.point(env.i_star).to_vec()))
}

/// Upper Hamiltonian `min_{u2} max_{u1} H0` with its first minimizer.
pub fn h_upper(spec: &GameSpec, s: f64, x: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
    let table = ControlTable::build(spec, s, x)?;
    let env = table.envelopes(p, &mut EnvelopeScratch::default());
    Ok((env.upper, spec.u2.point(env.j_star).to_vec()))
}

/// Envelope values, gap and argument indices at one phase point.
#[derive(Debug, Clone)]
pub struct HamiltonianReport {
    pub s: f64,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub h_lower: f64,
    pub h_upper: f64,
    pub gap: f64,
    pub argmax_u1: usize,
    pub argmin_u2: usize,
}

pub fn hamiltonian_report(spec: &GameSpec, s: f64, x: &[f64], p: &[f64]) -> Result<HamiltonianReport, ModelError> {
    let table = ControlTable::build(spec, s, x)?;
    let env = table.envelopes(p, &mut EnvelopeScratch::default());
    Ok(HamiltonianReport {
        s,
        x: x.to_vec(),
        p: p.to_vec(),
        h_lower: env.lower,
        h_upper: env.upper,
        gap: env.gap,
        argmax_u1: env.i_star,
        argmin_u2: env.j_star,
    })
}

/// The saddle candidate pair: `u1*` maximizes the inner minimum, `u2*`
/// minimizes the inner maximum, each the first optimizer in enumeration
/// order. When the gap vanishes this pair is a saddle of the table.
#[derive(Debug, Clone)]
pub struct SaddleSelection {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub i: usize,
    pub j: usize,
    pub h_lower: f64,
    pub h_upper: f64,
    pub gap: f64,
}

pub fn select_saddle(spec: &GameSpec, s: f64, x: &[f64], p: &[f64]) -> Result<SaddleSelection, ModelError> {
    let table = ControlTable::build(spec, s, x)?;
    let env = table.envelopes(p, &mut EnvelopeScratch::default());
    Ok(SaddleSelection {
        u1: spec.u1.point(env.i_star).to_vec(),
        u2: spec.u2.point(env.j_star).to_vec(),
        i: env.i_star,
        j: env.j_star,
        h_lower: env.lower,
        h_upper: env.upper,
        gap: env.gap,
    })
}

fn locate_point(points: impl Iterator<Item = usize>, find: impl Fn(usize) -> bool) -> Option<usize> {
    for i in points {
        if find(i) {
            return Some(i);
        }
    }
    None
}

/// Verify the two-sided saddle inequalities at a given control pair (points
/// must belong to the stored grids). Tolerance `1e-10`.
pub fn check_saddle_inequalities(
    spec: &GameSpec,
    s: f64,
    x: &[f64],
    p: &[f64],
    u1: &[f64],
    u2: &[f64],
) -> Result<SaddleCheck, ModelError> {
    let i = locate_point(0..spec.u1.n_points(), |i| spec.u1.point(i) == u1).ok_or_else(|| {
        ModelError::Validation(format!("u1 = {u1:?} is not a stored control point"))
    })?;
    let j = locate_point(0..spec.u2.n_points(), |j| spec.u2.point(j) == u2).ok_or_else(|| {
        ModelError::Validation(format!("u2 = {u2:?} is not a stored control point"))
    })?;
    let table = ControlTable::build(spec, s, x)?;
    let n1 = spec.u1.n_points();
    let n2 = spec.u2.n_points();
    let mut values = vec![0.0; n1 * n2];
    for a in 0..n1 {
        for b in 0..n2 {
            values[a * n2 + b] = table.h(p, a, b);
        }
    }
    Ok(table_saddle_check(&values, n1, n2, i, j, SADDLE_TOL))
}

/// Tolerance for the saddle inequalities (matches the reporting convention
/// used across the verification suite).
pub const SADDLE_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Gap surveys over phase clouds
// ---------------------------------------------------------------------------

/// A `(s, x, p)` sample for gap surveys.
#[derive(Debug, Clone)]
pub struct PhaseSample {
    pub s: f64,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

/// Deterministic cloud of phase points: `s` uniform on `[0, T]`, `x` uniform
/// on `[-x_radius, x_radius]^d`, `p` uniform on `[-p_radius, p_radius]^d`.
pub fn sample_phase_cloud(spec: &GameSpec, x_radius: f64, p_radius: f64, n: usize, seed: u64) -> Vec<PhaseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PhaseSample {
            s: rng.gen::<f64>() * spec.horizon,
            x: (0..spec.d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * x_radius).collect(),
            p: (0..spec.d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * p_radius).collect(),
        })
        .collect()
}

/// Gap survey over a phase cloud.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub max_gap: f64,
    pub mean_gap: f64,
    /// Sample attaining the maximal gap.
    pub worst: Option<PhaseSample>,
    /// Fraction of samples whose gap is at most [`SADDLE_TOL`].
    pub saddle_fraction: f64,
    pub samples: usize,
}

/// Maximal (and mean) minimax gap over the cloud. A max below `1e-12`
/// certifies the minimax interchange on the sampled cloud at the current
/// control-grid resolution — evidence, not a proof.
pub fn isaacs_gap(spec: &GameSpec, cloud: &[PhaseSample]) -> Result<GapReport, ModelError> {
    let mut max_gap = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut worst = None;
    let mut saddles = 0usize;
    for sample in cloud {
        let table = ControlTable::build(spec, sample.s, &sample.x)?;
        let env = table.envelopes(&sample.p, &mut EnvelopeScratch::default());
        sum += env.gap;
        if env.gap <= SADDLE_TOL {
            saddles += 1;
        }
        if env.gap > max_gap {
            max_gap = env.gap;
            worst = Some(sample.clone());
        }
    }
    let n = cloud.len();
    Ok(GapReport {
        max_gap: if n == 0 { 0.0 } else { max_gap },
        mean_gap: if n == 0 { 0.0 } else { sum / n as f64 },
        worst,
        saddle_fraction: if n == 0 { 1.0 } else { saddles as f64 / n as f64 },
        samples: n,
    })
}
