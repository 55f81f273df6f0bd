//! Discrete optimal transport between whitened feature sets.
//!
//! Two solvers share one [`TransportPlan`] output: a log-domain Sinkhorn
//! iteration for entropic OT, and an exact transportation simplex used for
//! small instances and as the reference answer.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ROW_BLOCK};
use crate::metric::WhitenedFeatures;

/// Exact solver refuses problems with more cells than this.
pub const EXACT_MAX_CELLS: usize = 1_000_000;
/// Plans with more cells than this keep only the heaviest entries per row.
pub const DENSE_PLAN_MAX_CELLS: usize = 10_000_000;
/// Entries kept per row in a sparse plan.
pub const SPARSE_PLAN_TOP_K: usize = 64;

/// Ratio between successive regularization levels when annealing.
const EPS_SCALING_FACTOR: f64 = 0.5;
/// Marginal tolerance on the intermediate annealing levels.
const EPS_SCALING_TOL: f64 = 1e-3;
/// Plain sweeps used to estimate the contraction rate before over-relaxing.
const SOR_PROBE: usize = 8;
const SOR_MAX_OMEGA: f64 = 1.9;

/// Probability weights over the points of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MassVector {
    weights: Vec<f64>,
    uniform: bool,
}

impl MassVector {
    /// Checks positivity and unit total (within 1e-12).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty mass vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!("mass {w} is not positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("masses sum to {total}, not 1")));
        }
        Ok(Self {
            weights,
            uniform: false,
        })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform mass over zero points");
        Self {
            weights: vec![1.0 / n as f64; n],
            uniform: true,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }
}

/// Pairwise transport costs between `n` source and `m` target points.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::shape("cost matrix", "non-empty", format!("{:?}", values.dim())));
        }
        if row_ids.len() != values.nrows() || col_ids.len() != values.ncols() {
            return Err(Error::shape(
                "cost matrix ids",
                format!("{}x{}", values.nrows(), values.ncols()),
                format!("{}x{}", row_ids.len(), col_ids.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("cost entry {v} is negative or non-finite")));
        }
        Ok(Self {
            values,
            row_ids,
            col_ids,
        })
    }

    /// Cost matrix with positional ids.
    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        let rows = crate::features::default_ids(values.nrows());
        let cols = crate::features::default_ids(values.ncols());
        Self::new(values, rows, cols)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Rows `indices` in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), indices),
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
            col_ids: self.col_ids.clone(),
        }
    }

    /// Columns `indices` in order.
    pub fn select_cols(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(1), indices),
            row_ids: self.row_ids.clone(),
            col_ids: indices.iter().map(|&j| self.col_ids[j].clone()).collect(),
        }
    }
}

/// Pairwise WFD between unit rows, via one GEMM.
///
/// `sqrt(2 - 2<a,b>)` loses accuracy as the distance approaches zero, so
/// entries below 0.1 are recomputed from the explicit difference.
pub(crate) fn wfd_matrix(src: ArrayView2<'_, f64>, dst: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = linalg::gemm_nt(src, dst);
    out.axis_chunks_iter_mut(Axis(0), ROW_BLOCK)
        .into_par_iter()
        .enumerate()
        .for_each(|(blk, mut chunk)| {
            for (r, mut row) in chunk.axis_iter_mut(Axis(0)).enumerate() {
                let a = src.row(blk * ROW_BLOCK + r);
                for (j, v) in row.iter_mut().enumerate() {
                    let sq = 2.0 - 2.0 * *v;
                    *v = if sq < 1e-2 {
                        crate::metric::wfd(a, dst.row(j))
                    } else {
                        sq.sqrt()
                    };
                }
            }
        });
    out
}

/// `values[i][j] = wfd(src_i, dst_j)`.
pub fn cost_matrix(src: &WhitenedFeatures, dst: &WhitenedFeatures) -> Result<CostMatrix> {
    if src.dim() != dst.dim() {
        return Err(Error::shape("cost_matrix", src.dim(), dst.dim()));
    }
    let values = wfd_matrix(src.data(), dst.data());
    Ok(CostMatrix {
        values,
        row_ids: src.ids().to_vec(),
        col_ids: dst.ids().to_vec(),
    })
}

/// Transport coupling, dense or truncated to the heaviest entries per row.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    Dense(Array2<f64>),
    Sparse {
        /// `(column, mass)` pairs per row, by ascending column.
        rows: Vec<Vec<(usize, f64)>>,
        ncols: usize,
        /// Mass dropped by the truncation.
        truncated_mass: f64,
    },
}

impl Coupling {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Coupling::Dense(p) => p[[i, j]],
            Coupling::Sparse { rows, .. } => rows[i]
                .binary_search_by_key(&j, |e| e.0)
                .map(|k| rows[i][k].1)
                .unwrap_or(0.0),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Coupling::Dense(p) => p.clone(),
            Coupling::Sparse { rows, ncols, .. } => {
                let mut p = Array2::zeros((rows.len(), *ncols));
                for (i, row) in rows.iter().enumerate() {
                    for &(j, v) in row {
                        p[[i, j]] = v;
                    }
                }
                p
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Coupling,
    /// Source potentials `f`, in cost units.
    pub dual_row: Vec<f64>,
    /// Target potentials `g`, in cost units.
    pub dual_col: Vec<f64>,
    /// Transported cost `<C, pi>`.
    pub cost: f64,
    /// Entropic strength (0 for the exact solver).
    pub reg: f64,
    pub iterations: usize,
    /// L1 distance of the plan's row and column sums from the masses.
    pub marginal_violation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornOptions {
    pub reg: f64,
    pub max_iter: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            reg: 0.01,
            max_iter: 10_000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    Sinkhorn(SinkhornOptions),
    Exact,
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Sinkhorn(SinkhornOptions::default())
    }
}

fn check_masses(c: &CostMatrix, a: &MassVector, b: &MassVector) -> Result<()> {
    if a.len() != c.nrows() || b.len() != c.ncols() {
        return Err(Error::shape(
            "transport masses",
            format!("{}x{}", c.nrows(), c.ncols()),
            format!("{}x{}", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// `exp(x)` accurate to a few ulp, with the input clamped to [-708, 708]
/// (so tiny values come out near 3e-308 instead of underflowing).
/// Branch-free so the softmin loop vectorizes.
#[inline(always)]
fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 708.0);
    let kf = x * LOG2E + SHIFTER;
    let k = kf - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor to degree 13 on |r| <= ln2/2
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = kf.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f64::from_bits(ki.wrapping_add(1023) << 52);
    p * scale
}

/// `-reg * log sum_j exp(log_w_j + (pot_j - cost_j) / reg)`, max-shifted.
#[inline(always)]
fn softmin(cost: &[f64], pot: &[f64], log_w: &[f64], inv_reg: f64, reg: f64) -> f64 {
    // fixed-width lanes keep both loops vectorizable and the result
    // independent of scheduling; the compare-select max (rather than
    // f64::max) is what lets the first loop vectorize
    const L: usize = 8;
    let n = cost.len();
    let body = n - n % L;
    let lanes = || {
        cost[..body]
            .chunks_exact(L)
            .zip(pot[..body].chunks_exact(L))
            .zip(log_w[..body].chunks_exact(L))
    };
    let mut lane_max = [f64::NEG_INFINITY; L];
    for ((c, p), w) in lanes() {
        for l in 0..L {
            let v = w[l] + (p[l] - c[l]) * inv_reg;
            lane_max[l] = if v > lane_max[l] { v } else { lane_max[l] };
        }
    }
    let mut max = lane_max.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    for j in body..n {
        max = max.max(log_w[j] + (pot[j] - cost[j]) * inv_reg);
    }
    let mut acc = [0.0f64; L];
    for ((c, p), w) in lanes() {
        for l in 0..L {
            acc[l] += fast_exp(w[l] + (p[l] - c[l]) * inv_reg - max);
        }
    }
    for j in body..n {
        acc[0] += fast_exp(log_w[j] + (pot[j] - cost[j]) * inv_reg - max);
    }
    let sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    -reg * (max + sum.ln())
}

/// One half-iteration: `out_i = softmin_j(cost_ij - pot_j)` for every row of
/// `cost`, in parallel over fixed row blocks.
fn softmin_rows(
    cost: ArrayView2<'_, f64>,
    pot: &[f64],
    log_w: &[f64],
    reg: f64,
    out: &mut [f64],
) {
    let inv_reg = 1.0 / reg;
    out.par_chunks_mut(ROW_BLOCK)
        .enumerate()
        .for_each(|(blk, chunk)| {
            for (r, o) in chunk.iter_mut().enumerate() {
                let row = cost.row(blk * ROW_BLOCK + r);
                *o = softmin_dispatch(row.as_slice().expect("row-major"), pot, log_w, inv_reg, reg);
            }
        });
}

// The same softmin body compiled for wider vectors. No instruction changes
// rounding (LLVM does not contract to FMA here), so every variant returns
// bit-identical results and runs stay reproducible across machines.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn softmin_avx512(cost: &[f64], pot: &[f64], log_w: &[f64], inv_reg: f64, reg: f64) -> f64 {
    softmin(cost, pot, log_w, inv_reg, reg)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn softmin_avx2(cost: &[f64], pot: &[f64], log_w: &[f64], inv_reg: f64, reg: f64) -> f64 {
    softmin(cost, pot, log_w, inv_reg, reg)
}

#[inline]
fn softmin_dispatch(cost: &[f64], pot: &[f64], log_w: &[f64], inv_reg: f64, reg: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: each variant only runs when its feature is present.
        if std::arch::is_x86_feature_detected!("avx512f") {
            return unsafe { softmin_avx512(cost, pot, log_w, inv_reg, reg) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            return unsafe { softmin_avx2(cost, pot, log_w, inv_reg, reg) };
        }
    }
    softmin(cost, pot, log_w, inv_reg, reg)
}

/// Entropic OT by log-domain Sinkhorn.
///
/// The plan is `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / reg)`. Iteration
/// stops when the L1 marginal violation is below `tol` or after `max_iter`
/// sweeps in total; an unconverged plan is returned with `converged = false`.
/// Cold starts anneal the regularization down from the cost scale, which
/// takes far fewer sweeps than iterating at a small `reg` directly.
pub fn sinkhorn(
    c: &CostMatrix,
    a: &MassVector,
    b: &MassVector,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    sinkhorn_warm(c, a, b, opts, None)
}

/// [`sinkhorn`] starting from target potentials `init_col` (e.g. from a
/// previous solve against the same targets).
pub fn sinkhorn_warm(
    c: &CostMatrix,
    a: &MassVector,
    b: &MassVector,
    opts: &SinkhornOptions,
    init_col: Option<&[f64]>,
) -> Result<TransportPlan> {
    check_masses(c, a, b)?;
    sinkhorn_view(c.values.view(), a, b, opts, init_col)
}

pub(crate) fn sinkhorn_view(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
    opts: &SinkhornOptions,
    init_col: Option<&[f64]>,
) -> Result<TransportPlan> {
    let it = sinkhorn_iterate(cost, a, b, opts, init_col)?;
    let mut plan = materialize(cost, a, b, &it.f, &it.g, opts.reg)?;
    plan.iterations = it.iterations;
    plan.converged = it.converged && plan.marginal_violation < opts.tol.max(1e-12) * 2.0;
    Ok(plan)
}

struct Iterate {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn sinkhorn_iterate(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
    opts: &SinkhornOptions,
    init_col: Option<&[f64]>,
) -> Result<Iterate> {
    if !(opts.reg > 0.0 && opts.reg.is_finite()) {
        return Err(Error::InvalidArgument(format!("sinkhorn reg must be > 0, got {}", opts.reg)));
    }
    let (n, m) = cost.dim();
    let reg = opts.reg;
    let log_a: Vec<f64> = a.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();
    let cost = cost.as_standard_layout();
    let cost_t = cost.t().as_standard_layout().into_owned();

    let mut f = vec![0.0; n];
    let mut f_next = vec![0.0; n];
    let mut g = match init_col {
        Some(g0) if g0.len() == m => g0.to_vec(),
        Some(g0) => return Err(Error::shape("sinkhorn warm start", m, g0.len())),
        None => vec![0.0; m],
    };

    // anneal reg geometrically from the cost scale unless warm-started;
    // potentials are in cost units so they carry over between levels
    let mut levels = Vec::new();
    if init_col.is_none() {
        let (lo, hi) = cost
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        let mut e = (hi - lo) / 4.0;
        while e > reg * EPS_SCALING_FACTOR.recip() {
            levels.push(e);
            e *= EPS_SCALING_FACTOR;
        }
    }
    levels.push(reg);

    let dual = |f: &[f64], g: &[f64]| -> f64 {
        let fa: f64 = a.weights().iter().zip(f).map(|(w, v)| w * v).sum();
        let gb: f64 = b.weights().iter().zip(g).map(|(w, v)| w * v).sum();
        fa + gb
    };
    let mut f_try = vec![0.0; n];
    let mut g_try = vec![0.0; m];

    let mut iterations = 0;
    let mut converged = false;
    let last = levels.len() - 1;
    'levels: for (level, &eps) in levels.iter().enumerate() {
        let final_level = level == last;
        let tol = if final_level { opts.tol } else { opts.tol.max(EPS_SCALING_TOL) };
        let mut first = true;
        // over-relaxation factor, estimated from the plain contraction rate
        let mut omega = 1.0;
        let mut history: Vec<f64> = Vec::new();
        while iterations < opts.max_iter {
            softmin_rows(cost.view(), &g, &log_b, eps, &mut f_next);
            if f_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SinkhornNaN { iteration: iterations });
            }
            if !first {
                // row sums of the current (f, g) plan are a_i exp((f_i - f_next_i)/eps);
                // its columns already match b exactly.
                let violation: f64 = a
                    .weights()
                    .iter()
                    .zip(f.iter().zip(&f_next))
                    .map(|(w, (fo, fn_))| w * (((fo - fn_) / eps).exp() - 1.0).abs())
                    .sum();
                if violation.is_nan() {
                    return Err(Error::SinkhornNaN { iteration: iterations });
                }
                if violation < tol {
                    if final_level {
                        converged = true;
                        break 'levels;
                    }
                    continue 'levels;
                }
                history.push(violation);
                if history.len() > SOR_PROBE {
                    // observed per-sweep rate; under relaxation omega, recover
                    // the plain rate from (lambda + omega - 1)^2 = lambda omega^2 q
                    let lambda = (history[SOR_PROBE] / history[0]).powf(1.0 / SOR_PROBE as f64);
                    history.clear();
                    if lambda > 0.0 && lambda < 1.0 && lambda > omega - 1.0 {
                        let q = ((lambda + omega - 1.0).powi(2) / (lambda * omega * omega)).min(1.0);
                        let next = (2.0 / (1.0 + (1.0 - q).sqrt())).min(SOR_MAX_OMEGA);
                        if next > omega {
                            omega = next;
                        }
                    }
                }
            }
            let was_first = first;
            first = false;
            if omega > 1.0 && !was_first {
                for ((t, fo), fs) in f_try.iter_mut().zip(&f).zip(&f_next) {
                    *t = fo + omega * (fs - fo);
                }
                softmin_rows(cost_t.view(), &f_try, &log_a, eps, &mut g_try);
                // keep the relaxed step only if it still ascends the dual
                let (d_try, d_cur) = (dual(&f_try, &g_try), dual(&f, &g));
                if g_try.iter().all(|v| v.is_finite()) && d_try >= d_cur - 1e-13 * (1.0 + d_cur.abs()) {
                    std::mem::swap(&mut f, &mut f_try);
                    std::mem::swap(&mut g, &mut g_try);
                    iterations += 1;
                    continue;
                }
                omega = 1.0;
                history.clear();
            }
            std::mem::swap(&mut f, &mut f_next);
            softmin_rows(cost_t.view(), &f, &log_a, eps, &mut g);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::SinkhornNaN { iteration: iterations });
            }
            iterations += 1;
        }
        break;
    }
    if !converged {
        log::debug!("sinkhorn stopped at max_iter={} without converging", opts.max_iter);
    }
    Ok(Iterate {
        f,
        g,
        iterations,
        converged,
    })
}

/// Potentials and plan summaries of a solve, without the plan itself.
#[derive(Debug, Clone)]
pub(crate) struct Duals {
    pub dual_row: Vec<f64>,
    pub dual_col: Vec<f64>,
    pub cost: f64,
    pub marginal_violation: f64,
    pub converged: bool,
}

/// `<C, pi>` and the L1 marginal violation of the entropic plan of `(f, g)`,
/// in one pass over the cost.
fn plan_summary(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
    f: &[f64],
    g: &[f64],
    reg: f64,
) -> Result<(f64, f64)> {
    let m = cost.ncols();
    let inv_reg = 1.0 / reg;
    let log_b: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();
    let blocks: Vec<(f64, f64, Vec<f64>)> = cost
        .axis_chunks_iter(Axis(0), ROW_BLOCK)
        .into_par_iter()
        .enumerate()
        .map(|(blk, chunk)| {
            let (mut total, mut row_viol) = (0.0, 0.0);
            let mut cols = vec![0.0; m];
            for (r, row) in chunk.rows().into_iter().enumerate() {
                let i = blk * ROW_BLOCK + r;
                let ai = a.weights()[i];
                let shift = ai.ln() + f[i] * inv_reg;
                let (mut sum, mut acc) = (0.0, 0.0);
                for (j, &cij) in row.iter().enumerate() {
                    let p = fast_exp(shift + log_b[j] + (g[j] - cij) * inv_reg);
                    sum += p;
                    acc += p * cij;
                    cols[j] += p;
                }
                total += acc;
                row_viol += (sum - ai).abs();
            }
            (total, row_viol, cols)
        })
        .collect();
    let mut total = 0.0;
    let mut violation = 0.0;
    let mut cols = vec![0.0; m];
    for (t, v, c) in blocks {
        total += t;
        violation += v;
        cols.iter_mut().zip(&c).for_each(|(s, x)| *s += x);
    }
    if !total.is_finite() {
        return Err(Error::SinkhornNaN { iteration: 0 });
    }
    violation += cols.iter().zip(b.weights()).map(|(s, w)| (s - w).abs()).sum::<f64>();
    Ok((total, violation))
}

/// Like [`solve_view`] but skips building the coupling.
pub(crate) fn solve_duals(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
    solver: &Solver,
    warm: Option<&[f64]>,
) -> Result<Duals> {
    match solver {
        Solver::Sinkhorn(opts) => {
            let cost = cost.as_standard_layout();
            let it = sinkhorn_iterate(cost.view(), a, b, opts, warm)?;
            let (total, violation) = plan_summary(cost.view(), a, b, &it.f, &it.g, opts.reg)?;
            Ok(Duals {
                converged: it.converged && violation < opts.tol.max(1e-12) * 2.0,
                dual_row: it.f,
                dual_col: it.g,
                cost: total,
                marginal_violation: violation,
            })
        }
        Solver::Exact => {
            let plan = exact_view(cost, a, b)?;
            Ok(Duals {
                dual_row: plan.dual_row,
                dual_col: plan.dual_col,
                cost: plan.cost,
                marginal_violation: plan.marginal_violation,
                converged: plan.converged,
            })
        }
    }
}

/// Builds the coupling for potentials `(f, g)` and measures its cost and
/// marginal violation.
fn materialize(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
    f: &[f64],
    g: &[f64],
    reg: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    let dense = n.saturating_mul(m) <= DENSE_PLAN_MAX_CELLS;
    let bw = b.weights();
    let inv_reg = 1.0 / reg;
    struct RowOut {
        cost: f64,
        sum: f64,
        entries: Vec<(usize, f64)>,
        kept: f64,
    }
    let mut dense_plan = if dense { Array2::zeros((n, m)) } else { Array2::zeros((0, 0)) };
    let per_row: Vec<RowOut> = if dense {
        dense_plan
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(i, mut prow)| {
                let ai = a.weights()[i];
                let mut acc = 0.0;
                let mut sum = 0.0;
                for j in 0..m {
                    let cij = cost[[i, j]];
                    let p = ai * bw[j] * ((f[i] + g[j] - cij) * inv_reg).exp();
                    prow[j] = p;
                    acc += p * cij;
                    sum += p;
                }
                RowOut {
                    cost: acc,
                    sum,
                    entries: Vec::new(),
                    kept: sum,
                }
            })
            .collect()
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let ai = a.weights()[i];
                let mut acc = 0.0;
                let mut sum = 0.0;
                let mut entries: Vec<(usize, f64)> = (0..m)
                    .map(|j| {
                        let cij = cost[[i, j]];
                        let p = ai * bw[j] * ((f[i] + g[j] - cij) * inv_reg).exp();
                        acc += p * cij;
                        sum += p;
                        (j, p)
                    })
                    .collect();
                let k = SPARSE_PLAN_TOP_K.min(m);
                entries.select_nth_unstable_by(k - 1, |x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                entries.truncate(k);
                entries.shrink_to_fit();
                entries.sort_unstable_by_key(|e| e.0);
                let kept = entries.iter().map(|e| e.1).sum();
                RowOut {
                    cost: acc,
                    sum,
                    entries,
                    kept,
                }
            })
            .collect()
    };
    let total_cost: f64 = per_row.iter().map(|r| r.cost).sum();
    if !total_cost.is_finite() {
        return Err(Error::SinkhornNaN { iteration: 0 });
    }
    let mut violation: f64 = per_row
        .iter()
        .zip(a.weights())
        .map(|(r, w)| (r.sum - w).abs())
        .sum();
    let col_sums: Vec<f64> = if dense {
        dense_plan.sum_axis(Axis(0)).to_vec()
    } else {
        // recompute column sums exactly rather than from the truncated rows
        let mut cs = vec![0.0; m];
        for i in 0..n {
            let ai = a.weights()[i];
            for (j, s) in cs.iter_mut().enumerate() {
                *s += ai * bw[j] * ((f[i] + g[j] - cost[[i, j]]) * inv_reg).exp();
            }
        }
        cs
    };
    violation += col_sums.iter().zip(bw).map(|(s, w)| (s - w).abs()).sum::<f64>();
    let coupling = if dense {
        Coupling::Dense(dense_plan)
    } else {
        let truncated_mass = per_row.iter().map(|r| r.sum - r.kept).sum();
        Coupling::Sparse {
            rows: per_row.into_iter().map(|r| r.entries).collect(),
            ncols: m,
            truncated_mass,
        }
    };
    Ok(TransportPlan {
        coupling,
        dual_row: f.to_vec(),
        dual_col: g.to_vec(),
        cost: total_cost,
        reg,
        iterations: 0,
        marginal_violation: violation,
        converged: true,
    })
}

/// Exact OT by the transportation simplex (MODI pricing on a spanning-tree
/// basis). Returns an optimal coupling with optimal LP duals.
pub fn exact_ot(c: &CostMatrix, a: &MassVector, b: &MassVector) -> Result<TransportPlan> {
    check_masses(c, a, b)?;
    exact_view(c.values.view(), a, b)
}

pub(crate) fn exact_view(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n.saturating_mul(m) > EXACT_MAX_CELLS {
        return Err(Error::SizeGuard {
            rows: n,
            cols: m,
            limit: EXACT_MAX_CELLS,
        });
    }
    // Uniform masses become exact integers (m per source, n per target), so
    // flows stay integral and degenerate pivots are recognized exactly.
    let (supply, demand, scale, zero_tol) = if a.is_uniform() && b.is_uniform() {
        (vec![m as f64; n], vec![n as f64; m], (n * m) as f64, 0.0)
    } else {
        let mut demand = b.weights().to_vec();
        let diff: f64 = a.weights().iter().sum::<f64>() - demand.iter().sum::<f64>();
        *demand.last_mut().unwrap() += diff;
        (a.weights().to_vec(), demand, 1.0, 1e-15)
    };
    let cost = cost.as_standard_layout();
    let mut simplex = TransportSimplex::new(cost.view(), supply, demand, zero_tol);
    simplex.solve()?;

    let mut plan = Array2::zeros((n, m));
    let mut total = 0.0;
    for cell in &simplex.cells {
        let v = cell.flow / scale;
        plan[[cell.row, cell.col]] = v;
        total += v * cost[[cell.row, cell.col]];
    }
    let mut violation: f64 = plan
        .sum_axis(Axis(1))
        .iter()
        .zip(a.weights())
        .map(|(s, w)| (s - w).abs())
        .sum();
    violation += plan
        .sum_axis(Axis(0))
        .iter()
        .zip(b.weights())
        .map(|(s, w)| (s - w).abs())
        .sum::<f64>();
    Ok(TransportPlan {
        coupling: Coupling::Dense(plan),
        dual_row: simplex.u.clone(),
        dual_col: simplex.v.clone(),
        cost: total,
        reg: 0.0,
        iterations: simplex.pivots,
        marginal_violation: violation,
        converged: true,
    })
}

#[derive(Debug, Clone, Copy)]
struct BasicCell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Basis of the transportation problem: `n + m - 1` cells forming a spanning
/// tree over row nodes `0..n` and column nodes `n..n+m`.
struct TransportSimplex<'a> {
    cost: ArrayView2<'a, f64>,
    n: usize,
    m: usize,
    cells: Vec<BasicCell>,
    /// cell indices incident to each node
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    // tree traversal scratch, rooted at row 0
    parent_cell: Vec<usize>,
    depth: Vec<usize>,
    order: Vec<usize>,
    zero_tol: f64,
    pivots: usize,
    cursor: usize,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: ArrayView2<'a, f64>, supply: Vec<f64>, demand: Vec<f64>, zero_tol: f64) -> Self {
        let (n, m) = cost.dim();
        // north-west corner start; ties advance the row, keeping a zero-flow
        // cell so the basis stays a spanning tree.
        let mut cells = Vec::with_capacity(n + m - 1);
        let (mut s, mut d) = (supply, demand);
        let (mut i, mut j) = (0, 0);
        loop {
            let q = s[i].min(d[j]);
            cells.push(BasicCell { row: i, col: j, flow: q });
            s[i] -= q;
            d[j] -= q;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && s[i] <= d[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), n + m - 1);
        let mut adj = vec![Vec::new(); n + m];
        for (k, cell) in cells.iter().enumerate() {
            adj[cell.row].push(k);
            adj[n + cell.col].push(k);
        }
        Self {
            cost,
            n,
            m,
            cells,
            adj,
            u: vec![0.0; n],
            v: vec![0.0; m],
            parent_cell: vec![usize::MAX; n + m],
            depth: vec![0; n + m],
            order: Vec::with_capacity(n + m),
            zero_tol,
            pivots: 0,
            cursor: 0,
        }
    }

    fn other_end(&self, cell: usize, node: usize) -> usize {
        let c = self.cells[cell];
        if node < self.n {
            self.n + c.col
        } else {
            c.row
        }
    }

    /// Recomputes potentials `u_i + v_j = C_ij` on basic cells and the tree
    /// parent links.
    fn update_tree(&mut self) {
        self.order.clear();
        self.order.push(0);
        self.parent_cell[0] = usize::MAX;
        self.depth[0] = 0;
        self.u[0] = 0.0;
        let mut head = 0;
        while head < self.order.len() {
            let node = self.order[head];
            head += 1;
            for idx in 0..self.adj[node].len() {
                let cell = self.adj[node][idx];
                if cell == self.parent_cell[node] {
                    continue;
                }
                let child = self.other_end(cell, node);
                self.parent_cell[child] = cell;
                self.depth[child] = self.depth[node] + 1;
                let c = self.cells[cell];
                let cij = self.cost[[c.row, c.col]];
                if child < self.n {
                    self.u[child] = cij - self.v[c.col];
                } else {
                    self.v[c.col] = cij - self.u[c.row];
                }
                self.order.push(child);
            }
        }
        debug_assert_eq!(self.order.len(), self.n + self.m);
    }

    /// Block-search pricing: scans blocks of cells from a rotating cursor and
    /// returns the most negative reduced cost in the first block that has one.
    fn entering(&mut self, eps: f64) -> Option<(usize, usize)> {
        let total = self.n * self.m;
        let block = ((total as f64).sqrt() as usize).max(16).min(total);
        let mut scanned = 0;
        while scanned < total {
            let mut best = -eps;
            let mut best_cell = None;
            let end = (scanned + block).min(total);
            for _ in scanned..end {
                let k = self.cursor;
                self.cursor += 1;
                if self.cursor == total {
                    self.cursor = 0;
                }
                let (i, j) = (k / self.m, k % self.m);
                let r = self.cost[[i, j]] - self.u[i] - self.v[j];
                if r < best {
                    best = r;
                    best_cell = Some((i, j));
                }
            }
            scanned = end;
            if best_cell.is_some() {
                return best_cell;
            }
        }
        None
    }

    fn solve(&mut self) -> Result<()> {
        let max_cost = self.cost.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let eps = 1e-12 * max_cost.max(1.0);
        let limit = 50 * (self.n + self.m) * (self.n + self.m) + 1000;
        loop {
            self.update_tree();
            let Some((i, j)) = self.entering(eps) else {
                return Ok(());
            };
            if self.pivots >= limit {
                return Err(Error::SimplexStalled { pivots: self.pivots });
            }
            self.pivot(i, j);
            self.pivots += 1;
        }
    }

    /// Path of cells from column node of `j` to row node `i` through the tree.
    fn cycle_path(&self, i: usize, j: usize) -> Vec<usize> {
        let mut a = self.n + j;
        let mut b = i;
        let mut from_a = Vec::new();
        let mut from_b = Vec::new();
        while self.depth[a] > self.depth[b] {
            let cell = self.parent_cell[a];
            from_a.push(cell);
            a = self.other_end(cell, a);
        }
        while self.depth[b] > self.depth[a] {
            let cell = self.parent_cell[b];
            from_b.push(cell);
            b = self.other_end(cell, b);
        }
        while a != b {
            let ca = self.parent_cell[a];
            from_a.push(ca);
            a = self.other_end(ca, a);
            let cb = self.parent_cell[b];
            from_b.push(cb);
            b = self.other_end(cb, b);
        }
        from_b.reverse();
        from_a.extend(from_b);
        from_a
    }

    fn pivot(&mut self, i: usize, j: usize) {
        let path = self.cycle_path(i, j);
        // entering cell gains flow; path cells alternate losing / gaining,
        // starting with a loss at the cell adjacent to column j
        let mut theta = f64::INFINITY;
        let mut leave_pos = 0;
        for (pos, &cell) in path.iter().enumerate().step_by(2) {
            let f = self.cells[cell].flow;
            if f < theta {
                theta = f;
                leave_pos = pos;
            }
        }
        if theta <= self.zero_tol {
            theta = 0.0;
        }
        for (pos, &cell) in path.iter().enumerate() {
            if pos % 2 == 0 {
                self.cells[cell].flow -= theta;
            } else {
                self.cells[cell].flow += theta;
            }
        }
        let leaving = path[leave_pos];
        let old = self.cells[leaving];
        self.adj[old.row].retain(|&k| k != leaving);
        self.adj[self.n + old.col].retain(|&k| k != leaving);
        self.cells[leaving] = BasicCell {
            row: i,
            col: j,
            flow: theta,
        };
        self.adj[i].push(leaving);
        self.adj[self.n + j].push(leaving);
        // clamp round-off on the cycle
        for &cell in &path {
            if self.cells[cell].flow.abs() <= self.zero_tol {
                self.cells[cell].flow = 0.0;
            }
        }
    }
}

/// Solves with whichever solver is configured.
pub fn solve(c: &CostMatrix, a: &MassVector, b: &MassVector, solver: &Solver) -> Result<TransportPlan> {
    check_masses(c, a, b)?;
    solve_view(c.values.view(), a, b, solver, None)
}

/// Uniform-mass solve on a bare cost block; `warm` seeds Sinkhorn's column
/// potentials and is ignored by the exact solver.
pub(crate) fn solve_view(
    cost: ArrayView2<'_, f64>,
    a: &MassVector,
    b: &MassVector,
    solver: &Solver,
    warm: Option<&[f64]>,
) -> Result<TransportPlan> {
    match solver {
        Solver::Sinkhorn(opts) => sinkhorn_view(cost, a, b, opts, warm),
        Solver::Exact => exact_view(cost, a, b),
    }
}

/// OT distance between two point sets with uniform masses.
pub fn ot_distance(src: &WhitenedFeatures, dst: &WhitenedFeatures, solver: &Solver) -> Result<f64> {
    let c = cost_matrix(src, dst)?;
    let plan = solve(&c, &MassVector::uniform(c.nrows()), &MassVector::uniform(c.ncols()), solver)?;
    Ok(plan.cost)
}

/// Source potentials of `new_candidates` in one OT solve between
/// `selected ∪ new_candidates` (uniform masses) and `targets` (uniform).
///
/// Lower potential means the candidate serves target mass more cheaply.
pub fn candidate_potentials(
    selected: Option<&WhitenedFeatures>,
    new_candidates: &WhitenedFeatures,
    targets: &WhitenedFeatures,
    solver: &Solver,
) -> Result<Vec<f64>> {
    let source = match selected {
        Some(s) => s.concat(new_candidates)?,
        None => new_candidates.clone(),
    };
    let offset = source.len() - new_candidates.len();
    let c = cost_matrix(&source, targets)?;
    let plan = solve(&c, &MassVector::uniform(c.nrows()), &MassVector::uniform(c.ncols()), solver)?;
    Ok(plan.dual_row[offset..].to_vec())
}
