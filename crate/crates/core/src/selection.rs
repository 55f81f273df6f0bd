//! Greedy target-driven selection: fixed-size selection and OT-distance
//! minimization with k-fold cross-validation.
//!
//! Both schemes grow the selection by nearest-rank sets: at step `k` every
//! target contributes its `k`-th nearest candidate.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, RwLock};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::Fingerprint;
use crate::error::{Error, Result};
use crate::metric::WhitenedFeatures;
use crate::ot::{self, CostMatrix, MassVector, Solver};

/// Candidate rows per GEMM tile when streaming the neighbor table, chosen so
/// one tile of distances stays near 256 MiB.
const STREAM_CELLS: usize = 32 << 20;

/// Per-target candidate lists by ascending WFD, ties by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    lists: Vec<Vec<usize>>,
    k_max: usize,
    n_candidates: usize,
}

impl NeighborTable {
    /// Materialized depth.
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn n_targets(&self) -> usize {
        self.lists.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    /// Candidates of target `j`, nearest first.
    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.lists[j]
    }

    /// True when every candidate appears in every list.
    pub fn is_complete(&self) -> bool {
        self.k_max == self.n_candidates
    }
}

/// First `k` entries of `column` in (distance, index) order.
fn top_k(column: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = column.enumerate().map(|(i, d)| (d, i)).collect();
    let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, cmp);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(cmp);
    // Fresh allocation: an in-place collect would keep the full column's capacity.
    let mut out = Vec::with_capacity(pairs.len());
    out.extend(pairs.iter().map(|p| p.1));
    out
}

/// Exact neighbor lists from a materialized cost matrix (rows = candidates).
pub fn build_neighbor_table(c: &CostMatrix, k_max: usize) -> Result<NeighborTable> {
    if k_max == 0 || k_max > c.nrows() {
        return Err(Error::InvalidArgument(format!(
            "k_max must be in 1..={}, got {k_max}",
            c.nrows()
        )));
    }
    let values = c.values();
    let lists = (0..c.ncols())
        .into_par_iter()
        .map(|j| top_k(values.column(j).iter().copied(), k_max))
        .collect();
    Ok(NeighborTable {
        lists,
        k_max,
        n_candidates: c.nrows(),
    })
}

/// Same table as [`build_neighbor_table`] without holding the full cost
/// matrix: distances are computed for a block of targets at a time.
pub fn build_neighbor_table_streamed(
    candidates: &WhitenedFeatures,
    targets: &WhitenedFeatures,
    k_max: usize,
) -> Result<NeighborTable> {
    let n = candidates.len();
    if k_max == 0 || k_max > n {
        return Err(Error::InvalidArgument(format!("k_max must be in 1..={n}, got {k_max}")));
    }
    if candidates.dim() != targets.dim() {
        return Err(Error::shape("neighbor table", candidates.dim(), targets.dim()));
    }
    let block = (STREAM_CELLS / n).clamp(1, 1024);
    let mut lists = Vec::with_capacity(targets.len());
    for chunk in targets.data().axis_chunks_iter(Axis(0), block) {
        let dist = ot::wfd_matrix(candidates.data(), chunk);
        let part: Vec<Vec<usize>> = (0..chunk.nrows())
            .into_par_iter()
            .map(|j| top_k(dist.column(j).iter().copied(), k_max))
            .collect();
        lists.extend(part);
    }
    Ok(NeighborTable {
        lists,
        k_max,
        n_candidates: n,
    })
}

/// Deduplicated union of the rank-`k` neighbors (1-based) of `targets`,
/// skipping candidates flagged in `exclude`. Sorted ascending.
pub fn nearest_rank_set(
    table: &NeighborTable,
    k: usize,
    targets: &[usize],
    exclude: &[bool],
) -> Result<Vec<usize>> {
    if k == 0 || k > table.k_max {
        return Err(Error::NeighborsExhausted { rank: k });
    }
    let mut out: Vec<usize> = targets
        .iter()
        .map(|&j| table.lists[j][k - 1])
        .filter(|&i| !exclude[i])
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Neighbor table that deepens itself (doubling) when a rank beyond its depth
/// is requested. Prefixes of the exact order do not depend on depth, so
/// results do not depend on when growth happens.
struct GrowingTable<'a> {
    candidates: &'a WhitenedFeatures,
    targets: &'a WhitenedFeatures,
    table: RwLock<Arc<NeighborTable>>,
}

impl<'a> GrowingTable<'a> {
    fn new(candidates: &'a WhitenedFeatures, targets: &'a WhitenedFeatures, k0: usize) -> Result<Self> {
        let k0 = k0.clamp(1, candidates.len());
        let table = build_neighbor_table_streamed(candidates, targets, k0)?;
        Ok(Self {
            candidates,
            targets,
            table: RwLock::new(Arc::new(table)),
        })
    }

    /// Rank set, or `None` once `k` exceeds the number of candidates.
    fn rank_set(&self, k: usize, targets: &[usize], exclude: &[bool]) -> Result<Option<Vec<usize>>> {
        if k > self.candidates.len() {
            return Ok(None);
        }
        let current = Arc::clone(&self.table.read().expect("table lock"));
        let table = if k <= current.k_max() {
            current
        } else {
            let mut guard = self.table.write().expect("table lock");
            if guard.k_max() < k {
                let depth = (guard.k_max() * 2).max(k).min(self.candidates.len());
                log::debug!("deepening neighbor table to {depth}");
                *guard = Arc::new(build_neighbor_table_streamed(self.candidates, self.targets, depth)?);
            }
            Arc::clone(&guard)
        };
        nearest_rank_set(&table, k, targets, exclude).map(Some)
    }
}

/// One expansion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold: Option<usize>,
    /// Neighbor rank `k` of this step.
    pub iteration: usize,
    /// Candidates offered by the step (`|D_k|`).
    pub added: usize,
    /// Selection size after the step.
    pub selected: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ot_distance: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub selected: usize,
    pub stop_iteration: usize,
    pub final_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Candidate indices in order of selection, without duplicates.
    pub selected: Vec<usize>,
    pub weights: Option<Vec<u64>>,
    pub trace: Vec<TraceRecord>,
    pub per_fold: BTreeMap<usize, FoldSummary>,
    pub fingerprint: String,
}

/// `|selected| / n`.
pub fn selection_ratio(result: &SelectionResult, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    result.selected.len() as f64 / n as f64
}

fn check_pair(candidates: &WhitenedFeatures, targets: &WhitenedFeatures) -> Result<()> {
    if candidates.dim() != targets.dim() {
        return Err(Error::shape("selection inputs", candidates.dim(), targets.dim()));
    }
    Ok(())
}

fn selection_fingerprint(
    tag: &str,
    candidates: &WhitenedFeatures,
    targets: &WhitenedFeatures,
    params: &str,
) -> String {
    let mut f = Fingerprint::new(tag);
    f.matrix(candidates.data()).matrix(targets.data()).str(params);
    f.finish()
}

/// Source potentials of `new` in one uniform-mass solve of `selected ∪ new`
/// against all targets.
fn batch_potentials(
    candidates: &WhitenedFeatures,
    selected: &[usize],
    new: &[usize],
    targets: &WhitenedFeatures,
    solver: &Solver,
) -> Result<Vec<f64>> {
    let rows: Vec<usize> = selected.iter().chain(new).copied().collect();
    let cost = ot::wfd_matrix(candidates.data().select(Axis(0), &rows).view(), targets.data());
    let plan = ot::solve_duals(
        cost.view(),
        &MassVector::uniform(rows.len()),
        &MassVector::uniform(targets.len()),
        solver,
        None,
    )?;
    if !plan.converged {
        log::warn!("potential solve did not converge (violation {:e})", plan.marginal_violation);
    }
    Ok(plan.dual_row[selected.len()..].to_vec())
}

/// Fixed-size selection of exactly `size` candidates.
///
/// Rank sets are added whole while they fit; the set that would overflow is
/// ranked by potential (ascending, ties by index) and truncated.
pub fn select_fixed(
    candidates: &WhitenedFeatures,
    targets: &WhitenedFeatures,
    size: usize,
    solver: &Solver,
) -> Result<SelectionResult> {
    check_pair(candidates, targets)?;
    let n = candidates.len();
    if size == 0 || size > n {
        return Err(Error::InvalidArgument(format!("selection size must be in 1..={n}, got {size}")));
    }
    let params = format!("size={size};solver={}", serde_json::to_string(solver).expect("serializable"));
    let fingerprint = selection_fingerprint("select_fixed", candidates, targets, &params);
    if size == n {
        return Ok(SelectionResult {
            selected: (0..n).collect(),
            weights: None,
            trace: vec![TraceRecord {
                fold: None,
                iteration: 0,
                added: n,
                selected: n,
                ot_distance: None,
                accepted: true,
            }],
            per_fold: BTreeMap::new(),
            fingerprint,
        });
    }

    let m = targets.len();
    let all_targets: Vec<usize> = (0..m).collect();
    let table = GrowingTable::new(candidates, targets, (4 * size.div_ceil(m)).max(64))?;
    let mut chosen = vec![false; n];
    let mut selected = Vec::with_capacity(size);
    let mut trace = Vec::new();
    for k in 1.. {
        let dk = table
            .rank_set(k, &all_targets, &chosen)?
            .ok_or(Error::NeighborsExhausted { rank: k })?;
        if dk.is_empty() {
            continue;
        }
        let offered = dk.len();
        if selected.len() + dk.len() <= size {
            for &i in &dk {
                chosen[i] = true;
            }
            selected.extend(dk);
        } else {
            let phi = batch_potentials(candidates, &selected, &dk, targets, solver)?;
            let mut ranked: Vec<(f64, usize)> = phi.into_iter().zip(dk).collect();
            ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let take = size - selected.len();
            selected.extend(ranked.into_iter().take(take).map(|p| p.1));
        }
        trace.push(TraceRecord {
            fold: None,
            iteration: k,
            added: offered,
            selected: selected.len(),
            ot_distance: None,
            accepted: true,
        });
        if selected.len() == size {
            break;
        }
    }
    Ok(SelectionResult {
        selected,
        weights: None,
        trace,
        per_fold: BTreeMap::new(),
        fingerprint,
    })
}

/// Which target split drives selection and which is held out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Select with the targets outside the fold, evaluate on the fold.
    #[default]
    Algorithm,
    /// Select with the fold, evaluate on the targets outside it.
    Prose,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algorithm" => Ok(SplitMode::Algorithm),
            "prose" => Ok(SplitMode::Prose),
            other => Err(Error::InvalidArgument(format!(
                "unknown split mode {other:?} (expected algorithm|prose)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtmOptions {
    pub k_folds: usize,
    pub seed: u64,
    pub split_mode: SplitMode,
}

impl Default for OtmOptions {
    fn default() -> Self {
        Self {
            k_folds: 10,
            seed: 0,
            split_mode: SplitMode::Algorithm,
        }
    }
}

/// Shuffles `0..m` with `seed` and cuts it into `k` near-equal folds (the
/// first `m % k` folds get one extra). Each fold is sorted.
pub fn target_folds(m: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (m / k, m % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    folds
}

/// Tolerance of the stop test: with Sinkhorn the distance is only known to
/// about its marginal tolerance, and mathematically equal distances (e.g.
/// after adding exact duplicates) must not stop the expansion.
fn stop_slack(solver: &Solver) -> f64 {
    match solver {
        Solver::Exact => 1e-9,
        Solver::Sinkhorn(o) => (2.0 * o.tol).max(1e-9),
    }
}

struct FoldRun {
    order: Vec<usize>,
    trace: Vec<TraceRecord>,
    summary: FoldSummary,
}

fn run_fold(
    fold: usize,
    table: &GrowingTable<'_>,
    select_targets: &[usize],
    eval_targets: &[usize],
    solver: &Solver,
) -> Result<FoldRun> {
    let candidates = table.candidates;
    let n = candidates.len();
    let eval = table.targets.data().select(Axis(0), eval_targets);
    let b = MassVector::uniform(eval_targets.len());
    let slack = stop_slack(solver);

    let mut chosen = vec![false; n];
    let mut order: Vec<usize> = Vec::new();
    let mut cost = Array2::<f64>::zeros((0, eval_targets.len()));
    let mut warm: Option<Vec<f64>> = None;
    let mut d_pre = f64::INFINITY;
    let mut trace = Vec::new();
    let mut stop_iteration = 0;
    for k in 1.. {
        if order.len() == n {
            break;
        }
        let Some(dk) = table.rank_set(k, select_targets, &chosen)? else {
            break;
        };
        stop_iteration = k;
        if dk.is_empty() {
            continue;
        }
        let rows = ot::wfd_matrix(candidates.data().select(Axis(0), &dk).view(), eval.view());
        let stacked = stack(cost.view(), rows.view());
        let plan = ot::solve_duals(
            stacked.view(),
            &MassVector::uniform(stacked.nrows()),
            &b,
            solver,
            warm.as_deref(),
        )?;
        if !plan.converged {
            log::warn!(
                "fold {fold} step {k}: OT solve did not converge (violation {:e})",
                plan.marginal_violation
            );
        }
        let d = plan.cost;
        let accepted = !(d > d_pre + slack);
        trace.push(TraceRecord {
            fold: Some(fold),
            iteration: k,
            added: dk.len(),
            selected: order.len() + if accepted { dk.len() } else { 0 },
            ot_distance: Some(d),
            accepted,
        });
        if !accepted {
            break;
        }
        for &i in &dk {
            chosen[i] = true;
        }
        order.extend(dk);
        cost = stacked;
        warm = Some(plan.dual_col);
        d_pre = d;
    }
    Ok(FoldRun {
        summary: FoldSummary {
            selected: order.len(),
            stop_iteration,
            final_distance: d_pre,
        },
        order,
        trace,
    })
}

fn stack(top: ArrayView2<'_, f64>, bottom: ArrayView2<'_, f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[top, bottom]).expect("matching widths")
}

/// OT-distance minimization with k-fold cross-validation over the targets.
///
/// Each fold expands its selection by rank sets of its selection targets and
/// stops at the first step whose held-out OT distance exceeds the previous
/// one; that step is discarded. The result is the union over folds, in fold
/// order. With `k_folds = 1` the full target set both selects and evaluates.
pub fn select_otm(
    candidates: &WhitenedFeatures,
    targets: &WhitenedFeatures,
    opts: &OtmOptions,
    solver: &Solver,
) -> Result<SelectionResult> {
    check_pair(candidates, targets)?;
    let m = targets.len();
    if opts.k_folds == 0 || opts.k_folds > m {
        return Err(Error::InvalidArgument(format!(
            "k_folds must be in 1..={m} (number of targets), got {}",
            opts.k_folds
        )));
    }
    let params = format!(
        "otm={};solver={}",
        serde_json::to_string(opts).expect("serializable"),
        serde_json::to_string(solver).expect("serializable")
    );
    let fingerprint = selection_fingerprint("select_otm", candidates, targets, &params);

    let table = GrowingTable::new(candidates, targets, 64)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = if opts.k_folds == 1 {
        vec![((0..m).collect(), (0..m).collect())]
    } else {
        target_folds(m, opts.k_folds, opts.seed)
            .into_iter()
            .map(|fold| {
                let inside: HashSet<usize> = fold.iter().copied().collect();
                let rest: Vec<usize> = (0..m).filter(|j| !inside.contains(j)).collect();
                match opts.split_mode {
                    SplitMode::Algorithm => (rest, fold),
                    SplitMode::Prose => (fold, rest),
                }
            })
            .collect()
    };
    let runs: Vec<FoldRun> = splits
        .par_iter()
        .enumerate()
        .map(|(f, (sel, eval))| run_fold(f, &table, sel, eval, solver))
        .collect::<Result<_>>()?;

    let mut seen = vec![false; candidates.len()];
    let mut selected = Vec::new();
    let mut trace = Vec::new();
    let mut per_fold = BTreeMap::new();
    for (f, run) in runs.into_iter().enumerate() {
        for i in run.order {
            if !seen[i] {
                seen[i] = true;
                selected.push(i);
            }
        }
        trace.extend(run.trace);
        per_fold.insert(f, run.summary);
    }
    Ok(SelectionResult {
        selected,
        weights: None,
        trace,
        per_fold,
        fingerprint,
    })
}

#[derive(Serialize)]
struct ResultDoc<'a> {
    selected: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<&'a [u64]>,
    ratio: f64,
    trace: &'a [TraceRecord],
    per_fold: &'a BTreeMap<usize, FoldSummary>,
    fingerprint: &'a str,
}

impl SelectionResult {
    /// JSON document with selected sample ids in place of indices.
    pub fn to_json(&self, candidate_ids: &[String]) -> String {
        let doc = ResultDoc {
            selected: self.selected.iter().map(|&i| candidate_ids[i].as_str()).collect(),
            weights: self.weights.as_deref(),
            ratio: selection_ratio(self, candidate_ids.len()),
            trace: &self.trace,
            per_fold: &self.per_fold,
            fingerprint: &self.fingerprint,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
        s.push('\n');
        s
    }

    /// Two-column `id,weight` CSV; weight is 1 when no weights were assigned.
    pub fn to_csv(&self, candidate_ids: &[String]) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv {
            path: "<selection>".into(),
            message: e.to_string(),
        };
        w.write_record(["id", "weight"]).map_err(csv_err)?;
        for (pos, &i) in self.selected.iter().enumerate() {
            let weight = self.weights.as_ref().map_or(1, |ws| ws[pos]);
            w.write_record([candidate_ids[i].as_str(), &weight.to_string()])
                .map_err(csv_err)?;
        }
        let mut out = w.into_inner().map_err(|e| Error::Csv {
            path: "<selection>".into(),
            message: e.to_string(),
        })?;
        out.flush().ok();
        Ok(out)
    }

    pub fn write_files(&self, candidate_ids: &[String], json: &Path, csv: &Path) -> Result<()> {
        crate::features::write_atomic(json, self.to_json(candidate_ids).as_bytes())?;
        crate::features::write_atomic(csv, &self.to_csv(candidate_ids)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn unit(rows: Array2<f64>) -> WhitenedFeatures {
        let n = rows.nrows();
        crate::metric::normalize_rows(rows, &crate::features::default_ids(n), "t").unwrap()
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> WhitenedFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unit(Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn table_single_candidate() {
        let c = CostMatrix::from_array(array![[0.3, 0.9, 0.1]]).unwrap();
        let t = build_neighbor_table(&c, 1).unwrap();
        for j in 0..3 {
            assert_eq!(t.neighbors(j), &[0]);
        }
    }

    #[test]
    fn table_orders_by_distance_then_index() {
        let c = CostMatrix::from_array(array![[0.2], [0.1], [0.1]]).unwrap();
        let t = build_neighbor_table(&c, 3).unwrap();
        assert_eq!(t.neighbors(0), &[1, 2, 0]);
        assert!(build_neighbor_table(&c, 4).is_err());
        assert!(build_neighbor_table(&c, 0).is_err());
    }

    #[test]
    fn table_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = CostMatrix::from_array(Array2::from_shape_fn((50, 10), |_| rng.gen_range(0.0..2.0))).unwrap();
        let t = build_neighbor_table(&c, 50).unwrap();
        for j in 0..10 {
            let mut oracle: Vec<usize> = (0..50).collect();
            oracle.sort_by(|&a, &b| c.get(a, j).partial_cmp(&c.get(b, j)).unwrap().then(a.cmp(&b)));
            assert_eq!(t.neighbors(j), oracle.as_slice());
        }
        let shallow = build_neighbor_table(&c, 7).unwrap();
        for j in 0..10 {
            assert_eq!(shallow.neighbors(j), &t.neighbors(j)[..7]);
        }
    }

    #[test]
    fn streamed_table_matches_materialized() {
        let cands = random_unit(40, 5, 1);
        let tgts = random_unit(9, 5, 2);
        let c = ot::cost_matrix(&cands, &tgts).unwrap();
        assert_eq!(
            build_neighbor_table_streamed(&cands, &tgts, 13).unwrap(),
            build_neighbor_table(&c, 13).unwrap()
        );
    }

    #[test]
    fn rank_set_dedupes_and_excludes() {
        let c = CostMatrix::from_array(array![[0.1, 0.1], [0.5, 0.6], [0.9, 0.2]]).unwrap();
        let t = build_neighbor_table(&c, 3).unwrap();
        assert_eq!(nearest_rank_set(&t, 1, &[0, 1], &[false; 3]).unwrap(), vec![0]);
        assert_eq!(nearest_rank_set(&t, 2, &[0, 1], &[false; 3]).unwrap(), vec![1, 2]);
        assert_eq!(nearest_rank_set(&t, 2, &[0, 1], &[false, false, true]).unwrap(), vec![1]);
        assert!(nearest_rank_set(&t, 4, &[0], &[false; 3]).is_err());
    }

    #[test]
    fn rank_set_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = CostMatrix::from_array(Array2::from_shape_fn((30, 8), |_| rng.gen_range(0.0..2.0))).unwrap();
        let t = build_neighbor_table(&c, 30).unwrap();
        let exclude: Vec<bool> = (0..30).map(|i| i % 4 == 0).collect();
        let subset = [1, 3, 4, 7];
        for k in 1..=30 {
            let mut oracle = HashSet::new();
            for &j in &subset {
                let mut col: Vec<usize> = (0..30).collect();
                col.sort_by(|&a, &b| c.get(a, j).partial_cmp(&c.get(b, j)).unwrap().then(a.cmp(&b)));
                if !exclude[col[k - 1]] {
                    oracle.insert(col[k - 1]);
                }
            }
            let mut oracle: Vec<usize> = oracle.into_iter().collect();
            oracle.sort();
            assert_eq!(nearest_rank_set(&t, k, &subset, &exclude).unwrap(), oracle);
        }
    }

    #[test]
    fn fixed_full_pool() {
        let c = random_unit(6, 3, 4);
        let t = random_unit(2, 3, 5);
        let r = select_fixed(&c, &t, 6, &Solver::default()).unwrap();
        assert_eq!(r.selected, (0..6).collect::<Vec<_>>());
        assert_eq!(selection_ratio(&r, 6), 1.0);
        assert!(select_fixed(&c, &t, 0, &Solver::default()).is_err());
        assert!(select_fixed(&c, &t, 7, &Solver::default()).is_err());
    }

    #[test]
    fn fixed_takes_distinct_nearest_neighbors() {
        // targets along the axes, each with one candidate right next to it
        let t = unit(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let c = unit(array![
            [-1.0, -1.0, -0.2],
            [0.0, 1.0, 0.01],
            [1.0, 0.01, 0.0],
            [-1.0, -0.3, -1.0],
            [0.01, 0.0, 1.0],
        ]);
        let r = select_fixed(&c, &t, 3, &Solver::Exact).unwrap();
        assert_eq!(r.selected, vec![1, 2, 4]);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.trace[0].iteration, 1);
    }

    #[test]
    fn fixed_size_is_exact_and_monotone() {
        let c = random_unit(60, 4, 8);
        let t = random_unit(7, 4, 9);
        for s in [1, 5, 13, 59] {
            let r = select_fixed(&c, &t, s, &Solver::default()).unwrap();
            assert_eq!(r.selected.len(), s);
            let uniq: HashSet<_> = r.selected.iter().collect();
            assert_eq!(uniq.len(), s);
            assert!(r.trace.windows(2).all(|w| w[0].selected <= w[1].selected));
        }
    }

    #[test]
    fn folds_partition_targets() {
        let folds = target_folds(23, 5, 42);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(folds, target_folds(23, 5, 42));
        assert_ne!(folds, target_folds(23, 5, 43));
    }

    #[test]
    fn otm_rejects_bad_folds() {
        let c = random_unit(10, 3, 1);
        let t = random_unit(4, 3, 2);
        for k in [0, 5] {
            let opts = OtmOptions { k_folds: k, ..Default::default() };
            assert!(matches!(
                select_otm(&c, &t, &opts, &Solver::Exact),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn otm_first_step_always_accepted() {
        let c = random_unit(30, 3, 5);
        let t = random_unit(6, 3, 6);
        for mode in [SplitMode::Algorithm, SplitMode::Prose] {
            let opts = OtmOptions { k_folds: 3, seed: 1, split_mode: mode };
            let r = select_otm(&c, &t, &opts, &Solver::Exact).unwrap();
            for f in 0..3 {
                let first = r.trace.iter().find(|x| x.fold == Some(f)).unwrap();
                assert_eq!(first.iteration, 1);
                assert!(first.accepted);
                assert!(r.per_fold[&f].selected >= 1);
            }
        }
    }

    #[test]
    fn otm_trace_shape() {
        let c = random_unit(40, 3, 7);
        let t = random_unit(10, 3, 8);
        let opts = OtmOptions { k_folds: 5, seed: 3, ..Default::default() };
        let r = select_otm(&c, &t, &opts, &Solver::Exact).unwrap();
        for f in 0..5 {
            let steps: Vec<&TraceRecord> = r.trace.iter().filter(|x| x.fold == Some(f)).collect();
            let accepted: Vec<f64> = steps.iter().filter(|x| x.accepted).map(|x| x.ot_distance.unwrap()).collect();
            assert!(accepted.windows(2).all(|w| w[1] <= w[0] + 1e-9));
            if let Some(last) = steps.last().filter(|x| !x.accepted) {
                assert!(last.ot_distance.unwrap() > *accepted.last().unwrap());
            }
        }
        let uniq: HashSet<_> = r.selected.iter().collect();
        assert_eq!(uniq.len(), r.selected.len());
    }

    #[test]
    fn otm_single_fold_uses_all_targets() {
        let c = random_unit(20, 3, 9);
        let t = random_unit(5, 3, 10);
        let opts = OtmOptions { k_folds: 1, ..Default::default() };
        let r = select_otm(&c, &t, &opts, &Solver::Exact).unwrap();
        assert_eq!(r.per_fold.len(), 1);
        let table = build_neighbor_table(&ot::cost_matrix(&c, &t).unwrap(), 1).unwrap();
        let first = nearest_rank_set(&table, 1, &[0, 1, 2, 3, 4], &[false; 20]).unwrap();
        assert!(first.iter().all(|i| r.selected.contains(i)));
    }

    #[test]
    fn result_serialization() {
        let r = SelectionResult {
            selected: vec![2, 0],
            weights: Some(vec![3, 1]),
            trace: vec![],
            per_fold: BTreeMap::new(),
            fingerprint: "abc".into(),
        };
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let v: serde_json::Value = serde_json::from_str(&r.to_json(&ids)).unwrap();
        assert_eq!(v["selected"], serde_json::json!(["c", "a"]));
        assert_eq!(v["weights"], serde_json::json!([3, 1]));
        assert_eq!(v["fingerprint"], "abc");
        assert!((v["ratio"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let csv = String::from_utf8(r.to_csv(&ids).unwrap()).unwrap();
        assert_eq!(csv, "id,weight\nc,3\na,1\n");
    }
}
