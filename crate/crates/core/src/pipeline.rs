//! Run configuration and the end-to-end stages behind each command.
//!
//! Every runner takes already-loaded matrices so that file-based and
//! array-based callers share one code path and produce identical results.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attribution::{self, LdsReport};
use crate::digest::Fingerprint;
use crate::error::{Error, ErrorKind, Result};
use crate::features::{self, FeatureMatrix};
use crate::metric::{self, MetricSpace, ProjectionFamily, ProjectionSpec, WhiteningMethod, WhiteningTransform};
use crate::ot::{self, MassVector, Solver};
use crate::selection::{self, OtmOptions, SelectionResult, SplitMode};
use crate::weighting::{self, RepetitionMode, WeightAssignment};

/// Objective check (`d_OT(selected, targets)` vs `d_OT(all, targets)`) is
/// skipped above this many candidate-target cells.
pub const OBJECTIVE_MAX_CELLS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Project only when the raw dimension exceeds the default target dim.
    Auto,
    None,
    /// Always project to `dim`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub mode: ProjectionMode,
    pub dim: Option<usize>,
    pub seed: u64,
    pub family: ProjectionFamily,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            mode: ProjectionMode::Auto,
            dim: None,
            seed: 0,
            family: ProjectionFamily::Gaussian,
        }
    }
}

impl ProjectionConfig {
    /// Concrete projection for inputs of width `input_dim`.
    pub fn spec(&self, input_dim: usize) -> Result<Option<ProjectionSpec>> {
        Ok(match self.mode {
            ProjectionMode::None => None,
            ProjectionMode::Auto => ProjectionSpec::default_for(input_dim, self.seed).map(|s| ProjectionSpec {
                family: self.family,
                output_dim: self.dim.unwrap_or(s.output_dim).min(input_dim),
                ..s
            }),
            ProjectionMode::Fixed => {
                let dim = self
                    .dim
                    .ok_or_else(|| Error::Config("projection mode \"fixed\" needs dim".into()))?;
                Some(ProjectionSpec {
                    input_dim,
                    output_dim: dim,
                    seed: self.seed,
                    family: self.family,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhiteningConfig {
    pub method: WhiteningMethod,
    pub eps: f64,
    /// Previously written transform to reuse instead of fitting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform: Option<PathBuf>,
}

impl Default for WhiteningConfig {
    fn default() -> Self {
        Self {
            method: WhiteningMethod::Cholesky,
            eps: metric::DEFAULT_EPS,
            transform: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Fixed,
    Otm,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SelectionMode::Fixed),
            "otm" => Ok(SelectionMode::Otm),
            other => Err(Error::Config(format!("unknown selection mode {other:?} (expected fixed|otm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// Selection size for fixed mode.
    pub size: Option<usize>,
    pub k_folds: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Otm,
            size: None,
            k_folds: 10,
            split_mode: SplitMode::Algorithm,
            seed: 0,
        }
    }
}

/// Repetition budget; at most one field may be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition: Option<u64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub match_full: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
}

impl WeightingConfig {
    pub fn is_enabled(&self) -> bool {
        self.repetition.is_some() || self.match_full || self.fraction.is_some()
    }

    /// Budget for `n` candidates and `m` targets, raised to `selected`.
    pub fn budget(&self, n: usize, m: usize, selected: usize) -> Option<u64> {
        let r = if let Some(r) = self.repetition {
            r
        } else if self.match_full {
            weighting::default_repetition(n as u64, m as u64, RepetitionMode::FullMatch)
        } else {
            weighting::default_repetition(n as u64, m as u64, RepetitionMode::Fraction(self.fraction?))
        };
        Some(r.max(selected as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Candidate dataset manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    /// Target dataset manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub projection: ProjectionConfig,
    pub whitening: WhiteningConfig,
    pub solver: Solver,
    pub selection: SelectionConfig,
    pub weighting: WeightingConfig,
    /// Compare `d_OT(selected, targets)` with `d_OT(all, targets)` in the
    /// report (skipped for very large inputs).
    pub objective_check: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            candidates: None,
            targets: None,
            out: None,
            projection: ProjectionConfig::default(),
            whitening: WhiteningConfig::default(),
            solver: Solver::default(),
            selection: SelectionConfig::default(),
            weighting: WeightingConfig::default(),
            objective_check: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Parses a config file; relative paths are taken relative to its
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.candidates);
        fix(&mut cfg.targets);
        fix(&mut cfg.out);
        fix(&mut cfg.whitening.transform);
        Ok(cfg)
    }

    /// Parameter checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if !(self.whitening.eps >= 0.0 && self.whitening.eps.is_finite()) {
            return Err(Error::Config(format!("whitening eps must be >= 0, got {}", self.whitening.eps)));
        }
        if let Solver::Sinkhorn(o) = &self.solver {
            if !(o.reg > 0.0 && o.reg.is_finite()) {
                return Err(Error::Config(format!("sinkhorn reg must be > 0, got {}", o.reg)));
            }
            if !(o.tol > 0.0) || o.max_iter == 0 {
                return Err(Error::Config("sinkhorn tol and max_iter must be positive".into()));
            }
        }
        match self.selection.mode {
            SelectionMode::Fixed if self.selection.size.is_none() => {
                return Err(Error::Config("fixed-size selection needs a size".into()));
            }
            SelectionMode::Otm if self.selection.k_folds == 0 => {
                return Err(Error::Config("k_folds must be at least 1".into()));
            }
            _ => {}
        }
        let w = &self.weighting;
        let set = usize::from(w.repetition.is_some()) + usize::from(w.match_full) + usize::from(w.fraction.is_some());
        if set > 1 {
            return Err(Error::Config("choose one of repetition, match_full, fraction".into()));
        }
        if let Some(p) = w.fraction {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("weighting fraction must be > 0, got {p}")));
            }
        }
        for p in [&self.candidates, &self.targets, &self.whitening.transform].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn required(&self, path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("no {what} manifest given")))
    }

    /// Loads candidate and target datasets named by the config.
    pub fn load_inputs(&self) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let (c, _) = features::load_dataset(&self.required(&self.candidates, "candidate")?)?;
        let (t, _) = features::load_dataset(&self.required(&self.targets, "target")?)?;
        Ok((c, t))
    }
}

/// Pipeline stage, used to tag errors and timings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Metric,
    Select,
    Weights,
    Transport,
    Lds,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Metric => "metric",
            Stage::Select => "select",
            Stage::Weights => "weights",
            Stage::Transport => "ot",
            Stage::Lds => "lds",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn kind(&self) -> ErrorKind {
        self.source.kind()
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> StageResult<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Wall-clock time per stage, in order.
#[derive(Debug, Clone, Default)]
pub struct Timings(pub Vec<(Stage, Duration)>);

impl Timings {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> StageResult<T> {
        let start = Instant::now();
        let out = f().stage(stage);
        self.0.push((stage, start.elapsed()));
        out
    }
}

/// Fingerprint of the metric stage: input contents plus projection and
/// whitening parameters.
pub fn metric_fingerprint(cfg: &RunConfig, candidates: &FeatureMatrix, targets: &FeatureMatrix) -> String {
    let mut f = Fingerprint::new("metric");
    f.str(&candidates.digest()).str(&targets.digest());
    f.str(&serde_json::to_string(&cfg.projection).expect("serializable"));
    f.str(&format!("{:?}", cfg.whitening.method)).f64(cfg.whitening.eps);
    f.finish()
}

/// Fingerprint of a full run: everything that can change its outputs.
/// File locations and thread counts are excluded.
pub fn run_fingerprint(cfg: &RunConfig, candidates: &FeatureMatrix, targets: &FeatureMatrix) -> String {
    let mut f = Fingerprint::new("run");
    f.str(&metric_fingerprint(cfg, candidates, targets));
    f.str(&serde_json::to_string(&cfg.solver).expect("serializable"));
    f.str(&serde_json::to_string(&cfg.selection).expect("serializable"));
    f.str(&serde_json::to_string(&cfg.weighting).expect("serializable"));
    f.u64(u64::from(cfg.objective_check));
    f.finish()
}

#[derive(Serialize, Deserialize)]
struct TransformFile {
    fingerprint: String,
    projection: Option<ProjectionSpec>,
    transform: serde_json::Value,
}

/// Serialized whitening transform tagged with the metric fingerprint of the
/// inputs it was fitted on.
pub fn transform_json(fingerprint: &str, projection: Option<ProjectionSpec>, t: &WhiteningTransform) -> String {
    let doc = TransformFile {
        fingerprint: fingerprint.to_owned(),
        projection,
        transform: serde_json::from_str(&t.to_json()).expect("valid json"),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}

/// Reads a transform file, rejecting it unless it was fitted for
/// `expected_fingerprint`.
pub fn load_transform(path: &Path, expected_fingerprint: &str) -> Result<(Option<ProjectionSpec>, WhiteningTransform)> {
    let doc: TransformFile = features::read_json(path)?;
    if doc.fingerprint != expected_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: expected_fingerprint.to_owned(),
            found: doc.fingerprint,
        });
    }
    let t = WhiteningTransform::from_json(&doc.transform.to_string())?;
    Ok((doc.projection, t))
}

/// Projection, whitening and normalization as configured; reuses the
/// transform file named in the config when there is one.
pub fn build_metric_space(cfg: &RunConfig, candidates: &FeatureMatrix, targets: &FeatureMatrix) -> Result<MetricSpace> {
    let spec = cfg.projection.spec(candidates.ncols())?;
    match &cfg.whitening.transform {
        None => metric::build_metric(candidates, targets, spec.as_ref(), cfg.whitening.method, cfg.whitening.eps),
        Some(path) => {
            let (stored_spec, transform) = load_transform(path, &metric_fingerprint(cfg, candidates, targets))?;
            if stored_spec != spec {
                return Err(Error::Config(format!("{}: projection differs from the config", path.display())));
            }
            let project = |m: &FeatureMatrix| -> Result<ndarray::Array2<f64>> {
                Ok(match &spec {
                    Some(s) => crate::linalg::gemm_nt(m.data(), metric::make_projection(s)?.view()),
                    None => m.data().to_owned(),
                })
            };
            let fp = transform.fingerprint();
            let cw = metric::apply_whitening(&transform, project(candidates)?.view())?;
            let tw = metric::apply_whitening(&transform, project(targets)?.view())?;
            Ok(MetricSpace {
                candidates: metric::normalize_rows(cw, candidates.ids(), &fp)?,
                targets: metric::normalize_rows(tw, targets.ids(), &fp)?,
                transform,
            })
        }
    }
}

/// Comparison of the selection's OT distance with the full pool's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub selected_distance: f64,
    pub pool_distance: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct SelectOutput {
    pub result: SelectionResult,
    pub candidate_ids: Vec<String>,
    pub n_targets: usize,
    pub weights: Option<WeightAssignment>,
    pub objective: Option<ObjectiveCheck>,
    pub timings: Timings,
}

impl SelectOutput {
    pub fn ratio(&self) -> f64 {
        selection::selection_ratio(&self.result, self.candidate_ids.len())
    }

    pub fn to_json(&self) -> String {
        self.result.to_json(&self.candidate_ids)
    }

    /// Human-readable summary: ratio, objective check and the OT trace.
    pub fn report(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let n = self.candidate_ids.len();
        let _ = writeln!(s, "fingerprint: {}", self.result.fingerprint);
        let _ = writeln!(s, "candidates: {n}  targets: {}", self.n_targets);
        let _ = writeln!(s, "selected: {}  ratio: {:.6}", self.result.selected.len(), self.ratio());
        match &self.objective {
            Some(o) => {
                let _ = writeln!(
                    s,
                    "d_OT(selected, targets) = {:.9}\nd_OT(candidates, targets) = {:.9}\nobjective improved: {}",
                    o.selected_distance,
                    o.pool_distance,
                    if o.improved { "yes" } else { "no" }
                );
            }
            None => {
                let _ = writeln!(s, "objective check: skipped");
            }
        }
        if let Some(w) = &self.weights {
            let _ = writeln!(s, "repetition budget: {}", w.repetition);
        }
        let _ = writeln!(s, "\nfold  k  added  selected  ot_distance  accepted");
        for t in &self.result.trace {
            let fold = t.fold.map_or("-".to_string(), |f| f.to_string());
            let d = t.ot_distance.map_or("-".to_string(), |d| format!("{d:.9}"));
            let _ = writeln!(
                s,
                "{fold:>4} {:>2} {:>6} {:>9}  {d:>11}  {}",
                t.iteration, t.added, t.selected, t.accepted
            );
        }
        s
    }

    /// Writes `selection.json`, `selection.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.result
            .write_files(&self.candidate_ids, &dir.join("selection.json"), &dir.join("selection.csv"))?;
        features::write_atomic(&dir.join("report.txt"), self.report().as_bytes())
    }
}

fn uniform_distance(
    space: &MetricSpace,
    rows: Option<&[usize]>,
    solver: &Solver,
) -> Result<ot::TransportPlan> {
    let src = match rows {
        Some(r) => space.candidates.select(r),
        None => space.candidates.clone(),
    };
    let c = ot::cost_matrix(&src, &space.targets)?;
    ot::solve(&c, &MassVector::uniform(c.nrows()), &MassVector::uniform(c.ncols()), solver)
}

/// Weights for `selected` from one OT solve of the selection against all
/// targets.
pub fn weigh_selection(
    space: &MetricSpace,
    selected: &[usize],
    repetition: u64,
    solver: &Solver,
) -> Result<WeightAssignment> {
    let plan = uniform_distance(space, Some(selected), solver)?;
    let ids: Vec<String> = selected.iter().map(|&i| space.candidates.ids()[i].clone()).collect();
    weighting::assign_weights(&ids, &plan.dual_row, repetition)
}

/// Metric, selection, optional weighting and the objective check.
pub fn run_select(cfg: &RunConfig, candidates: &FeatureMatrix, targets: &FeatureMatrix) -> StageResult<SelectOutput> {
    cfg.validate().stage(Stage::Config)?;
    let mut timings = Timings::default();
    let fingerprint = run_fingerprint(cfg, candidates, targets);
    let space = timings.time(Stage::Metric, || build_metric_space(cfg, candidates, targets))?;
    let mut result = timings.time(Stage::Select, || match cfg.selection.mode {
        SelectionMode::Fixed => {
            let size = cfg.selection.size.expect("validated");
            selection::select_fixed(&space.candidates, &space.targets, size, &cfg.solver)
        }
        SelectionMode::Otm => {
            let opts = OtmOptions {
                k_folds: cfg.selection.k_folds,
                seed: cfg.selection.seed,
                split_mode: cfg.selection.split_mode,
            };
            selection::select_otm(&space.candidates, &space.targets, &opts, &cfg.solver)
        }
    })?;
    result.fingerprint = fingerprint;
    let (n, m) = (space.candidates.len(), space.targets.len());
    let weights = match cfg.weighting.budget(n, m, result.selected.len()) {
        Some(r) => Some(timings.time(Stage::Weights, || {
            weigh_selection(&space, &result.selected, r, &cfg.solver)
        })?),
        None => None,
    };
    result.weights = weights.as_ref().map(|w| w.weights.clone());
    let objective = if cfg.objective_check && n * m <= OBJECTIVE_MAX_CELLS && fits_solver(n, m, &cfg.solver) {
        Some(timings.time(Stage::Transport, || {
            let pool_distance = uniform_distance(&space, None, &cfg.solver)?.cost;
            let selected_distance = uniform_distance(&space, Some(&result.selected), &cfg.solver)?.cost;
            Ok(ObjectiveCheck {
                selected_distance,
                pool_distance,
                improved: selected_distance < pool_distance,
            })
        })?)
    } else {
        None
    };
    Ok(SelectOutput {
        result,
        candidate_ids: candidates.ids().to_vec(),
        n_targets: m,
        weights,
        objective,
        timings,
    })
}

fn fits_solver(n: usize, m: usize, solver: &Solver) -> bool {
    !matches!(solver, Solver::Exact) || n * m <= ot::EXACT_MAX_CELLS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub distance: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub solver: Solver,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub converged: bool,
    pub fingerprint: String,
}

/// OT distance between the two datasets in the configured metric.
pub fn run_ot_distance(cfg: &RunConfig, source: &FeatureMatrix, target: &FeatureMatrix) -> StageResult<DistanceReport> {
    cfg.validate().stage(Stage::Config)?;
    let space = build_metric_space(cfg, source, target).stage(Stage::Metric)?;
    let plan = uniform_distance(&space, None, &cfg.solver).stage(Stage::Transport)?;
    Ok(DistanceReport {
        distance: plan.cost,
        n_source: source.nrows(),
        n_target: target.nrows(),
        solver: cfg.solver,
        iterations: plan.iterations,
        marginal_violation: plan.marginal_violation,
        converged: plan.converged,
        fingerprint: run_fingerprint(cfg, source, target),
    })
}

/// Fits the configured metric; returns it with the transform file contents.
pub fn run_whiten(cfg: &RunConfig, candidates: &FeatureMatrix, targets: &FeatureMatrix) -> StageResult<(MetricSpace, String)> {
    cfg.validate().stage(Stage::Config)?;
    let spec = cfg.projection.spec(candidates.ncols()).stage(Stage::Config)?;
    let space = build_metric_space(cfg, candidates, targets).stage(Stage::Metric)?;
    let json = transform_json(&metric_fingerprint(cfg, candidates, targets), spec, &space.transform);
    Ok((space, json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsReport {
    pub ids: Vec<String>,
    pub weights: Vec<u64>,
    pub repetition: u64,
    pub potentials: Vec<f64>,
    pub fingerprint: String,
}

/// Weights for an existing selection under `budget`.
///
/// `selection_fingerprint` is the fingerprint recorded in the selection
/// file; the file is rejected unless `cfg` (the config of the run that made
/// it) reproduces that fingerprint for these inputs.
pub fn run_weights(
    cfg: &RunConfig,
    candidates: &FeatureMatrix,
    targets: &FeatureMatrix,
    selected_ids: &[String],
    selection_fingerprint: &str,
    budget: &WeightingConfig,
) -> StageResult<WeightsReport> {
    cfg.validate().stage(Stage::Config)?;
    if !budget.is_enabled() {
        return Err(Error::Config("no repetition budget given".into())).stage(Stage::Config);
    }
    let expected = run_fingerprint(cfg, candidates, targets);
    if expected != selection_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected,
            found: selection_fingerprint.to_owned(),
        })
        .stage(Stage::Config);
    }
    let index: std::collections::HashMap<&str, usize> =
        candidates.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let selected = selected_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("selected id {id:?} is not a candidate")))
        })
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Load)?;
    let repetition = budget
        .budget(candidates.nrows(), targets.nrows(), selected.len())
        .ok_or_else(|| Error::Config("no repetition budget given".into()))
        .stage(Stage::Config)?;
    let space = build_metric_space(cfg, candidates, targets).stage(Stage::Metric)?;
    let w = weigh_selection(&space, &selected, repetition, &cfg.solver).stage(Stage::Weights)?;
    Ok(WeightsReport {
        ids: w.ids,
        weights: w.weights,
        repetition: w.repetition,
        potentials: w.potentials,
        fingerprint: expected,
    })
}

/// Reads the selected ids and fingerprint from a `selection.json`.
pub fn read_selection_file(path: &Path) -> Result<(Vec<String>, String)> {
    #[derive(Deserialize)]
    struct Doc {
        selected: Vec<String>,
        fingerprint: String,
    }
    let doc: Doc = features::read_json(path)?;
    Ok((doc.selected, doc.fingerprint))
}

/// LDS of stored scores against a subset archive.
pub fn run_lds(scores_dir: &Path, archive_dir: &Path, pooled: bool) -> StageResult<LdsReport> {
    let scores = attribution::load_scores(scores_dir).stage(Stage::Load)?;
    let archive = attribution::load_archive(archive_dir).stage(Stage::Load)?;
    attribution::lds(&scores, &archive, pooled).stage(Stage::Lds)
}
