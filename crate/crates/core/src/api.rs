//! Array-in, result-out entry points mirroring the command-line tools.
//!
//! Inputs are validated and copied into engine-owned matrices once; rows get
//! positional ids (`"0"`, `"1"`, ...), the same ids the file writers default
//! to, so a run here and a run over files holding the same arrays produce the
//! same fingerprints and results.

use ndarray::{Array2, ArrayView2};

use crate::attribution::{self, AttributionScores, LdsReport, ScoreMethod, SubsetArchive};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::metric::MetricSpace;
use crate::pipeline::{self, DistanceReport, RunConfig, SelectOutput, StageContext, StageResult};
use crate::weighting::{self, WeightAssignment};

fn matrix(view: ArrayView2<'_, f64>, what: &'static str) -> Result<FeatureMatrix> {
    if view.nrows() == 0 || view.ncols() == 0 {
        return Err(Error::shape(what, "at least 1x1", format!("{}x{}", view.nrows(), view.ncols())));
    }
    FeatureMatrix::from_array(view.to_owned())
}

fn inputs(
    candidates: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> StageResult<(FeatureMatrix, FeatureMatrix)> {
    let c = matrix(candidates, "candidate array").stage(pipeline::Stage::Load)?;
    let t = matrix(targets, "target array").stage(pipeline::Stage::Load)?;
    Ok((c, t))
}

/// Selection (and weights, if configured) over in-memory arrays.
/// Path fields of `cfg` other than `whitening.transform` are ignored.
pub fn select(
    candidates: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    cfg: &RunConfig,
) -> StageResult<SelectOutput> {
    let (c, t) = inputs(candidates, targets)?;
    let mut cfg = cfg.clone();
    cfg.candidates = None;
    cfg.targets = None;
    pipeline::run_select(&cfg, &c, &t)
}

pub fn ot_distance(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    cfg: &RunConfig,
) -> StageResult<DistanceReport> {
    let (s, t) = inputs(source, target)?;
    pipeline::run_ot_distance(cfg, &s, &t)
}

/// Fitted metric space and the transform file contents.
pub fn whiten(
    candidates: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    cfg: &RunConfig,
) -> StageResult<(MetricSpace, String)> {
    let (c, t) = inputs(candidates, targets)?;
    pipeline::run_whiten(cfg, &c, &t)
}

pub fn weights(potentials: &[f64], repetition: u64) -> Result<WeightAssignment> {
    weighting::assign_weights(&crate::features::default_ids(potentials.len()), potentials, repetition)
}

/// LDS of a score matrix against 0/1 masks and recorded outputs.
pub fn lds(
    scores: ArrayView2<'_, f64>,
    masks: ArrayView2<'_, f64>,
    outputs: ArrayView2<'_, f64>,
    pooled: bool,
) -> Result<LdsReport> {
    let scores = AttributionScores::new(scores.to_owned(), ScoreMethod::NegWfd, 1)?;
    if let Some(v) = masks.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidArgument(format!("mask entry {v} is not 0 or 1")));
    }
    let masks: Array2<bool> = masks.mapv(|v| v == 1.0);
    let archive = SubsetArchive::new(masks, outputs.to_owned())?;
    attribution::lds(&scores, &archive, pooled)
}
