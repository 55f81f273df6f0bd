//! Attribution scores (TracIn, negative WFD) and the linear datamodeling
//! score (LDS) harness.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, Dtype, FeatureMatrix};
use crate::linalg;
use crate::metric::{self, ProjectionSpec, WhitenedFeatures, WhiteningMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    Tracin,
    NegWfd,
}

/// `n_candidates x n_targets` attribution matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionScores {
    scores: Array2<f64>,
    method: ScoreMethod,
    ensemble_size: usize,
}

impl AttributionScores {
    pub fn new(scores: Array2<f64>, method: ScoreMethod, ensemble_size: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::shape("attribution scores", "non-empty", format!("{:?}", scores.dim())));
        }
        if let Some(((row, col), &value)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                row,
                col,
                value,
                offset: None,
            });
        }
        if ensemble_size == 0 {
            return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
        }
        Ok(Self {
            scores,
            method,
            ensemble_size,
        })
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble_size
    }

    pub fn n_candidates(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.scores.ncols()
    }
}

/// `tau[i][j] = sum_c lr_c * <cand_c[i], tgt_c[j]>` over checkpoints `c`.
pub fn tracin_score(
    candidate_grads: &[FeatureMatrix],
    target_grads: &[FeatureMatrix],
    lrs: &[f64],
) -> Result<AttributionScores> {
    if candidate_grads.is_empty() {
        return Err(Error::InvalidArgument("tracin needs at least one checkpoint".into()));
    }
    if candidate_grads.len() != target_grads.len() || lrs.len() != candidate_grads.len() {
        return Err(Error::shape(
            "tracin checkpoints",
            candidate_grads.len(),
            format!("{} target, {} lrs", target_grads.len(), lrs.len()),
        ));
    }
    if let Some(lr) = lrs.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    let (n, m) = (candidate_grads[0].nrows(), target_grads[0].nrows());
    let mut tau = Array2::<f64>::zeros((n, m));
    for ((c, t), &lr) in candidate_grads.iter().zip(target_grads).zip(lrs) {
        if c.nrows() != n || t.nrows() != m || c.ncols() != t.ncols() {
            return Err(Error::shape(
                "tracin checkpoint",
                format!("{n}x{} / {m}x{}", c.ncols(), c.ncols()),
                format!("{}x{} / {}x{}", c.nrows(), c.ncols(), t.nrows(), t.ncols()),
            ));
        }
        tau.scaled_add(lr, &linalg::gemm_nt(c.data(), t.data()));
    }
    AttributionScores::new(tau, ScoreMethod::Tracin, 1)
}

/// `tau[i][j] = -wfd(cand_i, tgt_j)`.
pub fn neg_wfd_score(candidates: &WhitenedFeatures, targets: &WhitenedFeatures) -> Result<AttributionScores> {
    let c = crate::ot::cost_matrix(candidates, targets)?;
    AttributionScores::new(c.values().mapv(|v| -v), ScoreMethod::NegWfd, 1)
}

/// Whether ensemble members share one whitening fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhiteningScope {
    /// One transform fitted on the rows of every member.
    #[default]
    Shared,
    /// Each member fits its own transform.
    PerMember,
}

/// Negative-WFD scores averaged over ensemble members, each member being a
/// (candidate, target) feature pair from one model.
pub fn neg_wfd_ensemble(
    members: &[(FeatureMatrix, FeatureMatrix)],
    projection: Option<&ProjectionSpec>,
    method: WhiteningMethod,
    eps: f64,
    scope: WhiteningScope,
) -> Result<AttributionScores> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let projected: Vec<(Array2<f64>, Array2<f64>)> = members
        .iter()
        .map(|(c, t)| {
            if c.ncols() != t.ncols() {
                return Err(Error::shape("ensemble member", c.ncols(), t.ncols()));
            }
            Ok(match projection {
                Some(spec) => {
                    let p = metric::make_projection(spec)?;
                    (linalg::gemm_nt(c.data(), p.view()), linalg::gemm_nt(t.data(), p.view()))
                }
                None => (c.data().to_owned(), t.data().to_owned()),
            })
        })
        .collect::<Result<_>>()?;
    let shared = match scope {
        WhiteningScope::Shared => {
            let views: Vec<ArrayView2<'_, f64>> = projected
                .iter()
                .flat_map(|(c, t)| [c.view(), t.view()])
                .collect();
            Some(metric::fit_whitening_rows(&views, method, eps)?)
        }
        WhiteningScope::PerMember => None,
    };
    let runs = projected
        .iter()
        .zip(members)
        .map(|((c, t), (cm, tm))| {
            let transform = match &shared {
                Some(t) => t.clone(),
                None => metric::fit_whitening_rows(&[c.view(), t.view()], method, eps)?,
            };
            let fp = transform.fingerprint();
            let cw = metric::normalize_rows(metric::apply_whitening(&transform, c.view())?, cm.ids(), &fp)?;
            let tw = metric::normalize_rows(metric::apply_whitening(&transform, t.view())?, tm.ids(), &fp)?;
            neg_wfd_score(&cw, &tw)
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble_scores(&runs)
}

/// Entrywise mean of runs that share a shape and method.
pub fn ensemble_scores(runs: &[AttributionScores]) -> Result<AttributionScores> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score runs to ensemble".into()))?;
    let mut sum = Array2::<f64>::zeros(first.scores.dim());
    for r in runs {
        if r.scores.dim() != first.scores.dim() {
            return Err(Error::shape(
                "ensemble scores",
                format!("{:?}", first.scores.dim()),
                format!("{:?}", r.scores.dim()),
            ));
        }
        if r.method != first.method {
            return Err(Error::InvalidArgument("cannot ensemble scores of different methods".into()));
        }
        sum += &r.scores;
    }
    sum /= runs.len() as f64;
    AttributionScores::new(sum, first.method, runs.len())
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman inputs", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman inputs must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Subsets used to retrain models, and the outputs those models produced on
/// each target.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetArchive {
    masks: Array2<bool>,
    outputs: Array2<f64>,
}

impl SubsetArchive {
    pub fn new(masks: Array2<bool>, outputs: Array2<f64>) -> Result<Self> {
        if masks.nrows() != outputs.nrows() {
            return Err(Error::shape("subset archive rows", masks.nrows(), outputs.nrows()));
        }
        if masks.is_empty() || outputs.ncols() == 0 {
            return Err(Error::shape("subset archive", "non-empty", format!("{:?}", masks.dim())));
        }
        if let Some(r) = masks.rows().into_iter().position(|row| !row.iter().any(|&b| b)) {
            return Err(Error::InvalidArgument(format!("subset mask {r} selects no samples")));
        }
        if let Some(((row, col), &value)) = outputs.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                row,
                col,
                value,
                offset: None,
            });
        }
        Ok(Self { masks, outputs })
    }

    pub fn masks(&self) -> ArrayView2<'_, bool> {
        self.masks.view()
    }

    pub fn outputs(&self) -> ArrayView2<'_, f64> {
        self.outputs.view()
    }

    pub fn len(&self) -> usize {
        self.masks.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    /// Correlation per target; `None` where predictions or outputs were
    /// constant across masks.
    pub per_target: Vec<Option<f64>>,
    /// Mean over targets with a defined correlation.
    pub mean: f64,
    /// Targets whose correlation was undefined.
    pub degenerate: Vec<usize>,
    /// Single correlation over every (mask, target) pair, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pooled: Option<f64>,
}

/// Linear datamodeling score: per target, the Spearman correlation between
/// subset-sum predictions `sum_{i in S} tau[i][j]` and recorded outputs.
pub fn lds(scores: &AttributionScores, archive: &SubsetArchive, pooled: bool) -> Result<LdsReport> {
    if archive.masks.ncols() != scores.n_candidates() || archive.outputs.ncols() != scores.n_targets() {
        return Err(Error::shape(
            "lds",
            format!("{}x{}", scores.n_candidates(), scores.n_targets()),
            format!("{}x{}", archive.masks.ncols(), archive.outputs.ncols()),
        ));
    }
    if archive.len() < 2 {
        return Err(Error::InvalidArgument("lds needs at least two subsets".into()));
    }
    let indicator = archive.masks.mapv(|b| if b { 1.0 } else { 0.0 });
    let predictions = indicator.dot(&scores.scores);
    let per_target: Vec<Option<f64>> = (0..scores.n_targets())
        .into_par_iter()
        .map(|j| {
            let p = predictions.column(j).to_vec();
            let o = archive.outputs.column(j).to_vec();
            match spearman(&p, &o) {
                Ok(r) => Ok(Some(r)),
                Err(Error::ZeroVariance(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = per_target.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::ZeroVariance("every target's prediction or output"));
    }
    let degenerate: Vec<usize> = per_target
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(j, _)| j)
        .collect();
    if !degenerate.is_empty() {
        log::warn!("lds undefined for {} constant target(s)", degenerate.len());
    }
    let pooled = if pooled {
        let p: Vec<f64> = predictions.iter().copied().collect();
        let o: Vec<f64> = archive.outputs.iter().copied().collect();
        Some(spearman(&p, &o)?)
    } else {
        None
    };
    Ok(LdsReport {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        per_target,
        degenerate,
        pooled,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    masks: PathBuf,
    outputs: PathBuf,
    count: usize,
    n_candidates: usize,
    n_targets: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoresManifest {
    method: ScoreMethod,
    ensemble_size: usize,
    scores: PathBuf,
    n_candidates: usize,
    n_targets: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    fingerprint: Option<String>,
}

pub const ARCHIVE_MANIFEST: &str = "archive.json";
pub const SCORES_MANIFEST: &str = "scores.json";

/// Writes `masks.tfs` (f32 0/1), `outputs.tfs` and `archive.json` into `dir`.
pub fn write_archive(archive: &SubsetArchive, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let masks = archive.masks.mapv(|b| if b { 1.0 } else { 0.0 });
    features::write_tfs(masks.view(), Dtype::F32, &dir.join("masks.tfs"))?;
    features::write_tfs(archive.outputs.view(), Dtype::F64, &dir.join("outputs.tfs"))?;
    features::write_json(
        &ArchiveManifest {
            masks: "masks.tfs".into(),
            outputs: "outputs.tfs".into(),
            count: archive.len(),
            n_candidates: archive.masks.ncols(),
            n_targets: archive.outputs.ncols(),
        },
        &dir.join(ARCHIVE_MANIFEST),
    )
}

pub fn load_archive(dir: &Path) -> Result<SubsetArchive> {
    let manifest_path = dir.join(ARCHIVE_MANIFEST);
    let m: ArchiveManifest = features::read_json(&manifest_path)?;
    let mask_path = dir.join(&m.masks);
    let (masks, _) = features::read_tfs(&mask_path)?;
    let (outputs, _) = features::read_tfs(&dir.join(&m.outputs))?;
    if masks.dim() != (m.count, m.n_candidates) || outputs.dim() != (m.count, m.n_targets) {
        return Err(Error::shape(
            "subset archive manifest",
            format!("{} masks over {}x{}", m.count, m.n_candidates, m.n_targets),
            format!("{:?} / {:?}", masks.dim(), outputs.dim()),
        ));
    }
    if let Some(((row, col), &value)) = masks.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "{}: mask entry ({row}, {col}) is {value}, expected 0 or 1",
            mask_path.display()
        )));
    }
    SubsetArchive::new(masks.mapv(|v| v == 1.0), outputs)
}

/// Writes `scores.tfs` and `scores.json` into `dir`.
pub fn write_scores(scores: &AttributionScores, dir: &Path, fingerprint: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    features::write_tfs(scores.scores.view(), Dtype::F64, &dir.join("scores.tfs"))?;
    features::write_json(
        &ScoresManifest {
            method: scores.method,
            ensemble_size: scores.ensemble_size,
            scores: "scores.tfs".into(),
            n_candidates: scores.n_candidates(),
            n_targets: scores.n_targets(),
            fingerprint: fingerprint.map(str::to_owned),
        },
        &dir.join(SCORES_MANIFEST),
    )
}

pub fn load_scores(dir: &Path) -> Result<AttributionScores> {
    let m: ScoresManifest = features::read_json(&dir.join(SCORES_MANIFEST))?;
    let (scores, _) = features::read_tfs(&dir.join(&m.scores))?;
    if scores.dim() != (m.n_candidates, m.n_targets) {
        return Err(Error::shape(
            "scores manifest",
            format!("{}x{}", m.n_candidates, m.n_targets),
            format!("{:?}", scores.dim()),
        ));
    }
    AttributionScores::new(scores, m.method, m.ensemble_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn fm(a: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::from_array(a).unwrap()
    }

    #[test]
    fn tracin_cases() {
        let s = tracin_score(&[fm(array![[1.0, 0.0]])], &[fm(array![[0.0, 3.0]])], &[0.7]).unwrap();
        assert_eq!(s.scores()[[0, 0]], 0.0);
        let s = tracin_score(&[fm(array![[1.0, 0.0]])], &[fm(array![[2.0, 0.0]])], &[1.0]).unwrap();
        assert_eq!(s.scores()[[0, 0]], 2.0);
        assert!(tracin_score(&[fm(array![[1.0]])], &[], &[1.0]).is_err());
        assert!(tracin_score(&[fm(array![[1.0]])], &[fm(array![[1.0]])], &[0.0]).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap(),
            0.6,
            epsilon = 1e-12
        );
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ZeroVariance(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_for_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn lds_self_consistency() {
        let tau = array![[1.0, -2.0], [0.5, 0.3], [2.0, 1.0], [-1.0, 0.1]];
        let masks = array![
            [true, false, true, false],
            [false, true, true, true],
            [true, true, false, false],
            [false, false, false, true],
            [true, true, true, true]
        ];
        let outputs = masks.mapv(|b| if b { 1.0 } else { 0.0 }).dot(&tau);
        let scores = AttributionScores::new(tau, ScoreMethod::Tracin, 1).unwrap();
        let r = lds(&scores, &SubsetArchive::new(masks.clone(), outputs.clone()).unwrap(), true).unwrap();
        assert_abs_diff_eq!(r.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.pooled.unwrap(), 1.0, epsilon = 1e-12);
        let r = lds(&scores, &SubsetArchive::new(masks, -outputs).unwrap(), false).unwrap();
        assert_abs_diff_eq!(r.mean, -1.0, epsilon = 1e-12);
        assert!(r.pooled.is_none());
    }

    #[test]
    fn lds_flags_constant_targets() {
        let tau = array![[1.0, 0.0], [2.0, 0.0]];
        let masks = array![[true, false], [false, true], [true, true]];
        let outputs = array![[1.0, 5.0], [2.0, 6.0], [3.0, 7.0]];
        let scores = AttributionScores::new(tau, ScoreMethod::Tracin, 1).unwrap();
        let r = lds(&scores, &SubsetArchive::new(masks, outputs).unwrap(), false).unwrap();
        assert_eq!(r.degenerate, vec![1]);
        assert_eq!(r.per_target[1], None);
        assert_abs_diff_eq!(r.mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn archive_validation() {
        assert!(SubsetArchive::new(array![[false, false]], array![[1.0]]).is_err());
        assert!(SubsetArchive::new(array![[true, false]], array![[1.0], [2.0]]).is_err());
    }

    #[test]
    fn ensemble_cases() {
        let a = AttributionScores::new(array![[1.0, -2.0]], ScoreMethod::Tracin, 1).unwrap();
        let neg = AttributionScores::new(array![[-1.0, 2.0]], ScoreMethod::Tracin, 1).unwrap();
        assert_eq!(ensemble_scores(&[a.clone()]).unwrap().scores(), a.scores());
        let e = ensemble_scores(&[a.clone(), neg]).unwrap();
        assert_eq!(e.scores(), array![[0.0, 0.0]]);
        assert_eq!(e.ensemble_size(), 2);
        let other = AttributionScores::new(array![[1.0, 1.0]], ScoreMethod::NegWfd, 1).unwrap();
        assert!(ensemble_scores(&[a, other]).is_err());
        assert!(ensemble_scores(&[]).is_err());
    }

    #[test]
    fn neg_wfd_extremes() {
        let x = WhitenedFeatures::from_unit_rows(array![[1.0, 0.0], [-1.0, 0.0]], features::default_ids(2), "t")
            .unwrap();
        let y = WhitenedFeatures::from_unit_rows(array![[1.0, 0.0]], features::default_ids(1), "t").unwrap();
        let s = neg_wfd_score(&x, &y).unwrap();
        assert_eq!(s.scores(), array![[0.0], [-2.0]]);
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let archive = SubsetArchive::new(array![[true, false, true], [false, true, true]], array![[0.5], [1.5]]).unwrap();
        write_archive(&archive, dir.path()).unwrap();
        assert_eq!(load_archive(dir.path()).unwrap(), archive);
        let scores = AttributionScores::new(array![[0.1], [0.2], [0.3]], ScoreMethod::NegWfd, 3).unwrap();
        write_scores(&scores, dir.path(), None).unwrap();
        assert_eq!(load_scores(dir.path()).unwrap(), scores);
    }
}
