//! Synthetic workloads shared by the benchmarks and the end-to-end tests.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tarot_core::attribution::{write_archive, write_scores};
use tarot_core::features::{default_ids, write_dataset};
use tarot_core::metric::{build_metric, DEFAULT_EPS};
use tarot_core::{AttributionScores, FeatureMatrix, MetricSpace, Role, ScoreMethod, SubsetArchive, WhiteningMethod};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n x d` standard normal matrix.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng(seed);
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}

/// Candidates from one Gaussian cloud, targets from a shifted one, whitened
/// into a shared metric space.
pub fn metric_space(n: usize, m: usize, d: usize, seed: u64) -> MetricSpace {
    let c = gaussian(n, d, seed);
    let mut t = gaussian(m, d, seed.wrapping_add(1));
    t.column_mut(0).mapv_inplace(|v| v + 1.0);
    let c = FeatureMatrix::from_array(c).expect("finite");
    let t = FeatureMatrix::from_array(t).expect("finite");
    build_metric(&c, &t, None, WhiteningMethod::Cholesky, DEFAULT_EPS).expect("metric")
}

/// Candidate pool made of copies of the targets plus far outliers.
#[derive(Debug, Clone)]
pub struct CopyFixture {
    pub candidates: Array2<f64>,
    pub targets: Array2<f64>,
    /// Per candidate: true when it is a copy of some target.
    pub in_distribution: Vec<bool>,
}

impl CopyFixture {
    pub fn fraction(&self) -> f64 {
        self.in_distribution.iter().filter(|&&b| b).count() as f64 / self.in_distribution.len() as f64
    }
}

/// `n` candidates of which `round(p * n)` are copies of the `m` targets
/// (cycling through them) and the rest lie in a separate, distant cloud.
/// Candidate order is shuffled.
pub fn copy_fixture(n: usize, m: usize, d: usize, p: f64, seed: u64) -> CopyFixture {
    assert!(d >= 2 && m > 0 && n > 0);
    let mut r = rng(seed);
    let targets = Array2::from_shape_simple_fn((m, d), || StandardNormal.sample(&mut r));
    let n_in = (p * n as f64).round() as usize;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n_in {
        rows.push((targets.row(i % m).to_owned(), true));
    }
    // outliers: a tight cloud far along a direction the targets barely use
    let mut dir = Array1::<f64>::zeros(d);
    dir[d - 1] = 1.0;
    for _ in n_in..n {
        let noise: Array1<f64> = Array1::from_shape_simple_fn(d, || 0.3 * normal(&mut r));
        rows.push((&dir * 25.0 + &noise, false));
    }
    rows.shuffle(&mut r);
    let mut candidates = Array2::zeros((n, d));
    let mut in_distribution = Vec::with_capacity(n);
    for (i, (row, flag)) in rows.into_iter().enumerate() {
        candidates.row_mut(i).assign(&row);
        in_distribution.push(flag);
    }
    CopyFixture {
        candidates,
        targets,
        in_distribution,
    }
}

/// [`copy_fixture`] already on the unit sphere, for driving selection
/// directly: targets fill a cap around `e0`, outliers a cap around `-e0`.
pub fn unit_copy_fixture(n: usize, m: usize, d: usize, p: f64, seed: u64) -> CopyFixture {
    assert!(d >= 2 && m > 0 && n > 0);
    let mut r = rng(seed);
    let mut cap = |sign: f64| {
        let mut v = Array1::from_shape_simple_fn(d, || 0.25 * normal(&mut r));
        v[0] = sign;
        let norm = v.dot(&v).sqrt();
        v / norm
    };
    let mut targets = Array2::zeros((m, d));
    for mut row in targets.axis_iter_mut(Axis(0)) {
        row.assign(&cap(1.0));
    }
    let n_in = (p * n as f64).round() as usize;
    let mut rows: Vec<(Array1<f64>, bool)> = (0..n)
        .map(|i| if i < n_in { (targets.row(i % m).to_owned(), true) } else { (cap(-1.0), false) })
        .collect();
    rows.shuffle(&mut r);
    let mut candidates = Array2::zeros((n, d));
    let mut in_distribution = Vec::with_capacity(n);
    for (i, (row, flag)) in rows.into_iter().enumerate() {
        candidates.row_mut(i).assign(&row);
        in_distribution.push(flag);
    }
    CopyFixture {
        candidates,
        targets,
        in_distribution,
    }
}

/// Linear datamodel: outputs are `masks @ weights` plus small noise.
#[derive(Debug, Clone)]
pub struct Datamodel {
    /// `n_candidates x n_targets` true influence of each candidate.
    pub weights: Array2<f64>,
    pub masks: Array2<bool>,
    pub outputs: Array2<f64>,
}

pub fn linear_datamodel(n_targets: usize, n_candidates: usize, n_masks: usize, noise: f64, seed: u64) -> Datamodel {
    let mut r = rng(seed);
    let weights = Array2::from_shape_simple_fn((n_candidates, n_targets), || StandardNormal.sample(&mut r));
    // each mask keeps exactly half of the candidates
    let mut masks = Array2::from_elem((n_masks, n_candidates), false);
    let mut idx: Vec<usize> = (0..n_candidates).collect();
    for mut row in masks.axis_iter_mut(Axis(0)) {
        idx.shuffle(&mut r);
        for &i in &idx[..n_candidates / 2] {
            row[i] = true;
        }
    }
    let mf = masks.mapv(|b| if b { 1.0 } else { 0.0 });
    let mut outputs = mf.dot(&weights);
    let scale = (n_candidates as f64 / 2.0).sqrt();
    outputs.mapv_inplace(|v| v + noise * scale * normal(&mut r));
    Datamodel {
        weights,
        masks,
        outputs,
    }
}

/// Uniform(-1, 1) `n_candidates x n_targets` scores.
pub fn random_scores(n_candidates: usize, n_targets: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((n_candidates, n_targets), || r.gen_range(-1.0..1.0))
}

/// Paths of a dataset pair written by [`write_pair`].
pub struct PairFiles {
    pub candidates: PathBuf,
    pub targets: PathBuf,
}

/// Writes both matrices as datasets with positional ids under `dir`.
pub fn write_pair(candidates: &Array2<f64>, targets: &Array2<f64>, dir: &Path) -> tarot_core::Result<PairFiles> {
    std::fs::create_dir_all(dir).map_err(|e| tarot_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let c = FeatureMatrix::new(candidates.clone(), default_ids(candidates.nrows()), tarot_core::Dtype::F64)?;
    let t = FeatureMatrix::new(targets.clone(), default_ids(targets.nrows()), tarot_core::Dtype::F64)?;
    Ok(PairFiles {
        candidates: write_dataset(&c, Role::Candidate, &dir.join("candidates.tfs"))?,
        targets: write_dataset(&t, Role::Target, &dir.join("targets.tfs"))?,
    })
}

/// Writes `scores/` (true weights) and `archive/` under `dir`.
pub fn write_datamodel(dm: &Datamodel, dir: &Path) -> tarot_core::Result<()> {
    let scores = AttributionScores::new(dm.weights.clone(), ScoreMethod::Tracin, 1)?;
    write_scores(&scores, &dir.join("scores"), None)?;
    write_archive(&SubsetArchive::new(dm.masks.clone(), dm.outputs.clone())?, &dir.join("archive"))
}

/// First `k` rows.
pub fn head(a: &Array2<f64>, k: usize) -> Array2<f64> {
    a.slice(s![..k.min(a.nrows()), ..]).to_owned()
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}
