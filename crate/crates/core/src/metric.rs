//! Whitened Feature Distance: random projection, centering, whitening,
//! row normalization and pairwise distance.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Dtype, FeatureMatrix};
use crate::linalg;

/// Projected dimension used when the raw dimension exceeds it.
pub const DEFAULT_PROJECTION_DIM: usize = 4096;
/// Covariance regularizer, relative to the mean eigenvalue `trace / d`.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionFamily {
    Gaussian,
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub family: ProjectionFamily,
}

impl ProjectionSpec {
    /// Gaussian projection to [`DEFAULT_PROJECTION_DIM`] when `input_dim`
    /// exceeds it, `None` (pass-through) otherwise.
    pub fn default_for(input_dim: usize, seed: u64) -> Option<Self> {
        (input_dim > DEFAULT_PROJECTION_DIM).then_some(Self {
            input_dim,
            output_dim: DEFAULT_PROJECTION_DIM,
            seed,
            family: ProjectionFamily::Gaussian,
        })
    }
}

/// SplitMix64 finalizer applied to `seed` and a counter. Stateless, so any
/// entry of the projection matrix can be generated independently.
fn counter_hash(seed: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in (0, 1]: 53 random bits, offset by one ulp-step so `ln` is finite.
fn counter_uniform(seed: u64, counter: u64) -> f64 {
    ((counter_hash(seed, counter) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Builds the `output_dim x input_dim` projection matrix for `spec`.
///
/// Gaussian entries are N(0, 1/d) via Box-Muller on counter-indexed uniforms
/// (`libm` transcendental functions, so the bits do not depend on the host
/// math library); Rademacher entries are `+-1/sqrt(d)`.
pub fn make_projection(spec: &ProjectionSpec) -> Result<Array2<f64>> {
    let (d_in, d_out) = (spec.input_dim, spec.output_dim);
    if d_out == 0 || d_out > d_in {
        return Err(Error::InvalidArgument(format!(
            "projection output dim {d_out} must be in 1..={d_in}"
        )));
    }
    let scale = 1.0 / (d_out as f64).sqrt();
    let seed = spec.seed;
    let mut out = Array2::<f64>::zeros((d_out, d_in));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            for (c, v) in row.iter_mut().enumerate() {
                let k = (r * d_in + c) as u64;
                *v = match spec.family {
                    ProjectionFamily::Gaussian => {
                        let u1 = counter_uniform(seed, 2 * k);
                        let u2 = counter_uniform(seed, 2 * k + 1);
                        let radius = libm::sqrt(-2.0 * libm::log(u1));
                        radius * libm::cos(2.0 * std::f64::consts::PI * u2) * scale
                    }
                    ProjectionFamily::Rademacher => {
                        if counter_hash(seed, k) >> 63 == 0 {
                            scale
                        } else {
                            -scale
                        }
                    }
                };
            }
        });
    Ok(out)
}

/// Projects every row: `out_i = P * raw_i` for a `d x D` matrix `P`.
pub fn project(raw: &FeatureMatrix, proj: ArrayView2<'_, f64>) -> Result<FeatureMatrix> {
    if raw.ncols() != proj.ncols() {
        return Err(Error::shape("project", proj.ncols(), raw.ncols()));
    }
    let data = linalg::gemm_nt(raw.data(), proj);
    FeatureMatrix::new(data, raw.ids().to_vec(), Dtype::F64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhiteningMethod {
    Cholesky,
    Zca,
}

impl WhiteningMethod {
    fn name(self) -> &'static str {
        match self {
            WhiteningMethod::Cholesky => "cholesky",
            WhiteningMethod::Zca => "zca",
        }
    }
}

/// Fitted mean and whitening matrix. `apply` maps `x -> W (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: Array1<f64>,
    whitener: Array2<f64>,
    method: WhiteningMethod,
    eps: f64,
    fit_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TransformDoc {
    method: WhiteningMethod,
    eps: f64,
    dim: usize,
    fit_count: usize,
    mean: Vec<f64>,
    /// row-major `dim x dim`
    whitener: Vec<f64>,
    fingerprint: String,
}

impl WhiteningTransform {
    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn whitener(&self) -> ArrayView2<'_, f64> {
        self.whitener.view()
    }

    pub fn method(&self) -> WhiteningMethod {
        self.method
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn fit_count(&self) -> usize {
        self.fit_count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Builds a transform from explicit parts (used when reloading).
    pub fn from_parts(
        mean: Array1<f64>,
        whitener: Array2<f64>,
        method: WhiteningMethod,
        eps: f64,
        fit_count: usize,
    ) -> Result<Self> {
        let d = mean.len();
        if whitener.dim() != (d, d) {
            return Err(Error::shape(
                "whitening transform",
                format!("{d}x{d}"),
                format!("{}x{}", whitener.nrows(), whitener.ncols()),
            ));
        }
        if !whitener.iter().chain(mean.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite whitening transform".into()));
        }
        Ok(Self {
            mean,
            whitener,
            method,
            eps,
            fit_count,
        })
    }

    /// SHA-256 over the method, eps and every coefficient bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.method.name().as_bytes());
        h.update(self.eps.to_bits().to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.mean.iter().chain(self.whitener.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let doc = TransformDoc {
            method: self.method,
            eps: self.eps,
            dim: self.dim(),
            fit_count: self.fit_count,
            mean: self.mean.to_vec(),
            whitener: self.whitener.iter().copied().collect(),
            fingerprint: self.fingerprint(),
        };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TransformDoc = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<transform>".into(),
            source,
        })?;
        let whitener = Array2::from_shape_vec((doc.dim, doc.dim), doc.whitener)
            .map_err(|e| Error::InvalidArgument(format!("whitener shape: {e}")))?;
        let t = Self::from_parts(
            Array1::from(doc.mean),
            whitener,
            doc.method,
            doc.eps,
            doc.fit_count,
        )?;
        let fp = t.fingerprint();
        if fp != doc.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: doc.fingerprint,
            });
        }
        Ok(t)
    }
}

/// Fits a whitening transform on the rows of `feats`.
pub fn fit_whitening(
    feats: &FeatureMatrix,
    method: WhiteningMethod,
    eps: f64,
) -> Result<WhiteningTransform> {
    fit_whitening_rows(&[feats.data()], method, eps)
}

/// Fits on the concatenation of several row blocks without copying them.
///
/// `Sigma = (1/N) sum (x - mu)(x - mu)^T`, regularized as
/// `Sigma + eps * (trace(Sigma) / d) * I`. Cholesky gives `W = L^-1` with
/// `Sigma_reg = L L^T`; ZCA gives `W = U diag(lambda^-1/2) U^T`.
pub fn fit_whitening_rows(
    parts: &[ArrayView2<'_, f64>],
    method: WhiteningMethod,
    eps: f64,
) -> Result<WhiteningTransform> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("no rows to fit whitening on".into()));
    }
    let d = parts[0].ncols();
    if let Some(p) = parts.iter().find(|p| p.ncols() != d) {
        return Err(Error::shape("fit_whitening", d, p.ncols()));
    }
    let n: usize = parts.iter().map(|p| p.nrows()).sum();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "whitening needs at least 2 samples, got {n}"
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    let mean = linalg::column_means(parts);
    let mut sigma = linalg::centered_scatter(parts, &mean);
    sigma /= n as f64;
    let ridge = eps * sigma.diag().sum() / d as f64;
    for i in 0..d {
        sigma[[i, i]] += ridge;
    }
    let sigma = DMatrix::from_fn(d, d, |i, j| 0.5 * (sigma[[i, j]] + sigma[[j, i]]));

    let whitener = match method {
        WhiteningMethod::Cholesky => {
            let chol = nalgebra::Cholesky::new(sigma.clone()).ok_or_else(|| {
                Error::Decomposition {
                    method: "cholesky",
                    min_eigenvalue: min_eigenvalue(&sigma),
                }
            })?;
            let l = chol.l();
            let inv = l
                .solve_lower_triangular(&DMatrix::identity(d, d))
                .ok_or(Error::Decomposition {
                    method: "cholesky",
                    min_eigenvalue: min_eigenvalue(&sigma),
                })?;
            // L^-1 is lower-triangular; drop round-off above the diagonal
            DMatrix::from_fn(d, d, |i, j| if j > i { 0.0 } else { inv[(i, j)] })
        }
        WhiteningMethod::Zca => {
            let eig = nalgebra::SymmetricEigen::new(sigma.clone());
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            if !(min > 0.0) {
                return Err(Error::Decomposition {
                    method: "zca",
                    min_eigenvalue: min,
                });
            }
            let u = &eig.eigenvectors;
            let scaled = DMatrix::from_fn(d, d, |i, j| u[(i, j)] / eig.eigenvalues[j].sqrt());
            let w = &scaled * u.transpose();
            DMatrix::from_fn(d, d, |i, j| 0.5 * (w[(i, j)] + w[(j, i)]))
        }
    };
    let whitener = Array2::from_shape_fn((d, d), |(i, j)| whitener[(i, j)]);
    if !whitener.iter().all(|v| v.is_finite()) {
        return Err(Error::Decomposition {
            method: method.name(),
            min_eigenvalue: min_eigenvalue(&sigma),
        });
    }
    Ok(WhiteningTransform {
        mean: Array1::from(mean),
        whitener,
        method,
        eps,
        fit_count: n,
    })
}

fn min_eigenvalue(sigma: &DMatrix<f64>) -> f64 {
    sigma
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Applies `x -> W (x - mean)` to every row.
pub fn apply_whitening(t: &WhiteningTransform, feats: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if feats.ncols() != t.dim() {
        return Err(Error::shape("apply_whitening", t.dim(), feats.ncols()));
    }
    let centered = &feats - &t.mean;
    Ok(linalg::gemm_nt(centered.view(), t.whitener.view()))
}

/// Unit-norm rows in a whitened feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedFeatures {
    data: Array2<f64>,
    ids: Vec<String>,
    transform_fingerprint: String,
    norms: Vec<f64>,
}

impl WhitenedFeatures {
    /// Wraps rows that are already unit-norm (checked to 1e-9).
    pub fn from_unit_rows(
        data: Array2<f64>,
        ids: Vec<String>,
        transform_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if data.nrows() != ids.len() {
            return Err(Error::IdCount {
                ids: ids.len(),
                rows: data.nrows(),
                path: None,
            });
        }
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape("whitened features", "non-empty", format!("{:?}", data.dim())));
        }
        let mut norms = Vec::with_capacity(data.nrows());
        for (i, row) in data.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} ({:?}) has norm {norm}, expected 1",
                    ids[i]
                )));
            }
            norms.push(norm);
        }
        Ok(Self {
            data,
            ids,
            transform_fingerprint: transform_fingerprint.into(),
            norms,
        })
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn transform_fingerprint(&self) -> &str {
        &self.transform_fingerprint
    }

    /// Row norms before normalization.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Subset of rows in the given order; the fingerprint is kept.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            transform_fingerprint: self.transform_fingerprint.clone(),
            norms: indices.iter().map(|&i| self.norms[i]).collect(),
        }
    }

    /// Concatenation of `self` rows followed by `other` rows.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::shape("concat whitened features", self.dim(), other.dim()));
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .expect("matching widths");
        Ok(Self {
            data,
            ids: self.ids.iter().chain(&other.ids).cloned().collect(),
            transform_fingerprint: self.transform_fingerprint.clone(),
            norms: self.norms.iter().chain(&other.norms).copied().collect(),
        })
    }
}

/// Divides every row by its L2 norm. A zero row has no direction and is an
/// error naming the sample.
pub fn normalize_rows(
    mut m: Array2<f64>,
    ids: &[String],
    transform_fingerprint: &str,
) -> Result<WhitenedFeatures> {
    if m.nrows() != ids.len() {
        return Err(Error::IdCount {
            ids: ids.len(),
            rows: m.nrows(),
            path: None,
        });
    }
    let norms: Vec<f64> = m
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .map(|mut row| {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.mapv_inplace(|v| v / norm);
            }
            norm
        })
        .collect();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(Error::ZeroNorm { id: ids[i].clone() });
    }
    Ok(WhitenedFeatures {
        data: m,
        ids: ids.to_vec(),
        transform_fingerprint: transform_fingerprint.to_string(),
        norms,
    })
}

/// Whitened Feature Distance between two unit vectors, `||a - b||_2`.
///
/// For unit inputs this equals `sqrt(2 - 2 <a, b>)` and lies in `[0, 2]`;
/// the difference form avoids cancellation near zero.
pub fn wfd(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Output of [`build_metric`].
#[derive(Debug, Clone)]
pub struct MetricSpace {
    pub candidates: WhitenedFeatures,
    pub targets: WhitenedFeatures,
    pub transform: WhiteningTransform,
}

/// Projection (optional), whitening fitted on candidate and target rows
/// together, then normalization of both sets with the shared transform.
pub fn build_metric(
    candidate: &FeatureMatrix,
    target: &FeatureMatrix,
    spec: Option<&ProjectionSpec>,
    method: WhiteningMethod,
    eps: f64,
) -> Result<MetricSpace> {
    if candidate.ncols() != target.ncols() {
        return Err(Error::shape("build_metric", candidate.ncols(), target.ncols()));
    }
    let (cand, tgt) = match spec {
        Some(spec) => {
            if spec.input_dim != candidate.ncols() {
                return Err(Error::shape("projection input dim", spec.input_dim, candidate.ncols()));
            }
            let p = make_projection(spec)?;
            (
                linalg::gemm_nt(candidate.data(), p.view()),
                linalg::gemm_nt(target.data(), p.view()),
            )
        }
        None => (candidate.data().to_owned(), target.data().to_owned()),
    };
    let transform = fit_whitening_rows(&[cand.view(), tgt.view()], method, eps)?;
    let fp = transform.fingerprint();
    let cw = apply_whitening(&transform, cand.view())?;
    drop(cand);
    let tw = apply_whitening(&transform, tgt.view())?;
    drop(tgt);
    Ok(MetricSpace {
        candidates: normalize_rows(cw, candidate.ids(), &fp)?,
        targets: normalize_rows(tw, target.ids(), &fp)?,
        transform,
    })
}
