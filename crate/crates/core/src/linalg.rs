//! Small dense kernels shared by the metric and transport code.
//!
//! Every parallel routine here splits work into fixed-size row blocks that do
//! not depend on the worker count, and reduces partial results in block
//! order, so outputs are bit-identical for any thread pool size.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

/// Rows per work unit for row-parallel kernels.
pub(crate) const ROW_BLOCK: usize = 512;

/// `a * b^T` computed in parallel over row blocks of `a`.
pub(crate) fn gemm_nt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = Array2::<f64>::zeros((n, m));
    let bt = b.t();
    out.axis_chunks_iter_mut(Axis(0), ROW_BLOCK)
        .into_par_iter()
        .enumerate()
        .for_each(|(blk, mut chunk)| {
            let start = blk * ROW_BLOCK;
            let rows = a.slice(s![start..start + chunk.nrows(), ..]);
            ndarray::linalg::general_mat_mul(1.0, &rows, &bt, 0.0, &mut chunk);
        });
    out
}

/// Column means accumulated in row order.
pub(crate) fn column_means(parts: &[ArrayView2<'_, f64>]) -> Vec<f64> {
    let d = parts[0].ncols();
    let mut sum = vec![0.0f64; d];
    let mut count = 0usize;
    for part in parts {
        for row in part.rows() {
            for (s, &v) in sum.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        count += part.nrows();
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

/// Scatter matrix `sum_i (x_i - mean)(x_i - mean)^T` over all rows of all
/// parts. Blocks of [`ROW_BLOCK`] rows are processed in parallel and summed in
/// block order.
pub(crate) fn centered_scatter(parts: &[ArrayView2<'_, f64>], mean: &[f64]) -> Array2<f64> {
    let d = mean.len();
    let mean_row = ndarray::ArrayView1::from(mean);
    let blocks: Vec<ArrayView2<'_, f64>> = parts
        .iter()
        .flat_map(|p| p.axis_chunks_iter(Axis(0), ROW_BLOCK))
        .collect();
    let mut total = Array2::<f64>::zeros((d, d));
    // bound peak memory: at most GROUP partial d x d matrices alive at once
    const GROUP: usize = 16;
    for group in blocks.chunks(GROUP) {
        let partials: Vec<Array2<f64>> = group
            .par_iter()
            .map(|blk| {
                let centered = blk - &mean_row;
                centered.t().dot(&centered)
            })
            .collect();
        for p in partials {
            total += &p;
        }
    }
    total
}
