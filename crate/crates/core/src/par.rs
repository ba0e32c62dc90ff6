//! Data-parallel primitives with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! global pool; without it the same partitions are processed in order.
//! Partition boundaries never depend on the thread count, so results are
//! bit-identical in both modes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows of the output handled by one matmul task.
pub const MATMUL_ROW_BLOCK: usize = 32;

/// Below this many multiply-adds a matmul runs as a single block.
const MATMUL_PAR_THRESHOLD: usize = 1 << 16;

/// `a · b` for 2-D operands, partitioned over output rows.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let mut out = Array2::<f64>::zeros((m, n));
    if m * n * k < MATMUL_PAR_THRESHOLD || m <= MATMUL_ROW_BLOCK {
        general_mat_mul(1.0, &a, &b, 0.0, &mut out);
        return out;
    }
    let block = |(a_rows, mut out_rows): (ArrayView2<'_, f64>, ArrayViewMut2<'_, f64>)| {
        general_mat_mul(1.0, &a_rows, &b, 0.0, &mut out_rows);
    };
    let blocks = a
        .axis_chunks_iter(Axis(0), MATMUL_ROW_BLOCK)
        .zip(out.axis_chunks_iter_mut(Axis(0), MATMUL_ROW_BLOCK));
    #[cfg(feature = "parallel")]
    {
        let blocks: Vec<_> = blocks.collect();
        blocks.into_par_iter().for_each(block);
    }
    #[cfg(not(feature = "parallel"))]
    blocks.for_each(block);
    out
}

/// Evaluates `f(0..n)` and returns results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Applies `f(i, row)` to every row of `m`.
pub fn for_each_row_mut<F>(m: &mut Array2<f64>, f: F)
where
    F: Fn(usize, ndarray::ArrayViewMut1<'_, f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        m.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        m.axis_iter_mut(Axis(0))
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Whether this build dispatches to the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
