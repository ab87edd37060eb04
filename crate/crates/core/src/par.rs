//! Data-parallel kernels with a sequential fallback.
//!
//! Every kernel splits its work into fixed row chunks of [`ROW_CHUNK`] rows and
//! reduces partial results in chunk order, so the parallel and sequential
//! paths produce bitwise-identical output. With the `parallel` feature
//! disabled, or inside [`sequential`], everything runs on the calling thread.

use std::cell::Cell;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut1, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const ROW_CHUNK: usize = 256;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with data parallelism disabled on the current thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `a · b`, computed chunk-by-chunk over the rows of `a`.
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
    let mut out = Array2::<f64>::zeros((a.nrows(), b.ncols()));
    if a.nrows() == 0 {
        return out;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
            .into_par_iter()
            .zip(a.axis_chunks_iter(Axis(0), ROW_CHUNK).into_par_iter())
            .for_each(|(mut o, a_chunk)| general_mat_mul(1.0, &a_chunk, b, 0.0, &mut o));
        return out;
    }
    for (mut o, a_chunk) in out
        .axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .zip(a.axis_chunks_iter(Axis(0), ROW_CHUNK))
    {
        general_mat_mul(1.0, &a_chunk, b, 0.0, &mut o);
    }
    out
}

/// `aᵀ · b`, reducing per-chunk partial products in chunk order.
pub fn matmul_tn(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows(), "matmul_tn row count");
    let partial = |(a_chunk, b_chunk): (ArrayView2<f64>, ArrayView2<f64>)| a_chunk.t().dot(&b_chunk);
    let chunks = a
        .axis_chunks_iter(Axis(0), ROW_CHUNK)
        .zip(b.axis_chunks_iter(Axis(0), ROW_CHUNK));
    let partials: Vec<Array2<f64>> = {
        #[cfg(feature = "parallel")]
        {
            if is_parallel() {
                let pairs: Vec<_> = chunks.collect();
                pairs.into_par_iter().map(partial).collect()
            } else {
                chunks.map(partial).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            chunks.map(partial).collect()
        }
    };
    let mut out = Array2::<f64>::zeros((a.ncols(), b.ncols()));
    for p in partials {
        out += &p;
    }
    out
}

/// Column sums, reduced in row-chunk order.
pub fn col_sums(a: &ArrayView2<f64>) -> ndarray::Array1<f64> {
    let mut out = ndarray::Array1::<f64>::zeros(a.ncols());
    for chunk in a.axis_chunks_iter(Axis(0), ROW_CHUNK) {
        out += &chunk.sum_axis(Axis(0));
    }
    out
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f(row_index, row)` to every row of `a`.
pub fn for_each_row_mut<F>(a: &mut Array2<f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        a.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in a.axis_iter_mut(Axis(0)).enumerate() {
        f(i, row);
    }
}
