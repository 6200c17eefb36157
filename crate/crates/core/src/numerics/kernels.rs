//! Dense kernels shared by the forward and backward passes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use super::Real;

static THREADS: OnceLock<AtomicUsize> = OnceLock::new();

fn threads_cell() -> &'static AtomicUsize {
    THREADS.get_or_init(|| {
        let n = std::env::var("TCLP_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1);
        AtomicUsize::new(n)
    })
}

/// Intra-op thread cap, read from `TCLP_THREADS` (default 1).
pub fn intra_op_threads() -> usize {
    threads_cell().load(Ordering::Relaxed)
}

/// Overrides the intra-op thread cap. Strict-deterministic mode pins it to 1.
pub fn set_intra_op_threads(n: usize) {
    threads_cell().store(n.max(1), Ordering::Relaxed);
}

/// Row-major matrix operand: `rows x cols` buffer, optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Real> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a @ b` (or `out += a @ b` when `accumulate`). `out` is `m x n` row-major.
///
/// Rows of `out` may be split across threads; each output element is produced by
/// the same kernel either way.
pub fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.logical();
    let (kb, n) = b.logical();
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output length");
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let threads = intra_op_threads();
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    if threads <= 1 || m < 64 {
        // SAFETY: strides and extents describe in-bounds views of the slices checked above.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    let chunk = m.div_ceil(threads);
    std::thread::scope(|s| {
        for (ci, out_rows) in out.chunks_mut(chunk * n).enumerate() {
            let row0 = ci * chunk;
            let rows = out_rows.len() / n;
            s.spawn(move || {
                let a_off = row0 as isize * rsa;
                // SAFETY: row block [row0, row0 + rows) lies inside `a`; `out_rows` is disjoint.
                unsafe {
                    T::gemm_raw(
                        rows,
                        k,
                        n,
                        T::one(),
                        a.data.as_ptr().offset(a_off),
                        rsa,
                        csa,
                        b.data.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        out_rows.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        }
    });
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
