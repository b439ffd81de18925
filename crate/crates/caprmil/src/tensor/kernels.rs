//! Flat matmul kernels.
//!
//! Three loop orders cover everything the autodiff layer needs without ever
//! materializing a transpose:
//!
//! * [`mm_nn`]  — `out += A · B`
//! * [`mm_nt`]  — `out += A · Bᵀ` (B stored `[n, k]`)
//! * [`mm_tn`]  — `out += Aᵀ · B` (A stored `[k, m]`)
//!
//! All kernels accumulate into `out` so batched callers can reuse one output
//! buffer, and all are written as contiguous-slice loops (`axpy` rows or
//! multi-accumulator dot products) that LLVM turns into FMA vector code.
//! Forward and backward passes are dominated by these three functions; keep
//! them boring.

use crate::scalar::Scalar;

/// `y += alpha * x` over contiguous slices.
#[inline(always)]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

/// Dot product with eight independent accumulators so the reduction does not
/// serialize on a single register.
#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let mut chunks_a = a.chunks_exact(LANES);
    let mut chunks_b = b.chunks_exact(LANES);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for l in 0..LANES {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    let mut total = T::ZERO;
    for v in acc {
        total += v;
    }
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        total = x.mul_add(*y, total);
    }
    total
}

/// `out[m,n] += a[m,k] · b[k,n]`.
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)) {
        for (aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            axpy(out_row, *aik, b_row);
        }
    }
}

/// `out[m,n] += a[m,k] · bᵀ` where `b` is stored `[n, k]`.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k.max(1))) {
            *o += dot(a_row, b_row);
        }
    }
}

/// `out[m,n] += aᵀ · b[k,n]` where `a` is stored `[k, m]`.
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(m.max(1)).zip(b.chunks_exact(n.max(1))) {
        for (api, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            axpy(out_row, *api, b_row);
        }
    }
}
