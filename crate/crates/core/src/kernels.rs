//! Dense kernels over row-major slices.
//!
//! Reduction order is fixed: every output element of a product accumulates
//! its `k` terms in increasing `k`, starting from the value already in the
//! output buffer. Row reductions (sums, means, norms) run left to right. The
//! loops are arranged so the innermost loop is an elementwise update, which
//! the compiler vectorizes without reassociating any sum.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&aki, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
}

/// Transpose of a row-major `[rows×cols]` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for (r, row) in x.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// Left-to-right sum.
pub fn sum<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::ZERO, |acc, &v| acc + v)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::ZERO, |acc, (&x, &y)| acc + x * y)
}

pub fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Stable softmax of one row, in place.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::ONE / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::NEG_INFINITY, |m, &v| m.max(v));
    let total = row.iter().fold(T::ZERO, |acc, &v| acc + (v - max).exp());
    max + total.ln()
}

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let coef = T::from_f64(GELU_COEF);
    let inner = T::from_f64(SQRT_2_OVER_PI) * (x + coef * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let coef = T::from_f64(GELU_COEF);
    let s = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    let t = (s * (x + coef * x * x * x)).tanh();
    let d_inner = s * (T::ONE + T::from_f64(3.0) * coef * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| libm::sinf(i as f32 * 0.37)).collect();
        let b: Vec<f32> = (0..k * n).map(|i| libm::cosf(i as f32 * 0.11)).collect();
        let expected = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c, expected);

        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut c, m, k, n);
        assert_eq!(c, expected);

        let mut c = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut c, m, k, n);
        assert_eq!(c, expected);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f32), 0.0);
        assert!((gelu(10.0f32) - 10.0).abs() < 1e-4);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)) evaluated in f64
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(1.0f32) - 0.8412).abs() < 1e-4);
    }
}
