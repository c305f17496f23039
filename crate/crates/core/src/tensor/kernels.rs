//! Inner-loop kernels with a data-parallel path and a sequential fallback.
//!
//! Both paths compute each output row with the same sequential inner loop,
//! so results are bitwise identical regardless of the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-parallel work threshold; tiny matrices are not worth the fork.
#[cfg(feature = "parallel")]
const PAR_MIN_FLOPS: usize = 32 * 1024;

fn matmul_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, n: usize) {
    out_row.fill(0.0);
    for (p, &a_val) in a_row.iter().enumerate().take(k) {
        if a_val == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &b_val) in out_row.iter_mut().zip(b_row.iter()) {
            *o += a_val * b_val;
        }
    }
}

/// `a[m,k] @ b[k,n] -> out[m,n]`, sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_row(out_row, &a[i * k..(i + 1) * k], b, k, n);
    }
    out
}

/// `a[m,k] @ b[k,n] -> out[m,n]`, rows distributed across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(out_row, &a[i * k..(i + 1) * k], b, k, n);
    });
    out
}

/// Dispatching matmul used by the graph ops.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m > 1 && m * k * n >= PAR_MIN_FLOPS {
            return matmul_par(a, b, m, k, n);
        }
    }
    matmul_seq(a, b, m, k, n)
}

/// `out[k,n] = a[m,k]^T @ b[m,n]` without materializing the transpose.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_val) in a_row.iter().enumerate() {
            if a_val == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_val) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_val * b_val;
            }
        }
    }
    out
}

/// `out[m,k] = a[m,n] @ b[k,n]^T` without materializing the transpose.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                s += x * y;
            }
            *o = s;
        }
    }
    out
}

/// Kahan compensated sum; accumulation order independent of thread count
/// because callers collect per-item terms first and sum them here.
pub fn kahan_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}
