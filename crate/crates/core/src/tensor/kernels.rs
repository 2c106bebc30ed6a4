//! Dense row-major matrix kernels shared by the forward and backward passes.
//!
//! All kernels accumulate into `out` (`out += ...`) so backward passes can sum
//! contributions without extra buffers. Loop orders keep the innermost loop
//! contiguous so the compiler can vectorize it.

const LANES: usize = 8;

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    if m < 4 {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let mut bt = vec![0.0f32; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, out, m, k, n);
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(av, b_row, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}
