//! Dense f64 kernels behind the tape operations.
//!
//! All products accumulate into the output buffer. Row-major throughout.
//! The `a` operand of `gemm_nn` and `gemm_tn` is scanned for exact zeros,
//! which makes the sparse synthetic video inputs cheap without a separate
//! sparse format.

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..x.len() {
        tail += x[i] * y[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], c_row);
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if k == 0 || n == 0 {
        return;
    }
    for (g_row, c_row) in g.chunks_exact(n).zip(c.chunks_exact_mut(k)) {
        for (j, b_row) in b.chunks_exact(n).enumerate() {
            c_row[j] += dot(g_row, b_row);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(av, g_row, &mut c[p * n..(p + 1) * n]);
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the axis order `perm`.
pub fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_step = step[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(src[off]);
            off += inner_step;
        }
        // advance the multi-index over all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Inverse of a permutation.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
