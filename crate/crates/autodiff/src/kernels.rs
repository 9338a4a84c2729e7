//! Dense kernels shared by the forward and backward passes. All matrices are
//! row-major `&[f64]` with explicit dimensions.

/// `out[n,m] = a[n,k] * b[k,m]`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[n,k] = a[n,m] * b[k,m]^T`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let b_row = &b[j * m..(j + 1) * m];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k,m] = a[n,k]^T * b[n,m]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let b_row = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
