//! Thin wrapper over `matrixmultiply` for row-major products.

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of shape
/// `k x n`. A transposed operand is stored untransposed: `a` as `k x m`,
/// `b` as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    if m == 1 {
        // row vector: packing would dominate, loop directly
        row_times_matrix(k, n, &a[..k], b, b_trans, &mut c[..n], accumulate);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the row/column strides derived from the logical shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_times_matrix(k: usize, n: usize, a: &[f64], b: &[f64], b_trans: bool, c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    if b_trans {
        for (j, out) in c.iter_mut().enumerate() {
            let row = &b[j * k..(j + 1) * k];
            *out += dot(a, row);
        }
    } else {
        // four rows per pass over c
        let quads = k / 4 * 4;
        for i in (0..quads).step_by(4) {
            let (x0, x1, x2, x3) = (a[i], a[i + 1], a[i + 2], a[i + 3]);
            let r0 = &b[i * n..(i + 1) * n];
            let r1 = &b[(i + 1) * n..(i + 2) * n];
            let r2 = &b[(i + 2) * n..(i + 3) * n];
            let r3 = &b[(i + 3) * n..(i + 4) * n];
            for j in 0..n {
                c[j] += (x0 * r0[j] + x1 * r1[j]) + (x2 * r2[j] + x3 * r3[j]);
            }
        }
        for i in quads..k {
            let (x, row) = (a[i], &b[i * n..(i + 1) * n]);
            c.iter_mut().zip(row).for_each(|(o, y)| *o += x * y);
        }
    }
}

// Four independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn all_transpose_combinations_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for &at in &[false, true] {
            for &bt in &[false, true] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, at, &b, bt, &mut c, false);
                let want = naive(m, k, n, &a, at, &b, bt);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
                gemm(m, k, n, &a, at, &b, bt, &mut c, true);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - 2.0 * y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn row_vector_path_matches_naive() {
        for k in [1, 4, 7, 9, 13] {
            let n = 6;
            let a: Vec<f64> = (0..k).map(|i| (i as f64 * 0.53).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.29).cos()).collect();
            for &bt in &[false, true] {
                let want = naive(1, k, n, &a, false, &b, bt);
                let mut c = vec![0.5; n];
                gemm(1, k, n, &a, false, &b, bt, &mut c, true);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - 0.5 - y).abs() < 1e-12);
                }
            }
        }
    }
}
