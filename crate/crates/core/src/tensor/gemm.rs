/// Dense product `C = alpha * A B + beta * C` on strided row/column layouts.
///
/// Tiny problems take a plain loop; everything else goes to `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_index(m, k, rsa, csa) < a.len().max(1) || k == 0);
    debug_assert!(max_index(k, n, rsb, csb) < b.len().max(1) || k == 0);
    debug_assert!(max_index(m, n, rsc, csc) < c.len());
    if m * n * k <= 4096 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[(i as isize * rsa + p as isize * csa) as usize]
                        * b[(p as isize * rsb + j as isize * csb) as usize];
                }
                let ci = (i as isize * rsc + j as isize * csc) as usize;
                c[ci] = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * c[ci] };
            }
        }
        return;
    }
    // SAFETY: the strides and extents above address only elements inside the
    // three slices (checked in debug builds), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// Row-major `C (+)= A B` with `A: m x k`, `B: k x n`.
pub(crate) fn matmul_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, if acc { 1.0 } else { 0.0 }, c, n as isize, 1);
}

/// Row-major `C (+)= A B^T` with `A: m x k`, `B: n x k`.
pub(crate) fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, if acc { 1.0 } else { 0.0 }, c, n as isize, 1);
}

/// Row-major `C (+)= A^T B` with `A: k x m`, `B: k x n`.
pub(crate) fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, if acc { 1.0 } else { 0.0 }, c, n as isize, 1);
}
