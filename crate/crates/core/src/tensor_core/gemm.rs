/// `C = alpha·A·B + beta·C` over strided row/column views.
///
/// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`; strides are in elements.
/// When `beta == 0`, `C` is overwritten without being read.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A view out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B view out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C view out of bounds");
    // SAFETY: every element addressed by the three strided views lies inside
    // its slice (checked above); `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
