/// Strided view of a matrix operand: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], usize, usize);

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with `c` dense row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (a_data, rsa, csa) = a;
    let (b_data, rsb, csb) = b;
    assert!(a_data.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b_data.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every strided access inside the
    // slices, and `c` holds at least m*n elements with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a_data.as_ptr(),
            rsa as isize,
            csa as isize,
            b_data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
