//! Thin safe wrapper over `matrixmultiply::dgemm` with explicit strides.

pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], rsc: usize, beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() > (m - 1) * a.rs + k.saturating_sub(1) * a.cs || k == 0);
    assert!(b.data.len() > k.saturating_sub(1) * b.rs + (n - 1) * b.cs || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
