use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type a [`super::Graph`] can compute in.
///
/// Training runs in `f32`; the gradient checker re-evaluates the same graph
/// code in `f64` to obtain a low-noise numerical reference.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn of_f64(v: f64) -> Self;

    /// `c = a·b + beta·c` for strided row/column layouts.
    ///
    /// # Safety
    /// The pointers must address buffers large enough for the given
    /// dimensions and strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn of_f64(v: f64) -> Self {
        v
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row/column strides of one gemm operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }
    /// Reads a row-major `[rows × cols]` buffer as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }
    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked wrapper over [`Scalar::gemm_raw`]: `c[m×n] = a[m×k]·b[k×n] + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: extents checked above; `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
