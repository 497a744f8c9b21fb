use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors and tapes.
///
/// `f32` is the production precision; `f64` is the shadow precision used when
/// checking gradients against finite differences.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Central-difference step for gradient checks at this precision.
    const FD_STEP: f64;
    /// Denominator floor for relative gradient errors at this precision.
    const GRAD_FLOOR: f64;
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn erf(self) -> Self;

    /// `c = a·b (+ c when accumulate)` on strided row/column views.
    ///
    /// # Safety
    /// All strided index ranges must lie inside the pointed-to buffers.
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

impl Real for f32 {
    const FD_STEP: f64 = 1e-3;
    const GRAD_FLOOR: f64 = 1e-2;
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
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

impl Real for f64 {
    const FD_STEP: f64 = 1e-5;
    const GRAD_FLOOR: f64 = 1e-6;
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
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

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, R> {
    pub data: &'a [R],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R> MatView<'a, R> {
    /// Row-major `rows × cols` view.
    pub fn rm(data: &'a [R], rows: usize, cols: usize) -> Self {
        MatView { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatView { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `out = a·b`, or `out += a·b` when `accumulate`. `out` is row-major with row stride `ldc`.
pub(crate) fn gemm<R: Real>(a: MatView<R>, b: MatView<R>, out: &mut [R], ldc: usize, accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= out.len(), "gemm output view out of bounds");
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                out[r * ldc..r * ldc + n].fill(R::zero());
            }
        }
        return;
    }
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: every view was bounds-checked above.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
