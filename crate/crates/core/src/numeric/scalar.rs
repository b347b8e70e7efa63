use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating type the autodiff engine runs on. Models use `f32`; the
/// finite-difference checks run the same code in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the matching pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major `rows × cols` block starting at `off` with row stride `ld`.
    pub fn rm(off: usize, rows: usize, cols: usize, ld: usize) -> Self {
        View {
            off,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            off: self.off,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self, len: usize) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < len, "gemm view out of bounds: {last} >= {len}");
    }
}

/// `c = alpha * a·b + beta * c` with bounds-checked views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    assert_eq!(va.cols, vb.rows, "gemm inner dims");
    assert_eq!(va.rows, vc.rows, "gemm rows");
    assert_eq!(vb.cols, vc.cols, "gemm cols");
    va.check(a.len());
    vb.check(b.len());
    vc.check(c.len());
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked against their buffers above,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            va.rows,
            va.cols,
            vb.cols,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}
