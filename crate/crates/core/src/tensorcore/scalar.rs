use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A strided matrix window inside a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major window with leading dimension `ld`.
    pub fn dense(offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// Floating-point element type. Training runs in `f32`; gradient checks run in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha·a·b + beta·c` over strided windows. `c` must be row-major
    /// (`cs == 1`, `rs >= cols`) so no two outputs alias.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(alpha: Self, a: &[Self], av: View, b: &[Self], bv: View, beta: Self, c: &mut [Self], cv: View);

    /// `c = a·b + beta·c` for row-major operands, with optional transposition of `a` and `b`.
    ///
    /// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        let av = if trans_a { View::dense(0, k, m, m).t() } else { View::dense(0, m, k, k) };
        let bv = if trans_b { View::dense(0, n, k, k).t() } else { View::dense(0, k, n, n) };
        Self::gemm_view(Self::one(), a, av, b, bv, beta, c, View::dense(0, m, n, n));
    }

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_view(alpha: Self, a: &[Self], av: View, b: &[Self], bv: View, beta: Self, c: &mut [Self], cv: View) {
                assert_eq!(av.cols, bv.rows, "inner dimensions differ");
                assert_eq!((cv.rows, cv.cols), (av.rows, bv.cols), "output shape mismatch");
                assert!(cv.cs == 1 && (cv.rows <= 1 || cv.rs >= cv.cols), "output must be row-major");
                assert!(av.fits(a.len()) && bv.fits(b.len()) && cv.fits(c.len()), "view out of bounds");
                if cv.rows == 0 || cv.cols == 0 {
                    return;
                }
                // SAFETY: every index reachable through the views was bounds-checked
                // above and the output window has no aliasing elements.
                unsafe {
                    $gemm(
                        av.rows,
                        av.cols,
                        bv.cols,
                        alpha,
                        a.as_ptr().add(av.offset),
                        av.rs as isize,
                        av.cs as isize,
                        b.as_ptr().add(bv.offset),
                        bv.rs as isize,
                        bv.cs as isize,
                        beta,
                        c.as_mut_ptr().add(cv.offset),
                        cv.rs as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2×3), b = [[1,0],[0,1],[1,1]] (3×2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // aᵀ stored as 3×2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0f64; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);

        // accumulate
        f64::gemm(2, 3, 2, &a, false, &b, false, 1.0, &mut c2);
        assert_eq!(c2, [8.0, 10.0, 20.0, 22.0]);
    }

    #[test]
    fn gemm_view_reads_column_blocks() {
        // right half of a 2×4 matrix times the identity
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 6];
        f64::gemm_view(
            2.0,
            &a,
            View::dense(2, 2, 2, 4),
            &eye,
            View::dense(0, 2, 2, 2),
            0.0,
            &mut c,
            View::dense(1, 2, 2, 3),
        );
        assert_eq!(c, [0.0, 6.0, 8.0, 0.0, 14.0, 16.0]);
    }
}
