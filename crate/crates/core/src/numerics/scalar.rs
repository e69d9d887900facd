//! The scalar abstraction every kernel in this crate is generic over.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// A real floating-point element type: `f32` or `f64`.
///
/// Besides the `num_traits` arithmetic surface, a scalar supplies its own
/// dense GEMM kernel so matrix products stay fast without giving up
/// genericity.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot
    /// represent at all, which never happens for finite literals.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// `c <- alpha * a·b + beta * c` on strided row/column layouts.
    ///
    /// # Safety contract
    /// The strides must address memory within the given slices; this is
    /// checked by [`gemm`] before the kernel runs.
    #[allow(clippy::too_many_arguments)]
    fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            #[allow(clippy::too_many_arguments)]
            fn gemm_kernel(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                // SAFETY: `gemm` verified every addressed element lies inside the slices.
                unsafe {
                    $kernel(
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
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Strided operand description: slice offset plus row and column strides.
#[derive(Debug, Clone, Copy)]
pub struct Strided {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    pub const fn row_major(cols: usize) -> Self {
        Self { offset: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub const fn transposed(cols: usize) -> Self {
        Self { offset: 0, rs: 1, cs: cols }
    }

    pub const fn at(self, offset: usize) -> Self {
        Self { offset, ..self }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// Safe strided GEMM: `c[m,n] <- alpha * a[m,k]·b[k,n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Strided,
    b: &[T],
    lb: Strided,
    beta: T,
    c: &mut [T],
    lc: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.last(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || lb.last(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: output out of bounds");
    T::gemm_kernel(
        m,
        k,
        n,
        alpha,
        &a[la.offset..],
        la.rs as isize,
        la.cs as isize,
        &b[lb.offset..],
        lb.rs as isize,
        lb.cs as isize,
        beta,
        &mut c[lc.offset..],
        lc.rs as isize,
        lc.cs as isize,
    );
}
