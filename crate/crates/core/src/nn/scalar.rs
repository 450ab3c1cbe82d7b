use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a network. Single precision for training
/// and inference, double precision for gradient checks.
pub trait Scalar: Float + Default + Debug + Sum + AddAssign + SubAssign + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← α·A·B + β·C` over strided views (see [`Mat`]).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>);
}

/// Read-only strided matrix view: element `(i, j)` lives at `i·rs + j·cs`.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Row-major `rows × cols`.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub fn rows_t(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn rows(data: &'a mut [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                assert!(a.data.len() >= span(m, k, a.rs, a.cs), "gemm: A too short");
                assert!(b.data.len() >= span(k, n, b.rs, b.cs), "gemm: B too short");
                assert!(c.data.len() >= span(m, n, c.rs, c.cs), "gemm: C too short");
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr(),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.rs as isize,
                        c.cs as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
