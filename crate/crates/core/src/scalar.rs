//! Scalar abstraction: everything numeric in the crate is generic over `Scalar`,
//! instantiated as `f64` for gradient checks and `f32` for training runs.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors, fields, and optimizers.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// C = A·B + beta·C for row-major matrices, with optional transposes
    /// expressed through strides (no materialized transpose).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Shorthand conversion from `f64` (lossy for `f32`).
    fn of(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }

    fn of_f32(v: f32) -> Self {
        Self::from(v).expect("f32 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("scalar to f32")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // Row-major strides; a transposed operand swaps its pair.
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
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
    fn gemm_matches_hand_product() {
        // [[1,2],[3,4]] · [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut c = [0.0f64; 2];
        f64::gemm(2, 2, 1, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn gemm_transpose_a() {
        // Aᵀ·B with A = [[1,2],[3,4]] (so Aᵀ = [[1,3],[2,4]]), B = [[1],[1]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [1.0f32, 1.0];
        let mut c = [0.0f32; 2];
        f32::gemm(2, 2, 1, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 6.0]);
    }

    #[test]
    fn gemm_transpose_b() {
        // A·Bᵀ with A = [[1,2]], B = [[1,1],[2,2]] (Bᵀ = [[1,2],[1,2]])
        let a = [1.0f64, 2.0];
        let b = [1.0f64, 1.0, 2.0, 2.0];
        let mut c = [0.0f64; 2];
        f64::gemm(1, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [3.0, 6.0]);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f64];
        let b = [2.0f64];
        let mut c = [10.0f64];
        f64::gemm(1, 1, 1, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [12.0]);
    }
}
