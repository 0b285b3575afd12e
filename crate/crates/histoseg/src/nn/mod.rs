//! Minimal CPU neural-network primitives used by the segmentation models.
//!
//! Layers store their own parameters and gradient buffers; forward passes
//! return activations, backward passes take the saved forward inputs plus
//! the upstream gradient and accumulate parameter gradients. There is no
//! autodiff tape — the model module wires blocks together explicitly, and
//! the analytic gradients are validated against central finite differences
//! in the test suite.
//!
//! All heavy lifting is `[C_out, K] x [K, N]` matrix multiplication via
//! `ndarray::linalg::general_mat_mul`, which dispatches to SIMD GEMM
//! kernels for `f32`/`f64`. Work is split across rayon tasks in a way that
//! keeps accumulation order fixed, so results are bit-reproducible for a
//! given thread-count-independent plan.

pub mod adam;
pub mod conv;
pub mod ops;

use ndarray::{ArrayViewMutD, NdFloat};

/// Element type for all tensors: `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar: NdFloat + Send + Sync + 'static {
    const DTYPE: &'static str;
    /// Size of one element in checkpoint files.
    const BYTES: usize;
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
}

/// Shorthand for converting an `f64` literal into the generic element type.
#[inline]
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 conversion")
}

/// A mutable view of one named parameter tensor together with its gradient.
pub struct ParamMut<'a, F: Scalar> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Fold an arbitrary signed index into `[0, n)` by symmetric reflection
/// (edge pixels repeat: `a b c | c b a | a b c ...`). Handles offsets of
/// any magnitude, so padding may exceed the array size.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let period = 2 * n as isize;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::reflect_index;

    #[test]
    fn reflect_small_cases() {
        // n = 3 pattern around the left edge: ... c b a | a b c
        assert_eq!(reflect_index(0, 3), 0);
        assert_eq!(reflect_index(-1, 3), 0);
        assert_eq!(reflect_index(-2, 3), 1);
        assert_eq!(reflect_index(-3, 3), 2);
        assert_eq!(reflect_index(-4, 3), 2);
        assert_eq!(reflect_index(3, 3), 2);
        assert_eq!(reflect_index(4, 3), 1);
        assert_eq!(reflect_index(5, 3), 0);
        assert_eq!(reflect_index(6, 3), 0);
    }

    #[test]
    fn reflect_handles_padding_larger_than_extent() {
        for i in -50..50 {
            let r = reflect_index(i, 4);
            assert!(r < 4);
        }
        // single-element arrays always map to 0
        for i in -7..7 {
            assert_eq!(reflect_index(i, 1), 0);
        }
    }
}
