//! Lowering helpers shared by the float inference path and the training
//! engine: im2col/col2im and a thin GEMM trait over `matrixmultiply`.

use crate::tensor::ConvParams;
use num_traits::Float;

/// Scalar types the GEMM-backed paths run on.
pub trait Gemm: Float + Default + Send + Sync + std::fmt::Debug + std::ops::AddAssign + 'static {
    /// `c = a * b (+ c)`; `a` is `m x k`, `b` is `k x n`, each optionally
    /// stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);

    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool) {
        Self::gemm(m, k, n, a, false, b, false, c, accumulate)
    }

    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense
                // row-major (or transposed) storage of exactly those sizes.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }

            fn from_f32(v: f32) -> Self {
                v as $t
            }

            fn to_f32(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

/// Unfold one `c x h x w` plane into a `fan_in x positions` column matrix.
pub fn im2col<T: Copy>(plane: &[T], [c, h, w]: [usize; 3], p: &ConvParams, cols: &mut [T]) {
    let oh = (h - p.kh) / p.stride + 1;
    let ow = (w - p.kw) / p.stride + 1;
    let positions = oh * ow;
    debug_assert!(cols.len() >= c * p.kh * p.kw * positions);
    let mut row = 0;
    for ch in 0..c {
        let src = &plane[ch * h * w..(ch + 1) * h * w];
        for i in 0..p.kh {
            for j in 0..p.kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let base = (y * p.stride + i) * w + j;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if p.stride == 1 {
                        line.copy_from_slice(&src[base..base + ow]);
                    } else {
                        for (x, d) in line.iter_mut().enumerate() {
                            *d = src[base + x * p.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into a plane.
pub fn col2im<T: Copy + std::ops::AddAssign>(cols: &[T], [c, h, w]: [usize; 3], p: &ConvParams, plane: &mut [T]) {
    let oh = (h - p.kh) / p.stride + 1;
    let ow = (w - p.kw) / p.stride + 1;
    let positions = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        let dst = &mut plane[ch * h * w..(ch + 1) * h * w];
        for i in 0..p.kh {
            for j in 0..p.kw {
                let src = &cols[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let base = (y * p.stride + i) * w + j;
                    for x in 0..ow {
                        dst[base + x * p.stride] += src[y * ow + x];
                    }
                }
                row += 1;
            }
        }
    }
}
