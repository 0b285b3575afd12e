//! Convolution layers: strided/dilated `Conv2d` and the 2x2-stride-2
//! transposed convolution used by the decoder.
//!
//! Convolutions run as chunked im2col + GEMM. A chunk is a band of output
//! rows, sized so the column buffer stays small; chunks are processed by
//! rayon tasks that write disjoint output slices, and every reduction
//! (weight gradients) is summed in a fixed order, so results do not depend
//! on the number of worker threads.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{fl, Scalar};
use crate::error::{Error, Result};

/// Target column-buffer size per im2col chunk, in elements.
const CHUNK_TARGET_ELEMS: usize = 1 << 21;

/// Indices `o` in `[0, out_extent)` such that `0 <= o*stride + off < extent`,
/// returned as a half-open range.
#[inline]
fn valid_range(off: isize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_num = extent as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_extent as isize);
    let lo = lo.max(0) as usize;
    let hi = hi.max(0) as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// 2-D convolution with square kernels, zero padding, and equal stride /
/// dilation on both axes.
pub struct Conv2d<F: Scalar> {
    /// `[c_out, c_in, k, k]`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub grad_weight: Array4<F>,
    pub grad_bias: Array1<F>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal initialization: `std = sqrt(2 / fan_in)`, zero bias.
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = Array4::from_shape_simple_fn((c_out, c_in, k, k), || {
            fl::<F>(normal.sample(rng))
        });
        Conv2d {
            weight,
            bias: Array1::zeros(c_out),
            grad_weight: Array4::zeros((c_out, c_in, k, k)),
            grad_bias: Array1::zeros(c_out),
            stride,
            dilation,
            padding,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let eff = self.dilation * (k - 1) + 1;
        let oh = (h + 2 * self.padding - eff) / self.stride + 1;
        let ow = (w + 2 * self.padding - eff) / self.stride + 1;
        (oh, ow)
    }

    fn col_rows(&self) -> usize {
        self.c_in() * self.kernel() * self.kernel()
    }

    fn rows_per_chunk(&self, out_h: usize, out_w: usize) -> usize {
        let per_row = self.col_rows() * out_w;
        (CHUNK_TARGET_ELEMS / per_row.max(1)).clamp(1, out_h)
    }

    /// Fill `col` (shape `[c_in*k*k, (r1-r0)*out_w]`) from input rows of one
    /// batch item for output rows `r0..r1`. `col` must be zeroed.
    fn im2col(
        &self,
        x: &ArrayView3<F>,
        r0: usize,
        r1: usize,
        out_w: usize,
        col: &mut Array2<F>,
    ) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let (s, d, p) = (self.stride, self.dilation, self.padding as isize);
        for c in 0..self.c_in() {
            let plane = x.index_axis(Axis(0), c);
            for ky in 0..k {
                for kx in 0..k {
                    let row_idx = (c * k + ky) * k + kx;
                    let off_x = (kx * d) as isize - p;
                    let (lo, hi) = valid_range(off_x, s, w, out_w);
                    if lo >= hi {
                        continue;
                    }
                    let ix_lo = (lo * s) as isize + off_x;
                    let ix_hi = ((hi - 1) * s) as isize + off_x + 1;
                    for oy in r0..r1 {
                        let iy = (oy * s) as isize + (ky * d) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane.slice(s![iy as usize, ix_lo..ix_hi;s]);
                        let base = (oy - r0) * out_w;
                        let mut dst = col.slice_mut(s![row_idx, base + lo..base + hi]);
                        dst.assign(&src);
                    }
                }
            }
        }
    }

    /// Scatter-add `dcol` (same layout as `im2col` output) back into `dx`.
    fn col2im_add(
        &self,
        dcol: &ArrayView2<F>,
        r0: usize,
        r1: usize,
        out_w: usize,
        dx: &mut Array3<F>,
    ) {
        let (h, w) = (dx.shape()[1], dx.shape()[2]);
        let k = self.kernel();
        let (s, d, p) = (self.stride, self.dilation, self.padding as isize);
        for c in 0..self.c_in() {
            let mut plane = dx.index_axis_mut(Axis(0), c);
            for ky in 0..k {
                for kx in 0..k {
                    let row_idx = (c * k + ky) * k + kx;
                    let off_x = (kx * d) as isize - p;
                    let (lo, hi) = valid_range(off_x, s, w, out_w);
                    if lo >= hi {
                        continue;
                    }
                    let ix_lo = (lo * s) as isize + off_x;
                    let ix_hi = ((hi - 1) * s) as isize + off_x + 1;
                    for oy in r0..r1 {
                        let iy = (oy * s) as isize + (ky * d) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (oy - r0) * out_w;
                        let src = dcol.slice(s![row_idx, base + lo..base + hi]);
                        let mut dst = plane.slice_mut(s![iy as usize, ix_lo..ix_hi;s]);
                        dst.zip_mut_with(&src, |a, &b| *a = *a + b);
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, _c_in, h, w) = x.dim();
        let (out_h, out_w) = self.out_spatial(h, w);
        let n = out_h * out_w;
        let kdim = self.col_rows();
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((self.c_out(), kdim))
            .expect("weight is contiguous");
        let rows = self.rows_per_chunk(out_h, out_w);
        let mut y = Array4::<F>::zeros((b, self.c_out(), out_h, out_w));
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(yb, xb)| {
                let mut y2 = yb
                    .into_shape_with_order((self.c_out(), n))
                    .expect("output is contiguous");
                let chunk_starts: Vec<usize> = (0..out_h).step_by(rows).collect();
                y2.axis_chunks_iter_mut(Axis(1), rows * out_w)
                    .into_par_iter()
                    .zip(chunk_starts.into_par_iter())
                    .for_each(|(mut ychunk, r0)| {
                        let r1 = (r0 + rows).min(out_h);
                        let mut col = Array2::<F>::zeros((kdim, (r1 - r0) * out_w));
                        self.im2col(&xb, r0, r1, out_w, &mut col);
                        general_mat_mul(F::one(), &w2, &col, F::zero(), &mut ychunk);
                        for (mut row, &bv) in ychunk.outer_iter_mut().zip(self.bias.iter()) {
                            row.mapv_inplace(|v| v + bv);
                        }
                    });
            });
        y
    }

    /// Accumulates `grad_weight`/`grad_bias` and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        let (out_h, out_w) = self.out_spatial(h, w);
        let n = out_h * out_w;
        let kdim = self.col_rows();
        let c_out = self.c_out();
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, kdim))
            .expect("weight is contiguous");
        let rows = self.rows_per_chunk(out_h, out_w);
        let mut dx = Array4::<F>::zeros((b, c_in, h, w));

        let partials: Vec<Array2<F>> = dx
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .zip(dy.axis_iter(Axis(0)).into_par_iter())
            .map(|((mut dxb, xb), dyb)| {
                let dy2 = dyb
                    .into_shape_with_order((c_out, n))
                    .expect("grad is contiguous");
                let mut dwb = Array2::<F>::zeros((c_out, kdim));
                let mut dxb_owned = Array3::<F>::zeros((c_in, h, w));
                let mut r0 = 0;
                while r0 < out_h {
                    let r1 = (r0 + rows).min(out_h);
                    let cols = (r1 - r0) * out_w;
                    let dy_chunk = dy2.slice(s![.., r0 * out_w..r0 * out_w + cols]);
                    let mut col = Array2::<F>::zeros((kdim, cols));
                    self.im2col(&xb, r0, r1, out_w, &mut col);
                    general_mat_mul(F::one(), &dy_chunk, &col.t(), F::one(), &mut dwb);
                    let mut dcol = Array2::<F>::zeros((kdim, cols));
                    general_mat_mul(F::one(), &w2.t(), &dy_chunk, F::zero(), &mut dcol);
                    self.col2im_add(&dcol.view(), r0, r1, out_w, &mut dxb_owned);
                    r0 = r1;
                }
                dxb.assign(&dxb_owned);
                dwb
            })
            .collect();

        let mut gw = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((c_out, kdim))
            .expect("grad is contiguous");
        for dwb in &partials {
            gw.zip_mut_with(dwb, |a, &v| *a = *a + v);
        }
        let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        self.grad_bias.zip_mut_with(&db, |a, &v| *a = *a + v);
        dx
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (the decoder
/// up-convolution). Output blocks do not overlap, so both passes are plain
/// GEMMs plus a reshuffle.
pub struct UpConv2d<F: Scalar> {
    /// `[c_in, c_out, 2, 2]`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub grad_weight: Array4<F>,
    pub grad_bias: Array1<F>,
}

impl<F: Scalar> UpConv2d<F> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / c_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight =
            Array4::from_shape_simple_fn((c_in, c_out, 2, 2), || fl::<F>(normal.sample(rng)));
        UpConv2d {
            weight,
            bias: Array1::zeros(c_out),
            grad_weight: Array4::zeros((c_in, c_out, 2, 2)),
            grad_bias: Array1::zeros(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        let c_out = self.c_out();
        let n = h * w;
        // rows of `wq`: flattened (c_out, dy, dx) quadrant index
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * 4))
            .expect("weight is contiguous");
        let mut y = Array4::<F>::zeros((b, c_out, 2 * h, 2 * w));
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut yb, xb)| {
                let x2 = xb.into_shape_with_order((c_in, n)).expect("contiguous");
                let mut out = Array2::<F>::zeros((c_out * 4, n));
                general_mat_mul(F::one(), &w2.t(), &x2, F::zero(), &mut out);
                for o in 0..c_out {
                    let bv = self.bias[o];
                    for dy_q in 0..2 {
                        for dx_q in 0..2 {
                            let q = (o * 2 + dy_q) * 2 + dx_q;
                            let src = out
                                .index_axis(Axis(0), q)
                                .into_shape_with_order((h, w))
                                .expect("contiguous");
                            let mut dst =
                                yb.slice_mut(s![o, dy_q..2 * h;2, dx_q..2 * w;2]);
                            dst.assign(&src);
                            dst.mapv_inplace(|v| v + bv);
                        }
                    }
                }
            });
        y
    }

    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        let c_out = self.c_out();
        let n = h * w;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * 4))
            .expect("weight is contiguous");
        let mut dx = Array4::<F>::zeros((b, c_in, h, w));
        let partials: Vec<Array2<F>> = dx
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .zip(dy.axis_iter(Axis(0)).into_par_iter())
            .map(|((dxb, xb), dyb)| {
                // gather quadrants of dy into [c_out*4, n]
                let mut dyq = Array2::<F>::zeros((c_out * 4, n));
                for o in 0..c_out {
                    for dy_q in 0..2 {
                        for dx_q in 0..2 {
                            let q = (o * 2 + dy_q) * 2 + dx_q;
                            let src = dyb.slice(s![o, dy_q..2 * h;2, dx_q..2 * w;2]);
                            let mut dst = dyq
                                .index_axis_mut(Axis(0), q)
                                .into_shape_with_order((h, w))
                                .expect("contiguous");
                            dst.assign(&src);
                        }
                    }
                }
                let x2 = xb.into_shape_with_order((c_in, n)).expect("contiguous");
                let mut dwb = Array2::<F>::zeros((c_in, c_out * 4));
                general_mat_mul(F::one(), &x2, &dyq.t(), F::zero(), &mut dwb);
                let mut dx2 = dxb
                    .into_shape_with_order((c_in, n))
                    .expect("contiguous");
                general_mat_mul(F::one(), &w2, &dyq, F::zero(), &mut dx2);
                dwb
            })
            .collect();

        let mut gw = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((c_in, c_out * 4))
            .expect("grad is contiguous");
        for dwb in &partials {
            gw.zip_mut_with(dwb, |a, &v| *a = *a + v);
        }
        let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        self.grad_bias.zip_mut_with(&db, |a, &v| *a = *a + v);
        dx
    }
}

/// Shape-precondition check shared by the models: spatial dims must be
/// divisible by `divisor` so pooling and the strided branches line up.
pub fn check_divisible(h: usize, w: usize, divisor: usize) -> Result<()> {
    if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {h}x{w} must be nonzero and divisible by {divisor}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayView4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Direct six-loop convolution used as an oracle.
    fn conv_oracle(
        x: &ArrayView4<f64>,
        w: &ArrayView4<f64>,
        bias: &[f64],
        stride: usize,
        dil: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (b, c_in, h, wd) = x.dim();
        let (c_out, _, k, _) = w.dim();
        let eff = dil * (k - 1) + 1;
        let oh = (h + 2 * pad - eff) / stride + 1;
        let ow = (wd + 2 * pad - eff) / stride + 1;
        let mut y = Array4::<f64>::zeros((b, c_out, oh, ow));
        for bi in 0..b {
            for o in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                    let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                    if iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < wd as isize
                                    {
                                        acc += x[[bi, c, iy as usize, ix as usize]]
                                            * w[[o, c, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[bi, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_array4(shape: (usize, usize, usize, usize), rng: &mut ChaCha12Rng) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_oracle_for_all_scale_branches() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &(s, d, p) in &[(1usize, 1usize, 1usize), (2, 2, 2), (4, 4, 4)] {
            let mut conv = Conv2d::<f64>::new(3, 5, 3, s, d, p, &mut rng);
            let x = rand_array4((2, 3, 8, 12), &mut rng);
            let y = conv.forward(&x);
            let bias: Vec<f64> = conv.bias.iter().copied().collect();
            let expect = conv_oracle(&x.view(), &conv.weight.view(), &bias, s, d, p);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-10, "mismatch at (s={s},d={d})");
            }
            // exercise the chunked path with a chunk smaller than out_h
            conv.grad_weight.fill(0.0);
        }
    }

    #[test]
    fn forward_matches_oracle_1x1() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let conv = Conv2d::<f64>::new(4, 2, 1, 1, 1, 0, &mut rng);
        let x = rand_array4((1, 4, 6, 6), &mut rng);
        let y = conv.forward(&x);
        let bias: Vec<f64> = conv.bias.iter().copied().collect();
        let expect = conv_oracle(&x.view(), &conv.weight.view(), &bias, 1, 1, 0);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Central finite differences over every parameter and input element.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for &(s, d, p) in &[(1usize, 1usize, 1usize), (2, 2, 2)] {
            let mut conv = Conv2d::<f64>::new(2, 3, 3, s, d, p, &mut rng);
            let x = rand_array4((2, 2, 6, 6), &mut rng);
            let (oh, ow) = conv.out_spatial(6, 6);
            let coef = rand_array4((2, 3, oh, ow), &mut rng);
            let eval = |c: &Conv2d<f64>, x: &Array4<f64>| (&c.forward(x) * &coef).sum();

            let dy = coef.clone();
            let dx = conv.backward(&x, &dy);

            let eps = 1e-5;
            for idx in 0..conv.weight.len() {
                let ix = ndix(conv.weight.shape(), idx);
                let orig = conv.weight[ix];
                conv.weight[ix] = orig + eps;
                let lp = eval(&conv, &x);
                conv.weight[ix] = orig - eps;
                let lm = eval(&conv, &x);
                conv.weight[ix] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = conv.grad_weight[ix];
                assert!((fd - an).abs() < 1e-6, "dW mismatch: fd={fd} an={an}");
            }
            for i in 0..conv.bias.len() {
                let orig = conv.bias[i];
                conv.bias[i] = orig + eps;
                let lp = eval(&conv, &x);
                conv.bias[i] = orig - eps;
                let lm = eval(&conv, &x);
                conv.bias[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - conv.grad_bias[i]).abs() < 1e-6);
            }
            let mut xp = x.clone();
            for idx in 0..x.len() {
                let ix = ndix(x.shape(), idx);
                let orig = xp[ix];
                xp[ix] = orig + eps;
                let lp = eval(&conv, &xp);
                xp[ix] = orig - eps;
                let lm = eval(&conv, &xp);
                xp[ix] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = dx[ix];
                assert!((fd - an).abs() < 1e-6, "dX mismatch: fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn upconv_forward_matches_direct_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let up = UpConv2d::<f64>::new(3, 2, &mut rng);
        let x = rand_array4((2, 3, 4, 5), &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2, 2, 8, 10));
        for b in 0..2 {
            for o in 0..2 {
                for i in 0..4 {
                    for j in 0..5 {
                        for dyq in 0..2 {
                            for dxq in 0..2 {
                                let mut acc = up.bias[o];
                                for c in 0..3 {
                                    acc += up.weight[[c, o, dyq, dxq]] * x[[b, c, i, j]];
                                }
                                let got = y[[b, o, 2 * i + dyq, 2 * j + dxq]];
                                assert!((got - acc).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut up = UpConv2d::<f64>::new(2, 3, &mut rng);
        let x = rand_array4((1, 2, 3, 4), &mut rng);
        let coef = rand_array4((1, 3, 6, 8), &mut rng);
        let eval = |u: &UpConv2d<f64>, x: &Array4<f64>| (&u.forward(x) * &coef).sum();
        let dx = up.backward(&x, &coef);
        let eps = 1e-5;
        for idx in 0..up.weight.len() {
            let ix = ndix(up.weight.shape(), idx);
            let orig = up.weight[ix];
            up.weight[ix] = orig + eps;
            let lp = eval(&up, &x);
            up.weight[ix] = orig - eps;
            let lm = eval(&up, &x);
            up.weight[ix] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - up.grad_weight[ix]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let ix = ndix(x.shape(), idx);
            let orig = xp[ix];
            xp[ix] = orig + eps;
            let lp = eval(&up, &xp);
            xp[ix] = orig - eps;
            let lm = eval(&up, &xp);
            xp[ix] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - dx[ix]).abs() < 1e-6);
        }
    }

    /// Unravel a flat index into a 4-d index.
    fn ndix(shape: &[usize], mut flat: usize) -> [usize; 4] {
        let mut out = [0usize; 4];
        for (i, &s) in shape.iter().enumerate().rev() {
            out[i] = flat % s;
            flat /= s;
        }
        out
    }
}
