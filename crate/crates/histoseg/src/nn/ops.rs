//! Parameter-free tensor ops: ReLU, 2x2 max-pooling, bilinear upsampling
//! and channel concatenation, each with an explicit backward pass.

use ndarray::parallel::prelude::*;
use ndarray::{concatenate, s, Array2, Array4, ArrayView4, Axis};

use super::{fl, Scalar};

pub fn relu_forward<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `y` is the ReLU output saved from the forward pass.
pub fn relu_backward<F: Scalar>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the in-window
/// argmax (0..4, row-major within the window); ties resolve to the first
/// maximum in scan order.
pub fn maxpool2_forward<F: Scalar>(x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    let mut idx = Array4::<u8>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.slice(s![bi, ci, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane[[2 * oy, 2 * ox]];
                    let mut best_q = 0u8;
                    for q in 1..4u8 {
                        let (dy, dx) = ((q / 2) as usize, (q % 2) as usize);
                        let v = plane[[2 * oy + dy, 2 * ox + dx]];
                        if v > best {
                            best = v;
                            best_q = q;
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    idx[[bi, ci, oy, ox]] = best_q;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<F: Scalar>(dy: &Array4<F>, idx: &Array4<u8>) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let mut dx = Array4::<F>::zeros((b, c, 2 * oh, 2 * ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let q = idx[[bi, ci, oy, ox]] as usize;
                    let (qy, qx) = (q / 2, q % 2);
                    dx[[bi, ci, 2 * oy + qy, 2 * ox + qx]] = dy[[bi, ci, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Interpolation taps for one axis of an integer-factor bilinear resize with
/// half-pixel-center alignment (corner pixels are cell centers): output `i`
/// samples input coordinate `(i + 0.5)/factor - 0.5`, clamped at the edges.
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) / factor as f64 - 0.5;
            let i0f = src.floor();
            let t = src - i0f;
            let i0 = (i0f as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (i0f as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub fn bilinear_up_forward<F: Scalar>(x: &Array4<F>, factor: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let rows = bilinear_taps(oh, h, factor);
    let cols = bilinear_taps(ow, w, factor);
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    let planes_in: Vec<_> = (0..b * c)
        .map(|i| x.slice(s![i / c, i % c, .., ..]))
        .collect();
    y.view_mut()
        .into_shape_with_order((b * c, oh, ow))
        .expect("contiguous")
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(planes_in.into_par_iter())
        .for_each(|(mut yp, xp)| {
            for (oy, &(i0, i1, ty)) in rows.iter().enumerate() {
                for (ox, &(j0, j1, tx)) in cols.iter().enumerate() {
                    let ty = fl::<F>(ty);
                    let tx = fl::<F>(tx);
                    let one = F::one();
                    let v = (one - ty)
                        * ((one - tx) * xp[[i0, j0]] + tx * xp[[i0, j1]])
                        + ty * ((one - tx) * xp[[i1, j0]] + tx * xp[[i1, j1]]);
                    yp[[oy, ox]] = v;
                }
            }
        });
    y
}

pub fn bilinear_up_backward<F: Scalar>(dy: &Array4<F>, factor: usize) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let (h, w) = (oh / factor, ow / factor);
    let rows = bilinear_taps(oh, h, factor);
    let cols = bilinear_taps(ow, w, factor);
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    let planes_dy: Vec<_> = (0..b * c)
        .map(|i| dy.slice(s![i / c, i % c, .., ..]))
        .collect();
    dx.view_mut()
        .into_shape_with_order((b * c, h, w))
        .expect("contiguous")
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(planes_dy.into_par_iter())
        .for_each(|(mut dxp, dyp)| {
            for (oy, &(i0, i1, ty)) in rows.iter().enumerate() {
                for (ox, &(j0, j1, tx)) in cols.iter().enumerate() {
                    let g = dyp[[oy, ox]];
                    let ty = fl::<F>(ty);
                    let tx = fl::<F>(tx);
                    let one = F::one();
                    dxp[[i0, j0]] = dxp[[i0, j0]] + (one - ty) * (one - tx) * g;
                    dxp[[i0, j1]] = dxp[[i0, j1]] + (one - ty) * tx * g;
                    dxp[[i1, j0]] = dxp[[i1, j0]] + ty * (one - tx) * g;
                    dxp[[i1, j1]] = dxp[[i1, j1]] + ty * tx * g;
                }
            }
        });
    dx
}

pub fn concat_channels<F: Scalar>(parts: &[ArrayView4<F>]) -> Array4<F> {
    concatenate(Axis(1), parts).expect("channel concat shapes agree")
}

/// Split an upstream gradient back into per-part channel slabs.
pub fn split_channels<F: Scalar>(dy: &Array4<F>, widths: &[usize]) -> Vec<Array4<F>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &wd in widths {
        out.push(dy.slice(s![.., start..start + wd, .., ..]).to_owned());
        start += wd;
    }
    out
}

/// Row-major mean of an `Array2<F>` in f64.
pub fn mean2<F: Scalar>(a: &Array2<F>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha12Rng) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn maxpool_forward_and_scatter() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let (y, idx) = maxpool2_forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = maxpool2_backward(&dy, &idx);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn bilinear_identity_factor_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand4((1, 2, 3, 5), &mut rng);
        let y = bilinear_up_forward(&x, 1);
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = Array4::<f64>::from_elem((1, 1, 4, 4), 0.7);
        for factor in [2usize, 4] {
            let y = bilinear_up_forward(&x, factor);
            for v in y.iter() {
                assert!((*v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_x2_interior_weights() {
        // 1-D ramp along a row: interior outputs are 0.25/0.75 blends
        let mut x = Array4::<f64>::zeros((1, 1, 1, 4));
        // make the row even so taps on the row axis collapse to the edge
        let x = {
            let mut b = Array4::<f64>::zeros((1, 1, 2, 4));
            for j in 0..4 {
                b[[0, 0, 0, j]] = j as f64;
                b[[0, 0, 1, j]] = j as f64;
            }
            x.fill(0.0);
            b
        };
        let y = bilinear_up_forward(&x, 2);
        // output col 1 samples src -0.25+0.5 = 0.25 -> 0.75*x0 + 0.25*x1
        assert!((y[[0, 0, 0, 1]] - 0.25).abs() < 1e-12);
        assert!((y[[0, 0, 0, 2]] - 0.75).abs() < 1e-12);
        // borders replicate
        assert!((y[[0, 0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((y[[0, 0, 0, 7]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_backward_is_transpose() {
        // <up(x), c> == <x, up^T(c)> for random x, c
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for factor in [2usize, 4] {
            let x = rand4((2, 3, 4, 6), &mut rng);
            let c = rand4((2, 3, 4 * factor, 6 * factor), &mut rng);
            let lhs = (&bilinear_up_forward(&x, factor) * &c).sum();
            let rhs = (&x * &bilinear_up_backward(&c, factor)).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = rand4((1, 2, 3, 3), &mut rng);
        let b = rand4((1, 4, 3, 3), &mut rng);
        let cat = concat_channels(&[a.view(), b.view()]);
        assert_eq!(cat.dim(), (1, 6, 3, 3));
        let parts = split_channels(&cat, &[2, 4]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
