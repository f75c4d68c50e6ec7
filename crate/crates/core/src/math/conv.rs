//! 2-D convolution (im2col + GEMM) and bilinear resizing as differentiable ops.

use ndarray::{Array2, ArrayView2, ArrayView4, Axis, Ix4, IxDyn};

use super::tensor::{Arr, Tensor};

fn im2col(x: &ArrayView4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                let mut row_view = cols.row_mut(row);
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            row_view[ni * ho * wo + oh * wo + ow] =
                                x[(ni, ci, ih as usize, iw as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &ArrayView2<f64>,
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Arr {
    let (n, c, h, w) = shape;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut x = ndarray::Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                let row_view = cols.row(row);
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            x[(ni, ci, ih as usize, iw as usize)] +=
                                row_view[ni * ho * wo + oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
    x.into_dyn()
}

/// `x`: (N, Cin, H, W), `weight`: (Cout, Cin, kh, kw), `bias`: (Cout).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d input must be 4-D");
    assert_eq!(ws.len(), 4, "conv2d weight must be 4-D");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
    let (n, h, w) = (xs[0], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;

    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let cols = im2col(&x4, kh, kw, stride, pad);
    let w2 = weight
        .value()
        .to_shape((cout, ws[1] * kh * kw))
        .unwrap()
        .to_owned();
    let mut out2 = w2.dot(&cols); // (Cout, N*Ho*Wo)
    let bview = bias.value().view().into_dimensionality::<ndarray::Ix1>().unwrap();
    for (mut row, &b) in out2.rows_mut().into_iter().zip(bview.iter()) {
        row += b;
    }
    let out = out2
        .to_shape((cout, n, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_dyn();

    let cols = std::rc::Rc::new(cols);
    let (ix, iw, ib) = (x.tracked_id(), weight.tracked_id(), bias.tracked_id());
    let wval = weight.value().clone();
    let back = move |g: &Arr, store: &mut super::tensor::GradStore| {
        // g: (N, Cout, Ho, Wo) -> (Cout, N*Ho*Wo)
        let g2 = g
            .view()
            .permuted_axes(IxDyn(&[1, 0, 2, 3]))
            .to_shape((cout, n * ho * wo))
            .unwrap()
            .to_owned();
        if let Some(iw) = iw {
            let dw = g2.dot(&cols.t());
            store.accum(
                iw,
                dw.to_shape(IxDyn(&[cout, ws[1], kh, kw])).unwrap().to_owned(),
            );
        }
        if let Some(ib) = ib {
            store.accum(ib, g2.sum_axis(Axis(1)).into_dyn());
        }
        if let Some(ix) = ix {
            let w2 = wval
                .to_shape((cout, ws[1] * kh * kw))
                .unwrap()
                .to_owned();
            let dcols = w2.t().dot(&g2);
            store.accum(ix, col2im(&dcols.view(), (n, ws[1], h, w), kh, kw, stride, pad));
        }
    };
    Tensor::from_op(&[x, weight, bias], out, back)
}

struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

/// Half-pixel-centered source indices/weights for 1-D bilinear resampling.
fn axis_map(n_in: usize, n_out: usize) -> AxisMap {
    let scale = n_in as f64 / n_out as f64;
    let mut m = AxisMap {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        t: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let s = (o as f64 + 0.5) * scale - 0.5;
        let f = s.floor();
        let t = (s - f).clamp(0.0, 1.0);
        let lo = (f.max(0.0) as usize).min(n_in - 1);
        let hi = ((f + 1.0).max(0.0) as usize).min(n_in - 1);
        m.lo.push(lo);
        m.hi.push(hi);
        m.t.push(if f < 0.0 { 0.0 } else { t });
    }
    m
}

/// Bilinear resize of (N, C, H, W) to (N, C, out_h, out_w), half-pixel centers.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 4, "bilinear_resize input must be 4-D");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let rows = axis_map(h, out_h);
    let cols = axis_map(w, out_w);

    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ndarray::Array4::<f64>::zeros((n, c, out_h, out_w));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x4.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            for oh in 0..out_h {
                let (r0, r1, tr) = (rows.lo[oh], rows.hi[oh], rows.t[oh]);
                for ow in 0..out_w {
                    let (c0, c1, tc) = (cols.lo[ow], cols.hi[ow], cols.t[ow]);
                    let v00 = plane[(r0, c0)];
                    let v01 = plane[(r0, c1)];
                    let v10 = plane[(r1, c0)];
                    let v11 = plane[(r1, c1)];
                    out[(ni, ci, oh, ow)] = (1.0 - tr) * ((1.0 - tc) * v00 + tc * v01)
                        + tr * ((1.0 - tc) * v10 + tc * v11);
                }
            }
        }
    }

    let ix = x.tracked_id();
    let back = move |g: &Arr, store: &mut super::tensor::GradStore| {
        if let Some(ix) = ix {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..out_h {
                        let (r0, r1, tr) = (rows.lo[oh], rows.hi[oh], rows.t[oh]);
                        for ow in 0..out_w {
                            let (c0, c1, tc) = (cols.lo[ow], cols.hi[ow], cols.t[ow]);
                            let gv = g4[(ni, ci, oh, ow)];
                            dx[(ni, ci, r0, c0)] += gv * (1.0 - tr) * (1.0 - tc);
                            dx[(ni, ci, r0, c1)] += gv * (1.0 - tr) * tc;
                            dx[(ni, ci, r1, c0)] += gv * tr * (1.0 - tc);
                            dx[(ni, ci, r1, c1)] += gv * tr * tc;
                        }
                    }
                }
            }
            store.accum(ix, dx.into_dyn());
        }
    };
    Tensor::from_op(&[x], out.into_dyn(), back)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::gradcheck;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop convolution used as the oracle.
    fn conv_naive(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = ndarray::Array4::<f64>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b[[co]];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x[[ni, ci, ih as usize, iw as usize]]
                                        * w[[co, ci, ki, kj]];
                                }
                            }
                        }
                        out[(ni, co, oh, ow)] = acc;
                    }
                }
            }
        }
        out.into_dyn()
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = randn(&[2, 3, 7, 6], 1);
            let w = randn(&[4, 3, 3, 3], 2);
            let b = randn(&[4], 3);
            let got = conv2d(
                &Tensor::constant(x.clone()),
                &Tensor::constant(w.clone()),
                &Tensor::constant(b.clone()),
                stride,
                pad,
            );
            let want = conv_naive(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            let diff = (got.value() - &want).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(diff < 1e-10, "stride {stride} pad {pad}: max diff {diff}");
        }
    }

    #[test]
    fn conv2d_grad() {
        let err = gradcheck(
            |xs| conv2d(&xs[0], &xs[1], &xs[2], 2, 1).square().sum_all(),
            &[randn(&[1, 2, 5, 5], 4), randn(&[3, 2, 3, 3], 5), randn(&[3], 6)],
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x = randn(&[1, 2, 5, 4], 7);
        let y = bilinear_resize(&Tensor::constant(x.clone()), 5, 4);
        let diff = (y.value() - &x).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn resize_grad() {
        let err = gradcheck(
            |xs| bilinear_resize(&xs[0], 6, 7).square().sum_all(),
            &[randn(&[1, 2, 3, 4], 8)],
        );
        assert!(err < 1e-6, "rel err {err}");
        let err = gradcheck(
            |xs| bilinear_resize(&xs[0], 2, 3).square().sum_all(),
            &[randn(&[1, 2, 5, 6], 9)],
        );
        assert!(err < 1e-6, "downscale rel err {err}");
    }

    #[test]
    fn resize_doubling_interpolates_midpoints() {
        // 1-D ramp along width: doubling must hit exact midpoints interior.
        let x = Arr::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![0.0, 1.0, 2.0]).unwrap();
        let y = bilinear_resize(&Tensor::constant(x), 1, 6);
        let got: Vec<f64> = y.value().iter().cloned().collect();
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.0];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }
}
