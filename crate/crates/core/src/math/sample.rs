//! Differentiable bilinear sampling of `(H, W, C)` feature grids.
//!
//! Coordinates are continuous pixel coordinates with half-pixel centers:
//! pixel `(row r, col c)` covers `[c, c+1) x [r, r+1)` and its center sits at
//! `(c + 0.5, r + 0.5)`. Gradients flow to the grid values only; query
//! locations are treated as fixed.

use ndarray::{Array2, ArrayView2, Ix3, IxDyn};

use super::tensor::{Arr, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Border {
    /// Out-of-range neighbors contribute zero.
    Zero,
    /// Neighbor indices clamp to the grid edge.
    Clamp,
}

struct TapWeights {
    // (row, col, weight) up to 4 taps per point; invalid taps dropped in Zero mode
    taps: Vec<[(isize, isize, f64); 4]>,
}

fn tap_weights(coords: &ArrayView2<f64>, h: usize, w: usize, border: Border) -> TapWeights {
    let n = coords.nrows();
    let mut taps = Vec::with_capacity(n);
    for p in 0..n {
        let u = coords[(p, 0)] - 0.5;
        let v = coords[(p, 1)] - 0.5;
        let c0 = u.floor();
        let r0 = v.floor();
        let tc = u - c0;
        let tr = v - r0;
        let (c0, r0) = (c0 as isize, r0 as isize);
        let mut t = [
            (r0, c0, (1.0 - tr) * (1.0 - tc)),
            (r0, c0 + 1, (1.0 - tr) * tc),
            (r0 + 1, c0, tr * (1.0 - tc)),
            (r0 + 1, c0 + 1, tr * tc),
        ];
        for tap in t.iter_mut() {
            match border {
                Border::Clamp => {
                    tap.0 = tap.0.clamp(0, h as isize - 1);
                    tap.1 = tap.1.clamp(0, w as isize - 1);
                }
                Border::Zero => {
                    if tap.0 < 0 || tap.0 >= h as isize || tap.1 < 0 || tap.1 >= w as isize {
                        tap.2 = 0.0;
                        tap.0 = 0;
                        tap.1 = 0;
                    }
                }
            }
        }
        taps.push(t);
    }
    TapWeights { taps }
}

/// Sample `map` (H, W, C) at `coords` (N, 2) as (x = col, y = row) -> (N, C).
pub fn bilinear_sample(map: &Tensor, coords: &Array2<f64>, border: Border) -> Tensor {
    let shape = map.shape().to_vec();
    assert_eq!(shape.len(), 3, "bilinear_sample expects (H, W, C)");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let tw = tap_weights(&coords.view(), h, w, border);
    let n = tw.taps.len();

    let m3 = map.value().view().into_dimensionality::<Ix3>().unwrap();
    let mslice = m3.to_slice_memory_order();
    let mut out = Array2::<f64>::zeros((n, c));
    for (p, taps) in tw.taps.iter().enumerate() {
        let mut row = out.row_mut(p);
        for &(r, cc, wt) in taps {
            if wt == 0.0 {
                continue;
            }
            match mslice {
                Some(flat) => {
                    let base = (r as usize * w + cc as usize) * c;
                    for (o, &v) in row.iter_mut().zip(&flat[base..base + c]) {
                        *o += wt * v;
                    }
                }
                None => {
                    for k in 0..c {
                        row[k] += wt * m3[(r as usize, cc as usize, k)];
                    }
                }
            }
        }
    }

    let im = map.tracked_id();
    let back = move |g: &Arr, store: &mut super::tensor::GradStore| {
        if let Some(im) = im {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut dmap = Arr::zeros(IxDyn(&[h, w, c]));
            {
                let flat = dmap.as_slice_memory_order_mut().unwrap();
                for (p, taps) in tw.taps.iter().enumerate() {
                    let grow = g2.row(p);
                    for &(r, cc, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        let base = (r as usize * w + cc as usize) * c;
                        for (dst, &gv) in flat[base..base + c].iter_mut().zip(grow.iter()) {
                            *dst += wt * gv;
                        }
                    }
                }
            }
            store.accum(im, dmap);
        }
    };
    Tensor::from_op(&[map], out.into_dyn(), back)
}

/// Whether each continuous pixel coordinate falls inside the image area.
pub fn inside_image(coords: &Array2<f64>, w: usize, h: usize) -> Vec<bool> {
    coords
        .rows()
        .into_iter()
        .map(|r| r[0] >= 0.0 && r[0] < w as f64 && r[1] >= 0.0 && r[1] < h as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::gradcheck;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(h: usize, w: usize, c: usize, seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(&[h, w, c]), |_| rng.gen_range(-1.0..1.0))
    }

    /// Whole-pixel-center query returns the stored node row exactly.
    #[test]
    fn node_query_returns_stored_row() {
        let map = rand_map(4, 5, 3, 1);
        let coords = Array2::from_shape_vec((1, 2), vec![2.5, 1.5]).unwrap(); // col 2, row 1
        let got = bilinear_sample(&Tensor::constant(map.clone()), &coords, Border::Zero);
        for k in 0..3 {
            assert!((got.value()[[0, k]] - map[[1, 2, k]]).abs() < 1e-12);
        }
    }

    /// Hand-rolled 4-neighbor weighted-sum oracle on random fractional coords.
    #[test]
    fn matches_four_neighbor_oracle() {
        let map = rand_map(6, 7, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut coords = Array2::<f64>::zeros((64, 2));
        for mut row in coords.rows_mut() {
            row[0] = rng.gen_range(0.6..6.4);
            row[1] = rng.gen_range(0.6..5.4);
        }
        let got = bilinear_sample(&Tensor::constant(map.clone()), &coords, Border::Zero);
        for p in 0..64 {
            let u = coords[(p, 0)] - 0.5;
            let v = coords[(p, 1)] - 0.5;
            let (c0, r0) = (u.floor() as usize, v.floor() as usize);
            let (tc, tr) = (u - c0 as f64, v - r0 as f64);
            for k in 0..4 {
                let want = (1.0 - tr) * (1.0 - tc) * map[[r0, c0, k]]
                    + (1.0 - tr) * tc * map[[r0, c0 + 1, k]]
                    + tr * (1.0 - tc) * map[[r0 + 1, c0, k]]
                    + tr * tc * map[[r0 + 1, c0 + 1, k]];
                assert!((got.value()[[p, k]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_border_fades_outside() {
        let map = Arr::ones(IxDyn(&[2, 2, 1]));
        // Query left of the image: center of pixel 0 is x=0.5; x=0.0 mixes
        // half a zero neighbor in.
        let coords = Array2::from_shape_vec((2, 2), vec![0.0, 0.5, -3.0, 0.5]).unwrap();
        let got = bilinear_sample(&Tensor::constant(map.clone()), &coords, Border::Zero);
        assert!((got.value()[[0, 0]] - 0.5).abs() < 1e-12);
        assert!(got.value()[[1, 0]].abs() < 1e-12);
        let clamped = bilinear_sample(&Tensor::constant(map), &coords, Border::Clamp);
        assert!((clamped.value()[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_flows_to_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut coords = Array2::<f64>::zeros((10, 2));
        for mut row in coords.rows_mut() {
            row[0] = rng.gen_range(-0.5..5.6);
            row[1] = rng.gen_range(-0.5..4.6);
        }
        for border in [Border::Zero, Border::Clamp] {
            let coords = coords.clone();
            let err = gradcheck(
                move |xs| bilinear_sample(&xs[0], &coords, border).square().sum_all(),
                &[rand_map(5, 5, 2, 6)],
            );
            assert!(err < 1e-7, "{border:?}: rel err {err}");
        }
    }

    #[test]
    fn inside_image_uses_half_open_bounds() {
        let coords =
            Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 4.999, 2.0, 5.0, 2.0]).unwrap();
        assert_eq!(inside_image(&coords, 5, 4), vec![true, true, false]);
    }
}
