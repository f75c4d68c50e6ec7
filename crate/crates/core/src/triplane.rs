//! Image-conditional triplane construction and sampling.
//!
//! Pipeline per source view: back-project the half-resolution feature map
//! into a K^3 world grid, depth-encode every cell with a small MLP on
//! (feature, camera-frame position, direction to the camera), collapse the
//! grid onto the xy/xz/yz planes with learned softmax weights along the
//! reduced axis, refine each plane with a strided conv stack, and finally
//! bilinearly sample the planes at query points with clamped borders.

use ndarray::{Array2, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::math::conv::bilinear_resize;
use crate::math::nn::{
    batchnorm2d, conv, init_batchnorm, init_conv, init_linear, linear, BnState, ParamSet, ParamVars,
};
use crate::math::sample::{bilinear_sample, Border};
use crate::math::{Arr, Tensor};
use crate::model::ModelConfig;

pub const PLANE_NAMES: [&str; 3] = ["xy", "xz", "yz"];
/// World axes spanned by each plane (rows, cols) and the reduced axis.
pub const PLANE_AXES: [(usize, usize, usize); 3] = [(0, 1, 2), (0, 2, 1), (1, 2, 0)];

/// Feature volume over the world cube `[-extent, extent]^3`.
pub struct FeatureVolume {
    /// (K, K, K, C) indexed (x, y, z, channel)
    pub data: Tensor,
    pub extent: f64,
}

/// The three refined feature planes of one source view.
pub struct TriplaneSet {
    /// xy, xz, yz; each (rows, cols, G)
    pub planes: [Tensor; 3],
    pub extent: f64,
}

/// Cell-center world coordinates, row-major over (x, y, z) indices.
pub fn cell_centers(k: usize, extent: f64) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((k * k * k, 3));
    let step = 2.0 * extent / k as f64;
    let mut row = 0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                out[(row, 0)] = -extent + (i as f64 + 0.5) * step;
                out[(row, 1)] = -extent + (j as f64 + 0.5) * step;
                out[(row, 2)] = -extent + (l as f64 + 0.5) * step;
                row += 1;
            }
        }
    }
    out
}

/// Axis coordinate of every grid index.
fn axis_coords(k: usize, extent: f64) -> Vec<f64> {
    let step = 2.0 * extent / k as f64;
    (0..k).map(|i| -extent + (i as f64 + 0.5) * step).collect()
}

pub fn init_triplane(
    weights: &mut ParamSet,
    buffers: &mut ParamSet,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) {
    let c = cfg.feature_channels;
    init_linear(weights, "depth_mlp.l0", c + 6, cfg.depth_mlp_hidden, rng);
    init_linear(weights, "depth_mlp.l1", cfg.depth_mlp_hidden, c, rng);
    for name in PLANE_NAMES {
        init_linear(
            weights,
            &format!("aggregators.{name}.l0"),
            c + 1,
            cfg.aggregator_hidden,
            rng,
        );
        init_linear(weights, &format!("aggregators.{name}.l1"), cfg.aggregator_hidden, 1, rng);
    }
    let g = cfg.plane_channels();
    for name in PLANE_NAMES {
        let p = format!("plane_convs.{name}");
        init_conv(weights, &format!("{p}.c0"), c / 2, c, 3, rng);
        init_batchnorm(weights, buffers, &format!("{p}.bn0"), c / 2);
        init_conv(weights, &format!("{p}.c1"), g, c / 2, 3, rng);
        init_batchnorm(weights, buffers, &format!("{p}.bn1"), g);
        init_conv(weights, &format!("{p}.c2"), g, g, 3, rng);
        init_batchnorm(weights, buffers, &format!("{p}.bn2"), g);
        init_conv(weights, &format!("{p}.c3"), g, g, 3, rng);
        init_batchnorm(weights, buffers, &format!("{p}.bn3"), g);
    }
}

/// Back-project a view's feature map along camera rays into the world grid.
/// Cells behind the camera or projecting outside the image are zero.
pub fn backproject(
    feature_map: &crate::features::FeatureMap,
    k: usize,
    extent: f64,
) -> FeatureVolume {
    let centers = cell_centers(k, extent);
    let (coords, valid) =
        crate::features::project_to_feature_coords(&feature_map.camera, &centers);
    let raw = bilinear_sample(&feature_map.data, &coords, Border::Zero);
    let mask = Arr::from_shape_fn(IxDyn(&[centers.nrows(), 1]), |d| {
        if valid[d[0]] {
            1.0
        } else {
            0.0
        }
    });
    let c = raw.shape()[1];
    let data = raw.mul(&Tensor::constant(mask)).reshape(&[k, k, k, c]);
    FeatureVolume { data, extent }
}

/// Depth-encode the volume: a 2-layer MLP over (feature, camera-frame cell
/// position, unit direction from the cell toward the camera center).
pub fn encode_depth(p: &ParamVars, volume: &FeatureVolume, camera: &Camera) -> FeatureVolume {
    let k = volume.data.shape()[0];
    let c = volume.data.shape()[3];
    let centers = cell_centers(k, volume.extent);
    let n = centers.nrows();
    let mut aux = Array2::<f64>::zeros((n, 6));
    let cam_center = camera.center();
    for i in 0..n {
        let w = nalgebra::Vector3::new(centers[(i, 0)], centers[(i, 1)], centers[(i, 2)]);
        let xc = camera.world_to_camera(&w);
        let d = (cam_center - w).normalize();
        for a in 0..3 {
            aux[(i, a)] = xc[a];
            aux[(i, 3 + a)] = d[a];
        }
    }
    let feat = volume.data.reshape(&[n, c]);
    let aux = Tensor::constant(aux.into_dyn());
    let x = Tensor::concat(&[&feat, &aux], 1);
    let h = linear(p, "depth_mlp.l0", &x).relu();
    let out = linear(p, "depth_mlp.l1", &h);
    FeatureVolume {
        data: out.reshape(&[k, k, k, c]),
        extent: volume.extent,
    }
}

/// Collapse the depth-encoded volume onto the three planes with softmax
/// weights along the reduced axis. Returns raw planes (rows, cols, C).
pub fn aggregate(p: &ParamVars, volume: &FeatureVolume) -> [Tensor; 3] {
    let k = volume.data.shape()[0];
    let c = volume.data.shape()[3];
    let n = k * k * k;
    let flat = volume.data.reshape(&[n, c]);
    let coords = axis_coords(k, volume.extent);

    let mut planes: Vec<Tensor> = Vec::with_capacity(3);
    for (pi, name) in PLANE_NAMES.iter().enumerate() {
        let (_, _, reduced) = PLANE_AXES[pi];
        // coordinate of each cell along the reduced axis, in (x, y, z) order
        let coord_col = Arr::from_shape_fn(IxDyn(&[n, 1]), |d| {
            let idx = d[0];
            let (i, j, l) = (idx / (k * k), (idx / k) % k, idx % k);
            let g = [i, j, l][reduced];
            coords[g]
        });
        let input = Tensor::concat(&[&flat, &Tensor::constant(coord_col)], 1);
        let h = linear(p, &format!("aggregators.{name}.l0"), &input).relu();
        let logits = linear(p, &format!("aggregators.{name}.l1"), &h).reshape(&[k, k, k]);
        let w = logits.softmax(reduced);
        let plane = w.insert_axis(3).mul(&volume.data).sum_axis(reduced, false);
        planes.push(plane);
    }
    planes.try_into().map_err(|_| ()).unwrap()
}

/// Strided conv stack refining a raw plane to `target_hw` with G channels.
fn refine_one(
    p: &ParamVars,
    bn: &mut BnState,
    prefix: &str,
    raw: &Tensor,
    target_hw: (usize, usize),
) -> Tensor {
    let (k0, k1, c) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    let x = raw.permute(&[2, 0, 1]).reshape(&[1, c, k0, k1]);
    let x = batchnorm2d(p, &format!("{prefix}.bn0"), &conv(p, &format!("{prefix}.c0"), &x, 2, 1), bn).relu();
    let x = batchnorm2d(p, &format!("{prefix}.bn1"), &conv(p, &format!("{prefix}.c1"), &x, 2, 1), bn).relu();
    let x = batchnorm2d(p, &format!("{prefix}.bn2"), &conv(p, &format!("{prefix}.c2"), &x, 2, 1), bn).relu();
    let x = bilinear_resize(&x, (x.shape()[2] * 2).max(1), (x.shape()[3] * 2).max(1));
    let x = batchnorm2d(p, &format!("{prefix}.bn3"), &conv(p, &format!("{prefix}.c3"), &x, 1, 1), bn).relu();
    let x = bilinear_resize(&x, target_hw.0, target_hw.1);
    let g = x.shape()[1];
    x.reshape(&[g, target_hw.0, target_hw.1]).permute(&[1, 2, 0])
}

/// Refine all three raw planes into the final triplane set.
pub fn refine_planes(
    p: &ParamVars,
    bn: &mut BnState,
    raw: &[Tensor; 3],
    target_hw: (usize, usize),
    extent: f64,
) -> Result<TriplaneSet> {
    if target_hw.0 == 0 || target_hw.1 == 0 {
        return Err(Error::invalid(
            "refine_planes: target size must be half of an even image size",
        ));
    }
    let planes = [
        refine_one(p, bn, "plane_convs.xy", &raw[0], target_hw),
        refine_one(p, bn, "plane_convs.xz", &raw[1], target_hw),
        refine_one(p, bn, "plane_convs.yz", &raw[2], target_hw),
    ];
    Ok(TriplaneSet { planes, extent })
}

impl TriplaneSet {
    /// Plane pixel coordinates (col, row) of world points, for plane `pi`.
    pub fn plane_coords(&self, pi: usize, x: &Array2<f64>) -> Array2<f64> {
        let (rows_axis, cols_axis, _) = PLANE_AXES[pi];
        let (h, w) = (self.planes[pi].shape()[0], self.planes[pi].shape()[1]);
        let mut out = Array2::<f64>::zeros((x.nrows(), 2));
        for i in 0..x.nrows() {
            let to_unit = |v: f64| (v + self.extent) / (2.0 * self.extent);
            out[(i, 0)] = to_unit(x[(i, cols_axis)]) * w as f64;
            out[(i, 1)] = to_unit(x[(i, rows_axis)]) * h as f64;
        }
        out
    }

    /// Concatenated bilinear samples of the three planes (clamped borders),
    /// queried with un-contracted world coordinates.
    pub fn sample(&self, x: &Array2<f64>) -> Tensor {
        let parts: Vec<Tensor> = (0..3)
            .map(|pi| {
                let coords = self.plane_coords(pi, x);
                bilinear_sample(&self.planes[pi], &coords, Border::Clamp)
            })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 1)
    }
}
