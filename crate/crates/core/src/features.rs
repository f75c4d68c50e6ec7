//! Convolutional image encoder and pixel-aligned residual feature sampling.
//!
//! The encoder is a four-stage residual network: a stride-2 stem plus three
//! stages whose first block downsamples. Stage outputs are bilinearly
//! upsampled to half the input resolution and concatenated channel-wise into
//! the shared feature map consumed by both the triplane construction and the
//! residual sampling path.

use ndarray::{Array2, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::math::conv::bilinear_resize;
use crate::math::nn::{batchnorm2d, conv, init_batchnorm, init_conv, BnState, ParamSet, ParamVars};
use crate::math::sample::{bilinear_sample, Border};
use crate::math::Tensor;
use crate::model::ModelConfig;

/// Half-resolution feature map of one source view.
pub struct FeatureMap {
    /// (H/2, W/2, C)
    pub data: Tensor,
    pub camera: Camera,
}

/// Pixel-aligned features for a batch of world points in one view.
pub struct ResidualFeature {
    /// (N, C); rows of invalid points are exactly zero.
    pub values: Tensor,
    pub validity: Vec<bool>,
}

fn stage_channels(c: usize) -> [usize; 4] {
    [c / 8, c / 8, c / 4, c / 2]
}

pub fn init_encoder(
    weights: &mut ParamSet,
    buffers: &mut ParamSet,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) {
    let [c_stem, c1, c2, c3] = stage_channels(cfg.feature_channels);
    init_conv(weights, "encoder.stem.conv", c_stem, 3, 3, rng);
    init_batchnorm(weights, buffers, "encoder.stem.bn", c_stem);
    let dims = [(c_stem, c1), (c1, c2), (c2, c3)];
    for (s, &(cin, cout)) in dims.iter().enumerate() {
        for b in 0..cfg.encoder_blocks_per_stage {
            let p = format!("encoder.s{s}.b{b}");
            let bin = if b == 0 { cin } else { cout };
            init_conv(weights, &format!("{p}.conv1"), cout, bin, 3, rng);
            init_batchnorm(weights, buffers, &format!("{p}.bn1"), cout);
            init_conv(weights, &format!("{p}.conv2"), cout, cout, 3, rng);
            init_batchnorm(weights, buffers, &format!("{p}.bn2"), cout);
            if b == 0 {
                // stride-2 projection on the skip path
                init_conv(weights, &format!("{p}.skip"), cout, bin, 1, rng);
                init_batchnorm(weights, buffers, &format!("{p}.skipbn"), cout);
            }
        }
    }
}

fn res_block(
    p: &ParamVars,
    bn: &mut BnState,
    prefix: &str,
    x: &Tensor,
    downsample: bool,
) -> Tensor {
    let stride = if downsample { 2 } else { 1 };
    let y = conv(p, &format!("{prefix}.conv1"), x, stride, 1);
    let y = batchnorm2d(p, &format!("{prefix}.bn1"), &y, bn).relu();
    let y = conv(p, &format!("{prefix}.conv2"), &y, 1, 1);
    let y = batchnorm2d(p, &format!("{prefix}.bn2"), &y, bn);
    let skip = if downsample {
        let s = conv(p, &format!("{prefix}.skip"), x, 2, 0);
        batchnorm2d(p, &format!("{prefix}.skipbn"), &s, bn)
    } else {
        x.clone()
    };
    y.add(&skip).relu()
}

/// Encode a batch of views: `images` (V, 3, H, W) -> features (V, C, H/2, W/2).
pub fn encode_images(
    p: &ParamVars,
    bn: &mut BnState,
    cfg: &ModelConfig,
    images: &Tensor,
) -> Result<Tensor> {
    let sh = images.shape().to_vec();
    if sh.len() != 4 || sh[1] != 3 {
        return Err(Error::invalid("encoder input must be (V, 3, H, W)"));
    }
    let (h, w) = (sh[2], sh[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "encoder input dimensions must be even, got {h}x{w}"
        )));
    }
    if images
        .value()
        .iter()
        .any(|&v| !(0.0..=1.0).contains(&v))
    {
        return Err(Error::invalid("encoder input values must lie in [0, 1]"));
    }
    let (h2, w2) = (h / 2, w / 2);

    let stem = conv(p, "encoder.stem.conv", images, 2, 1);
    let stem = batchnorm2d(p, "encoder.stem.bn", &stem, bn).relu(); // (V, C/8, H/2, W/2)

    let mut stages = Vec::with_capacity(3);
    let mut x = stem.clone();
    for s in 0..3 {
        for b in 0..cfg.encoder_blocks_per_stage {
            x = res_block(p, bn, &format!("encoder.s{s}.b{b}"), &x, b == 0);
        }
        stages.push(x.clone());
    }

    let mut parts = vec![stem];
    for s in stages {
        parts.push(bilinear_resize(&s, h2, w2));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 1))
}

/// Per-view (H/2, W/2, C) feature maps from the batched encoder output.
pub fn split_feature_maps(features: &Tensor, cameras: &[Camera]) -> Vec<FeatureMap> {
    let v = features.shape()[0];
    assert_eq!(v, cameras.len(), "camera count mismatch");
    (0..v)
        .map(|i| FeatureMap {
            data: features
                .slice_axis_range(0, i, i + 1)
                .reshape(&features.shape()[1..])
                .permute(&[1, 2, 0]),
            camera: cameras[i].clone(),
        })
        .collect()
}

/// Convenience single-image entry point.
pub fn encode_image(
    p: &ParamVars,
    bn: &mut BnState,
    cfg: &ModelConfig,
    image: &Tensor,
    camera: &Camera,
) -> Result<FeatureMap> {
    let sh = image.shape().to_vec();
    let batched = image.reshape(&[1, sh[0], sh[1], sh[2]]);
    let feats = encode_images(p, bn, cfg, &batched)?;
    Ok(split_feature_maps(&feats, std::slice::from_ref(camera))
        .pop()
        .unwrap())
}

/// Continuous half-resolution pixel coordinates of world points in a view,
/// plus the inside-frustum flags. Points behind the camera get far
/// out-of-range coordinates so they sample exactly zero.
pub fn project_to_feature_coords(camera: &Camera, points: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let n = points.nrows();
    let mut coords = Array2::<f64>::zeros((n, 2));
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let p = nalgebra::Vector3::new(points[(i, 0)], points[(i, 1)], points[(i, 2)]);
        let (u, v, z) = camera.project(&p);
        if z < 1e-9 || !u.is_finite() || !v.is_finite() {
            coords[(i, 0)] = -1e6;
            coords[(i, 1)] = -1e6;
            valid.push(false);
        } else {
            coords[(i, 0)] = u * 0.5;
            coords[(i, 1)] = v * 0.5;
            valid.push(
                u >= 0.0 && u < camera.width as f64 && v >= 0.0 && v < camera.height as f64,
            );
        }
    }
    (coords, valid)
}

/// Bilinearly sample per-view residual features at the projections of `x`.
pub fn sample_residual(feature_maps: &[FeatureMap], x: &Array2<f64>) -> Vec<ResidualFeature> {
    feature_maps
        .iter()
        .map(|fm| {
            let (coords, valid) = project_to_feature_coords(&fm.camera, x);
            let raw = bilinear_sample(&fm.data, &coords, Border::Zero);
            let mask = crate::math::Arr::from_shape_fn(IxDyn(&[x.nrows(), 1]), |d| {
                if valid[d[0]] {
                    1.0
                } else {
                    0.0
                }
            });
            ResidualFeature {
                values: raw.mul(&Tensor::constant(mask)),
                validity: valid,
            }
        })
        .collect()
}
