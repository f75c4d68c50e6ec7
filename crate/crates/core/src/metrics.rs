//! Training losses and evaluation metrics: photometric MSE, a pluggable
//! perceptual distance, PSNR, Gaussian-windowed SSIM and masked depth errors.

use ndarray::{Array2, Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::conv::conv2d;
use crate::math::nn::{init_conv, ParamSet};
use crate::math::{Arr, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub lambda_lpips: f64,
    pub lpips_start_epoch: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: 0.01,
            lambda_lpips: 0.3,
            lpips_start_epoch: 30,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_reg < 0.0 || self.lambda_lpips < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean squared error over all color entries (differentiable).
pub fn photometric_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "photometric_loss: shape {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target).square().mean_all())
}

/// Mean squared error between plain arrays.
pub fn mse(pred: &Arr, target: &Arr) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB over [0, 1] images, capped at 100.
pub fn psnr(pred: &Arr, target: &Arr) -> f64 {
    let e = mse(pred, target);
    if e <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

/// Gaussian-windowed SSIM, averaged over channels and valid window centers.
pub fn ssim(pred: &Array3<f64>, target: &Array3<f64>) -> Result<f64> {
    ssim_with(pred, target, 11, 1.5)
}

pub fn ssim_with(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    window: usize,
    sigma: f64,
) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid("ssim: image shapes differ"));
    }
    let (h, w, c) = pred.dim();
    if h < window || w < window {
        return Err(Error::invalid(format!(
            "ssim: image {h}x{w} smaller than the {window}-pixel window"
        )));
    }
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let g = gaussian_window(window, sigma);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..=(h - window) {
            for x in 0..=(w - window) {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for dy in 0..window {
                    for dx in 0..window {
                        let wgt = g[dy] * g[dx];
                        let a = pred[(y + dy, x + dx, ch)];
                        let b = target[(y + dy, x + dx, ch)];
                        mx += wgt * a;
                        my += wgt * b;
                        mxx += wgt * a * a;
                        myy += wgt * b * b;
                        mxy += wgt * a * b;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Masked mean absolute error and root mean squared error.
pub fn depth_errors(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    valid: &Array2<bool>,
) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(Error::invalid("depth_errors: shape mismatch"));
    }
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut n = 0usize;
    for ((i, j), &ok) in valid.indexed_iter() {
        if ok {
            let d = pred[(i, j)] - gt[(i, j)];
            l1 += d.abs();
            l2 += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("depth_errors: empty validity mask"));
    }
    Ok((l1 / n as f64, (l2 / n as f64).sqrt()))
}

/// Perceptual distance backbone: a fixed conv stack whose stage activations
/// are channel-normalized and compared. The default is seeded random weights
/// (deterministic, dependency-free); a pretrained stack can be loaded from a
/// weights file in the checkpoint container format.
pub struct PerceptualBackbone {
    params: ParamSet,
    stage_channels: Vec<usize>,
    /// Recorded in eval reports.
    pub source: String,
}

pub const MIN_PATCH: usize = 16;

impl PerceptualBackbone {
    pub fn seeded(seed: u64) -> PerceptualBackbone {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let chans = vec![8usize, 16, 32];
        let mut cin = 3;
        for (i, &cout) in chans.iter().enumerate() {
            init_conv(&mut params, &format!("stage{i}"), cout, cin, 3, &mut rng);
            cin = cout;
        }
        PerceptualBackbone {
            params,
            stage_channels: chans,
            source: format!("seeded-conv3x{seed}"),
        }
    }

    pub fn from_file(path: &Path) -> Result<PerceptualBackbone> {
        let params = crate::checkpoint::load_paramset(path)?;
        let mut chans = Vec::new();
        for i in 0.. {
            match params.map.get(&format!("stage{i}.w")) {
                Some(w) => chans.push(w.shape()[0]),
                None => break,
            }
        }
        if chans.is_empty() {
            return Err(Error::Checkpoint(
                "perceptual weights file holds no stage0.w".into(),
            ));
        }
        Ok(PerceptualBackbone {
            params,
            stage_channels: chans,
            source: path.display().to_string(),
        })
    }

    /// Stage activations of an (H, W, 3) image tensor.
    fn stages(&self, img: &Tensor) -> Vec<Tensor> {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let p = self.params.constants();
        let mut x = img.permute(&[2, 0, 1]).reshape(&[1, 3, h, w]);
        let mut out = Vec::with_capacity(self.stage_channels.len());
        for i in 0..self.stage_channels.len() {
            x = conv2d(
                &x,
                p.get(&format!("stage{i}.w")),
                p.get(&format!("stage{i}.b")),
                2,
                1,
            )
            .relu();
            out.push(x.clone());
        }
        out
    }

    /// Mean channel-normalized feature distance across stages.
    pub fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.shape() != target.shape() {
            return Err(Error::invalid("perceptual_loss: shape mismatch"));
        }
        if pred.shape().len() != 3 || pred.shape()[2] != 3 {
            return Err(Error::invalid("perceptual_loss expects (P, P, 3) patches"));
        }
        if pred.shape()[0] < MIN_PATCH || pred.shape()[1] < MIN_PATCH {
            return Err(Error::invalid(format!(
                "perceptual_loss: patch must be at least {MIN_PATCH} pixels"
            )));
        }
        let normalize = |f: &Tensor| {
            // unit-normalize along the channel axis of (1, C, h, w)
            let norm = f.square().sum_axis(1, true).shift(1e-10).sqrt();
            f.div(&norm)
        };
        let ps = self.stages(pred);
        let ts = self.stages(target);
        let mut acc = Tensor::scalar(0.0);
        for (a, b) in ps.iter().zip(ts.iter()) {
            let d = normalize(a).sub(&normalize(b)).square().mean_all();
            acc = acc.add(&d);
        }
        Ok(acc.scale(1.0 / ps.len() as f64))
    }
}

/// Perceptual loss between two (P, P, 3) patches.
pub fn perceptual_loss(
    pred: &Tensor,
    target: &Tensor,
    backbone: &PerceptualBackbone,
) -> Result<Tensor> {
    backbone.loss(pred, target)
}
