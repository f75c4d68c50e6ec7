//! Volume rendering: alpha compositing along a ray, near/far composition,
//! editable three-way composition with density pruning, and the distortion
//! regularizer on ray weights.
//!
//! Two routes are provided. The scalar per-ray functions here are the
//! reference semantics (used by the decomposed render modes and the tests);
//! [`batch`] holds differentiable batched twins used by the training path.
//! Consistency between the two routes is asserted in the tests.

use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use nalgebra::Vector3;

/// The density written into pruned samples.
pub const PRUNE_SIGMA: f64 = -1e-5;

/// Floor on accumulated opacity when normalizing expected depth.
pub const DEPTH_ACC_FLOOR: f64 = 1e-8;

/// Samples along one ray segment, ordered by `t`.
///
/// `last_delta` is the integration width of the final sample: the remaining
/// distance to the segment's far bound (near branch) or to contracted
/// coordinate zero (far branch). Interior widths come from consecutive
/// positions.
#[derive(Clone, Debug, Default)]
pub struct RaySegmentSamples {
    pub t: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub positions: Vec<[f64; 3]>,
    pub last_delta: f64,
}

impl RaySegmentSamples {
    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.sigmas.len() != n || self.colors.len() != n || self.positions.len() != n {
            return Err(Error::invalid("ray samples: mismatched field lengths"));
        }
        if self.t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("ray samples: t values must strictly increase"));
        }
        Ok(())
    }

    /// Interval widths: distance between consecutive positions, then the cap.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.t.len();
        let mut d = Vec::with_capacity(n);
        for i in 0..n.saturating_sub(1) {
            let a = &self.positions[i];
            let b = &self.positions[i + 1];
            d.push(
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt(),
            );
        }
        if n > 0 {
            d.push(self.last_delta.max(0.0));
        }
        d
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Per-ray compositing output.
#[derive(Clone, Debug)]
pub struct CompositeResult {
    pub color: [f64; 3],
    pub acc: f64,
    pub weights: Vec<f64>,
    pub depth: f64,
}

impl CompositeResult {
    /// A fully transparent segment (used when a branch has no samples).
    pub fn empty() -> CompositeResult {
        CompositeResult {
            color: [0.0; 3],
            acc: 0.0,
            weights: Vec::new(),
            depth: 0.0,
        }
    }
}

/// Alpha-composite samples with explicit interval widths.
///
/// `alpha_i = 1 - exp(-max(sigma_i, 0) * delta_i)`; negative densities (from
/// pruning) therefore contribute exactly nothing.
pub fn composite_with_deltas(
    t: &[f64],
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
) -> Result<CompositeResult> {
    let n = t.len();
    if sigmas.len() != n || colors.len() != n || deltas.len() != n {
        return Err(Error::invalid("composite: mismatched lengths"));
    }
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("composite: t values must strictly increase"));
    }
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut acc = 0.0f64;
    let mut depth_num = 0.0f64;
    for i in 0..n {
        let alpha = 1.0 - (-sigmas[i].max(0.0) * deltas[i].max(0.0)).exp();
        let w = transmittance * alpha;
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        acc += w;
        depth_num += w * t[i];
        weights.push(w);
        transmittance *= 1.0 - alpha;
    }
    Ok(CompositeResult {
        color,
        acc,
        weights,
        depth: depth_num / acc.max(DEPTH_ACC_FLOOR),
    })
}

/// Alpha-composite one ray segment (Euclidean interval widths).
pub fn composite(samples: &RaySegmentSamples) -> Result<CompositeResult> {
    samples.validate()?;
    if samples.is_empty() {
        return Ok(CompositeResult::empty());
    }
    composite_with_deltas(&samples.t, &samples.sigmas, &samples.colors, &samples.deltas())
}

/// Blend near and far branch results: the transmittance left after the near
/// segment scales the far contribution.
pub fn composite_near_far(near: &CompositeResult, far: &CompositeResult) -> [f64; 3] {
    let rest = 1.0 - near.acc;
    [
        near.color[0] + rest * far.color[0],
        near.color[1] + rest * far.color[1],
        near.color[2] + rest * far.color[2],
    ]
}

/// Replace densities of masked samples by the pruning constant.
pub fn prune_density(sigmas: &[f64], inside_mask: &[bool]) -> Result<Vec<f64>> {
    if sigmas.len() != inside_mask.len() {
        return Err(Error::invalid("prune_density: length mismatch"));
    }
    Ok(sigmas
        .iter()
        .zip(inside_mask)
        .map(|(&s, &inside)| if inside { PRUNE_SIGMA } else { s })
        .collect())
}

/// Contribution of one source to a decomposed render.
#[derive(Clone, Debug, Default)]
pub struct SourceContribution {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
}

/// Editable three-way composition: far background, pruned near background and
/// per-object segments, each with its attributed contribution.
#[derive(Clone, Debug)]
pub struct DecomposedResult {
    pub color: [f64; 3],
    pub far_bg: SourceContribution,
    pub near_bg: SourceContribution,
    pub objects: SourceContribution,
}

/// Merge pruned near-background and in-box object samples into one t-sorted
/// near stream, composite it, and blend with the far background. Per-sample
/// weights are attributed back to their source.
pub fn composite_decomposed(
    far_bg: &RaySegmentSamples,
    near_bg_pruned: &RaySegmentSamples,
    object_segments: &[(RaySegmentSamples, OrientedBox)],
) -> Result<DecomposedResult> {
    far_bg.validate()?;
    near_bg_pruned.validate()?;
    for (seg, bbox) in object_segments {
        seg.validate()?;
        for p in &seg.positions {
            let point = Vector3::new(p[0], p[1], p[2]);
            // tolerance scaled to the box so jittered samples on the face pass
            let local = bbox.rotation.transpose() * (point - bbox.center);
            let tol = 1e-9 + 1e-9 * bbox.half_extents.norm();
            if local.x.abs() > bbox.half_extents.x + tol
                || local.y.abs() > bbox.half_extents.y + tol
                || local.z.abs() > bbox.half_extents.z + tol
            {
                return Err(Error::invalid(format!(
                    "object sample at t={:?} lies outside its box",
                    p
                )));
            }
        }
    }

    // merge near_bg + object samples, tagging the source of each
    #[derive(Clone, Copy, PartialEq)]
    enum Src {
        NearBg,
        Object,
    }
    let mut merged: Vec<(f64, f64, [f64; 3], [f64; 3], Src)> = Vec::new();
    for i in 0..near_bg_pruned.t.len() {
        merged.push((
            near_bg_pruned.t[i],
            near_bg_pruned.sigmas[i],
            near_bg_pruned.colors[i],
            near_bg_pruned.positions[i],
            Src::NearBg,
        ));
    }
    for (seg, _) in object_segments {
        for i in 0..seg.t.len() {
            merged.push((seg.t[i], seg.sigmas[i], seg.colors[i], seg.positions[i], Src::Object));
        }
    }
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    merged.dedup_by(|a, b| a.0 == b.0 && a.4 == b.4);

    let mut stream = RaySegmentSamples {
        t: merged.iter().map(|m| m.0).collect(),
        sigmas: merged.iter().map(|m| m.1).collect(),
        colors: merged.iter().map(|m| m.2).collect(),
        positions: merged.iter().map(|m| m.3).collect(),
        last_delta: near_bg_pruned.last_delta,
    };
    // coincident samples from different sources: nudge apart by stability eps
    for i in 1..stream.t.len() {
        if stream.t[i] <= stream.t[i - 1] {
            stream.t[i] = stream.t[i - 1] + 1e-12;
        }
    }

    let near = composite(&stream)?;
    let far = composite(far_bg)?;
    let color = composite_near_far(&near, &far);

    let mut near_bg = SourceContribution::default();
    let mut objects = SourceContribution::default();
    for (i, m) in merged.iter().enumerate() {
        let w = near.weights[i];
        let dst = match m.4 {
            Src::NearBg => &mut near_bg,
            Src::Object => &mut objects,
        };
        dst.weights.push(w);
        for k in 0..3 {
            dst.color[k] += w * m.2[k];
        }
    }
    let rest = 1.0 - near.acc;
    let far_bg_contrib = SourceContribution {
        color: [rest * far.color[0], rest * far.color[1], rest * far.color[2]],
        weights: far.weights.iter().map(|w| w * rest).collect(),
    };
    Ok(DecomposedResult {
        color,
        far_bg: far_bg_contrib,
        near_bg,
        objects,
    })
}

/// Distortion regularizer over normalized interval edges `s` (len N+1) and
/// weights `w` (len N).
pub fn distortion_loss(s: &[f64], w: &[f64]) -> Result<f64> {
    if s.len() != w.len() + 1 {
        return Err(Error::invalid(format!(
            "distortion_loss: {} edges vs {} weights",
            s.len(),
            w.len()
        )));
    }
    if w.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("distortion_loss: negative weight"));
    }
    if s.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::invalid("distortion_loss: edges must be nondecreasing"));
    }
    let n = w.len();
    let mids: Vec<f64> = (0..n).map(|i| 0.5 * (s[i] + s[i + 1])).collect();
    let mut out = 0.0;
    for i in 0..n {
        for j in 0..n {
            out += w[i] * w[j] * (mids[i] - mids[j]).abs();
        }
        out += w[i] * w[i] * (s[i + 1] - s[i]) / 3.0;
    }
    Ok(out)
}

/// Differentiable batched twins of the scalar compositing math.
pub mod batch {
    use ndarray::{Array2, IxDyn};

    use crate::math::{Arr, Tensor};

    /// Batched compositing output over rays (R) with S samples each.
    pub struct CompositeBatch {
        /// (R, 3)
        pub color: Tensor,
        /// (R,)
        pub acc: Tensor,
        /// (R, S)
        pub weights: Tensor,
        /// (R,)
        pub depth: Tensor,
    }

    /// `t`, `deltas`: (R, S) fixed sample geometry; `sigmas`: (R, S) and
    /// `colors`: (R, S, 3) differentiable.
    pub fn composite_batch(
        t: &Array2<f64>,
        deltas: &Array2<f64>,
        sigmas: &Tensor,
        colors: &Tensor,
    ) -> CompositeBatch {
        let (r, s) = t.dim();
        assert_eq!(sigmas.shape(), &[r, s], "composite_batch: sigma shape");
        assert_eq!(colors.shape(), &[r, s, 3], "composite_batch: color shape");
        let dt = Tensor::constant(deltas.clone().into_dyn());
        let a = sigmas.clamp_min(0.0).mul(&dt);
        let alpha = a.neg().exp().neg().shift(1.0);
        let trans = a.cumsum_exclusive(1).neg().exp();
        let weights = alpha.mul(&trans);
        let acc = weights.sum_axis(1, false);
        let color = weights
            .insert_axis(2)
            .mul(colors)
            .sum_axis(1, false);
        let tc = Tensor::constant(t.clone().into_dyn());
        let depth = weights
            .mul(&tc)
            .sum_axis(1, false)
            .div(&acc.clamp_min(super::DEPTH_ACC_FLOOR));
        CompositeBatch {
            color,
            acc,
            weights,
            depth,
        }
    }

    /// (R,3) near + (R,) near acc + (R,3) far -> composed (R,3).
    pub fn composite_near_far_batch(
        near_color: &Tensor,
        near_acc: &Tensor,
        far_color: &Tensor,
    ) -> Tensor {
        let rest = near_acc.neg().shift(1.0).insert_axis(1);
        near_color.add(&rest.mul(far_color))
    }

    /// Distortion regularizer per ray: `edges` (R, S+1) fixed, `w` (R, S).
    /// Returns (R,).
    pub fn distortion_batch(edges: &Array2<f64>, w: &Tensor) -> Tensor {
        let (r, s1) = edges.dim();
        let s = s1 - 1;
        assert_eq!(w.shape(), &[r, s], "distortion_batch: weight shape");
        let mids: Vec<Vec<f64>> = (0..r)
            .map(|ri| (0..s).map(|i| 0.5 * (edges[(ri, i)] + edges[(ri, i + 1)])).collect())
            .collect();
        let widths: Vec<Vec<f64>> = (0..r)
            .map(|ri| (0..s).map(|i| edges[(ri, i + 1)] - edges[(ri, i)]).collect())
            .collect();

        let wv = w
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut out = Arr::zeros(IxDyn(&[r]));
        for ri in 0..r {
            let mut acc = 0.0;
            for i in 0..s {
                for j in 0..s {
                    acc += wv[(ri, i)] * wv[(ri, j)] * (mids[ri][i] - mids[ri][j]).abs();
                }
                acc += wv[(ri, i)] * wv[(ri, i)] * widths[ri][i] / 3.0;
            }
            out[[ri]] = acc;
        }

        let iw = w.tracked_id();
        let back = move |g: &Arr, store: &mut crate::math::GradStore| {
            if let Some(iw) = iw {
                let mut dw = Arr::zeros(IxDyn(&[r, s]));
                for ri in 0..r {
                    let gr = g[[ri]];
                    for i in 0..s {
                        let mut d = 2.0 * wv[(ri, i)] * widths[ri][i] / 3.0;
                        for j in 0..s {
                            d += 2.0 * wv[(ri, j)] * (mids[ri][i] - mids[ri][j]).abs();
                        }
                        dw[[ri, i]] += gr * d;
                    }
                }
                store.accum(iw, dw);
            }
        };
        Tensor::from_op(&[w], out, back)
    }
}
