//! Full forward rendering: encode source views once, build per-view
//! triplanes once, then per ray split at the unit sphere, run hierarchical
//! sampling and decoding per branch, and composite.
//!
//! The near branch samples in ray parameter t; the far branch samples
//! uniformly in inverse radius and composites with widths measured in 1/r
//! units. The coarse pass runs without gradient tracking (its weights only
//! steer the fine samples); the union pass is differentiable.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode, Branch, DecodeInputs};
use crate::error::{Error, Result};
use crate::features::{sample_residual, FeatureMap};
use crate::geometry::{
    importance_samples, ray_sphere_split, stratified_samples, Camera, OrientedBox, Ray,
    SamplingConfig,
};
use crate::math::nn::{BnState, ParamVars};
use crate::math::{Arr, Tensor};
use crate::model::{ModelConfig, ModelParams};
use crate::triplane::{aggregate, backproject, encode_depth, refine_planes, TriplaneSet};
use crate::volume::batch::{composite_batch, composite_near_far_batch, CompositeBatch};
use crate::volume::{
    composite_decomposed, composite_with_deltas, DecomposedResult, RaySegmentSamples, PRUNE_SIGMA,
};

/// Invocation counters for the encode-once invariant (test support).
pub static ENCODE_SCENE_CALLS: AtomicUsize = AtomicUsize::new(0);
pub static TRIPLANE_BUILD_CALLS: AtomicUsize = AtomicUsize::new(0);

const INTERVAL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Full,
    Decomposed,
    ObjectsRemoved,
}

/// One render request over a batch of rays.
pub struct RenderRequest<'a> {
    /// (H, W, 3) images in [0, 1] with their cameras.
    pub source_views: &'a [(Array3<f64>, Camera)],
    pub rays: Vec<Ray>,
    pub mode: RenderMode,
    pub boxes: Vec<OrientedBox>,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

pub struct RenderOutput {
    pub rgb: Array2<f64>,
    pub depth: Array1<f64>,
    pub acc: Array1<f64>,
    pub decomposed: Option<Vec<DecomposedResult>>,
}

/// Encoded source views: feature maps plus per-view triplanes.
pub struct SceneEncoding {
    pub feature_maps: Vec<FeatureMap>,
    pub triplanes: Option<Vec<TriplaneSet>>,
}

impl SceneEncoding {
    /// Graph-free twin used by the no-gradient coarse pass.
    pub fn detached(&self) -> SceneEncoding {
        SceneEncoding {
            feature_maps: self
                .feature_maps
                .iter()
                .map(|fm| FeatureMap {
                    data: fm.data.detach(),
                    camera: fm.camera.clone(),
                })
                .collect(),
            triplanes: self.triplanes.as_ref().map(|tps| {
                tps.iter()
                    .map(|tp| TriplaneSet {
                        planes: [
                            tp.planes[0].detach(),
                            tp.planes[1].detach(),
                            tp.planes[2].detach(),
                        ],
                        extent: tp.extent,
                    })
                    .collect()
            }),
        }
    }
}

/// (H, W, 3) image stack -> (V, 3, H, W) tensor.
pub fn views_to_tensor(views: &[(Array3<f64>, Camera)]) -> Tensor {
    let v = views.len();
    let (h, w, _) = views[0].0.dim();
    let mut out = Arr::zeros(IxDyn(&[v, 3, h, w]));
    for (i, (img, _)) in views.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[i, c, y, x]] = img[(y, x, c)];
                }
            }
        }
    }
    Tensor::constant(out)
}

/// Encode source views and build one triplane set per view. Called exactly
/// once per request / training step.
pub fn encode_scene(
    p: &ParamVars,
    bn: &mut BnState,
    cfg: &ModelConfig,
    images: &Tensor,
    cameras: &[Camera],
) -> Result<SceneEncoding> {
    ENCODE_SCENE_CALLS.fetch_add(1, Ordering::Relaxed);
    if cameras.is_empty() {
        return Err(Error::invalid("render needs at least one source view"));
    }
    let feats = crate::features::encode_images(p, bn, cfg, images)?;
    let feature_maps = crate::features::split_feature_maps(&feats, cameras);
    let triplanes = if cfg.use_triplane {
        let (h2, w2) = (images.shape()[2] / 2, images.shape()[3] / 2);
        let mut tps = Vec::with_capacity(feature_maps.len());
        for fm in &feature_maps {
            TRIPLANE_BUILD_CALLS.fetch_add(1, Ordering::Relaxed);
            let vol = backproject(fm, cfg.volume_res, cfg.grid_extent);
            let vz = encode_depth(p, &vol, &fm.camera);
            let raw = aggregate(p, &vz);
            tps.push(refine_planes(p, bn, &raw, (h2, w2), cfg.grid_extent)?);
        }
        Some(tps)
    } else {
        None
    };
    Ok(SceneEncoding {
        feature_maps,
        triplanes,
    })
}

/// Differentiable per-branch render of a ray group.
pub struct BranchRender {
    /// Row -> index into the request's ray list.
    pub ray_rows: Vec<usize>,
    pub out: CompositeBatch,
    /// Normalized interval edges for the distortion regularizer, (R, S+1).
    pub reg_edges: Array2<f64>,
    /// Raw per-sample values kept for the decomposed path.
    pub t: Array2<f64>,
    pub deltas: Array2<f64>,
    pub sigmas: Tensor,
    pub colors: Tensor,
    pub positions: Vec<Array2<f64>>,
}

/// Batched differentiable render of a ray batch.
pub struct RayRender {
    pub rgb: Tensor,
    pub acc: Tensor,
    pub depth: Tensor,
    pub near: Option<BranchRender>,
    pub far: Option<BranchRender>,
}

fn ray_rng(seed: u64, ray_id: u64, stream: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(ray_id.wrapping_mul(0xd1342543de82ef95))
        .wrapping_add(stream.wrapping_mul(0x2545f4914f6cdd1d));
    ChaCha8Rng::seed_from_u64(mixed)
}

struct GroupGeometry {
    ray_rows: Vec<usize>,
    /// per row: sorted sample parameters (t for near, s = u_hi - u for far)
    params: Vec<Vec<f64>>,
    /// per row: interval end used for the last delta
    last_delta: Vec<f64>,
    /// world positions per row, (S, 3)
    positions: Vec<Array2<f64>>,
    /// world t per row per sample (for expected depth)
    world_t: Vec<Vec<f64>>,
    /// normalized reg edges per row
    reg_edges: Vec<Vec<f64>>,
}

/// Near-branch helper: positions and deltas live directly in t.
fn near_geometry(rays: &[Ray], rows: &[usize], ts: Vec<Vec<f64>>, bounds: &[(f64, f64)]) -> GroupGeometry {
    let mut g = GroupGeometry {
        ray_rows: rows.to_vec(),
        params: Vec::with_capacity(rows.len()),
        last_delta: Vec::with_capacity(rows.len()),
        positions: Vec::with_capacity(rows.len()),
        world_t: Vec::with_capacity(rows.len()),
        reg_edges: Vec::with_capacity(rows.len()),
    };
    for (k, &ri) in rows.iter().enumerate() {
        let t = &ts[k];
        let (t0, t1) = bounds[k];
        let s = t.len();
        let mut pos = Array2::<f64>::zeros((s, 3));
        for (i, &tv) in t.iter().enumerate() {
            let p = rays[ri].at(tv);
            pos[(i, 0)] = p.x;
            pos[(i, 1)] = p.y;
            pos[(i, 2)] = p.z;
        }
        let span = (t1 - t0).max(1e-12);
        let mut edges = Vec::with_capacity(s + 1);
        edges.push((t[0] - t0) / span);
        for i in 0..s - 1 {
            edges.push((0.5 * (t[i] + t[i + 1]) - t0) / span);
        }
        edges.push(1.0);
        g.params.push(t.clone());
        g.last_delta.push((t1 - t[s - 1]).max(0.0));
        g.positions.push(pos);
        g.world_t.push(t.clone());
        g.reg_edges.push(edges);
    }
    g
}

/// Decode a group (tracked parameters) and composite it.
fn render_group(
    p: &ParamVars,
    cfg: &ModelConfig,
    enc: &SceneEncoding,
    rays: &[Ray],
    geom: &GroupGeometry,
    branch: Branch,
    prune_boxes: Option<&[OrientedBox]>,
) -> Result<BranchRender> {
    let rows = geom.ray_rows.len();
    let s = geom.params[0].len();
    debug_assert!(geom.params.iter().all(|t| t.len() == s));

    // stack positions and directions
    let mut pos = Array2::<f64>::zeros((rows * s, 3));
    let mut dirs = Array2::<f64>::zeros((rows * s, 3));
    for (k, &ri) in geom.ray_rows.iter().enumerate() {
        for i in 0..s {
            for a in 0..3 {
                pos[(k * s + i, a)] = geom.positions[k][(i, a)];
                dirs[(k * s + i, a)] = rays[ri].direction[a];
            }
        }
    }

    let (sigma, color) = decode_points(p, cfg, enc, branch, &pos, &dirs)?;

    // per-sample t and deltas
    let mut t = Array2::<f64>::zeros((rows, s));
    let mut deltas = Array2::<f64>::zeros((rows, s));
    let mut world_t = Array2::<f64>::zeros((rows, s));
    for k in 0..rows {
        for i in 0..s {
            t[(k, i)] = geom.params[k][i];
            world_t[(k, i)] = geom.world_t[k][i];
            deltas[(k, i)] = if i + 1 < s {
                geom.params[k][i + 1] - geom.params[k][i]
            } else {
                geom.last_delta[k]
            };
        }
    }

    let mut sigmas = sigma.reshape(&[rows, s]);
    if let Some(boxes) = prune_boxes {
        // densities inside any box are replaced by the pruning constant
        let mut keep = Arr::ones(IxDyn(&[rows, s]));
        let mut fill = Arr::zeros(IxDyn(&[rows, s]));
        let mut any = false;
        for k in 0..rows {
            for i in 0..s {
                let pnt = Vector3::new(
                    geom.positions[k][(i, 0)],
                    geom.positions[k][(i, 1)],
                    geom.positions[k][(i, 2)],
                );
                if boxes.iter().any(|b| b.contains(&pnt)) {
                    keep[[k, i]] = 0.0;
                    fill[[k, i]] = PRUNE_SIGMA;
                    any = true;
                }
            }
        }
        if any {
            sigmas = sigmas
                .mul(&Tensor::constant(keep))
                .add(&Tensor::constant(fill));
        }
    }
    let colors = color.reshape(&[rows, s, 3]);
    let out = composite_batch(&world_t, &deltas, &sigmas, &colors);

    let mut reg_edges = Array2::<f64>::zeros((rows, s + 1));
    for k in 0..rows {
        for i in 0..=s {
            reg_edges[(k, i)] = geom.reg_edges[k][i];
        }
    }
    Ok(BranchRender {
        ray_rows: geom.ray_rows.clone(),
        out,
        reg_edges,
        t,
        deltas,
        sigmas,
        colors,
        positions: geom.positions.clone(),
    })
}

/// Sample triplane + residual features and decode a point batch.
fn decode_points(
    p: &ParamVars,
    cfg: &ModelConfig,
    enc: &SceneEncoding,
    branch: Branch,
    pos: &Array2<f64>,
    dirs: &Array2<f64>,
) -> Result<(Tensor, Tensor)> {
    let n = pos.nrows();
    let f_tp: Option<Vec<Tensor>> = enc
        .triplanes
        .as_ref()
        .map(|tps| tps.iter().map(|tp| tp.sample(pos)).collect());
    let f_r = sample_residual(&enc.feature_maps, pos);
    let f_r: Vec<(Tensor, Vec<bool>)> = f_r.into_iter().map(|r| (r.values, r.validity)).collect();

    let x_cond = match branch {
        Branch::Near => Tensor::constant(pos.clone().into_dyn()),
        Branch::Far => {
            let mut cond = Array2::<f64>::zeros((n, 4));
            for i in 0..n {
                let v = Vector3::new(pos[(i, 0)], pos[(i, 1)], pos[(i, 2)]);
                let r = v.norm().max(1.0);
                let u = v / v.norm().max(1e-12);
                cond[(i, 0)] = u.x;
                cond[(i, 1)] = u.y;
                cond[(i, 2)] = u.z;
                cond[(i, 3)] = 1.0 / r;
            }
            Tensor::constant(cond.into_dyn())
        }
    };
    let dirs_t = Tensor::constant(dirs.clone().into_dyn());
    decode(
        p,
        cfg,
        branch,
        &DecodeInputs {
            x_cond: &x_cond,
            dirs: &dirs_t,
            f_tp: f_tp.as_deref(),
            f_r: &f_r,
        },
    )
}

/// Coarse sigma values for importance sampling, graph-free.
fn coarse_weights(
    p_ng: &ParamVars,
    cfg: &ModelConfig,
    enc_ng: &SceneEncoding,
    rays: &[Ray],
    geom: &GroupGeometry,
    branch: Branch,
) -> Result<Vec<Vec<f64>>> {
    let rows = geom.ray_rows.len();
    let s = geom.params[0].len();
    let mut pos = Array2::<f64>::zeros((rows * s, 3));
    let mut dirs = Array2::<f64>::zeros((rows * s, 3));
    for (k, &ri) in geom.ray_rows.iter().enumerate() {
        for i in 0..s {
            for a in 0..3 {
                pos[(k * s + i, a)] = geom.positions[k][(i, a)];
                dirs[(k * s + i, a)] = rays[ri].direction[a];
            }
        }
    }
    let (sigma, _) = decode_points(p_ng, cfg, enc_ng, branch, &pos, &dirs)?;
    let sv = sigma.value();
    let mut out = Vec::with_capacity(rows);
    for k in 0..rows {
        let t = &geom.params[k];
        let mut deltas = Vec::with_capacity(s);
        for i in 0..s {
            deltas.push(if i + 1 < s {
                t[i + 1] - t[i]
            } else {
                geom.last_delta[k]
            });
        }
        let sig: Vec<f64> = (0..s).map(|i| sv[[k * s + i, 0]]).collect();
        let colors = vec![[0.0; 3]; s];
        let res = composite_with_deltas(t, &sig, &colors, &deltas)?;
        out.push(res.weights);
    }
    Ok(out)
}

/// The batched differentiable render over one ray batch.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    p: &ParamVars,
    p_ng: &ParamVars,
    cfg: &ModelConfig,
    enc: &SceneEncoding,
    rays: &[Ray],
    ray_ids: &[u64],
    sampling: &SamplingConfig,
    seed: u64,
    prune_boxes: Option<&[OrientedBox]>,
) -> Result<RayRender> {
    sampling.validate()?;
    assert_eq!(rays.len(), ray_ids.len());
    let n_rays = rays.len();
    let enc_ng = enc.detached();

    // split every ray at the unit sphere
    let mut near_rows = Vec::new();
    let mut near_bounds = Vec::new();
    let mut far_rows = Vec::new();
    let mut far_info = Vec::new(); // (t_start, t_end)
    for (ri, ray) in rays.iter().enumerate() {
        let (near, far) = ray_sphere_split(ray, sampling.near, sampling.far);
        if let Some((a, b)) = near {
            let b_eff = b - INTERVAL_EPS * b.max(1.0);
            if b_eff - a > 1e-9 {
                near_rows.push(ri);
                near_bounds.push((a, b_eff));
            }
        }
        if let Some((a, b)) = far {
            far_rows.push(ri);
            far_info.push((a, b));
        }
    }

    // ---- near branch: coarse (no grad) then union (tracked) ----
    let near = if near_rows.is_empty() {
        None
    } else {
        let mut coarse_ts = Vec::with_capacity(near_rows.len());
        for (k, &ri) in near_rows.iter().enumerate() {
            let mut rng = ray_rng(seed, ray_ids[ri], 1);
            coarse_ts.push(stratified_samples(
                near_bounds[k],
                sampling.n_coarse,
                sampling.stratified_jitter,
                &mut rng,
            )?);
        }
        let coarse_geom = near_geometry(rays, &near_rows, coarse_ts.clone(), &near_bounds);
        let weights = coarse_weights(p_ng, cfg, &enc_ng, rays, &coarse_geom, Branch::Near)?;
        let mut union_ts = Vec::with_capacity(near_rows.len());
        for (k, &ri) in near_rows.iter().enumerate() {
            let (t0, t1) = near_bounds[k];
            let nb = sampling.n_coarse;
            let edges: Vec<f64> = (0..=nb)
                .map(|i| t0 + (t1 - t0) * i as f64 / nb as f64)
                .collect();
            let mut rng = ray_rng(seed, ray_ids[ri], 2);
            let fine = importance_samples(&edges, &weights[k], sampling.n_fine, &mut rng)?;
            let mut all = coarse_ts[k].clone();
            all.extend(fine);
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // strictly increasing for the compositor
            for i in 1..all.len() {
                if all[i] <= all[i - 1] {
                    all[i] = all[i - 1] + 1e-12;
                }
            }
            union_ts.push(all);
        }
        let geom = near_geometry(rays, &near_rows, union_ts, &near_bounds);
        Some(render_group(p, cfg, enc, rays, &geom, Branch::Near, prune_boxes)?)
    };

    // ---- far branch: contracted-domain sampling ----
    let far = if far_rows.is_empty() {
        None
    } else {
        let mut infos = Vec::with_capacity(far_rows.len());
        for (k, &ri) in far_rows.iter().enumerate() {
            let ray = &rays[ri];
            let (ta, tb) = far_info[k];
            let b = ray.origin.dot(&ray.direction);
            let o2 = ray.origin.norm_squared();
            let r_start = ray.at(ta).norm().max(1.0);
            let r_end = ray.at(tb).norm().max(r_start + 1e-9);
            let u_hi = (1.0 / r_start) * (1.0 - INTERVAL_EPS);
            let u_lo = 1.0 / r_end;
            infos.push((b, o2, u_hi, u_lo));
        }
        let far_geom = |ss: Vec<Vec<f64>>| -> GroupGeometry {
            let mut g = GroupGeometry {
                ray_rows: far_rows.clone(),
                params: Vec::new(),
                last_delta: Vec::new(),
                positions: Vec::new(),
                world_t: Vec::new(),
                reg_edges: Vec::new(),
            };
            for (k, &ri) in far_rows.iter().enumerate() {
                let (b, o2, u_hi, _) = infos[k];
                let svals = &ss[k];
                let sn = svals.len();
                let mut pos = Array2::<f64>::zeros((sn, 3));
                let mut wt = Vec::with_capacity(sn);
                for (i, &sv) in svals.iter().enumerate() {
                    let u = (u_hi - sv).max(1e-9);
                    let r = 1.0 / u;
                    let t = -b + (b * b - o2 + r * r).max(0.0).sqrt();
                    let pnt = rays[ri].at(t);
                    pos[(i, 0)] = pnt.x;
                    pos[(i, 1)] = pnt.y;
                    pos[(i, 2)] = pnt.z;
                    wt.push(t);
                }
                // the final interval extends to contracted coordinate zero
                let last = (u_hi - svals[sn - 1]).max(0.0);
                let mut edges = Vec::with_capacity(sn + 1);
                edges.push(svals[0] / u_hi);
                for i in 0..sn - 1 {
                    edges.push(0.5 * (svals[i] + svals[i + 1]) / u_hi);
                }
                edges.push(1.0);
                g.params.push(svals.clone());
                g.last_delta.push(last);
                g.positions.push(pos);
                g.world_t.push(wt);
                g.reg_edges.push(edges);
            }
            g
        };

        let mut coarse_ss = Vec::with_capacity(far_rows.len());
        for (k, &ri) in far_rows.iter().enumerate() {
            let (_, _, u_hi, u_lo) = infos[k];
            let span = (u_hi - u_lo).max(1e-9);
            let mut rng = ray_rng(seed, ray_ids[ri], 3);
            coarse_ss.push(stratified_samples(
                (0.0, span),
                sampling.n_coarse,
                sampling.stratified_jitter,
                &mut rng,
            )?);
        }
        let cg = far_geom(coarse_ss.clone());
        let weights = coarse_weights(p_ng, cfg, &enc_ng, rays, &cg, far_branch(cfg))?;
        let mut union_ss = Vec::with_capacity(far_rows.len());
        for (k, &ri) in far_rows.iter().enumerate() {
            let (_, _, u_hi, u_lo) = infos[k];
            let span = (u_hi - u_lo).max(1e-9);
            let nb = sampling.n_coarse;
            let edges: Vec<f64> = (0..=nb).map(|i| span * i as f64 / nb as f64).collect();
            let mut rng = ray_rng(seed, ray_ids[ri], 4);
            let fine = importance_samples(&edges, &weights[k], sampling.n_fine, &mut rng)?;
            let mut all = coarse_ss[k].clone();
            all.extend(fine);
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for i in 1..all.len() {
                if all[i] <= all[i - 1] {
                    all[i] = all[i - 1] + 1e-12;
                }
            }
            union_ss.push(all);
        }
        let geom = far_geom(union_ss);
        Some(render_group(p, cfg, enc, rays, &geom, far_branch(cfg), None)?)
    };

    // ---- combine branches over the full ray set ----
    let zero2 = || Tensor::constant(Arr::zeros(IxDyn(&[n_rays, 3])));
    let zero1 = || Tensor::constant(Arr::zeros(IxDyn(&[n_rays])));
    let (near_color, near_acc, near_depth) = match &near {
        Some(b) => (
            b.out.color.scatter_rows(&b.ray_rows, n_rays),
            b.out.acc.scatter_rows(&b.ray_rows, n_rays),
            b.out.depth.scatter_rows(&b.ray_rows, n_rays),
        ),
        None => (zero2(), zero1(), zero1()),
    };
    let (far_color, far_acc, far_depth) = match &far {
        Some(b) => (
            b.out.color.scatter_rows(&b.ray_rows, n_rays),
            b.out.acc.scatter_rows(&b.ray_rows, n_rays),
            b.out.depth.scatter_rows(&b.ray_rows, n_rays),
        ),
        None => (zero2(), zero1(), zero1()),
    };
    let rgb = composite_near_far_batch(&near_color, &near_acc, &far_color);
    let rest = near_acc.neg().shift(1.0);
    let acc = near_acc.add(&rest.mul(&far_acc));
    let depth_num = near_depth
        .mul(&near_acc)
        .add(&far_depth.mul(&far_acc).mul(&rest));
    let depth = depth_num.div(&acc.clamp_min(crate::volume::DEPTH_ACC_FLOOR));

    Ok(RayRender {
        rgb,
        acc,
        depth,
        near,
        far,
    })
}

/// The far decoder, or the near one in the single-MLP ablation.
fn far_branch(cfg: &ModelConfig) -> Branch {
    if cfg.use_near_far {
        Branch::Far
    } else {
        Branch::Near
    }
}

/// Decomposed-mode per-ray attribution (inference path).
#[allow(clippy::too_many_arguments)]
fn decompose_rays(
    p: &ParamVars,
    cfg: &ModelConfig,
    enc: &SceneEncoding,
    rays: &[Ray],
    ray_ids: &[u64],
    sampling: &SamplingConfig,
    seed: u64,
    boxes: &[OrientedBox],
    near: Option<&BranchRender>,
    far: Option<&BranchRender>,
) -> Result<Vec<DecomposedResult>> {
    let n_rays = rays.len();

    // object samples: for each ray, each box interval clipped to the near field
    struct ObjSeg {
        ray: usize,
        bbox: usize,
        t: Vec<f64>,
    }
    let mut segs = Vec::new();
    for (ri, ray) in rays.iter().enumerate() {
        let (near_int, _) = ray_sphere_split(ray, sampling.near, sampling.far);
        let Some((na, nb)) = near_int else { continue };
        for (bi, bbox) in boxes.iter().enumerate() {
            if let Some((a, b)) = crate::geometry::ray_box_intersect(ray, bbox) {
                let (a, b) = (a.max(na), b.min(nb));
                if b - a > 1e-9 {
                    let mut rng = ray_rng(seed, ray_ids[ri], 5 + bi as u64);
                    let shrink = (b - a) * 1e-6;
                    let t = stratified_samples(
                        (a + shrink, b - shrink),
                        sampling.n_coarse,
                        sampling.stratified_jitter,
                        &mut rng,
                    )?;
                    segs.push(ObjSeg { ray: ri, bbox: bi, t });
                }
            }
        }
    }
    // decode all object samples in one batch
    let mut obj_samples: Vec<Vec<(usize, RaySegmentSamples)>> = vec![Vec::new(); n_rays];
    if !segs.is_empty() {
        let total: usize = segs.iter().map(|s| s.t.len()).sum();
        let mut pos = Array2::<f64>::zeros((total, 3));
        let mut dirs = Array2::<f64>::zeros((total, 3));
        let mut row = 0;
        for seg in &segs {
            for &t in &seg.t {
                let pnt = rays[seg.ray].at(t);
                for a in 0..3 {
                    pos[(row, a)] = pnt[a];
                    dirs[(row, a)] = rays[seg.ray].direction[a];
                }
                row += 1;
            }
        }
        let (sigma, color) = decode_points(p, cfg, enc, Branch::Near, &pos, &dirs)?;
        let (sv, cv) = (sigma.value(), color.value());
        let mut row = 0;
        for seg in &segs {
            let sn = seg.t.len();
            let mut samples = RaySegmentSamples {
                t: seg.t.clone(),
                sigmas: Vec::with_capacity(sn),
                colors: Vec::with_capacity(sn),
                positions: Vec::with_capacity(sn),
                last_delta: 0.0,
            };
            for (i, &t) in seg.t.iter().enumerate() {
                samples.sigmas.push(sv[[row + i, 0]]);
                samples
                    .colors
                    .push([cv[[row + i, 0]], cv[[row + i, 1]], cv[[row + i, 2]]]);
                let pnt = rays[seg.ray].at(t);
                samples.positions.push([pnt.x, pnt.y, pnt.z]);
            }
            samples.last_delta = if sn > 1 {
                seg.t[sn - 1] - seg.t[sn - 2]
            } else {
                1e-3
            };
            row += sn;
            obj_samples[seg.ray].push((seg.bbox, samples));
        }
    }

    // per-ray near (pruned) and far segment data from the branch renders
    let extract = |b: &BranchRender, prune: bool| -> Vec<Option<RaySegmentSamples>> {
        let mut per_ray: Vec<Option<RaySegmentSamples>> = vec![None; n_rays];
        let sv = b.sigmas.value();
        let cv = b.colors.value();
        for (k, &ri) in b.ray_rows.iter().enumerate() {
            let s = b.t.ncols();
            let mut seg = RaySegmentSamples {
                t: (0..s).map(|i| b.t[(k, i)]).collect(),
                sigmas: (0..s).map(|i| sv[[k, i]]).collect(),
                colors: (0..s)
                    .map(|i| [cv[[k, i, 0]], cv[[k, i, 1]], cv[[k, i, 2]]])
                    .collect(),
                positions: (0..s)
                    .map(|i| {
                        [
                            b.positions[k][(i, 0)],
                            b.positions[k][(i, 1)],
                            b.positions[k][(i, 2)],
                        ]
                    })
                    .collect(),
                last_delta: b.deltas[(k, s - 1)],
            };
            if prune {
                let mask: Vec<bool> = seg
                    .positions
                    .iter()
                    .map(|p| {
                        let v = Vector3::new(p[0], p[1], p[2]);
                        boxes.iter().any(|bx| bx.contains(&v))
                    })
                    .collect();
                seg.sigmas = crate::volume::prune_density(&seg.sigmas, &mask)
                    .expect("prune lengths match by construction");
            }
            per_ray[ri] = Some(seg);
        }
        per_ray
    };
    let near_segs = match near {
        Some(b) => extract(b, true),
        None => vec![None; n_rays],
    };
    let far_segs = match far {
        Some(b) => extract(b, false),
        None => vec![None; n_rays],
    };

    let mut out = Vec::with_capacity(n_rays);
    for ri in 0..n_rays {
        let near_seg = near_segs[ri].clone().unwrap_or_default();
        let far_seg = far_segs[ri].clone().unwrap_or_default();
        let objs: Vec<(RaySegmentSamples, OrientedBox)> = obj_samples[ri]
            .iter()
            .map(|(bi, s)| (s.clone(), boxes[*bi].clone()))
            .collect();
        out.push(composite_decomposed(&far_seg, &near_seg, &objs)?);
    }
    Ok(out)
}

/// Render a ray batch with inference parameters.
pub fn render(request: &RenderRequest, params: &ModelParams) -> Result<RenderOutput> {
    if request.source_views.is_empty() {
        return Err(Error::invalid("render needs at least one source view"));
    }
    request.sampling.validate()?;
    let cfg = &params.config;
    let p = params.weights.constants();
    let mut buffers = params.buffers.clone();
    let mut bn = BnState {
        buffers: &mut buffers,
        training: false,
    };
    let images = views_to_tensor(request.source_views);
    let cameras: Vec<Camera> = request.source_views.iter().map(|(_, c)| c.clone()).collect();
    let enc = encode_scene(&p, &mut bn, cfg, &images, &cameras)?;

    let ray_ids: Vec<u64> = (0..request.rays.len() as u64).collect();
    render_with_encoding(&p, cfg, &enc, request, &ray_ids)
}

/// Render using an existing encoding (used by the chunked image renderer).
fn render_with_encoding(
    p: &ParamVars,
    cfg: &ModelConfig,
    enc: &SceneEncoding,
    request: &RenderRequest,
    ray_ids: &[u64],
) -> Result<RenderOutput> {
    let n = request.rays.len();
    let prune = match request.mode {
        RenderMode::Full => None,
        RenderMode::Decomposed | RenderMode::ObjectsRemoved => {
            if request.boxes.is_empty() {
                None
            } else {
                Some(request.boxes.as_slice())
            }
        }
    };
    let rr = render_rays(
        p,
        p,
        cfg,
        enc,
        &request.rays,
        ray_ids,
        &request.sampling,
        request.seed,
        prune,
    )?;

    let decomposed = if request.mode == RenderMode::Decomposed && !request.boxes.is_empty() {
        // the near branch in `rr` is already pruned; recompute the unpruned
        // near stream would double work, so reuse rr for near/far samples
        Some(decompose_rays(
            p,
            cfg,
            enc,
            &request.rays,
            ray_ids,
            &request.sampling,
            request.seed,
            &request.boxes,
            rr.near.as_ref(),
            rr.far.as_ref(),
            )?)
    } else {
        None
    };

    let rgb2 = rr.rgb.value().to_shape((n, 3)).unwrap().to_owned();
    let (rgb, depth, acc) = match &decomposed {
        Some(dec) => {
            let mut rgb = Array2::<f64>::zeros((n, 3));
            for (i, d) in dec.iter().enumerate() {
                for k in 0..3 {
                    rgb[(i, k)] = d.color[k];
                }
            }
            (
                rgb,
                Array1::from_iter(rr.depth.value().iter().cloned()),
                Array1::from_iter(rr.acc.value().iter().cloned()),
            )
        }
        None => (
            rgb2,
            Array1::from_iter(rr.depth.value().iter().cloned()),
            Array1::from_iter(rr.acc.value().iter().cloned()),
        ),
    };
    Ok(RenderOutput {
        rgb,
        depth,
        acc,
        decomposed,
    })
}

/// Render a full pixel grid in chunks; results are chunk-size invariant.
pub fn render_image(
    params: &ModelParams,
    source_views: &[(Array3<f64>, Camera)],
    target: &Camera,
    mode: RenderMode,
    boxes: &[OrientedBox],
    sampling: &SamplingConfig,
    seed: u64,
    chunk_size: usize,
) -> Result<(Array3<f64>, Array2<f64>, Array2<f64>)> {
    if chunk_size == 0 {
        return Err(Error::invalid("chunk_size must be at least 1"));
    }
    if source_views.is_empty() {
        return Err(Error::invalid("render needs at least one source view"));
    }
    let cfg = &params.config;
    let p = params.weights.constants();
    let mut buffers = params.buffers.clone();
    let mut bn = BnState {
        buffers: &mut buffers,
        training: false,
    };
    let images = views_to_tensor(source_views);
    let cameras: Vec<Camera> = source_views.iter().map(|(_, c)| c.clone()).collect();
    let enc = encode_scene(&p, &mut bn, cfg, &images, &cameras)?;

    let (h, w) = (target.height, target.width);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let rays = crate::geometry::generate_rays(target, &pixels)?;

    let mut rgb = Array3::<f64>::zeros((h, w, 3));
    let mut depth = Array2::<f64>::zeros((h, w));
    let mut acc = Array2::<f64>::zeros((h, w));
    let mut start = 0;
    while start < rays.len() {
        let end = (start + chunk_size).min(rays.len());
        let chunk_request = RenderRequest {
            source_views,
            rays: rays[start..end].to_vec(),
            mode,
            boxes: boxes.to_vec(),
            sampling: *sampling,
            seed,
        };
        let ray_ids: Vec<u64> = (start as u64..end as u64).collect();
        let out = render_with_encoding(&p, cfg, &enc, &chunk_request, &ray_ids)?;
        for (k, global) in (start..end).enumerate() {
            let (r, c) = pixels[global];
            for ch in 0..3 {
                rgb[(r, c, ch)] = out.rgb[(k, ch)];
            }
            depth[(r, c)] = out.depth[k];
            acc[(r, c)] = out.acc[k];
        }
        start = end;
    }
    Ok((rgb, depth, acc))
}
