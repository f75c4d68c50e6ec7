//! Camera and ray math: pinhole ray generation, the inverted-sphere
//! contraction for unbounded far content, ray/sphere and ray/box
//! intersection, and the stratified + importance samplers used along rays.
//!
//! Camera frame convention: x right, y down, z forward. Pixel `(row, col)`
//! covers the unit square whose center is `(col + 0.5, row + 0.5)` in
//! continuous pixel coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Clone, Debug)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    /// Camera-to-world transform.
    pub pose: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

pub const ROT_TOL: f64 = 1e-6;

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        pose: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let cam = Camera {
            intrinsics,
            pose,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[(1, 0)].abs() > 1e-9 || k[(2, 0)].abs() > 1e-9 || k[(2, 1)].abs() > 1e-9 {
            return Err(Error::invalid("intrinsics must be upper-triangular"));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("intrinsics[2,2] must be 1"));
        }
        let r = self.rotation();
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.iter().cloned().map(f64::abs).fold(0.0, f64::max) > ROT_TOL {
            return Err(Error::invalid("pose rotation must be orthonormal"));
        }
        if r.determinant() < 0.0 {
            return Err(Error::invalid("pose rotation must not mirror"));
        }
        let bottom = self.pose.row(3);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::invalid("pose bottom row must be [0,0,0,1]"));
        }
        if self.width == 0 || self.height == 0 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::invalid("image dimensions must be positive and even"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World point -> camera frame.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.center())
    }

    /// World point -> (continuous pixel coords (x, y), camera-frame depth z).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let pc = self.world_to_camera(p);
        let k = &self.intrinsics;
        let u = k[(0, 0)] * pc.x / pc.z + k[(0, 1)] * pc.y / pc.z + k[(0, 2)];
        let v = k[(1, 1)] * pc.y / pc.z + k[(1, 2)];
        (u, v, pc.z)
    }
}

/// A ray with unit direction.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Ray {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// A point outside the unit sphere in inverted-sphere coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractedPoint {
    pub unit_dir: Vector3<f64>,
    /// 1 / ||x||, in (0, 1].
    pub inv_radius: f64,
}

impl ContractedPoint {
    /// Back to world coordinates.
    pub fn uncontract(&self) -> Vector3<f64> {
        self.unit_dir / self.inv_radius
    }

    /// The 4-vector (x', y', z', 1/r) used for conditioning the far decoder.
    pub fn as_array(&self) -> [f64; 4] {
        [self.unit_dir.x, self.unit_dir.y, self.unit_dir.z, self.inv_radius]
    }
}

/// Remap a point with `||x|| >= 1` to (unit direction, inverse radius).
pub fn contract(x: &Vector3<f64>) -> Result<ContractedPoint> {
    let r = x.norm();
    if r < 1.0 {
        return Err(Error::Domain(format!(
            "contract: ||x|| = {r} < 1 belongs to the near branch"
        )));
    }
    Ok(ContractedPoint {
        unit_dir: x / r,
        inv_radius: 1.0 / r,
    })
}

/// Oriented bounding box.
#[derive(Clone, Debug)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl OrientedBox {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        local.x.abs() <= self.half_extents.x
            && local.y.abs() <= self.half_extents.y
            && local.z.abs() <= self.half_extents.z
    }
}

/// Per-ray sampling parameters.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub stratified_jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            near: 0.02,
            far: 3.0,
            n_coarse: 64,
            n_fine: 64,
            stratified_jitter: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("sampling requires 0 < near < far"));
        }
        if self.n_coarse == 0 || self.n_fine == 0 {
            return Err(Error::invalid("sample counts must be at least 1"));
        }
        Ok(())
    }
}

/// Camera-to-world pose looking from `eye` toward `target` (x right, y down,
/// z forward). Falls back to the world x axis when the view direction is
/// nearly parallel to `world_up`.
pub fn look_at_pose(eye: &Vector3<f64>, target: &Vector3<f64>, world_up: &Vector3<f64>) -> Matrix4<f64> {
    let forward = (target - eye).normalize();
    let up = if forward.dot(&world_up.normalize()).abs() > 0.99 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        world_up.normalize()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let mut pose = Matrix4::identity();
    for i in 0..3 {
        pose[(i, 0)] = right[i];
        pose[(i, 1)] = down[i];
        pose[(i, 2)] = forward[i];
        pose[(i, 3)] = eye[i];
    }
    pose
}

/// Intrinsics for a vertical field of view, principal point at the center.
pub fn intrinsics_for_fov(fov_y_deg: f64, width: usize, height: usize) -> Matrix3<f64> {
    let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
    let mut k = Matrix3::identity();
    k[(0, 0)] = f;
    k[(1, 1)] = f;
    k[(0, 2)] = width as f64 * 0.5;
    k[(1, 2)] = height as f64 * 0.5;
    k
}

/// Rays through the centers of the given `(row, col)` pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    let k = &camera.intrinsics;
    let (fx, fy) = (k[(0, 0)], k[(1, 1)]);
    let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
    let skew = k[(0, 1)];
    let rot = camera.rotation();
    let origin = camera.center();
    let mut rays = Vec::with_capacity(pixels.len());
    for &(row, col) in pixels {
        if row >= camera.height || col >= camera.width {
            return Err(Error::invalid(format!(
                "pixel ({row}, {col}) outside {}x{} image",
                camera.height, camera.width
            )));
        }
        let v = row as f64 + 0.5;
        let u = col as f64 + 0.5;
        let yc = (v - cy) / fy;
        let xc = (u - cx - skew * yc) / fx;
        let dir_cam = Vector3::new(xc, yc, 1.0);
        rays.push(Ray::new(origin, rot * dir_cam));
    }
    Ok(rays)
}

/// Split `[t_min, t_max]` into the part of the ray inside the unit sphere and
/// the part beyond the sphere exit. Either interval may be absent.
pub fn ray_sphere_split(
    ray: &Ray,
    t_min: f64,
    t_max: f64,
) -> (Option<(f64, f64)>, Option<(f64, f64)>) {
    assert!(t_min < t_max, "ray_sphere_split requires t_min < t_max");
    let b = ray.origin.dot(&ray.direction);
    let c = ray.origin.norm_squared() - 1.0;
    let disc = b * b - c;
    let clip = |a: f64, bnd: f64| -> Option<(f64, f64)> {
        let lo = a.max(t_min);
        let hi = bnd.min(t_max);
        (hi > lo).then_some((lo, hi))
    };
    if disc <= 0.0 {
        // never enters the sphere
        return (None, clip(t_min, t_max));
    }
    let sq = disc.sqrt();
    let t_in = -b - sq;
    let t_out = -b + sq;
    let near = clip(t_in, t_out);
    let far = if t_out < t_max {
        clip(t_out, t_max)
    } else {
        None
    };
    (near, far)
}

/// Stratified samples in `(t0, t1)`: bin midpoints, or one uniform draw per
/// bin when `jitter` is set. Strictly increasing.
pub fn stratified_samples(
    interval: (f64, f64),
    n: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (t0, t1) = interval;
    if !(t0 < t1) {
        return Err(Error::invalid(format!("degenerate interval ({t0}, {t1})")));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let w = (t1 - t0) / n as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let u = if jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
        out.push(t0 + (i as f64 + u) * w);
    }
    Ok(out)
}

/// Inverse-CDF samples from the piecewise-constant density proportional to
/// `weights` (with a 1e-5 floor per bin) over `bin_edges`. With all weights
/// zero this reduces to stratified sampling over the whole interval.
pub fn importance_samples(
    bin_edges: &[f64],
    weights: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if bin_edges.len() != weights.len() + 1 {
        return Err(Error::invalid(format!(
            "importance_samples: {} edges vs {} weights",
            bin_edges.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid("importance_samples: negative weight"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    const FLOOR: f64 = 1e-5;
    // per-bin probability mass: (w + floor) * bin width
    let masses: Vec<f64> = weights
        .iter()
        .zip(bin_edges.windows(2))
        .map(|(&w, e)| (w + FLOOR) * (e[1] - e[0]).max(0.0))
        .collect();
    let total: f64 = masses.iter().sum();
    let mut cdf = Vec::with_capacity(masses.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &masses {
        acc += m / total;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        // stratified quantiles keep the samples sorted and well spread
        let u = (k as f64 + rng.gen_range(0.0..1.0)) / n as f64;
        let mut idx = match cdf.binary_search_by(|p| p.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        idx = idx.min(weights.len() - 1);
        let span = (cdf[idx + 1] - cdf[idx]).max(1e-30);
        let frac = (u - cdf[idx]) / span;
        out.push(bin_edges[idx] + frac * (bin_edges[idx + 1] - bin_edges[idx]));
    }
    Ok(out)
}

/// Slab test against an oriented box; returns raw entry/exit parameters.
pub fn ray_box_intersect(ray: &Ray, bbox: &OrientedBox) -> Option<(f64, f64)> {
    let o = bbox.rotation.transpose() * (ray.origin - bbox.center);
    let d = bbox.rotation.transpose() * ray.direction;
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let h = bbox.half_extents[a];
        if d[a].abs() < 1e-12 {
            if o[a].abs() > h {
                return None;
            }
            continue;
        }
        let mut lo = (-h - o[a]) / d[a];
        let mut hi = (h - o[a]) / d[a];
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    (t1 > t0).then_some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn simple_camera(f: f64, cx: f64, cy: f64, w: usize, h: usize) -> Camera {
        let mut k = Matrix3::identity();
        k[(0, 0)] = f;
        k[(1, 1)] = f;
        k[(0, 2)] = cx;
        k[(1, 2)] = cy;
        Camera::new(k, Matrix4::identity(), w, h).unwrap()
    }

    #[test]
    fn ray_through_principal_point_is_optical_axis() {
        let cam = simple_camera(100.0, 50.0, 50.0, 100, 100);
        let rays = generate_rays(&cam, &[(50, 50)]).unwrap();
        let d = rays[0].direction;
        // hand derivation ignores the half-pixel offset; allow that slack
        assert!((d - Vector3::new(0.0, 0.0, 1.0)).norm() < 0.01);
        // the exact contract: the ray passes through pixel center (50.5, 50.5)
        let expect = Vector3::new(0.5 / 100.0, 0.5 / 100.0, 1.0).normalize();
        assert!((d - expect).norm() < 1e-12);
    }

    #[test]
    fn pinhole_backprojection_by_hand() {
        let cam = simple_camera(100.0, 50.0, 50.0, 400, 400);
        let rays = generate_rays(&cam, &[(50, 150)]).unwrap();
        let d = rays[0].direction;
        let coarse = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert!((d - coarse).norm() < 0.01);
        let exact = Vector3::new(100.5 / 100.0, 0.5 / 100.0, 1.0).normalize();
        assert!((d - exact).norm() < 1e-12);
    }

    #[test]
    fn directions_are_unit_for_identityish_intrinsics() {
        let cam = simple_camera(1.0, 0.0, 0.0, 8, 6);
        for (r, c) in [(0usize, 0usize), (3, 7), (5, 2)] {
            let rays = generate_rays(&cam, &[(r, c)]).unwrap();
            assert!((rays[0].direction.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_input_error() {
        let cam = simple_camera(10.0, 4.0, 3.0, 8, 6);
        assert!(generate_rays(&cam, &[(6, 0)]).is_err());
        assert!(generate_rays(&cam, &[(0, 8)]).is_err());
    }

    #[test]
    fn camera_rejects_bad_shapes() {
        let mut k = Matrix3::identity();
        k[(0, 0)] = 10.0;
        k[(1, 1)] = 10.0;
        assert!(Camera::new(k, Matrix4::identity(), 7, 6).is_err()); // odd width
        let mut bad = Matrix4::identity();
        bad[(0, 0)] = 2.0; // non-orthonormal rotation
        assert!(Camera::new(k, bad, 8, 6).is_err());
    }

    #[test]
    fn contract_examples() {
        let p = contract(&Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert!((p.unit_dir - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((p.inv_radius - 0.5).abs() < 1e-12);

        let p = contract(&Vector3::new(0.0, 3.0, 4.0)).unwrap();
        assert!((p.unit_dir - Vector3::new(0.0, 0.6, 0.8)).norm() < 1e-12);
        assert!((p.inv_radius - 0.2).abs() < 1e-12);

        let x = Vector3::new(1.0, 0.0, 0.0);
        let p = contract(&x).unwrap();
        assert!((p.inv_radius - 1.0).abs() < 1e-12);
        assert!((p.unit_dir - x).norm() < 1e-12);

        assert!(contract(&Vector3::new(0.5, 0.0, 0.0)).is_err());
    }

    #[test]
    fn contract_is_continuous_at_the_boundary() {
        let x = Vector3::new(0.6, -0.64, 0.48).normalize();
        for delta in [1e-4, 1e-6, 1e-8] {
            let p = contract(&(x * (1.0 + delta))).unwrap();
            assert!((p.unit_dir - x).norm() < 10.0 * delta + 1e-12);
            assert!((p.inv_radius - 1.0).abs() < 10.0 * delta);
        }
    }

    #[test]
    fn sphere_split_examples() {
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.3, -0.2, 0.9));
        let (near, far) = ray_sphere_split(&ray, 0.02, 3.0);
        let near = near.unwrap();
        let far = far.unwrap();
        assert!((near.0 - 0.02).abs() < 1e-12 && (near.1 - 1.0).abs() < 1e-12);
        assert!((far.0 - 1.0).abs() < 1e-12 && (far.1 - 3.0).abs() < 1e-12);

        let ray = Ray::new(Vector3::new(5.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0));
        let (near, far) = ray_sphere_split(&ray, 0.02, 3.0);
        assert!(near.is_none());
        assert_eq!(far.unwrap(), (0.02, 3.0));

        let ray = Ray::new(Vector3::new(0.0, 0.0, -2.0), Vector3::new(0.0, 0.0, 1.0));
        let (near, far) = ray_sphere_split(&ray, 0.02, 3.0);
        let near = near.unwrap();
        assert!((near.0 - 1.0).abs() < 1e-12 && (near.1 - 3.0).abs() < 1e-12);
        assert!(far.is_none());
    }

    #[test]
    fn sphere_split_midpoints_classify_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let o = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let d = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if d.norm() < 1e-3 {
                continue;
            }
            let ray = Ray::new(o, d);
            let (near, far) = ray_sphere_split(&ray, 0.02, 3.0);
            if let Some((a, b)) = near {
                let mid = ray.at(0.5 * (a + b));
                assert!(mid.norm() < 1.0 + 1e-9, "near midpoint outside sphere");
                assert!(b > a && a >= 0.02 && b <= 3.0);
            }
            if let Some((a, b)) = far {
                let mid = ray.at(0.5 * (a + b));
                assert!(mid.norm() > 1.0 - 1e-9, "far midpoint inside sphere");
                assert!(b > a && a >= 0.02 && b <= 3.0);
            }
            if let (Some((_, ne)), Some((fs, _))) = (near, far) {
                assert!(fs >= ne - 1e-12, "intervals overlap");
            }
        }
    }

    #[test]
    fn stratified_midpoints_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = stratified_samples((0.0, 1.0), 4, false, &mut rng).unwrap();
        let want = [0.125, 0.375, 0.625, 0.875];
        for (a, b) in s.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_jitter_stays_in_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t0, t1) = (0.3, 2.7);
        let n = 16;
        let s = stratified_samples((t0, t1), n, true, &mut rng).unwrap();
        let w = (t1 - t0) / n as f64;
        for (i, &v) in s.iter().enumerate() {
            assert!(v >= t0 + i as f64 * w && v < t0 + (i + 1) as f64 * w);
        }
        assert!(s.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn stratified_respects_bounds_and_rejects_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = stratified_samples((0.02, 3.0), 64, true, &mut rng).unwrap();
        assert!(s.first().unwrap() >= &0.02 && s.last().unwrap() <= &3.0);
        assert!(stratified_samples((1.0, 1.0), 4, false, &mut rng).is_err());
    }

    #[test]
    fn importance_point_mass_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let mut w = vec![0.0; 8];
        w[3] = 1.0;
        let s = importance_samples(&edges, &w, 64, &mut rng).unwrap();
        // the 1e-5 floor leaks a vanishing share of mass to other bins
        let inside = s.iter().filter(|&&v| (3.0..4.0).contains(&v)).count();
        assert!(inside == 64, "{inside} of 64 samples in the massive bin");
    }

    #[test]
    fn importance_uniform_weights_match_uniform_distribution() {
        // KS statistic against the uniform CDF at n = 10^4
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let edges: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        let w = vec![1.0; 16];
        let s = importance_samples(&edges, &w, 10_000, &mut rng).unwrap();
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = sorted
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / 10_000.0 - v).abs())
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn importance_zero_weights_fall_back_to_stratified() {
        let edges: Vec<f64> = (0..=8).map(|i| 0.02 + i as f64 * (2.98 / 8.0)).collect();
        let w = vec![0.0; 8];
        let a = importance_samples(&edges, &w, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = stratified_samples((0.02, 3.0), 32, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn importance_matches_brute_force_inverse_cdf() {
        // Independent oracle: linear-scan inverse CDF over the same density.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let edges: Vec<f64> = vec![0.0, 0.5, 0.7, 1.3, 2.0, 3.1];
        let w = vec![0.2, 0.0, 1.4, 0.3, 0.05];
        let n = 257;
        let got = importance_samples(&edges, &w, n, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();

        let masses: Vec<f64> = w
            .iter()
            .zip(edges.windows(2))
            .map(|(&w, e)| (w + 1e-5) * (e[1] - e[0]))
            .collect();
        let total: f64 = masses.iter().sum();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut want = Vec::new();
        for k in 0..n {
            let u = (k as f64 + rng2.gen_range(0.0..1.0)) / n as f64;
            let mut acc = 0.0;
            let mut idx = masses.len() - 1;
            for (i, m) in masses.iter().enumerate() {
                if u < acc + m / total {
                    idx = i;
                    break;
                }
                acc += m / total;
            }
            let frac = (u - acc) / (masses[idx] / total);
            want.push(edges[idx] + frac * (edges[idx + 1] - edges[idx]));
        }
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
        let _ = rng.gen_range(0..2);
    }

    #[test]
    fn importance_rejects_mismatched_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(importance_samples(&[0.0, 1.0], &[1.0, 2.0], 4, &mut rng).is_err());
    }

    #[test]
    fn box_intersection_examples() {
        let cube = OrientedBox {
            center: Vector3::zeros(),
            half_extents: Vector3::new(1.0, 1.0, 1.0),
            rotation: Matrix3::identity(),
        };
        let ray = Ray::new(Vector3::new(-2.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        let (t0, t1) = ray_box_intersect(&ray, &cube).unwrap();
        assert!((t0 - 1.0).abs() < 1e-12 && (t1 - 3.0).abs() < 1e-12);

        let miss = Ray::new(Vector3::new(-2.0, 5.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        assert!(ray_box_intersect(&miss, &cube).is_none());
    }

    #[test]
    fn rotated_cube_diagonal_length() {
        let half = 0.7;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_4);
        let cube = OrientedBox {
            center: Vector3::zeros(),
            half_extents: Vector3::new(half, half, half),
            rotation: rot.into_inner(),
        };
        let ray = Ray::new(Vector3::new(-3.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        let (t0, t1) = ray_box_intersect(&ray, &cube).unwrap();
        let analytic = 2.0 * std::f64::consts::SQRT_2 * half;
        assert!(
            ((t1 - t0) - analytic).abs() < 1e-9,
            "length {} vs {analytic}",
            t1 - t0
        );

        // marching membership oracle at step 1e-4
        let step = 1e-4;
        let mut first = None;
        let mut last = None;
        let mut t = 0.0;
        while t < 6.0 {
            if cube.contains(&ray.at(t)) {
                if first.is_none() {
                    first = Some(t);
                }
                last = Some(t);
            }
            t += step;
        }
        assert!((first.unwrap() - t0).abs() < 2.0 * step);
        assert!((last.unwrap() - t1).abs() < 2.0 * step);
    }

    #[test]
    fn box_intersection_agrees_with_membership_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let step = 2e-3;
        for _ in 0..1000 {
            let bbox = OrientedBox {
                center: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                half_extents: Vector3::new(
                    rng.gen_range(0.1..0.8),
                    rng.gen_range(0.1..0.8),
                    rng.gen_range(0.1..0.8),
                ),
                rotation: Rotation3::from_euler_angles(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )
                .into_inner(),
            };
            let ray = Ray::new(
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0) + 1e-3,
                ),
            );
            let hit = ray_box_intersect(&ray, &bbox);
            let mut inside_ts = Vec::new();
            let mut t = 0.0;
            while t < 8.0 {
                if bbox.contains(&ray.at(t)) {
                    inside_ts.push(t);
                }
                t += step;
            }
            match hit {
                Some((t0, t1)) => {
                    // every marched inside-point lies within [t0, t1]
                    for &ti in &inside_ts {
                        assert!(ti >= t0 - step && ti <= t1 + step);
                    }
                    // when the overlap with [0, 8] is wide enough the oracle sees it
                    let lo = t0.max(0.0);
                    let hi = t1.min(8.0);
                    if hi - lo > 4.0 * step {
                        assert!(
                            !inside_ts.is_empty(),
                            "oracle missed interval ({t0}, {t1})"
                        );
                        assert!((inside_ts[0] - lo).abs() < 4.0 * step);
                        assert!((inside_ts.last().unwrap() - hi).abs() < 4.0 * step);
                    }
                }
                None => assert!(
                    inside_ts.is_empty(),
                    "oracle found hits where intersect reported none"
                ),
            }
        }
    }
}
