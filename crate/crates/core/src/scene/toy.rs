//! Procedural toy scenes with analytic ground truth.
//!
//! A scene is a Lambertian ground plane, 1-4 sphere/box primitives resting on
//! it near the origin, a single directional light and a gradient sky. Cameras
//! sit on the upper hemisphere at a fixed radius just inside the unit sphere,
//! looking at the origin, so the near field covers the objects and the far
//! field is exercised by the distant ground and sky. Every view comes with an
//! exact depth map (sky pixels are marked invalid).

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{intrinsics_for_fov, look_at_pose, ray_box_intersect, Camera, OrientedBox, Ray};
use crate::scene::{DepthMap, Frame, Scene, Split};

pub const CAMERA_RADIUS: f64 = 1.0 - crate::scene::NORMALIZE_MARGIN;
const AMBIENT: f64 = 0.3;
const DIFFUSE: f64 = 0.7;

#[derive(Clone, Debug)]
pub enum ToyPrimitive {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
        albedo: [f64; 3],
    },
    Block {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
        rot_z: f64,
        albedo: [f64; 3],
    },
}

impl ToyPrimitive {
    pub fn bounding_box(&self) -> OrientedBox {
        match self {
            ToyPrimitive::Sphere { center, radius, .. } => OrientedBox {
                center: *center,
                half_extents: Vector3::new(*radius, *radius, *radius),
                rotation: Matrix3::identity(),
            },
            ToyPrimitive::Block {
                center,
                half_extents,
                rot_z,
                ..
            } => OrientedBox {
                center: *center,
                half_extents: *half_extents,
                rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), *rot_z).into_inner(),
            },
        }
    }

    fn max_radius(&self) -> f64 {
        match self {
            ToyPrimitive::Sphere { center, radius, .. } => center.norm() + radius,
            ToyPrimitive::Block {
                center,
                half_extents,
                ..
            } => center.norm() + half_extents.norm(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    pub ground_color: [f64; 3],
    /// (horizon, zenith)
    pub sky_gradient: ([f64; 3], [f64; 3]),
    pub primitives: Vec<ToyPrimitive>,
    /// Unit vector toward the light.
    pub light_dir: Vector3<f64>,
    pub n_train_views: usize,
    pub n_eval_views: usize,
    /// (height, width)
    pub image_size: (usize, usize),
}

impl ToySceneSpec {
    /// Randomize colors, light and primitives from the seed.
    pub fn from_seed(
        seed: u64,
        n_objects: usize,
        n_train_views: usize,
        n_eval_views: usize,
        image_size: (usize, usize),
    ) -> ToySceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let ground_color = [
            rng.gen_range(0.25..0.55),
            rng.gen_range(0.25..0.55),
            rng.gen_range(0.15..0.45),
        ];
        let horizon = [
            rng.gen_range(0.55..0.95),
            rng.gen_range(0.55..0.95),
            rng.gen_range(0.6..0.95),
        ];
        let zenith = [
            rng.gen_range(0.05..0.35),
            rng.gen_range(0.15..0.5),
            rng.gen_range(0.5..0.95),
        ];
        let light_dir = Vector3::new(
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(0.7..1.2),
        )
        .normalize();

        let mut primitives: Vec<ToyPrimitive> = Vec::new();
        let mut centers: Vec<Vector3<f64>> = Vec::new();
        for k in 0..n_objects {
            let mut attempt = 0;
            let (center, footprint) = loop {
                attempt += 1;
                let r = rng.gen_range(0.0..0.42f64);
                let az = rng.gen_range(0.0..std::f64::consts::TAU);
                let c = Vector3::new(r * az.cos(), r * az.sin(), 0.0);
                let ok = centers.iter().all(|p| (p - c).norm() > 0.36) || attempt > 50;
                if ok {
                    break (c, r);
                }
            };
            let _ = footprint;
            centers.push(center);
            let albedo = [
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
            ];
            if k % 2 == 0 {
                let radius = rng.gen_range(0.12..0.2);
                primitives.push(ToyPrimitive::Sphere {
                    center: Vector3::new(center.x, center.y, radius),
                    radius,
                    albedo,
                });
            } else {
                let half = Vector3::new(
                    rng.gen_range(0.09..0.16),
                    rng.gen_range(0.09..0.16),
                    rng.gen_range(0.09..0.18),
                );
                primitives.push(ToyPrimitive::Block {
                    center: Vector3::new(center.x, center.y, half.z),
                    half_extents: half,
                    rot_z: rng.gen_range(0.0..std::f64::consts::PI),
                    albedo,
                });
            }
        }
        ToySceneSpec {
            seed,
            n_objects,
            ground_color,
            sky_gradient: (horizon, zenith),
            primitives,
            light_dir,
            n_train_views,
            n_eval_views,
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.n_objects > 4 {
            return Err(Error::invalid("toy scenes hold 1 to 4 objects"));
        }
        if self.primitives.len() != self.n_objects {
            return Err(Error::invalid("primitive count differs from n_objects"));
        }
        for p in &self.primitives {
            if p.max_radius() > 0.98 {
                return Err(Error::invalid(format!(
                    "object extends to radius {:.3}, outside the unit sphere",
                    p.max_radius()
                )));
            }
        }
        if self.n_train_views == 0 || self.n_eval_views == 0 {
            return Err(Error::invalid("need at least one train and one eval view"));
        }
        let (h, w) = self.image_size;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid("image size must be positive and even"));
        }
        Ok(())
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

fn hit_sphere(ray: &Ray, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = -b - sq;
    if t > 1e-9 {
        Some(t)
    } else {
        let t = -b + sq;
        (t > 1e-9).then_some(t)
    }
}

fn trace(spec: &ToySceneSpec, ray: &Ray) -> ([f64; 3], Option<f64>) {
    let mut best: Option<Hit> = None;
    let mut consider = |hit: Hit| {
        if best.as_ref().map_or(true, |b| hit.t < b.t) {
            best = Some(hit);
        }
    };
    // ground plane z = 0
    if ray.direction.z < -1e-12 && ray.origin.z > 0.0 {
        consider(Hit {
            t: -ray.origin.z / ray.direction.z,
            normal: Vector3::z(),
            albedo: spec.ground_color,
        });
    }
    for prim in &spec.primitives {
        match prim {
            ToyPrimitive::Sphere {
                center,
                radius,
                albedo,
            } => {
                if let Some(t) = hit_sphere(ray, center, *radius) {
                    consider(Hit {
                        t,
                        normal: (ray.at(t) - center).normalize(),
                        albedo: *albedo,
                    });
                }
            }
            ToyPrimitive::Block { albedo, .. } => {
                let bbox = prim.bounding_box();
                if let Some((t0, t1)) = ray_box_intersect(ray, &bbox) {
                    let t = if t0 > 1e-9 { t0 } else { t1 };
                    if t > 1e-9 && t0 > 1e-9 {
                        let local = bbox.rotation.transpose() * (ray.at(t) - bbox.center);
                        let rel = [
                            local.x / bbox.half_extents.x,
                            local.y / bbox.half_extents.y,
                            local.z / bbox.half_extents.z,
                        ];
                        let axis = (0..3)
                            .max_by(|&a, &b| rel[a].abs().partial_cmp(&rel[b].abs()).unwrap())
                            .unwrap();
                        let mut n_local = Vector3::zeros();
                        n_local[axis] = rel[axis].signum();
                        consider(Hit {
                            t,
                            normal: bbox.rotation * n_local,
                            albedo: *albedo,
                        });
                    }
                }
            }
        }
    }
    match best {
        Some(hit) => {
            let lambert = hit.normal.dot(&spec.light_dir).max(0.0);
            let shade = AMBIENT + DIFFUSE * lambert;
            (
                [
                    (hit.albedo[0] * shade).min(1.0),
                    (hit.albedo[1] * shade).min(1.0),
                    (hit.albedo[2] * shade).min(1.0),
                ],
                Some(hit.t),
            )
        }
        None => {
            let z = ray.direction.z.max(0.0);
            let (h, zn) = spec.sky_gradient;
            (
                [
                    h[0] + (zn[0] - h[0]) * z,
                    h[1] + (zn[1] - h[1]) * z,
                    h[2] + (zn[2] - h[2]) * z,
                ],
                None,
            )
        }
    }
}

fn ray_through(camera: &Camera, u: f64, v: f64) -> Ray {
    let k = &camera.intrinsics;
    let xc = (u - k[(0, 2)]) / k[(0, 0)];
    let yc = (v - k[(1, 2)]) / k[(1, 1)];
    Ray::new(camera.center(), camera.rotation() * Vector3::new(xc, yc, 1.0))
}

fn render_view(spec: &ToySceneSpec, camera: &Camera) -> (Array3<f64>, DepthMap) {
    let (h, w) = (camera.height, camera.width);
    let mut image = Array3::<f64>::zeros((h, w, 3));
    let mut values = Array2::<f64>::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            // 2x2 supersampled color
            let mut acc = [0.0f64; 3];
            for (du, dv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let ray = ray_through(camera, c as f64 + du, r as f64 + dv);
                let (rgb, _) = trace(spec, &ray);
                for k in 0..3 {
                    acc[k] += rgb[k];
                }
            }
            for k in 0..3 {
                image[(r, c, k)] = acc[k] * 0.25;
            }
            // exact depth from the center ray
            let ray = ray_through(camera, c as f64 + 0.5, r as f64 + 0.5);
            if let (_, Some(t)) = trace(spec, &ray) {
                values[(r, c)] = t;
                valid[(r, c)] = true;
            }
        }
    }
    (image, DepthMap { values, valid })
}

/// Generate the posed views, exact depth and object boxes for a toy scene.
pub fn generate_toy_scene(spec: &ToySceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = spec.image_size;
    let intrinsics = intrinsics_for_fov(60.0, w, h);

    let mut frames = Vec::new();
    let n_total = spec.n_train_views + spec.n_eval_views;
    for i in 0..n_total {
        let (slot, offset) = if i < spec.n_train_views {
            (i as f64, 0.0)
        } else {
            ((i - spec.n_train_views) as f64, 0.5)
        };
        let n_ring = if i < spec.n_train_views {
            spec.n_train_views
        } else {
            spec.n_eval_views
        };
        let az = std::f64::consts::TAU * (slot + offset + rng.gen_range(0.0..0.35)) / n_ring as f64;
        let polar = rng.gen_range(25f64.to_radians()..65f64.to_radians());
        let eye = Vector3::new(
            CAMERA_RADIUS * polar.sin() * az.cos(),
            CAMERA_RADIUS * polar.sin() * az.sin(),
            CAMERA_RADIUS * polar.cos(),
        );
        let pose = look_at_pose(&eye, &Vector3::zeros(), &Vector3::z());
        let camera = Camera::new(intrinsics, pose, w, h)?;
        let (image, depth) = render_view(spec, &camera);
        frames.push(Frame {
            image,
            camera,
            depth: Some(depth),
        });
    }

    let scene = Scene {
        frames,
        boxes: spec.primitives.iter().map(|p| p.bounding_box()).collect(),
        split: Split {
            source_indices: (0..spec.n_train_views.min(5)).collect(),
            eval_indices: (spec.n_train_views..n_total).collect(),
        },
    };
    scene.validate_split()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToySceneSpec {
        ToySceneSpec::from_seed(7, 2, 4, 2, (16, 16))
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_toy_scene(&small_spec()).unwrap();
        let b = generate_toy_scene(&small_spec()).unwrap();
        for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
            assert_eq!(fa.image, fb.image);
            assert_eq!(fa.camera.pose, fb.camera.pose);
            assert_eq!(fa.depth.as_ref().unwrap().values, fb.depth.as_ref().unwrap().values);
        }
    }

    #[test]
    fn sphere_center_ray_depth_is_analytic() {
        let mut spec = small_spec();
        spec.primitives = vec![ToyPrimitive::Sphere {
            center: Vector3::new(0.0, 0.0, 0.15),
            radius: 0.15,
            albedo: [0.8, 0.2, 0.2],
        }];
        spec.n_objects = 1;
        let eye = Vector3::new(0.6, 0.0, 0.5);
        let target = Vector3::new(0.0, 0.0, 0.15);
        let ray = Ray::new(eye, target - eye);
        let (rgb, depth) = trace(&spec, &ray);
        let want = (target - eye).norm() - 0.15;
        assert!((depth.unwrap() - want).abs() < 1e-12);
        // shaded albedo, red channel dominant
        assert!(rgb[0] > rgb[1] && rgb[0] > rgb[2]);
    }

    #[test]
    fn cameras_sit_on_the_upper_hemisphere_at_fixed_radius() {
        let scene = generate_toy_scene(&small_spec()).unwrap();
        for f in &scene.frames {
            let c = f.camera.center();
            assert!(c.z > 0.0);
            assert!((c.norm() - CAMERA_RADIUS).abs() < 1e-6);
        }
    }

    #[test]
    fn energy_bounded_and_sky_marked_invalid() {
        let scene = generate_toy_scene(&small_spec()).unwrap();
        let mut saw_sky = false;
        for f in &scene.frames {
            assert!(f.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let d = f.depth.as_ref().unwrap();
            for ((r, c), &ok) in d.valid.indexed_iter() {
                if !ok {
                    saw_sky = true;
                    assert_eq!(d.values[(r, c)], 0.0);
                }
            }
        }
        assert!(saw_sky, "expected some sky pixels in a toy scene");
    }

    #[test]
    fn boxes_contain_all_object_surface_hits() {
        let spec = small_spec();
        let scene = generate_toy_scene(&spec).unwrap();
        // march rays from every camera; any hit not on ground must fall in a box
        for f in &scene.frames {
            let d = f.depth.as_ref().unwrap();
            for r in (0..f.camera.height).step_by(3) {
                for c in (0..f.camera.width).step_by(3) {
                    if !d.valid[(r, c)] {
                        continue;
                    }
                    let ray = ray_through(&f.camera, c as f64 + 0.5, r as f64 + 0.5);
                    let p = ray.at(d.values[(r, c)]);
                    if p.z > 1e-6 {
                        // off-ground hit: must be inside some recorded box
                        let inside = scene.boxes.iter().any(|b| {
                            let local = b.rotation.transpose() * (p - b.center);
                            local.x.abs() <= b.half_extents.x + 1e-9
                                && local.y.abs() <= b.half_extents.y + 1e-9
                                && local.z.abs() <= b.half_extents.z + 1e-9
                        });
                        assert!(inside, "surface hit at {p:?} escapes every box");
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_object_rejected() {
        let mut spec = small_spec();
        spec.primitives[0] = ToyPrimitive::Sphere {
            center: Vector3::new(0.9, 0.0, 0.3),
            radius: 0.3,
            albedo: [0.5; 3],
        };
        assert!(generate_toy_scene(&spec).is_err());
    }

    #[test]
    fn normalization_is_identity_on_generated_scenes() {
        let scene = generate_toy_scene(&small_spec()).unwrap();
        let (_, sim) = crate::scene::normalize_scene(&scene);
        assert!((sim.scale - 1.0).abs() < 1e-9);
        assert!(sim.translation.norm() < 1e-9);
    }
}
