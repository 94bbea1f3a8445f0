//! Procedural scenes with closed-form geometry: one textured plane at fixed
//! depth and two axis-aligned boxes, viewed from cameras on a horizontal arc.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::{SceneBundle, View};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn centered(center: [f64; 3], half: [f64; 3]) -> Self {
        Self {
            min: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            max: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
        }
    }

    /// Entry distance (or exit distance when the origin is inside) and hit axis.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis0 = 0;
        let mut axis1 = 0;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            if ta > t0 {
                t0 = ta;
                axis0 = a;
            }
            if tb < t1 {
                t1 = tb;
                axis1 = a;
            }
        }
        if t0 > t1 {
            return None;
        }
        if t0 > HIT_EPS {
            Some((t0, axis0))
        } else if t1 > HIT_EPS {
            Some((t1, axis1))
        } else {
            None
        }
    }
}

/// Camera path the generator places views on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraArc {
    pub target: [f64; 3],
    pub radius: f64,
    pub angle_min_deg: f64,
    pub angle_max_deg: f64,
    pub elevation: f64,
    pub focal_scale: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraArc {
    pub fn camera_at(&self, angle_deg: f64, width: usize, height: usize) -> CameraModel {
        let th = angle_deg.to_radians();
        let target = Vector3::from(self.target);
        let eye = target + Vector3::new(self.radius * th.sin(), self.elevation, -self.radius * th.cos());
        CameraModel::look_at(
            eye,
            target,
            Vector3::new(0.0, -1.0, 0.0),
            self.focal_scale * width as f64,
            width,
            height,
            self.near,
            self.far,
        )
    }

    pub fn angles(&self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (self.angle_min_deg + self.angle_max_deg)];
        }
        (0..n)
            .map(|k| self.angle_min_deg + (self.angle_max_deg - self.angle_min_deg) * k as f64 / (n - 1) as f64)
            .collect()
    }
}

/// What a ray hits first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// 0 for the plane, `1 + i` for box `i`.
    pub object: usize,
    pub axis: usize,
}

/// Closed-form scene description, serialized as `geometry.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    /// World z of the textured plane (facing the cameras).
    pub plane_depth: f64,
    pub boxes: Vec<Aabb>,
    pub texture_seed: u64,
    pub palette: Vec<[f64; 3]>,
    pub arc: CameraArc,
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    3
}

impl SceneGeometry {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_ce7e);
        let mut jitter = |s: f64| rng.gen_range(-s..s);
        let boxes = vec![
            Aabb::centered(
                [-0.55 + jitter(0.1), 0.15 + jitter(0.1), 3.1 + jitter(0.1)],
                [0.3, 0.3, 0.3],
            ),
            Aabb::centered(
                [0.6 + jitter(0.1), -0.25 + jitter(0.1), 3.7 + jitter(0.1)],
                [0.25, 0.4, 0.25],
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xc0105);
        let palette = (0..4)
            .map(|_| {
                [
                    rng.gen_range(0.15..0.9),
                    rng.gen_range(0.15..0.9),
                    rng.gen_range(0.15..0.9),
                ]
            })
            .collect();
        Self {
            plane_depth: 4.6,
            boxes,
            texture_seed: seed,
            palette,
            arc: CameraArc {
                target: [0.0, 0.0, 3.3],
                radius: 3.3,
                angle_min_deg: -22.0,
                angle_max_deg: 22.0,
                elevation: -0.35,
                focal_scale: 1.1,
                near: 1.2,
                far: 6.4,
            },
            supersample: default_supersample(),
        }
    }

    /// First surface hit along a ray with unit direction `d`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d.z.abs() > 1e-15 {
            let t = (self.plane_depth - o.z) / d.z;
            if t > HIT_EPS {
                best = Some(Hit {
                    t,
                    point: o + d * t,
                    object: 0,
                    axis: 2,
                });
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, axis)) = b.intersect(o, d) {
                if best.is_none_or(|h| t < h.t) {
                    best = Some(Hit {
                        t,
                        point: o + d * t,
                        object: i + 1,
                        axis,
                    });
                }
            }
        }
        best
    }

    /// View-independent surface color at a hit.
    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let p = hit.point;
        let n1 = value_noise(self.texture_seed, p * 3.2);
        let n2 = value_noise(self.texture_seed ^ 0xabc, p * 6.4);
        let n = 0.65 * n1 + 0.35 * n2;
        let pal = &self.palette;
        if hit.object == 0 {
            let a = pal[0];
            let b = pal[1];
            let m = smoothstep(0.3, 0.7, n1);
            let bright = 0.75 + 0.25 * n2;
            [0, 1, 2].map(|c| ((a[c] * (1.0 - m) + b[c] * m) * bright).clamp(0.0, 1.0))
        } else {
            let base = pal[1 + hit.object];
            let face = [0.8, 0.9, 1.0][hit.axis];
            [0, 1, 2].map(|c| (base[c] * face * (0.6 + 0.4 * n)).clamp(0.0, 1.0))
        }
    }

    /// Photo-real image of the scene from `camera`, supersampled and 8-bit quantized.
    pub fn render(&self, camera: &CameraModel) -> ImageBuffer {
        let ss = self.supersample.max(1);
        let center = camera.center();
        ImageBuffer::from_fn(camera.width, camera.height, |x, y| {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let d = camera.direction_through(u, v);
                    if let Some(hit) = self.cast(&center, &d) {
                        let c = self.shade(&hit);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
            }
            acc.map(|v| v / (ss * ss) as f64)
        })
        .quantized()
    }

    /// Whether `point` is the first surface seen from `camera`'s center.
    pub fn visible_from(&self, camera: &CameraModel, point: &Vector3<f64>) -> bool {
        let c = camera.center();
        let to = point - c;
        let dist = to.norm();
        match self.cast(&c, &(to / dist)) {
            Some(hit) => (hit.t - dist).abs() < 1e-6 * dist.max(1.0),
            None => false,
        }
    }

    /// Test cameras halfway between consecutive training views.
    pub fn midpoint_cameras(&self, n_views: usize, width: usize, height: usize) -> Vec<CameraModel> {
        let a = self.arc.angles(n_views);
        a.windows(2)
            .map(|w| self.arc.camera_at(0.5 * (w[0] + w[1]), width, height))
            .collect()
    }
}

/// Builds a deterministic textured-plane-plus-boxes scene.
pub fn generate_synthetic_scene(seed: u64, n_views: usize, resolution: usize) -> Result<SceneBundle> {
    if n_views < 2 {
        return Err(Error::Argument(format!("n_views must be at least 2, got {n_views}")));
    }
    if resolution < 8 {
        return Err(Error::Argument(format!(
            "resolution must be at least 8, got {resolution}"
        )));
    }
    let geometry = SceneGeometry::from_seed(seed);
    let views = geometry
        .arc
        .angles(n_views)
        .into_iter()
        .map(|a| {
            let camera = geometry.arc.camera_at(a, resolution, resolution);
            let image = geometry.render(&camera);
            View { camera, image }
        })
        .collect();
    SceneBundle::new(
        format!("synthetic-s{seed}-v{n_views}-r{resolution}"),
        views,
        Some(geometry),
    )
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth trilinear value noise in `[0, 1]`.
pub fn value_noise(seed: u64, p: Vector3<f64>) -> f64 {
    let f = p.map(f64::floor);
    let fr = p - f;
    let s = fr.map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}
