//! Ray sampling, compositing and their reverse passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{encode_into, FieldParams};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::nn::Trace;
use crate::scalar::Real;
use crate::scene::CameraModel;

/// Rays rendered per work item when rasterizing full images.
const IMAGE_CHUNK: usize = 192;

/// One camera ray with its integration interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: [T; 3],
    /// Unit direction.
    pub direction: [T; 3],
    pub near: T,
    pub far: T,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: [T; 3], direction: [T; 3], near: T, far: T) -> Result<Self> {
        let n2: T = direction.iter().map(|v| *v * *v).sum();
        if (n2.sqrt() - T::one()).abs().as_f64() > 1e-6 {
            return Err(Error::Argument("ray direction must be unit length".into()));
        }
        if !(near < far) {
            return Err(Error::Argument("ray near bound must be below far bound".into()));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn from_camera(camera: &CameraModel, x: usize, y: usize) -> Self {
        let (o, d) = camera.pixel_ray(x, y);
        Self {
            origin: [T::lit(o.x), T::lit(o.y), T::lit(o.z)],
            direction: [T::lit(d.x), T::lit(d.y), T::lit(d.z)],
            near: T::lit(camera.near),
            far: T::lit(camera.far),
        }
    }
}

/// Rays through selected pixels of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch<T> {
    pub rays: Vec<Ray<T>>,
    /// Row-major pixel index of each ray.
    pub pixels: Vec<usize>,
    pub view: usize,
}

impl<T: Real> RayBatch<T> {
    pub fn from_pixels(camera: &CameraModel, view: usize, pixels: Vec<usize>) -> Self {
        let rays = pixels
            .iter()
            .map(|&p| Ray::from_camera(camera, p % camera.width, p / camera.width))
            .collect();
        Self { rays, pixels, view }
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// `samples + 1` depths: bin starts `near + (k + u_k) * delta` and a final
/// sentinel at `far`. Without jitter `u_k = 0`.
pub fn sample_depths<T: Real, R: Rng>(near: T, far: T, samples: usize, jitter: Option<&mut R>) -> Vec<T> {
    let mut t = Vec::with_capacity(samples + 1);
    push_depths(near, far, samples, jitter, &mut t);
    t
}

fn push_depths<T: Real, R: Rng>(near: T, far: T, samples: usize, jitter: Option<&mut R>, t: &mut Vec<T>) {
    let delta = (far - near) / T::lit(samples as f64);
    match jitter {
        Some(rng) => {
            for k in 0..samples {
                let u = T::lit(rng.gen::<f64>());
                t.push(near + (T::lit(k as f64) + u) * delta);
            }
        }
        None => {
            for k in 0..samples {
                t.push(near + T::lit(k as f64) * delta);
            }
        }
    }
    t.push(far);
}

/// Front-to-back compositing over black. Returns the color and the
/// accumulated opacity `sum_k T_k alpha_k`.
///
/// `t` holds one more entry than `sigmas`; `colors` is `3 * sigmas.len()`.
pub fn composite<T: Real>(sigmas: &[T], colors: &[T], t: &[T]) -> ([T; 3], T) {
    let mut trans = T::one();
    let mut out = [T::zero(); 3];
    let mut acc = T::zero();
    for (k, &s) in sigmas.iter().enumerate() {
        let delta = t[k + 1] - t[k];
        let alpha = T::one() - (-s * delta).exp();
        let w = trans * alpha;
        for c in 0..3 {
            out[c] += w * colors[3 * k + c];
        }
        acc += w;
        trans *= T::one() - alpha;
    }
    (out, acc)
}

/// Reverse pass of [`composite`] for upstream color gradient `g`.
///
/// Writes `dL/dsigma_k` into `d_sigma` and `dL/dc_k` into `d_color`.
pub fn composite_backward<T: Real>(
    sigmas: &[T],
    colors: &[T],
    t: &[T],
    g: [T; 3],
    d_sigma: &mut [T],
    d_color: &mut [T],
) {
    let s = sigmas.len();
    let (total, _) = composite(sigmas, colors, t);
    let mut trans = T::one();
    let mut partial = [T::zero(); 3];
    for k in 0..s {
        let delta = t[k + 1] - t[k];
        let alpha = T::one() - (-sigmas[k] * delta).exp();
        let w = trans * alpha;
        let c = &colors[3 * k..3 * k + 3];
        for ch in 0..3 {
            partial[ch] += w * c[ch];
            d_color[3 * k + ch] = w * g[ch];
        }
        let next = trans * (T::one() - alpha);
        let mut ds = T::zero();
        for ch in 0..3 {
            ds += g[ch] * (next * c[ch] - (total[ch] - partial[ch]));
        }
        d_sigma[k] = delta * ds;
        trans = next;
    }
}

/// Gradients of the two head blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub opacity: Vec<T>,
    pub color: Vec<T>,
}

impl<T: Real> HeadGrads<T> {
    pub fn zeros(field: &FieldParams<T>) -> Self {
        Self {
            opacity: vec![T::zero(); field.opacity_head.len()],
            color: vec![T::zero(); field.color_head.len()],
        }
    }

    pub fn clear(&mut self) {
        self.opacity.iter_mut().for_each(|v| *v = T::zero());
        self.color.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Everything the reverse pass needs from a batched render.
pub struct BatchTrace<T> {
    pub rays: usize,
    pub samples: usize,
    /// `rays * (samples + 1)` depths.
    pub t: Vec<T>,
    pub trunk: Trace<T>,
    pub opacity: Trace<T>,
    pub color: Trace<T>,
    /// `rays * 3` composited colors.
    pub out: Vec<T>,
    /// Accumulated opacity per ray.
    pub acc: Vec<T>,
}

impl<T: Real> BatchTrace<T> {
    pub fn sigmas(&self) -> &[T] {
        self.opacity.output()
    }

    pub fn colors(&self) -> &[T] {
        self.color.output()
    }

    pub fn color_of(&self, ray: usize) -> [T; 3] {
        [self.out[3 * ray], self.out[3 * ray + 1], self.out[3 * ray + 2]]
    }
}

struct NetOut<T> {
    trunk: Trace<T>,
    opacity: Trace<T>,
    color: Trace<T>,
}

fn run_networks<T: Real>(field: &FieldParams<T>, points: &[[T; 3]], dirs: &[[T; 3]]) -> NetOut<T> {
    let cfg = &field.config;
    let rows = points.len();
    let mut enc = Vec::with_capacity(rows * cfg.pos_len());
    for p in points {
        encode_into(cfg.normalize(*p), cfg.pos_freqs, &mut enc);
    }
    let trunk = cfg.trunk_shape().forward(&field.trunk, &enc, rows);
    let opacity = cfg.opacity_shape().forward(&field.opacity_head, trunk.output(), rows);

    let w = cfg.trunk_width;
    let in_len = w + cfg.dir_len();
    let mut color_in = Vec::with_capacity(rows * in_len);
    let mut dir_enc = Vec::with_capacity(cfg.dir_len());
    let mut last_dir: Option<[T; 3]> = None;
    for (r, d) in dirs.iter().enumerate() {
        color_in.extend_from_slice(&trunk.output()[r * w..(r + 1) * w]);
        if cfg.dir_freqs > 0 {
            if last_dir != Some(*d) {
                dir_enc.clear();
                encode_into(*d, cfg.dir_freqs, &mut dir_enc);
                last_dir = Some(*d);
            }
            color_in.extend_from_slice(&dir_enc);
        }
    }
    let color = cfg.color_shape().forward(&field.color_head, &color_in, rows);
    NetOut { trunk, opacity, color }
}

/// Opacities and colors (`3` per point) at arbitrary points.
pub(crate) fn eval_points<T: Real>(field: &FieldParams<T>, points: &[[T; 3]], dirs: &[[T; 3]]) -> (Vec<T>, Vec<T>) {
    let net = run_networks(field, points, dirs);
    (net.opacity.output().to_vec(), net.color.output().to_vec())
}

/// Renders a batch of rays, keeping intermediates for [`render_batch_backward`].
pub fn render_batch<T: Real, R: Rng>(
    field: &FieldParams<T>,
    rays: &[Ray<T>],
    mut jitter: Option<&mut R>,
) -> BatchTrace<T> {
    let s = field.config.samples_per_ray;
    let n = rays.len();
    let mut t = Vec::with_capacity(n * (s + 1));
    let mut points = Vec::with_capacity(n * s);
    let mut dirs = Vec::with_capacity(n * s);
    for ray in rays {
        let start = t.len();
        push_depths(ray.near, ray.far, s, jitter.as_deref_mut(), &mut t);
        for &tk in &t[start..start + s] {
            points.push([
                ray.origin[0] + tk * ray.direction[0],
                ray.origin[1] + tk * ray.direction[1],
                ray.origin[2] + tk * ray.direction[2],
            ]);
            dirs.push(ray.direction);
        }
    }
    let net = run_networks(field, &points, &dirs);
    let mut out = Vec::with_capacity(3 * n);
    let mut acc = Vec::with_capacity(n);
    {
        let sig = net.opacity.output();
        let col = net.color.output();
        for r in 0..n {
            let (c, a) = composite(
                &sig[r * s..(r + 1) * s],
                &col[3 * r * s..3 * (r + 1) * s],
                &t[r * (s + 1)..(r + 1) * (s + 1)],
            );
            out.extend_from_slice(&c);
            acc.push(a);
        }
    }
    BatchTrace {
        rays: n,
        samples: s,
        t,
        trunk: net.trunk,
        opacity: net.opacity,
        color: net.color,
        out,
        acc,
    }
}

/// Backpropagates `d_out` (`3` per ray) into head gradients and, when
/// `trunk_grad` is given, into the trunk.
pub fn render_batch_backward<T: Real>(
    field: &FieldParams<T>,
    trace: &BatchTrace<T>,
    d_out: &[T],
    grads: &mut HeadGrads<T>,
    trunk_grad: Option<&mut [T]>,
) {
    let cfg = &field.config;
    let (n, s) = (trace.rays, trace.samples);
    let rows = n * s;
    let mut d_sigma = vec![T::zero(); rows];
    let mut d_color = vec![T::zero(); rows * 3];
    let sig = trace.sigmas();
    let col = trace.colors();
    for r in 0..n {
        let g = [d_out[3 * r], d_out[3 * r + 1], d_out[3 * r + 2]];
        if g.iter().all(|v| *v == T::zero()) {
            continue;
        }
        composite_backward(
            &sig[r * s..(r + 1) * s],
            &col[3 * r * s..3 * (r + 1) * s],
            &trace.t[r * (s + 1)..(r + 1) * (s + 1)],
            g,
            &mut d_sigma[r * s..(r + 1) * s],
            &mut d_color[3 * r * s..3 * (r + 1) * s],
        );
    }
    match trunk_grad {
        None => {
            cfg.opacity_shape()
                .backward(&field.opacity_head, &trace.opacity, &d_sigma, &mut grads.opacity, None);
            cfg.color_shape()
                .backward(&field.color_head, &trace.color, &d_color, &mut grads.color, None);
        }
        Some(tg) => {
            let w = cfg.trunk_width;
            let in_len = w + cfg.dir_len();
            let mut d_feat = vec![T::zero(); rows * w];
            cfg.opacity_shape().backward(
                &field.opacity_head,
                &trace.opacity,
                &d_sigma,
                &mut grads.opacity,
                Some(&mut d_feat),
            );
            let mut d_in = vec![T::zero(); rows * in_len];
            cfg.color_shape().backward(
                &field.color_head,
                &trace.color,
                &d_color,
                &mut grads.color,
                Some(&mut d_in),
            );
            for r in 0..rows {
                for j in 0..w {
                    d_feat[r * w + j] += d_in[r * in_len + j];
                }
            }
            cfg.trunk_shape()
                .backward(&field.trunk, &trace.trunk, &d_feat, tg, None);
        }
    }
}

/// Color of one ray with deterministic bin-start samples.
pub fn render_ray<T: Real>(field: &FieldParams<T>, ray: &Ray<T>) -> [T; 3] {
    render_batch::<T, ChaCha8Rng>(field, std::slice::from_ref(ray), None).color_of(0)
}

/// Renders every pixel of `camera`.
///
/// Depths are jittered only when the field is stratified and a seed is given;
/// the result is a pure function of its arguments either way.
pub fn render_image<T: Real>(field: &FieldParams<T>, camera: &CameraModel, seed: Option<u64>) -> ImageBuffer {
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<usize> = (0..w * h).collect();
    let jitter_seed = seed.filter(|_| field.config.stratified);
    let chunks: Vec<Vec<f64>> = pixels
        .par_chunks(IMAGE_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let rays: Vec<Ray<T>> = chunk.iter().map(|&p| Ray::from_camera(camera, p % w, p / w)).collect();
            let trace = match jitter_seed {
                Some(s) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(s ^ (ci as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    render_batch(field, &rays, Some(&mut rng))
                }
                None => render_batch::<T, ChaCha8Rng>(field, &rays, None),
            };
            trace.out.iter().map(|v| v.as_f64()).collect()
        })
        .collect();
    let data: Vec<f64> = chunks.into_iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageBuffer::from_vec(w, h, data).expect("rendered values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homogeneous(sigma: f64, color: [f64; 3], samples: usize) -> [f64; 3] {
        let t = sample_depths::<f64, ChaCha8Rng>(0.0, 1.0, samples, None);
        let sig = vec![sigma; samples];
        let col: Vec<f64> = (0..samples).flat_map(|_| color).collect();
        composite(&sig, &col, &t).0
    }

    #[test]
    fn transparent_medium_is_black() {
        assert_eq!(homogeneous(0.0, [0.7, 0.2, 0.9], 64), [0.0; 3]);
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let c = [0.8, 0.4, 0.2];
        let out = homogeneous(std::f64::consts::LN_2, c, 64);
        for ch in 0..3 {
            assert!((out[ch] - 0.5 * c[ch]).abs() < 1e-3);
        }
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let t = sample_depths::<f64, ChaCha8Rng>(0.0, 1.0, 8, None);
        let sig = [1e9, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let mut col = vec![0.1; 24];
        col[..3].copy_from_slice(&[0.9, 0.3, 0.6]);
        let (c, acc) = composite(&sig, &col, &t);
        for ch in 0..3 {
            assert!((c[ch] - col[ch]).abs() < 1e-6);
        }
        assert!(acc <= 1.0);
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = 12;
        let t = sample_depths(0.5, 2.0, s, Some(&mut rng));
        let sig: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..3.0)).collect();
        let col: Vec<f64> = (0..3 * s).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g = [0.3, -1.1, 0.7];
        let loss = |sig: &[f64], col: &[f64]| {
            let (c, _) = composite(sig, col, &t);
            c[0] * g[0] + c[1] * g[1] + c[2] * g[2]
        };
        let mut ds = vec![0.0; s];
        let mut dc = vec![0.0; 3 * s];
        composite_backward(&sig, &col, &t, g, &mut ds, &mut dc);
        let h = 1e-6;
        for k in 0..s {
            let mut p = sig.clone();
            p[k] += h;
            let mut m = sig.clone();
            m[k] -= h;
            let fd = (loss(&p, &col) - loss(&m, &col)) / (2.0 * h);
            assert!((fd - ds[k]).abs() < 1e-7, "sigma {k}: {fd} vs {}", ds[k]);
        }
        for k in 0..3 * s {
            let mut p = col.clone();
            p[k] += h;
            let mut m = col.clone();
            m[k] -= h;
            let fd = (loss(&sig, &p) - loss(&sig, &m)) / (2.0 * h);
            assert!((fd - dc[k]).abs() < 1e-7);
        }
    }
}
