//! Deterministic image and text encoders into one small feature space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;

/// Feature dimension of the built-in encoders.
pub const TOY_DIM: usize = 32;
const BINS: usize = 8;
const PROJECTIONS: usize = 8;
const GRADIENT_STATS: usize = 12;

/// Maps image and text payloads into a shared `dim`-dimensional space.
///
/// Implement this to plug in a pretrained joint embedding model.
pub trait StyleEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_image(&self, image: &ImageBuffer) -> Vec<f64>;
    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;
    /// Stable identifier used to invalidate caches.
    fn cache_key(&self) -> String;
}

/// Color histograms plus projected gradient statistics for images; signed
/// feature hashing of lowercase tokens for text.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub seed: u64,
    projection: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656e_636f_6465);
        let projection = (0..PROJECTIONS * GRADIENT_STATS)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Self { seed, projection }
    }
}

impl Default for ToyEncoder {
    fn default() -> Self {
        Self::new(0)
    }
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Per channel: mean and standard deviation of the gradient magnitude, and
/// mean absolute horizontal and vertical differences.
fn gradient_stats(image: &ImageBuffer) -> [f64; GRADIENT_STATS] {
    let (w, h) = image.dims();
    let mut out = [0.0; GRADIENT_STATS];
    for c in 0..3 {
        let mut mags = Vec::with_capacity(w * h);
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = image.get(x, y)[c];
                let gx = if x + 1 < w { image.get(x + 1, y)[c] - v } else { 0.0 };
                let gy = if y + 1 < h { image.get(x, y + 1)[c] - v } else { 0.0 };
                sx += gx.abs();
                sy += gy.abs();
                mags.push((gx * gx + gy * gy).sqrt());
            }
        }
        let n = mags.len() as f64;
        let mean = mags.iter().sum::<f64>() / n;
        let var = mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
        out[4 * c] = mean;
        out[4 * c + 1] = var.sqrt();
        out[4 * c + 2] = sx / n;
        out[4 * c + 3] = sy / n;
    }
    out
}

/// Seeded 64-bit hash of a token.
fn token_hash(seed: u64, token: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl StyleEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        TOY_DIM
    }

    fn encode_image(&self, image: &ImageBuffer) -> Vec<f64> {
        let mut v = vec![0.0; TOY_DIM];
        let n = image.pixel_count() as f64;
        for p in 0..image.pixel_count() {
            let rgb = image.get_index(p);
            for c in 0..3 {
                let bin = ((rgb[c] * BINS as f64) as usize).min(BINS - 1);
                v[c * BINS + bin] += 1.0 / n;
            }
        }
        let g = gradient_stats(image);
        for k in 0..PROJECTIONS {
            let row = &self.projection[k * GRADIENT_STATS..(k + 1) * GRADIENT_STATS];
            v[3 * BINS + k] = row.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        l2_normalize(&mut v);
        v
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Argument("text style must contain at least one word".into()));
        }
        let mut v = vec![0.0; TOY_DIM];
        for t in &tokens {
            let h = token_hash(self.seed, t);
            let idx = (h % TOY_DIM as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            // colliding tokens cancelled; fall back to the first token's slot
            let h = token_hash(self.seed, &tokens[0]);
            v[(h % TOY_DIM as u64) as usize] = 1.0;
        }
        l2_normalize(&mut v);
        Ok(v)
    }

    fn cache_key(&self) -> String {
        format!("toy:{}", self.seed)
    }
}
