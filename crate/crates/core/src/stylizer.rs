//! Adaptive instance normalization over a fixed, seeded convolutional codec.
//!
//! The encoder is two strided 3x3 convolutions with ReLU. Decoding is linear:
//! the feature-space change produced by the statistics transfer is mapped back
//! through the transposed convolutions and added to the content image, so a
//! style identical to the content reproduces the content exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image_buf::ImageBuffer;
use crate::scene::SceneBundle;

/// Floor applied to per-channel standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Channel-major `C x H x W` feature array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(image: &ImageBuffer) -> Self {
        let (w, h) = image.dims();
        let mut f = Self::zeros(3, h, w);
        for p in 0..w * h {
            let rgb = image.get_index(p);
            for c in 0..3 {
                f.data[c * w * h + p] = rgb[c];
            }
        }
        f
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Per-channel spatial mean and floored standard deviation.
pub fn channel_stats(features: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let n = (features.height * features.width) as f64;
    let mut mu = Vec::with_capacity(features.channels);
    let mut sigma = Vec::with_capacity(features.channels);
    for c in 0..features.channels {
        let p = features.plane(c);
        let m = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mu.push(m);
        sigma.push(var.sqrt().max(SIGMA_FLOOR));
    }
    (mu, sigma)
}

/// Renormalizes `content` to the channel statistics of `style`.
pub fn adain(content: &FeatureMap, style: &FeatureMap) -> FeatureMap {
    assert_eq!(content.channels, style.channels, "channel counts differ");
    let (mc, sc) = channel_stats(content);
    let (ms, ss) = channel_stats(style);
    let mut out = content.clone();
    for c in 0..content.channels {
        for v in out.plane_mut(c) {
            *v = ss[c] * (*v - mc[c]) / sc[c] + ms[c];
        }
    }
    out
}

/// An image encoder paired with a linear decoder of feature changes.
///
/// Implement this to plug in a pretrained codec; [`FeatureExtractor`] is the
/// built-in deterministic one.
pub trait Codec: Send + Sync {
    fn encode(&self, image: &ImageBuffer) -> FeatureMap;
    /// Maps a change in feature space to a change in image space
    /// (`3 * width * height` values, interleaved RGB).
    fn decode_delta(&self, delta: &FeatureMap, width: usize, height: usize) -> Vec<f64>;
    /// Stable identifier used to invalidate caches.
    fn cache_key(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    SeededConv,
    /// Features are the RGB planes themselves; decoding is the identity.
    Identity,
}

/// Built-in fixed codec, a pure function of its seed and widths.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub widths: [usize; 2],
    convs: Vec<Conv>,
    decode_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs x 3 x 3`
    weights: Vec<f64>,
}

impl Conv {
    fn seeded(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs * 9) as f64).sqrt();
        let weights = (0..outputs * inputs * 9)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
        }
    }

    fn out_dim(n: usize) -> usize {
        n.div_ceil(2)
    }

    /// Stride 2, padding 1, followed by ReLU.
    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (h, w) = (x.height, x.width);
        let (oh, ow) = (Self::out_dim(h), Self::out_dim(w));
        let mut y = FeatureMap::zeros(self.outputs, oh, ow);
        for o in 0..self.outputs {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..self.inputs {
                        let plane = x.plane(c);
                        let wk = &self.weights[(o * self.inputs + c) * 9..][..9];
                        for ky in 0..3 {
                            let yy = (2 * i + ky) as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = (2 * j + kx) as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += wk[ky * 3 + kx] * plane[yy as usize * w + xx as usize];
                            }
                        }
                    }
                    y.data[(o * oh + i) * ow + j] = acc.max(0.0);
                }
            }
        }
        y
    }

    /// Adjoint of the linear part of [`Conv::forward`] onto an `h x w` grid.
    fn transpose(&self, y: &FeatureMap, h: usize, w: usize) -> FeatureMap {
        let (oh, ow) = (y.height, y.width);
        let mut x = FeatureMap::zeros(self.inputs, h, w);
        for o in 0..self.outputs {
            for i in 0..oh {
                for j in 0..ow {
                    let g = y.data[(o * oh + i) * ow + j];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..self.inputs {
                        let wk = &self.weights[(o * self.inputs + c) * 9..][..9];
                        let plane = x.plane_mut(c);
                        for ky in 0..3 {
                            let yy = (2 * i + ky) as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = (2 * j + kx) as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                plane[yy as usize * w + xx as usize] += wk[ky * 3 + kx] * g;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl FeatureExtractor {
    pub fn seeded(seed: u64) -> Self {
        Self::seeded_with_widths(seed, [16, 32])
    }

    pub fn seeded_with_widths(seed: u64, widths: [usize; 2]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vec![
            Conv::seeded(3, widths[0], &mut rng),
            Conv::seeded(widths[0], widths[1], &mut rng),
        ];
        let mut fx = Self {
            kind: ExtractorKind::SeededConv,
            seed,
            widths,
            convs,
            decode_scale: 1.0,
        };
        fx.decode_scale = fx.calibrate();
        fx
    }

    pub fn identity() -> Self {
        Self {
            kind: ExtractorKind::Identity,
            seed: 0,
            widths: [3, 3],
            convs: Vec::new(),
            decode_scale: 1.0,
        }
    }

    /// Scale making a decoded feature change comparable in magnitude to the
    /// image change that produced it, measured on a fixed probe image.
    fn calibrate(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x70_726f_6265);
        let probe = ImageBuffer::from_fn(32, 32, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let base = ImageBuffer::filled(32, 32, [0.5; 3]);
        let f1 = self.encode(&probe);
        let f0 = self.encode(&base);
        let delta = FeatureMap {
            data: f1.data.iter().zip(&f0.data).map(|(a, b)| a - b).collect(),
            ..f1
        };
        let decoded = self.decode_unscaled(&delta, 32, 32);
        let image_norm: f64 = probe
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let decoded_norm = decoded.iter().map(|v| v * v).sum::<f64>().sqrt();
        if decoded_norm > 0.0 {
            image_norm / decoded_norm
        } else {
            1.0
        }
    }

    fn decode_unscaled(&self, delta: &FeatureMap, width: usize, height: usize) -> Vec<f64> {
        let mut dims = vec![(height, width)];
        for _ in 0..self.convs.len().saturating_sub(1) {
            let (h, w) = *dims.last().expect("nonempty");
            dims.push((Conv::out_dim(h), Conv::out_dim(w)));
        }
        let mut cur = delta.clone();
        for (conv, &(h, w)) in self.convs.iter().zip(&dims).rev() {
            cur = conv.transpose(&cur, h, w);
            for c in 0..cur.channels {
                let smooth = low_pass(cur.plane(c), w, h);
                cur.data[c * h * w..(c + 1) * h * w].copy_from_slice(&smooth);
            }
        }
        let n = width * height;
        let mut out = vec![0.0; 3 * n];
        for c in 0..3 {
            for p in 0..n {
                out[3 * p + c] = cur.data[c * n + p];
            }
        }
        out
    }
}

const LOW_PASS: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

/// Separable binomial blur with weights renormalized at the borders.
///
/// A transposed stride-2 convolution leaves a period-2 checkerboard at its
/// output scale; this removes it.
fn low_pass(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in LOW_PASS.iter().enumerate() {
                    let o = k as isize - 2;
                    let (xx, yy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if xx < 0 || yy < 0 || xx >= width as isize || yy >= height as isize {
                        continue;
                    }
                    acc += w * src[yy as usize * width + xx as usize];
                    wsum += w;
                }
                dst[y * width + x] = acc / wsum;
            }
        }
        dst
    };
    pass(&pass(plane, true), false)
}

impl Codec for FeatureExtractor {
    fn encode(&self, image: &ImageBuffer) -> FeatureMap {
        let mut f = FeatureMap::from_image(image);
        for conv in &self.convs {
            f = conv.forward(&f);
        }
        f
    }

    fn decode_delta(&self, delta: &FeatureMap, width: usize, height: usize) -> Vec<f64> {
        let mut out = self.decode_unscaled(delta, width, height);
        if self.decode_scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= self.decode_scale);
        }
        out
    }

    fn cache_key(&self) -> String {
        match self.kind {
            ExtractorKind::SeededConv => format!("seeded_conv:{}:{}x{}", self.seed, self.widths[0], self.widths[1]),
            ExtractorKind::Identity => "identity".to_string(),
        }
    }
}

/// Transfers the feature statistics of `style` onto `content` and decodes the
/// result, clipped to `[0, 1]`.
pub fn adain_transfer(content: &ImageBuffer, style: &ImageBuffer, codec: &dyn Codec) -> ImageBuffer {
    let fc = codec.encode(content);
    let fs = codec.encode(style);
    let target = adain(&fc, &fs);
    let delta = FeatureMap {
        data: target.data.iter().zip(&fc.data).map(|(t, c)| t - c).collect(),
        ..target
    };
    let (w, h) = content.dims();
    let d = codec.decode_delta(&delta, w, h);
    let data = content
        .data()
        .iter()
        .zip(&d)
        .map(|(c, v)| (c + v).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::from_vec(w, h, data).expect("stylized values are finite")
}

/// One independently stylized view.
#[derive(Clone, Debug, PartialEq)]
pub struct StylizedView {
    pub view: usize,
    pub style_id: String,
    pub image: ImageBuffer,
}

/// Stylizes every view on its own, which is what makes the results disagree
/// across views.
pub fn stylize_views(
    scene: &SceneBundle,
    style_id: &str,
    style_image: &ImageBuffer,
    codec: &dyn Codec,
) -> Vec<StylizedView> {
    scene
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| StylizedView {
            view: i,
            style_id: style_id.to_string(),
            image: adain_transfer(&v.image, style_image, codec),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(channels: usize, values: &[f64]) -> FeatureMap {
        FeatureMap {
            channels,
            height: 1,
            width: values.len() / channels,
            data: values.to_vec(),
        }
    }

    #[test]
    fn stats_of_constant_and_pair() {
        let (mu, sigma) = channel_stats(&map(1, &[0.3, 0.3, 0.3]));
        assert!((mu[0] - 0.3).abs() < 1e-15);
        assert_eq!(sigma[0], SIGMA_FLOOR);
        let (mu, sigma) = channel_stats(&map(2, &[0.0, 2.0, 5.0, 5.0]));
        assert_eq!((mu[0], sigma[0]), (1.0, 1.0));
        assert_eq!((mu[1], sigma[1]), (5.0, SIGMA_FLOOR));
    }

    #[test]
    fn adain_shifts_mean() {
        let out = adain(&map(1, &[0.0, 2.0]), &map(1, &[10.0, 12.0]));
        assert_eq!(out.data, vec![10.0, 12.0]);
    }

    #[test]
    fn transpose_is_adjoint_of_linear_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv::seeded(2, 3, &mut rng);
        let x = FeatureMap {
            channels: 2,
            height: 7,
            width: 5,
            data: (0..70).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let y = FeatureMap {
            channels: 3,
            height: 4,
            width: 3,
            data: (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        // linear part: drop the ReLU by comparing on the adjoint identity
        let lin = Conv {
            weights: conv.weights.clone(),
            ..conv.clone()
        };
        let mut ax = FeatureMap::zeros(3, 4, 3);
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = ((2 * i + ky) as isize - 1, (2 * j + kx) as isize - 1);
                                if (0..7).contains(&yy) && (0..5).contains(&xx) {
                                    acc += lin.weights[(o * 2 + c) * 9 + ky * 3 + kx]
                                        * x.data[(c * 7 + yy as usize) * 5 + xx as usize];
                                }
                            }
                        }
                    }
                    ax.data[(o * 4 + i) * 3 + j] = acc;
                }
            }
        }
        let aty = lin.transpose(&y, 7, 5);
        let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&aty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
