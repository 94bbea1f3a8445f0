//! Consistency and fidelity metrics over stylized renders.

use crate::consistency::{backward_warp, blend, OcclusionMask};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::scene::FlowField;
use crate::stylizer::{Codec, FeatureMap};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Ordered renders with flows and masks between neighbours:
/// `flows[i]` and `masks[i]` relate view `i` to view `i + 1`.
#[derive(Clone, Debug)]
pub struct ViewSequence {
    pub images: Vec<ImageBuffer>,
    pub flows: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
}

impl ViewSequence {
    pub fn new(images: Vec<ImageBuffer>, flows: Vec<FlowField>, masks: Vec<OcclusionMask>) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::Argument("a view sequence needs at least 2 images".into()));
        }
        if flows.len() != images.len() - 1 || masks.len() != images.len() - 1 {
            return Err(Error::Argument(
                "a view sequence needs one flow and mask per neighbouring pair".into(),
            ));
        }
        let dims = images[0].dims();
        if images.iter().any(|i| i.dims() != dims)
            || flows.iter().any(|f| (f.width, f.height) != dims)
            || masks.iter().any(|m| (m.width, m.height) != dims)
        {
            return Err(Error::Argument("view sequence members differ in size".into()));
        }
        Ok(Self { images, flows, masks })
    }

    /// The blend of view `i` with view `i + 1` warped onto it.
    pub fn reconstruction(&self, i: usize) -> ImageBuffer {
        let warped = backward_warp(&self.images[i + 1], &self.flows[i]).expect("sizes checked on construction");
        blend(&self.images[i], &warped, &self.masks[i])
    }

    pub fn pairs(&self) -> usize {
        self.images.len() - 1
    }
}

fn mean_squared(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64
}

/// Per-pair warping error, normalized per pixel and channel.
pub fn twe_pairs(seq: &ViewSequence) -> Vec<f64> {
    (0..seq.pairs())
        .map(|i| mean_squared(&seq.images[i], &seq.reconstruction(i)))
        .collect()
}

/// Mean warping error over neighbouring pairs.
pub fn twe(seq: &ViewSequence) -> f64 {
    let p = twe_pairs(seq);
    p.iter().sum::<f64>() / p.len() as f64
}

fn unit_features(f: &FeatureMap) -> Vec<f64> {
    let n = f.height * f.width;
    let mut out = f.data.clone();
    for p in 0..n {
        let norm = (0..f.channels).map(|c| f.data[c * n + p].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in 0..f.channels {
                out[c * n + p] /= norm;
            }
        }
    }
    out
}

/// Feature-space distance: per position, the squared difference of the two
/// unit-normalized channel vectors, averaged over positions.
pub fn perceptual_distance(a: &ImageBuffer, b: &ImageBuffer, codec: &dyn Codec) -> f64 {
    let fa = codec.encode(a);
    let fb = codec.encode(b);
    let (ua, ub) = (unit_features(&fa), unit_features(&fb));
    let n = (fa.height * fa.width).max(1) as f64;
    ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub fn warped_perceptual_pairs(seq: &ViewSequence, codec: &dyn Codec) -> Vec<f64> {
    (0..seq.pairs())
        .map(|i| perceptual_distance(&seq.images[i], &seq.reconstruction(i), codec))
        .collect()
}

/// Mean feature-space warping distance over neighbouring pairs.
pub fn warped_perceptual(seq: &ViewSequence, codec: &dyn Codec) -> f64 {
    let p = warped_perceptual_pairs(seq, codec);
    p.iter().sum::<f64>() / p.len() as f64
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let mse = mean_squared(a, b);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean structural similarity over all 8x8 windows (stride 1) and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let n = (ww * wh) as f64;
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let va = a.get(x, y)[c];
                        let vb = b.get(x, y)[c];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
