//! Multi-view consistent supervision: flow estimation, backward warping,
//! occlusion masks, reference-view choice, the blend that propagates the
//! reference view's stylized details, and the training loss against it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::scalar::Real;
use crate::scene::FlowField;
use crate::stylizer::StylizedView;

/// Side length of the block-matching patch; offsets span `-4..=3`.
pub const PATCH: usize = 8;
/// Largest displacement searched per axis.
pub const SEARCH_RADIUS: i64 = 8;
/// Default forward-backward consistency threshold in pixels.
pub const DEFAULT_TAU: f64 = 1.0;

/// Summed-area table of a per-pixel cost over a `w x h` grid.
struct Integral {
    w: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl Integral {
    fn new(w: usize, h: usize, cost: &[f64], valid: &[bool]) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        let mut counts = vec![0u32; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0.0;
            let mut row_count = 0;
            for x in 0..w {
                if valid[y * w + x] {
                    row_sum += cost[y * w + x];
                    row_count += 1;
                }
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row_sum;
                counts[(y + 1) * stride + x + 1] = counts[y * stride + x + 1] + row_count;
            }
        }
        Self { w, sums, counts }
    }

    /// Sum and count over the half-open box `[x0, x1) x [y0, y1)`.
    fn query(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> (f64, u32) {
        let s = self.w + 1;
        let sum = self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0];
        let count =
            self.counts[y1 * s + x1] + self.counts[y0 * s + x0] - self.counts[y0 * s + x1] - self.counts[y1 * s + x0];
        (sum, count)
    }
}

/// Candidate displacements in tie-break order: smallest squared length first,
/// then row-major `(dy, dx)`.
fn search_order() -> Vec<(i64, i64)> {
    let mut d: Vec<(i64, i64)> = (-SEARCH_RADIUS..=SEARCH_RADIUS)
        .flat_map(|dy| (-SEARCH_RADIUS..=SEARCH_RADIUS).map(move |dx| (dy, dx)))
        .collect();
    d.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    d
}

/// Dense integer block-matching flow from `a` to `b`.
///
/// For each pixel the patch around it in `a` is compared with the displaced
/// patch in `b` by mean squared difference over the pixels both patches keep
/// inside the image. The first displacement in [`search_order`] reaching the
/// minimum wins, so flat regions resolve to zero flow.
pub fn estimate_flow(a: &ImageBuffer, b: &ImageBuffer) -> Result<FlowField> {
    if a.dims() != b.dims() {
        return Err(Error::Argument("flow estimation needs images of equal size".into()));
    }
    let (w, h) = a.dims();
    let n = w * h;
    let mut best = vec![f64::INFINITY; n];
    let mut flow = FlowField::zeros(w, h, 0, 1);
    let mut cost = vec![0.0; n];
    let mut valid = vec![false; n];
    let half = (PATCH / 2) as i64;
    for (dy, dx) in search_order() {
        for y in 0..h {
            for x in 0..w {
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                let i = y * w + x;
                if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                    valid[i] = false;
                    continue;
                }
                let pa = a.get(x, y);
                let pb = b.get(tx as usize, ty as usize);
                cost[i] = (0..3).map(|c| (pa[c] - pb[c]) * (pa[c] - pb[c])).sum();
                valid[i] = true;
            }
        }
        let table = Integral::new(w, h, &cost, &valid);
        for y in 0..h {
            let y0 = (y as i64 - half).max(0) as usize;
            let y1 = ((y as i64 + half) as usize).min(h);
            for x in 0..w {
                let x0 = (x as i64 - half).max(0) as usize;
                let x1 = ((x as i64 + half) as usize).min(w);
                let (sum, count) = table.query(x0, y0, x1, y1);
                if count == 0 {
                    continue;
                }
                let score = sum / f64::from(count);
                let i = y * w + x;
                if score < best[i] {
                    best[i] = score;
                    flow.set(x, y, [dx as f64, dy as f64], true);
                }
            }
        }
    }
    Ok(flow)
}

/// Bilinear lookup with zero outside the image.
fn sample_bilinear(image: &ImageBuffer, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = image.dims();
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let mut out = [0.0; 3];
    for (ox, oy, wt) in [
        (0.0, 0.0, (1.0 - ax) * (1.0 - ay)),
        (1.0, 0.0, ax * (1.0 - ay)),
        (0.0, 1.0, (1.0 - ax) * ay),
        (1.0, 1.0, ax * ay),
    ] {
        if wt == 0.0 {
            continue;
        }
        let (sx, sy) = (x0 + ox, y0 + oy);
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            continue;
        }
        let p = image.get(sx as usize, sy as usize);
        for c in 0..3 {
            out[c] += wt * p[c];
        }
    }
    out
}

/// `out(p) = image(p + flow(p))`, bilinear, zero outside the image.
pub fn backward_warp(image: &ImageBuffer, flow: &FlowField) -> Result<ImageBuffer> {
    if image.dims() != (flow.width, flow.height) {
        return Err(Error::Argument("warp flow and image sizes differ".into()));
    }
    let (w, h) = image.dims();
    Ok(ImageBuffer::from_fn(w, h, |x, y| {
        let f = flow.get(x, y);
        sample_bilinear(image, x as f64 + f[0], y as f64 + f[1])
    }))
}

/// Binary warp-validity mask between a source view and a reference view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub src: usize,
    pub reference: usize,
    pub values: Vec<u8>,
    pub masked_ratio: f64,
}

impl OcclusionMask {
    pub fn from_values(width: usize, height: usize, src: usize, reference: usize, values: Vec<u8>) -> Self {
        let masked_ratio = values.iter().map(|v| f64::from(*v)).sum::<f64>() / values.len().max(1) as f64;
        Self {
            width,
            height,
            src,
            reference,
            values,
            masked_ratio,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::from_values(width, height, 0, 1, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] != 0
    }
}

/// Forward-backward consistency: a pixel is kept when its forward target stays
/// in the image, both flows are valid there, and the round trip returns within
/// `tau` pixels.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField, tau: f64) -> Result<OcclusionMask> {
    if (fwd.width, fwd.height) != (bwd.width, bwd.height) {
        return Err(Error::Argument("forward and backward flows differ in size".into()));
    }
    let (w, h) = (fwd.width, fwd.height);
    let mut values = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            if !fwd.is_valid(x, y) {
                continue;
            }
            let f = fwd.get(x, y);
            let (tx, ty) = (x as f64 + f[0], y as f64 + f[1]);
            let Some(b) = bwd.sample(tx, ty) else {
                continue;
            };
            let (rx, ry) = (tx.round() as usize, ty.round() as usize);
            if !bwd.is_valid(rx, ry) {
                continue;
            }
            let (ex, ey) = (f[0] + b[0], f[1] + b[1]);
            if (ex * ex + ey * ey).sqrt() < tau {
                values[y * w + x] = 1;
            }
        }
    }
    Ok(OcclusionMask::from_values(w, h, fwd.src, fwd.dst, values))
}

/// View whose masks against all other views have the largest mean kept
/// ratio. `ratios[j][r]` is the kept ratio of view `j` warped to candidate
/// reference `r` (diagonal ignored). Ties go to the smallest id.
pub fn select_reference_view(ratios: &[Vec<f64>]) -> Result<usize> {
    let n = ratios.len();
    if n < 2 {
        return Err(Error::Argument("reference selection needs at least 2 views".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for r in 0..n {
        let mean = (0..n).filter(|&j| j != r).map(|j| ratios[j][r]).sum::<f64>() / (n - 1) as f64;
        if mean > best.1 {
            best = (r, mean);
        }
    }
    Ok(best.0)
}

/// Reconstructed supervision of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionEntry {
    pub view: usize,
    /// Independently stylized image.
    pub stylized: ImageBuffer,
    /// Blend of the stylized view and the warped stylized reference.
    pub reconstructed: ImageBuffer,
    /// `None` for the reference view.
    pub mask: Option<OcclusionMask>,
    pub flow: Option<FlowField>,
}

/// Consistent supervision for one style over all views.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionPack {
    pub style_id: String,
    pub reference: usize,
    pub entries: Vec<SupervisionEntry>,
}

impl SupervisionPack {
    pub fn target(&self, view: usize) -> &ImageBuffer {
        &self.entries[view].reconstructed
    }
}

/// Per-pixel blend `(1 - M) I + M W(I_ref)`.
pub fn blend(stylized: &ImageBuffer, warped_ref: &ImageBuffer, mask: &OcclusionMask) -> ImageBuffer {
    let (w, h) = stylized.dims();
    ImageBuffer::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            warped_ref.get(x, y)
        } else {
            stylized.get(x, y)
        }
    })
}

/// Builds the pack from independently stylized views, star flows
/// `flows[j]` from view `j` to the reference, and the matching masks.
pub fn reconstruct_supervision(
    stylized: &[StylizedView],
    reference: usize,
    flows: &[Option<FlowField>],
    masks: &[Option<OcclusionMask>],
) -> Result<SupervisionPack> {
    let n = stylized.len();
    if reference >= n {
        return Err(Error::Argument(format!("reference view {reference} out of range")));
    }
    if flows.len() != n || masks.len() != n {
        return Err(Error::Config("flows and masks must have one slot per view".into()));
    }
    let ref_image = &stylized[reference].image;
    let mut entries = Vec::with_capacity(n);
    for (j, sv) in stylized.iter().enumerate() {
        if j == reference {
            entries.push(SupervisionEntry {
                view: j,
                stylized: sv.image.clone(),
                reconstructed: sv.image.clone(),
                mask: None,
                flow: None,
            });
            continue;
        }
        let flow = flows[j]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing flow from view {j} to reference {reference}")))?;
        let mask = masks[j]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing mask for view {j}")))?;
        let warped = backward_warp(ref_image, flow)?;
        entries.push(SupervisionEntry {
            view: j,
            stylized: sv.image.clone(),
            reconstructed: blend(&sv.image, &warped, mask),
            mask: Some(mask.clone()),
            flow: Some(flow.clone()),
        });
    }
    Ok(SupervisionPack {
        style_id: stylized.first().map(|s| s.style_id.clone()).unwrap_or_default(),
        reference,
        entries,
    })
}

/// Mean over the batch of squared color residual norms. Both slices hold
/// `3` values per ray.
pub fn mscl_loss<T: Real>(predicted: &[T], targets: &[T]) -> Result<T> {
    if predicted.len() != targets.len() || predicted.is_empty() || !predicted.len().is_multiple_of(3) {
        return Err(Error::Argument(
            "loss needs equal, nonempty batches of RGB triples".into(),
        ));
    }
    let m = T::lit((predicted.len() / 3) as f64);
    let sum: T = predicted.iter().zip(targets).map(|(p, t)| (*p - *t) * (*p - *t)).sum();
    Ok(sum / m)
}

/// Gradient of [`mscl_loss`] with respect to the predictions.
pub fn mscl_grad<T: Real>(predicted: &[T], targets: &[T]) -> Vec<T> {
    let scale = T::lit(2.0 / (predicted.len() / 3) as f64);
    predicted.iter().zip(targets).map(|(p, t)| (*p - *t) * scale).collect()
}
