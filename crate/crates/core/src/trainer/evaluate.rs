//! Consistency and fidelity evaluation of trained styles.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stylize::render_with_heads;
use super::supervision::FlowSource;
use super::write_json;
use crate::consistency::{estimate_flow, occlusion_mask, OcclusionMask, SupervisionPack};
use crate::container::write_atomic;
use crate::error::Result;
use crate::field::FieldParams;
use crate::metrics::{psnr, ssim, twe_pairs, warped_perceptual_pairs, ViewSequence};
use crate::mls::MlsParams;
use crate::scene::{flow_between, CameraModel, FlowField, SceneBundle};
use crate::stylizer::Codec;

/// Cameras to render for consistency metrics, with flows and masks between
/// neighbours computed from photo-real content.
#[derive(Clone, Debug)]
pub struct TestSequence {
    pub cameras: Vec<CameraModel>,
    pub flows: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
    pub source: FlowSource,
}

/// Midpoint cameras with exact flows when the scene has geometry; the
/// training cameras with block-matching flows otherwise.
pub fn test_sequence(scene: &SceneBundle, tau: f64) -> Result<TestSequence> {
    let (w, h) = scene.dims();
    let (cameras, pairs, source) = match &scene.geometry {
        Some(g) => {
            let cams = g.midpoint_cameras(scene.len(), w, h);
            let pairs: Vec<(FlowField, FlowField)> = (0..cams.len() - 1)
                .map(|i| {
                    (
                        flow_between(g, &cams[i], &cams[i + 1], i, i + 1),
                        flow_between(g, &cams[i + 1], &cams[i], i + 1, i),
                    )
                })
                .collect();
            (cams, pairs, FlowSource::GroundTruth)
        }
        None => {
            let pairs = (0..scene.len() - 1)
                .map(|i| {
                    let (a, b) = (&scene.views[i].image, &scene.views[i + 1].image);
                    let mut f = estimate_flow(a, b)?;
                    let mut g = estimate_flow(b, a)?;
                    (f.src, f.dst, g.src, g.dst) = (i, i + 1, i + 1, i);
                    Ok((f, g))
                })
                .collect::<Result<_>>()?;
            (scene.cameras(), pairs, FlowSource::BlockMatching)
        }
    };
    let masks = pairs
        .iter()
        .map(|(f, b)| occlusion_mask(f, b, tau))
        .collect::<Result<_>>()?;
    Ok(TestSequence {
        cameras,
        flows: pairs.into_iter().map(|(f, _)| f).collect(),
        masks,
        source,
    })
}

/// Metrics of one neighbouring pair of one style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub style_id: String,
    pub pair: usize,
    pub twe: f64,
    pub warped_perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMetrics {
    pub twe: f64,
    pub warped_perceptual: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Style-averaged metrics. Fidelity compares the render at the reference
/// view with that view's stylized image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub twe: f64,
    pub warped_perceptual: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Codec behind the perceptual proxy.
    pub backend: String,
    pub seed: u64,
    #[serde(skip)]
    pub per_style: BTreeMap<String, StyleMetrics>,
    #[serde(skip)]
    pub pairs: Vec<PairMetrics>,
}

impl EvalReport {
    pub fn write(&self, metrics: &Path, pairs: &Path) -> Result<()> {
        write_json(metrics, self)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pairs {
            w.serialize(p)
                .map_err(|e| crate::Error::Format(format!("pair metrics: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::Error::Format(format!("pair metrics: {e}")))?;
        write_atomic(pairs, &bytes)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// One style to evaluate: id, head, feature, supervision.
pub type EvalStyle<'a> = (String, String, Vec<f32>, &'a SupervisionPack);

pub fn evaluate_packs(
    field: &FieldParams<f32>,
    mls: &MlsParams<f32>,
    scene: &SceneBundle,
    seq: &TestSequence,
    styles: &[EvalStyle<'_>],
    codec: &dyn Codec,
    backend: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut per_style = BTreeMap::new();
    let mut pairs = Vec::new();
    for (id, head, feature, pack) in styles {
        let images = seq
            .cameras
            .iter()
            .map(|c| render_with_heads(field, mls, feature, head, c))
            .collect::<Result<Vec<_>>>()?;
        let vs = ViewSequence::new(images, seq.flows.clone(), seq.masks.clone())?;
        let t = twe_pairs(&vs);
        let p = warped_perceptual_pairs(&vs, codec);
        for (i, (a, b)) in t.iter().zip(&p).enumerate() {
            pairs.push(PairMetrics {
                style_id: id.clone(),
                pair: i,
                twe: *a,
                warped_perceptual: *b,
            });
        }
        let r = pack.reference;
        let render = render_with_heads(field, mls, feature, head, &scene.views[r].camera)?;
        let target = &pack.entries[r].stylized;
        per_style.insert(
            id.clone(),
            StyleMetrics {
                twe: mean(t.iter().copied()),
                warped_perceptual: mean(p.iter().copied()),
                psnr: psnr(&render, target)?,
                ssim: ssim(&render, target)?,
            },
        );
    }
    Ok(EvalReport {
        twe: mean(per_style.values().map(|m| m.twe)),
        warped_perceptual: mean(per_style.values().map(|m| m.warped_perceptual)),
        psnr: mean(per_style.values().map(|m| m.psnr)),
        ssim: mean(per_style.values().map(|m| m.ssim)),
        backend: backend.to_string(),
        seed,
        per_style,
        pairs,
    })
}
