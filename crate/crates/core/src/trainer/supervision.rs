//! Pregenerated, cross-view consistent supervision with an on-disk cache.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{
    estimate_flow, occlusion_mask, reconstruct_supervision, select_reference_view, OcclusionMask, SupervisionEntry,
    SupervisionPack,
};
use crate::container::{write_atomic, NamedArrays};
use crate::error::{Error, Result};
use crate::image_buf::{hex, load_gray_png, save_gray_png, ImageBuffer};
use crate::scene::{ground_truth_flow, FlowField, SceneBundle};
use crate::stylizer::{adain_transfer, Codec, StylizedView};

/// Bumped whenever the cached file set or its meaning changes.
const CACHE_FORMAT: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Exact correspondences from the scene's analytic geometry.
    GroundTruth,
    /// Block matching on the photo-real views.
    BlockMatching,
}

/// Star flows and masks of every view against the selected reference.
#[derive(Clone, Debug)]
pub struct SceneFlows {
    pub source: FlowSource,
    pub reference: usize,
    /// `ratios[j][r]`: kept ratio of view `j` warped to view `r`.
    pub ratios: Vec<Vec<f64>>,
    /// `to_ref[j]`: flow from view `j` to the reference (`None` at the reference).
    pub to_ref: Vec<Option<FlowField>>,
    pub masks: Vec<Option<OcclusionMask>>,
}

fn pair_flow(scene: &SceneBundle, source: FlowSource, a: usize, b: usize) -> Result<FlowField> {
    match source {
        FlowSource::GroundTruth => ground_truth_flow(scene, a, b),
        FlowSource::BlockMatching => {
            let mut f = estimate_flow(&scene.views[a].image, &scene.views[b].image)?;
            f.src = a;
            f.dst = b;
            Ok(f)
        }
    }
}

/// Flows between all view pairs, reference selection, and star masks.
/// Ground-truth flow is used whenever the scene carries geometry.
pub fn compute_scene_flows(scene: &SceneBundle, tau: f64) -> Result<SceneFlows> {
    let n = scene.len();
    let source = if scene.gt_flow_available() {
        FlowSource::GroundTruth
    } else {
        FlowSource::BlockMatching
    };
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let flows: Vec<FlowField> = pairs
        .par_iter()
        .map(|&(a, b)| pair_flow(scene, source, a, b))
        .collect::<Result<_>>()?;
    let index = |a: usize, b: usize| a * (n - 1) + if b > a { b - 1 } else { b };
    let masks: Vec<OcclusionMask> = pairs
        .par_iter()
        .map(|&(a, b)| occlusion_mask(&flows[index(a, b)], &flows[index(b, a)], tau))
        .collect::<Result<_>>()?;
    let mut ratios = vec![vec![0.0; n]; n];
    for &(a, b) in &pairs {
        ratios[a][b] = masks[index(a, b)].masked_ratio;
    }
    let reference = select_reference_view(&ratios)?;
    let to_ref = (0..n)
        .map(|j| (j != reference).then(|| flows[index(j, reference)].clone()))
        .collect();
    let star_masks = (0..n)
        .map(|j| (j != reference).then(|| masks[index(j, reference)].clone()))
        .collect();
    Ok(SceneFlows {
        source,
        reference,
        ratios,
        to_ref,
        masks: star_masks,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    /// Cache entries that existed but could not be read back.
    pub corrupt: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionOptions {
    /// Forward-backward threshold in pixels.
    pub tau: f64,
    /// `None` disables the disk cache.
    pub cache_root: Option<PathBuf>,
}

impl Default for SupervisionOptions {
    fn default() -> Self {
        Self {
            tau: crate::consistency::DEFAULT_TAU,
            cache_root: None,
        }
    }
}

/// Style image to stylize every view with.
#[derive(Clone, Debug)]
pub struct StyleSource {
    pub id: String,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheManifest {
    format: u64,
    key: String,
    scene_hash: String,
    style_checksum: String,
    codec: String,
    tau: f64,
    flow_source: FlowSource,
    reference: usize,
    views: usize,
}

fn cache_key(scene_hash: &str, style: &ImageBuffer, codec: &str, tau: f64) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_FORMAT.to_le_bytes());
    h.update(scene_hash.as_bytes());
    h.update(style.checksum().as_bytes());
    h.update(codec.as_bytes());
    h.update(tau.to_le_bytes());
    hex(&h.finalize())
}

/// Cache directory of one style: `<root>/<scene_id>/<style_id>`.
pub fn cache_dir(root: &Path, scene_id: &str, style_id: &str) -> PathBuf {
    root.join(scene_id).join(style_id)
}

/// Stylizes every view, reconstructs consistent targets against the
/// reference, and quantizes all images to 8 bits so a cache hit returns
/// exactly what a fresh run would.
fn build_pack(
    scene: &SceneBundle,
    flows: &SceneFlows,
    style: &StyleSource,
    codec: &dyn Codec,
) -> Result<SupervisionPack> {
    let stylized: Vec<StylizedView> = scene
        .views
        .par_iter()
        .enumerate()
        .map(|(i, v)| StylizedView {
            view: i,
            style_id: style.id.clone(),
            image: adain_transfer(&v.image, &style.image, codec).quantized(),
        })
        .collect();
    let mut pack = reconstruct_supervision(&stylized, flows.reference, &flows.to_ref, &flows.masks)?;
    pack.style_id = style.id.clone();
    for e in &mut pack.entries {
        e.reconstructed = e.reconstructed.quantized();
    }
    Ok(pack)
}

fn write_pack(dir: &Path, pack: &SupervisionPack, manifest: &CacheManifest) -> Result<()> {
    let mut flows = NamedArrays::new();
    flows.set_meta("kind", "flows");
    for e in &pack.entries {
        let i = e.view;
        e.stylized.save_png(&dir.join(format!("v{i:03}.png")))?;
        e.reconstructed.save_png(&dir.join(format!("r{i:03}.png")))?;
        if let (Some(m), Some(f)) = (&e.mask, &e.flow) {
            let values: Vec<f64> = m.values.iter().map(|v| f64::from(*v)).collect();
            save_gray_png(&dir.join(format!("m{i:03}.png")), m.width, m.height, &values)?;
            flows.insert(format!("flow/{i}"), &[f.height, f.width, 2], f.data());
            let valid: Vec<f64> = f.validity().iter().map(|v| f64::from(u8::from(*v))).collect();
            flows.insert(format!("valid/{i}"), &[f.height, f.width], &valid);
        }
    }
    flows.save(&dir.join("flows.bin"))?;
    // the manifest goes last: a directory without one is never a hit
    let text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: dir.join("manifest.json"),
        source,
    })?;
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

fn read_manifest(dir: &Path) -> Option<CacheManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn read_pack(dir: &Path, style_id: &str, manifest: &CacheManifest, dims: (usize, usize)) -> Result<SupervisionPack> {
    let (w, h) = dims;
    let flows = NamedArrays::load(&dir.join("flows.bin"))?;
    let mut entries = Vec::with_capacity(manifest.views);
    for i in 0..manifest.views {
        let stylized = ImageBuffer::load_png(&dir.join(format!("v{i:03}.png")))?;
        let reconstructed = ImageBuffer::load_png(&dir.join(format!("r{i:03}.png")))?;
        if stylized.dims() != dims || reconstructed.dims() != dims {
            return Err(Error::Format(format!("cached view {i} has the wrong size")));
        }
        let (mask, flow) = if i == manifest.reference {
            (None, None)
        } else {
            let (mw, mh, values) = load_gray_png(&dir.join(format!("m{i:03}.png")))?;
            if (mw, mh) != dims {
                return Err(Error::Format(format!("cached mask {i} has the wrong size")));
            }
            let values = values.iter().map(|v| u8::from(*v >= 0.5)).collect();
            let data: Vec<f64> = flows.get_vec(&format!("flow/{i}"), w * h * 2)?;
            let valid: Vec<f64> = flows.get_vec(&format!("valid/{i}"), w * h)?;
            let valid = valid.iter().map(|v| *v != 0.0).collect();
            (
                Some(OcclusionMask::from_values(w, h, i, manifest.reference, values)),
                Some(FlowField::from_parts(w, h, i, manifest.reference, data, valid)?),
            )
        };
        entries.push(SupervisionEntry {
            view: i,
            stylized,
            reconstructed,
            mask,
            flow,
        });
    }
    Ok(SupervisionPack {
        style_id: style_id.to_string(),
        reference: manifest.reference,
        entries,
    })
}

/// One supervision pack per style, in input order.
///
/// With a cache root, each style is looked up by a content hash over the
/// scene, the style image, the codec and `tau`; hits are read back from
/// disk, misses are computed and written. Unreadable entries are rebuilt
/// and reported in [`CacheStats::warnings`].
pub fn pregenerate_supervision(
    scene: &SceneBundle,
    styles: &[StyleSource],
    codec: &dyn Codec,
    opts: &SupervisionOptions,
) -> Result<(Vec<SupervisionPack>, CacheStats)> {
    scene.validate()?;
    if !(opts.tau > 0.0) {
        return Err(Error::Argument("tau must be positive".into()));
    }
    let scene_hash = scene.content_hash();
    let codec_key = codec.cache_key();
    let mut stats = CacheStats::default();
    let mut flows: Option<SceneFlows> = None;
    let mut packs = Vec::with_capacity(styles.len());
    for style in styles {
        let key = cache_key(&scene_hash, &style.image, &codec_key, opts.tau);
        let dir = opts
            .cache_root
            .as_ref()
            .map(|root| cache_dir(root, &scene.scene_id, &style.id));
        if let Some(dir) = &dir {
            if let Some(m) = read_manifest(dir).filter(|m| m.key == key && m.format == CACHE_FORMAT) {
                match read_pack(dir, &style.id, &m, scene.dims()) {
                    Ok(pack) => {
                        stats.hits += 1;
                        packs.push(pack);
                        continue;
                    }
                    Err(e) => {
                        let msg = format!("cache entry {} unreadable, regenerating: {e}", dir.display());
                        log::warn!("{msg}");
                        stats.corrupt += 1;
                        stats.warnings.push(msg);
                    }
                }
            }
        }
        stats.misses += 1;
        if flows.is_none() {
            flows = Some(compute_scene_flows(scene, opts.tau)?);
        }
        let f = flows.as_ref().expect("computed above");
        let pack = build_pack(scene, f, style, codec)?;
        if let Some(dir) = &dir {
            let manifest = CacheManifest {
                format: CACHE_FORMAT,
                key,
                scene_hash: scene_hash.clone(),
                style_checksum: style.image.checksum(),
                codec: codec_key.clone(),
                tau: opts.tau,
                flow_source: f.source,
                reference: f.reference,
                views: scene.len(),
            };
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let _ = std::fs::remove_file(dir.join("manifest.json"));
            write_pack(dir, &pack, &manifest)?;
        }
        packs.push(pack);
    }
    Ok((packs, stats))
}
