//! Unified style features for image and text styles, cross-modal correction
//! of text features, and nearest-style matching.

mod catalog;
mod cfcm;
mod encoder;

pub use catalog::{catalog, pair_corpus, text_style_image, CatalogEntry, PairCorpus, Pattern, CATALOG_SIZE};
pub use cfcm::{correct_text_feature, pair_loss_grad, train_cfcm, CfcmConfig, CfcmParams, CfcmReport, FeaturePair};
pub use encoder::{tokenize, StyleEncoder, ToyEncoder, TOY_DIM};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;

/// Default cosine-distance threshold below which a style counts as known.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleFeature {
    pub vector: Vec<f64>,
    pub modality: Modality,
    /// Set once a text feature has received its cross-modal correction.
    pub corrected: bool,
}

impl StyleFeature {
    pub fn image(vector: Vec<f64>) -> Self {
        Self {
            vector,
            modality: Modality::Image,
            corrected: false,
        }
    }

    pub fn text(vector: Vec<f64>) -> Self {
        Self {
            vector,
            modality: Modality::Text,
            corrected: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// One style of the set. `payload` is an image path or the text itself.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEntry {
    pub id: String,
    pub modality: Modality,
    pub payload: String,
    pub feature: StyleFeature,
    /// Prediction head serving this style, once trained.
    pub head: Option<String>,
}

/// Styles sharing one feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSet {
    pub entries: Vec<StyleEntry>,
    pub dim: usize,
    pub threshold: f64,
}

impl StyleSet {
    pub fn new(dim: usize, threshold: f64) -> Self {
        Self {
            entries: Vec::new(),
            dim,
            threshold,
        }
    }

    pub fn push(&mut self, entry: StyleEntry) -> Result<()> {
        if entry.feature.dim() != self.dim {
            return Err(Error::Validation(format!(
                "style '{}' feature has dimension {}, set uses {}",
                entry.id,
                entry.feature.dim(),
                self.dim
            )));
        }
        if entry.feature.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("style '{}' feature is not finite", entry.id)));
        }
        if self.get(&entry.id).is_some() {
            return Err(Error::Contract(format!("style id '{}' already exists", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&StyleEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_text(&self) -> bool {
        self.entries.iter().any(|e| e.modality == Modality::Text)
    }
}

/// `1 - cos(f1, f2)`, in `[0, 2]`.
pub fn cosine_distance(f1: &[f64], f2: &[f64]) -> Result<f64> {
    if f1.len() != f2.len() {
        return Err(Error::Argument("features differ in dimension".into()));
    }
    let s1: f64 = f1.iter().map(|v| v * v).sum();
    let s2: f64 = f2.iter().map(|v| v * v).sum();
    if s1 == 0.0 || s2 == 0.0 {
        return Err(Error::Argument("cosine distance of a zero vector".into()));
    }
    let dot: f64 = f1.iter().zip(f2).map(|(a, b)| a * b).sum();
    // sqrt(s1 * s2) rather than |f1| |f2| keeps identical inputs at exactly 0
    Ok((1.0 - dot / (s1 * s2).sqrt()).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq)]
pub enum StyleMatch {
    /// An existing style lies within the threshold.
    Matched { id: String, distance: f64 },
    /// No style is close enough; `nearest` seeds the new style's head.
    New { nearest: String, distance: f64 },
}

impl StyleMatch {
    pub fn id(&self) -> &str {
        match self {
            StyleMatch::Matched { id, .. } => id,
            StyleMatch::New { nearest, .. } => nearest,
        }
    }

    pub fn distance(&self) -> f64 {
        match self {
            StyleMatch::Matched { distance, .. } | StyleMatch::New { distance, .. } => *distance,
        }
    }
}

/// Nearest style by cosine distance; ties go to the lexicographically
/// smallest id. Matched when the distance is below the set threshold.
pub fn match_style(f_new: &StyleFeature, set: &StyleSet) -> Result<StyleMatch> {
    let mut best: Option<(&str, f64)> = None;
    for e in &set.entries {
        let d = cosine_distance(&f_new.vector, &e.feature.vector)?;
        let better = match best {
            None => true,
            Some((id, bd)) => d < bd || (d == bd && e.id.as_str() < id),
        };
        if better {
            best = Some((&e.id, d));
        }
    }
    let (id, distance) = best.ok_or_else(|| Error::Argument("cannot match against an empty style set".into()))?;
    Ok(if distance < set.threshold {
        StyleMatch::Matched {
            id: id.to_string(),
            distance,
        }
    } else {
        StyleMatch::New {
            nearest: id.to_string(),
            distance,
        }
    })
}

/// One record of `styles.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRecord {
    pub id: String,
    pub modality: Modality,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

/// Reads `styles.json`. Image payloads are resolved relative to its directory.
pub fn load_style_records(path: &Path) -> Result<Vec<StyleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, "styles.json", e.to_string()))?;
    let records: Vec<StyleRecord> =
        serde_json::from_str(&text).map_err(|e| Error::load(path, "styles.json", e.to_string()))?;
    if records.is_empty() {
        return Err(Error::load(path, "styles.json", "no styles listed"));
    }
    for (i, r) in records.iter().enumerate() {
        if r.id.is_empty() {
            return Err(Error::load(path, format!("[{i}].id"), "empty id"));
        }
        if records[..i].iter().any(|o| o.id == r.id) {
            return Err(Error::load(
                path,
                format!("[{i}].id"),
                format!("duplicate id '{}'", r.id),
            ));
        }
    }
    Ok(records)
}

pub fn save_style_records(path: &Path, records: &[StyleRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, text.as_bytes())
}

/// Absolute path of an image payload listed in a style manifest at `manifest`.
pub fn payload_path(manifest: &Path, payload: &str) -> PathBuf {
    let p = Path::new(payload);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Raw (uncorrected) feature of a record, using an inline feature when present.
pub fn encode_record(record: &StyleRecord, manifest: &Path, encoder: &dyn StyleEncoder) -> Result<StyleFeature> {
    let vector = match (&record.feature, record.modality) {
        (Some(v), _) => v.clone(),
        (None, Modality::Image) => {
            encoder.encode_image(&ImageBuffer::load_png(&payload_path(manifest, &record.payload))?)
        }
        (None, Modality::Text) => encoder.encode_text(&record.payload)?,
    };
    Ok(StyleFeature {
        vector,
        modality: record.modality,
        corrected: false,
    })
}

/// Builds a set, correcting every text feature with `cfcm`.
///
/// Text styles without a correction module are a precondition failure.
pub fn build_style_set(
    records: &[StyleRecord],
    manifest: &Path,
    encoder: &dyn StyleEncoder,
    cfcm: Option<&CfcmParams>,
    threshold: f64,
) -> Result<StyleSet> {
    let mut set = StyleSet::new(encoder.dim(), threshold);
    for r in records {
        let mut feature = encode_record(r, manifest, encoder)?;
        if feature.modality == Modality::Text {
            let cfcm = cfcm
                .ok_or_else(|| Error::Precondition(format!("text style '{}' needs a trained CFCM checkpoint", r.id)))?;
            feature = correct_text_feature(&feature, cfcm)?;
        }
        set.push(StyleEntry {
            id: r.id.clone(),
            modality: r.modality,
            payload: r.payload.clone(),
            feature,
            head: None,
        })?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, v: Vec<f64>) -> StyleEntry {
        StyleEntry {
            id: id.into(),
            modality: Modality::Image,
            payload: String::new(),
            feature: StyleFeature::image(v),
            head: None,
        }
    }

    #[test]
    fn distance_hand_values() {
        assert_eq!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let d = cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-12);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn matching_rules() {
        let mut set = StyleSet::new(2, 0.1);
        set.push(entry("b", vec![1.0, 1.0])).unwrap();
        set.push(entry("a", vec![1.0, -1.0])).unwrap();
        let m = match_style(&StyleFeature::image(vec![1.0, 1.0]), &set).unwrap();
        assert_eq!(
            m,
            StyleMatch::Matched {
                id: "b".into(),
                distance: 0.0
            }
        );
        let m = match_style(&StyleFeature::image(vec![1.0, 0.0]), &set).unwrap();
        assert!(matches!(m, StyleMatch::New { ref nearest, .. } if nearest == "a"));
        assert!(set.push(entry("a", vec![0.0, 1.0])).is_err());
    }
}
