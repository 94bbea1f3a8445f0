//! Cross-modal correction network: a residual-free MLP whose output is added
//! to a text feature to pull it toward the paired image feature.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, StyleFeature};
use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::field::{insert_layers, read_layers};
use crate::nn::{Activation, Adam, LrSchedule, MlpShape};

pub const CHECKPOINT_KIND: &str = "cfcm";
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CfcmParams {
    pub dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl CfcmParams {
    pub fn shape_for(dim: usize, hidden: usize) -> MlpShape {
        MlpShape::new(dim, &[hidden, hidden], dim, Activation::Silu, Activation::Identity)
    }

    pub fn shape(&self) -> MlpShape {
        Self::shape_for(self.dim, self.hidden)
    }

    /// Random hidden layers and a zero output layer, so the initial correction is zero.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shape_for(dim, hidden).init(&mut rng, true);
        Self { dim, hidden, params }
    }

    /// The correction vector `F(x)` for a batch of rows.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.shape().forward(&self.params, x, rows).output().to_vec()
    }

    pub fn to_container(&self) -> NamedArrays {
        let mut c = NamedArrays::new();
        c.set_meta("kind", CHECKPOINT_KIND);
        c.set_meta("version", CHECKPOINT_VERSION);
        c.set_meta("dim", self.dim as u64);
        c.set_meta("hidden", self.hidden as u64);
        insert_layers(&mut c, "cfcm", &self.shape(), &self.params);
        c
    }

    pub fn from_container(c: &NamedArrays) -> Result<Self> {
        if c.meta_str("kind")? != CHECKPOINT_KIND {
            return Err(Error::Format("container does not hold a CFCM checkpoint".into()));
        }
        let version = c.meta_u64("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported CFCM checkpoint version {version}")));
        }
        let dim = c.meta_u64("dim")? as usize;
        let hidden = c.meta_u64("hidden")? as usize;
        let params = read_layers(c, "cfcm", &Self::shape_for(dim, hidden))?;
        Ok(Self { dim, hidden, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&NamedArrays::load(path)?)
    }
}

/// `f_t + F(f_t)`; refuses image features and already corrected ones.
pub fn correct_text_feature(f: &StyleFeature, cfcm: &CfcmParams) -> Result<StyleFeature> {
    if f.modality != Modality::Text {
        return Err(Error::Contract("only text features are corrected".into()));
    }
    if f.corrected {
        return Err(Error::Contract("feature has already been corrected".into()));
    }
    if f.dim() != cfcm.dim {
        return Err(Error::Argument(format!(
            "feature dimension {} does not match correction module dimension {}",
            f.dim(),
            cfcm.dim
        )));
    }
    let delta = cfcm.forward(&f.vector, 1);
    Ok(StyleFeature {
        vector: f.vector.iter().zip(&delta).map(|(a, b)| a + b).collect(),
        modality: Modality::Text,
        corrected: true,
    })
}

/// A text feature and the image feature it should move toward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfcmConfig {
    /// Hidden width as a multiple of the feature dimension.
    pub width_factor: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    /// Weight of the squared-distance term.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for CfcmConfig {
    fn default() -> Self {
        Self {
            width_factor: 4,
            steps: 2000,
            batch: 64,
            lr: LrSchedule::new(4e-3, 1.33e-4),
            lambda: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CfcmReport {
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    /// Cosine similarity of each validation pair before correction.
    pub val_similarity_before: Vec<f64>,
    pub val_similarity_after: Vec<f64>,
    pub split: [usize; 3],
}

impl CfcmReport {
    pub fn mean_before(&self) -> f64 {
        mean(&self.val_similarity_before)
    }

    pub fn mean_after(&self) -> f64 {
        mean(&self.val_similarity_after)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb).max(1e-300)
}

/// Similarity and squared-distance terms for one corrected feature `u`
/// against image feature `target`, plus the gradient of
/// `(1 - cos) + lambda * |target - u|^2` with respect to `u`.
pub fn pair_loss_grad(u: &[f64], target: &[f64], lambda: f64) -> (f64, f64, Vec<f64>) {
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let dot: f64 = u.iter().zip(target).map(|(a, b)| a * b).sum();
    let cos = dot / (nu * nt);
    let lm: f64 = u.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let grad = u
        .iter()
        .zip(target)
        .map(|(ui, ti)| {
            let d_cos = ti / (nu * nt) - cos * ui / (nu * nu);
            -d_cos + lambda * 2.0 * (ui - ti)
        })
        .collect();
    (1.0 - cos, lm, grad)
}

/// Mean combined loss of `cfcm` over `pairs`.
pub fn cfcm_loss(cfcm: &CfcmParams, pairs: &[&FeaturePair], lambda: f64) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let d = cfcm.dim;
    let x: Vec<f64> = pairs.iter().flat_map(|p| p.text.iter().copied()).collect();
    let delta = cfcm.forward(&x, pairs.len());
    let mut total = 0.0;
    for (r, p) in pairs.iter().enumerate() {
        let u: Vec<f64> = (0..d).map(|k| x[r * d + k] + delta[r * d + k]).collect();
        let (lc, lm, _) = pair_loss_grad(&u, &p.image, lambda);
        total += lc + lambda * lm;
    }
    total / pairs.len() as f64
}

/// Seeded 0.6 / 0.2 / 0.2 split; every nonempty corpus keeps at least one
/// training pair.
fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x73_706c_6974));
    let n_train = ((n as f64 * 0.6).round() as usize).clamp(1, n);
    let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

/// Fits the correction network with Adam on minibatches of the training split.
pub fn train_cfcm(pairs: &[FeaturePair], cfg: &CfcmConfig) -> Result<(CfcmParams, CfcmReport)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Argument("correction training needs at least one pair".into()))?;
    if cfg.lambda < 0.0 {
        return Err(Error::Argument("lambda must be nonnegative".into()));
    }
    let d = first.text.len();
    if pairs.iter().any(|p| p.text.len() != d || p.image.len() != d) {
        return Err(Error::Argument("all pair features must share one dimension".into()));
    }
    let (train, val, test) = split(pairs.len(), cfg.seed);
    let mut cfcm = CfcmParams::init(d, cfg.width_factor.max(1) * d, cfg.seed);
    let shape = cfcm.shape();
    let mut opt = Adam::new(cfcm.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6366_636d);
    let mut order = train.clone();
    let mut cursor = order.len();
    let batch = cfg.batch.max(1).min(train.len());
    let mut grad = vec![0.0; cfcm.params.len()];

    for step in 0..cfg.steps {
        let mut rows = Vec::with_capacity(batch);
        while rows.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            rows.push(order[cursor]);
            cursor += 1;
        }
        let x: Vec<f64> = rows.iter().flat_map(|&i| pairs[i].text.iter().copied()).collect();
        let trace = shape.forward(&cfcm.params, &x, rows.len());
        let delta = trace.output();
        let mut d_out = vec![0.0; rows.len() * d];
        let mut loss = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for (r, &i) in rows.iter().enumerate() {
            let u: Vec<f64> = (0..d).map(|k| x[r * d + k] + delta[r * d + k]).collect();
            let (lc, lm, g) = pair_loss_grad(&u, &pairs[i].image, cfg.lambda);
            loss += lc + cfg.lambda * lm;
            for k in 0..d {
                d_out[r * d + k] = g[k] * scale;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "train_cfcm",
                step,
            });
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        shape.backward(&cfcm.params, &trace, &d_out, &mut grad, None);
        opt.step(&mut cfcm.params, &grad, cfg.lr.at(step, cfg.steps));
    }

    let refs = |ids: &[usize]| ids.iter().map(|&i| &pairs[i]).collect::<Vec<_>>();
    let similarity = |ids: &[usize], corrected: bool| -> Vec<f64> {
        ids.iter()
            .map(|&i| {
                let p = &pairs[i];
                if corrected {
                    let delta = cfcm.forward(&p.text, 1);
                    let u: Vec<f64> = p.text.iter().zip(&delta).map(|(a, b)| a + b).collect();
                    cosine(&u, &p.image)
                } else {
                    cosine(&p.text, &p.image)
                }
            })
            .collect()
    };
    let report = CfcmReport {
        train_loss: cfcm_loss(&cfcm, &refs(&train), cfg.lambda),
        val_loss: cfcm_loss(&cfcm, &refs(&val), cfg.lambda),
        test_loss: cfcm_loss(&cfcm, &refs(&test), cfg.lambda),
        val_similarity_before: similarity(&val, false),
        val_similarity_after: similarity(&val, true),
        split: [train.len(), val.len(), test.len()],
    };
    Ok((cfcm, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_module_is_identity_and_contract_holds() {
        let cfcm = CfcmParams::init(4, 16, 1);
        let f = StyleFeature::text(vec![0.1, -0.5, 0.3, 0.2]);
        let g = correct_text_feature(&f, &cfcm).unwrap();
        assert_eq!(g.vector, f.vector);
        assert!(g.corrected);
        assert!(correct_text_feature(&g, &cfcm).is_err());
        assert!(correct_text_feature(&StyleFeature::image(vec![0.0; 4]), &cfcm).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let u = [0.3, -0.2, 0.9, 0.1];
        let t = [0.5, 0.1, 0.4, -0.3];
        let (_, _, g) = pair_loss_grad(&u, &t, 0.5);
        let f = |u: &[f64]| {
            let (lc, lm, _) = pair_loss_grad(u, &t, 0.5);
            lc + 0.5 * lm
        };
        for k in 0..4 {
            let mut p = u;
            p[k] += 1e-6;
            let mut m = u;
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn split_proportions() {
        let (a, b, c) = split(10, 0);
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let (a, b, c) = split(1, 0);
        assert_eq!((a.len(), b.len(), c.len()), (1, 0, 0));
    }
}
