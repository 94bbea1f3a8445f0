//! Multi-head parameter prediction: a shared backbone maps a style feature
//! to a latent code, and one head per style maps that code to the packed
//! opacity and color head parameters of the radiance field.
//!
//! Packed layout (the head parameter vector): the opacity head's layers, then
//! the color head's layers; each layer is its weight matrix (row-major,
//! `outputs x inputs`) followed by its bias.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::field::{insert_layers, read_layers, FieldConfig, FieldParams};
use crate::nn::{Activation, Adam, LrSchedule, MlpShape, Trace};
use crate::scalar::{convert_slice, Real};

pub const CHECKPOINT_KIND: &str = "mls";
pub const CHECKPOINT_VERSION: u64 = 1;
pub const LAYOUT_VERSION: u64 = 1;

/// One named block of the packed vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Ordered block table of a head parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub blocks: Vec<LayoutBlock>,
    pub total: usize,
}

impl HeadLayout {
    pub fn for_config(cfg: &FieldConfig) -> Self {
        let mut blocks = Vec::new();
        let mut off = 0;
        for (prefix, shape) in [("opacity_head", cfg.opacity_shape()), ("color_head", cfg.color_shape())] {
            for (i, l) in shape.layers.iter().enumerate() {
                blocks.push(LayoutBlock {
                    name: format!("{prefix}/{i}/weight"),
                    shape: vec![l.outputs, l.inputs],
                    offset: off,
                });
                off += l.weight_count();
                blocks.push(LayoutBlock {
                    name: format!("{prefix}/{i}/bias"),
                    shape: vec![l.outputs],
                    offset: off,
                });
                off += l.outputs;
            }
        }
        Self { blocks, total: off }
    }
}

/// Flattened head parameters with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParamVector<T> {
    pub values: Vec<T>,
    pub layout: HeadLayout,
}

pub fn pack_heads<T: Real>(field: &FieldParams<T>) -> HeadParamVector<T> {
    let mut values = Vec::with_capacity(field.opacity_head.len() + field.color_head.len());
    values.extend_from_slice(&field.opacity_head);
    values.extend_from_slice(&field.color_head);
    HeadParamVector {
        values,
        layout: HeadLayout::for_config(&field.config),
    }
}

/// Copies `values` into the head blocks of `field`, leaving the trunk alone.
pub fn unpack_heads_into<T: Real>(values: &[T], field: &mut FieldParams<T>) -> Result<()> {
    let n_op = field.opacity_head.len();
    let expected = n_op + field.color_head.len();
    if values.len() != expected {
        return Err(Error::Contract(format!(
            "head vector has {} values, field heads need {expected}",
            values.len()
        )));
    }
    field.opacity_head.copy_from_slice(&values[..n_op]);
    field.color_head.copy_from_slice(&values[n_op..]);
    Ok(())
}

pub fn unpack_heads<T: Real>(values: &[T], field: &FieldParams<T>) -> Result<FieldParams<T>> {
    let mut out = field.clone();
    unpack_heads_into(values, &mut out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlsConfig {
    pub backbone_width: usize,
    pub head_width: usize,
}

impl Default for MlsConfig {
    fn default() -> Self {
        Self {
            backbone_width: 128,
            head_width: 128,
        }
    }
}

/// Shared backbone and per-style heads.
///
/// The backbone has four ReLU layers; the style feature is concatenated to
/// the input of the third. Its ReLU output is the latent code every head reads.
#[derive(Clone, Debug, PartialEq)]
pub struct MlsParams<T> {
    pub config: MlsConfig,
    /// Style feature dimension.
    pub dim: usize,
    pub layout: HeadLayout,
    pub backbone: Vec<T>,
    /// Heads in insertion order.
    pub heads: Vec<(String, Vec<T>)>,
    /// Set once a style has been added incrementally.
    pub backbone_frozen: bool,
}

/// Forward intermediates of one prediction.
pub struct MlsTrace<T> {
    front: Trace<T>,
    back: Trace<T>,
    head: Trace<T>,
    head_index: usize,
}

impl<T: Real> MlsTrace<T> {
    pub fn output(&self) -> &[T] {
        self.head.output()
    }

    pub fn latent(&self) -> &[T] {
        self.back.output()
    }

    /// Index into [`MlsParams::heads`] of the head that produced the output.
    pub fn head_index(&self) -> usize {
        self.head_index
    }
}

impl<T: Real> MlsParams<T> {
    fn front_shape(&self) -> MlpShape {
        let w = self.config.backbone_width;
        MlpShape::new(self.dim, &[w], w, Activation::Relu, Activation::Relu)
    }

    fn back_shape(&self) -> MlpShape {
        let w = self.config.backbone_width;
        MlpShape::new(w + self.dim, &[w], w, Activation::Relu, Activation::Relu)
    }

    pub fn head_shape(&self) -> MlpShape {
        MlpShape::new(
            self.config.backbone_width,
            &[self.config.head_width],
            self.layout.total,
            Activation::Relu,
            Activation::Identity,
        )
    }

    /// Random backbone and one random head per style id.
    pub fn init(config: MlsConfig, dim: usize, field: &FieldConfig, styles: &[String], seed: u64) -> Result<Self> {
        if dim == 0 || config.backbone_width == 0 || config.head_width == 0 {
            return Err(Error::Config("MLS dimensions must be positive".into()));
        }
        let mut mls = Self {
            config,
            dim,
            layout: HeadLayout::for_config(field),
            backbone: Vec::new(),
            heads: Vec::new(),
            backbone_frozen: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = mls.front_shape().init(&mut rng, false);
        backbone.extend(mls.back_shape().init::<T, _>(&mut rng, false));
        mls.backbone = backbone;
        for id in styles {
            if mls.head_index(id).is_some() {
                return Err(Error::Contract(format!("duplicate style id '{id}'")));
            }
            let head = mls.head_shape().init(&mut rng, false);
            mls.heads.push((id.clone(), head));
        }
        Ok(mls)
    }

    pub fn p(&self) -> usize {
        self.layout.total
    }

    pub fn head_index(&self, id: &str) -> Option<usize> {
        self.heads.iter().position(|(h, _)| h == id)
    }

    pub fn head(&self, id: &str) -> Option<&[T]> {
        self.head_index(id).map(|i| self.heads[i].1.as_slice())
    }

    pub fn head_ids(&self) -> Vec<String> {
        self.heads.iter().map(|(h, _)| h.clone()).collect()
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.head_index(id)
            .ok_or_else(|| Error::Lookup(format!("no prediction head for style '{id}'")))
    }

    fn front_len(&self) -> usize {
        self.front_shape().param_count()
    }

    pub fn forward(&self, feature: &[T], head: &str) -> Result<MlsTrace<T>> {
        let head_index = self.require(head)?;
        if feature.len() != self.dim {
            return Err(Error::Argument(format!(
                "style feature has dimension {}, MLS expects {}",
                feature.len(),
                self.dim
            )));
        }
        let split = self.front_len();
        let front = self.front_shape().forward(&self.backbone[..split], feature, 1);
        let mut skip = front.output().to_vec();
        skip.extend_from_slice(feature);
        let back = self.back_shape().forward(&self.backbone[split..], &skip, 1);
        let head = self.head_shape().forward(&self.heads[head_index].1, back.output(), 1);
        Ok(MlsTrace {
            front,
            back,
            head,
            head_index,
        })
    }

    /// `H_head(B(feature))`.
    pub fn predict(&self, feature: &[T], head: &str) -> Result<Vec<T>> {
        Ok(self.forward(feature, head)?.output().to_vec())
    }

    /// Accumulates gradients of the traced head into `head_grad` and, when
    /// given, of the backbone into `backbone_grad`.
    pub fn backward(&self, trace: &MlsTrace<T>, d_p: &[T], head_grad: &mut [T], backbone_grad: Option<&mut [T]>) {
        let w = self.config.backbone_width;
        let head = &self.heads[trace.head_index].1;
        let Some(bg) = backbone_grad else {
            self.head_shape().backward(head, &trace.head, d_p, head_grad, None);
            return;
        };
        let mut d_latent = vec![T::zero(); w];
        self.head_shape()
            .backward(head, &trace.head, d_p, head_grad, Some(&mut d_latent));
        let split = self.front_len();
        let (g_front, g_back) = bg.split_at_mut(split);
        let mut d_skip = vec![T::zero(); w + self.dim];
        self.back_shape().backward(
            &self.backbone[split..],
            &trace.back,
            &d_latent,
            g_back,
            Some(&mut d_skip),
        );
        self.front_shape()
            .backward(&self.backbone[..split], &trace.front, &d_skip[..w], g_front, None);
    }

    pub fn cast<U: Real>(&self) -> MlsParams<U> {
        MlsParams {
            config: self.config.clone(),
            dim: self.dim,
            layout: self.layout.clone(),
            backbone: convert_slice(&self.backbone),
            heads: self
                .heads
                .iter()
                .map(|(id, h)| (id.clone(), convert_slice(h)))
                .collect(),
            backbone_frozen: self.backbone_frozen,
        }
    }

    pub fn to_container(&self) -> NamedArrays {
        let mut c = NamedArrays::new();
        c.set_meta("kind", CHECKPOINT_KIND);
        c.set_meta("version", CHECKPOINT_VERSION);
        c.set_meta("layout_version", LAYOUT_VERSION);
        c.set_meta("dtype", T::DTYPE);
        c.set_meta("D", self.dim as u64);
        c.set_meta("P", self.p() as u64);
        c.set_meta("backbone_frozen", self.backbone_frozen);
        c.set_meta("config", serde_json::to_value(&self.config).expect("config serializes"));
        c.set_meta("layout", serde_json::to_value(&self.layout).expect("layout serializes"));
        c.set_meta("styles", serde_json::to_value(self.head_ids()).expect("ids serialize"));
        let split = self.front_len();
        insert_layers(&mut c, "backbone/front", &self.front_shape(), &self.backbone[..split]);
        insert_layers(&mut c, "backbone/back", &self.back_shape(), &self.backbone[split..]);
        for (id, h) in &self.heads {
            insert_layers(&mut c, &format!("heads/{id}"), &self.head_shape(), h);
        }
        c
    }

    pub fn from_container(c: &NamedArrays) -> Result<Self> {
        if c.meta_str("kind")? != CHECKPOINT_KIND {
            return Err(Error::Format("container does not hold an MLS checkpoint".into()));
        }
        let version = c.meta_u64("version")?;
        if version != CHECKPOINT_VERSION || c.meta_u64("layout_version")? != LAYOUT_VERSION {
            return Err(Error::Format(format!("unsupported MLS checkpoint version {version}")));
        }
        let meta = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("MLS checkpoint lacks '{k}'")))
        };
        let bad = |e: serde_json::Error| Error::Format(format!("MLS checkpoint metadata: {e}"));
        let config: MlsConfig = serde_json::from_value(meta("config")?).map_err(bad)?;
        let layout: HeadLayout = serde_json::from_value(meta("layout")?).map_err(bad)?;
        let styles: Vec<String> = serde_json::from_value(meta("styles")?).map_err(bad)?;
        let backbone_frozen = meta("backbone_frozen")?.as_bool().unwrap_or(false);
        let dim = c.meta_u64("D")? as usize;
        if c.meta_u64("P")? as usize != layout.total {
            return Err(Error::Format("MLS checkpoint P disagrees with its layout".into()));
        }
        let mut mls = Self {
            config,
            dim,
            layout,
            backbone: Vec::new(),
            heads: Vec::new(),
            backbone_frozen,
        };
        let mut backbone = read_layers(c, "backbone/front", &mls.front_shape())?;
        backbone.extend(read_layers::<T>(c, "backbone/back", &mls.back_shape())?);
        mls.backbone = backbone;
        for id in styles {
            let h = read_layers(c, &format!("heads/{id}"), &mls.head_shape())?;
            mls.heads.push((id, h));
        }
        Ok(mls)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&NamedArrays::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlsPretrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
}

impl Default for MlsPretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: LrSchedule::new(1e-3, 3.33e-5),
        }
    }
}

/// `|p_hat - p|^2` for one prediction.
pub fn param_loss<T: Real>(predicted: &[T], base: &[T]) -> T {
    predicted.iter().zip(base).map(|(a, b)| (*a - *b) * (*a - *b)).sum()
}

/// Regresses every head's prediction onto `base` with Adam, visiting styles
/// in order, one per iteration. Returns the mean loss of each epoch.
///
/// A frozen backbone stays untouched; only heads are updated then.
pub fn pretrain_mls<T: Real>(
    mls: &mut MlsParams<T>,
    styles: &[(String, Vec<T>)],
    base: &[T],
    cfg: &MlsPretrainConfig,
) -> Result<Vec<f64>> {
    if styles.is_empty() {
        return Err(Error::Argument("MLS pretraining needs at least one style".into()));
    }
    if base.len() != mls.p() {
        return Err(Error::Contract(format!(
            "base vector has {} values, MLS predicts {}",
            base.len(),
            mls.p()
        )));
    }
    let mut head_opts: Vec<Adam<T>> = styles
        .iter()
        .map(|_| Adam::new(mls.head_shape().param_count()))
        .collect();
    let mut backbone_opt = Adam::new(mls.backbone.len());
    let mut head_grad = vec![T::zero(); mls.head_shape().param_count()];
    let mut backbone_grad = vec![T::zero(); mls.backbone.len()];
    let total = cfg.epochs * styles.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (s, (id, feature)) in styles.iter().enumerate() {
            let step = epoch * styles.len() + s;
            let trace = mls.forward(feature, id)?;
            let out = trace.output();
            let loss = param_loss(out, base).as_f64();
            if !loss.is_finite() {
                return Err(Error::Training {
                    stage: "pretrain_mls",
                    step,
                });
            }
            epoch_loss += loss;
            let d_p: Vec<T> = out.iter().zip(base).map(|(a, b)| (*a - *b) * T::lit(2.0)).collect();
            head_grad.iter_mut().for_each(|g| *g = T::zero());
            let lr = cfg.lr.at(step, total);
            let hi = trace.head_index;
            if mls.backbone_frozen {
                mls.backward(&trace, &d_p, &mut head_grad, None);
            } else {
                backbone_grad.iter_mut().for_each(|g| *g = T::zero());
                mls.backward(&trace, &d_p, &mut head_grad, Some(&mut backbone_grad));
                backbone_opt.step(&mut mls.backbone, &backbone_grad, lr);
            }
            head_opts[s].step(&mut mls.heads[hi].1, &head_grad, lr);
        }
        epoch_losses.push(epoch_loss / styles.len() as f64);
    }
    Ok(epoch_losses)
}

/// Adds a head for `new_id` as a copy of `nearest`'s head and freezes the backbone.
pub fn add_style_incremental<T: Real>(mls: &mut MlsParams<T>, new_id: &str, nearest: &str) -> Result<String> {
    if mls.head_index(new_id).is_some() {
        return Err(Error::Contract(format!("style id '{new_id}' already has a head")));
    }
    let src = mls.require(nearest)?;
    let head = mls.heads[src].1.clone();
    mls.heads.push((new_id.to_string(), head));
    mls.backbone_frozen = true;
    Ok(new_id.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_field() -> FieldConfig {
        FieldConfig {
            trunk_width: 8,
            head_width: 8,
            pos_freqs: 2,
            dir_freqs: 1,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn layout_offsets_increase_to_p() {
        let cfg = small_field();
        let layout = HeadLayout::for_config(&cfg);
        for w in layout.blocks.windows(2) {
            assert!(w[1].offset > w[0].offset);
        }
        let last = layout.blocks.last().unwrap();
        assert_eq!(last.offset + last.shape.iter().product::<usize>(), layout.total);
        assert_eq!(layout.total, cfg.head_param_count());
    }

    #[test]
    fn incremental_copy_and_freeze() {
        let cfg = small_field();
        let styles = vec!["a".to_string(), "b".to_string()];
        let mut mls = MlsParams::<f64>::init(
            MlsConfig {
                backbone_width: 8,
                head_width: 8,
            },
            4,
            &cfg,
            &styles,
            0,
        )
        .unwrap();
        add_style_incremental(&mut mls, "c", "b").unwrap();
        let f = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(mls.predict(&f, "c").unwrap(), mls.predict(&f, "b").unwrap());
        assert!(mls.backbone_frozen);
        assert!(add_style_incremental(&mut mls, "a", "b").is_err());
        assert!(matches!(mls.predict(&f, "zzz"), Err(Error::Lookup(_))));
    }
}
