//! Compact radiance field: frequency-encoded trunk, separable opacity and
//! color heads, and quadrature volume rendering.
//!
//! Only the two heads are ever replaced per style; the trunk is fitted once
//! to the photo-real views and frozen afterwards.

mod pretrain;
mod render;

pub use pretrain::{pretrain_nerf, PretrainConfig, PretrainReport};
pub use render::{
    composite, composite_backward, render_batch, render_batch_backward, render_image, render_ray, sample_depths,
    BatchTrace, HeadGrads, Ray, RayBatch,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpShape};
use crate::scalar::{convert_slice, Real};

pub const CHECKPOINT_KIND: &str = "field";
pub const CHECKPOINT_VERSION: u64 = 1;

/// Architecture and quadrature settings of a field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Position frequency count K; encoding length is `3 + 6K`.
    pub pos_freqs: usize,
    /// Direction frequency count; zero drops the direction input entirely.
    pub dir_freqs: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub head_width: usize,
    /// Layers in the opacity head, including its output layer.
    pub opacity_depth: usize,
    /// Layers in the color head, including its output layer.
    pub color_depth: usize,
    pub samples_per_ray: usize,
    /// Jitter sample depths within their bins during training.
    pub stratified: bool,
    /// Scene center used to normalize positions into `[-1, 1]^3`.
    pub center: [f64; 3],
    pub radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 6,
            dir_freqs: 2,
            trunk_width: 64,
            trunk_depth: 2,
            head_width: 64,
            opacity_depth: 2,
            color_depth: 3,
            samples_per_ray: 64,
            stratified: true,
            center: [0.0; 3],
            radius: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("pos_freqs", self.pos_freqs),
            ("trunk_width", self.trunk_width),
            ("trunk_depth", self.trunk_depth),
            ("head_width", self.head_width),
            ("opacity_depth", self.opacity_depth),
            ("color_depth", self.color_depth),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("field {name} must be at least 1")));
            }
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be at least 2".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("field radius must be positive".into()));
        }
        Ok(())
    }

    pub fn pos_len(&self) -> usize {
        3 + 6 * self.pos_freqs
    }

    pub fn dir_len(&self) -> usize {
        if self.dir_freqs == 0 {
            0
        } else {
            3 + 6 * self.dir_freqs
        }
    }

    pub fn trunk_shape(&self) -> MlpShape {
        let hidden = vec![self.trunk_width; self.trunk_depth - 1];
        MlpShape::new(
            self.pos_len(),
            &hidden,
            self.trunk_width,
            Activation::Relu,
            Activation::Relu,
        )
    }

    pub fn opacity_shape(&self) -> MlpShape {
        let hidden = vec![self.head_width; self.opacity_depth - 1];
        MlpShape::new(self.trunk_width, &hidden, 1, Activation::Relu, Activation::Softplus)
    }

    pub fn color_shape(&self) -> MlpShape {
        let hidden = vec![self.head_width; self.color_depth - 1];
        MlpShape::new(
            self.trunk_width + self.dir_len(),
            &hidden,
            3,
            Activation::Relu,
            Activation::Sigmoid,
        )
    }

    /// Length of the packed opacity-plus-color head vector.
    pub fn head_param_count(&self) -> usize {
        self.opacity_shape().param_count() + self.color_shape().param_count()
    }

    /// Normalizes a world position into the unit cube, clamping outside points.
    #[inline]
    pub fn normalize<T: Real>(&self, x: [T; 3]) -> [T; 3] {
        let r = T::lit(self.radius);
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            out[a] = ((x[a] - T::lit(self.center[a])) / r).max(-T::one()).min(T::one());
        }
        out
    }
}

/// Appends `x` followed by `sin(2^k pi x_a)` for all axes, then the cosines,
/// for each `k < freqs`.
#[inline]
pub fn encode_into<T: Real>(x: [T; 3], freqs: usize, out: &mut Vec<T>) {
    out.extend_from_slice(&x);
    let mut scale = T::lit(std::f64::consts::PI);
    for _ in 0..freqs {
        let s = [x[0] * scale, x[1] * scale, x[2] * scale];
        out.extend(s.iter().map(|v| v.sin()));
        out.extend(s.iter().map(|v| v.cos()));
        scale = scale + scale;
    }
}

/// Frequency encoding of an already normalized position; length `3 + 6K`.
pub fn encode_position<T: Real>(x: [T; 3], freqs: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(3 + 6 * freqs);
    encode_into(x, freqs, &mut out);
    out
}

/// Direction encoding; empty when `freqs == 0`.
pub fn encode_direction<T: Real>(d: [T; 3], freqs: usize) -> Vec<T> {
    if freqs == 0 {
        return Vec::new();
    }
    encode_position(d, freqs)
}

/// Trunk plus the two head parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<T> {
    pub config: FieldConfig,
    pub trunk: Vec<T>,
    pub opacity_head: Vec<T>,
    pub color_head: Vec<T>,
}

impl<T: Real> FieldParams<T> {
    /// Randomly initialized field.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = config.trunk_shape().init(&mut rng, false);
        let opacity_head = config.opacity_shape().init(&mut rng, false);
        let color_head = config.color_shape().init(&mut rng, false);
        Ok(Self {
            config,
            trunk,
            opacity_head,
            color_head,
        })
    }

    /// Random trunk with all head parameters zero.
    pub fn with_zero_heads(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut f = Self::init(config, seed)?;
        f.opacity_head.iter_mut().for_each(|v| *v = T::zero());
        f.color_head.iter_mut().for_each(|v| *v = T::zero());
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let blocks = [
            ("trunk", self.trunk.len(), self.config.trunk_shape().param_count()),
            (
                "opacity_head",
                self.opacity_head.len(),
                self.config.opacity_shape().param_count(),
            ),
            (
                "color_head",
                self.color_head.len(),
                self.config.color_shape().param_count(),
            ),
        ];
        for (name, got, want) in blocks {
            if got != want {
                return Err(Error::Contract(format!(
                    "{name} has {got} parameters, config requires {want}"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            config: self.config.clone(),
            trunk: convert_slice(&self.trunk),
            opacity_head: convert_slice(&self.opacity_head),
            color_head: convert_slice(&self.color_head),
        }
    }

    /// Opacity and color at one world position seen along unit direction `d`.
    pub fn eval(&self, x: [T; 3], d: [T; 3]) -> (T, [T; 3]) {
        let (sigma, color) = render::eval_points(self, &[x], &[d]);
        (sigma[0], [color[0], color[1], color[2]])
    }

    pub fn to_container(&self) -> NamedArrays {
        let mut c = NamedArrays::new();
        c.set_meta("kind", CHECKPOINT_KIND);
        c.set_meta("version", CHECKPOINT_VERSION);
        c.set_meta("dtype", T::DTYPE);
        c.set_meta("config", serde_json::to_value(&self.config).expect("config serializes"));
        let blocks = [
            ("trunk", self.config.trunk_shape(), &self.trunk),
            ("opacity_head", self.config.opacity_shape(), &self.opacity_head),
            ("color_head", self.config.color_shape(), &self.color_head),
        ];
        for (name, shape, params) in blocks {
            insert_layers(&mut c, name, &shape, params);
        }
        c
    }

    pub fn from_container(c: &NamedArrays) -> Result<Self> {
        if c.meta_str("kind")? != CHECKPOINT_KIND {
            return Err(Error::Format("container does not hold a field checkpoint".into()));
        }
        let version = c.meta_u64("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported field checkpoint version {version}")));
        }
        let config: FieldConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("field checkpoint lacks config".into()))?,
        )
        .map_err(|e| Error::Format(format!("field config: {e}")))?;
        config.validate()?;
        let f = Self {
            trunk: read_layers(c, "trunk", &config.trunk_shape())?,
            opacity_head: read_layers(c, "opacity_head", &config.opacity_shape())?,
            color_head: read_layers(c, "color_head", &config.color_shape())?,
            config,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&NamedArrays::load(path)?)
    }
}

/// Stores each layer of a flat MLP as `<prefix>/<i>/weight` and `<prefix>/<i>/bias`.
pub(crate) fn insert_layers<T: Real>(c: &mut NamedArrays, prefix: &str, shape: &MlpShape, params: &[T]) {
    let mut off = 0;
    for (i, l) in shape.layers.iter().enumerate() {
        let w = l.weight_count();
        c.insert(
            format!("{prefix}/{i}/weight"),
            &[l.outputs, l.inputs],
            &params[off..off + w],
        );
        c.insert(
            format!("{prefix}/{i}/bias"),
            &[l.outputs],
            &params[off + w..off + w + l.outputs],
        );
        off += l.param_count();
    }
}

pub(crate) fn read_layers<T: Real>(c: &NamedArrays, prefix: &str, shape: &MlpShape) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(shape.param_count());
    for (i, l) in shape.layers.iter().enumerate() {
        out.extend(c.get_vec::<T>(&format!("{prefix}/{i}/weight"), l.weight_count())?);
        out.extend(c.get_vec::<T>(&format!("{prefix}/{i}/bias"), l.outputs)?);
    }
    Ok(out)
}
