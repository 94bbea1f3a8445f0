//! Photometric fitting of a field to the photo-real views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_batch, render_batch_backward, HeadGrads, Ray};
use super::{FieldConfig, FieldParams};
use crate::error::{Error, Result};
use crate::nn::{LrSchedule, Optimizer, OptimizerKind};
use crate::scalar::Real;
use crate::scene::SceneBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub field: FieldConfig,
    pub steps: usize,
    /// Rays per step, drawn uniformly over all views and pixels.
    pub batch: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            steps: 3000,
            batch: 256,
            lr: LrSchedule::new(5e-3, 2e-4),
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

/// Per-step mean squared photometric error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Mean loss over `window` steps starting at `start`.
    pub fn window_mean(&self, start: usize, window: usize) -> f64 {
        let end = (start + window).min(self.losses.len());
        let slice = &self.losses[start.min(end)..end];
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Fits a field to the scene's views by minimizing the mean over rays of the
/// squared color residual. The scene bounds define the position normalization.
pub fn pretrain_nerf<T: Real>(scene: &SceneBundle, cfg: &PretrainConfig) -> Result<(FieldParams<T>, PretrainReport)> {
    scene.validate()?;
    if cfg.batch == 0 {
        return Err(Error::Config("pretraining batch must be at least 1".into()));
    }
    let (center, radius) = scene.bounds();
    let field_cfg = FieldConfig {
        center,
        radius,
        ..cfg.field.clone()
    };
    let mut field = FieldParams::<T>::init(field_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574_7261_696e);
    let (w, h) = scene.dims();
    let pixels = w * h;

    let mut opt_trunk = Optimizer::<T>::new(cfg.optimizer, field.trunk.len());
    let mut opt_opacity = Optimizer::<T>::new(cfg.optimizer, field.opacity_head.len());
    let mut opt_color = Optimizer::<T>::new(cfg.optimizer, field.color_head.len());
    let mut grads = HeadGrads::zeros(&field);
    let mut trunk_grad = vec![T::zero(); field.trunk.len()];
    let mut report = PretrainReport::default();

    let mut rays = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(3 * cfg.batch);
    for step in 0..cfg.steps {
        rays.clear();
        targets.clear();
        for _ in 0..cfg.batch {
            let v = rng.gen_range(0..scene.views.len());
            let p = rng.gen_range(0..pixels);
            let view = &scene.views[v];
            rays.push(Ray::from_camera(&view.camera, p % w, p / w));
            targets.extend(view.image.get_index(p).map(T::lit));
        }
        let trace = if field.config.stratified {
            render_batch(&field, &rays, Some(&mut rng))
        } else {
            render_batch::<T, ChaCha8Rng>(&field, &rays, None)
        };
        let scale = T::lit(1.0 / cfg.batch as f64);
        let mut loss = T::zero();
        let mut d_out = vec![T::zero(); 3 * cfg.batch];
        for (i, (o, t)) in trace.out.iter().zip(&targets).enumerate() {
            let r = *o - *t;
            loss += r * r;
            d_out[i] = (r + r) * scale;
        }
        let loss = (loss * scale).as_f64();
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "pretrain_nerf",
                step,
            });
        }
        report.losses.push(loss);

        grads.clear();
        trunk_grad.iter_mut().for_each(|g| *g = T::zero());
        render_batch_backward(&field, &trace, &d_out, &mut grads, Some(&mut trunk_grad));
        let lr = cfg.lr.at(step, cfg.steps);
        opt_trunk.step(&mut field.trunk, &trunk_grad, lr);
        opt_opacity.step(&mut field.opacity_head, &grads.opacity, lr);
        opt_color.step(&mut field.color_head, &grads.color, lr);
    }
    Ok((field, report))
}
