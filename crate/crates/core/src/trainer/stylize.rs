//! The stylization loop: per step one (view, style) sample and one ray
//! mini-batch, supervised by the pregenerated targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{mscl_grad, mscl_loss, SupervisionPack};
use crate::error::{Error, Result};
use crate::field::{render_batch, render_batch_backward, render_image, FieldParams, HeadGrads, Ray};
use crate::image_buf::ImageBuffer;
use crate::mls::{unpack_heads, unpack_heads_into, MlsParams};
use crate::nn::{LrSchedule, Optimizer, OptimizerKind};
use crate::scalar::Real;
use crate::scene::{CameraModel, SceneBundle};

/// One style as the loop sees it.
#[derive(Clone, Debug)]
pub struct StyleTask<'a, T> {
    pub id: String,
    /// Head the style trains; several styles may share one.
    pub head: String,
    pub feature: Vec<T>,
    /// One target image per training view.
    pub targets: Vec<&'a ImageBuffer>,
}

impl<'a, T: Real> StyleTask<'a, T> {
    /// Targets from a pack: the reconstructed images, or the independently
    /// stylized ones when `consistent` is false.
    pub fn from_pack(id: &str, head: &str, feature: &[f64], pack: &'a SupervisionPack, consistent: bool) -> Self {
        Self {
            id: id.to_string(),
            head: head.to_string(),
            feature: feature.iter().map(|v| T::lit(*v)).collect(),
            targets: pack
                .entries
                .iter()
                .map(|e| if consistent { &e.reconstructed } else { &e.stylized })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

/// One row of `loss.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub style_id: String,
    pub mscl: f64,
}

/// Runs `cfg.steps` iterations, updating the heads named by `tasks` and,
/// unless it is frozen, the backbone. The field is only read.
///
/// `on_step` sees every record as it is produced.
pub fn run_stylization<T: Real>(
    field: &FieldParams<T>,
    mls: &mut MlsParams<T>,
    scene: &SceneBundle,
    tasks: &[StyleTask<'_, T>],
    cfg: &LoopConfig,
    on_step: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Argument("stylization needs at least one style".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("ray batch size must be at least 1".into()));
    }
    let (w, h) = scene.dims();
    for t in tasks {
        if t.targets.len() != scene.len() || t.targets.iter().any(|i| i.dims() != (w, h)) {
            return Err(Error::Config(format!(
                "style '{}' needs one {w}x{h} target per view",
                t.id
            )));
        }
        mls.head_index(&t.head)
            .ok_or_else(|| Error::Lookup(format!("no prediction head for style '{}'", t.head)))?;
    }
    let cameras = scene.cameras();
    let mut work = field.clone();
    let mut optimizers: Vec<Option<Optimizer<T>>> = vec![None; mls.heads.len()];
    let head_len = mls.head_shape().param_count();
    let mut backbone_opt = Optimizer::<T>::new(cfg.optimizer, mls.backbone.len());
    let mut head_grad = vec![T::zero(); head_len];
    let mut backbone_grad = vec![T::zero(); mls.backbone.len()];
    let mut grads = HeadGrads::zeros(field);
    let mut d_p = Vec::with_capacity(mls.p());
    let mut rays = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch * 3);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0073_7479_6c69_7a65);

    for step in 0..cfg.steps {
        let task = &tasks[rng.gen_range(0..tasks.len())];
        let view = rng.gen_range(0..scene.len());
        rays.clear();
        targets.clear();
        for _ in 0..cfg.batch {
            let p = rng.gen_range(0..w * h);
            rays.push(Ray::from_camera(&cameras[view], p % w, p / w));
            targets.extend(task.targets[view].get_index(p).map(T::lit));
        }

        let trace = mls.forward(&task.feature, &task.head)?;
        unpack_heads_into(trace.output(), &mut work)?;
        let batch = render_batch::<T, ChaCha8Rng>(&work, &rays, None);
        let loss = mscl_loss(&batch.out, &targets)?.as_f64();
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "stylization_train",
                step,
            });
        }
        let d_out = mscl_grad(&batch.out, &targets);
        grads.clear();
        render_batch_backward(&work, &batch, &d_out, &mut grads, None);
        d_p.clear();
        d_p.extend_from_slice(&grads.opacity);
        d_p.extend_from_slice(&grads.color);

        head_grad.iter_mut().for_each(|g| *g = T::zero());
        let lr = cfg.lr.at(step, cfg.steps);
        let hi = trace.head_index();
        if mls.backbone_frozen {
            mls.backward(&trace, &d_p, &mut head_grad, None);
        } else {
            backbone_grad.iter_mut().for_each(|g| *g = T::zero());
            mls.backward(&trace, &d_p, &mut head_grad, Some(&mut backbone_grad));
            backbone_opt.step(&mut mls.backbone, &backbone_grad, lr);
        }
        optimizers[hi]
            .get_or_insert_with(|| Optimizer::new(cfg.optimizer, head_len))
            .step(&mut mls.heads[hi].1, &head_grad, lr);

        on_step(&LossRecord {
            step,
            style_id: task.id.clone(),
            mscl: loss,
        })?;
    }
    Ok(())
}

/// The field with its heads replaced by the prediction for `feature`.
pub fn stylized_field<T: Real>(
    field: &FieldParams<T>,
    mls: &MlsParams<T>,
    feature: &[T],
    head: &str,
) -> Result<FieldParams<T>> {
    unpack_heads(&mls.predict(feature, head)?, field)
}

/// Renders one camera with the predicted heads. Deterministic.
pub fn render_with_heads<T: Real>(
    field: &FieldParams<T>,
    mls: &MlsParams<T>,
    feature: &[T],
    head: &str,
    camera: &CameraModel,
) -> Result<ImageBuffer> {
    Ok(render_image(&stylized_field(field, mls, feature, head)?, camera, None))
}

/// Mean over every pixel of every training view of the squared color
/// residual against the task's targets.
pub fn full_mscl<T: Real>(
    field: &FieldParams<T>,
    mls: &MlsParams<T>,
    scene: &SceneBundle,
    task: &StyleTask<'_, T>,
) -> Result<f64> {
    let styled = stylized_field(field, mls, &task.feature, &task.head)?;
    let mut total = 0.0;
    let mut rays = 0usize;
    for (v, target) in scene.views.iter().zip(&task.targets) {
        let img = render_image(&styled, &v.camera, None);
        total += img
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        rays += img.pixel_count();
    }
    Ok(total / rays as f64)
}
