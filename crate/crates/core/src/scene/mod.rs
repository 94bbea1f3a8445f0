//! Posed multi-view scenes: loading, saving, procedural generation and
//! ground-truth optical flow.

mod camera;
mod flow;
mod io;
mod synthetic;

pub use camera::CameraModel;
pub use flow::{flow_at, flow_between, ground_truth_flow, FlowField};
pub use io::{load_scene, save_scene};
pub use synthetic::{generate_synthetic_scene, value_noise, Aabb, CameraArc, Hit, SceneGeometry};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_buf::{hex, ImageBuffer};

/// One posed photograph.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: CameraModel,
    pub image: ImageBuffer,
}

/// Immutable set of posed views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub views: Vec<View>,
    /// Closed-form geometry; present for generated scenes.
    pub geometry: Option<SceneGeometry>,
}

impl SceneBundle {
    pub fn new(scene_id: String, views: Vec<View>, geometry: Option<SceneGeometry>) -> Result<Self> {
        let s = Self {
            scene_id,
            views,
            geometry,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::Validation(format!(
                "a scene needs at least 2 views, got {}",
                self.views.len()
            )));
        }
        let dims = self.views[0].image.dims();
        for (i, v) in self.views.iter().enumerate() {
            v.camera
                .validate()
                .map_err(|e| Error::Validation(format!("view {i}: {e}")))?;
            if v.image.dims() != dims {
                return Err(Error::Validation(format!(
                    "view {i} image is {}x{}, expected {}x{}",
                    v.image.width(),
                    v.image.height(),
                    dims.0,
                    dims.1
                )));
            }
            if (v.camera.width, v.camera.height) != dims {
                return Err(Error::Validation(format!(
                    "view {i} camera size {}x{} differs from image size",
                    v.camera.width, v.camera.height
                )));
            }
        }
        Ok(())
    }

    pub fn gt_flow_available(&self) -> bool {
        self.geometry.is_some()
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.views[0].image.dims()
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn images(&self) -> Vec<ImageBuffer> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }

    /// Hex SHA-256 over cameras and 8-bit image content.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scene_id.as_bytes());
        for v in &self.views {
            for x in v.camera.intrinsics_row_major() {
                h.update(x.to_le_bytes());
            }
            for x in v.camera.extrinsics_row_major() {
                h.update(x.to_le_bytes());
            }
            h.update(v.camera.near.to_le_bytes());
            h.update(v.camera.far.to_le_bytes());
            h.update(v.image.to_rgb8().as_raw());
        }
        hex(&h.finalize())
    }

    /// Bounding sphere of everything the cameras can see between near and far.
    pub fn bounds(&self) -> ([f64; 3], f64) {
        let mut pts = Vec::new();
        for v in &self.views {
            let c = &v.camera;
            let o = c.center();
            for (u, w) in [
                (0.0, 0.0),
                (c.width as f64, 0.0),
                (0.0, c.height as f64),
                (c.width as f64, c.height as f64),
            ] {
                let d = c.direction_through(u, w);
                pts.push(o + d * c.near);
                pts.push(o + d * c.far);
            }
        }
        let n = pts.len() as f64;
        let center = pts.iter().fold(nalgebra::Vector3::zeros(), |a, p| a + p) / n;
        let radius = pts.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        ([center.x, center.y, center.z], radius)
    }
}
