use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera axes follow the x-right, y-down, z-forward convention. Pixel `(x, y)`
/// covers `[x, x+1) x [y, y+1)` in image coordinates; its center ray passes
/// through `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    pub extrinsics: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    /// Camera at `eye` looking at `target`; `up` is the world direction mapped to image-up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut extrinsics = Matrix4::identity();
        extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        extrinsics.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self {
            intrinsics,
            extrinsics,
            width,
            height,
            near,
            far,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::Validation(format!(
                "intrinsics focal entries must be positive, got fx={} fy={}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Validation("intrinsics last row must be [0, 0, 1]".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::Validation(format!(
                "extrinsics rotation is not orthonormal (max deviation {err:.3e})"
            )));
        }
        let bottom = self.extrinsics.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Validation("extrinsics last row must be [0, 0, 0, 1]".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Validation(format!(
                "require 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("camera has zero-sized image".into()));
        }
        Ok(())
    }

    /// Unit world-space direction through continuous image point `(u, v)`.
    pub fn direction_through(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        (self.rotation().transpose() * Vector3::new(x, y, 1.0)).normalize()
    }

    /// Origin and unit direction of the ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
        (self.center(), self.direction_through(x as f64 + 0.5, y as f64 + 0.5))
    }

    /// Projects a world point to pixel-index coordinates (pixel centers at integers)
    /// and camera depth. `None` behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.rotation() * point + self.translation();
        if pc.z <= 1e-12 {
            return None;
        }
        let p = self.intrinsics * (pc / pc.z);
        Some((p.x - 0.5, p.y - 0.5, pc.z))
    }

    pub fn intrinsics_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.intrinsics[(r, c)];
            }
        }
        out
    }

    pub fn extrinsics_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.extrinsics[(r, c)];
            }
        }
        out
    }
}
