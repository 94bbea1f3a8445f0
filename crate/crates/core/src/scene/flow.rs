use super::camera::CameraModel;
use super::synthetic::SceneGeometry;
use super::SceneBundle;
use crate::error::{Error, Result};

/// Dense per-pixel displacement (in pixels) from a source view into a target view.
///
/// Each pixel carries a validity bit; invalid pixels still hold finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub src: usize,
    pub dst: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize, src: usize, dst: usize) -> Self {
        Self {
            width,
            height,
            src,
            dst,
            data: vec![0.0; width * height * 2],
            valid: vec![true; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, flow: [f64; 2]) -> Self {
        let mut f = Self::zeros(width, height, 0, 1);
        for p in 0..width * height {
            f.data[2 * p] = flow[0];
            f.data[2 * p + 1] = flow[1];
        }
        f
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        src: usize,
        dst: usize,
        data: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if data.len() != width * height * 2 || valid.len() != width * height {
            return Err(Error::Validation("flow field buffers do not match dimensions".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("flow field contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            src,
            dst,
            data,
            valid,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        let i = 2 * (y * self.width + x);
        [self.data[i], self.data[i + 1]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, flow: [f64; 2], valid: bool) {
        let p = y * self.width + x;
        self.data[2 * p] = flow[0];
        self.data[2 * p + 1] = flow[1];
        self.valid[p] = valid;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Bilinear lookup at a continuous pixel-index position; `None` outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let (max_x, max_y) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(x >= -EDGE_EPS && y >= -EDGE_EPS && x <= max_x + EDGE_EPS && y <= max_y + EDGE_EPS) {
            return None;
        }
        let (x, y) = (x.clamp(0.0, max_x), y.clamp(0.0, max_y));
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 2];
        for c in 0..2 {
            let v00 = self.get(x0, y0)[c];
            let v10 = self.get(x1, y0)[c];
            let v01 = self.get(x0, y1)[c];
            let v11 = self.get(x1, y1)[c];
            out[c] = (v00 * (1.0 - ax) + v10 * ax) * (1.0 - ay) + (v01 * (1.0 - ax) + v11 * ax) * ay;
        }
        Some(out)
    }
}

const EDGE_EPS: f64 = 1e-9;

/// Exact displacement of the surface point seen through pixel-index position
/// `(u, v)` of `from`, reprojected into `to`, and whether `to` sees it.
pub fn flow_at(
    geometry: &SceneGeometry,
    from: &CameraModel,
    to: &CameraModel,
    u: f64,
    v: f64,
) -> Option<([f64; 2], bool)> {
    let d = from.direction_through(u + 0.5, v + 0.5);
    let hit = geometry.cast(&from.center(), &d)?;
    let (u2, v2, _) = to.project(&hit.point)?;
    // reprojection of an edge pixel onto itself may land a rounding error outside
    let (max_u, max_v) = ((to.width - 1) as f64 + EDGE_EPS, (to.height - 1) as f64 + EDGE_EPS);
    let inside = u2 >= -EDGE_EPS && v2 >= -EDGE_EPS && u2 <= max_u && v2 <= max_v;
    let visible = inside && geometry.visible_from(to, &hit.point);
    Some(([u2 - u, v2 - v], visible))
}

/// Reprojection flow between two arbitrary cameras of a synthetic scene.
pub fn flow_between(
    geometry: &SceneGeometry,
    from: &CameraModel,
    to: &CameraModel,
    src: usize,
    dst: usize,
) -> FlowField {
    let mut flow = FlowField::zeros(from.width, from.height, src, dst);
    for y in 0..from.height {
        for x in 0..from.width {
            match flow_at(geometry, from, to, x as f64, y as f64) {
                Some((f, visible)) => flow.set(x, y, f, visible),
                None => flow.set(x, y, [0.0, 0.0], false),
            }
        }
    }
    flow
}

/// Analytic optical flow from view `src` to view `dst` of a scene with geometry.
pub fn ground_truth_flow(scene: &SceneBundle, src: usize, dst: usize) -> Result<FlowField> {
    let geometry = scene
        .geometry
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("scene '{}' carries no geometry metadata", scene.scene_id)))?;
    if src == dst {
        return Err(Error::Argument("ground truth flow needs two distinct views".into()));
    }
    let n = scene.views.len();
    if src >= n || dst >= n {
        return Err(Error::Argument(format!(
            "view index out of range (scene has {n} views)"
        )));
    }
    Ok(flow_between(
        geometry,
        &scene.views[src].camera,
        &scene.views[dst].camera,
        src,
        dst,
    ))
}
