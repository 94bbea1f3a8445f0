//! Scene directories: `manifest.json`, one PNG per view and an optional
//! `geometry.json` for generated scenes.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::Serialize;
use serde_json::Value;

use super::camera::CameraModel;
use super::synthetic::SceneGeometry;
use super::{SceneBundle, View};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;

#[derive(Serialize)]
struct ManifestView<'a> {
    image: &'a str,
    intrinsics: [f64; 9],
    extrinsics: [f64; 16],
    near: f64,
    far: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scene_id: &'a str,
    width: usize,
    height: usize,
    views: Vec<ManifestView<'a>>,
}

fn field<'a>(obj: &'a Value, key: &str, path: &Path, name: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::load(path, name, "missing"))
}

fn number(v: &Value, path: &Path, name: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::load(path, name, "expected a finite number"))
}

fn size(v: &Value, path: &Path, name: &str) -> Result<usize> {
    v.as_u64()
        .filter(|&x| x > 0)
        .map(|x| x as usize)
        .ok_or_else(|| Error::load(path, name, "expected a positive integer"))
}

fn numbers<const N: usize>(v: &Value, path: &Path, name: &str) -> Result<[f64; N]> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::load(path, name, format!("expected an array of {N} numbers")))?;
    if arr.len() != N {
        return Err(Error::load(
            path,
            name,
            format!("expected {N} numbers, found {}", arr.len()),
        ));
    }
    let mut out = [0.0; N];
    for (i, x) in arr.iter().enumerate() {
        out[i] = number(x, path, &format!("{name}[{i}]"))?;
    }
    Ok(out)
}

/// Loads a scene directory, validating cameras and image sizes.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, "manifest.json", e.to_string()))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::load(&path, "manifest.json", e.to_string()))?;
    let scene_id = field(&root, "scene_id", &path, "scene_id")?
        .as_str()
        .ok_or_else(|| Error::load(&path, "scene_id", "expected a string"))?
        .to_string();
    let width = size(field(&root, "width", &path, "width")?, &path, "width")?;
    let height = size(field(&root, "height", &path, "height")?, &path, "height")?;
    let entries = field(&root, "views", &path, "views")?
        .as_array()
        .ok_or_else(|| Error::load(&path, "views", "expected an array"))?;

    let mut views = Vec::with_capacity(entries.len());
    for (i, v) in entries.iter().enumerate() {
        let name = |f: &str| format!("views[{i}].{f}");
        let image_name = field(v, "image", &path, &name("image"))?
            .as_str()
            .ok_or_else(|| Error::load(&path, name("image"), "expected a file name"))?;
        let k = numbers::<9>(
            field(v, "intrinsics", &path, &name("intrinsics"))?,
            &path,
            &name("intrinsics"),
        )?;
        let e = numbers::<16>(
            field(v, "extrinsics", &path, &name("extrinsics"))?,
            &path,
            &name("extrinsics"),
        )?;
        let near = number(field(v, "near", &path, &name("near"))?, &path, &name("near"))?;
        let far = number(field(v, "far", &path, &name("far"))?, &path, &name("far"))?;

        let image_path = dir.join(image_name);
        if !image_path.is_file() {
            return Err(Error::load(
                &path,
                name("image"),
                format!("file '{}' not found", image_path.display()),
            ));
        }
        let image = ImageBuffer::load_png(&image_path)?;
        if image.dims() != (width, height) {
            return Err(Error::Validation(format!(
                "view {i} image '{image_name}' is {}x{}, manifest says {width}x{height}",
                image.width(),
                image.height()
            )));
        }
        let camera = CameraModel {
            intrinsics: Matrix3::from_row_slice(&k),
            extrinsics: Matrix4::from_row_slice(&e),
            width,
            height,
            near,
            far,
        };
        views.push(View { camera, image });
    }

    let geometry_path = dir.join("geometry.json");
    let geometry = if geometry_path.is_file() {
        let text = std::fs::read_to_string(&geometry_path).map_err(|e| Error::io(&geometry_path, e))?;
        let g: SceneGeometry =
            serde_json::from_str(&text).map_err(|e| Error::load(&geometry_path, "geometry.json", e.to_string()))?;
        Some(g)
    } else {
        None
    };
    SceneBundle::new(scene_id, views, geometry)
}

/// Writes `manifest.json`, `v###.png` per view and `geometry.json` when present.
pub fn save_scene(scene: &SceneBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..scene.views.len()).map(|i| format!("v{i:03}.png")).collect();
    for (v, name) in scene.views.iter().zip(&names) {
        v.image.save_png(&dir.join(name))?;
    }
    let (width, height) = scene.dims();
    let manifest = Manifest {
        scene_id: &scene.scene_id,
        width,
        height,
        views: scene
            .views
            .iter()
            .zip(&names)
            .map(|(v, name)| ManifestView {
                image: name,
                intrinsics: v.camera.intrinsics_row_major(),
                extrinsics: v.camera.extrinsics_row_major(),
                near: v.camera.near,
                far: v.camera.far,
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    write_atomic(&path, text.as_bytes())?;
    if let Some(g) = &scene.geometry {
        let path = dir.join("geometry.json");
        let text = serde_json::to_string_pretty(g).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        write_atomic(&path, text.as_bytes())?;
    }
    Ok(())
}
