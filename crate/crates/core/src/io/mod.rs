//! File formats: PLY scans, PNG images, text poses and JSON manifests and
//! stage artifacts.

pub mod images;
pub mod manifest;
pub mod ply;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use images::{load_color, load_depth, load_labels, load_pose, save_color, save_depth, save_labels, save_pose};
pub use manifest::{load_manifest, load_scene, GroundTruth, InstancePoints, Scene, SceneManifest, ViewEntry};
pub use ply::{load_mesh, load_point_cloud, save_mesh, save_point_cloud, PlyFormat};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
