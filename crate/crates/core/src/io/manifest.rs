//! Scene manifest and ground truth files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Intrinsics, PointCloud, TriMesh};
use crate::io::{images, ply};
use crate::render::Geometry;

pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub pose_path: PathBuf,
    pub intrinsics: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_path: Option<PathBuf>,
    #[serde(default)]
    pub label_paths: BTreeMap<String, PathBuf>,
}

/// A scene pair on disk. Relative paths are resolved against the manifest's
/// directory by [`load_manifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub reference_scan: PathBuf,
    pub rescan: PathBuf,
    /// Optional meshes used for rendering instead of the scans themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mesh: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescan_mesh: Option<PathBuf>,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

impl SceneManifest {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        let mut out: Vec<(String, &mut PathBuf)> = vec![
            ("reference_scan".into(), &mut self.reference_scan),
            ("rescan".into(), &mut self.rescan),
        ];
        if let Some(p) = self.reference_mesh.as_mut() {
            out.push(("reference_mesh".into(), p));
        }
        if let Some(p) = self.rescan_mesh.as_mut() {
            out.push(("rescan_mesh".into(), p));
        }
        if let Some(p) = self.ground_truth.as_mut() {
            out.push(("ground_truth".into(), p));
        }
        for (i, v) in self.views.iter_mut().enumerate() {
            out.push((format!("views[{i}].pose_path"), &mut v.pose_path));
            if let Some(p) = v.depth_path.as_mut() {
                out.push((format!("views[{i}].depth_path"), p));
            }
            if let Some(p) = v.color_path.as_mut() {
                out.push((format!("views[{i}].color_path"), p));
            }
            for (src, p) in v.label_paths.iter_mut() {
                out.push((format!("views[{i}].label_paths.{src}"), p));
            }
        }
        out
    }

    /// Mask sources present in every view.
    pub fn label_sources(&self) -> Vec<String> {
        let mut it = self.views.iter();
        let Some(first) = it.next() else {
            return Vec::new();
        };
        let mut common: BTreeSet<String> = first.label_paths.keys().cloned().collect();
        for v in it {
            common.retain(|k| v.label_paths.contains_key(k));
        }
        common.into_iter().collect()
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<SceneManifest> {
    let manifest: SceneManifest = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.views.is_empty() {
        return Err(Error::MissingField {
            context: path.display().to_string(),
            field: "views (list is empty)".into(),
        });
    }
    if !(manifest.depth_scale > 0.0) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("field `depth_scale` must be positive, got {}", manifest.depth_scale),
        });
    }
    for v in &manifest.views {
        v.intrinsics.validate()?;
    }
    Ok(manifest)
}

/// Loads and validates a manifest: all paths are resolved against the
/// manifest directory and must exist.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    for (field, p) in manifest.paths_mut() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
        if !p.exists() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("field `{field}` refers to missing file {}", p.display()),
            });
        }
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &SceneManifest) -> Result<()> {
    super::write_json(path, manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstancePoints {
    pub instance_id: u32,
    pub point_indices: Vec<u32>,
}

/// Changed objects as point-index sets on the rescan cloud. Removed objects,
/// which have no rescan points, are recorded against the reference cloud.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub changed_instances: Vec<InstancePoints>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed_instances: Vec<InstancePoints>,
}

impl GroundTruth {
    /// Checks index bounds and disjointness against a rescan of `n_points`.
    pub fn validate(&self, n_points: usize) -> Result<()> {
        let mut seen = vec![false; n_points];
        for inst in &self.changed_instances {
            for &i in &inst.point_indices {
                let slot = seen.get_mut(i as usize).ok_or_else(|| {
                    Error::invalid(format!(
                        "ground truth instance {} has point index {i} beyond {n_points} points",
                        inst.instance_id
                    ))
                })?;
                if *slot {
                    return Err(Error::invalid(format!(
                        "ground truth point {i} belongs to more than one instance"
                    )));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    super::read_json(path)
}

/// A fully loaded scene pair.
#[derive(Debug, Clone)]
pub struct Scene {
    pub reference_cloud: PointCloud,
    pub reference_mesh: Option<TriMesh>,
    pub rescan: PointCloud,
    pub rescan_mesh: Option<TriMesh>,
    pub views: Vec<CameraView>,
    pub ground_truth: Option<GroundTruth>,
}

impl Scene {
    /// Geometry used to render the reference scan: mesh when available.
    pub fn reference_geometry(&self) -> Geometry<'_> {
        match &self.reference_mesh {
            Some(m) => Geometry::Mesh(m),
            None => Geometry::Cloud(&self.reference_cloud),
        }
    }

    pub fn rescan_geometry(&self) -> Geometry<'_> {
        match &self.rescan_mesh {
            Some(m) => Geometry::Mesh(m),
            None => Geometry::Cloud(&self.rescan),
        }
    }
}

fn load_scan(scan: &Path, mesh: Option<&Path>) -> Result<(PointCloud, Option<TriMesh>)> {
    let cloud = ply::load_point_cloud(scan)?;
    let mesh = match mesh {
        Some(m) => Some(ply::load_mesh(m)?),
        None if ply::has_faces(scan)? => Some(ply::load_mesh(scan)?),
        None => None,
    };
    Ok((cloud, mesh))
}

/// Loads every file a manifest references.
pub fn load_scene(manifest: &SceneManifest) -> Result<Scene> {
    let (reference_cloud, reference_mesh) =
        load_scan(&manifest.reference_scan, manifest.reference_mesh.as_deref())?;
    let (rescan, rescan_mesh) = load_scan(&manifest.rescan, manifest.rescan_mesh.as_deref())?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let pose = images::load_pose(&entry.pose_path)?;
        let mut view = CameraView::new(pose, entry.intrinsics);
        if let Some(p) = &entry.depth_path {
            view.depth = Some(images::load_depth(p, manifest.depth_scale)?);
        }
        if let Some(p) = &entry.color_path {
            view.color = Some(images::load_color(p)?);
        }
        for (src, p) in &entry.label_paths {
            view.labels.insert(src.clone(), images::load_labels(p)?);
        }
        view.validate()?;
        views.push(view);
    }
    let ground_truth = match &manifest.ground_truth {
        Some(p) => {
            let gt = load_ground_truth(p)?;
            gt.validate(rescan.len())?;
            Some(gt)
        }
        None => None,
    };
    Ok(Scene {
        reference_cloud,
        reference_mesh,
        rescan,
        rescan_mesh,
        views,
        ground_truth,
    })
}
