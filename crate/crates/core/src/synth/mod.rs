//! Synthetic scene pairs: a box room with cuboid objects, rigid changes
//! between the two scans, a ring of inward-looking cameras, rendered images,
//! instance label maps and ground truth.

mod labels;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthImage, Intrinsics, LabelImage, Point3, PointCloud, Pose, RgbImage, TriMesh, Vec3};
use crate::io::manifest::{save_manifest, ViewEntry};
use crate::io::{self, GroundTruth, InstancePoints, PlyFormat, Scene, SceneManifest};
use crate::render::{self, Geometry, RenderOptions, NO_PRIMITIVE};

pub use labels::fragment_masks;

/// Label source name of the instance-id label maps.
pub const ORACLE_SOURCE: &str = "oracle";
/// Labels of floor and walls when they are not background.
pub const ROOM_LABEL_BASE: u16 = 60000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomSpec {
    /// Extent along x and y and wall height, in meters. The floor spans
    /// `[0, size.x] x [0, size.y]` at `z = 0`.
    pub size: [f64; 3],
    pub walls: bool,
    pub floor_color: [u8; 3],
    pub wall_color: [u8; 3],
}

impl Default for RoomSpec {
    fn default() -> Self {
        RoomSpec {
            size: [4.0, 4.0, 2.5],
            walls: true,
            floor_color: [150, 150, 150],
            wall_color: [220, 210, 190],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Change {
    #[default]
    Keep,
    /// Rigid move on the floor: translation in x/y and extra yaw (radians).
    Move {
        translation: [f64; 2],
        #[serde(default)]
        yaw: f64,
    },
    Remove,
    /// Present only in the rescan, at the object's listed pose.
    Add,
}

/// Cuboid standing on the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub instance_id: u16,
    pub size: [f64; 3],
    /// Center of the footprint.
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    pub color: [u8; 3],
    #[serde(default)]
    pub change: Change,
}

impl ObjectSpec {
    fn pose_in(&self, rescan: bool) -> Option<([f64; 2], f64)> {
        match (self.change, rescan) {
            (Change::Add, false) | (Change::Remove, true) => None,
            (Change::Move { translation, yaw }, true) => Some((
                [self.position[0] + translation[0], self.position[1] + translation[1]],
                self.yaw + yaw,
            )),
            _ => Some((self.position, self.yaw)),
        }
    }

    fn is_changed(&self) -> bool {
        matches!(self.change, Change::Move { .. } | Change::Add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRing {
    pub count: usize,
    /// Camera height above the floor.
    pub height: f64,
    /// Ring radius around the room center.
    pub radius: f64,
    /// Height of the look-at point above the room center.
    pub target_height: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing {
            count: 12,
            height: 1.5,
            radius: 1.6,
            target_height: 0.2,
            image_width: 320,
            image_height: 240,
            focal_px: 260.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub objects: Vec<ObjectSpec>,
    pub cameras: CameraRing,
    /// Surface samples per square meter.
    pub density: f64,
    pub seed: u64,
    /// Standard deviation of Gaussian noise on depth images and sample
    /// positions along their normals, in meters.
    pub depth_noise: f64,
    /// Floor and walls get label 0 in the label maps.
    pub floor_as_background: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            room: RoomSpec::default(),
            objects: Vec::new(),
            cameras: CameraRing::default(),
            density: 2500.0,
            seed: 0,
            depth_noise: 0.0,
            floor_as_background: true,
        }
    }
}

impl SceneSpec {
    /// Three cuboids: two moved by 0.5 m, one removed.
    pub fn three_cuboids() -> Self {
        SceneSpec {
            objects: vec![
                ObjectSpec {
                    instance_id: 1,
                    size: [0.3, 0.25, 0.35],
                    position: [1.2, 1.5],
                    yaw: 0.0,
                    color: [200, 40, 40],
                    change: Change::Move {
                        translation: [0.5, 0.0],
                        yaw: 0.0,
                    },
                },
                ObjectSpec {
                    instance_id: 2,
                    size: [0.25, 0.3, 0.4],
                    position: [2.5, 2.2],
                    yaw: 0.3,
                    color: [40, 170, 60],
                    change: Change::Move {
                        translation: [0.0, 0.5],
                        yaw: 0.0,
                    },
                },
                ObjectSpec {
                    instance_id: 3,
                    size: [0.35, 0.3, 0.3],
                    position: [1.4, 2.8],
                    yaw: 0.0,
                    color: [50, 70, 200],
                    change: Change::Remove,
                },
            ],
            ..Default::default()
        }
    }

    /// One long object slid along its long axis so that 60% of its
    /// footprint overlaps its old one, next to an unchanged object.
    pub fn slid_object() -> Self {
        SceneSpec {
            objects: vec![
                ObjectSpec {
                    instance_id: 1,
                    size: [1.0, 0.3, 0.4],
                    position: [1.6, 2.0],
                    yaw: 0.0,
                    color: [190, 120, 40],
                    change: Change::Move {
                        translation: [0.4, 0.0],
                        yaw: 0.0,
                    },
                },
                ObjectSpec {
                    instance_id: 2,
                    size: [0.3, 0.3, 0.5],
                    position: [2.0, 1.0],
                    yaw: 0.0,
                    color: [60, 60, 180],
                    change: Change::Keep,
                },
            ],
            ..Default::default()
        }
    }

    /// The three-cuboid layout with every object kept in place.
    pub fn unchanged() -> Self {
        let mut s = Self::three_cuboids();
        for o in &mut s.objects {
            o.change = Change::Keep;
        }
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "three-cuboids" => Ok(Self::three_cuboids()),
            "slid-object" => Ok(Self::slid_object()),
            "unchanged" => Ok(Self::unchanged()),
            _ => Err(Error::invalid(format!(
                "unknown preset `{name}` (expected three-cuboids, slid-object or unchanged)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [sx, sy, sz] = self.room.size;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
            return Err(Error::invalid("room size must be positive"));
        }
        if !(self.density > 0.0) {
            return Err(Error::invalid("sampling density must be positive"));
        }
        if !(self.depth_noise >= 0.0) {
            return Err(Error::invalid("depth noise must be >= 0"));
        }
        let c = &self.cameras;
        if c.count == 0 {
            return Err(Error::invalid("camera ring needs at least one camera"));
        }
        Intrinsics::new(c.focal_px, c.focal_px, 0.0, 0.0, c.image_width, c.image_height)?;
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if o.instance_id == 0 || o.instance_id >= ROOM_LABEL_BASE {
                return Err(Error::invalid(format!(
                    "instance id {} outside 1..{ROOM_LABEL_BASE}",
                    o.instance_id
                )));
            }
            if !ids.insert(o.instance_id) {
                return Err(Error::invalid(format!("duplicate instance id {}", o.instance_id)));
            }
            if o.size.iter().any(|s| !(*s > 0.0)) || o.size[2] > sz {
                return Err(Error::invalid(format!("object {} has an invalid size", o.instance_id)));
            }
            for rescan in [false, true] {
                let Some((pos, yaw)) = o.pose_in(rescan) else {
                    continue;
                };
                for corner in footprint(o.size, pos, yaw) {
                    if corner.x < 0.0 || corner.x > sx || corner.y < 0.0 || corner.y > sy {
                        return Err(Error::invalid(format!("object {} leaves the room", o.instance_id)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Planar rectangle `c0 c1 c2 c3` with a uniform color and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Quad {
    pub corners: [Point3; 4],
    pub normal: Vec3,
    pub color: [u8; 3],
    /// Label-map id: the instance id, or 0 / a room label for floor and walls.
    pub label: u16,
    /// Instance id recorded on samples; 0 for the room.
    pub instance: u32,
}

impl Quad {
    fn new(corners: [Point3; 4], normal: Vec3, color: [u8; 3], label: u16, instance: u32) -> Self {
        Quad {
            corners,
            normal,
            color,
            label,
            instance,
        }
    }
}

fn footprint(size: [f64; 3], pos: [f64; 2], yaw: f64) -> [Point3; 4] {
    let (s, c) = yaw.sin_cos();
    let (hx, hy) = (size[0] / 2.0, size[1] / 2.0);
    [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)].map(|(x, y)| Point3::new(pos[0] + c * x - s * y, pos[1] + s * x + c * y, 0.0))
}

fn in_footprint(p: &Point3, size: [f64; 3], pos: [f64; 2], yaw: f64) -> bool {
    let (s, c) = yaw.sin_cos();
    let (dx, dy) = (p.x - pos[0], p.y - pos[1]);
    let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
    lx.abs() < size[0] / 2.0 && ly.abs() < size[1] / 2.0
}

fn cuboid_quads(o: &ObjectSpec, pos: [f64; 2], yaw: f64) -> Vec<Quad> {
    let b = footprint(o.size, pos, yaw);
    let up = Vec3::new(0.0, 0.0, o.size[2]);
    let t = b.map(|p| p + up);
    let label = o.instance_id;
    let inst = o.instance_id as u32;
    let mut quads = vec![Quad::new([t[0], t[1], t[2], t[3]], Vec3::z(), o.color, label, inst)];
    for k in 0..4 {
        let (a, bb) = (b[k], b[(k + 1) % 4]);
        let normal = (bb - a).cross(&Vec3::z()).normalize();
        quads.push(Quad::new([a, bb, bb + up, a + up], normal, o.color, label, inst));
    }
    quads
}

fn room_quads(spec: &SceneSpec) -> Vec<Quad> {
    let [sx, sy, sz] = spec.room.size;
    let label = |k: u16| if spec.floor_as_background { 0 } else { ROOM_LABEL_BASE + k };
    let p = Point3::new;
    let mut quads = vec![Quad::new(
        [p(0.0, 0.0, 0.0), p(sx, 0.0, 0.0), p(sx, sy, 0.0), p(0.0, sy, 0.0)],
        Vec3::z(),
        spec.room.floor_color,
        label(0),
        0,
    )];
    if spec.room.walls {
        let wc = spec.room.wall_color;
        let walls = [
            ([p(0.0, 0.0, 0.0), p(sx, 0.0, 0.0), p(sx, 0.0, sz), p(0.0, 0.0, sz)], Vec3::y()),
            ([p(sx, 0.0, 0.0), p(sx, sy, 0.0), p(sx, sy, sz), p(sx, 0.0, sz)], -Vec3::x()),
            ([p(sx, sy, 0.0), p(0.0, sy, 0.0), p(0.0, sy, sz), p(sx, sy, sz)], -Vec3::y()),
            ([p(0.0, sy, 0.0), p(0.0, 0.0, 0.0), p(0.0, 0.0, sz), p(0.0, sy, sz)], Vec3::x()),
        ];
        for (k, (corners, n)) in walls.into_iter().enumerate() {
            quads.push(Quad::new(corners, n, wc, label(k as u16 + 1), 0));
        }
    }
    quads
}

fn scan_quads(spec: &SceneSpec, rescan: bool) -> Vec<Quad> {
    let mut quads = room_quads(spec);
    for o in &spec.objects {
        if let Some((pos, yaw)) = o.pose_in(rescan) {
            quads.extend(cuboid_quads(o, pos, yaw));
        }
    }
    quads
}

/// One triangle pair per quad with unshared vertices, so face `2k` and
/// `2k + 1` come from quad `k`.
fn quads_to_mesh(quads: &[Quad]) -> Result<TriMesh> {
    let mut vertices = Vec::with_capacity(quads.len() * 4);
    let mut colors = Vec::with_capacity(quads.len() * 4);
    let mut faces = Vec::with_capacity(quads.len() * 2);
    for q in quads {
        let base = vertices.len() as u32;
        vertices.extend_from_slice(&q.corners);
        colors.extend([q.color; 4]);
        faces.push([base, base + 1, base + 2]);
        faces.push([base, base + 2, base + 3]);
    }
    let mesh = TriMesh::new(vertices, faces, Some(colors))?;
    if mesh.dropped_degenerate > 0 {
        return Err(Error::invalid("scene contains degenerate surfaces"));
    }
    Ok(mesh)
}

/// Jittered-grid samples of every quad. Floor samples under an object
/// standing in the same scan are skipped.
fn sample_quads(spec: &SceneSpec, quads: &[Quad], rescan: bool, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let spacing = 1.0 / spec.density.sqrt();
    let noise = if spec.depth_noise > 0.0 {
        Some(Normal::new(0.0, spec.depth_noise).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let footprints: Vec<([f64; 3], [f64; 2], f64)> = spec
        .objects
        .iter()
        .filter_map(|o| o.pose_in(rescan).map(|(p, y)| (o.size, p, y)))
        .collect();
    let mut cloud = PointCloud {
        colors: Some(Vec::new()),
        normals: Some(Vec::new()),
        instance_ids: Some(Vec::new()),
        ..Default::default()
    };
    for (qi, q) in quads.iter().enumerate() {
        let is_floor = qi == 0;
        let u = q.corners[1] - q.corners[0];
        let v = q.corners[3] - q.corners[0];
        let nu = (u.norm() / spacing).ceil().max(1.0) as usize;
        let nv = (v.norm() / spacing).ceil().max(1.0) as usize;
        for j in 0..nv {
            for i in 0..nu {
                let a = (i as f64 + rng.random::<f64>()) / nu as f64;
                let b = (j as f64 + rng.random::<f64>()) / nv as f64;
                let mut p = q.corners[0] + u * a + v * b;
                if is_floor && footprints.iter().any(|(s, pos, yaw)| in_footprint(&p, *s, *pos, *yaw)) {
                    continue;
                }
                if let Some(n) = &noise {
                    p += q.normal * n.sample(rng);
                }
                cloud.positions.push(p);
                cloud.colors.as_mut().unwrap().push(q.color);
                cloud.normals.as_mut().unwrap().push(q.normal);
                cloud.instance_ids.as_mut().unwrap().push(q.instance);
            }
        }
    }
    Ok(cloud)
}

fn ring_views(spec: &SceneSpec) -> Result<Vec<CameraView>> {
    let c = &spec.cameras;
    let center = [spec.room.size[0] / 2.0, spec.room.size[1] / 2.0];
    let intr = Intrinsics::new(
        c.focal_px,
        c.focal_px,
        c.image_width as f64 / 2.0,
        c.image_height as f64 / 2.0,
        c.image_width,
        c.image_height,
    )?;
    (0..c.count)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / c.count as f64;
            let eye = Point3::new(
                center[0] + c.radius * angle.cos(),
                center[1] + c.radius * angle.sin(),
                c.height,
            );
            let target = Point3::new(center[0], center[1], c.target_height);
            Ok(CameraView::new(Pose::look_at(eye, target)?, intr))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SceneSpec,
    pub reference_quads: Vec<Quad>,
    pub rescan_quads: Vec<Quad>,
    pub reference_mesh: TriMesh,
    pub rescan_mesh: TriMesh,
    pub reference_cloud: PointCloud,
    pub rescan_cloud: PointCloud,
    /// Views carrying the rescan depth, color and oracle label maps.
    pub views: Vec<CameraView>,
    pub ground_truth: GroundTruth,
}

fn instance_points(cloud: &PointCloud, id: u32) -> Vec<u32> {
    let ids = cloud.instance_ids.as_deref().unwrap_or(&[]);
    ids.iter().enumerate().filter(|(_, &i)| i == id).map(|(k, _)| k as u32).collect()
}

/// Label map of the rescan as seen from `view`: the label of the nearest
/// surface per pixel, 0 where nothing is hit.
pub fn oracle_masks(scene: &SynthScene, view: &CameraView) -> LabelImage {
    let out = render::render(Geometry::Mesh(&scene.rescan_mesh), view, &RenderOptions::default());
    let ids = out
        .primitive
        .iter()
        .map(|&f| if f == NO_PRIMITIVE { 0 } else { scene.rescan_quads[f as usize / 2].label })
        .collect();
    LabelImage {
        width: view.intrinsics.width,
        height: view.intrinsics.height,
        ids,
    }
}

pub fn generate(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let reference_quads = scan_quads(spec, false);
    let rescan_quads = scan_quads(spec, true);
    let reference_mesh = quads_to_mesh(&reference_quads)?;
    let rescan_mesh = quads_to_mesh(&rescan_quads)?;
    let reference_cloud = sample_quads(spec, &reference_quads, false, &mut rng)?;
    let rescan_cloud = sample_quads(spec, &rescan_quads, true, &mut rng)?;

    let ground_truth = GroundTruth {
        changed_instances: spec
            .objects
            .iter()
            .filter(|o| o.is_changed())
            .map(|o| InstancePoints {
                instance_id: o.instance_id as u32,
                point_indices: instance_points(&rescan_cloud, o.instance_id as u32),
            })
            .collect(),
        removed_instances: spec
            .objects
            .iter()
            .filter(|o| o.change == Change::Remove)
            .map(|o| InstancePoints {
                instance_id: o.instance_id as u32,
                point_indices: instance_points(&reference_cloud, o.instance_id as u32),
            })
            .collect(),
    };

    let mut scene = SynthScene {
        spec: spec.clone(),
        reference_quads,
        rescan_quads,
        reference_mesh,
        rescan_mesh,
        reference_cloud,
        rescan_cloud,
        views: ring_views(spec)?,
        ground_truth,
    };

    let noise = if spec.depth_noise > 0.0 {
        Some(Normal::new(0.0, spec.depth_noise).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut views = std::mem::take(&mut scene.views);
    for view in &mut views {
        let out = render::render(Geometry::Mesh(&scene.rescan_mesh), view, &RenderOptions::default());
        let mut depth = out.depth;
        if let Some(n) = &noise {
            for d in depth.values.iter_mut().filter(|d| **d > 0.0) {
                *d = (*d as f64 + n.sample(&mut rng)).max(1e-3) as f32;
            }
        }
        let pixels = out
            .primitive
            .iter()
            .map(|&f| if f == NO_PRIMITIVE { [0, 0, 0] } else { scene.rescan_quads[f as usize / 2].color })
            .collect();
        view.color = Some(RgbImage {
            width: depth.width,
            height: depth.height,
            pixels,
        });
        view.depth = Some(depth);
        let labels = oracle_masks(&scene, view);
        view.labels.insert(ORACLE_SOURCE.to_string(), labels);
    }
    scene.views = views;
    Ok(scene)
}

impl SynthScene {
    pub fn to_scene(&self) -> Scene {
        Scene {
            reference_cloud: self.reference_cloud.clone(),
            reference_mesh: Some(self.reference_mesh.clone()),
            rescan: self.rescan_cloud.clone(),
            rescan_mesh: Some(self.rescan_mesh.clone()),
            views: self.views.clone(),
            ground_truth: Some(self.ground_truth.clone()),
        }
    }

    /// Replaces the oracle label maps with fragmented ones.
    pub fn fragment(&mut self, parts: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for view in &mut self.views {
            if let Some(l) = view.labels.get_mut(ORACLE_SOURCE) {
                *l = fragment_masks(l, parts, &mut rng)?;
            }
        }
        Ok(())
    }

    /// Writes the scene under `dir` and returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let views_dir = dir.join("views");
        fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;
        io::save_point_cloud(&dir.join("reference.ply"), &self.reference_cloud, PlyFormat::BinaryLittleEndian)?;
        io::save_point_cloud(&dir.join("rescan.ply"), &self.rescan_cloud, PlyFormat::BinaryLittleEndian)?;
        io::save_mesh(&dir.join("reference_mesh.ply"), &self.reference_mesh, PlyFormat::BinaryLittleEndian)?;
        io::save_mesh(&dir.join("rescan_mesh.ply"), &self.rescan_mesh, PlyFormat::BinaryLittleEndian)?;
        io::write_json(&dir.join("ground_truth.json"), &self.ground_truth)?;
        io::write_json(&dir.join("spec.json"), &self.spec)?;

        let scale = crate::io::manifest::DEFAULT_DEPTH_SCALE;
        let mut entries = Vec::with_capacity(self.views.len());
        for (k, view) in self.views.iter().enumerate() {
            let rel = |suffix: &str| PathBuf::from("views").join(format!("view_{k:03}_{suffix}"));
            io::save_pose(&dir.join(rel("pose.txt")), &view.pose)?;
            let mut entry = ViewEntry {
                pose_path: rel("pose.txt"),
                intrinsics: view.intrinsics,
                depth_path: None,
                color_path: None,
                label_paths: Default::default(),
            };
            if let Some(d) = &view.depth {
                io::save_depth(&dir.join(rel("depth.png")), d, scale)?;
                entry.depth_path = Some(rel("depth.png"));
            }
            if let Some(c) = &view.color {
                io::save_color(&dir.join(rel("color.png")), c)?;
                entry.color_path = Some(rel("color.png"));
            }
            for (source, labels) in &view.labels {
                let p = rel(&format!("{source}.png"));
                io::save_labels(&dir.join(&p), labels)?;
                entry.label_paths.insert(source.clone(), p);
            }
            entries.push(entry);
        }
        let manifest = SceneManifest {
            reference_scan: "reference.ply".into(),
            rescan: "rescan.ply".into(),
            reference_mesh: Some("reference_mesh.ply".into()),
            rescan_mesh: Some("rescan_mesh.ply".into()),
            views: entries,
            ground_truth: Some("ground_truth.json".into()),
            depth_scale: scale,
        };
        let path = dir.join("manifest.json");
        save_manifest(&path, &manifest)?;
        Ok(path)
    }
}

/// Reads the rescan depth of view `k` rendered without noise; used where a
/// clean reference is needed.
pub fn clean_depth(scene: &SynthScene, view: &CameraView, rescan: bool) -> DepthImage {
    let mesh = if rescan { &scene.rescan_mesh } else { &scene.reference_mesh };
    render::render_depth(Geometry::Mesh(mesh), view, &RenderOptions::default())
}
