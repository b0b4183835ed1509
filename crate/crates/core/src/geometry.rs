//! Shared geometric and image types.
//!
//! Camera convention: +Z forward, +X right, +Y down. A pixel `(col, row)`
//! covers the continuous range `[col, col + 1) x [row, row + 1)` and is
//! sampled at its center.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Point3 as NPoint3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = NPoint3<f64>;
pub type Vec3 = Vector3<f64>;

const ROTATION_TOL: f64 = 1e-6;

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            matrix: Matrix4::identity(),
        }
    }

    /// Validates that `matrix` is a rigid transform.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let last = matrix.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > ROTATION_TOL {
            return Err(Error::invalid("pose last row must be (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let orth = r.transpose() * r - Matrix3::identity();
        if orth.abs().max() > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid("pose rotation block is not a proper rotation"));
        }
        Ok(Pose { matrix })
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose::from_matrix(m)
    }

    pub fn from_translation(t: Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { matrix: m }
    }

    /// Camera at `eye` looking at `target`, with world +Z as up.
    pub fn look_at(eye: Point3, target: Point3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: eye and target coincide"))?;
        let right = forward
            .cross(&Vec3::z())
            .try_normalize(1e-9)
            .ok_or_else(|| Error::invalid("look_at: view direction parallel to up"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose::from_rotation_translation(rotation, eye.coords)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { matrix: m }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Camera frame to world frame.
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    /// Row-major 16 values.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::invalid(format!(
                "pose needs 16 values, got {}",
                values.len()
            )));
        }
        Pose::from_matrix(Matrix4::from_row_slice(values))
    }
}

/// World frame to camera frame (applies the inverse of the camera-to-world pose).
pub fn transform(pose: &Pose, point_world: &Point3) -> Point3 {
    let r = pose.rotation();
    Point3::from(r.transpose() * (point_world.coords - pose.translation()))
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A projected point: continuous pixel coordinates plus camera depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Projection {
    /// Integer pixel holding this projection.
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

/// Returns `None` when the point is behind the camera or lands outside the image.
pub fn project(point_cam: &Point3, intr: &Intrinsics) -> Option<Projection> {
    let z = point_cam.z;
    if z <= 0.0 || !z.is_finite() {
        return None;
    }
    let u = intr.fx * point_cam.x / z + intr.cx;
    let v = intr.fy * point_cam.y / z + intr.cy;
    let inside = u >= 0.0 && v >= 0.0 && u < intr.width as f64 && v < intr.height as f64;
    inside.then_some(Projection { u, v, z })
}

pub fn unproject(u: f64, v: f64, depth: f64, intr: &Intrinsics) -> Result<Point3> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(Error::invalid(format!("unproject: depth must be > 0, got {depth}")));
    }
    Ok(Point3::new(
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    ))
}

/// Point cloud with optional per-point channels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub normals: Option<Vec<Vec3>>,
    pub instance_ids: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Point3>) -> Self {
        PointCloud {
            positions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Color of point `i` in `[0, 1]^3`.
    pub fn color_unit(&self, i: usize) -> Option<Vec3> {
        self.colors.as_ref().map(|c| {
            let [r, g, b] = c[i];
            Vec3::new(r as f64, g as f64, b as f64) / 255.0
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        let check = |name: &str, len: Option<usize>| match len {
            Some(l) if l != n => Err(Error::invalid(format!(
                "channel `{name}` has {l} entries for {n} points"
            ))),
            _ => Ok(()),
        };
        check("colors", self.colors.as_ref().map(Vec::len))?;
        check("normals", self.normals.as_ref().map(Vec::len))?;
        check("instance_ids", self.instance_ids.as_ref().map(Vec::len))?;
        if let Some(normals) = &self.normals {
            if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-4) {
                return Err(Error::invalid(format!("normal {i} is not unit length")));
            }
        }
        if let Some(i) = self.positions.iter().position(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("point {i} is not finite")));
        }
        Ok(())
    }

    /// Subset of the cloud in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            normals: self.normals.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            instance_ids: self
                .instance_ids
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Triangle mesh. Faces with (near) zero area are dropped on construction and
/// counted in `dropped_degenerate`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub dropped_degenerate: usize,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[u32; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        let nv = vertices.len();
        if let Some(c) = &colors {
            if c.len() != nv {
                return Err(Error::invalid("mesh colors length differs from vertex count"));
            }
        }
        let mut kept = Vec::with_capacity(faces.len());
        let mut dropped = 0;
        for (fi, f) in faces.into_iter().enumerate() {
            if f.iter().any(|&i| i as usize >= nv) {
                return Err(Error::invalid(format!("face {fi} references a missing vertex")));
            }
            let [a, b, c] = f.map(|i| vertices[i as usize]);
            if (b - a).cross(&(c - a)).norm() <= 1e-14 {
                dropped += 1;
            } else {
                kept.push(f);
            }
        }
        Ok(TriMesh {
            vertices,
            faces: kept,
            colors,
            dropped_degenerate: dropped,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// Per-pixel depth in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        DepthImage {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} depth values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("depth value {i} is negative or not finite")));
        }
        Ok(DepthImage { width, height, values })
    }

    #[inline]
    pub fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    /// Depth at a pixel, `None` if invalid.
    #[inline]
    pub fn get(&self, col: u32, row: u32) -> Option<f64> {
        let d = self.values[self.index(col, row)];
        (d > 0.0).then_some(d as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|d| **d > 0.0).count()
    }
}

/// Per-pixel mask ids; 0 means "no mask".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u16>,
}

impl LabelImage {
    pub fn new(width: u32, height: u32) -> Self {
        LabelImage {
            width,
            height,
            ids: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_ids(width: u32, height: u32, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {width}x{height} image",
                ids.len()
            )));
        }
        Ok(LabelImage { width, height, ids })
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> u16 {
        self.ids[row as usize * self.width as usize + col as usize]
    }
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

/// One posed frame with the images attached to it.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub depth: Option<DepthImage>,
    pub color: Option<RgbImage>,
    /// Label maps keyed by mask source name ("color", "depth", ...).
    pub labels: BTreeMap<String, LabelImage>,
}

impl CameraView {
    pub fn new(pose: Pose, intrinsics: Intrinsics) -> Self {
        CameraView {
            pose,
            intrinsics,
            depth: None,
            color: None,
            labels: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let mut dims: Vec<(&str, u32, u32)> = Vec::new();
        if let Some(d) = &self.depth {
            dims.push(("depth", d.width, d.height));
        }
        if let Some(c) = &self.color {
            dims.push(("color", c.width, c.height));
        }
        for (name, l) in &self.labels {
            dims.push((name.as_str(), l.width, l.height));
        }
        for (name, dw, dh) in dims {
            if dw != w || dh != h {
                return Err(Error::DimensionMismatch(format!(
                    "{name} image is {dw}x{dh}, intrinsics say {w}x{h}"
                )));
            }
        }
        Ok(())
    }

    /// World point projected into this view.
    pub fn project_world(&self, p: &Point3) -> Option<Projection> {
        project(&transform(&self.pose, p), &self.intrinsics)
    }

    /// World point seen at pixel center `(col, row)` with the given camera depth.
    pub fn pixel_to_world(&self, col: u32, row: u32, depth: f64) -> Result<Point3> {
        let p = unproject(col as f64 + 0.5, row as f64 + 0.5, depth, &self.intrinsics)?;
        Ok(self.pose.apply(&p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intr() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn project_on_axis() {
        let p = project(&Point3::new(0.0, 0.0, 2.0), &intr()).unwrap();
        assert_eq!((p.u, p.v, p.z), (320.0, 240.0, 2.0));
    }

    #[test]
    fn project_behind_camera() {
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &intr()).is_none());
        assert!(project(&Point3::new(0.0, 0.0, 0.0), &intr()).is_none());
    }

    #[test]
    fn project_off_axis() {
        let p = project(&Point3::new(0.4, 0.0, 2.0), &intr()).unwrap();
        assert_relative_eq!(p.u, 420.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 240.0, epsilon = 1e-12);
    }

    #[test]
    fn project_outside_image() {
        assert!(project(&Point3::new(10.0, 0.0, 1.0), &intr()).is_none());
    }

    #[test]
    fn unproject_examples() {
        let p = unproject(320.0, 240.0, 2.0, &intr()).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
        let p = unproject(420.0, 240.0, 2.0, &intr()).unwrap();
        assert_relative_eq!(p.x, 0.4, epsilon = 1e-12);
        assert!(unproject(1.0, 1.0, 0.0, &intr()).is_err());
        assert!(unproject(1.0, 1.0, -2.0, &intr()).is_err());
    }

    #[test]
    fn transform_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(transform(&Pose::identity(), &p), p);
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, -5.0));
        assert_eq!(transform(&pose, &Point3::origin()), Point3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn world_point_on_axis_hits_principal_point() {
        let eye = Point3::new(1.0, -2.0, 1.5);
        let target = Point3::new(0.0, 0.0, 0.5);
        let pose = Pose::look_at(eye, target).unwrap();
        let dir = (target - eye).normalize();
        let world = eye + dir * 2.0;
        let p = project(&transform(&pose, &world), &intr()).unwrap();
        assert_relative_eq!(p.u, 320.0, epsilon = 1e-9);
        assert_relative_eq!(p.v, 240.0, epsilon = 1e-9);
        assert_relative_eq!(p.z, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn look_at_is_upright() {
        let pose = Pose::look_at(Point3::new(0.0, 0.0, 1.5), Point3::new(2.0, 0.0, 1.5)).unwrap();
        // A point above the optical axis lands in the upper half of the image.
        let above = transform(&pose, &Point3::new(2.0, 0.0, 2.0));
        assert!(above.y < 0.0);
        // A point to the camera's right (world -y when looking along +x).
        let right = transform(&pose, &Point3::new(2.0, -1.0, 1.5));
        assert!(right.x > 0.0);
    }

    #[test]
    fn pose_rejects_non_rigid() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(Pose::from_matrix(m).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(Pose::from_matrix(m).is_err());
        let mut m = Matrix4::<f64>::identity();
        m[(0, 0)] = -1.0; // reflection
        assert!(Pose::from_matrix(m).is_err());
    }

    #[test]
    fn mesh_drops_degenerate_faces() {
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let m = TriMesh::new(v.clone(), vec![[0, 1, 2], [0, 1, 3]], None).unwrap();
        assert_eq!(m.faces.len(), 1);
        assert_eq!(m.dropped_degenerate, 1);
        assert!(TriMesh::new(v, vec![[0, 1, 9]], None).is_err());
    }

    #[test]
    fn cloud_channel_lengths_checked() {
        let mut c = PointCloud::from_positions(vec![Point3::origin(); 3]);
        assert!(c.validate().is_ok());
        c.colors = Some(vec![[0, 0, 0]; 2]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn view_rejects_mismatched_images() {
        let mut view = CameraView::new(Pose::identity(), intr());
        view.labels.insert("color".into(), LabelImage::new(10, 10));
        assert!(view.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unproject_project_round_trip(u in 0.0f64..639.99, v in 0.0f64..479.99, d in 0.05f64..20.0) {
                let i = intr();
                let p = unproject(u, v, d, &i).unwrap();
                let q = project(&p, &i).unwrap();
                prop_assert!((q.u - u).abs() < 1e-6);
                prop_assert!((q.v - v).abs() < 1e-6);
                prop_assert!((q.z - d).abs() < 1e-6);
            }

            #[test]
            fn pose_inverse_composes_to_identity(
                ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
                tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            ) {
                let r = nalgebra::Rotation3::from_euler_angles(ax, ay, az).into_inner();
                let pose = Pose::from_rotation_translation(r, Vec3::new(tx, ty, tz)).unwrap();
                let id = pose.compose(&pose.inverse());
                prop_assert!((id.matrix() - Matrix4::identity()).abs().max() < 1e-6);
            }

            #[test]
            fn transform_inverts_apply(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0, a in -3.0f64..3.0) {
                let r = nalgebra::Rotation3::from_euler_angles(a, 0.3, -a).into_inner();
                let pose = Pose::from_rotation_translation(r, Vec3::new(1.0, -2.0, 0.5)).unwrap();
                let p = Point3::new(x, y, z);
                let back = pose.apply(&transform(&pose, &p));
                prop_assert!((back - p).norm() < 1e-9);
            }
        }
    }
}
