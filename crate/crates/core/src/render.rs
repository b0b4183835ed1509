//! Z-buffered depth rendering of meshes and point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform, CameraView, DepthImage, Point3, PointCloud, TriMesh};

/// Camera-space depth below which geometry is clipped.
const NEAR_PLANE: f64 = 1e-3;

/// Marks a pixel not covered by any primitive in an index buffer.
pub const NO_PRIMITIVE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub max_range: f64,
    pub splat_radius_px: u32,
    pub backface_culling: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            max_range: 10.0,
            splat_radius_px: 1,
            backface_culling: false,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_range > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("render max_range must be positive"))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Geometry<'a> {
    Mesh(&'a TriMesh),
    Cloud(&'a PointCloud),
}

/// Depth image plus, per pixel, the face (mesh) or point (cloud) index that
/// produced it.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub depth: DepthImage,
    pub primitive: Vec<u32>,
}

pub fn render_depth(geometry: Geometry, view: &CameraView, opts: &RenderOptions) -> DepthImage {
    render(geometry, view, opts).depth
}

pub fn render(geometry: Geometry, view: &CameraView, opts: &RenderOptions) -> RenderOutput {
    match geometry {
        Geometry::Mesh(mesh) => render_mesh(mesh, view, opts),
        Geometry::Cloud(cloud) => render_cloud(cloud, view, opts),
    }
}

/// Renders every view; views are independent and may run in parallel.
pub fn render_views(geometry: Geometry, views: &[CameraView], opts: &RenderOptions) -> Vec<DepthImage> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        views.par_iter().map(|v| render_depth(geometry, v, opts)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        views.iter().map(|v| render_depth(geometry, v, opts)).collect()
    }
}

struct Target {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    primitive: Vec<u32>,
}

impl Target {
    fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Target {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            primitive: vec![NO_PRIMITIVE; n],
        }
    }

    #[inline]
    fn write(&mut self, col: u32, row: u32, z: f64, id: u32) {
        let i = row as usize * self.width as usize + col as usize;
        // Ties keep the lower primitive index so output is order independent.
        if z < self.depth[i] || (z == self.depth[i] && id < self.primitive[i]) {
            self.depth[i] = z;
            self.primitive[i] = id;
        }
    }

    fn finish(self) -> RenderOutput {
        let values = self
            .depth
            .iter()
            .map(|&d| if d.is_finite() { d as f32 } else { 0.0 })
            .collect();
        RenderOutput {
            depth: DepthImage {
                width: self.width,
                height: self.height,
                values,
            },
            primitive: self.primitive,
        }
    }
}

/// Clips a camera-space polygon to `z >= NEAR_PLANE`.
fn clip_near(poly: &[Point3]) -> Vec<Point3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.z >= NEAR_PLANE;
        let b_in = b.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn render_mesh(mesh: &TriMesh, view: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let intr = &view.intrinsics;
    let mut target = Target::new(intr.width, intr.height);
    let cam: Vec<Point3> = mesh.vertices.iter().map(|p| transform(&view.pose, p)).collect();

    for (fi, face) in mesh.faces.iter().enumerate() {
        let tri = face.map(|i| cam[i as usize]);
        if opts.backface_culling {
            let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
            if n.dot(&tri[0].coords) >= 0.0 {
                continue;
            }
        }
        if tri.iter().all(|p| p.z < NEAR_PLANE) {
            continue;
        }
        let poly = if tri.iter().all(|p| p.z >= NEAR_PLANE) {
            tri.to_vec()
        } else {
            clip_near(&tri)
        };
        // Screen-space vertices carrying 1/z.
        let screen: Vec<[f64; 3]> = poly
            .iter()
            .map(|p| {
                [
                    intr.fx * p.x / p.z + intr.cx,
                    intr.fy * p.y / p.z + intr.cy,
                    1.0 / p.z,
                ]
            })
            .collect();
        for k in 1..screen.len().saturating_sub(1) {
            raster_triangle(&mut target, [screen[0], screen[k], screen[k + 1]], fi as u32, opts.max_range);
        }
    }
    target.finish()
}

fn raster_triangle(target: &mut Target, v: [[f64; 3]; 3], id: u32, max_range: f64) {
    let area = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
    if area.abs() < 1e-18 {
        return;
    }
    let min_x = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    // Pixel centers at integer + 0.5.
    let c0 = (min_x - 0.5).ceil().max(0.0);
    let c1 = (max_x - 0.5).floor().min(target.width as f64 - 1.0);
    let r0 = (min_y - 0.5).ceil().max(0.0);
    let r1 = (max_y - 0.5).floor().min(target.height as f64 - 1.0);
    if c0 > c1 || r0 > r1 {
        return;
    }
    let edge = |a: [f64; 3], b: [f64; 3], x: f64, y: f64| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    for row in r0 as u32..=r1 as u32 {
        let y = row as f64 + 0.5;
        for col in c0 as u32..=c1 as u32 {
            let x = col as f64 + 0.5;
            let w0 = edge(v[1], v[2], x, y) / area;
            let w1 = edge(v[2], v[0], x, y) / area;
            let w2 = edge(v[0], v[1], x, y) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let inv_z = w0 * v[0][2] + w1 * v[1][2] + w2 * v[2][2];
            if inv_z <= 0.0 {
                continue;
            }
            let z = 1.0 / inv_z;
            if z <= max_range {
                target.write(col, row, z, id);
            }
        }
    }
}

fn render_cloud(cloud: &PointCloud, view: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let intr = &view.intrinsics;
    let mut target = Target::new(intr.width, intr.height);
    let r = opts.splat_radius_px as i64;
    for (i, p) in cloud.positions.iter().enumerate() {
        let Some(proj) = view.project_world(p) else {
            continue;
        };
        if proj.z > opts.max_range {
            continue;
        }
        let (c, rw) = proj.pixel();
        for dr in -r..=r {
            for dc in -r..=r {
                let (cc, rr) = (c as i64 + dc, rw as i64 + dr);
                if cc >= 0 && rr >= 0 && cc < intr.width as i64 && rr < intr.height as i64 {
                    target.write(cc as u32, rr as u32, proj.z, i as u32);
                }
            }
        }
    }
    target.finish()
}
