//! From changed supervoxels to scored object detections.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::io::ply::{save_point_cloud, PlyFormat};
use crate::seeds::SeedSet;
use crate::spatial::{cell_of, neighbor_offsets, offset, CellKey};
use crate::supervoxel::SupervoxelGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentParams {
    pub step: f64,
    pub min_points: usize,
}

impl Default for ComponentParams {
    fn default() -> Self {
        ComponentParams {
            step: 0.10,
            min_points: 50,
        }
    }
}

impl ComponentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::invalid(format!("component step must be > 0, got {}", self.step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn of(points: impl Iterator<Item = Point3>) -> Option<Self> {
        let mut it = points.peekable();
        let first = *it.peek()?;
        let mut b = BoundingBox {
            min: [first.x, first.y, first.z],
            max: [first.x, first.y, first.z],
        };
        for p in it {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).max(0.0)).product()
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter: f64 = (0..3)
            .map(|k| (self.max[k].min(other.max[k]) - self.min[k].max(other.min[k])).max(0.0))
            .product();
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            return if self == other { 1.0 } else { 0.0 };
        }
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u32,
    pub score: f64,
    pub point_indices: Vec<u32>,
}

impl Detection {
    pub fn bbox(&self, cloud: &PointCloud) -> Option<BoundingBox> {
        BoundingBox::of(self.point_indices.iter().map(|&i| cloud.positions[i as usize]))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    /// Snapshot of the parameters that produced the set.
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        let mut seen = vec![false; n_points];
        for d in &self.detections {
            if d.point_indices.is_empty() {
                return Err(Error::invalid(format!("detection {} is empty", d.id)));
            }
            if !d.score.is_finite() || d.score < 0.0 {
                return Err(Error::invalid(format!("detection {} has score {}", d.id, d.score)));
            }
            for &p in &d.point_indices {
                let slot = seen
                    .get_mut(p as usize)
                    .ok_or_else(|| Error::invalid(format!("detection {} has point {p} out of range", d.id)))?;
                if *slot {
                    return Err(Error::invalid(format!("point {p} belongs to two detections")));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

/// Points of every supervoxel labeled changing, sorted.
pub fn changed_points(graph: &SupervoxelGraph, labels: &[bool]) -> Result<Vec<u32>> {
    if labels.len() != graph.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} supervoxels",
            labels.len(),
            graph.len()
        )));
    }
    let mut pts: Vec<u32> = graph
        .supervoxels
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .flat_map(|(sv, _)| sv.point_indices.iter().copied())
        .collect();
    pts.sort_unstable();
    Ok(pts)
}

/// Splits `points` into 26-connected components of a `step` voxel grid and
/// drops components with fewer than `min_points` points. Scores are zero;
/// see [`score`].
pub fn connected_components(points: &[u32], cloud: &PointCloud, params: &ComponentParams) -> Result<DetectionSet> {
    params.validate()?;
    let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
    for &p in points {
        let pos = cloud
            .positions
            .get(p as usize)
            .ok_or_else(|| Error::invalid(format!("point {p} out of range")))?;
        cells.entry(cell_of(pos, params.step)).or_default().push(p);
    }
    let keys: BTreeSet<CellKey> = cells.keys().copied().collect();
    let mut seen = BTreeSet::new();
    let mut groups: Vec<Vec<u32>> = Vec::new();
    for &start in &keys {
        if !seen.insert(start) {
            continue;
        }
        let mut members = Vec::new();
        let mut stack = vec![start];
        while let Some(k) = stack.pop() {
            members.extend_from_slice(&cells[&k]);
            for d in neighbor_offsets() {
                let n = offset(k, d);
                if keys.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        if members.len() >= params.min_points.max(1) {
            members.sort_unstable();
            groups.push(members);
        }
    }
    let detections = groups
        .into_iter()
        .enumerate()
        .map(|(i, point_indices)| Detection {
            id: i as u32,
            score: 0.0,
            point_indices,
        })
        .collect();
    Ok(DetectionSet {
        detections,
        params: serde_json::json!({ "step": params.step, "min_points": params.min_points }),
        metrics: None,
    })
}

/// Scores each detection by its fraction of seed points, then orders by
/// descending score, size, and smallest point index, renumbering ids.
pub fn score(mut set: DetectionSet, seeds: &SeedSet) -> DetectionSet {
    for d in &mut set.detections {
        let hits = d.point_indices.iter().filter(|&&p| seeds.contains(p)).count();
        d.score = hits as f64 / d.point_indices.len() as f64;
    }
    set.detections.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.point_indices.len().cmp(&a.point_indices.len()))
            .then(a.point_indices.first().cmp(&b.point_indices.first()))
    });
    for (i, d) in set.detections.iter_mut().enumerate() {
        d.id = i as u32;
    }
    set
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// The rescan with detection points colored per detection and the rest gray.
pub fn colorize(cloud: &PointCloud, set: &DetectionSet) -> PointCloud {
    let mut colors = vec![[128, 128, 128]; cloud.len()];
    for d in &set.detections {
        for &p in &d.point_indices {
            colors[p as usize] = PALETTE[d.id as usize % PALETTE.len()];
        }
    }
    PointCloud {
        positions: cloud.positions.clone(),
        colors: Some(colors),
        normals: None,
        instance_ids: None,
    }
}

pub fn export_colored(path: &Path, cloud: &PointCloud, set: &DetectionSet) -> Result<()> {
    save_point_cloud(path, &colorize(cloud, set), PlyFormat::BinaryLittleEndian)
}
