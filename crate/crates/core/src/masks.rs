//! Lifting 2D label maps onto points and supervoxels, and the edge
//! indicators derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthImage, LabelImage, PointCloud};
use crate::supervoxel::SupervoxelGraph;

pub const DEFAULT_DEPTH_TOL: f64 = 0.05;

/// How per-point ids of one view are reduced to a supervoxel id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVote {
    /// Most frequent id among visible points, where a visible point on
    /// label 0 votes for 0.
    #[default]
    Visible,
    /// Most frequent nonzero id; points on label 0 abstain.
    Nonzero,
}

/// Per-supervoxel mask ids of one source, keyed by view index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAssignment {
    pub source: String,
    pub per_view: BTreeMap<u32, Vec<u16>>,
}

/// One weight per edge of the graph, in the graph's edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights {
    pub edges: Vec<(u32, u32)>,
    pub weights: Vec<f64>,
}

impl EdgeWeights {
    pub fn active_count(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }
}

/// Label under each point, or `None` when the point falls outside the image
/// or is not the visible surface at its pixel.
pub fn visible_point_masks(
    cloud: &PointCloud,
    view: &CameraView,
    labels: &LabelImage,
    rendered_rescan_depth: &DepthImage,
    depth_tol: f64,
) -> Vec<Option<u16>> {
    cloud
        .positions
        .iter()
        .map(|p| {
            let proj = view.project_world(p)?;
            let (col, row) = proj.pixel();
            if col >= labels.width || row >= labels.height {
                return None;
            }
            match rendered_rescan_depth.get(col, row) {
                Some(d) if (proj.z - d).abs() <= depth_tol => Some(labels.get(col, row)),
                _ => None,
            }
        })
        .collect()
}

/// Label of each point under `labels`, or 0 when the point falls outside
/// the image or is not the visible surface at its pixel.
pub fn assign_point_masks(
    cloud: &PointCloud,
    view: &CameraView,
    labels: &LabelImage,
    rendered_rescan_depth: &DepthImage,
    depth_tol: f64,
) -> Vec<u16> {
    visible_point_masks(cloud, view, labels, rendered_rescan_depth, depth_tol)
        .into_iter()
        .map(|m| m.unwrap_or(0))
        .collect()
}

/// Most frequent nonzero id per supervoxel; ties go to the smaller id.
pub fn supervoxel_mask(graph: &SupervoxelGraph, point_masks: &[u16]) -> Vec<u16> {
    let votes: Vec<Option<u16>> = point_masks.iter().map(|&m| (m != 0).then_some(m)).collect();
    supervoxel_mask_visible(graph, &votes)
}

/// Most frequent id among points with a vote, 0 included; ties go to the
/// smaller id.
pub fn supervoxel_mask_visible(graph: &SupervoxelGraph, point_masks: &[Option<u16>]) -> Vec<u16> {
    graph
        .supervoxels
        .iter()
        .map(|sv| {
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            for &p in &sv.point_indices {
                if let Some(id) = point_masks.get(p as usize).copied().flatten() {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let mut best = (0u16, 0usize);
            for (id, c) in counts {
                if c > best.1 {
                    best = (id, c);
                }
            }
            best.0
        })
        .collect()
}

/// Mask assignment of every listed source over all views carrying it.
pub fn assign_masks(
    cloud: &PointCloud,
    graph: &SupervoxelGraph,
    views: &[CameraView],
    rescan_depths: &[DepthImage],
    sources: &[String],
    depth_tol: f64,
    vote: MaskVote,
) -> Result<Vec<MaskAssignment>> {
    if views.len() != rescan_depths.len() {
        return Err(Error::DimensionMismatch("one rendered rescan depth per view is required".into()));
    }
    if !(depth_tol >= 0.0) {
        return Err(Error::invalid(format!("depth tolerance must be >= 0, got {depth_tol}")));
    }
    let mut out = Vec::with_capacity(sources.len());
    for source in sources {
        let jobs: Vec<(u32, &LabelImage)> = views
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.labels.get(source).map(|l| (i as u32, l)))
            .collect();
        if jobs.is_empty() {
            return Err(Error::invalid(format!("no view carries mask source `{source}`")));
        }
        let run = |&(i, labels): &(u32, &LabelImage)| -> Result<(u32, Vec<u16>)> {
            let depth = &rescan_depths[i as usize];
            if labels.width != depth.width || labels.height != depth.height {
                return Err(Error::DimensionMismatch(format!(
                    "view {i}: `{source}` labels are {}x{}, depth is {}x{}",
                    labels.width, labels.height, depth.width, depth.height
                )));
            }
            let mut pm = visible_point_masks(cloud, &views[i as usize], labels, depth, depth_tol);
            if vote == MaskVote::Nonzero {
                pm.iter_mut().for_each(|m| *m = m.filter(|&id| id != 0));
            }
            Ok((i, supervoxel_mask_visible(graph, &pm)))
        };
        #[cfg(feature = "parallel")]
        let per_view: BTreeMap<u32, Vec<u16>> = {
            use rayon::prelude::*;
            jobs.par_iter().map(run).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let per_view: BTreeMap<u32, Vec<u16>> = jobs.iter().map(run).collect::<Result<_>>()?;
        out.push(MaskAssignment {
            source: source.clone(),
            per_view,
        });
    }
    Ok(out)
}

/// `1` on edges whose endpoints share a nonzero mask in at least one view of
/// at least one source, else `0`.
pub fn same_mask_edges(graph: &SupervoxelGraph, assignments: &[MaskAssignment]) -> EdgeWeights {
    let weights = graph
        .edges
        .iter()
        .map(|&(a, b)| {
            let linked = assignments.iter().flat_map(|m| m.per_view.values()).any(|masks| {
                let ma = masks.get(a as usize).copied().unwrap_or(0);
                ma != 0 && masks.get(b as usize).copied() == Some(ma)
            });
            if linked {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    EdgeWeights {
        edges: graph.edges.clone(),
        weights,
    }
}

/// `gamma / (|c_a - c_b|^2 + 1)` from supervoxel mean colors in `[0, 1]^3`.
pub fn photoconsistency_weights(graph: &SupervoxelGraph, cloud: &PointCloud, gamma: f64) -> Result<EdgeWeights> {
    if cloud.colors.is_none() {
        return Err(Error::invalid("photoconsistency weights need a colored cloud"));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let weights = graph
        .edges
        .iter()
        .map(|&(a, b)| {
            let d = graph.supervoxels[a as usize].mean_color - graph.supervoxels[b as usize].mean_color;
            gamma / (d.norm_squared() + 1.0)
        })
        .collect();
    Ok(EdgeWeights {
        edges: graph.edges.clone(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Point3, Pose, Vec3};
    use crate::supervoxel::Supervoxel;

    fn graph(groups: &[&[u32]], edges: &[(u32, u32)]) -> SupervoxelGraph {
        let n: usize = groups.iter().map(|g| g.len()).sum();
        let mut assignment = vec![0; n];
        let supervoxels = groups
            .iter()
            .enumerate()
            .map(|(s, pts)| {
                for &p in pts.iter() {
                    assignment[p as usize] = s as u32;
                }
                Supervoxel {
                    centroid: Point3::origin(),
                    mean_color: Vec3::zeros(),
                    mean_normal: Vec3::z(),
                    point_indices: pts.to_vec(),
                }
            })
            .collect();
        SupervoxelGraph {
            assignment,
            supervoxels,
            edges: edges.to_vec(),
        }
    }

    fn view() -> CameraView {
        CameraView::new(Pose::identity(), Intrinsics::new(10.0, 10.0, 5.0, 5.0, 10, 10).unwrap())
    }

    #[test]
    fn point_mask_visibility() {
        let v = view();
        let labels = LabelImage::from_ids(10, 10, vec![7; 100]).unwrap();
        let depth = DepthImage::from_values(10, 10, vec![2.0; 100]).unwrap();
        let cloud = PointCloud::from_positions(vec![
            Point3::new(0.0, 0.0, 2.0),
            Point3::new(0.0, 0.0, 2.4),
            Point3::new(5.0, 0.0, 2.0),
            Point3::new(0.0, 0.0, 2.04),
        ]);
        assert_eq!(assign_point_masks(&cloud, &v, &labels, &depth, 0.05), vec![7, 0, 0, 7]);
    }

    #[test]
    fn invalid_depth_gives_zero() {
        let v = view();
        let labels = LabelImage::from_ids(10, 10, vec![7; 100]).unwrap();
        let depth = DepthImage::new(10, 10);
        let cloud = PointCloud::from_positions(vec![Point3::new(0.0, 0.0, 2.0)]);
        assert_eq!(assign_point_masks(&cloud, &v, &labels, &depth, 0.05), vec![0]);
    }

    #[test]
    fn majority_vote() {
        let g = graph(&[&[0, 1, 2], &[3, 4], &[5, 6, 7, 8]], &[]);
        let pm = vec![7, 7, 3, 0, 0, 5, 9, 9, 5];
        assert_eq!(supervoxel_mask(&g, &pm), vec![7, 0, 5]);
    }

    #[test]
    fn background_votes_when_visible() {
        let g = graph(&[&[0, 1, 2, 3], &[4, 5]], &[]);
        let pm = vec![Some(0), Some(0), Some(7), None, None, Some(4)];
        assert_eq!(supervoxel_mask_visible(&g, &pm), vec![0, 4]);
        let pm = vec![Some(0), Some(7), Some(7), None, None, None];
        assert_eq!(supervoxel_mask_visible(&g, &pm), vec![7, 0]);
    }

    #[test]
    fn same_mask_indicator() {
        let g = graph(&[&[0], &[1], &[2]], &[(0, 1), (1, 2)]);
        let mut per_view = BTreeMap::new();
        for v in 0..10u32 {
            let masks = if v == 3 { vec![4, 7, 7] } else { vec![1, 2, 3] };
            per_view.insert(v, masks);
        }
        let m = MaskAssignment {
            source: "color".into(),
            per_view,
        };
        let w = same_mask_edges(&g, &[m.clone()]);
        assert_eq!(w.weights, vec![0.0, 1.0]);

        let zero = MaskAssignment {
            source: "depth".into(),
            per_view: BTreeMap::from([(0, vec![0, 0, 0])]),
        };
        assert_eq!(same_mask_edges(&g, &[zero.clone()]).weights, vec![0.0, 0.0]);

        let other = MaskAssignment {
            source: "depth".into(),
            per_view: BTreeMap::from([(0, vec![5, 5, 0])]),
        };
        assert_eq!(same_mask_edges(&g, &[m, other]).weights, vec![1.0, 1.0]);
    }

    #[test]
    fn photoconsistency() {
        let mut g = graph(&[&[0], &[1], &[2]], &[(0, 1), (1, 2)]);
        g.supervoxels[2].mean_color = Vec3::new(1.0, 1.0, 1.0);
        let cloud = PointCloud {
            colors: Some(vec![[0, 0, 0]; 3]),
            ..PointCloud::from_positions(vec![Point3::origin(); 3])
        };
        let w = photoconsistency_weights(&g, &cloud, 1.0).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.25]);
        let w = photoconsistency_weights(&g, &cloud, 0.0).unwrap();
        assert_eq!(w.weights, vec![0.0, 0.0]);
        let bare = PointCloud::from_positions(vec![Point3::origin(); 3]);
        assert!(photoconsistency_weights(&g, &bare, 1.0).is_err());
    }

    #[test]
    fn missing_source_rejected() {
        let g = graph(&[&[0]], &[]);
        let cloud = PointCloud::from_positions(vec![Point3::new(0.0, 0.0, 2.0)]);
        let err = assign_masks(&cloud, &g, &[view()], &[DepthImage::new(10, 10)], &["color".into()], 0.05, MaskVote::Visible);
        assert!(err.is_err());
    }
}
