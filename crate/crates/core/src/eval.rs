//! Recall at IoU thresholds and average precision against ground truth.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::GroundTruth;
use crate::postprocess::{BoundingBox, DetectionSet};

pub const DEFAULT_KS: [f64; 3] = [0.20, 0.25, 0.50];
pub const AP_IOU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    #[default]
    Point,
    Box,
}

/// `|a ∩ b| / |a ∪ b|` for sets of point indices; 0 when both are empty.
pub fn iou(a: &[u32], b: &[u32]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of every (ground truth, detection) pair.
pub fn iou_matrix(dets: &DetectionSet, gt: &GroundTruth, mode: IouMode, cloud: Option<&PointCloud>) -> Result<Vec<Vec<f64>>> {
    match mode {
        IouMode::Point => Ok(gt
            .changed_instances
            .iter()
            .map(|g| dets.detections.iter().map(|d| iou(&d.point_indices, &g.point_indices)).collect())
            .collect()),
        IouMode::Box => {
            let cloud = cloud.ok_or_else(|| Error::invalid("box IoU needs the rescan cloud"))?;
            let bbox = |pts: &[u32]| -> Result<Option<BoundingBox>> {
                if let Some(&bad) = pts.iter().find(|&&p| p as usize >= cloud.len()) {
                    return Err(Error::invalid(format!("point index {bad} beyond the rescan cloud")));
                }
                Ok(BoundingBox::of(pts.iter().map(|&p| cloud.positions[p as usize])))
            };
            let det_boxes = dets
                .detections
                .iter()
                .map(|d| bbox(&d.point_indices))
                .collect::<Result<Vec<_>>>()?;
            gt.changed_instances
                .iter()
                .map(|g| {
                    let gb = bbox(&g.point_indices)?;
                    Ok(det_boxes
                        .iter()
                        .map(|db| match (db, &gb) {
                            (Some(a), Some(b)) => a.iou(b),
                            _ => 0.0,
                        })
                        .collect())
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtMatch {
    pub instance_id: u32,
    pub detection_id: Option<u32>,
    pub iou: f64,
}

/// One-to-one matching: pairs taken greedily by descending IoU, ties by
/// lower detection id then lower ground-truth index. Zero-IoU pairs never match.
pub fn greedy_match(ious: &[Vec<f64>], gt: &GroundTruth, dets: &DetectionSet) -> Vec<GtMatch> {
    let mut pairs: Vec<(f64, u32, usize, usize)> = Vec::new();
    for (g, row) in ious.iter().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            if v > 0.0 {
                pairs.push((v, dets.detections[d].id, g, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matches: Vec<GtMatch> = gt
        .changed_instances
        .iter()
        .map(|g| GtMatch {
            instance_id: g.instance_id,
            detection_id: None,
            iou: 0.0,
        })
        .collect();
    let mut used = vec![false; dets.len()];
    for (v, id, g, d) in pairs {
        if matches[g].detection_id.is_none() && !used[d] {
            used[d] = true;
            matches[g].detection_id = Some(id);
            matches[g].iou = v;
        }
    }
    matches
}

/// Percentage of ground-truth objects whose matched IoU exceeds `k`.
pub fn recall_from_matches(matches: &[GtMatch], k: f64) -> Result<f64> {
    if matches.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let hits = matches.iter().filter(|m| m.detection_id.is_some() && m.iou > k).count();
    Ok(100.0 * hits as f64 / matches.len() as f64)
}

pub fn recall_at(dets: &DetectionSet, gt: &GroundTruth, k: f64) -> Result<f64> {
    let ious = iou_matrix(dets, gt, IouMode::Point, None)?;
    recall_from_matches(&greedy_match(&ious, gt, dets), k)
}

/// All-point interpolated average precision. Detections are ranked by
/// descending score (ties by lower id); each takes the best still-free
/// ground truth and is a true positive if that IoU exceeds `k`.
pub fn average_precision_from(ious: &[Vec<f64>], dets: &DetectionSet, k: f64) -> f64 {
    let n_gt = ious.len();
    if n_gt == 0 || dets.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets.detections[a], &dets.detections[b]);
        db.score.total_cmp(&da.score).then(da.id.cmp(&db.id))
    });
    let mut taken = vec![false; n_gt];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (rank, d) in order.into_iter().enumerate() {
        let best = (0..n_gt)
            .filter(|&g| !taken[g])
            .max_by(|&a, &b| ious[a][d].total_cmp(&ious[b][d]).then(b.cmp(&a)));
        if let Some(g) = best.filter(|&g| ious[g][d] > k) {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope from the right, then area over recall steps.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn average_precision(dets: &DetectionSet, gt: &GroundTruth, k: f64) -> f64 {
    let ious = iou_matrix(dets, gt, IouMode::Point, None).unwrap_or_default();
    average_precision_from(&ious, dets, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_mode: IouMode,
    pub recall: Vec<RecallAt>,
    pub ap_iou: f64,
    pub ap: f64,
    pub matches: Vec<GtMatch>,
    pub n_detections: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: f64) -> Option<f64> {
        self.recall.iter().find(|r| (r.k - k).abs() < 1e-12).map(|r| r.recall)
    }

    /// Plain-text table: one column per recall threshold plus AP.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for r in &self.recall {
            let h = format!("Recall@{:.2}", r.k);
            let _ = write!(head, "{h:>13}");
            let _ = write!(row, "{:>13.2}", r.recall);
        }
        let h = format!("AP@{:.2}", self.ap_iou);
        let _ = write!(head, "{h:>10}");
        let _ = write!(row, "{:>10.3}", self.ap);
        let mut out = format!("{head}\n{row}\n");
        for m in &self.matches {
            let det = m.detection_id.map_or("-".to_string(), |d| d.to_string());
            let _ = writeln!(out, "  instance {:>4} -> detection {det:>4}  IoU {:.3}", m.instance_id, m.iou);
        }
        out
    }
}

pub fn evaluate(
    dets: &DetectionSet,
    gt: &GroundTruth,
    ks: &[f64],
    mode: IouMode,
    cloud: Option<&PointCloud>,
) -> Result<EvalReport> {
    if gt.changed_instances.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let ious = iou_matrix(dets, gt, mode, cloud)?;
    let matches = greedy_match(&ious, gt, dets);
    let recall = ks
        .iter()
        .map(|&k| Ok(RecallAt {
            k,
            recall: recall_from_matches(&matches, k)?,
        }))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        iou_mode: mode,
        recall,
        ap_iou: AP_IOU,
        ap: average_precision_from(&ious, dets, AP_IOU),
        matches,
        n_detections: dets.len(),
    })
}
