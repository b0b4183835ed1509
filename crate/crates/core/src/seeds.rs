//! Render-and-compare seeding: depth residuals between the two scans,
//! thresholding, and back-projection of flagged pixels onto the rescan cloud.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthImage, PointCloud};
use crate::spatial::PointGrid;

/// Per-pixel `|d_ref - d_rescan|`, valid only where both depths are valid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualImage {
    pub width: u32,
    pub height: u32,
    pub residuals: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub set: Vec<bool>,
}

impl PixelMask {
    pub fn count(&self) -> usize {
        self.set.iter().filter(|b| **b).count()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.set
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed,
    RobustMad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    pub tau_fixed: f64,
    pub mad_k: f64,
    pub tau_min: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            mode: ThresholdMode::Fixed,
            tau_fixed: 0.10,
            mad_k: 6.0,
            tau_min: 0.05,
        }
    }
}

impl ThresholdPolicy {
    pub fn fixed(tau: f64) -> Self {
        ThresholdPolicy {
            tau_fixed: tau,
            ..Default::default()
        }
    }

    pub fn robust_mad() -> Self {
        ThresholdPolicy {
            mode: ThresholdMode::RobustMad,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_fixed > 0.0 && self.mad_k > 0.0 && self.tau_min > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("threshold policy values must be positive"))
        }
    }
}

/// Which scan's depth places a flagged pixel in 3D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSurface {
    /// Only pixels where the rescan surface lies in front of the reference
    /// one. Where it lies behind, the rescan shows background uncovered by
    /// something that left, and that background did not change.
    Nearer,
    /// Always the rescan depth.
    Rescan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackprojectOptions {
    pub snap_radius: f64,
    pub surface: SeedSurface,
}

impl Default for BackprojectOptions {
    fn default() -> Self {
        BackprojectOptions {
            snap_radius: 0.03,
            surface: SeedSurface::Nearer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRef {
    pub view: u32,
    pub col: u32,
    pub row: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub point: u32,
    pub pixels: Vec<PixelRef>,
}

/// Seed points on the rescan cloud, each with the pixels that produced it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    seeds: BTreeMap<u32, Vec<PixelRef>>,
}

impl SeedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, point: u32, pixel: PixelRef) {
        let pixels = self.seeds.entry(point).or_default();
        if let Err(pos) = pixels.binary_search(&pixel) {
            pixels.insert(pos, pixel);
        }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn contains(&self, point: u32) -> bool {
        self.seeds.contains_key(&point)
    }

    /// Seed point indices in ascending order.
    pub fn point_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.seeds.keys().copied()
    }

    pub fn provenance(&self, point: u32) -> Option<&[PixelRef]> {
        self.seeds.get(&point).map(Vec::as_slice)
    }

    pub fn merge(&mut self, other: SeedSet) {
        for (p, pixels) in other.seeds {
            for px in pixels {
                self.insert(p, px);
            }
        }
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        match self.seeds.keys().next_back() {
            Some(&max) if max as usize >= n_points => Err(Error::invalid(format!(
                "seed index {max} out of range for {n_points} points"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SeedFile {
    point_indices: Vec<u32>,
    provenance: Vec<SeedEntry>,
}

impl Serialize for SeedSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SeedFile {
            point_indices: self.point_indices().collect(),
            provenance: self
                .seeds
                .iter()
                .map(|(&point, pixels)| SeedEntry {
                    point,
                    pixels: pixels.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SeedSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = SeedFile::deserialize(d)?;
        let mut set = SeedSet::new();
        for e in file.provenance {
            for px in e.pixels {
                set.insert(e.point, px);
            }
        }
        for p in file.point_indices {
            if !set.contains(p) {
                return Err(serde::de::Error::custom(format!("seed {p} has no provenance entry")));
            }
        }
        Ok(set)
    }
}

pub fn depth_residual(reference: &DepthImage, rescan: &DepthImage) -> Result<ResidualImage> {
    if reference.width != rescan.width || reference.height != rescan.height {
        return Err(Error::DimensionMismatch(format!(
            "reference depth {}x{} vs rescan depth {}x{}",
            reference.width, reference.height, rescan.width, rescan.height
        )));
    }
    let (residuals, valid) = reference
        .values
        .iter()
        .zip(&rescan.values)
        .map(|(&a, &b)| {
            if a > 0.0 && b > 0.0 {
                ((a as f64 - b as f64).abs(), true)
            } else {
                (0.0, false)
            }
        })
        .unzip();
    Ok(ResidualImage {
        width: reference.width,
        height: reference.height,
        residuals,
        valid,
    })
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median absolute deviation about the median.
pub fn median_absolute_deviation(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    Some(median(&mut dev))
}

/// Threshold actually applied to a residual image under `policy`.
pub fn effective_threshold(residual: &ResidualImage, policy: &ThresholdPolicy) -> f64 {
    match policy.mode {
        ThresholdMode::Fixed => policy.tau_fixed,
        ThresholdMode::RobustMad => {
            let valid: Vec<f64> = residual
                .residuals
                .iter()
                .zip(&residual.valid)
                .filter(|(_, v)| **v)
                .map(|(r, _)| *r)
                .collect();
            let mad = median_absolute_deviation(&valid).unwrap_or(0.0);
            policy.tau_min.max(policy.mad_k * mad)
        }
    }
}

pub fn threshold(residual: &ResidualImage, policy: &ThresholdPolicy) -> PixelMask {
    let tau = effective_threshold(residual, policy);
    PixelMask {
        width: residual.width,
        height: residual.height,
        set: residual
            .residuals
            .iter()
            .zip(&residual.valid)
            .map(|(r, v)| *v && *r > tau)
            .collect(),
    }
}

/// Lifts flagged pixels to 3D and snaps each to the nearest rescan point
/// within the snap radius; pixels with nothing in reach are dropped.
pub fn backproject_seeds(
    mask: &PixelMask,
    reference_depth: &DepthImage,
    rescan_depth: &DepthImage,
    view: &CameraView,
    view_id: u32,
    rescan: &PointGrid,
    opts: &BackprojectOptions,
) -> SeedSet {
    let mut seeds = SeedSet::new();
    for (col, row) in mask.iter_set() {
        let Some(d_res) = rescan_depth.get(col, row) else {
            continue;
        };
        if opts.surface == SeedSurface::Nearer && reference_depth.get(col, row).is_some_and(|d_ref| d_res > d_ref) {
            continue;
        }
        let Ok(world) = view.pixel_to_world(col, row, d_res) else {
            continue;
        };
        if let Some((idx, _)) = rescan.nearest_within(&world, opts.snap_radius) {
            seeds.insert(idx as u32, PixelRef { view: view_id, col, row });
        }
    }
    seeds
}

/// Union of per-view seed sets.
pub fn accumulate(sets: impl IntoIterator<Item = SeedSet>) -> SeedSet {
    sets.into_iter().fold(SeedSet::new(), |mut acc, s| {
        acc.merge(s);
        acc
    })
}

/// Full seeding over all views given pre-rendered depth maps of both scans.
pub fn detect_seeds(
    views: &[CameraView],
    reference_depths: &[DepthImage],
    rescan_depths: &[DepthImage],
    rescan: &PointCloud,
    policy: &ThresholdPolicy,
    opts: &BackprojectOptions,
) -> Result<SeedSet> {
    policy.validate()?;
    if views.len() != reference_depths.len() || views.len() != rescan_depths.len() {
        return Err(Error::DimensionMismatch("one depth map per view is required".into()));
    }
    let grid = PointGrid::new(&rescan.positions, opts.snap_radius.max(1e-3));
    let per_view = |i: usize| -> Result<SeedSet> {
        let residual = depth_residual(&reference_depths[i], &rescan_depths[i])?;
        let mask = threshold(&residual, policy);
        Ok(backproject_seeds(
            &mask,
            &reference_depths[i],
            &rescan_depths[i],
            &views[i],
            i as u32,
            &grid,
            opts,
        ))
    };
    #[cfg(feature = "parallel")]
    let sets: Vec<SeedSet> = {
        use rayon::prelude::*;
        (0..views.len()).into_par_iter().map(per_view).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let sets: Vec<SeedSet> = (0..views.len()).map(per_view).collect::<Result<_>>()?;
    Ok(accumulate(sets))
}
