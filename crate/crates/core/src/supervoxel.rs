//! Voxel-cloud supervoxels with 26-adjacency.
//!
//! The cloud is voxelized, one seed is placed per occupied seed-grid cell,
//! and supervoxels grow competitively through 26-connected voxels in a
//! joint color / spatial / normal distance. Growth is bounded so that every
//! point ends up within twice the seed resolution of its supervoxel
//! centroid; voxels no seed can reach start supervoxels of their own.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vec3};
use crate::seeds::SeedSet;
use crate::spatial::{cell_of, estimate_normals, neighbor_offsets, offset, CellKey, PointGrid};

const NORMAL_NEIGHBORS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervoxelParams {
    pub voxel_resolution: f64,
    pub seed_resolution: f64,
    pub weight_color: f64,
    pub weight_spatial: f64,
    pub weight_normal: f64,
    pub max_iterations: usize,
}

impl Default for SupervoxelParams {
    fn default() -> Self {
        SupervoxelParams {
            voxel_resolution: 0.02,
            seed_resolution: 0.25,
            weight_color: 0.2,
            weight_spatial: 0.4,
            weight_normal: 1.0,
            max_iterations: 5,
        }
    }
}

impl SupervoxelParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.weight_color, self.weight_spatial, self.weight_normal];
        if !(self.voxel_resolution > 0.0 && self.seed_resolution > self.voxel_resolution) {
            return Err(Error::invalid("need seed_resolution > voxel_resolution > 0"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("supervoxel weights must be >= 0 and not all zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supervoxel {
    pub centroid: Point3,
    pub mean_color: Vec3,
    pub mean_normal: Vec3,
    pub point_indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervoxelGraph {
    /// Supervoxel id of every point.
    pub assignment: Vec<u32>,
    pub supervoxels: Vec<Supervoxel>,
    /// Adjacent supervoxel pairs `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(u32, u32)>,
}

impl SupervoxelGraph {
    pub fn len(&self) -> usize {
        self.supervoxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supervoxels.is_empty()
    }

    /// Checks the partition and edge invariants against a cloud of `n_points`.
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.assignment.len() != n_points {
            return Err(Error::invalid(format!(
                "graph assigns {} points, cloud has {n_points}",
                self.assignment.len()
            )));
        }
        let n = self.supervoxels.len() as u32;
        let mut seen = vec![false; n_points];
        for (sid, sv) in self.supervoxels.iter().enumerate() {
            for &p in &sv.point_indices {
                let slot = seen
                    .get_mut(p as usize)
                    .ok_or_else(|| Error::invalid(format!("supervoxel {sid} has point {p} out of range")))?;
                if *slot || self.assignment[p as usize] != sid as u32 {
                    return Err(Error::invalid(format!("point {p} is not uniquely assigned")));
                }
                *slot = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("assignment is not total"));
        }
        for &(a, b) in &self.edges {
            if a >= b || b >= n {
                return Err(Error::invalid(format!("invalid edge ({a}, {b})")));
            }
        }
        Ok(())
    }

    /// Neighbor lists per supervoxel.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj
    }
}

struct Voxels {
    keys: Vec<CellKey>,
    centroid: Vec<Point3>,
    color: Vec<Vec3>,
    normal: Vec<Vec3>,
    /// CSR of point indices per voxel.
    point_start: Vec<usize>,
    points: Vec<u32>,
    /// CSR of 26-neighbors per voxel.
    nbr_start: Vec<usize>,
    nbrs: Vec<u32>,
}

impl Voxels {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn points_of(&self, v: usize) -> &[u32] {
        &self.points[self.point_start[v]..self.point_start[v + 1]]
    }

    fn neighbors(&self, v: usize) -> &[u32] {
        &self.nbrs[self.nbr_start[v]..self.nbr_start[v + 1]]
    }
}

/// Sign-invariant mean of unit normals.
fn mean_axis(normals: impl Iterator<Item = Vec3>) -> Vec3 {
    let mut acc = Vec3::zeros();
    let mut reference: Option<Vec3> = None;
    for n in normals {
        let r = *reference.get_or_insert(n);
        acc += if n.dot(&r) < 0.0 { -n } else { n };
    }
    acc.try_normalize(1e-12).unwrap_or_else(Vec3::z)
}

fn voxelize(cloud: &PointCloud, normals: &[Vec3], res: f64) -> Voxels {
    let n = cloud.len();
    let point_keys: Vec<CellKey> = cloud.positions.iter().map(|p| cell_of(p, res)).collect();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| point_keys[a as usize].cmp(&point_keys[b as usize]).then(a.cmp(&b)));

    let mut keys = Vec::new();
    let mut point_start = Vec::new();
    for (k, &p) in order.iter().enumerate() {
        let key = point_keys[p as usize];
        if keys.last() != Some(&key) {
            keys.push(key);
            point_start.push(k);
        }
    }
    point_start.push(n);

    let index: HashMap<CellKey, u32> = keys.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
    let mut centroid = Vec::with_capacity(keys.len());
    let mut color = Vec::with_capacity(keys.len());
    let mut normal = Vec::with_capacity(keys.len());
    let mut nbr_start = Vec::with_capacity(keys.len() + 1);
    let mut nbrs = Vec::new();
    for v in 0..keys.len() {
        let pts = &order[point_start[v]..point_start[v + 1]];
        let m = pts.len() as f64;
        let c = pts.iter().fold(Vec3::zeros(), |a, &p| a + cloud.positions[p as usize].coords) / m;
        centroid.push(Point3::from(c));
        let col = pts
            .iter()
            .map(|&p| cloud.color_unit(p as usize).unwrap_or_else(Vec3::zeros))
            .fold(Vec3::zeros(), |a, c| a + c)
            / m;
        color.push(col);
        normal.push(mean_axis(pts.iter().map(|&p| normals[p as usize])));
        nbr_start.push(nbrs.len());
        for d in neighbor_offsets() {
            if let Some(&u) = index.get(&offset(keys[v], d)) {
                nbrs.push(u);
            }
        }
    }
    nbr_start.push(nbrs.len());
    Voxels {
        keys,
        centroid,
        color,
        normal,
        point_start,
        points: order,
        nbr_start,
        nbrs,
    }
}

#[derive(Clone, Copy)]
struct Features {
    seed_voxel: u32,
    position: Point3,
    color: Vec3,
    normal: Vec3,
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    sv: u32,
    voxel: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Reversed for a min-heap; ties prefer the lower supervoxel then voxel id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.sv.cmp(&self.sv))
            .then(other.voxel.cmp(&self.voxel))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Grower<'a> {
    vox: &'a Voxels,
    params: &'a SupervoxelParams,
    reach: f64,
}

impl Grower<'_> {
    fn distance(&self, v: usize, f: &Features) -> f64 {
        let p = self.params;
        let dc2 = (self.vox.color[v] - f.color).norm_squared();
        let ds2 = (self.vox.centroid[v] - f.position).norm_squared();
        let dn = 1.0 - self.vox.normal[v].dot(&f.normal).abs();
        let spatial_scale = 3.0 * p.seed_resolution;
        (p.weight_color * dc2 + p.weight_spatial * ds2 / (spatial_scale * spatial_scale) + p.weight_normal * dn * dn)
            .sqrt()
    }

    fn in_reach(&self, v: usize, f: &Features) -> bool {
        (self.vox.centroid[v] - self.vox.centroid[f.seed_voxel as usize]).norm() <= self.reach
    }

    /// Competitive flood from the given supervoxels over unowned voxels.
    fn flood(&self, features: &[Features], ids: impl Iterator<Item = u32>, owner: &mut [u32]) {
        let mut heap = BinaryHeap::new();
        for sv in ids {
            let f = &features[sv as usize];
            heap.push(Candidate {
                dist: 0.0,
                sv,
                voxel: f.seed_voxel,
            });
        }
        while let Some(Candidate { sv, voxel, .. }) = heap.pop() {
            let v = voxel as usize;
            if owner[v] != u32::MAX {
                continue;
            }
            owner[v] = sv;
            let f = &features[sv as usize];
            for &u in self.vox.neighbors(v) {
                let u = u as usize;
                if owner[u] == u32::MAX && self.in_reach(u, f) {
                    heap.push(Candidate {
                        dist: self.distance(u, f),
                        sv,
                        voxel: u as u32,
                    });
                }
            }
        }
    }

    fn voxel_features(&self, v: usize) -> Features {
        Features {
            seed_voxel: v as u32,
            position: self.vox.centroid[v],
            color: self.vox.color[v],
            normal: self.vox.normal[v],
        }
    }

    /// One full assignment pass; returns per-voxel owners and the (possibly
    /// extended) feature list.
    fn assign(&self, mut features: Vec<Features>) -> (Vec<u32>, Vec<Features>) {
        let mut owner = vec![u32::MAX; self.vox.len()];
        self.flood(&features, 0..features.len() as u32, &mut owner);
        let mut next = 0usize;
        loop {
            while next < owner.len() && owner[next] != u32::MAX {
                next += 1;
            }
            if next == owner.len() {
                break;
            }
            let id = features.len() as u32;
            features.push(self.voxel_features(next));
            self.flood(&features, std::iter::once(id), &mut owner);
        }
        (owner, features)
    }

    /// Recomputes features from members; the new seed voxel is the member
    /// closest to the member centroid.
    fn update(&self, owner: &[u32], n_sv: usize) -> Vec<Features> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_sv];
        for (v, &o) in owner.iter().enumerate() {
            members[o as usize].push(v);
        }
        members
            .into_iter()
            .filter(|m| !m.is_empty())
            .map(|m| {
                let k = m.len() as f64;
                let pos = Point3::from(m.iter().fold(Vec3::zeros(), |a, &v| a + self.vox.centroid[v].coords) / k);
                let color = m.iter().fold(Vec3::zeros(), |a, &v| a + self.vox.color[v]) / k;
                let normal = mean_axis(m.iter().map(|&v| self.vox.normal[v]));
                let seed = *m
                    .iter()
                    .min_by(|&&a, &&b| {
                        (self.vox.centroid[a] - pos)
                            .norm_squared()
                            .total_cmp(&(self.vox.centroid[b] - pos).norm_squared())
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                Features {
                    seed_voxel: seed as u32,
                    position: pos,
                    color,
                    normal,
                }
            })
            .collect()
    }
}

/// Grid seeding: per occupied seed cell, the voxel nearest the cell center.
/// Seeds with no other voxel within half a seed resolution are isolated
/// noise and are dropped; their voxels are picked up as leftovers.
fn place_seeds(vox: &Voxels, seed_res: f64) -> Vec<u32> {
    let mut cells: HashMap<CellKey, (f64, u32)> = HashMap::new();
    for v in 0..vox.len() {
        let c = vox.centroid[v];
        let key = cell_of(&c, seed_res);
        let center = Point3::new(
            (key[0] as f64 + 0.5) * seed_res,
            (key[1] as f64 + 0.5) * seed_res,
            (key[2] as f64 + 0.5) * seed_res,
        );
        let d = (c - center).norm();
        let e = cells.entry(key).or_insert((f64::INFINITY, u32::MAX));
        if d < e.0 || (d == e.0 && (v as u32) < e.1) {
            *e = (d, v as u32);
        }
    }
    let grid = PointGrid::new(&vox.centroid, seed_res / 2.0);
    let mut seeds: Vec<(CellKey, u32)> = cells
        .into_iter()
        .filter(|(_, (_, v))| {
            let v = *v as usize;
            !vox.neighbors(v).is_empty()
                || grid
                    .k_nearest(&vox.centroid[v], 2)
                    .iter()
                    .any(|&u| u != v && (vox.centroid[u] - vox.centroid[v]).norm() <= seed_res / 2.0)
        })
        .map(|(k, (_, v))| (k, v))
        .collect();
    seeds.sort();
    seeds.into_iter().map(|(_, v)| v).collect()
}

pub fn build(cloud: &PointCloud, params: &SupervoxelParams) -> Result<SupervoxelGraph> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::Empty("supervoxel build needs a non-empty cloud"));
    }
    cloud.validate()?;
    let estimated;
    let normals: &[Vec3] = match &cloud.normals {
        Some(n) => n,
        None => {
            estimated = estimate_normals(&cloud.positions, NORMAL_NEIGHBORS, params.voxel_resolution);
            &estimated
        }
    };
    let vox = voxelize(cloud, normals, params.voxel_resolution);

    // A point lies within sqrt(3) voxel sizes of its voxel centroid, so this
    // keeps every member point within one seed resolution of the seed voxel.
    let mut reach = params.seed_resolution - 3f64.sqrt() * params.voxel_resolution;
    if reach <= 0.0 {
        reach = params.seed_resolution;
    }
    let grower = Grower {
        vox: &vox,
        params,
        reach,
    };

    let mut features: Vec<Features> = place_seeds(&vox, params.seed_resolution)
        .into_iter()
        .map(|v| grower.voxel_features(v as usize))
        .collect();
    let iterations = params.max_iterations.max(1);
    let mut owner = Vec::new();
    for it in 0..iterations {
        let (o, f) = grower.assign(features);
        owner = o;
        features = if it + 1 < iterations { grower.update(&owner, f.len()) } else { f };
    }

    // Renumber in order of first voxel so ids are dense and deterministic.
    let mut remap: HashMap<u32, u32> = HashMap::new();
    for &o in &owner {
        let next = remap.len() as u32;
        remap.entry(o).or_insert(next);
    }
    let owner: Vec<u32> = owner.iter().map(|o| remap[o]).collect();
    let n_sv = remap.len();

    let mut assignment = vec![0u32; cloud.len()];
    let mut point_lists: Vec<Vec<u32>> = vec![Vec::new(); n_sv];
    for v in 0..vox.len() {
        for &p in vox.points_of(v) {
            assignment[p as usize] = owner[v];
            point_lists[owner[v] as usize].push(p);
        }
    }
    let supervoxels = point_lists
        .into_iter()
        .map(|mut pts| {
            pts.sort_unstable();
            let m = pts.len() as f64;
            let centroid = Point3::from(pts.iter().fold(Vec3::zeros(), |a, &p| a + cloud.positions[p as usize].coords) / m);
            let mean_color = pts
                .iter()
                .map(|&p| cloud.color_unit(p as usize).unwrap_or_else(Vec3::zeros))
                .fold(Vec3::zeros(), |a, c| a + c)
                / m;
            let mean_normal = mean_axis(pts.iter().map(|&p| normals[p as usize]));
            Supervoxel {
                centroid,
                mean_color,
                mean_normal,
                point_indices: pts,
            }
        })
        .collect();

    let mut edges = BTreeSet::new();
    for v in 0..vox.len() {
        for &u in vox.neighbors(v) {
            let (a, b) = (owner[v], owner[u as usize]);
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(SupervoxelGraph {
        assignment,
        supervoxels,
        edges: edges.into_iter().collect(),
    })
}

/// Supervoxels holding at least `min_seed_points` seed points.
pub fn mark_changed(graph: &SupervoxelGraph, seeds: &SeedSet, min_seed_points: usize) -> BTreeSet<u32> {
    let mut counts = vec![0usize; graph.len()];
    for p in seeds.point_indices() {
        if let Some(&sv) = graph.assignment.get(p as usize) {
            counts[sv as usize] += 1;
        }
    }
    let min = min_seed_points.max(1);
    counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c >= min)
        .map(|(i, _)| i as u32)
        .collect()
}

/// True if the voxels of every supervoxel form one 26-connected component.
pub fn supervoxels_connected(cloud: &PointCloud, graph: &SupervoxelGraph, voxel_resolution: f64) -> bool {
    graph.supervoxels.iter().all(|sv| {
        let keys: BTreeSet<CellKey> = sv
            .point_indices
            .iter()
            .map(|&p| cell_of(&cloud.positions[p as usize], voxel_resolution))
            .collect();
        let Some(&start) = keys.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(k) = stack.pop() {
            for d in neighbor_offsets() {
                let n = offset(k, d);
                if keys.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == keys.len()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::PixelRef;

    fn cube_points(origin: Point3, size: f64, step: f64) -> Vec<Point3> {
        let n = (size / step).round() as usize;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let on_surface = [i, j, k].iter().any(|&c| c == 0 || c == n);
                    if on_surface {
                        pts.push(origin + Vec3::new(i as f64, j as f64, k as f64) * step);
                    }
                }
            }
        }
        pts
    }

    fn connected_components(graph: &SupervoxelGraph) -> usize {
        let adj = graph.adjacency();
        let mut seen = vec![false; graph.len()];
        let mut count = 0;
        for s in 0..graph.len() {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(v) = stack.pop() {
                for &u in &adj[v] {
                    if !seen[u as usize] {
                        seen[u as usize] = true;
                        stack.push(u as usize);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn two_separated_cubes() {
        // Cubes sit inside single seed cells, 2 m apart.
        let mut pts = cube_points(Point3::new(0.05, 0.05, 0.05), 0.1, 0.01);
        pts.extend(cube_points(Point3::new(2.05, 0.05, 0.05), 0.1, 0.01));
        let cloud = PointCloud::from_positions(pts);
        let g = build(&cloud, &SupervoxelParams::default()).unwrap();
        g.validate(cloud.len()).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn single_point() {
        let cloud = PointCloud::from_positions(vec![Point3::new(0.3, 0.2, 0.1)]);
        let g = build(&cloud, &SupervoxelParams::default()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.supervoxels[0].point_indices, vec![0]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(build(&PointCloud::default(), &SupervoxelParams::default()).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let cloud = PointCloud::from_positions(vec![Point3::origin()]);
        let p = SupervoxelParams {
            seed_resolution: 0.01,
            ..Default::default()
        };
        assert!(build(&cloud, &p).is_err());
        let p = SupervoxelParams {
            weight_color: 0.0,
            weight_spatial: 0.0,
            weight_normal: 0.0,
            ..Default::default()
        };
        assert!(build(&cloud, &p).is_err());
    }

    #[test]
    fn flat_plane() {
        let pts: Vec<Point3> = (0..200)
            .flat_map(|i| (0..200).map(move |j| Point3::new(i as f64 * 0.005, j as f64 * 0.005, 0.0)))
            .collect();
        let cloud = PointCloud {
            normals: Some(vec![Vec3::z(); pts.len()]),
            ..PointCloud::from_positions(pts)
        };
        let params = SupervoxelParams::default();
        let g = build(&cloud, &params).unwrap();
        g.validate(cloud.len()).unwrap();
        assert!((8..=24).contains(&g.len()), "{} supervoxels", g.len());
        assert_eq!(connected_components(&g), 1);
        assert!(supervoxels_connected(&cloud, &g, params.voxel_resolution));
        for sv in &g.supervoxels {
            for &p in &sv.point_indices {
                assert!((cloud.positions[p as usize] - sv.centroid).norm() <= 2.0 * params.seed_resolution);
            }
        }
        let again = build(&cloud, &params).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn normals_estimated_when_absent() {
        let pts: Vec<Point3> = (0..60)
            .flat_map(|i| (0..60).map(move |j| Point3::new(i as f64 * 0.01, 0.3, j as f64 * 0.01)))
            .collect();
        let g = build(&PointCloud::from_positions(pts), &SupervoxelParams::default()).unwrap();
        for sv in &g.supervoxels {
            assert!(sv.mean_normal.y.abs() > 0.99);
        }
    }

    #[test]
    fn mark_changed_examples() {
        let graph = SupervoxelGraph {
            assignment: vec![0, 0, 1, 1, 1, 2, 3, 4, 4, 4],
            supervoxels: (0..5)
                .map(|_| Supervoxel {
                    centroid: Point3::origin(),
                    mean_color: Vec3::zeros(),
                    mean_normal: Vec3::z(),
                    point_indices: vec![],
                })
                .collect(),
            edges: vec![],
        };
        let px = PixelRef { view: 0, col: 0, row: 0 };
        let mut seeds = SeedSet::new();
        seeds.insert(8, px);
        assert_eq!(mark_changed(&graph, &seeds, 1), BTreeSet::from([4]));
        assert!(mark_changed(&graph, &SeedSet::new(), 1).is_empty());
        let mut seeds = SeedSet::new();
        seeds.insert(7, px);
        seeds.insert(9, px);
        assert!(mark_changed(&graph, &seeds, 3).is_empty());
        assert_eq!(mark_changed(&graph, &seeds, 2), BTreeSet::from([4]));
    }
}
