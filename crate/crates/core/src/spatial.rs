//! Uniform hash grid over point positions for radius and k-nearest queries,
//! plus PCA normal estimation.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::geometry::{Point3, Vec3};

pub type CellKey = [i32; 3];

#[inline]
pub fn cell_of(p: &Point3, cell: f64) -> CellKey {
    [
        (p.x / cell).floor() as i32,
        (p.y / cell).floor() as i32,
        (p.z / cell).floor() as i32,
    ]
}

/// Offsets of the 26 neighbors of a voxel.
pub fn neighbor_offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(move |dx| {
        (-1..=1).flat_map(move |dy| {
            (-1..=1).filter_map(move |dz| (dx != 0 || dy != 0 || dz != 0).then_some([dx, dy, dz]))
        })
    })
}

#[inline]
pub fn offset(key: CellKey, d: [i32; 3]) -> CellKey {
    [key[0] + d[0], key[1] + d[1], key[2] + d[2]]
}

pub struct PointGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell)).or_default().push(i as u32);
        }
        PointGrid { points, cell, cells }
    }

    /// Nearest point within `radius`; ties go to the lower index.
    pub fn nearest_within(&self, q: &Point3, radius: f64) -> Option<(usize, f64)> {
        let reach = (radius / self.cell).ceil() as i32;
        let c = cell_of(q, self.cell);
        let r2 = radius * radius;
        let mut best: Option<(usize, f64)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(ids) = self.cells.get(&offset(c, [dx, dy, dz])) else {
                        continue;
                    };
                    for &i in ids {
                        let d2 = (self.points[i as usize] - q).norm_squared();
                        if d2 > r2 {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && (i as usize) < bi),
                        };
                        if better {
                            best = Some((i as usize, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    /// The `k` nearest points to `q` (including a point at `q` itself),
    /// sorted by distance.
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<usize> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let k = k.min(self.points.len());
        let c = cell_of(q, self.cell);
        let mut ring = 0i32;
        let mut found: Vec<(f64, u32)> = Vec::new();
        loop {
            // Visit the shell at Chebyshev distance `ring`.
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&offset(c, [dx, dy, dz])) {
                            found.extend(
                                ids.iter()
                                    .map(|&i| ((self.points[i as usize] - q).norm_squared(), i)),
                            );
                        }
                    }
                }
            }
            // Everything within `ring * cell` of q has been seen.
            let covered = ring as f64 * self.cell;
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                if found[k - 1].0.sqrt() <= covered {
                    found.truncate(k);
                    return found.into_iter().map(|(_, i)| i as usize).collect();
                }
            }
            if found.len() == self.points.len() {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                found.truncate(k);
                return found.into_iter().map(|(_, i)| i as usize).collect();
            }
            ring += 1;
        }
    }
}

/// Unit normal of the best-fit plane through `points`, or `None` for fewer
/// than three points or a degenerate spread.
pub fn plane_normal(points: impl Iterator<Item = Point3>) -> Option<Vec3> {
    let pts: Vec<Point3> = points.collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    if cov.norm() < 1e-18 {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(imin).into_owned();
    normal.try_normalize(1e-12)
}

/// Per-point normals from a k-nearest-neighbor plane fit. Normals are
/// oriented toward +Z where the sign is otherwise arbitrary; points whose
/// neighborhood is degenerate get +Z.
pub fn estimate_normals(points: &[Point3], k: usize, cell: f64) -> Vec<Vec3> {
    let grid = PointGrid::new(points, cell);
    let estimate = |p: &Point3| {
        let nn = grid.k_nearest(p, k);
        let n = plane_normal(nn.iter().map(|&i| points[i])).unwrap_or_else(Vec3::z);
        if n.z < 0.0 {
            -n
        } else {
            n
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        points.par_iter().map(estimate).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        points.iter().map(estimate).collect()
    }
}
