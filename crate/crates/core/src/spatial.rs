//! Uniform-grid index for radius counting and exact nearest-neighbour
//! queries on 3D point sets.

use std::collections::HashMap;

use crate::geometry::Vec3;

type Cell = (i64, i64, i64);

/// Points hashed into cubic cells of a fixed side.
#[derive(Debug, Clone)]
pub struct UniformGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    buckets: HashMap<Cell, Vec<usize>>,
    /// Bounding box of occupied cells, used to stop nearest-neighbour shells.
    min_cell: Cell,
    max_cell: Cell,
}

impl<'a> UniformGrid<'a> {
    /// # Panics
    /// If `cell` is not a positive finite number.
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(
            cell.is_finite() && cell > 0.0,
            "grid cell side must be positive, got {cell}"
        );
        let mut buckets: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut min_cell = (i64::MAX, i64::MAX, i64::MAX);
        let mut max_cell = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, cell);
            min_cell = (
                min_cell.0.min(c.0),
                min_cell.1.min(c.1),
                min_cell.2.min(c.2),
            );
            max_cell = (
                max_cell.0.max(c.0),
                max_cell.1.max(c.1),
                max_cell.2.max(c.2),
            );
            buckets.entry(c).or_default().push(i);
        }
        Self {
            points,
            cell,
            buckets,
            min_cell,
            max_cell,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Number of indexed points within `radius` (inclusive) of `query`,
    /// skipping index `exclude`.
    pub fn count_within(&self, query: &Vec3, radius: f64, exclude: Option<usize>) -> usize {
        let mut count = 0;
        self.visit_within(query, radius, |i| {
            if Some(i) != exclude {
                count += 1;
            }
        });
        count
    }

    /// Indices of points within `radius` of `query`, in ascending order.
    pub fn within(&self, query: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_within(query, radius, |i| out.push(i));
        out.sort_unstable();
        out
    }

    fn visit_within(&self, query: &Vec3, radius: f64, mut f: impl FnMut(usize)) {
        if self.points.is_empty() || !(radius >= 0.0) {
            return;
        }
        let reach = (radius / self.cell).ceil() as i64;
        let c = cell_of(query, self.cell);
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(bucket) = self.buckets.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        for &i in bucket {
                            if (self.points[i] - query).norm_squared() <= r2 {
                                f(i);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Index and distance of the closest indexed point. Ties go to the
    /// lowest index, matching a linear scan.
    pub fn nearest(&self, query: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = cell_of(query, self.cell);
        let mut best: Option<(usize, f64)> = None;
        let gap = |q: i64, lo: i64, hi: i64| (lo - q).max(q - hi).max(0);
        let first_shell = gap(c.0, self.min_cell.0, self.max_cell.0)
            .max(gap(c.1, self.min_cell.1, self.max_cell.1))
            .max(gap(c.2, self.min_cell.2, self.max_cell.2));
        let max_shell = [
            (c.0 - self.min_cell.0).abs(),
            (c.0 - self.max_cell.0).abs(),
            (c.1 - self.min_cell.1).abs(),
            (c.1 - self.max_cell.1).abs(),
            (c.2 - self.min_cell.2).abs(),
            (c.2 - self.max_cell.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        for shell in first_shell..=max_shell {
            // Every point outside shells 0..=shell is at least this far away.
            if let Some((_, d2)) = best {
                let guaranteed = shell as f64 - 1.0;
                if guaranteed > 0.0 && (guaranteed * self.cell).powi(2) > d2 {
                    break;
                }
            }
            self.visit_shell(c, shell, |i| {
                let d2 = (self.points[i] - query).norm_squared();
                let better = match best {
                    None => true,
                    Some((j, b)) => d2 < b || (d2 == b && i < j),
                };
                if better {
                    best = Some((i, d2));
                }
            });
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    /// Visits the cells at Chebyshev distance `shell` from `c` that lie
    /// inside the occupied bounding box.
    fn visit_shell(&self, c: Cell, shell: i64, mut f: impl FnMut(usize)) {
        let mut visit = |x: i64, y: i64, z: i64| {
            if let Some(bucket) = self.buckets.get(&(x, y, z)) {
                bucket.iter().for_each(|&i| f(i));
            }
        };
        let clip = |q: i64, lo: i64, hi: i64| (lo.max(q - shell), hi.min(q + shell));
        let (x0, x1) = clip(c.0, self.min_cell.0, self.max_cell.0);
        let (y0, y1) = clip(c.1, self.min_cell.1, self.max_cell.1);
        let (z0, z1) = clip(c.2, self.min_cell.2, self.max_cell.2);
        for x in x0..=x1 {
            for y in y0..=y1 {
                if (x - c.0).abs() == shell || (y - c.1).abs() == shell {
                    for z in z0..=z1 {
                        visit(x, y, z);
                    }
                } else {
                    for z in [c.2 - shell, c.2 + shell] {
                        if (z0..=z1).contains(&z) {
                            visit(x, y, z);
                        }
                    }
                }
            }
        }
    }
}

fn cell_of(p: &Vec3, cell: f64) -> Cell {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Linear-scan nearest neighbour, lowest index on ties.
pub fn brute_force_nearest(points: &[Vec3], query: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-extent..extent)))
            .collect()
    }

    #[test]
    fn counts_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 500, 5.0);
        for cell in [0.3, 1.0, 2.5] {
            let grid = UniformGrid::new(&pts, cell);
            for (qi, q) in pts.iter().enumerate().take(50) {
                for radius in [0.2, 0.7, 1.9] {
                    let brute = pts
                        .iter()
                        .enumerate()
                        .filter(|(i, p)| *i != qi && (*p - q).norm() <= radius)
                        .count();
                    assert_eq!(grid.count_within(q, radius, Some(qi)), brute);
                }
            }
        }
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 800, 20.0);
        let grid = UniformGrid::new(&pts, 1.0);
        for q in cloud(&mut rng, 200, 40.0)
            .into_iter()
            .chain(cloud(&mut rng, 50, 500.0))
        {
            assert_eq!(grid.nearest(&q), brute_force_nearest(&pts, &q));
        }
    }

    #[test]
    fn empty_grid() {
        let grid = UniformGrid::new(&[], 1.0);
        assert_eq!(grid.nearest(&Vec3::zeros()), None);
        assert_eq!(grid.count_within(&Vec3::zeros(), 5.0, None), 0);
    }
}
