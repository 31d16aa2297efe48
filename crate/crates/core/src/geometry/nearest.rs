//! Exact nearest-neighbour queries over static point sets.
//!
//! A uniform grid prunes the search; shells are visited until the best
//! candidate is provably closer than anything still unvisited, so results
//! are identical to a brute-force scan (ties go to the lowest index).

use nalgebra::Vector3;
use rayon::prelude::*;

use super::mesh::TriangleMesh;

const BRUTE_FORCE_LIMIT: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[inline]
pub fn squared_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

#[derive(Debug, Clone)]
pub struct PointGrid {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cell_start: Vec<usize>,
    order: Vec<usize>,
}

impl PointGrid {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let points = points.to_vec();
        if points.len() <= BRUTE_FORCE_LIMIT {
            return PointGrid {
                points,
                origin: Vector3::zeros(),
                cell: 0.0,
                dims: [0; 3],
                cell_start: Vec::new(),
                order: Vec::new(),
            };
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let vol = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        let mut cell = (vol * 2.0 / points.len() as f64).cbrt();
        let longest = ext.max();
        if !(cell.is_finite() && cell > 0.0) || longest / cell > 256.0 {
            cell = (longest / 256.0).max(1e-9);
        }
        let dims = [
            ((ext.x / cell).floor() as usize + 1).min(512),
            ((ext.y / cell).floor() as usize + 1).min(512),
            ((ext.z / cell).floor() as usize + 1).min(512),
        ];
        let ncell = dims[0] * dims[1] * dims[2];
        let mut grid = PointGrid {
            points,
            origin: lo,
            cell,
            dims,
            cell_start: vec![0; ncell + 1],
            order: Vec::new(),
        };
        let ids: Vec<usize> = grid
            .points
            .iter()
            .map(|p| grid.flat(grid.cell_of(p)))
            .collect();
        for &c in &ids {
            grid.cell_start[c + 1] += 1;
        }
        for c in 0..ncell {
            grid.cell_start[c + 1] += grid.cell_start[c];
        }
        let mut fill = grid.cell_start.clone();
        grid.order = vec![0; grid.points.len()];
        for (i, &c) in ids.iter().enumerate() {
            grid.order[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.cell).floor();
            c[k] = if f <= 0.0 || !f.is_finite() {
                0
            } else {
                (f as usize).min(self.dims[k] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    #[inline]
    fn consider(&self, q: &Vector3<f64>, i: usize, best: &mut (f64, usize)) {
        let d = squared_distance(q, &self.points[i]);
        if d < best.0 || (d == best.0 && i < best.1) {
            *best = (d, i);
        }
    }

    /// Nearest stored point to `q`, or `None` when the grid is empty.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        if self.dims[0] == 0 {
            for i in 0..self.points.len() {
                self.consider(q, i, &mut best);
            }
            return Some(Neighbor {
                index: best.1,
                distance: best.0.sqrt(),
            });
        }
        let c = self.cell_of(q);
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            self.visit_shell(c, r, |cell| {
                for &i in &self.order[self.cell_start[cell]..self.cell_start[cell + 1]] {
                    self.consider(q, i, &mut best);
                }
            });
            // everything outside shells 0..=r lies at least r cells away
            let bound = r as f64 * self.cell;
            if best.1 != usize::MAX && best.0 < bound * bound {
                break;
            }
        }
        Some(Neighbor {
            index: best.1,
            distance: best.0.sqrt(),
        })
    }

    fn visit_shell(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let lo = |k: usize| (c[k] as isize - r).max(0);
        let hi = |k: usize| (c[k] as isize + r).min(self.dims[k] as isize - 1);
        for z in lo(2)..=hi(2) {
            let dz = (z - c[2] as isize).abs();
            for y in lo(1)..=hi(1) {
                let dy = (y - c[1] as isize).abs();
                let on_face = dz == r || dy == r;
                if on_face {
                    for x in lo(0)..=hi(0) {
                        f(self.flat([x as usize, y as usize, z as usize]));
                    }
                } else {
                    // only the two x-extremes sit on the shell
                    let x0 = c[0] as isize - r;
                    let x1 = c[0] as isize + r;
                    if x0 >= 0 {
                        f(self.flat([x0 as usize, y as usize, z as usize]));
                    }
                    if x1 < self.dims[0] as isize && x1 != x0 {
                        f(self.flat([x1 as usize, y as usize, z as usize]));
                    }
                }
            }
        }
    }

    /// Batched [`PointGrid::nearest`]; output order follows `queries`.
    pub fn nearest_many(&self, queries: &[Vector3<f64>]) -> Vec<Neighbor> {
        if self.points.is_empty() {
            return Vec::new();
        }
        queries
            .par_iter()
            .with_min_len(64)
            .map(|q| self.nearest(q).expect("non-empty grid"))
            .collect()
    }
}

/// Nearest mesh vertex for each query point.
pub fn nearest_vertex(points: &[Vector3<f64>], mesh: &TriangleMesh) -> Vec<Neighbor> {
    if points.is_empty() || mesh.vertices.is_empty() {
        return Vec::new();
    }
    PointGrid::new(&mesh.vertices).nearest_many(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>) -> Neighbor {
        let mut best = (f64::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(q, p);
            if d < best.0 {
                best = (d, i);
            }
        }
        Neighbor {
            index: best.1,
            distance: best.0.sqrt(),
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread * 0.3..spread * 0.3),
                )
            })
            .collect()
    }

    #[test]
    fn exact_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 200, 1.0);
        let grid = PointGrid::new(&pts);
        let n = grid.nearest(&pts[7]).unwrap();
        assert_eq!(n, Neighbor { index: 7, distance: 0.0 });
    }

    #[test]
    fn single_vertex_distance() {
        let grid = PointGrid::new(&[Vector3::zeros()]);
        let n = grid.nearest(&Vector3::new(3.0, 4.0, 0.0)).unwrap();
        assert_eq!(n, Neighbor { index: 0, distance: 5.0 });
    }

    #[test]
    fn empty_queries_give_empty_result() {
        let grid = PointGrid::new(&[Vector3::zeros()]);
        assert!(grid.nearest_many(&[]).is_empty());
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let verts = random_points(&mut rng, 500, 1.0);
        let queries = random_points(&mut rng, 100, 1.5);
        let grid = PointGrid::new(&verts);
        let got = grid.nearest_many(&queries);
        for (q, g) in queries.iter().zip(&got) {
            assert_eq!(*g, brute(&verts, q));
        }
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let mut pts = vec![Vector3::new(1.0, 1.0, 1.0); 60];
        pts.push(Vector3::zeros());
        let grid = PointGrid::new(&pts);
        assert_eq!(grid.nearest(&Vector3::new(1.0, 1.0, 1.1)).unwrap().index, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn grid_equals_double_loop(seed in 0u64..10_000, n in 1usize..1000, m in 0usize..200, spread in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let verts = random_points(&mut rng, n, spread);
            let queries = random_points(&mut rng, m, spread * 2.0);
            let grid = PointGrid::new(&verts);
            let got = grid.nearest_many(&queries);
            prop_assert_eq!(got.len(), m);
            for (q, g) in queries.iter().zip(&got) {
                prop_assert_eq!(*g, brute(&verts, q));
            }
        }
    }
}
