//! Shared geometry utilities: voxelization, farthest point sampling,
//! pairwise displacements and point masking.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Result, TextLocError};
use crate::scene::Cell;

pub const DEFAULT_VOXEL_SIZE_M: f64 = 0.15;

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub voxel_size_m: f64,
    pub origin: [f64; 3],
    /// V x 3 integer indices, sorted lexicographically.
    pub occupied: Vec<[i64; 3]>,
    /// Point index -> voxel index.
    pub point_to_voxel: Vec<usize>,
    /// V x 6: mean RGB of member points, then centroid offset inside the
    /// voxel normalized to [0, 1].
    pub voxel_features: Array2<f64>,
}

impl VoxelGrid {
    pub fn voxel_count(&self) -> usize {
        self.occupied.len()
    }

    /// World-frame center of a voxel.
    pub fn voxel_center(&self, v: usize) -> [f64; 3] {
        let ix = self.occupied[v];
        [
            self.origin[0] + (ix[0] as f64 + 0.5) * self.voxel_size_m,
            self.origin[1] + (ix[1] as f64 + 0.5) * self.voxel_size_m,
            self.origin[2] + (ix[2] as f64 + 0.5) * self.voxel_size_m,
        ]
    }

    /// Point indices grouped per voxel.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.voxel_count()];
        for (p, &v) in self.point_to_voxel.iter().enumerate() {
            out[v].push(p);
        }
        out
    }
}

/// Quantize points into a voxel grid anchored at `origin`.
pub fn voxelize(
    points: &Array2<f64>,
    colors: &Array2<f64>,
    origin: [f64; 3],
    voxel_size_m: f64,
) -> Result<VoxelGrid> {
    let n = points.nrows();
    if n == 0 {
        return Err(TextLocError::Degenerate("voxelize: no points".into()));
    }
    if voxel_size_m <= 0.0 {
        return Err(TextLocError::Argument("voxel size must be positive".into()));
    }
    let mut map: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let ix = [
            ((points[[i, 0]] - origin[0]) / voxel_size_m).floor() as i64,
            ((points[[i, 1]] - origin[1]) / voxel_size_m).floor() as i64,
            ((points[[i, 2]] - origin[2]) / voxel_size_m).floor() as i64,
        ];
        map.entry(ix).or_default().push(i);
    }
    let occupied: Vec<[i64; 3]> = map.keys().cloned().collect();
    let mut point_to_voxel = vec![0usize; n];
    let mut features = Array2::zeros((occupied.len(), 6));
    for (v, (ix, members)) in map.iter().enumerate() {
        let m = members.len() as f64;
        let mut rgb = [0.0; 3];
        let mut centroid = [0.0; 3];
        for &p in members {
            point_to_voxel[p] = v;
            for c in 0..3 {
                rgb[c] += colors[[p, c]];
                centroid[c] += points[[p, c]];
            }
        }
        for c in 0..3 {
            features[[v, c]] = rgb[c] / m;
            let voxel_min = origin[c] + ix[c] as f64 * voxel_size_m;
            features[[v, 3 + c]] = ((centroid[c] / m) - voxel_min) / voxel_size_m;
        }
    }
    Ok(VoxelGrid {
        voxel_size_m,
        origin,
        occupied,
        point_to_voxel,
        voxel_features: features,
    })
}

/// Greedy max-min farthest point sampling. Ties pick the lowest index.
pub fn farthest_point_sample(points: &Array2<f64>, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(TextLocError::Argument(format!(
            "farthest_point_sample: k={k} outside 1..={n}"
        )));
    }
    if start >= n {
        return Err(TextLocError::Argument(format!(
            "farthest_point_sample: start {start} out of range"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..k {
        for i in 0..n {
            let mut d = 0.0;
            for a in 0..3 {
                let diff = points[[i, a]] - points[[current, a]];
                d += diff * diff;
            }
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Index of the point closest to `target`; ties pick the lowest index.
pub fn closest_point(points: &Array2<f64>, target: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..points.nrows() {
        let mut d = 0.0;
        for a in 0..3 {
            let diff = points[[i, a]] - target[a];
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Antisymmetric n x n x 2 matrix of horizontal center displacements,
/// `D[i][j] = (c_i - c_j).xy`.
pub fn pairwise_displacements(centers: &Array2<f64>) -> Array3<f64> {
    let n = centers.nrows();
    let mut d = Array3::zeros((n, n, 2));
    for i in 0..n {
        for j in 0..n {
            for a in 0..2 {
                d[[i, j, a]] = centers[[i, a]] - centers[[j, a]];
            }
        }
    }
    d
}

/// Remove `round(n * fraction)` points uniformly at random (seeded).
pub fn mask_points(cell: &Cell, fraction: f64, seed: u64) -> Result<Cell> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(TextLocError::Argument(format!(
            "mask fraction {fraction} outside [0, 1)"
        )));
    }
    let n = cell.points.nrows();
    let drop = (n as f64 * fraction).round() as usize;
    let keep_count = n - drop;
    if keep_count == 0 {
        return Err(TextLocError::Degenerate("masking would empty the cell".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut keep: Vec<usize> = order[..keep_count].to_vec();
    keep.sort();
    let mut points = Array2::zeros((keep_count, 3));
    let mut colors = Array2::zeros((keep_count, 3));
    let mut inst = Vec::with_capacity(keep_count);
    let mut cls = Vec::with_capacity(keep_count);
    for (i, &p) in keep.iter().enumerate() {
        points.row_mut(i).assign(&cell.points.row(p));
        colors.row_mut(i).assign(&cell.colors.row(p));
        inst.push(cell.point_instance_ids[p]);
        cls.push(cell.point_class_ids[p]);
    }
    Ok(Cell {
        id: cell.id,
        origin: cell.origin,
        size_m: cell.size_m,
        points,
        colors,
        point_instance_ids: inst,
        point_class_ids: cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn line_points(xs: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((xs.len(), 3));
        for (i, &x) in xs.iter().enumerate() {
            m[[i, 0]] = x;
        }
        m
    }

    #[test]
    fn voxelize_floor_division() {
        let points = line_points(&[0.0, 0.1, 0.2]);
        let colors = Array2::zeros((3, 3));
        let grid = voxelize(&points, &colors, [0.0; 3], 0.15).unwrap();
        assert_eq!(grid.voxel_count(), 2);
        assert_eq!(grid.point_to_voxel, vec![0, 0, 1]);
    }

    #[test]
    fn voxelize_identical_points() {
        let points = line_points(&[1.0, 1.0, 1.0, 1.0]);
        let mut colors = Array2::zeros((4, 3));
        colors.fill(0.5);
        let grid = voxelize(&points, &colors, [0.0; 3], 0.15).unwrap();
        assert_eq!(grid.voxel_count(), 1);
        assert!((grid.voxel_features[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn voxelize_feature_is_mean() {
        let points = line_points(&[0.01, 0.02]);
        let colors = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let grid = voxelize(&points, &colors, [0.0; 3], 0.15).unwrap();
        assert_eq!(grid.voxel_count(), 1);
        assert!((grid.voxel_features[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((grid.voxel_features[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn voxelize_centroids_is_idempotent_in_count() {
        let mut spec = crate::scene::SceneSpec::default_palettes([60.0, 60.0], 17);
        spec.instance_count_range = (30, 30);
        let scene = crate::scene::generate_scene(&spec).unwrap();
        let inst = &scene.instances[0];
        let grid = voxelize(&inst.points, &inst.colors, [0.0; 3], 0.3).unwrap();
        // Per-voxel centroids land back in their own voxel.
        let members = grid.members();
        let mut centroids = Array2::zeros((grid.voxel_count(), 3));
        for (v, m) in members.iter().enumerate() {
            for &p in m {
                for a in 0..3 {
                    centroids[[v, a]] += inst.points[[p, a]] / m.len() as f64;
                }
            }
        }
        let again = voxelize(&centroids, &Array2::zeros((grid.voxel_count(), 3)), [0.0; 3], 0.3)
            .unwrap();
        assert_eq!(again.voxel_count(), grid.voxel_count());
    }

    #[test]
    fn fps_collinear_oracle() {
        // x in {0..9}: after {0, 9}, index 4 and 5 tie at min-distance 4;
        // the lowest index wins.
        let points = line_points(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let sel = farthest_point_sample(&points, 3, 0).unwrap();
        assert_eq!(sel, vec![0, 9, 4]);
    }

    #[test]
    fn fps_exhaustive_and_singleton() {
        let points = line_points(&[3.0, 1.0, 2.0, 0.0]);
        let all = farthest_point_sample(&points, 4, 2).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(farthest_point_sample(&points, 1, 2).unwrap(), vec![2]);
        assert!(farthest_point_sample(&points, 5, 0).is_err());
    }

    #[test]
    fn fps_permutation_stable() {
        let mut spec = crate::scene::SceneSpec::default_palettes([60.0, 60.0], 23);
        spec.instance_count_range = (5, 5);
        let scene = crate::scene::generate_scene(&spec).unwrap();
        let pts = &scene.instances[0].points;
        let n = pts.nrows();
        let start = closest_point(pts, [30.0, 30.0, 0.0]);
        let base = farthest_point_sample(pts, 4, start).unwrap();

        // Reverse the point order, rerun, map back.
        let mut rev = Array2::zeros((n, 3));
        for i in 0..n {
            rev.row_mut(i).assign(&pts.row(n - 1 - i));
        }
        let rev_start = n - 1 - start;
        let rev_sel = farthest_point_sample(&rev, 4, rev_start).unwrap();
        let mapped: std::collections::BTreeSet<usize> =
            rev_sel.iter().map(|&i| n - 1 - i).collect();
        let base_set: std::collections::BTreeSet<usize> = base.into_iter().collect();
        // The selected point sets coincide up to distance ties.
        let base_pts: std::collections::BTreeSet<String> = base_set
            .iter()
            .map(|&i| format!("{:.9},{:.9},{:.9}", pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]))
            .collect();
        let mapped_pts: std::collections::BTreeSet<String> = mapped
            .iter()
            .map(|&i| format!("{:.9},{:.9},{:.9}", pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]))
            .collect();
        assert_eq!(base_pts, mapped_pts);
    }

    #[test]
    fn displacement_matrix_contract() {
        let centers = arr2(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]);
        let d = pairwise_displacements(&centers);
        assert_eq!(d[[0, 1, 0]], -3.0);
        assert_eq!(d[[0, 1, 1]], -4.0);
        assert_eq!(d[[1, 0, 0]], 3.0);
        assert_eq!(d[[1, 0, 1]], 4.0);
        assert_eq!(d[[0, 0, 0]], 0.0);

        // Translation invariance, exactly.
        let shifted = &centers + 7.5;
        let d2 = pairwise_displacements(&shifted);
        assert_eq!(d, d2);

        let single = pairwise_displacements(&arr2(&[[1.0, 2.0, 3.0]]));
        assert_eq!(single[[0, 0, 0]], 0.0);
        assert_eq!(single[[0, 0, 1]], 0.0);
    }

    fn toy_cell(n: usize) -> Cell {
        let mut points = Array2::zeros((n, 3));
        for i in 0..n {
            points[[i, 0]] = i as f64;
        }
        Cell {
            id: 0,
            origin: [0.0; 3],
            size_m: 30.0,
            points,
            colors: Array2::zeros((n, 3)),
            point_instance_ids: vec![0; n],
            point_class_ids: vec![0; n],
        }
    }

    #[test]
    fn mask_one_third_of_nine() {
        let cell = toy_cell(9);
        let masked = mask_points(&cell, 1.0 / 3.0, 1).unwrap();
        assert_eq!(masked.points.nrows(), 6);
    }

    #[test]
    fn mask_zero_is_identity() {
        let cell = toy_cell(5);
        let masked = mask_points(&cell, 0.0, 1).unwrap();
        assert_eq!(masked, cell);
    }

    #[test]
    fn mask_deterministic_per_seed() {
        let cell = toy_cell(20);
        let a = mask_points(&cell, 0.5, 77).unwrap();
        let b = mask_points(&cell, 0.5, 77).unwrap();
        assert_eq!(a, b);
        let c = mask_points(&cell, 0.5, 78).unwrap();
        assert!(a != c || a.points == c.points);
    }
}
