//! Point-cloud container, sampling, exact k-nearest-neighbor queries,
//! augmentation, and procedural synthetic shape generation.

mod io;
mod shapes;

pub use io::{read_cloud, read_manifest, write_cloud, write_manifest, ManifestEntry};
pub use shapes::{generate_shape, sample_surface_raw, ShapeFamily, ShapeSpec, FAMILY_COUNT};

use rand::Rng;
use thiserror::Error;

use crate::linalg3::Mat3;
use crate::seeds;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("requested {requested} points but the cloud has only {available}")]
    TooFewPoints { requested: usize, available: usize },
    #[error("k = {k} must be in 1..{len}")]
    KTooLarge { k: usize, len: usize },
    #[error("matrix is not a rotation")]
    NotRotation,
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("point cloud contains non-finite coordinates")]
    NonFinite,
    #[error("invalid shape spec: {0}")]
    BadSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected {expected})")]
    MagicMismatch { expected: &'static str },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format version {0}")]
    BadVersion(u8),
}

/// Ordered set of 3D points with an optional class label and the seed that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub label: Option<u16>,
    pub seed: Option<u64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(CloudError::NonFinite);
        }
        Ok(Self {
            points,
            label: None,
            seed: None,
        })
    }

    pub fn with_label(mut self, label: u16) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn barycenter(&self) -> Vec3 {
        let sum = self
            .points
            .iter()
            .fold(Vec3::ZERO, |acc, &p| acc + p);
        sum / self.len() as f64
    }

    fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            seed: self.seed,
        }
    }
}

/// Exact k-nearest-neighbor table. Per query: neighbor indices sorted by
/// ascending distance (ties by lower index), their distances, and `d_max`,
/// the distance of the k-th neighbor.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    pub d_max: Vec<f64>,
}

/// Exact brute-force k nearest neighbors, excluding self. O(N^2); desk-scale
/// clouds keep exactness affordable. See [`knn_grid`] for the accelerated
/// path with identical results.
pub fn knn(pc: &PointCloud, k: usize) -> Result<NeighborIndex, CloudError> {
    let n = pc.len();
    if k == 0 || k >= n {
        return Err(CloudError::KTooLarge { k, len: n });
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut d_max = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let pi = pc.points[i];
        for (j, &pj) in pc.points.iter().enumerate() {
            if j != i {
                cand.push(((pj - pi).norm_sq(), j));
            }
        }
        cand.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let head = &mut cand[..k];
        head.sort_by(|a, b| a.partial_cmp(b).unwrap());
        neighbors.push(head.iter().map(|&(_, j)| j).collect::<Vec<_>>());
        let dist: Vec<f64> = head.iter().map(|&(d2, _)| d2.sqrt()).collect();
        d_max.push(dist[k - 1]);
        distances.push(dist);
    }
    Ok(NeighborIndex {
        k,
        neighbors,
        distances,
        d_max,
    })
}

/// Grid-accelerated exact k nearest neighbors. Buckets points into a uniform
/// grid and expands the search ring until the k-th candidate distance is
/// covered, so results match [`knn`] exactly, including tie order.
pub fn knn_grid(pc: &PointCloud, k: usize) -> Result<NeighborIndex, CloudError> {
    let n = pc.len();
    if k == 0 || k >= n {
        return Err(CloudError::KTooLarge { k, len: n });
    }
    let mut lo = pc.points[0];
    let mut hi = pc.points[0];
    for &p in &pc.points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let extent = (hi - lo).norm().max(1e-12);
    // Aim for a handful of points per cell.
    let cells_per_axis = ((n as f64 / 4.0).cbrt().ceil() as usize).clamp(1, 64);
    let cell = (extent / cells_per_axis as f64).max(1e-12);
    let dims = [
        (((hi.x - lo.x) / cell).floor() as usize + 1).max(1),
        (((hi.y - lo.y) / cell).floor() as usize + 1).max(1),
        (((hi.z - lo.z) / cell).floor() as usize + 1).max(1),
    ];
    let cell_of = |p: Vec3| -> [usize; 3] {
        [
            (((p.x - lo.x) / cell).floor() as usize).min(dims[0] - 1),
            (((p.y - lo.y) / cell).floor() as usize).min(dims[1] - 1),
            (((p.z - lo.z) / cell).floor() as usize).min(dims[2] - 1),
        ]
    };
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
    for (i, &p) in pc.points.iter().enumerate() {
        let c = cell_of(p);
        buckets[(c[2] * dims[1] + c[1]) * dims[0] + c[0]].push(i);
    }

    let mut neighbors = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut d_max = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    let max_ring = dims[0].max(dims[1]).max(dims[2]);
    for i in 0..n {
        let pi = pc.points[i];
        let home = cell_of(pi);
        cand.clear();
        let mut ring = 0usize;
        loop {
            // Visit cells whose Chebyshev distance from home equals `ring`.
            let x0 = home[0].saturating_sub(ring);
            let x1 = (home[0] + ring).min(dims[0] - 1);
            let y0 = home[1].saturating_sub(ring);
            let y1 = (home[1] + ring).min(dims[1] - 1);
            let z0 = home[2].saturating_sub(ring);
            let z1 = (home[2] + ring).min(dims[2] - 1);
            for cz in z0..=z1 {
                for cy in y0..=y1 {
                    for cx in x0..=x1 {
                        let cheb = cx
                            .abs_diff(home[0])
                            .max(cy.abs_diff(home[1]))
                            .max(cz.abs_diff(home[2]));
                        if cheb != ring {
                            continue;
                        }
                        for &j in &buckets[(cz * dims[1] + cy) * dims[0] + cx] {
                            if j != i {
                                cand.push(((pc.points[j] - pi).norm_sq(), j));
                            }
                        }
                    }
                }
            }
            // Any point outside the searched rings is at least `ring * cell`
            // away, so once the k-th candidate is closer we are done.
            if cand.len() >= k {
                cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let kth = cand[k - 1].0.sqrt();
                if kth <= ring as f64 * cell || ring >= max_ring {
                    break;
                }
            } else if ring >= max_ring {
                cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
                break;
            }
            ring += 1;
        }
        let head = &cand[..k];
        neighbors.push(head.iter().map(|&(_, j)| j).collect::<Vec<_>>());
        let dist: Vec<f64> = head.iter().map(|&(d2, _)| d2.sqrt()).collect();
        d_max.push(dist[k - 1]);
        distances.push(dist);
    }
    Ok(NeighborIndex {
        k,
        neighbors,
        distances,
        d_max,
    })
}

/// Farthest point sampling with the start point drawn from the seeded RNG.
/// Each subsequent point maximizes the minimum distance to the selected set;
/// ties break by lowest index.
pub fn farthest_point_sample(
    pc: &PointCloud,
    n: usize,
    seed: u64,
) -> Result<PointCloud, CloudError> {
    let mut rng = seeds::stream(seed, 0xF9, 0, 0);
    let start = rng.random_range(0..pc.len());
    let mut out = farthest_point_sample_from(pc, n, start)?;
    out.seed = Some(seed);
    Ok(out)
}

/// Farthest point sampling from an explicit start index.
pub fn farthest_point_sample_from(
    pc: &PointCloud,
    n: usize,
    start: usize,
) -> Result<PointCloud, CloudError> {
    let indices = fps_indices(pc, n, start)?;
    Ok(pc.subset(&indices))
}

/// Index form of FPS; `start` must be a valid index.
pub fn fps_indices(pc: &PointCloud, n: usize, start: usize) -> Result<Vec<usize>, CloudError> {
    let len = pc.len();
    if n == 0 || n > len {
        return Err(CloudError::TooFewPoints {
            requested: n,
            available: len,
        });
    }
    assert!(start < len, "start index {start} out of range");
    let mut chosen = Vec::with_capacity(n);
    chosen.push(start);
    let mut min_d2 = vec![f64::INFINITY; len];
    let mut last = start;
    while chosen.len() < n {
        let pl = pc.points[last];
        let mut best = 0usize;
        let mut best_d2 = -1.0;
        for (j, slot) in min_d2.iter_mut().enumerate() {
            let d2 = (pc.points[j] - pl).norm_sq();
            if d2 < *slot {
                *slot = d2;
            }
            if *slot > best_d2 {
                best_d2 = *slot;
                best = j;
            }
        }
        chosen.push(best);
        last = best;
    }
    Ok(chosen)
}

/// Uniform sampling without replacement, deterministic per seed.
pub fn random_sample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, CloudError> {
    let len = pc.len();
    if n == 0 || n > len {
        return Err(CloudError::TooFewPoints {
            requested: n,
            available: len,
        });
    }
    let mut rng = seeds::stream(seed, 0x85, 0, 0);
    let mut idx: Vec<usize> = (0..len).collect();
    // Partial Fisher-Yates: the first n slots are a uniform sample.
    for i in 0..n {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    let mut out = pc.subset(&idx);
    out.seed = Some(seed);
    Ok(out)
}

/// Rotate every point, preserving order.
pub fn apply_rotation(pc: &PointCloud, r: &Mat3) -> Result<PointCloud, CloudError> {
    if !r.is_rotation(1e-9) {
        return Err(CloudError::NotRotation);
    }
    Ok(PointCloud {
        points: pc.points.iter().map(|&p| *r * p).collect(),
        label: pc.label,
        seed: pc.seed,
    })
}

/// One global translation with components U(-t, t) and one global scale
/// U(low, high), applied as `p -> s * p + t`.
pub fn augment(
    pc: &PointCloud,
    seed: u64,
    translate_range: f64,
    scale_range: (f64, f64),
) -> PointCloud {
    assert!(
        scale_range.0 > 0.0 && scale_range.0 <= scale_range.1,
        "scale range must be positive with low <= high"
    );
    assert!(translate_range >= 0.0);
    let mut rng = seeds::stream(seed, 0xA6, 0, 0);
    let t = Vec3::new(
        seeds::uniform_symmetric(&mut rng, translate_range),
        seeds::uniform_symmetric(&mut rng, translate_range),
        seeds::uniform_symmetric(&mut rng, translate_range),
    );
    let s = scale_range.0 + rng.random::<f64>() * (scale_range.1 - scale_range.0);
    PointCloud {
        points: pc.points.iter().map(|&p| p * s + t).collect(),
        label: pc.label,
        seed: pc.seed,
    }
}

/// Per-coordinate Gaussian jitter plus `n_outliers` points sampled uniformly
/// inside the unit sphere, appended after the jittered points.
pub fn add_noise(pc: &PointCloud, sigma: f64, n_outliers: usize, seed: u64) -> PointCloud {
    assert!(sigma >= 0.0);
    let mut rng = seeds::stream(seed, 0x4E, 0, 0);
    let mut points: Vec<Vec3> = pc
        .points
        .iter()
        .map(|&p| {
            if sigma == 0.0 {
                p
            } else {
                p + Vec3::new(
                    seeds::standard_normal(&mut rng) * sigma,
                    seeds::standard_normal(&mut rng) * sigma,
                    seeds::standard_normal(&mut rng) * sigma,
                )
            }
        })
        .collect();
    for _ in 0..n_outliers {
        points.push(uniform_in_unit_sphere(&mut rng));
    }
    PointCloud {
        points,
        label: pc.label,
        seed: pc.seed,
    }
}

fn uniform_in_unit_sphere<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let p = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        if p.norm_sq() <= 1.0 {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg3::{random_rotation, RotationMode};

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seeds::rng_from(seed);
        let points = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn cloud_validation() {
        assert!(matches!(
            PointCloud::new(vec![]),
            Err(CloudError::EmptyCloud)
        ));
        assert!(matches!(
            PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]),
            Err(CloudError::NonFinite)
        ));
    }

    #[test]
    fn fps_colinear_forced_choice() {
        let pc = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(9.0, 0.0, 0.0),
        ])
        .unwrap();
        let idx = fps_indices(&pc, 2, 0).unwrap();
        assert_eq!(idx, vec![0, 3]);
    }

    #[test]
    fn fps_exhaustion_is_permutation() {
        let pc = random_cloud(37, 1);
        let out = farthest_point_sample(&pc, 37, 5).unwrap();
        let mut got: Vec<_> = out.points.iter().map(|p| format!("{:?}", p)).collect();
        let mut want: Vec<_> = pc.points.iter().map(|p| format!("{:?}", p)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn fps_deterministic_and_errors() {
        let pc = random_cloud(64, 2);
        let a = farthest_point_sample(&pc, 16, 11).unwrap();
        let b = farthest_point_sample(&pc, 16, 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            farthest_point_sample(&pc, 65, 0),
            Err(CloudError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn fps_is_permutation_robust_given_start_point() {
        let pc = random_cloud(128, 3);
        let a = farthest_point_sample_from(&pc, 32, 7).unwrap();
        // Reverse the cloud; the same geometric start point now lives at
        // a different index.
        let mut rev_points = pc.points.clone();
        rev_points.reverse();
        let rev = PointCloud::new(rev_points).unwrap();
        let b = farthest_point_sample_from(&rev, 32, 128 - 1 - 7).unwrap();
        let mut sa: Vec<String> = a.points.iter().map(|p| format!("{:?}", p)).collect();
        let mut sb: Vec<String> = b.points.iter().map(|p| format!("{:?}", p)).collect();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn fps_spreads_better_than_random_sampling() {
        // Maximin objective: FPS output should have a larger minimum
        // pairwise distance than a random subset nearly always.
        let mut fps_wins = 0;
        for trial in 0..100u64 {
            let pc = random_cloud(256, 1000 + trial);
            let f = farthest_point_sample(&pc, 64, trial).unwrap();
            let r = random_sample(&pc, 64, trial).unwrap();
            if min_pairwise(&f) >= min_pairwise(&r) {
                fps_wins += 1;
            }
        }
        assert!(fps_wins >= 95, "FPS won only {fps_wins}/100 trials");
    }

    fn min_pairwise(pc: &PointCloud) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..pc.len() {
            for j in (i + 1)..pc.len() {
                best = best.min((pc.points[i] - pc.points[j]).norm());
            }
        }
        best
    }

    #[test]
    fn random_sample_contract() {
        let pc = random_cloud(50, 4);
        let all = random_sample(&pc, 50, 9).unwrap();
        let mut got: Vec<String> = all.points.iter().map(|p| format!("{:?}", p)).collect();
        let mut want: Vec<String> = pc.points.iter().map(|p| format!("{:?}", p)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);

        let one = random_sample(&pc, 1, 9).unwrap();
        assert!(pc.points.contains(&one.points[0]));

        let a = random_sample(&pc, 20, 3).unwrap();
        let b = random_sample(&pc, 20, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_matches_forced_line() {
        let pc = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
        ])
        .unwrap();
        let nn = knn(&pc, 1).unwrap();
        assert_eq!(nn.neighbors, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(nn.d_max, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn knn_full_fanout() {
        let pc = random_cloud(12, 5);
        let nn = knn(&pc, 11).unwrap();
        for (i, nbrs) in nn.neighbors.iter().enumerate() {
            let mut ids: Vec<usize> = nbrs.clone();
            ids.sort_unstable();
            let want: Vec<usize> = (0..12).filter(|&j| j != i).collect();
            assert_eq!(ids, want);
        }
    }

    #[test]
    fn knn_brute_force_oracle() {
        // Independent O(N^2) full-sort oracle.
        let pc = random_cloud(300, 6);
        let k = 16;
        let nn = knn(&pc, k).unwrap();
        for i in 0..pc.len() {
            let mut all: Vec<(f64, usize)> = (0..pc.len())
                .filter(|&j| j != i)
                .map(|j| ((pc.points[j] - pc.points[i]).norm_sq(), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..k].iter().map(|&(_, j)| j).collect();
            assert_eq!(nn.neighbors[i], want, "query {i}");
        }
    }

    #[test]
    fn knn_grid_matches_brute_force() {
        for seed in 0..5u64 {
            let pc = random_cloud(400, 60 + seed);
            let a = knn(&pc, 12).unwrap();
            let b = knn_grid(&pc, 12).unwrap();
            assert_eq!(a.neighbors, b.neighbors);
            assert_eq!(a.d_max, b.d_max);
        }
    }

    #[test]
    fn knn_is_rotation_invariant() {
        let pc = random_cloud(200, 7);
        let base = knn(&pc, 8).unwrap();
        for seed in 0..20u64 {
            let r = random_rotation(seed, RotationMode::FullSo3);
            let rot = apply_rotation(&pc, &r).unwrap();
            let nn = knn(&rot, 8).unwrap();
            assert_eq!(nn.neighbors, base.neighbors);
        }
    }

    #[test]
    fn rotation_preserves_norms_and_inverts() {
        let pc = random_cloud(100, 8);
        let r = random_rotation(9, RotationMode::FullSo3);
        let rot = apply_rotation(&pc, &r).unwrap();
        for (p, q) in pc.points.iter().zip(rot.points.iter()) {
            assert!((p.norm() - q.norm()).abs() < 1e-12);
        }
        let back = apply_rotation(&rot, &r.transpose()).unwrap();
        for (p, q) in pc.points.iter().zip(back.points.iter()) {
            assert!((*p - *q).norm() < 1e-12);
        }
        let id = apply_rotation(&pc, &Mat3::IDENTITY).unwrap();
        assert_eq!(id.points, pc.points);

        let mut bad = Mat3::IDENTITY;
        bad.set(0, 0, 2.0);
        assert!(matches!(
            apply_rotation(&pc, &bad),
            Err(CloudError::NotRotation)
        ));
    }

    #[test]
    fn augment_identity_and_scaling() {
        let pc = random_cloud(40, 10);
        let same = augment(&pc, 1, 0.0, (1.0, 1.0));
        assert_eq!(same.points, pc.points);

        let scaled = augment(&pc, 2, 0.0, (2.0, 2.0));
        for i in 0..5 {
            for j in (i + 1)..5 {
                let d0 = (pc.points[i] - pc.points[j]).norm();
                let d1 = (scaled.points[i] - scaled.points[j]).norm();
                assert!((d1 - 2.0 * d0).abs() < 1e-12);
            }
        }

        let a = augment(&pc, 3, 0.2, (0.67, 1.5));
        let b = augment(&pc, 3, 0.2, (0.67, 1.5));
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn noise_identity_and_outlier_count() {
        let pc = random_cloud(30, 11);
        let same = add_noise(&pc, 0.0, 0, 1);
        assert_eq!(same.points, pc.points);
        let out = add_noise(&pc, 0.0, 5, 1);
        assert_eq!(out.len(), 35);
        for p in &out.points[30..] {
            assert!(p.norm() <= 1.0);
        }
    }

    #[test]
    fn noise_sigma_matches_sample_std() {
        // Law of large numbers on ~1e6 coordinates.
        let pc = random_cloud(350_000, 12);
        let noisy = add_noise(&pc, 0.01, 0, 13);
        let mut sum2 = 0.0;
        let mut count = 0usize;
        for (p, q) in pc.points.iter().zip(noisy.points.iter()) {
            let d = *q - *p;
            sum2 += d.x * d.x + d.y * d.y + d.z * d.z;
            count += 3;
        }
        let std = (sum2 / count as f64).sqrt();
        assert!(
            (0.0099..=0.0101).contains(&std),
            "sample std {std} outside [0.0099, 0.0101]"
        );
    }
}
