//! Rotation-equivariant reference frames.
//!
//! Local frames take x from the barycenter-to-point direction and z from the
//! smallest-eigenvalue direction of a distance-weighted neighborhood
//! covariance, sign-resolved toward the point's position vector. The global
//! frame is the cloud PCA basis with per-axis majority sign voting and a
//! valid-rotation fix when the voted basis is a reflection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{NeighborIndex, PointCloud};
use crate::linalg3::{self, cross, eig_sym3, Mat3};
use crate::Vec3;

/// Relative eigenvalue gap below which the smallest-eigenvalue direction is
/// ambiguous and the neighborhood is rejected.
const EIG_GAP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),
    #[error("neighborhood barycenter coincides with the center point")]
    BarycenterCoincides,
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("basis is not a valid right-handed orthonormal frame (residual {0:.3e})")]
    InvalidFrame(f64),
    #[error(transparent)]
    Linalg(#[from] linalg3::LinalgError),
}

/// Right-handed orthonormal basis (columns x, y, z) with an origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub basis: Mat3,
    pub origin: Vec3,
}

impl Frame {
    pub fn new(basis: Mat3, origin: Vec3) -> Result<Self, FrameError> {
        let residual = basis
            .orthogonality_residual()
            .max((basis.det() - 1.0).abs());
        if residual > 1e-9 {
            return Err(FrameError::InvalidFrame(residual));
        }
        Ok(Self { basis, origin })
    }

    pub const IDENTITY: Frame = Frame {
        basis: Mat3::IDENTITY,
        origin: Vec3::ZERO,
    };

    /// Express a world-space vector in this frame: `v^T M = M^T v`.
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.basis.col(0).dot(v),
            self.basis.col(1).dot(v),
            self.basis.col(2).dot(v),
        )
    }
}

/// Strategy for turning a reflected PCA basis (det -1) into a valid rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisambiguationStrategy {
    /// (a) Swap two randomly chosen basis vectors.
    APermuteRandom,
    /// (b) Negate one randomly chosen basis vector.
    BNegateRandom,
    /// (c) Swap the two basis vectors whose S values are the smallest.
    CPermuteSmallestTwo,
    /// (d) Reverse the basis vector whose S value is the smallest.
    DReverseSmallest,
}

impl DisambiguationStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a" | "a_permute_random" => Some(Self::APermuteRandom),
            "b" | "b_negate_random" => Some(Self::BNegateRandom),
            "c" | "c_permute_smallest_two" => Some(Self::CPermuteSmallestTwo),
            "d" | "d_reverse_smallest" => Some(Self::DReverseSmallest),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::APermuteRandom => "a_permute_random",
            Self::BNegateRandom => "b_negate_random",
            Self::CPermuteSmallestTwo => "c_permute_smallest_two",
            Self::DReverseSmallest => "d_reverse_smallest",
        }
    }
}

/// Per-axis counts of points whose barycenter offset has strictly positive
/// inner product with the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignVotes {
    pub s_x: usize,
    pub s_y: usize,
    pub s_z: usize,
}

impl SignVotes {
    pub fn get(&self, axis: usize) -> usize {
        match axis {
            0 => self.s_x,
            1 => self.s_y,
            _ => self.s_z,
        }
    }
}

/// Count, per basis axis, the points voting for the axis direction.
pub fn sign_votes(pc: &PointCloud, basis: &Mat3) -> SignVotes {
    let pm = pc.barycenter();
    let mut s = [0usize; 3];
    for &p in &pc.points {
        let offset = p - pm;
        for (axis, slot) in s.iter_mut().enumerate() {
            if basis.col(axis).dot(offset) > 0.0 {
                *slot += 1;
            }
        }
    }
    SignVotes {
        s_x: s[0],
        s_y: s[1],
        s_z: s[2],
    }
}

/// Distance-weighted neighborhood covariance around `center_idx`:
/// `sum_j alpha_j (p_j - p_i)(p_j - p_i)^T` with
/// `alpha_j = (d - |p_i p_j|) / sum_j (d - |p_i p_j|)` and `d` the maximum
/// neighbor distance. An epsilon of 1e-12 is added to every unnormalized
/// weight so the all-equidistant case degrades to uniform weights instead of
/// dividing by zero.
pub fn local_covariance(
    pc: &PointCloud,
    center_idx: usize,
    nbrs: &NeighborIndex,
) -> Result<Mat3, FrameError> {
    let ids = &nbrs.neighbors[center_idx];
    let dists = &nbrs.distances[center_idx];
    let d = nbrs.d_max[center_idx];
    if d < 1e-12 {
        return Err(FrameError::DegenerateNeighborhood(
            "all neighbors coincide with the center".into(),
        ));
    }
    const EPS: f64 = 1e-12;
    let mut weight_sum = 0.0;
    for &dist in dists {
        weight_sum += (d - dist) + EPS;
    }
    let center = pc.points[center_idx];
    let mut sigma = Mat3::ZERO;
    for (&j, &dist) in ids.iter().zip(dists.iter()) {
        let w = ((d - dist) + EPS) / weight_sum;
        sigma.add_outer(pc.points[j] - center, w);
    }
    Ok(sigma)
}

/// Local reference frame at `center_idx`. See the module docs for the
/// construction; the smallest-eigenvalue direction is orthogonalized against
/// the x axis before completing the basis with `y = z x x`.
pub fn lrf(pc: &PointCloud, center_idx: usize, nbrs: &NeighborIndex) -> Result<Frame, FrameError> {
    lrf_with_options(pc, center_idx, nbrs, true)
}

/// `disambiguate = false` keeps the raw eigenvector sign from the solver,
/// which is not a geometric quantity; used to demonstrate how sign ambiguity
/// breaks invariance.
pub fn lrf_with_options(
    pc: &PointCloud,
    center_idx: usize,
    nbrs: &NeighborIndex,
    disambiguate: bool,
) -> Result<Frame, FrameError> {
    let center = pc.points[center_idx];
    // Barycenter of the local geometry: the center point plus its neighbors.
    let ids = &nbrs.neighbors[center_idx];
    let mut pm = center;
    for &j in ids {
        pm = pm + pc.points[j];
    }
    pm = pm / (ids.len() + 1) as f64;

    let x = (center - pm)
        .normalized(1e-12)
        .ok_or(FrameError::BarycenterCoincides)?;

    let sigma = local_covariance(pc, center_idx, nbrs)?;
    let eig = eig_sym3(&sigma)?;
    let scale = eig.values[0].abs().max(1e-300);
    if (eig.values[1] - eig.values[2]) / scale < EIG_GAP_TOL {
        return Err(FrameError::DegenerateNeighborhood(format!(
            "smallest-eigenvalue direction ambiguous (gap {:.3e})",
            eig.values[1] - eig.values[2]
        )));
    }

    let mut z = eig.vectors[2];
    // Resolve the EVD sign toward the point's position vector (o p_i), o the
    // world origin of the input cloud before any centering.
    if disambiguate && z.dot(center) < 0.0 {
        z = -z;
    }
    // The eigenvector is generally not orthogonal to x; project and
    // renormalize so the basis is exactly orthonormal.
    let z = (z - x * z.dot(x))
        .normalized(1e-9)
        .ok_or_else(|| FrameError::DegenerateNeighborhood("z parallel to x".into()))?;
    let y = cross(z, x);
    Frame::new(Mat3::from_cols(x, y, z), center)
}

/// Global reference frame from cloud PCA. Randomized valid-rotation
/// strategies draw from `rng`; the default strategy (d) is deterministic.
pub fn grf<R: Rng>(
    pc: &PointCloud,
    strategy: DisambiguationStrategy,
    rng: &mut R,
) -> Result<Frame, FrameError> {
    grf_with_options(pc, strategy, true, rng)
}

pub fn grf_with_options<R: Rng>(
    pc: &PointCloud,
    strategy: DisambiguationStrategy,
    disambiguate: bool,
    rng: &mut R,
) -> Result<Frame, FrameError> {
    let n = pc.len();
    if n < 2 {
        return Err(FrameError::DegenerateCloud("fewer than 2 points".into()));
    }
    let pm = pc.barycenter();
    let mut sigma = Mat3::ZERO;
    for &p in &pc.points {
        sigma.add_outer(p - pm, 1.0 / n as f64);
    }
    if sigma.trace() < 1e-18 {
        return Err(FrameError::DegenerateCloud("all points coincide".into()));
    }
    let eig = eig_sym3(&sigma)?;
    if eig.values[1] / eig.values[0].max(1e-300) < EIG_GAP_TOL {
        return Err(FrameError::DegenerateCloud("points are colinear".into()));
    }

    let mut basis = eig.basis();
    if disambiguate {
        // Majority voting: keep an axis iff at least half of the points lie
        // on its positive side, otherwise flip it.
        let votes = sign_votes(pc, &basis);
        for axis in 0..3 {
            if (votes.get(axis) as f64) < n as f64 / 2.0 {
                basis.set_col(axis, -basis.col(axis));
            }
        }
    }

    if basis.det() < 0.0 {
        let votes = sign_votes(pc, &basis);
        apply_valid_rotation_fix(&mut basis, &votes, strategy, rng);
    }

    Frame::new(basis, pm)
}

fn apply_valid_rotation_fix<R: Rng>(
    basis: &mut Mat3,
    votes: &SignVotes,
    strategy: DisambiguationStrategy,
    rng: &mut R,
) {
    // Vote order with ties broken by lower axis index.
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&a| (votes.get(a), a));
    match strategy {
        DisambiguationStrategy::APermuteRandom => {
            let i = rng.random_range(0..3usize);
            let j = (i + rng.random_range(1..3usize)) % 3;
            swap_cols(basis, i, j);
        }
        DisambiguationStrategy::BNegateRandom => {
            let i = rng.random_range(0..3usize);
            basis.set_col(i, -basis.col(i));
        }
        DisambiguationStrategy::CPermuteSmallestTwo => {
            swap_cols(basis, order[0], order[1]);
        }
        DisambiguationStrategy::DReverseSmallest => {
            basis.set_col(order[0], -basis.col(order[0]));
        }
    }
}

fn swap_cols(m: &mut Mat3, i: usize, j: usize) {
    let a = m.col(i);
    let b = m.col(j);
    m.set_col(i, b);
    m.set_col(j, a);
}

/// Relative rotation between two frames, `basis_a * basis_b^T`.
pub fn relative_rotation(f_a: &Frame, f_b: &Frame) -> Mat3 {
    f_a.basis * f_b.basis.transpose()
}

/// Relative translation between frame origins. Computed for completeness;
/// nothing downstream consumes it.
pub fn relative_translation(f_a: &Frame, f_b: &Frame) -> Vec3 {
    f_a.origin - f_b.origin
}

/// Geodesic angle in degrees between two frames, in [0, 180]; symmetric in
/// the argument order.
pub fn relative_angle_deg(f_a: &Frame, f_b: &Frame) -> f64 {
    linalg3::rotation_angle_deg_unchecked(&relative_rotation(f_a, f_b))
}
