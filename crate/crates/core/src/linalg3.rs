//! Exact-size 3-vector / 3x3-matrix kernels: symmetric eigendecomposition,
//! cross products, rotation construction and sampling.
//!
//! The eigensolver takes the analytic route (Cardano on the characteristic
//! polynomial) and falls back to cyclic Jacobi sweeps when the spectrum is
//! close to degenerate, where the analytic eigenvectors lose orthogonality.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Absolute entrywise tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Relative eigenvalue spacing below which the analytic path is abandoned.
const JACOBI_SPACING: f64 = 1e-6;
/// Relative spacing below which eigenvalues are treated as an exact tie and
/// the deterministic subspace tie-break applies.
const CLUSTER_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e} exceeds {SYMMETRY_TOL:.0e})")]
    NonSymmetric { asymmetry: f64 },
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,
    #[error("matrix is not a rotation (residual {residual:.3e})")]
    NotRotation { residual: f64 },
}

/// 3-vector in model units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Self = Self::new(0.0, 0.0, 0.0);
    pub const X: Self = Self::new(1.0, 0.0, 0.0);
    pub const Y: Self = Self::new(0.0, 1.0, 0.0);
    pub const Z: Self = Self::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Unit vector, or `None` when the norm is below `eps`.
    pub fn normalized(self, eps: f64) -> Option<Self> {
        let n = self.norm();
        if n <= eps {
            None
        } else {
            Some(self / n)
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Cross product, right-hand rule. Zero inputs are allowed and give zero.
pub fn cross(u: Vec3, v: Vec3) -> Vec3 {
    Vec3::new(
        u.y * v.z - u.z * v.y,
        u.z * v.x - u.x * v.z,
        u.x * v.y - u.y * v.x,
    )
}

/// 3x3 matrix, column-major storage. Columns are basis vectors when the
/// matrix is used as a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat3 {
    e: [f64; 9],
}

impl Mat3 {
    pub const IDENTITY: Self = Self {
        e: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    };
    pub const ZERO: Self = Self { e: [0.0; 9] };

    pub const fn from_cols_array(e: [f64; 9]) -> Self {
        Self { e }
    }

    pub fn from_cols(x: Vec3, y: Vec3, z: Vec3) -> Self {
        Self {
            e: [x.x, x.y, x.z, y.x, y.y, y.z, z.x, z.y, z.z],
        }
    }

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Self::from_cols(r0, r1, r2).transpose()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.e[col * 3 + row]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.e[col * 3 + row] = v;
    }

    pub fn col(&self, i: usize) -> Vec3 {
        Vec3::new(self.e[i * 3], self.e[i * 3 + 1], self.e[i * 3 + 2])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.e[i], self.e[3 + i], self.e[6 + i])
    }

    pub fn set_col(&mut self, i: usize, v: Vec3) {
        self.e[i * 3] = v.x;
        self.e[i * 3 + 1] = v.y;
        self.e[i * 3 + 2] = v.z;
    }

    pub fn cols_array(&self) -> [f64; 9] {
        self.e
    }

    pub fn transpose(&self) -> Mat3 {
        let mut t = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.e[0] + self.e[4] + self.e[8]
    }

    pub fn det(&self) -> f64 {
        self.col(0).dot(cross(self.col(1), self.col(2)))
    }

    /// Rank-one update `self += w * v v^T`.
    pub fn add_outer(&mut self, v: Vec3, w: f64) {
        for c in 0..3 {
            let vc = v.component(c) * w;
            for r in 0..3 {
                self.e[c * 3 + r] += v.component(r) * vc;
            }
        }
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for v in &mut out.e {
            *v *= s;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.e.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.e.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute deviation from symmetry, max |a_ij - a_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..3 {
            for c in (r + 1)..3 {
                m = m.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        m
    }

    /// Largest absolute deviation of `R^T R` from the identity.
    pub fn orthogonality_residual(&self) -> f64 {
        let g = self.transpose() * *self;
        let mut m: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                m = m.max((g.get(r, c) - want).abs());
            }
        }
        m
    }

    /// Checks `R^T R = I` and `det R = +1` within `tol`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        self.is_finite() && self.orthogonality_residual() <= tol && (self.det() - 1.0).abs() <= tol
    }
}

impl std::ops::Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        self.col(0) * v.x + self.col(1) * v.y + self.col(2) * v.z
    }
}

impl std::ops::Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        Mat3::from_cols(self * o.col(0), self * o.col(1), self * o.col(2))
    }
}

impl std::ops::Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut out = self;
        for (a, b) in out.e.iter_mut().zip(o.e.iter()) {
            *a -= b;
        }
        out
    }
}

impl std::ops::Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut out = self;
        for (a, b) in out.e.iter_mut().zip(o.e.iter()) {
            *a += b;
        }
        out
    }
}

/// Symmetric eigendecomposition result. Eigenvalues sorted descending,
/// eigenvectors unit length and mutually orthogonal, `A v_i = values[i] v_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEig3 {
    pub values: [f64; 3],
    pub vectors: [Vec3; 3],
}

impl SymEig3 {
    pub fn basis(&self) -> Mat3 {
        Mat3::from_cols(self.vectors[0], self.vectors[1], self.vectors[2])
    }

    pub fn reconstruct(&self) -> Mat3 {
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            out.add_outer(self.vectors[i], self.values[i]);
        }
        out
    }
}

/// Symmetric 3x3 eigendecomposition.
///
/// Rejects non-finite input and asymmetry beyond [`SYMMETRY_TOL`]. Exact and
/// near ties in the spectrum are resolved deterministically: within a
/// degenerate eigenspace the basis maximizes lexicographic (|x|,|y|,|z|) and
/// each vector is sign-fixed so its first nonzero component is positive.
pub fn eig_sym3(a: &Mat3) -> Result<SymEig3, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NonSymmetric { asymmetry: asym });
    }
    // Work on the symmetrized matrix so downstream math sees an exactly
    // symmetric operand regardless of roundoff in the input.
    let mut s = *a;
    for r in 0..3 {
        for c in (r + 1)..3 {
            let m = 0.5 * (a.get(r, c) + a.get(c, r));
            s.set(r, c, m);
            s.set(c, r, m);
        }
    }

    let scale = s.max_abs();
    if scale == 0.0 {
        return Ok(canonicalize([0.0; 3], [Vec3::X, Vec3::Y, Vec3::Z]));
    }
    let b = s.scale(1.0 / scale);

    let vals = cardano_eigenvalues(&b);
    let spread = vals[0] - vals[2];
    let min_gap = (vals[0] - vals[1]).min(vals[1] - vals[2]);
    let norm = b.max_abs().max(spread).max(f64::MIN_POSITIVE);

    let eig = if min_gap < JACOBI_SPACING * norm {
        jacobi_cyclic(&b)
    } else {
        match analytic_eigenvectors(&b, vals) {
            Some(e) if decomposition_ok(&b, &e) => e,
            _ => jacobi_cyclic(&b),
        }
    };

    let values = [
        eig.values[0] * scale,
        eig.values[1] * scale,
        eig.values[2] * scale,
    ];
    Ok(canonicalize(values, eig.vectors))
}

/// Eigenvalues of a symmetric matrix via the trigonometric form of Cardano's
/// formula, returned in descending order.
fn cardano_eigenvalues(a: &Mat3) -> [f64; 3] {
    let p1 = a.get(0, 1).powi(2) + a.get(0, 2).powi(2) + a.get(1, 2).powi(2);
    if p1 == 0.0 {
        let mut d = [a.get(0, 0), a.get(1, 1), a.get(2, 2)];
        d.sort_by(|x, y| y.partial_cmp(x).unwrap());
        return d;
    }
    let q = a.trace() / 3.0;
    let p2 = (a.get(0, 0) - q).powi(2)
        + (a.get(1, 1) - q).powi(2)
        + (a.get(2, 2) - q).powi(2)
        + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *a;
    for i in 0..3 {
        b.set(i, i, b.get(i, i) - q);
    }
    let r = (b.det() / 2.0 / p.powi(3)).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l0 = q + 2.0 * p * phi.cos();
    let l2 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
    let l1 = 3.0 * q - l0 - l2;
    [l0, l1, l2]
}

/// Eigenvectors for well-separated eigenvalues via row cross products of
/// `A - lambda I`. Returns `None` when any null-space direction is poorly
/// conditioned.
fn analytic_eigenvectors(a: &Mat3, vals: [f64; 3]) -> Option<SymEig3> {
    let mut vectors = [Vec3::ZERO; 3];
    for (i, &l) in vals.iter().enumerate() {
        let mut m = *a;
        for d in 0..3 {
            m.set(d, d, m.get(d, d) - l);
        }
        let r0 = m.row(0);
        let r1 = m.row(1);
        let r2 = m.row(2);
        let candidates = [cross(r0, r1), cross(r0, r2), cross(r1, r2)];
        let best = candidates
            .iter()
            .max_by(|p, q| p.norm_sq().partial_cmp(&q.norm_sq()).unwrap())
            .copied()
            .unwrap();
        vectors[i] = best.normalized(1e-12)?;
    }
    Some(SymEig3 {
        values: vals,
        vectors,
    })
}

fn decomposition_ok(a: &Mat3, e: &SymEig3) -> bool {
    let scale = a.max_abs().max(1e-300);
    for i in 0..3 {
        for j in (i + 1)..3 {
            if e.vectors[i].dot(e.vectors[j]).abs() > 1e-10 {
                return false;
            }
        }
        let res = *a * e.vectors[i] - e.vectors[i] * e.values[i];
        if res.norm() > 1e-10 * scale {
            return false;
        }
    }
    true
}

/// Cyclic Jacobi sweeps; robust near degenerate spectra. Converges to
/// off-diagonal mass below 1e-14 of the matrix scale.
fn jacobi_cyclic(a: &Mat3) -> SymEig3 {
    let mut d = *a;
    let mut v = Mat3::IDENTITY;
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let off = d.get(0, 1).abs() + d.get(0, 2).abs() + d.get(1, 2).abs();
        if off < 1e-14 * scale {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = d.get(p, q);
            if apq.abs() < 1e-300 {
                continue;
            }
            let app = d.get(p, p);
            let aqq = d.get(q, q);
            let theta = (aqq - app) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Mat3::IDENTITY;
            rot.set(p, p, c);
            rot.set(q, q, c);
            rot.set(p, q, s);
            rot.set(q, p, -s);
            d = rot.transpose() * d * rot;
            v = v * rot;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| d.get(j, j).partial_cmp(&d.get(i, i)).unwrap());
    SymEig3 {
        values: [
            d.get(order[0], order[0]),
            d.get(order[1], order[1]),
            d.get(order[2], order[2]),
        ],
        vectors: [v.col(order[0]), v.col(order[1]), v.col(order[2])],
    }
}

/// Flip so the first component with magnitude above 1e-12 is positive.
fn sign_fix(v: Vec3) -> Vec3 {
    for i in 0..3 {
        let c = v.component(i);
        if c.abs() > 1e-12 {
            return if c < 0.0 { -v } else { v };
        }
    }
    v
}

/// Unit vector inside the plane orthogonal to `n` that maximizes
/// lexicographic (|x|,|y|,|z|): the normalized projection of the first
/// coordinate axis not parallel to `n`.
fn plane_canonical(n: Vec3) -> Vec3 {
    for axis in [Vec3::X, Vec3::Y, Vec3::Z] {
        let proj = axis - n * n.dot(axis);
        if let Some(u) = proj.normalized(1e-6) {
            return sign_fix(u);
        }
    }
    unreachable!("a unit vector cannot be parallel to all three axes")
}

/// Deterministic ordering and orientation: descending eigenvalues, near-tied
/// eigenspaces rebuilt on canonical axes, every vector sign-fixed.
fn canonicalize(values: [f64; 3], vectors: [Vec3; 3]) -> SymEig3 {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap());
    let mut vals = [values[idx[0]], values[idx[1]], values[idx[2]]];
    let mut vecs = [vectors[idx[0]], vectors[idx[1]], vectors[idx[2]]];

    let scale = vals[0].abs().max(vals[2].abs()).max(1e-300);
    let tied01 = (vals[0] - vals[1]).abs() <= CLUSTER_TOL * scale;
    let tied12 = (vals[1] - vals[2]).abs() <= CLUSTER_TOL * scale;

    if tied01 && tied12 {
        let mean = (vals[0] + vals[1] + vals[2]) / 3.0;
        vals = [mean; 3];
        vecs = [Vec3::X, Vec3::Y, Vec3::Z];
    } else if tied01 {
        let n = sign_fix(vecs[2]);
        let w1 = plane_canonical(n);
        vecs = [w1, sign_fix(cross(n, w1)), n];
    } else if tied12 {
        let n = sign_fix(vecs[0]);
        let w1 = plane_canonical(n);
        vecs = [n, w1, sign_fix(cross(n, w1))];
    } else {
        for v in &mut vecs {
            *v = sign_fix(*v);
        }
    }

    SymEig3 {
        values: vals,
        vectors: vecs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    FullSo3,
    ZAxis,
}

/// Uniform random rotation. `FullSo3` samples a normalized Gaussian
/// quaternion (uniform over SO(3)); `ZAxis` samples a uniform angle about
/// +z, leaving `e_z` fixed. Deterministic per seed.
pub fn random_rotation(rng_seed: u64, mode: RotationMode) -> Mat3 {
    random_rotation_with(&mut seeds::rng_from(rng_seed), mode)
}

pub fn random_rotation_with<R: Rng>(rng: &mut R, mode: RotationMode) -> Mat3 {
    match mode {
        RotationMode::ZAxis => {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let (s, c) = theta.sin_cos();
            Mat3::from_cols_array([c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0])
        }
        RotationMode::FullSo3 => loop {
            let q = [
                seeds::standard_normal(rng),
                seeds::standard_normal(rng),
                seeds::standard_normal(rng),
                seeds::standard_normal(rng),
            ];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            return quat_to_mat3(w, x, y, z);
        },
    }
}

fn quat_to_mat3(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
    Mat3::from_cols_array([
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y + z * w),
        2.0 * (x * z - y * w),
        2.0 * (x * y - z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z + x * w),
        2.0 * (x * z + y * w),
        2.0 * (y * z - x * w),
        1.0 - 2.0 * (x * x + y * y),
    ])
}

/// Geodesic rotation angle in degrees, `arccos((trace - 1)/2) * 180/pi`.
/// The arccos argument is clamped to [-1, 1] to absorb roundoff.
pub fn rotation_angle_deg(r: &Mat3) -> Result<f64, LinalgError> {
    if !r.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if !r.is_rotation(SYMMETRY_TOL) {
        return Err(LinalgError::NotRotation {
            residual: r.orthogonality_residual().max((r.det() - 1.0).abs()),
        });
    }
    Ok(rotation_angle_deg_unchecked(r))
}

/// Same formula without the validity check; callers that construct frames
/// through this module already guarantee rotation matrices.
pub fn rotation_angle_deg_unchecked(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos is infinitely steep at +/-1, so trace roundoff of ~1e-16 would
    // otherwise surface as ~1e-6 degrees; identical frames must give 0.
    if c >= 1.0 - 1e-12 {
        0.0
    } else if c <= -1.0 + 1e-12 {
        180.0
    } else {
        c.acos().to_degrees()
    }
}
