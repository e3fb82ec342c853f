//! Verification suites: equivariance and invariance checks, metric
//! properties, oracle equalities, and finite-difference gradient audits.
//! Each suite reports its maximum residual against a pinned tolerance.

use std::time::Instant;

use rand::Rng;
use serde_json::json;

use super::config::TrainConfig;
use super::data::{build_sample_from_cloud, PipelineOptions, Split};
use super::report::Report;
use super::HarnessError;
use crate::autodiff::{gradcheck, Shape, Tape, Tensor};
use crate::cloud::{self, apply_rotation, generate_shape, knn, PointCloud, ShapeFamily, ShapeSpec};
use crate::descriptors;
use crate::frames::{self, DisambiguationStrategy};
use crate::linalg3::{self, cross, eig_sym3, random_rotation_with, Mat3, RotationMode};
use crate::net::{
    self, forward_sample, registration_loss_single, ModelParams, ParamBinder, RegistrationParams,
};
use crate::seeds;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fast" => Some(Self::Fast),
            "full" => Some(Self::Full),
            _ => None,
        }
    }

    fn scale(&self, fast: usize, full: usize) -> usize {
        match self {
            Level::Fast => fast,
            Level::Full => full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seconds: f64,
    pub details: serde_json::Value,
}

impl SuiteResult {
    fn from_residual(name: &str, max_residual: f64, tolerance: f64, started: Instant) -> Self {
        Self {
            name: name.into(),
            max_residual,
            tolerance,
            pass: max_residual <= tolerance,
            seconds: started.elapsed().as_secs_f64(),
            details: serde_json::Value::Null,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:<28} max_residual={:.3e} tol={:.0e} ({:.2}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_residual,
            self.tolerance,
            self.seconds
        )
    }
}

pub struct VerifyOptions {
    pub level: Level,
    pub disambiguate: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            level: Level::Fast,
            disambiguate: true,
            seed: 7,
        }
    }
}

fn random_symmetric(rng: &mut impl Rng) -> Mat3 {
    let mut b = Mat3::ZERO;
    for r in 0..3 {
        for c in 0..3 {
            b.set(r, c, rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    b + b.transpose()
}

/// Independent eigendecomposition oracle: classical Jacobi with
/// largest-off-diagonal pivoting, run to 1e-14 of the matrix scale. Shares
/// no code with the production solver.
pub fn jacobi_oracle(a: &Mat3) -> ([f64; 3], Mat3) {
    let mut d = *a;
    let mut v = Mat3::IDENTITY;
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _ in 0..512 {
        let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
        let (p, q) = *pairs
            .iter()
            .max_by(|x, y| {
                d.get(x.0, x.1)
                    .abs()
                    .partial_cmp(&d.get(y.0, y.1).abs())
                    .unwrap()
            })
            .unwrap();
        let apq = d.get(p, q);
        if apq.abs() < 1e-14 * scale {
            break;
        }
        let theta = (d.get(q, q) - d.get(p, p)) / (2.0 * apq);
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
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| d.get(j, j).partial_cmp(&d.get(i, i)).unwrap());
    (
        [
            d.get(order[0], order[0]),
            d.get(order[1], order[1]),
            d.get(order[2], order[2]),
        ],
        Mat3::from_cols(v.col(order[0]), v.col(order[1]), v.col(order[2])),
    )
}

/// Eigendecomposition versus the Jacobi oracle: reconstruction error and
/// eigenvalue agreement over `n` random symmetric matrices.
pub fn suite_eig_oracle(n: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xE16, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let a = random_symmetric(&mut rng);
        let e = eig_sym3(&a).expect("random symmetric matrix decomposes");
        worst = worst.max((e.reconstruct() - a).max_abs());
        let (oracle_vals, _) = jacobi_oracle(&a);
        for i in 0..3 {
            worst = worst.max((e.values[i] - oracle_vals[i]).abs());
        }
        // Ordering is part of the contract.
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
    }
    let mut r = SuiteResult::from_residual("eig_jacobi_oracle", worst, 1e-8, started);
    r.details = json!({ "matrices": n });
    r
}

fn random_patch(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 1.2 - 0.6,
                    rng.random::<f64>() * 0.7 - 0.35,
                )
            })
            .collect(),
    )
    .unwrap()
}

/// x-axis equivariance: the barycenter-to-point direction rotates with the
/// patch.
pub fn suite_x_axis_equivariance(patches: usize, rotations: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xA1, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..patches {
        let pc = random_patch(&mut rng, 24);
        let pm = pc.barycenter();
        let x = (pc.points[0] - pm).normalized(1e-12).unwrap();
        for _ in 0..rotations {
            let r = random_rotation_with(&mut rng, RotationMode::FullSo3);
            let rot = apply_rotation(&pc, &r).unwrap();
            let pm_rot = rot.barycenter();
            let x_rot = (rot.points[0] - pm_rot).normalized(1e-12).unwrap();
            worst = worst.max((x_rot - r * x).norm());
        }
    }
    SuiteResult::from_residual("x_axis_equivariance", worst, 1e-12, started)
}

/// Covariance conjugation: the weighted neighborhood covariance of a rotated
/// patch equals the rotated covariance.
pub fn suite_covariance_conjugation(patches: usize, rotations: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xC0, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..patches {
        let pc = random_patch(&mut rng, 32);
        let nbrs = knn(&pc, 12).unwrap();
        let sigma = frames::local_covariance(&pc, 0, &nbrs).unwrap();
        for _ in 0..rotations {
            let r = random_rotation_with(&mut rng, RotationMode::FullSo3);
            let rot = apply_rotation(&pc, &r).unwrap();
            let nbrs_rot = knn(&rot, 12).unwrap();
            let sigma_rot = frames::local_covariance(&rot, 0, &nbrs_rot).unwrap();
            worst = worst.max((sigma_rot - r * sigma * r.transpose()).max_abs());
        }
    }
    SuiteResult::from_residual("covariance_conjugation", worst, 1e-10, started)
}

/// Eigenvalues are invariant under conjugation by a rotation.
pub fn suite_eigenvalue_rotation(n: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xE3, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let a = random_symmetric(&mut rng);
        let r = random_rotation_with(&mut rng, RotationMode::FullSo3);
        let b = r * a * r.transpose();
        let mut sym = b;
        for i in 0..3 {
            for j in (i + 1)..3 {
                let m = 0.5 * (b.get(i, j) + b.get(j, i));
                sym.set(i, j, m);
                sym.set(j, i, m);
            }
        }
        let ea = eig_sym3(&a).unwrap();
        let eb = eig_sym3(&sym).unwrap();
        for i in 0..3 {
            worst = worst.max((ea.values[i] - eb.values[i]).abs());
        }
    }
    SuiteResult::from_residual("eigenvalue_rotation", worst, 1e-9, started)
}

/// Cross products are rotation-equivariant for proper rotations.
pub fn suite_cross_equivariance(n: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xC4055, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let u = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let v = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let r = random_rotation_with(&mut rng, RotationMode::FullSo3);
        worst = worst.max((cross(r * u, r * v) - r * cross(u, v)).norm());
    }
    SuiteResult::from_residual("cross_product_equivariance", worst, 1e-12, started)
}

/// Frame equivariance: `M(R pc) = R M(pc)` in Frobenius norm over random
/// patches and rotations.
pub fn suite_frame_equivariance(patches: usize, rotations: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xF4A, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..patches {
        let pc = random_patch(&mut rng, 48);
        let nbrs = knn(&pc, 16).unwrap();
        let f = frames::lrf(&pc, 0, &nbrs).unwrap();
        for _ in 0..rotations {
            let r = random_rotation_with(&mut rng, RotationMode::FullSo3);
            let rot = apply_rotation(&pc, &r).unwrap();
            let nbrs_rot = knn(&rot, 16).unwrap();
            let f_rot = frames::lrf(&rot, 0, &nbrs_rot).unwrap();
            worst = worst.max((f_rot.basis - r * f.basis).frobenius_norm());
        }
    }
    let mut r = SuiteResult::from_residual("frame_equivariance", worst, 1e-7, started);
    r.details = json!({ "patches": patches, "rotations": rotations });
    r
}

fn generic_test_shapes(seed: u64, n_points: usize) -> Vec<PointCloud> {
    // Jittered asymmetric shapes: generic geometry with healthy eigenvalue
    // gaps everywhere.
    let mut shapes = Vec::new();
    for (i, family) in [
        ShapeFamily::Ellipsoid {
            semi_axes: [1.0, 0.63, 0.34],
        },
        ShapeFamily::Box {
            half_extents: [1.0, 0.71, 0.42],
        },
        ShapeFamily::Cone {
            radius: 0.8,
            height: 1.7,
        },
        ShapeFamily::Helix {
            radius: 0.7,
            pitch: 0.5,
            turns: 2.5,
            tube: 0.08,
        },
    ]
    .into_iter()
    .enumerate()
    {
        let pc = generate_shape(&ShapeSpec::new(family, n_points), seed + i as u64).unwrap();
        shapes.push(cloud::add_noise(&pc, 0.02, 0, seed ^ (i as u64) << 3));
    }
    shapes
}

/// A cloud with an exact reflection symmetry: half the points sampled
/// generically, then mirrored across the yz-plane.
pub fn mirrored_cloud(seed: u64, half: usize) -> PointCloud {
    let mut rng = seeds::stream(seed, 0x311, 0, 0);
    let mut points = Vec::with_capacity(half * 2);
    for _ in 0..half {
        let p = Vec3::new(
            rng.random::<f64>() * 1.5 + 0.1,
            rng.random::<f64>() * 1.2 - 0.6,
            rng.random::<f64>() * 0.8 - 0.4,
        );
        points.push(p);
        points.push(Vec3::new(-p.x, p.y, p.z));
    }
    PointCloud::new(points).unwrap()
}

/// Descriptor invariance on generic shapes (or mirrored ones): max absolute
/// change of the full descriptor set under random rotations, with identical
/// sampling indices.
pub fn suite_descriptor_invariance(
    rotations: usize,
    seed: u64,
    disambiguate: bool,
    mirrored: bool,
) -> SuiteResult {
    let started = Instant::now();
    let shapes: Vec<PointCloud> = if mirrored {
        (0..20).map(|i| mirrored_cloud(seed + i, 48)).collect()
    } else {
        generic_test_shapes(seed, 128)
    };
    let strategy = DisambiguationStrategy::DReverseSmallest;
    let mut worst = 0.0f64;
    let mut failed_shapes = 0usize;
    let mut rot_rng = seeds::stream(seed, 0xD35C, 1, 0);
    for pc in &shapes {
        let mut grf_rng = seeds::stream(seed, 0xD35C, 0, 0);
        let base = descriptors::extract(pc, 16, strategy, disambiguate, &mut grf_rng).unwrap();
        let mut shape_worst = 0.0f64;
        for _ in 0..rotations {
            let r = random_rotation_with(&mut rot_rng, RotationMode::FullSo3);
            let rot = apply_rotation(pc, &r).unwrap();
            let mut grf_rng = seeds::stream(seed, 0xD35C, 0, 0);
            let ds = descriptors::extract(&rot, 16, strategy, disambiguate, &mut grf_rng).unwrap();
            for (a, b) in base.local.iter().flatten().zip(ds.local.iter().flatten()) {
                shape_worst = shape_worst.max((*a - *b).norm());
            }
            for (a, b) in base.global.iter().zip(ds.global.iter()) {
                shape_worst = shape_worst.max((*a - *b).norm());
            }
        }
        if shape_worst > 1e-7 {
            failed_shapes += 1;
        }
        worst = worst.max(shape_worst);
    }
    let name = if mirrored {
        "descriptor_invariance_mirrored"
    } else {
        "descriptor_invariance"
    };
    let mut r = SuiteResult::from_residual(name, worst, 1e-7, started);
    r.details = json!({
        "shapes": shapes.len(),
        "rotations": rotations,
        "failed_shapes": failed_shapes,
        "disambiguate": disambiguate,
    });
    r
}

/// Pairwise relative-angle matrix properties over LRFs of one cloud:
/// symmetric, zero diagonal, range [0, 180].
pub fn suite_angle_metric(n_frames: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0x46E7, 0, 0);
    let pc = random_patch(&mut rng, n_frames * 2);
    let nbrs = knn(&pc, 16).unwrap();
    let frames: Vec<frames::Frame> = (0..n_frames)
        .map(|i| frames::lrf(&pc, i, &nbrs).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for (i, fa) in frames.iter().enumerate() {
        for (j, fb) in frames.iter().enumerate() {
            let a = frames::relative_angle_deg(fa, fb);
            if i == j {
                worst = worst.max(a.abs());
            }
            let sym = (a - frames::relative_angle_deg(fb, fa)).abs();
            worst = worst.max(sym);
            if !(0.0..=180.0).contains(&a) {
                worst = worst.max(a.abs() - 180.0);
            }
        }
    }
    let mut r = SuiteResult::from_residual("angle_metric", worst, 0.0, started);
    r.details = json!({ "frames": n_frames });
    r
}

/// Correspondence map rows are probability distributions.
pub fn suite_correspondence_stochastic(trials: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xC0441, 0, 0);
    let config = net::ModelConfig {
        width2: 12,
        proj_dim: 8,
        temperature: 0.21,
        ..net::ModelConfig::default()
    };
    let params = RegistrationParams::init(&config, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = 4 + rng.random_range(0..6usize);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let x_data: Vec<f64> = (0..n * 12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y_data: Vec<f64> = (0..n * 12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let x = tape.leaf(x_data, [n, 12], false).unwrap();
        let y = tape.leaf(y_data, [n, 12], false).unwrap();
        let m = net::correspondence_map(&mut tape, &mut binder, x, y, &params).unwrap();
        let vals = tape.value(m);
        for r in 0..n {
            let row = &vals[r * n..(r + 1) * n];
            let sum: f64 = row.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            for &v in row {
                if v < 0.0 {
                    worst = worst.max(-v);
                }
            }
        }
    }
    SuiteResult::from_residual("correspondence_stochastic", worst, 1e-9, started)
}

/// Registration loss versus an explicit double-loop InfoNCE evaluation on
/// the spec instance size.
pub fn suite_registration_oracle(trials: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0x0421, 0, 0);
    let (b, n, c) = (2usize, 4usize, 8usize);
    let rows = b * n;
    let config = net::ModelConfig {
        width2: c,
        proj_dim: 6,
        temperature: 0.5,
        ..net::ModelConfig::default()
    };
    let mut worst = 0.0f64;
    for t in 0..trials {
        let params = RegistrationParams::init(&config, &mut seeds::stream(seed, 0x0422, t as u64, 0));
        let u_rows: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let f_rows: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let u = tape.leaf(u_rows.concat(), [rows, c], false).unwrap();
        let f = tape.leaf(f_rows.concat(), [rows, c], false).unwrap();
        let loss = registration_loss_single(&mut tape, &mut binder, u, f, &params).unwrap();

        let pu: Vec<Vec<f64>> = u_rows.iter().map(|r| mlp_eval(&params.phi1, r)).collect();
        let pf: Vec<Vec<f64>> = f_rows.iter().map(|r| mlp_eval(&params.phi2, r)).collect();
        let want = brute_force_info_nce(&pu, &pf, params.temperature);
        worst = worst.max((tape.value(loss)[0] - want).abs());
    }
    let mut r = SuiteResult::from_residual("registration_oracle", worst, 1e-10, started);
    r.details = json!({ "instance": "B=2 N=4 C=8", "trials": trials });
    r
}

/// Plain tape-free MLP evaluation used by the oracle path only.
fn mlp_eval(mlp: &net::Mlp, row: &[f64]) -> Vec<f64> {
    let mut h = row.to_vec();
    let last = mlp.layers.len() - 1;
    for (li, layer) in mlp.layers.iter().enumerate() {
        let (ins, outs) = (layer.weight.rows, layer.weight.cols);
        let mut next = vec![0.0; outs];
        for (o, slot) in next.iter_mut().enumerate() {
            let mut acc = layer.bias.data[o];
            for i in 0..ins {
                acc += h[i] * layer.weight.data[i * outs + o];
            }
            *slot = acc;
        }
        if li < last || mlp.activate_last {
            for v in &mut next {
                if *v < 0.0 {
                    *v *= net::LEAKY_SLOPE;
                }
            }
        }
        h = next;
    }
    h
}

fn brute_force_info_nce(pu: &[Vec<f64>], pf: &[Vec<f64>], t: f64) -> f64 {
    let n = pu.len();
    let sim = |a: &[f64], b: &[f64]| {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / t
    };
    let mut total = 0.0;
    for i in 0..n {
        let sims: Vec<f64> = (0..n).map(|k| sim(&pf[i], &pu[k])).collect();
        let m = sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = sims.iter().map(|&s| (s - m).exp()).sum();
        total += -(sims[i] - m - denom.ln());
    }
    total / n as f64
}

/// Finite-difference audit of every autodiff primitive.
pub fn suite_autodiff_primitives(trials: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xFD, 0, 0);
    let mut worst = 0.0f64;

    let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    };
    // Bounded away from zero for kinked ops.
    let rand_off_kink = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = 0.2 + 0.8 * rng.random::<f64>();
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    };

    type Builder = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor, crate::autodiff::AdError>>;
    let reduce = |t: &mut Tape, x: Tensor| {
        let n = t.shape(x).numel();
        let flat = t.reshape(x, [1, n])?;
        let sq = t.hadamard(flat, flat)?;
        let m = t.mean_over_axis(sq, 1)?;
        t.scalar_mul(m, n as f64)
    };
    let cases: Vec<(&str, bool, Builder)> = vec![
        ("add_broadcast", false, Box::new(move |t, xs| {
            let bias = t.gather_rows(xs[1], &[0])?;
            let y = t.add(xs[0], bias)?;
            reduce(t, y)
        })),
        ("sub", false, Box::new(move |t, xs| {
            let y = t.sub(xs[0], xs[1])?;
            reduce(t, y)
        })),
        ("scalar_mul", false, Box::new(move |t, xs| {
            let y = t.scalar_mul(xs[0], -2.3)?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("hadamard", false, Box::new(move |t, xs| {
            let y = t.hadamard(xs[0], xs[1])?;
            reduce(t, y)
        })),
        ("matmul", false, Box::new(move |t, xs| {
            let yt = t.transpose(xs[1])?;
            let y = t.matmul(xs[0], yt)?;
            reduce(t, y)
        })),
        ("relu", true, Box::new(move |t, xs| {
            let y = t.relu(xs[0])?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("leaky_relu", true, Box::new(move |t, xs| {
            let y = t.leaky_relu(xs[0], 0.2)?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("row_softmax", false, Box::new(move |t, xs| {
            let y = t.row_softmax(xs[0])?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("l1_normalize_rows", true, Box::new(move |t, xs| {
            let y = t.l1_normalize_rows(xs[0])?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("max_over_axis", false, Box::new(move |t, xs| {
            let g = t.reshape(xs[0], [2, 2, 3])?;
            let y = t.max_over_axis(g, 1)?;
            let w = t.gather_rows(xs[1], &[0, 1])?;
            let wn = t.gather_rows(w, &[0, 1])?;
            let w2 = t.reshape(wn, [2, 3])?;
            let z = t.hadamard(y, w2)?;
            reduce(t, z)
        })),
        ("mean_over_axis", false, Box::new(move |t, xs| {
            let y = t.mean_over_axis(xs[0], 0)?;
            let n = t.shape(y).numel();
            let flat = t.reshape(y, [1, n])?;
            reduce(t, flat)
        })),
        ("concat", false, Box::new(move |t, xs| {
            let y = t.concat(&[xs[0], xs[1]], 1)?;
            reduce(t, y)
        })),
        ("transpose", false, Box::new(move |t, xs| {
            let y = t.transpose(xs[0])?;
            let z = t.matmul(y, xs[1])?;
            reduce(t, z)
        })),
        ("gather_rows", false, Box::new(move |t, xs| {
            let y = t.gather_rows(xs[0], &[2, 0, 0, 3])?;
            reduce(t, y)
        })),
        ("cross_entropy_logits", false, Box::new(move |t, xs| {
            t.cross_entropy_logits(xs[0], &[2, 0, 1, 2])
        })),
        ("exp", false, Box::new(move |t, xs| {
            let y = t.exp(xs[0])?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("log", false, Box::new(move |t, xs| {
            // Shifted to positive inputs.
            let ones = t.constant(vec![2.5; 12], [4, 3])?;
            let shifted = t.add(ones, xs[0])?;
            let y = t.log(shifted)?;
            let z = t.hadamard(y, xs[1])?;
            reduce(t, z)
        })),
        ("rel_logits", false, Box::new(move |t, xs| {
            let q = t.gather_rows(xs[0], &[0, 1, 2])?;
            let e9 = t.concat(&[xs[1], xs[1], xs[1]], 0)?;
            let e = t.gather_rows(e9, &[0, 1, 2, 3, 4, 5, 6, 7, 8])?;
            let a = t.rel_logits(q, e)?;
            reduce(t, a)
        })),
    ];

    let mut per_op = serde_json::Map::new();
    for (name, off_kink, builder) in &cases {
        let mut op_worst = 0.0f64;
        for _ in 0..trials {
            let a = if *off_kink {
                rand_off_kink(&mut rng, 12)
            } else {
                rand_vec(&mut rng, 12)
            };
            let b = rand_vec(&mut rng, 12);
            let err = gradcheck::check(
                builder,
                &[(a, Shape::new(&[4, 3])), (b, Shape::new(&[4, 3]))],
                6,
                &mut rng,
            )
            .expect("gradcheck builds");
            op_worst = op_worst.max(err);
        }
        per_op.insert(name.to_string(), json!(op_worst));
        worst = worst.max(op_worst);
    }
    let mut r = SuiteResult::from_residual("autodiff_primitives", worst, 1e-5, started);
    r.details = json!({ "trials_per_op": trials, "per_op": per_op });
    r
}

/// Finite-difference audit of the composed AFI + cross-entropy +
/// registration graph at tiny sizes.
pub fn suite_composed_gradient(trials: usize, seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = seeds::stream(seed, 0xAF1, 0, 0);
    let (n, c, d) = (4usize, 6usize, 4usize);
    let config = net::ModelConfig {
        width2: c,
        attn_dim: d,
        proj_dim: 5,
        temperature: 0.4,
        n_classes: 3,
        ..net::ModelConfig::default()
    };
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut init_rng = seeds::stream(seed, 0xAF2, t as u64, 0);
        let self_proj = net::AttnProj::init(c, d, &mut init_rng);
        let cross_proj = net::AttnProj::init(c, d, &mut init_rng);
        let phi = net::Mlp::init(&[c, c, c], false, &mut init_rng);
        let reg = RegistrationParams::init(&config, &mut init_rng);
        let cls = net::Mlp::init(&[c, 5, 3], false, &mut init_rng);
        let angles_self: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() * 180.0).collect();
        let angles_cross: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 180.0).collect();
        let e_sa_data = net::angular_embedding(&angles_self, d, 15.0);
        let e_ca_data = net::angular_embedding(&angles_cross, d, 15.0);

        let builder = |tape: &mut Tape, xs: &[Tensor]| {
            let mut binder = ParamBinder::new(false);
            let e_sa = tape.constant(e_sa_data.clone(), [n * n, d])?;
            let e_ca = tape.constant(e_ca_data.clone(), [n, d])?;
            let u = net::afi(
                tape,
                &mut binder,
                xs[0],
                xs[1],
                Some(e_sa),
                Some(e_ca),
                &self_proj,
                &cross_proj,
                &phi,
                net::OffsetNorm::Pct,
            )?;
            let logits = net::classify(tape, &mut binder, &cls, u)?;
            let ce = tape.cross_entropy_logits(logits, &[1])?;
            let l_l = registration_loss_single(tape, &mut binder, u, xs[0], &reg)?;
            let l_g = registration_loss_single(tape, &mut binder, u, xs[1], &reg)?;
            let reg_total = tape.add(l_l, l_g)?;
            tape.add(ce, reg_total)
        };
        let f_l: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let f_g: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let err = gradcheck::check(
            &builder,
            &[(f_l, Shape::new(&[n, c])), (f_g, Shape::new(&[n, c]))],
            6,
            &mut rng,
        )
        .expect("composed graph builds");
        worst = worst.max(err);
    }
    let mut r = SuiteResult::from_residual("composed_graph_fd", worst, 1e-5, started);
    r.details = json!({ "trials": trials });
    r
}

/// End-to-end logits invariance with random weights on generic shapes.
pub fn suite_logits_invariance(
    rotations: usize,
    seed: u64,
    disambiguate: bool,
) -> SuiteResult {
    let started = Instant::now();
    let mut config = TrainConfig::default();
    config.n_points = 96;
    config.sa1_size = 48;
    config.sa2_size = 16;
    config.width1 = 16;
    config.width2 = 24;
    config.k_lrf = 12;
    config.k_group = 8;
    config.attn_dim = 8;
    config.ait_blocks = 1;
    config.proj_dim = 8;
    config.classes = 4;
    config.seed = seed;
    config.disambiguate = disambiguate;
    config.augment = false;
    config.validate().expect("verify config is valid");
    let model_config = config.model_config();
    let params = ModelParams::init(&model_config, seed);

    let shapes = generic_test_shapes(seed ^ 0x10617, 256);
    let mut rng = seeds::stream(seed, 0x10617, 0, 0);
    let mut worst = 0.0f64;
    let opts = PipelineOptions {
        split: Split::Test,
        epoch: 0,
        rotation: None,
        augment: false,
        noise_sigma: 0.0,
        noise_outliers: 0,
    };
    for (si, pc) in shapes.iter().enumerate() {
        let geom = build_sample_from_cloud(&config, pc, si, &opts).expect("geometry builds");
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let fwd = forward_sample(&mut tape, &mut binder, &params, &model_config, &geom)
            .expect("forward runs");
        let base = tape.value(fwd.logits).to_vec();
        for _ in 0..rotations {
            let r = random_rotation_with(&mut rng, RotationMode::FullSo3);
            let rot = apply_rotation(pc, &r).unwrap();
            let geom_rot = build_sample_from_cloud(&config, &rot, si, &opts).expect("geometry");
            let mut tape2 = Tape::new();
            let mut binder2 = ParamBinder::new(false);
            let fwd2 = forward_sample(&mut tape2, &mut binder2, &params, &model_config, &geom_rot)
                .expect("forward runs");
            for (a, b) in base.iter().zip(tape2.value(fwd2.logits).iter()) {
                worst = worst.max((a - b).abs() / (a.abs() + 1e-6));
            }
        }
    }
    let mut r = SuiteResult::from_residual("logits_invariance", worst, 1e-6, started);
    r.details = json!({
        "shapes": shapes.len(),
        "rotations": rotations,
        "disambiguate": disambiguate,
    });
    r
}

/// Run the configured verification suites, printing one line per suite.
pub fn run_verify(opts: &VerifyOptions) -> (Vec<SuiteResult>, Report) {
    let level = opts.level;
    let seed = opts.seed;
    let mut suites = vec![
        suite_eig_oracle(level.scale(2000, 10_000), seed),
        suite_x_axis_equivariance(level.scale(50, 200), level.scale(5, 20), seed),
        suite_covariance_conjugation(level.scale(20, 100), level.scale(5, 20), seed),
        suite_eigenvalue_rotation(level.scale(500, 5000), seed),
        suite_cross_equivariance(level.scale(2000, 10_000), seed),
        suite_frame_equivariance(level.scale(50, 200), level.scale(5, 20), seed),
        suite_angle_metric(level.scale(48, 128), seed),
        suite_correspondence_stochastic(level.scale(10, 50), seed),
        suite_registration_oracle(level.scale(5, 20), seed),
        suite_autodiff_primitives(level.scale(10, 100), seed),
        suite_composed_gradient(level.scale(5, 100), seed),
    ];
    if opts.disambiguate {
        suites.push(suite_descriptor_invariance(
            level.scale(10, 50),
            seed,
            true,
            false,
        ));
        suites.push(suite_logits_invariance(level.scale(10, 50), seed, true));
    } else {
        // Sign-ambiguity regression: raw EVD signs on mirrored shapes are
        // expected to break invariance, failing this suite.
        suites.push(suite_descriptor_invariance(
            level.scale(10, 20),
            seed,
            false,
            true,
        ));
    }

    for s in &suites {
        println!("{}", s.line());
    }

    let config = TrainConfig {
        seed,
        disambiguate: opts.disambiguate,
        ..TrainConfig::default()
    };
    let payload = json!({
        "level": match level { Level::Fast => "fast", Level::Full => "full" },
        "all_pass": suites.iter().all(|s| s.pass),
        "suites": suites.iter().map(|s| json!({
            "name": s.name,
            "max_residual": s.max_residual,
            "tolerance": s.tolerance,
            "pass": s.pass,
            "seconds": s.seconds,
            "details": s.details,
        })).collect::<Vec<_>>(),
    });
    let report = Report::new("verify", config.config_hash(), config.resolved(), payload);
    (suites, report)
}

/// CLI entry: errors with the failing suite names for exit-code mapping.
pub fn verify_command(opts: &VerifyOptions) -> Result<Report, HarnessError> {
    let (suites, report) = run_verify(opts);
    let failing: Vec<String> = suites
        .iter()
        .filter(|s| !s.pass)
        .map(|s| s.name.clone())
        .collect();
    if failing.is_empty() {
        Ok(report)
    } else {
        Err(HarnessError::VerificationFailed(failing.join(", ")))
    }
}
