//! Two-stage set-abstraction encoder over rotation-invariant descriptors.
//!
//! Stage inputs are neighbor offsets expressed either in the center point's
//! local frame (local branch) or in the global frame (global branch), so the
//! whole encoder sees only rotation-invariant quantities. Grouping and
//! downsampling use distances alone and are therefore rotation-stable for a
//! fixed seed.

use thiserror::Error;

use super::{Mlp, ModelConfig, ParamBinder};
use crate::autodiff::{AdError, Tape, Tensor};
use crate::cloud::{fps_indices, knn, CloudError, PointCloud};
use crate::frames::{
    grf_with_options, lrf_with_options, relative_angle_deg, DisambiguationStrategy, Frame,
    FrameError,
};
use crate::seeds;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Weights of the two shared-MLP stages.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub stage1: Mlp,
    pub stage2: Mlp,
}

impl EncoderParams {
    pub fn init(config: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let h1 = (config.width1 / 2).max(8);
        let h2 = (config.width2 / 2).max(config.width1);
        Self {
            stage1: Mlp::init(&[3, h1, config.width1], true, rng),
            stage2: Mlp::init(&[3 + config.width1, h2, config.width2], true, rng),
        }
    }
}

/// Downsampling indices and grouped neighbor tables for both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    /// Stage-1 centers: indices into the level-0 cloud.
    pub level1: Vec<usize>,
    /// Stage-2 centers: positions into `level1`.
    pub level2: Vec<usize>,
    /// Flattened (sa1_size x k_group) neighbor indices into level 0.
    pub groups1: Vec<usize>,
    /// Flattened (sa2_size x k_group) neighbor positions into `level1`.
    pub groups2: Vec<usize>,
}

/// Constant (non-differentiated) model inputs derived from one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGeometry {
    pub plan: SamplingPlan,
    /// Per-stage grouped descriptors, flattened (centers * k_group) x 3.
    pub stage1_local: Vec<f64>,
    pub stage1_global: Vec<f64>,
    pub stage2_local: Vec<f64>,
    pub stage2_global: Vec<f64>,
    /// Pairwise relative frame angles of the stage-2 centers, degrees,
    /// row-major (sa2_size x sa2_size).
    pub angles_self: Vec<f64>,
    /// Per stage-2 center, the angle between its frame and the global frame.
    pub angles_cross: Vec<f64>,
    pub label: Option<u16>,
}

/// `k` nearest positions into `points`, center first. Ties break by lower
/// position.
fn group_k_nearest(points: &[Vec3], center: Vec3, center_pos: usize, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(pos, _)| pos != center_pos)
        .map(|(pos, p)| ((*p - center).norm_sq(), pos))
        .collect();
    let take = (k - 1).min(scored.len());
    if take > 0 {
        scored.select_nth_unstable_by(take - 1, |a, b| a.partial_cmp(b).unwrap());
        scored.truncate(take);
        scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    } else {
        scored.clear();
    }
    let mut group = Vec::with_capacity(k);
    group.push(center_pos);
    group.extend(scored.iter().map(|&(_, pos)| pos));
    // Degenerate tiny inputs: pad with the center so group width is fixed.
    while group.len() < k {
        group.push(center_pos);
    }
    group
}

/// Build the full geometric context for one already-resampled cloud:
/// frames, downsampling plan, grouped descriptors, and relative angles.
pub fn build_geometry(
    pc: &PointCloud,
    config: &ModelConfig,
    strategy: DisambiguationStrategy,
    disambiguate: bool,
    seed: u64,
) -> Result<EncoderGeometry, GeometryError> {
    assert_eq!(
        pc.len(),
        config.n_points,
        "cloud must be resampled to n_points before building geometry"
    );
    let nbrs = knn(pc, config.k_lrf.min(pc.len() - 1))?;
    let mut grf_rng = seeds::stream(seed, 0x6F, 0, 0);
    let global = grf_with_options(pc, strategy, disambiguate, &mut grf_rng)?;

    let mut fps_rng = seeds::stream(seed, 0xF1, 0, 0);
    let start1 = rand::Rng::random_range(&mut fps_rng, 0..pc.len());
    let level1 = fps_indices(pc, config.sa1_size, start1)?;

    // Frames for every stage-1 center; stage-2 centers are a subset.
    let frames: Vec<Frame> = level1
        .iter()
        .map(|&i| lrf_with_options(pc, i, &nbrs, disambiguate))
        .collect::<Result<_, _>>()?;

    let level1_cloud = PointCloud {
        points: level1.iter().map(|&i| pc.points[i]).collect(),
        label: pc.label,
        seed: pc.seed,
    };
    let start2 = rand::Rng::random_range(&mut fps_rng, 0..level1_cloud.len());
    let level2 = fps_indices(&level1_cloud, config.sa2_size, start2)?;

    let k = config.k_group;
    let mut groups1 = Vec::with_capacity(level1.len() * k);
    let mut stage1_local = Vec::with_capacity(level1.len() * k * 3);
    let mut stage1_global = Vec::with_capacity(level1.len() * k * 3);
    for (c_pos, &c_idx) in level1.iter().enumerate() {
        let center = pc.points[c_idx];
        let group = group_k_nearest(&pc.points, center, c_idx, k);
        for &member in &group {
            let offset = pc.points[member] - center;
            push_vec3(&mut stage1_local, frames[c_pos].to_local(offset));
            push_vec3(&mut stage1_global, global.to_local(offset));
        }
        groups1.extend(group);
    }

    let mut groups2 = Vec::with_capacity(level2.len() * k);
    let mut stage2_local = Vec::with_capacity(level2.len() * k * 3);
    let mut stage2_global = Vec::with_capacity(level2.len() * k * 3);
    for &c_pos in &level2 {
        let center = level1_cloud.points[c_pos];
        let group = group_k_nearest(&level1_cloud.points, center, c_pos, k);
        for &member_pos in &group {
            let offset = level1_cloud.points[member_pos] - center;
            push_vec3(&mut stage2_local, frames[c_pos].to_local(offset));
            push_vec3(&mut stage2_global, global.to_local(offset));
        }
        groups2.extend(group);
    }

    let n2 = level2.len();
    let mut angles_self = vec![0.0; n2 * n2];
    let mut angles_cross = vec![0.0; n2];
    for (a, &pa) in level2.iter().enumerate() {
        angles_cross[a] = relative_angle_deg(&frames[pa], &global);
        for (b, &pb) in level2.iter().enumerate().skip(a + 1) {
            let angle = relative_angle_deg(&frames[pa], &frames[pb]);
            angles_self[a * n2 + b] = angle;
            angles_self[b * n2 + a] = angle;
        }
    }

    Ok(EncoderGeometry {
        plan: SamplingPlan {
            level1,
            level2,
            groups1,
            groups2,
        },
        stage1_local,
        stage1_global,
        stage2_local,
        stage2_global,
        angles_self,
        angles_cross,
        label: pc.label,
    })
}

fn push_vec3(buf: &mut Vec<f64>, v: Vec3) {
    buf.push(v.x);
    buf.push(v.y);
    buf.push(v.z);
}

/// Run one encoder branch: two stages of shared MLP + neighborhood max-pool
/// with FPS downsampling between them. `local` selects the descriptor set.
pub fn encode_branch(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    enc: &EncoderParams,
    config: &ModelConfig,
    geom: &EncoderGeometry,
    local: bool,
) -> Result<Tensor, AdError> {
    let k = config.k_group;
    let s1 = config.sa1_size;
    let s2 = config.sa2_size;

    let desc1 = if local {
        &geom.stage1_local
    } else {
        &geom.stage1_global
    };
    let x1 = tape.constant(desc1.clone(), [s1 * k, 3])?;
    let h1 = enc.stage1.forward(tape, binder, x1)?;
    let g1 = tape.reshape(h1, [s1, k, config.width1])?;
    let f1 = tape.max_over_axis(g1, 1)?;

    let desc2 = if local {
        &geom.stage2_local
    } else {
        &geom.stage2_global
    };
    let x2 = tape.constant(desc2.clone(), [s2 * k, 3])?;
    let gathered = tape.gather_rows(f1, &geom.plan.groups2)?;
    let joined = tape.concat(&[x2, gathered], 1)?;
    let h2 = enc.stage2.forward(tape, binder, joined)?;
    let g2 = tape.reshape(h2, [s2, k, config.width2])?;
    tape.max_over_axis(g2, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{apply_rotation, generate_shape, ShapeFamily, ShapeSpec};
    use crate::linalg3::{random_rotation, RotationMode};
    use crate::net::ModelParams;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_points: 64,
            sa1_size: 32,
            sa2_size: 12,
            width1: 16,
            width2: 24,
            k_group: 8,
            k_lrf: 10,
            attn_dim: 8,
            ait_blocks: 1,
            proj_dim: 8,
            n_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn test_cloud(seed: u64) -> PointCloud {
        let spec = ShapeSpec::new(
            ShapeFamily::Ellipsoid {
                semi_axes: [1.0, 0.62, 0.37],
            },
            64,
        );
        let pc = generate_shape(&spec, seed).unwrap();
        crate::cloud::add_noise(&pc, 0.02, 0, seed ^ 0x9)
    }

    #[test]
    fn geometry_shapes_are_consistent() {
        let config = tiny_config();
        let pc = test_cloud(1);
        let geom = build_geometry(
            &pc,
            &config,
            DisambiguationStrategy::DReverseSmallest,
            true,
            7,
        )
        .unwrap();
        assert_eq!(geom.plan.level1.len(), 32);
        assert_eq!(geom.plan.level2.len(), 12);
        assert_eq!(geom.stage1_local.len(), 32 * 8 * 3);
        assert_eq!(geom.stage2_global.len(), 12 * 8 * 3);
        assert_eq!(geom.angles_self.len(), 144);
        assert_eq!(geom.angles_cross.len(), 12);
        // Self-offsets (first group member is the center) are exactly zero.
        for c in 0..32 {
            let base = c * 8 * 3;
            assert_eq!(&geom.stage1_local[base..base + 3], &[0.0, 0.0, 0.0]);
        }
        // Angle matrix: zero diagonal, symmetric, in range.
        for a in 0..12 {
            assert_eq!(geom.angles_self[a * 12 + a], 0.0);
            for b in 0..12 {
                let v = geom.angles_self[a * 12 + b];
                assert!((0.0..=180.0).contains(&v));
                assert_eq!(v, geom.angles_self[b * 12 + a]);
            }
        }
    }

    #[test]
    fn geometry_is_deterministic_and_rotation_invariant() {
        let config = tiny_config();
        let pc = test_cloud(2);
        let a = build_geometry(&pc, &config, DisambiguationStrategy::DReverseSmallest, true, 3)
            .unwrap();
        let b = build_geometry(&pc, &config, DisambiguationStrategy::DReverseSmallest, true, 3)
            .unwrap();
        assert_eq!(a, b);

        let r = random_rotation(5, RotationMode::FullSo3);
        let rot = apply_rotation(&pc, &r).unwrap();
        let c = build_geometry(&rot, &config, DisambiguationStrategy::DReverseSmallest, true, 3)
            .unwrap();
        assert_eq!(a.plan, c.plan, "sampling plan must not depend on pose");
        let max_err = a
            .stage1_local
            .iter()
            .chain(a.stage2_local.iter())
            .chain(a.stage1_global.iter())
            .chain(a.stage2_global.iter())
            .zip(
                c.stage1_local
                    .iter()
                    .chain(c.stage2_local.iter())
                    .chain(c.stage1_global.iter())
                    .chain(c.stage2_global.iter()),
            )
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-7, "descriptor invariance residual {max_err:.3e}");
        let angle_err = a
            .angles_self
            .iter()
            .zip(c.angles_self.iter())
            .chain(a.angles_cross.iter().zip(c.angles_cross.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(angle_err < 1e-5, "angle invariance residual {angle_err:.3e}");
    }

    #[test]
    fn encoder_output_is_finite_and_deterministic() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1);
        let pc = test_cloud(3);
        let geom = build_geometry(
            &pc,
            &config,
            DisambiguationStrategy::DReverseSmallest,
            true,
            11,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let f = encode_branch(&mut tape, &mut binder, &params.encoder_local, &config, &geom, true)
            .unwrap();
        assert_eq!(tape.shape(f).dims(), &[12, 24]);
        assert!(tape.value(f).iter().all(|v| v.is_finite()));

        let mut tape2 = Tape::new();
        let mut binder2 = ParamBinder::new(false);
        let f2 = encode_branch(
            &mut tape2,
            &mut binder2,
            &params.encoder_local,
            &config,
            &geom,
            true,
        )
        .unwrap();
        assert_eq!(tape.value(f), tape2.value(f2));
    }

    #[test]
    fn neighbor_order_within_group_does_not_change_output() {
        // Max-pool symmetry: permuting a group's neighbor rows leaves the
        // pooled feature unchanged.
        let config = tiny_config();
        let params = ModelParams::init(&config, 2);
        let pc = test_cloud(4);
        let mut geom = build_geometry(
            &pc,
            &config,
            DisambiguationStrategy::DReverseSmallest,
            true,
            13,
        )
        .unwrap();

        let run = |geom: &EncoderGeometry| {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(false);
            let f = encode_branch(
                &mut tape,
                &mut binder,
                &params.encoder_local,
                &config,
                &geom,
                true,
            )
            .unwrap();
            tape.value(f).to_vec()
        };
        let base = run(&geom);

        // Reverse the neighbor rows of group 5 in stage 1 (descriptors and
        // indices together).
        let k = config.k_group;
        let g = 5;
        geom.plan.groups1[g * k..(g + 1) * k].reverse();
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|j| geom.stage1_local[(g * k + j) * 3..(g * k + j + 1) * 3].to_vec())
            .collect();
        for (j, row) in rows.iter().rev().enumerate() {
            geom.stage1_local[(g * k + j) * 3..(g * k + j + 1) * 3].copy_from_slice(row);
        }
        let permuted = run(&geom);
        assert_eq!(base, permuted);
    }
}
