//! Rotation-invariant low-level inputs: per-point neighbor offsets expressed
//! in local reference frames, and globally canonicalized coordinates.
//!
//! Everything here is computed in f64; values are narrowed to f32 only at
//! the descriptor file boundary.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::cloud::{knn, CloudError, NeighborIndex, PointCloud};
use crate::frames::{grf_with_options, lrf_with_options, DisambiguationStrategy, Frame, FrameError};
use crate::Vec3;

const MAGIC: &[u8; 4] = b"RIDS";
const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected RIDS)")]
    MagicMismatch,
    #[error("unsupported descriptor file version {0}")]
    BadVersion(u8),
    #[error("file truncated: {0}")]
    Truncated(String),
}

/// Per-point local descriptors (k x 3 each), canonicalized global
/// coordinates, and the frames that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub k: usize,
    /// `local[i][j]` is the offset to the j-th nearest neighbor of point i,
    /// expressed in point i's local frame.
    pub local: Vec<Vec<Vec3>>,
    /// `global[i]` is point i relative to the barycenter, expressed in the
    /// global frame.
    pub global: Vec<Vec3>,
    pub frames: Vec<Frame>,
    pub global_frame: Frame,
}

/// Neighbor offsets in each point's local frame: `(p_j - p_i)^T M_i`.
pub fn local_descriptors(
    pc: &PointCloud,
    nbrs: &NeighborIndex,
    frames: &[Frame],
) -> Vec<Vec<Vec3>> {
    (0..pc.len())
        .map(|i| {
            let f = &frames[i];
            nbrs.neighbors[i]
                .iter()
                .map(|&j| f.to_local(pc.points[j] - pc.points[i]))
                .collect()
        })
        .collect()
}

/// Canonicalized coordinates `(p_i - p_m)^T M^g`. Centering on the
/// barycenter (the frame origin) makes the result translation-invariant as
/// well.
pub fn global_descriptors(pc: &PointCloud, g: &Frame) -> Vec<Vec3> {
    pc.points.iter().map(|&p| g.to_local(p - g.origin)).collect()
}

/// Full descriptor extraction: exact kNN, per-point LRFs, global frame, and
/// both descriptor blocks.
pub fn extract(
    pc: &PointCloud,
    k: usize,
    strategy: DisambiguationStrategy,
    disambiguate: bool,
    rng: &mut impl Rng,
) -> Result<DescriptorSet, DescriptorError> {
    let nbrs = knn(pc, k)?;
    extract_with_neighbors(pc, &nbrs, strategy, disambiguate, rng)
}

pub fn extract_with_neighbors(
    pc: &PointCloud,
    nbrs: &NeighborIndex,
    strategy: DisambiguationStrategy,
    disambiguate: bool,
    rng: &mut impl Rng,
) -> Result<DescriptorSet, DescriptorError> {
    let frames: Result<Vec<Frame>, FrameError> = (0..pc.len())
        .map(|i| lrf_with_options(pc, i, nbrs, disambiguate))
        .collect();
    let frames = frames?;
    let global_frame = grf_with_options(pc, strategy, disambiguate, rng)?;
    Ok(DescriptorSet {
        k: nbrs.k,
        local: local_descriptors(pc, nbrs, &frames),
        global: global_descriptors(pc, &global_frame),
        frames,
        global_frame,
    })
}

/// Write the descriptor blocks: magic `RIDS`, version byte, u64 LE point
/// count, u32 LE k, local block (N*k*3 f32 LE), global block (N*3 f32 LE).
pub fn write_descriptors(ds: &DescriptorSet, path: &Path) -> Result<(), DescriptorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(ds.local.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.k as u32).to_le_bytes())?;
    for row in &ds.local {
        for v in row {
            write_vec3_f32(&mut w, *v)?;
        }
    }
    for v in &ds.global {
        write_vec3_f32(&mut w, *v)?;
    }
    w.flush()?;
    Ok(())
}

fn write_vec3_f32<W: Write>(w: &mut W, v: Vec3) -> std::io::Result<()> {
    w.write_all(&(v.x as f32).to_le_bytes())?;
    w.write_all(&(v.y as f32).to_le_bytes())?;
    w.write_all(&(v.z as f32).to_le_bytes())
}

/// Read back the two descriptor blocks (frames are not stored).
pub fn read_descriptor_blocks(path: &Path) -> Result<(Vec<Vec<Vec3>>, Vec<Vec3>), DescriptorError> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 17];
    file.read_exact(&mut head)
        .map_err(|_| DescriptorError::Truncated("header".into()))?;
    if &head[0..4] != MAGIC {
        return Err(DescriptorError::MagicMismatch);
    }
    if head[4] != VERSION {
        return Err(DescriptorError::BadVersion(head[4]));
    }
    let n = u64::from_le_bytes(head[5..13].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(head[13..17].try_into().unwrap()) as usize;
    let mut body = vec![0u8; (n * k * 3 + n * 3) * 4];
    file.read_exact(&mut body)
        .map_err(|_| DescriptorError::Truncated("descriptor blocks".into()))?;
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut next_vec3 = || {
        let x = floats.next().unwrap();
        let y = floats.next().unwrap();
        let z = floats.next().unwrap();
        Vec3::new(x, y, z)
    };
    let local = (0..n)
        .map(|_| (0..k).map(|_| next_vec3()).collect())
        .collect();
    let global = (0..n).map(|_| next_vec3()).collect();
    Ok((local, global))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::apply_rotation;
    use crate::linalg3::{random_rotation, RotationMode};
    use crate::seeds;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seeds::rng_from(seed);
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

    fn extract_default(pc: &PointCloud, k: usize) -> DescriptorSet {
        let mut rng = seeds::rng_from(0);
        extract(pc, k, DisambiguationStrategy::DReverseSmallest, true, &mut rng).unwrap()
    }

    #[test]
    fn descriptor_of_frame_axes_is_canonical() {
        let pc = random_cloud(40, 1);
        let nbrs = knn(&pc, 12).unwrap();
        let f = crate::frames::lrf(&pc, 5, &nbrs).unwrap();
        // A neighbor displaced exactly along the frame's x axis reads (1,0,0).
        let d = f.to_local(f.basis.col(0));
        assert!((d - Vec3::X).norm() < 1e-12, "{d:?}");
        // Self-descriptor is exactly zero.
        assert_eq!(f.to_local(Vec3::ZERO), Vec3::ZERO);
    }

    #[test]
    fn descriptors_are_isometric() {
        let pc = random_cloud(60, 2);
        let ds = extract_default(&pc, 10);
        let nbrs = knn(&pc, 10).unwrap();
        for i in 0..pc.len() {
            for (slot, &j) in nbrs.neighbors[i].iter().enumerate() {
                let want = (pc.points[j] - pc.points[i]).norm();
                let got = ds.local[i][slot].norm();
                assert!((want - got).abs() < 1e-9);
            }
        }
        // Global canonicalization preserves pairwise distances.
        for i in (0..pc.len()).step_by(7) {
            for j in (0..pc.len()).step_by(11) {
                let want = (pc.points[i] - pc.points[j]).norm();
                let got = (ds.global[i] - ds.global[j]).norm();
                assert!((want - got).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_frame_returns_raw_coordinates() {
        let pc = random_cloud(20, 3);
        let g = global_descriptors(&pc, &Frame::IDENTITY);
        for (a, b) in g.iter().zip(pc.points.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn barycenter_maps_to_origin() {
        let pc = random_cloud(50, 4);
        let mut rng = seeds::rng_from(1);
        let g = crate::frames::grf(&pc, DisambiguationStrategy::DReverseSmallest, &mut rng)
            .unwrap();
        let desc = global_descriptors(&pc, &g);
        let mean = desc.iter().fold(Vec3::ZERO, |a, &b| a + b) / pc.len() as f64;
        assert!(mean.norm() < 1e-12);
    }

    #[test]
    fn descriptors_invariant_under_rotation() {
        let pc = random_cloud(96, 5);
        let base = extract_default(&pc, 12);
        let mut worst = 0.0f64;
        for seed in 0..15u64 {
            let r = random_rotation(seed, RotationMode::FullSo3);
            let rot = apply_rotation(&pc, &r).unwrap();
            let ds = extract_default(&rot, 12);
            for (a, b) in base.local.iter().flatten().zip(ds.local.iter().flatten()) {
                worst = worst.max((*a - *b).norm());
            }
            for (a, b) in base.global.iter().zip(ds.global.iter()) {
                worst = worst.max((*a - *b).norm());
            }
        }
        assert!(worst < 1e-7, "max invariance residual {worst:.3e}");
    }

    #[test]
    fn extraction_is_deterministic() {
        let pc = random_cloud(64, 6);
        let a = extract_default(&pc, 8);
        let b = extract_default(&pc, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn rids_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rids");
        let pc = random_cloud(32, 7);
        let ds = extract_default(&pc, 6);
        write_descriptors(&ds, &path).unwrap();
        let (local, global) = read_descriptor_blocks(&path).unwrap();
        assert_eq!(local.len(), 32);
        assert_eq!(local[0].len(), 6);
        for (a, b) in ds.local.iter().flatten().zip(local.iter().flatten()) {
            assert!((*a - *b).norm() < 1e-6);
        }
        for (a, b) in ds.global.iter().zip(global.iter()) {
            assert!((*a - *b).norm() < 1e-6);
        }
        // Re-encoding the f32-quantized values is bit-stable.
        let mut ds2 = ds.clone();
        ds2.local = local;
        ds2.global = global;
        let path2 = dir.path().join("d2.rids");
        write_descriptors(&ds2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rids_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rids");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_descriptor_blocks(&path),
            Err(DescriptorError::Truncated(_)) | Err(DescriptorError::MagicMismatch)
        ));
        let pc = random_cloud(16, 8);
        let ds = extract_default(&pc, 4);
        write_descriptors(&ds, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            read_descriptor_blocks(&path),
            Err(DescriptorError::Truncated(_))
        ));
    }
}
