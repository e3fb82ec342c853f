//! Dataset generation and the per-sample geometry pipeline shared by
//! training and evaluation.

use std::path::{Path, PathBuf};

use rand::Rng;

use super::config::{Protocol, Sampling, TrainConfig};
use super::HarnessError;
use crate::cloud::{
    self, generate_shape, read_cloud, write_cloud, write_manifest, ManifestEntry, PointCloud,
    ShapeFamily, ShapeSpec,
};
use crate::linalg3::random_rotation_with;
use crate::net::{build_geometry, EncoderGeometry};
use crate::seeds;

const TAG_SHAPE: u64 = 0xDA7A;
const TAG_ROT: u64 = 0x407;
const TAG_AUG: u64 = 0xA06;
const TAG_NOISE: u64 = 0x4015;
const TAG_SAMPLE: u64 = 0x5A4;
const TAG_GEOM: u64 = 0x6E0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn manifest_path(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(format!("manifest_{}.jsonl", split.name()))
}

/// Generate the synthetic dataset: `classes x per-class` clouds per split,
/// binary cloud files plus one JSONL manifest per split. Deterministic per
/// seed, including the size jitter that creates intra-class variety.
pub fn generate_dataset(config: &TrainConfig) -> Result<(usize, usize), HarnessError> {
    let root = Path::new(&config.data_dir);
    std::fs::create_dir_all(root.join("clouds"))?;
    let mut counts = (0, 0);
    for split in [Split::Train, Split::Test] {
        let per_class = match split {
            Split::Train => config.train_per_class,
            Split::Test => config.test_per_class,
        };
        let mut entries = Vec::with_capacity(config.classes * per_class);
        for class in 0..config.classes {
            for idx in 0..per_class {
                let seed = seed_for(config.seed, TAG_SHAPE ^ split.tag(), class as u64, idx as u64);
                let mut rng = seeds::rng_from(seed);
                // Mild per-sample parameter jitter keeps classes varied
                // without overlapping families.
                let spread = (rng.random::<f64>() - 0.5) * 0.3;
                let family = ShapeFamily::default_for_index(class, spread);
                let pc = generate_shape(&ShapeSpec::new(family, config.raw_points), seed)?;
                let rel = format!("clouds/{}_{class}_{idx}.ripc", split.name());
                write_cloud(&pc, &root.join(&rel))?;
                entries.push(ManifestEntry {
                    path: rel,
                    label: class as u16,
                    seed,
                });
            }
        }
        write_manifest(&entries, &manifest_path(root, split))?;
        match split {
            Split::Train => counts.0 = entries.len(),
            Split::Test => counts.1 = entries.len(),
        }
    }
    Ok(counts)
}

pub fn load_manifest(config: &TrainConfig, split: Split) -> Result<Vec<ManifestEntry>, HarnessError> {
    let path = manifest_path(Path::new(&config.data_dir), split);
    if !path.exists() {
        return Err(HarnessError::DatasetMissing(path.display().to_string()));
    }
    Ok(cloud::read_manifest(&path)?)
}

fn seed_for(root: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut rng = seeds::stream(root, tag, a, b);
    rng.random::<u64>()
}

/// How a sample is perturbed before geometry extraction.
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub split: Split,
    pub epoch: usize,
    pub rotation: Option<crate::linalg3::RotationMode>,
    pub augment: bool,
    pub noise_sigma: f64,
    pub noise_outliers: usize,
}

impl PipelineOptions {
    pub fn train(config: &TrainConfig, epoch: usize) -> Self {
        Self {
            split: Split::Train,
            epoch,
            rotation: Some(config.protocol.train_mode()),
            augment: config.augment,
            noise_sigma: config.noise_sigma,
            noise_outliers: config.noise_outliers,
        }
    }

    pub fn eval(protocol: Protocol) -> Self {
        Self {
            split: Split::Test,
            epoch: 0,
            rotation: Some(protocol.eval_mode()),
            augment: false,
            noise_sigma: 0.0,
            noise_outliers: 0,
        }
    }
}

/// Run one manifest entry through rotation, augmentation, noise,
/// resampling, and geometry extraction.
///
/// Sampling and geometry seeds depend on (config seed, split, sample, epoch)
/// but never on the pose, so a rotated copy of a cloud follows the identical
/// sampling plan.
pub fn build_sample(
    config: &TrainConfig,
    data_dir: &Path,
    entry: &ManifestEntry,
    sample_idx: usize,
    opts: &PipelineOptions,
) -> Result<EncoderGeometry, HarnessError> {
    let pc = read_cloud(&data_dir.join(&entry.path))?;
    let pc = PointCloud {
        label: Some(entry.label),
        ..pc
    };
    build_sample_from_cloud(config, &pc, sample_idx, opts)
}

pub fn build_sample_from_cloud(
    config: &TrainConfig,
    pc: &PointCloud,
    sample_idx: usize,
    opts: &PipelineOptions,
) -> Result<EncoderGeometry, HarnessError> {
    let split = opts.split.tag();
    let sid = sample_idx as u64;
    let epoch = opts.epoch as u64;

    let mut pc = pc.clone();
    if let Some(mode) = opts.rotation {
        let mut rng = seeds::stream(config.seed, TAG_ROT ^ split, sid, epoch);
        let r = random_rotation_with(&mut rng, mode);
        pc = cloud::apply_rotation(&pc, &r)?;
    }
    if opts.augment {
        let aug_seed = seed_for(config.seed, TAG_AUG ^ split, sid, epoch);
        pc = cloud::augment(
            &pc,
            aug_seed,
            config.translate_range,
            (config.scale_low, config.scale_high),
        );
    }
    if opts.noise_sigma > 0.0 || opts.noise_outliers > 0 {
        let noise_seed = seed_for(config.seed, TAG_NOISE ^ split, sid, epoch);
        pc = cloud::add_noise(&pc, opts.noise_sigma, opts.noise_outliers, noise_seed);
    }

    let sample_seed = seed_for(config.seed, TAG_SAMPLE ^ split, sid, epoch);
    let resampled = match config.sampling {
        Sampling::Fps => cloud::farthest_point_sample(&pc, config.n_points, sample_seed)?,
        Sampling::Rs => cloud::random_sample(&pc, config.n_points, sample_seed)?,
    };

    let geom_seed = seed_for(config.seed, TAG_GEOM ^ split, sid, epoch);
    Ok(build_geometry(
        &resampled,
        &config.model_config(),
        config.disambiguation,
        config.disambiguate,
        geom_seed,
    )?)
}
