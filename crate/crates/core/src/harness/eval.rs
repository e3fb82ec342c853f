//! Checkpoint evaluation under the rotation protocols, with optional noise
//! and outlier sweeps emitted as CSV curves.

use std::path::Path;

use serde_json::json;

use super::config::{Protocol, TrainConfig};
use super::data::{self, PipelineOptions, Split};
use super::report::{write_csv, Report};
use super::train::{argmax, logits_for_geometry};
use super::HarnessError;
use crate::net::load_checkpoint;

pub struct EvalOutcome {
    pub report: Report,
    pub accuracy: f64,
}

pub struct SweepSpec {
    pub sigmas: Vec<f64>,
    pub outliers: Vec<usize>,
}

pub fn run_eval(
    config: &TrainConfig,
    checkpoint: &Path,
    protocol: Protocol,
    sweeps: &SweepSpec,
) -> Result<EvalOutcome, HarnessError> {
    let (model_config, params, ckpt_hash) = load_checkpoint(checkpoint)?;
    // The data pipeline must feed the architecture the checkpoint was
    // trained with.
    let mut config = config.clone();
    config.n_points = model_config.n_points;
    config.sa1_size = model_config.sa1_size;
    config.sa2_size = model_config.sa2_size;
    config.width1 = model_config.width1;
    config.width2 = model_config.width2;
    config.k_group = model_config.k_group;
    config.k_lrf = model_config.k_lrf;
    config.attn_dim = model_config.attn_dim;
    config.ait_blocks = model_config.ait_blocks;
    config.validate()?;

    let data_dir = Path::new(&config.data_dir).to_path_buf();
    let entries = data::load_manifest(&config, Split::Test)?;
    if entries.iter().any(|e| e.label as usize >= model_config.n_classes) {
        return Err(HarnessError::CheckpointMismatch(format!(
            "dataset has labels outside the checkpoint's {} classes",
            model_config.n_classes
        )));
    }

    let accuracy = accuracy_with(&config, &data_dir, &entries, &params, &model_config, protocol, 0.0, 0)?;

    std::fs::create_dir_all(&config.out_dir)?;
    let mut sigma_rows = Vec::new();
    for &sigma in &sweeps.sigmas {
        let acc = accuracy_with(
            &config,
            &data_dir,
            &entries,
            &params,
            &model_config,
            protocol,
            sigma,
            0,
        )?;
        sigma_rows.push(vec![sigma, acc]);
    }
    if !sigma_rows.is_empty() {
        write_csv(
            &Path::new(&config.out_dir).join("sweep_sigma.csv"),
            &["sigma", "accuracy"],
            &sigma_rows,
        )?;
    }
    let mut outlier_rows = Vec::new();
    for &n_out in &sweeps.outliers {
        let acc = accuracy_with(
            &config,
            &data_dir,
            &entries,
            &params,
            &model_config,
            protocol,
            0.0,
            n_out,
        )?;
        outlier_rows.push(vec![n_out as f64, acc]);
    }
    if !outlier_rows.is_empty() {
        write_csv(
            &Path::new(&config.out_dir).join("sweep_outliers.csv"),
            &["outliers", "accuracy"],
            &outlier_rows,
        )?;
    }

    let payload = json!({
        "protocol": protocol.name(),
        "checkpoint": checkpoint.display().to_string(),
        "checkpoint_config_hash": ckpt_hash,
        "test_samples": entries.len(),
        "accuracy": accuracy,
        "sigma_sweep": sigma_rows,
        "outlier_sweep": outlier_rows,
    });
    let report = Report::new("eval", config.config_hash(), config.resolved(), payload);
    Ok(EvalOutcome { report, accuracy })
}

#[allow(clippy::too_many_arguments)]
fn accuracy_with(
    config: &TrainConfig,
    data_dir: &Path,
    entries: &[crate::cloud::ManifestEntry],
    params: &crate::net::ModelParams,
    model_config: &crate::net::ModelConfig,
    protocol: Protocol,
    noise_sigma: f64,
    noise_outliers: usize,
) -> Result<f64, HarnessError> {
    let opts = PipelineOptions {
        noise_sigma,
        noise_outliers,
        ..PipelineOptions::eval(protocol)
    };
    let mut correct = 0usize;
    for (idx, entry) in entries.iter().enumerate() {
        let geom = data::build_sample(config, data_dir, entry, idx, &opts)?;
        let logits = logits_for_geometry(params, model_config, &geom)?;
        if argmax(&logits) == entry.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / entries.len() as f64)
}
