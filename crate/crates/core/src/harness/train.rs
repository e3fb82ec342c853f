//! Training loop: batched forward/backward on a shared tape (the
//! registration loss couples batch samples), SGD with cosine annealing, and
//! best-checkpoint tracking. Single-threaded for bitwise determinism.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde_json::json;

use super::config::TrainConfig;
use super::data::{self, PipelineOptions, Split};
use super::report::Report;
use super::HarnessError;
use crate::autodiff::Tape;
use crate::cloud::ManifestEntry;
use crate::net::{
    self, forward_sample, registration_loss, save_checkpoint, ModelParams, ParamBinder, Sgd,
};
use crate::seeds;

pub struct TrainOutcome {
    pub report: Report,
    pub best_accuracy: f64,
    pub checkpoint_path: String,
    pub epochs_run: usize,
}

struct EpochLog {
    ce: f64,
    reg_local: f64,
    reg_global: f64,
    test_accuracy: f64,
    lr: f64,
}

pub fn run_training(config: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let data_dir = Path::new(&config.data_dir).to_path_buf();
    let train_entries = data::load_manifest(config, Split::Train)?;
    let test_entries = data::load_manifest(config, Split::Test)?;
    let model_config = config.model_config();
    let mut params = ModelParams::init(&model_config, config.seed);
    let mut sgd = Sgd::new(config.lr, config.momentum, config.weight_decay);

    std::fs::create_dir_all(&config.out_dir)?;
    let checkpoint_path = Path::new(&config.out_dir).join("best.rimw");

    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best_accuracy = -1.0f64;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let lr_now = sgd.epoch_lr(epoch, config.epochs);
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        let mut shuffle_rng = seeds::stream(config.seed, 0x500F, epoch as u64, 0);
        order.shuffle(&mut shuffle_rng);

        let opts = PipelineOptions::train(config, epoch);
        let mut ce_sum = 0.0;
        let mut reg_l_sum = 0.0;
        let mut reg_g_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_train) {
            let (ce, reg_l, reg_g) = train_step(
                config,
                &data_dir,
                &train_entries,
                batch,
                &opts,
                &mut params,
                &mut sgd,
                lr_now,
                epoch,
            )?;
            ce_sum += ce;
            reg_l_sum += reg_l;
            reg_g_sum += reg_g;
            batches += 1;
        }

        let test_accuracy = evaluate_split(
            config,
            &data_dir,
            &test_entries,
            &params,
            &PipelineOptions::eval(config.protocol),
        )?;
        epochs_run = epoch + 1;
        logs.push(EpochLog {
            ce: ce_sum / batches as f64,
            reg_local: reg_l_sum / batches as f64,
            reg_global: reg_g_sum / batches as f64,
            test_accuracy,
            lr: lr_now,
        });
        if test_accuracy > best_accuracy {
            best_accuracy = test_accuracy;
            save_checkpoint(
                &checkpoint_path,
                &model_config,
                &params,
                &config.config_hash(),
            )?;
        }
        if config.target_acc > 0.0 && best_accuracy >= config.target_acc {
            break;
        }
    }

    let wall_seconds = started.elapsed().as_secs_f64();
    let payload = json!({
        "protocol": config.protocol.name(),
        "epochs_requested": config.epochs,
        "epochs_run": epochs_run,
        "train_samples": train_entries.len(),
        "test_samples": test_entries.len(),
        "best_test_accuracy": best_accuracy,
        "checkpoint": checkpoint_path.display().to_string(),
        "wall_seconds": wall_seconds,
        "param_count": params.param_count(),
        "epochs": logs.iter().enumerate().map(|(i, l)| json!({
            "epoch": i,
            "lr": l.lr,
            "ce": l.ce,
            "reg_local": l.reg_local,
            "reg_global": l.reg_global,
            "test_accuracy": l.test_accuracy,
        })).collect::<Vec<_>>(),
    });
    let report = Report::new(
        "train",
        config.config_hash(),
        config.resolved(),
        payload,
    );
    Ok(TrainOutcome {
        report,
        best_accuracy,
        checkpoint_path: checkpoint_path.display().to_string(),
        epochs_run,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &TrainConfig,
    data_dir: &Path,
    entries: &[ManifestEntry],
    batch: &[usize],
    opts: &PipelineOptions,
    params: &mut ModelParams,
    sgd: &mut Sgd,
    lr_now: f64,
    epoch: usize,
) -> Result<(f64, f64, f64), HarnessError> {
    let model_config = config.model_config();
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(true);
    let mut logit_rows = Vec::with_capacity(batch.len());
    let mut u_rows = Vec::with_capacity(batch.len());
    let mut fl_rows = Vec::with_capacity(batch.len());
    let mut fg_rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &idx in batch {
        let geom = data::build_sample(config, data_dir, &entries[idx], idx, opts)?;
        let fwd = forward_sample(&mut tape, &mut binder, params, &model_config, &geom)?;
        logit_rows.push(fwd.logits);
        u_rows.push(fwd.integrated);
        fl_rows.push(fwd.f_local);
        fg_rows.push(fwd.f_global);
        labels.push(entries[idx].label as usize);
    }

    let logits = tape.concat(&logit_rows, 0)?;
    let ce = tape.cross_entropy_logits(logits, &labels)?;
    let u_all = tape.concat(&u_rows, 0)?;
    let fl_all = tape.concat(&fl_rows, 0)?;
    let fg_all = tape.concat(&fg_rows, 0)?;
    let (reg_total, reg_l, reg_g) = registration_loss(
        &mut tape,
        &mut binder,
        u_all,
        fl_all,
        fg_all,
        &params.registration,
        config.reg_local,
        config.reg_global,
    )?;
    let reg_scaled = tape.scalar_mul(reg_total, config.lambda_reg)?;
    let loss = tape.add(ce, reg_scaled)?;

    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(HarnessError::NonFiniteLoss {
            epoch,
            value: loss_value,
        });
    }
    let ce_value = tape.value(ce)[0];
    let reg_l_value = reg_l.map(|t| tape.value(t)[0]).unwrap_or(0.0);
    let reg_g_value = reg_g.map(|t| tape.value(t)[0]).unwrap_or(0.0);

    tape.backward(loss)?;
    let grads = binder.grads_in_visit_order(&tape, params);
    sgd.step(params, &grads, lr_now);
    Ok((ce_value, reg_l_value, reg_g_value))
}

/// Accuracy of `params` on a manifest split under the given pipeline.
pub fn evaluate_split(
    config: &TrainConfig,
    data_dir: &Path,
    entries: &[ManifestEntry],
    params: &ModelParams,
    opts: &PipelineOptions,
) -> Result<f64, HarnessError> {
    let model_config = config.model_config();
    let mut correct = 0usize;
    for (idx, entry) in entries.iter().enumerate() {
        let geom = data::build_sample(config, data_dir, entry, idx, opts)?;
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let fwd = forward_sample(&mut tape, &mut binder, params, &model_config, &geom)?;
        let pred = argmax(tape.value(fwd.logits));
        if pred == entry.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / entries.len() as f64)
}

/// Class prediction probabilities are not needed; the raw argmax is enough.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One forward pass returning logits only; shared by eval paths.
pub fn logits_for_geometry(
    params: &ModelParams,
    model_config: &net::ModelConfig,
    geom: &net::EncoderGeometry,
) -> Result<Vec<f64>, HarnessError> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(false);
    let fwd = forward_sample(&mut tape, &mut binder, params, model_config, geom)?;
    Ok(tape.value(fwd.logits).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_training_config(dir: &Path) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.data_dir = dir.join("data").display().to_string();
        c.out_dir = dir.join("out").display().to_string();
        c.classes = 3;
        c.train_per_class = 4;
        c.test_per_class = 2;
        c.raw_points = 128;
        c.n_points = 64;
        c.sa1_size = 32;
        c.sa2_size = 12;
        c.k_lrf = 10;
        c.k_group = 8;
        c.width1 = 12;
        c.width2 = 16;
        c.attn_dim = 6;
        c.ait_blocks = 1;
        c.proj_dim = 8;
        c.batch_train = 4;
        c.batch_eval = 4;
        c.epochs = 3;
        c.lr = 0.02;
        c.validate().unwrap();
        c
    }

    #[test]
    fn loss_decreases_and_training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_training_config(dir.path());
        data::generate_dataset(&config).unwrap();
        let out = run_training(&config).unwrap();
        let epochs = out.report.payload["epochs"].as_array().unwrap().len();
        assert_eq!(epochs, 3);
        let first_ce = out.report.payload["epochs"][0]["ce"].as_f64().unwrap();
        let last_ce = out.report.payload["epochs"][2]["ce"].as_f64().unwrap();
        assert!(
            last_ce < first_ce,
            "cross entropy should drop: {first_ce} -> {last_ce}"
        );
        assert!(Path::new(&out.checkpoint_path).exists());

        // Bitwise deterministic re-run.
        let out2 = run_training(&config).unwrap();
        assert_eq!(out.best_accuracy, out2.best_accuracy);
        assert_eq!(
            out.report.payload["epochs"],
            out2.report.payload["epochs"]
        );
    }

    #[test]
    fn missing_dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_training_config(dir.path());
        assert!(matches!(
            run_training(&config),
            Err(HarnessError::DatasetMissing(_))
        ));
    }
}
