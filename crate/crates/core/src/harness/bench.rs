//! Kernel timing: LRF and GRF construction, FPS, exact kNN, and one aligned
//! attention forward, per cloud size. Each kernel repeats until it
//! accumulates enough wall time for a stable estimate.

use std::time::Instant;

use serde_json::json;

use super::config::TrainConfig;
use super::report::Report;
use crate::autodiff::Tape;
use crate::cloud::{self, generate_shape, knn, PointCloud, ShapeFamily, ShapeSpec};
use crate::frames::{self, DisambiguationStrategy};
use crate::net::{self, ParamBinder};
use crate::seeds;

#[derive(Debug, Clone)]
pub struct KernelTiming {
    pub kernel: String,
    pub n: usize,
    pub millis: f64,
    pub instances_per_sec: f64,
}

fn bench_cloud(n: usize, seed: u64) -> PointCloud {
    let spec = ShapeSpec::new(
        ShapeFamily::Ellipsoid {
            semi_axes: [1.0, 0.6, 0.35],
        },
        n,
    );
    let pc = generate_shape(&spec, seed).unwrap();
    cloud::add_noise(&pc, 0.01, 0, seed)
}

/// Median-of-reps timing: repeats until at least `min_reps` and ~80ms of
/// accumulated work, then reports the median rep time in milliseconds.
fn time_kernel(mut f: impl FnMut(), min_reps: usize) -> f64 {
    let mut times = Vec::new();
    let budget = std::time::Duration::from_millis(80);
    let start = Instant::now();
    while times.len() < min_reps || (start.elapsed() < budget && times.len() < 200) {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

pub fn run_bench(seed: u64) -> (Vec<KernelTiming>, Report) {
    let k = 32;
    let mut rows = Vec::new();
    for &n in &[512usize, 1024, 2048] {
        let pc = bench_cloud(n, seed);
        let nbrs = knn(&pc, k).unwrap();

        let knn_ms = time_kernel(
            || {
                let _ = knn(&pc, k).unwrap();
            },
            3,
        );
        rows.push(timing("knn", n, knn_ms));

        let lrf_ms = time_kernel(
            || {
                for i in 0..pc.len() {
                    let _ = frames::lrf(&pc, i, &nbrs).unwrap();
                }
            },
            3,
        );
        rows.push(timing("lrf_construction", n, lrf_ms));

        let grf_ms = time_kernel(
            || {
                let mut rng = seeds::rng_from(seed);
                let _ = frames::grf(&pc, DisambiguationStrategy::DReverseSmallest, &mut rng)
                    .unwrap();
            },
            3,
        );
        rows.push(timing("grf_construction", n, grf_ms));

        let fps_ms = time_kernel(
            || {
                let _ = cloud::farthest_point_sample(&pc, n / 2, seed).unwrap();
            },
            3,
        );
        rows.push(timing("fps", n, fps_ms));

        // One aligned-attention forward at the resolution the pipeline
        // reaches from an n-point cloud (n/8 tokens).
        let tokens = n / 8;
        let (c, d) = (256usize, 64usize);
        let mut rng = seeds::stream(seed, 0xB37C4, n as u64, 0);
        let proj = net::AttnProj::init(c, d, &mut rng);
        let phi = net::Mlp::init(&[c, c, c], false, &mut rng);
        let f_data: Vec<f64> = (0..tokens * c)
            .map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0)
            .collect();
        let angles: Vec<f64> = (0..tokens * tokens)
            .map(|_| rand::Rng::random::<f64>(&mut rng) * 180.0)
            .collect();
        let emb = net::angular_embedding(&angles, d, 15.0);
        let ait_ms = time_kernel(
            || {
                let mut tape = Tape::new();
                let mut binder = ParamBinder::new(false);
                let f = tape.leaf(f_data.clone(), [tokens, c], false).unwrap();
                let e = tape.constant(emb.clone(), [tokens * tokens, d]).unwrap();
                let _ = net::ias(
                    &mut tape,
                    &mut binder,
                    f,
                    Some(e),
                    &proj,
                    &phi,
                    net::OffsetNorm::Pct,
                )
                .unwrap();
            },
            3,
        );
        rows.push(timing("ait_forward", n, ait_ms));
    }

    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let payload = json!({
        "k": k,
        "kernels": rows.iter().map(|r| json!({
            "kernel": r.kernel,
            "n": r.n,
            "millis": r.millis,
            "instances_per_sec": r.instances_per_sec,
        })).collect::<Vec<_>>(),
    });
    let report = Report::new("bench", config.config_hash(), config.resolved(), payload);
    (rows, report)
}

fn timing(kernel: &str, n: usize, millis: f64) -> KernelTiming {
    KernelTiming {
        kernel: kernel.into(),
        n,
        millis,
        instances_per_sec: 1e3 / millis.max(1e-9),
    }
}
