//! Correspondence map and the cross-scale registration loss: InfoNCE over
//! projected features whose positive pairs are the same point seen in the
//! integrated feature and in one of the shape codes.

use super::{Mlp, ModelConfig, ParamBinder};
use crate::autodiff::{AdError, Tape, Tensor};

/// Projection MLPs into the shared registration space and the softmax
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationParams {
    pub phi1: Mlp,
    pub phi2: Mlp,
    pub temperature: f64,
}

impl RegistrationParams {
    pub fn init(config: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let c = config.width2;
        let p = config.proj_dim;
        Self {
            phi1: Mlp::init(&[c, p, p], false, rng),
            phi2: Mlp::init(&[c, p, p], false, rng),
            temperature: config.temperature,
        }
    }
}

/// Row-stochastic correspondence map between feature sets: row i holds the
/// softmax over x_j of `exp(phi1(y_i) . phi2(x_j) / t)`.
pub fn correspondence_map(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    x: Tensor,
    y: Tensor,
    params: &RegistrationParams,
) -> Result<Tensor, AdError> {
    let px = params.phi2.forward(tape, binder, x)?;
    let py = params.phi1.forward(tape, binder, y)?;
    let pxt = tape.transpose(px)?;
    let sim = tape.matmul(py, pxt)?;
    let scaled = tape.scalar_mul(sim, 1.0 / params.temperature)?;
    tape.row_softmax(scaled)
}

/// InfoNCE for one branch: rows of `f_all` against all rows of `u_all`, the
/// positive being the same batch-point index. Returns the mean over the
/// batch-size-times-points positive pairs.
pub fn registration_loss_single(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    u_all: Tensor,
    f_all: Tensor,
    params: &RegistrationParams,
) -> Result<Tensor, AdError> {
    let n = tape.shape(u_all).dims()[0];
    let pu = params.phi1.forward(tape, binder, u_all)?;
    let pf = params.phi2.forward(tape, binder, f_all)?;
    let put = tape.transpose(pu)?;
    let sim = tape.matmul(pf, put)?;
    let scaled = tape.scalar_mul(sim, 1.0 / params.temperature)?;
    let diagonal: Vec<usize> = (0..n).collect();
    tape.cross_entropy_logits(scaled, &diagonal)
}

/// Combined registration loss `L_r = L_r_local + L_r_global`, with either
/// branch optional for ablations. Returns (total, local, global).
pub fn registration_loss(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    u_all: Tensor,
    f_local_all: Tensor,
    f_global_all: Tensor,
    params: &RegistrationParams,
    use_local: bool,
    use_global: bool,
) -> Result<(Tensor, Option<Tensor>, Option<Tensor>), AdError> {
    let local = if use_local {
        Some(registration_loss_single(
            tape, binder, u_all, f_local_all, params,
        )?)
    } else {
        None
    };
    let global = if use_global {
        Some(registration_loss_single(
            tape, binder, u_all, f_global_all, params,
        )?)
    } else {
        None
    };
    let total = match (local, global) {
        (Some(l), Some(g)) => tape.add(l, g)?,
        (Some(l), None) => l,
        (None, Some(g)) => g,
        (None, None) => tape.scalar(0.0),
    };
    Ok((total, local, global))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::seeds;
    use rand::Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn tiny_params(c: usize, p: usize, t: f64, seed: u64) -> RegistrationParams {
        let config = ModelConfig {
            width2: c,
            proj_dim: p,
            temperature: t,
            ..ModelConfig::default()
        };
        RegistrationParams::init(&config, &mut seeds::rng_from(seed))
    }

    /// Brute-force InfoNCE oracle: explicit double loop over projected
    /// features computed with plain matrix algebra outside the tape.
    fn brute_force_info_nce(pu: &[Vec<f64>], pf: &[Vec<f64>], t: f64) -> f64 {
        let n = pu.len();
        let mut total = 0.0;
        for i in 0..n {
            let sim =
                |a: &[f64], b: &[f64]| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / t;
            let pos = sim(&pf[i], &pu[i]);
            let mut denom_max = f64::NEG_INFINITY;
            let sims: Vec<f64> = (0..n).map(|k| sim(&pf[i], &pu[k])).collect();
            for &s in &sims {
                denom_max = denom_max.max(s);
            }
            let denom: f64 = sims.iter().map(|&s| (s - denom_max).exp()).sum();
            total += -(pos - denom_max - denom.ln());
        }
        total / n as f64
    }

    fn project(mlp: &Mlp, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        // Plain forward pass without the tape.
        rows.iter()
            .map(|row| {
                let mut h = row.clone();
                let last = mlp.layers.len() - 1;
                for (li, layer) in mlp.layers.iter().enumerate() {
                    let (ins, outs) = (layer.weight.rows, layer.weight.cols);
                    let mut next = vec![0.0; outs];
                    for o in 0..outs {
                        let mut acc = layer.bias.data[o];
                        for i in 0..ins {
                            acc += h[i] * layer.weight.data[i * outs + o];
                        }
                        next[o] = acc;
                    }
                    if li < last || mlp.activate_last {
                        for v in &mut next {
                            if *v < 0.0 {
                                *v *= crate::net::LEAKY_SLOPE;
                            }
                        }
                    }
                    h = next;
                }
                h
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_double_loop() {
        // B = 2, N = 4, C = 8 instance against the explicit oracle.
        let (b, n, c, p) = (2usize, 4usize, 8usize, 6usize);
        let rows = b * n;
        let mut rng = seeds::rng_from(1);
        let params = tiny_params(c, p, 0.5, 2);
        let u_rows: Vec<Vec<f64>> = (0..rows).map(|_| rand_vec(&mut rng, c)).collect();
        let f_rows: Vec<Vec<f64>> = (0..rows).map(|_| rand_vec(&mut rng, c)).collect();

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let u = tape
            .leaf(u_rows.concat(), [rows, c], false)
            .unwrap();
        let f = tape
            .leaf(f_rows.concat(), [rows, c], false)
            .unwrap();
        let loss = registration_loss_single(&mut tape, &mut binder, u, f, &params).unwrap();

        let pu = project(&params.phi1, &u_rows);
        let pf = project(&params.phi2, &f_rows);
        let want = brute_force_info_nce(&pu, &pf, params.temperature);
        let got = tape.value(loss)[0];
        assert!(
            (got - want).abs() < 1e-10,
            "tape {got} vs oracle {want}"
        );
    }

    #[test]
    fn identical_features_give_log_batch_points() {
        let (rows, c) = (6usize, 5usize);
        let params = tiny_params(c, 4, 0.017, 3);
        let row = rand_vec(&mut seeds::rng_from(4), c);
        let all: Vec<f64> = (0..rows).flat_map(|_| row.clone()).collect();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let u = tape.leaf(all.clone(), [rows, c], false).unwrap();
        let f = tape.leaf(all, [rows, c], false).unwrap();
        let loss = registration_loss_single(&mut tape, &mut binder, u, f, &params).unwrap();
        let want = (rows as f64).ln();
        assert!((tape.value(loss)[0] - want).abs() < 1e-9);
    }

    #[test]
    fn strong_positives_drive_loss_to_zero() {
        // Orthogonal one-hot projections with a hot temperature: the
        // diagonal dominates and the loss collapses toward zero.
        let rows = 4;
        let mut params = tiny_params(rows, rows, 1.0, 5);
        // Make both projections the identity map.
        for mlp in [&mut params.phi1, &mut params.phi2] {
            for layer in &mut mlp.layers {
                layer.weight.data.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..layer.weight.rows.min(layer.weight.cols) {
                    layer.weight.data[i * layer.weight.cols + i] = 1.0;
                }
                layer.bias.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut eye = vec![0.0; rows * rows];
        for i in 0..rows {
            eye[i * rows + i] = 40.0;
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let u = tape.leaf(eye.clone(), [rows, rows], false).unwrap();
        let f = tape.leaf(eye, [rows, rows], false).unwrap();
        let loss = registration_loss_single(&mut tape, &mut binder, u, f, &params).unwrap();
        assert!(tape.value(loss)[0] < 1e-6, "loss {}", tape.value(loss)[0]);
    }

    #[test]
    fn correspondence_rows_are_distributions() {
        let (n, c) = (7usize, 6usize);
        let mut rng = seeds::rng_from(6);
        let params = tiny_params(c, 5, 0.3, 7);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let x = tape.leaf(rand_vec(&mut rng, n * c), [n, c], false).unwrap();
        let y = tape.leaf(rand_vec(&mut rng, n * c), [n, c], false).unwrap();
        let m = correspondence_map(&mut tape, &mut binder, x, y, &params).unwrap();
        let vals = tape.value(m);
        for r in 0..n {
            let row = &vals[r * n..(r + 1) * n];
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
        }

        // Single candidate: the map is exactly [[1.0]].
        let mut tape1 = Tape::new();
        let mut binder1 = ParamBinder::new(false);
        let x1 = tape1.leaf(rand_vec(&mut rng, c), [1, c], false).unwrap();
        let y1 = tape1.leaf(rand_vec(&mut rng, c), [1, c], false).unwrap();
        let m1 = correspondence_map(&mut tape1, &mut binder1, x1, y1, &params).unwrap();
        assert_eq!(tape1.value(m1), &[1.0]);
    }

    #[test]
    fn high_temperature_flattens_rows() {
        let (n, c) = (5usize, 4usize);
        let mut rng = seeds::rng_from(8);
        let params = tiny_params(c, 4, 1e6, 9);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let x = tape.leaf(rand_vec(&mut rng, n * c), [n, c], false).unwrap();
        let y = tape.leaf(rand_vec(&mut rng, n * c), [n, c], false).unwrap();
        let m = correspondence_map(&mut tape, &mut binder, x, y, &params).unwrap();
        for &v in tape.value(m) {
            assert!((v - 1.0 / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn combined_loss_adds_branches() {
        let (rows, c) = (5usize, 6usize);
        let mut rng = seeds::rng_from(10);
        let params = tiny_params(c, 4, 0.2, 11);
        let u_data = rand_vec(&mut rng, rows * c);
        let fl_data = rand_vec(&mut rng, rows * c);
        let fg_data = rand_vec(&mut rng, rows * c);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(false);
        let u = tape.leaf(u_data, [rows, c], false).unwrap();
        let fl = tape.leaf(fl_data, [rows, c], false).unwrap();
        let fg = tape.leaf(fg_data, [rows, c], false).unwrap();
        let (total, l, g) =
            registration_loss(&mut tape, &mut binder, u, fl, fg, &params, true, true).unwrap();
        let want = tape.value(l.unwrap())[0] + tape.value(g.unwrap())[0];
        assert!((tape.value(total)[0] - want).abs() < 1e-12);

        let (only_local, l2, g2) =
            registration_loss(&mut tape, &mut binder, u, fl, fg, &params, true, false).unwrap();
        assert!(g2.is_none());
        assert_eq!(tape.value(only_local)[0], tape.value(l2.unwrap())[0]);
    }

    #[test]
    fn registration_loss_gradient_check() {
        use crate::autodiff::{gradcheck, Shape};
        let (rows, c) = (4usize, 5usize);
        let mut rng = seeds::rng_from(12);
        let params = tiny_params(c, 4, 0.4, 13);
        let err = gradcheck::check(
            &|t: &mut Tape, xs: &[Tensor]| {
                let mut binder = ParamBinder::new(false);
                registration_loss_single(t, &mut binder, xs[0], xs[1], &params)
            },
            &[
                (rand_vec(&mut rng, rows * c), Shape::new(&[rows, c])),
                (rand_vec(&mut rng, rows * c), Shape::new(&[rows, c])),
            ],
            10,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "registration loss FD err {err:.3e}");
    }
}
