//! Central finite-difference gradient checking. The oracle rebuilds the
//! forward graph from scratch for every probe, so it stays independent of
//! the backward rules it audits.

use rand::Rng;

use super::{AdError, Shape, Tape, Tensor};

/// Default probe step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss from leaf tensors created by the checker.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Tensor, AdError>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, AdError>,
{
    fn build(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Tensor, AdError> {
        self(tape, inputs)
    }
}

/// Compare analytic gradients against central finite differences on up to
/// `probes_per_input` coordinates of each input; returns the maximum
/// relative error observed.
///
/// Relative error uses `|ga - gf| / max(|ga|, |gf|, 1e-3)`; the floor keeps
/// near-zero gradients from amplifying the ~1e-11 finite-difference noise.
pub fn check<B: LossBuilder, R: Rng>(
    builder: &B,
    inputs: &[(Vec<f64>, Shape)],
    probes_per_input: usize,
    rng: &mut R,
) -> Result<f64, AdError> {
    // Analytic pass.
    let mut tape = Tape::new();
    let handles: Vec<Tensor> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = builder.build(&mut tape, &handles)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = handles
        .iter()
        .map(|&h| tape.grad(h).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[(Vec<f64>, Shape)]| -> Result<f64, AdError> {
        let mut t = Tape::new();
        let hs: Vec<Tensor> = perturbed
            .iter()
            .map(|(d, s)| t.leaf(d.clone(), s.clone(), false))
            .collect::<Result<_, _>>()?;
        let l = builder.build(&mut t, &hs)?;
        Ok(t.value(l)[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<(Vec<f64>, Shape)> = inputs.to_vec();
    for (input_idx, (data, _)) in inputs.iter().enumerate() {
        if analytic[input_idx].is_empty() {
            continue;
        }
        let n = data.len();
        let probes = probes_per_input.min(n);
        for p in 0..probes {
            let coord = if probes == n {
                p
            } else {
                rng.random_range(0..n)
            };
            let original = work[input_idx].0[coord];
            work[input_idx].0[coord] = original + FD_STEP;
            let up = eval(&work)?;
            work[input_idx].0[coord] = original - FD_STEP;
            let down = eval(&work)?;
            work[input_idx].0[coord] = original;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ga = analytic[input_idx][coord];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
