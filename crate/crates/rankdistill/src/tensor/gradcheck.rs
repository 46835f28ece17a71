//! Finite-difference verification of reverse-mode gradients.
//!
//! A loss builder is evaluated twice per probed coordinate with central
//! differences, and the analytic gradient from one backward pass is compared
//! coordinate by coordinate. The relative error uses
//! `|analytic - numeric| / max(1, |analytic|)`, which behaves like an
//! absolute error near zero and a relative error for large gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all probed coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates probed.
    pub probes: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Probe every coordinate of every input.
pub fn check_gradients<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    run(f, inputs, step, &coords)
}

/// Probe at most `max_probes` coordinates per input, chosen without
/// replacement from a seeded stream. Inputs small enough are swept fully.
pub fn check_gradients_sampled<F>(
    f: &F,
    inputs: &[Tensor],
    step: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= max_probes {
                (0..n).collect()
            } else {
                let mut picked = rand::seq::index::sample(&mut rng, n, max_probes).into_vec();
                picked.sort_unstable();
                picked
            }
        })
        .collect();
    run(f, inputs, step, &coords)
}

fn run<F>(f: &F, inputs: &[Tensor], step: f64, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&tracked)?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient check loss".into(),
            detail: format!("loss evaluated to {loss_value}"),
        });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Numeric probes on plain tensors.
    let plain: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: 0,
        worst: None,
    };
    for (i, coord_list) in coords.iter().enumerate() {
        for &j in coord_list {
            let numeric = central_difference(f, &plain, i, j, step)?;
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.probes += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

fn central_difference<F>(
    f: &F,
    plain: &[Tensor],
    input: usize,
    coord: usize,
    step: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut probe: Vec<Tensor> = plain.to_vec();
        let mut bumped = plain[input].detach();
        bumped.data_mut()[coord] += delta;
        probe[input] = bumped;
        let v = f(&probe)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient check probe".into(),
                detail: format!("input {input}, coordinate {coord}: loss evaluated to {v}"),
            });
        }
        Ok(v)
    };
    let plus = eval(step)?;
    let minus = eval(-step)?;
    Ok((plus - minus) / (2.0 * step))
}
