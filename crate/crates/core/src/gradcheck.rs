//! Central finite-difference checking of the analytic gradients.
//!
//! The numeric side only ever evaluates losses, so it stays independent of
//! the analytic gradient path. Instances whose pre-activations sit too close
//! to the activation knots are redrawn: the difference quotient is not a
//! valid derivative estimate across a second-derivative jump.

use crate::network::{ce_from_scores, grad_input_margin, grad_weights_ce, Network};
use crate::rng::{stream, TAG_GRADCHECK};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

/// Mean CE over a batch, the quantity the weight gradient differentiates.
fn batch_ce(net: &Network, batch: &[(&[f64], usize)]) -> Result<f64> {
    let mut total = 0.0;
    for &(patches, label) in batch {
        total += ce_from_scores(&net.forward(patches)?, label);
    }
    Ok(total / batch.len() as f64)
}

/// Central differences of the mean batch CE with respect to every weight.
pub fn numeric_grad_weights_ce(
    net: &Network,
    batch: &[(&[f64], usize)],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; net.weights().len()];
    let mut probe = net.clone();
    for idx in 0..grad.len() {
        let orig = probe.weights()[idx];
        probe.weights_mut()[idx] = orig + h;
        let up = batch_ce(&probe, batch)?;
        probe.weights_mut()[idx] = orig - h;
        let down = batch_ce(&probe, batch)?;
        probe.weights_mut()[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central differences of the margin loss with respect to every input
/// coordinate.
pub fn numeric_grad_input_margin(
    net: &Network,
    patches: &[f64],
    label: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; patches.len()];
    let mut probe = patches.to_vec();
    for idx in 0..grad.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = -net.forward(&probe)?[label];
        probe[idx] = orig - h;
        let down = -net.forward(&probe)?[label];
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Normalized infinity-norm error between two gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-8f64, |a, &b| a.max(b.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0f64, f64::max)
        / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub step: f64,
    pub max_rel_weights: f64,
    pub max_rel_input: f64,
    /// Instances redrawn because a pre-activation sat on an activation knot.
    pub resampled: usize,
}

struct Instance {
    net: Network,
    patches: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// Margin an instance's pre-activations must keep from the knots, scaled to
/// the largest finite-difference displacement of any dot product.
fn knot_guard(net: &Network, patches: &[f64], h: f64) -> bool {
    let scale: f64 = patches
        .iter()
        .chain(net.weights())
        .fold(1.0f64, |a, &b| a.max(b.abs()));
    let guard = 20.0 * h * scale;
    let p_count = patches.len() / net.d;
    for i in 0..net.k {
        for r in 0..net.m {
            let w = net.weight(i, r);
            for p in 0..p_count {
                let z: f64 = w
                    .iter()
                    .zip(&patches[p * net.d..(p + 1) * net.d])
                    .map(|(a, b)| a * b)
                    .sum();
                if z.abs() < guard || (z - net.act.threshold).abs() < guard {
                    return false;
                }
            }
        }
    }
    true
}

fn draw_instance(seed: u64, index: u64, h: f64) -> Result<(Instance, usize)> {
    let mut rng = stream(seed, TAG_GRADCHECK, index);
    let normal = Normal::new(0.0, 0.35).expect("fixed std");
    let mut resampled = 0;
    loop {
        let k = rng.gen_range(2..=3usize);
        let m = rng.gen_range(1..=4usize);
        let p = rng.gen_range(1..=4usize);
        let d = rng.gen_range(2 * k..=10usize);
        let weights: Vec<f64> = (0..k * m * d).map(|_| normal.sample(&mut rng)).collect();
        let net = Network::from_weights(k, m, d, Default::default(), weights)?;
        let n_examples = rng.gen_range(1..=3usize);
        let patches: Vec<Vec<f64>> = (0..n_examples)
            .map(|_| (0..p * d).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let labels: Vec<usize> = (0..n_examples).map(|_| rng.gen_range(0..k)).collect();
        if patches.iter().all(|x| knot_guard(&net, x, h)) {
            return Ok((
                Instance {
                    net,
                    patches,
                    labels,
                },
                resampled,
            ));
        }
        resampled += 1;
        if resampled > 1000 {
            return Err(Error::Config("could not draw a guarded instance".into()));
        }
    }
}

/// Compare analytic and numeric gradients on random small instances.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradCheckReport> {
    run_gradcheck_with_step(trials, seed, 1e-5)
}

pub fn run_gradcheck_with_step(trials: usize, seed: u64, h: f64) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Config("gradient check needs at least one trial".into()));
    }
    let mut max_w = 0.0f64;
    let mut max_x = 0.0f64;
    let mut resampled = 0;
    for t in 0..trials {
        let (inst, redraws) = draw_instance(seed, t as u64, h)?;
        resampled += redraws;
        let batch: Vec<(&[f64], usize)> = inst
            .patches
            .iter()
            .map(|p| p.as_slice())
            .zip(inst.labels.iter().copied())
            .collect();
        let analytic = grad_weights_ce(&inst.net, &batch)?;
        let numeric = numeric_grad_weights_ce(&inst.net, &batch, h)?;
        max_w = max_w.max(max_rel_error(analytic.values(), &numeric));

        let (patches0, label0) = (&inst.patches[0], inst.labels[0]);
        let analytic = grad_input_margin(&inst.net, patches0, label0)?;
        let numeric = numeric_grad_input_margin(&inst.net, patches0, label0, h)?;
        max_x = max_x.max(max_rel_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        trials,
        step: h,
        max_rel_weights: max_w,
        max_rel_input: max_x,
        resampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_small_run_is_tight_and_deterministic() {
        let a = run_gradcheck(10, 42).unwrap();
        let b = run_gradcheck(10, 42).unwrap();
        assert_eq!(a.max_rel_weights, b.max_rel_weights);
        assert_eq!(a.max_rel_input, b.max_rel_input);
        assert!(a.max_rel_weights <= 1e-6, "weights err {}", a.max_rel_weights);
        assert!(a.max_rel_input <= 1e-6, "input err {}", a.max_rel_input);
    }

    #[test]
    fn gradcheck_rejects_zero_trials() {
        assert!(run_gradcheck(0, 1).is_err());
    }
}
