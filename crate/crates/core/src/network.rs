//! The two-layer convolutional learner: smoothed ReLU activation, forward
//! pass, cross-entropy and margin losses, analytic gradients with respect to
//! weights and inputs, Gaussian initialization and the hand-crafted rank-one
//! constructors.
//!
//! All arithmetic is 64-bit with a fixed accumulation order (class-major,
//! filter-major, patch-major) so runs are bit-reproducible.

use crate::features::FeatureSet;
use crate::linalg::{axpy, dot};
use crate::{Error, FeatureKind, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Smoothed ReLU: zero for `z <= 0`, a degree-`q` monomial on
/// `[0, threshold]`, and affine with unit slope beyond the threshold. The
/// three pieces agree in value and derivative at both knots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    /// Polynomial exponent `q >= 2`.
    pub exponent: u32,
    /// Knee location; the polynomial hands over to the linear part here.
    pub threshold: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Activation {
            exponent: 3,
            threshold: 1.0,
        }
    }
}

impl Activation {
    pub fn new(exponent: u32, threshold: f64) -> Result<Self> {
        let act = Activation {
            exponent,
            threshold,
        };
        act.validate()?;
        Ok(act)
    }

    pub fn validate(&self) -> Result<()> {
        if self.exponent < 2 {
            return Err(Error::Config("activation exponent must be >= 2".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config("activation threshold must be > 0".into()));
        }
        Ok(())
    }

    pub fn srelu(&self, z: f64) -> f64 {
        let q = self.exponent;
        let rho = self.threshold;
        if z <= 0.0 {
            0.0
        } else if z <= rho {
            z.powi(q as i32) / (q as f64 * rho.powi(q as i32 - 1))
        } else {
            z - (1.0 - 1.0 / q as f64) * rho
        }
    }

    pub fn srelu_prime(&self, z: f64) -> f64 {
        let q = self.exponent;
        let rho = self.threshold;
        if z <= 0.0 {
            0.0
        } else if z <= rho {
            (z / rho).powi(q as i32 - 1)
        } else {
            1.0
        }
    }
}

/// `k x m` filters of dimension `d`; class scores sum the activation over
/// filters and patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub act: Activation,
    weights: Vec<f64>,
}

impl Network {
    pub fn from_weights(
        k: usize,
        m: usize,
        d: usize,
        act: Activation,
        weights: Vec<f64>,
    ) -> Result<Self> {
        act.validate()?;
        if weights.len() != k * m * d {
            return Err(Error::Shape(format!(
                "{} weights for k*m*d = {}",
                weights.len(),
                k * m * d
            )));
        }
        Ok(Network {
            k,
            m,
            d,
            act,
            weights,
        })
    }

    /// Gaussian init, every entry iid `N(0, weight_std^2)`.
    pub fn random(
        k: usize,
        m: usize,
        d: usize,
        weight_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(weight_std > 0.0) {
            return Err(Error::Config("weight std must be positive".into()));
        }
        let normal = Normal::new(0.0, weight_std).expect("validated std");
        let weights = (0..k * m * d).map(|_| normal.sample(rng)).collect();
        Network::from_weights(k, m, d, Activation::default(), weights)
    }

    pub fn random_with_activation(
        k: usize,
        m: usize,
        d: usize,
        weight_std: f64,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut net = Network::random(k, m, d, weight_std, rng)?;
        act.validate()?;
        net.act = act;
        Ok(net)
    }

    /// Single-filter network with `w_{i,1} = scale * f_i` where `f_i` is the
    /// robust or non-robust feature of class `i`.
    pub fn rank_one(fs: &FeatureSet, scale: f64, kind: FeatureKind, act: Activation) -> Self {
        let (k, d) = (fs.k(), fs.dim());
        let mut weights = vec![0.0; k * d];
        for i in 0..k {
            let f = fs.feature(kind, i);
            for j in 0..d {
                weights[i * d + j] = scale * f[j];
            }
        }
        Network {
            k,
            m: 1,
            d,
            act,
            weights,
        }
    }

    pub fn weight(&self, i: usize, r: usize) -> &[f64] {
        let base = (i * self.m + r) * self.d;
        &self.weights[base..base + self.d]
    }

    pub fn weight_mut(&mut self, i: usize, r: usize) -> &mut [f64] {
        let base = (i * self.m + r) * self.d;
        &mut self.weights[base..base + self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn check_patches(&self, patches: &[f64]) -> Result<usize> {
        if patches.is_empty() || patches.len() % self.d != 0 {
            return Err(Error::Shape(format!(
                "patch buffer of {} values is not a multiple of d = {}",
                patches.len(),
                self.d
            )));
        }
        Ok(patches.len() / self.d)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.k {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.k,
            });
        }
        Ok(())
    }

    /// Class scores for flattened patches (`P * d` values).
    pub fn forward(&self, patches: &[f64]) -> Result<Vec<f64>> {
        let p_count = self.check_patches(patches)?;
        let mut scores = vec![0.0; self.k];
        for i in 0..self.k {
            let mut acc = 0.0;
            for r in 0..self.m {
                let w = self.weight(i, r);
                for p in 0..p_count {
                    acc += self
                        .act
                        .srelu(dot(w, &patches[p * self.d..(p + 1) * self.d]));
                }
            }
            scores[i] = acc;
        }
        Ok(scores)
    }
}

/// Stable softmax over class scores (max subtraction).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of the true class, computed through log-sum-exp.
pub fn ce_loss(net: &Network, patches: &[f64], label: usize) -> Result<f64> {
    net.check_label(label)?;
    let scores = net.forward(patches)?;
    Ok(ce_from_scores(&scores, label))
}

pub(crate) fn ce_from_scores(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[label]
}

/// Margin loss, the negated true-class score.
pub fn margin_loss(net: &Network, patches: &[f64], label: usize) -> Result<f64> {
    net.check_label(label)?;
    Ok(-net.forward(patches)?[label])
}

/// Per-filter loss gradients, same layout as the network weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    values: Vec<f64>,
}

impl Gradients {
    fn zeros(k: usize, m: usize, d: usize) -> Self {
        Gradients {
            k,
            m,
            d,
            values: vec![0.0; k * m * d],
        }
    }

    pub fn filter(&self, i: usize, r: usize) -> &[f64] {
        let base = (i * self.m + r) * self.d;
        &self.values[base..base + self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }
}

/// Per-example activation coefficients; the batch gradient is their
/// patch-weighted mean.
fn example_coefficients(net: &Network, patches: &[f64], label: usize) -> Result<Vec<f64>> {
    let p_count = net.check_patches(patches)?;
    net.check_label(label)?;
    // dots[(i*m + r)*P + p] = <w_ir, x_p>
    let mut dots = vec![0.0; net.k * net.m * p_count];
    let mut scores = vec![0.0; net.k];
    for i in 0..net.k {
        let mut acc = 0.0;
        for r in 0..net.m {
            let w = net.weight(i, r);
            for p in 0..p_count {
                let z = dot(w, &patches[p * net.d..(p + 1) * net.d]);
                dots[(i * net.m + r) * p_count + p] = z;
                acc += net.act.srelu(z);
            }
        }
        scores[i] = acc;
    }
    let probs = softmax(&scores);
    let mut coeffs = dots;
    for i in 0..net.k {
        let err = if i == label { 1.0 - probs[i] } else { -probs[i] };
        for r in 0..net.m {
            for p in 0..p_count {
                let z = &mut coeffs[(i * net.m + r) * p_count + p];
                *z = err * net.act.srelu_prime(*z);
            }
        }
    }
    Ok(coeffs)
}

/// Mean cross-entropy gradient over a batch of `(patches, label)` pairs.
/// Per-example terms may be computed in parallel; the reduction runs in
/// fixed example order.
pub fn grad_weights_ce(net: &Network, batch: &[(&[f64], usize)]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_example: Result<Vec<Vec<f64>>> = batch
        .par_iter()
        .map(|&(patches, label)| example_coefficients(net, patches, label))
        .collect();
    let per_example = per_example?;

    let mut grad = Gradients::zeros(net.k, net.m, net.d);
    let scale = -1.0 / batch.len() as f64;
    for (&(patches, _), coeffs) in batch.iter().zip(&per_example) {
        let p_count = patches.len() / net.d;
        for i in 0..net.k {
            for r in 0..net.m {
                let base = (i * net.m + r) * net.d;
                let out = &mut grad.values[base..base + net.d];
                for p in 0..p_count {
                    let c = coeffs[(i * net.m + r) * p_count + p];
                    if c != 0.0 {
                        axpy(out, scale * c, &patches[p * net.d..(p + 1) * net.d]);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Gradient of the margin loss with respect to the input patches:
/// `-sum_s srelu'(<w_{y,s}, x_p>) w_{y,s}` per patch.
pub fn grad_input_margin(net: &Network, patches: &[f64], label: usize) -> Result<Vec<f64>> {
    let p_count = net.check_patches(patches)?;
    net.check_label(label)?;
    let mut grad = vec![0.0; patches.len()];
    for p in 0..p_count {
        let x = &patches[p * net.d..(p + 1) * net.d];
        let out = &mut grad[p * net.d..(p + 1) * net.d];
        for s in 0..net.m {
            let w = net.weight(label, s);
            let slope = net.act.srelu_prime(dot(w, x));
            if slope != 0.0 {
                axpy(out, -slope, w);
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    k: usize,
    m: usize,
    d: usize,
    q: u32,
    rho: f64,
    weights: Vec<f64>,
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        crate::jsonfmt::to_string_17(&CheckpointFile {
            k: self.k,
            m: self.m,
            d: self.d,
            q: self.act.exponent,
            rho: self.act.threshold,
            weights: self.weights.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        Network::from_weights(
            file.k,
            file.m,
            file.d,
            Activation::new(file.q, file.rho)?,
            file.weights,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_feature_set, sample_example, DataConfig};
    use crate::rng::{stream, TAG_INIT, TAG_TRAIN_DATA};

    fn act3() -> Activation {
        Activation::default()
    }

    #[test]
    fn srelu_branches() {
        let a = act3();
        assert_eq!(a.srelu(-0.5), 0.0);
        assert!((a.srelu(0.5) - 0.125 / 3.0).abs() < 1e-15);
        assert!((a.srelu(2.0) - 4.0 / 3.0).abs() < 1e-15);
        assert!((a.srelu(1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn srelu_prime_branches() {
        let a = act3();
        assert_eq!(a.srelu_prime(0.5), 0.25);
        assert_eq!(a.srelu_prime(2.0), 1.0);
        assert_eq!(a.srelu_prime(-1.0), 0.0);
    }

    #[test]
    fn srelu_is_c1_at_knots() {
        for q in [2u32, 3, 4, 6] {
            for rho in [0.25, 1.0, 3.0] {
                let a = Activation::new(q, rho).unwrap();
                let eps = 1e-9;
                assert!(a.srelu(eps).abs() < 1e-12);
                assert!((a.srelu(rho - eps) - a.srelu(rho + eps)).abs() < 1e-8);
                assert!((a.srelu(rho) - rho / q as f64).abs() < 1e-12);
                assert!(a.srelu_prime(eps) < 1e-8);
                assert!((a.srelu_prime(rho - eps) - 1.0).abs() < 1e-6);
                assert_eq!(a.srelu_prime(rho + eps), 1.0);
            }
        }
    }

    #[test]
    fn srelu_monotone_convex_on_positive_axis() {
        let a = act3();
        let grid: Vec<f64> = (0..400).map(|i| i as f64 * 0.01).collect();
        for w in grid.windows(2) {
            assert!(a.srelu(w[1]) >= a.srelu(w[0]));
            assert!(a.srelu_prime(w[1]) >= a.srelu_prime(w[0]) - 1e-15);
        }
    }

    #[test]
    fn forward_single_patch_single_filter() {
        let fs = build_feature_set(2, 100).unwrap();
        let mut weights = vec![0.0; 2 * 100];
        weights[..100].copy_from_slice(fs.nonrobust(0)); // w_{0,0} = v_0
        let net = Network::from_weights(2, 1, 100, act3(), weights).unwrap();
        let scores = net.forward(fs.nonrobust(0)).unwrap();
        assert!((scores[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn forward_rank_one_margin() {
        // scale 3 non-robust net on a noiseless example: 15 linear-branch terms.
        let cfg = DataConfig {
            noise_std: 0.0,
            ..DataConfig::default()
        };
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let ex = sample_example(&cfg, &fs, &mut stream(1, TAG_TRAIN_DATA, 0)).unwrap();
        let net = Network::rank_one(&fs, 3.0, FeatureKind::NonRobust, act3());
        let scores = net.forward(&ex.patches).unwrap();
        assert!((scores[ex.label] - 35.0).abs() < 1e-12);
        assert_eq!(scores[1 - ex.label], 0.0);
        assert!((margin_loss(&net, &ex.patches, ex.label).unwrap() + 35.0).abs() < 1e-12);
        assert!(ce_loss(&net, &ex.patches, ex.label).unwrap() < 1e-12);
        assert!((ce_loss(&net, &ex.patches, 1 - ex.label).unwrap() - 35.0).abs() < 1e-6);
    }

    #[test]
    fn forward_zero_weights() {
        let net = Network::from_weights(3, 2, 10, act3(), vec![0.0; 60]).unwrap();
        let scores = net.forward(&vec![1.0; 20]).unwrap();
        assert_eq!(scores, vec![0.0; 3]);
    }

    #[test]
    fn forward_is_patch_permutation_invariant() {
        let mut rng = stream(4, TAG_INIT, 0);
        let net = Network::random(2, 3, 8, 0.5, &mut rng).unwrap();
        let patches: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut swapped = patches.clone();
        for j in 0..8 {
            swapped.swap(j, 16 + j); // swap patch 0 and patch 2
        }
        let a = net.forward(&patches).unwrap();
        let b = net.forward(&swapped).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let net = Network::from_weights(2, 1, 10, act3(), vec![0.0; 20]).unwrap();
        assert!(net.forward(&vec![0.0; 15]).is_err());
    }

    #[test]
    fn softmax_basics() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
        let p = softmax(&[3.0_f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_uniform_scores() {
        let net = Network::from_weights(2, 1, 4, act3(), vec![0.0; 8]).unwrap();
        let loss = ce_loss(&net, &[1.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&net, &[1.0, 0.0, 0.0, 0.0], 5).is_err());
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let net = Network::from_weights(2, 2, 6, act3(), vec![0.0; 24]).unwrap();
        let patches: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let batch = vec![(patches.as_slice(), 0usize)];
        let g = grad_weights_ce(&net, &batch).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
        let gi = grad_input_margin(&net, &patches, 0).unwrap();
        assert!(gi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicated_example_same_gradient() {
        let mut rng = stream(8, TAG_INIT, 0);
        let net = Network::random(2, 2, 6, 0.4, &mut rng).unwrap();
        let patches: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        let single = grad_weights_ce(&net, &[(patches.as_slice(), 1)]).unwrap();
        let double =
            grad_weights_ce(&net, &[(patches.as_slice(), 1), (patches.as_slice(), 1)]).unwrap();
        for (a, b) in single.values().iter().zip(double.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn input_gradient_linear_branch() {
        // w_{y,0} = v_y, patch 2 v_y: slope 1, gradient -v_y.
        let fs = build_feature_set(2, 100).unwrap();
        let net = Network::rank_one(&fs, 1.0, FeatureKind::NonRobust, act3());
        let patch: Vec<f64> = fs.nonrobust(0).iter().map(|x| 2.0 * x).collect();
        let g = grad_input_margin(&net, &patch, 0).unwrap();
        for (j, val) in g.iter().enumerate() {
            let want = -fs.nonrobust(0)[j];
            assert!((val - want).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_gradient_wrt_scores_sums_to_zero() {
        // softmax residuals (one-hot minus probs) cancel across classes
        let probs = softmax(&[0.3, -1.2, 0.5]);
        let residual: f64 = (0..3)
            .map(|i| if i == 1 { 1.0 - probs[i] } else { -probs[i] })
            .sum();
        assert!(residual.abs() < 1e-12);
    }

    #[test]
    fn random_init_statistics() {
        let mut rng = stream(5, TAG_INIT, 0);
        let net = Network::random(2, 100, 100, 0.01, &mut rng).unwrap();
        let n = net.weights().len() as f64;
        let mean: f64 = net.weights().iter().sum::<f64>() / n;
        let var: f64 = net.weights().iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std / 0.01 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn random_init_reproducible() {
        let a = Network::random(2, 4, 10, 0.01, &mut stream(6, TAG_INIT, 0)).unwrap();
        let b = Network::random(2, 4, 10, 0.01, &mut stream(6, TAG_INIT, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_feature_correlation_scales_like_gumbel() {
        // E max_r <w_ir, f> ~ weight_std * sqrt(2 ln m) for m = 100.
        let fs = build_feature_set(2, 100).unwrap();
        let expect = 0.01 * (2.0 * 100.0_f64.ln()).sqrt();
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..40u64 {
            let net = Network::random(2, 100, 100, 0.01, &mut stream(s, TAG_INIT, 0)).unwrap();
            for i in 0..2 {
                for f in [fs.robust(i), fs.nonrobust(i)] {
                    let max = (0..100)
                        .map(|r| dot(net.weight(i, r), f))
                        .fold(f64::NEG_INFINITY, f64::max);
                    total += max;
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        assert!(
            (mean / expect - 1.0).abs() < 0.3,
            "mean max correlation {mean} vs {expect}"
        );
    }

    #[test]
    fn rank_one_zero_scale_outputs_zero() {
        let fs = build_feature_set(2, 10).unwrap();
        let net = Network::rank_one(&fs, 0.0, FeatureKind::Robust, act3());
        let scores = net.forward(&vec![0.7; 20]).unwrap();
        assert_eq!(scores, vec![0.0; 2]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = stream(12, TAG_INIT, 0);
        let net = Network::random(2, 3, 7, 0.3, &mut rng).unwrap();
        let text = net.to_json().unwrap();
        let back = Network::from_json(&text).unwrap();
        assert_eq!(net, back);
    }
}
