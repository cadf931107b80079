//! Perturbation constructions and evaluation: the coordinatewise clip,
//! one-step and PGD attacks on the margin loss, the model-free feature-swap
//! perturbation, and the accuracy / feature-learning evaluators.

use crate::features::{make_representative, Dataset, FeatureSet, LabeledExample, PatchRole};
use crate::linalg::axpy;
use crate::network::{grad_input_margin, margin_loss, Network};
use crate::rng::{stream, TAG_EVAL};
use crate::{Error, FeatureKind, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Attack used when evaluating a network on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    None,
    /// Single clipped gradient-ascent step at the given rate.
    OneStep { attack_lr: f64 },
    /// Iterated signed-gradient ascent with projection and best-iterate
    /// selection.
    Pgd { steps: usize, step_size: f64 },
    /// The model-free swap of non-robust signals toward a random other class.
    FeatureSwap { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
}

impl AttackSpec {
    pub fn none() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            epsilon: 0.0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd { steps, step_size },
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config("attack radius must be nonnegative".into()));
        }
        if let AttackKind::Pgd { steps, step_size } = self.kind {
            if steps == 0 {
                return Err(Error::Config("PGD needs at least one step".into()));
            }
            if step_size < 0.0 {
                return Err(Error::Config("PGD step size must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Clamp every coordinate to `[-radius, radius]`.
pub fn clip_inf(values: &[f64], radius: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&z| z.clamp(-radius, radius))
        .collect()
}

/// One clipped ascent step on the margin loss:
/// `X + clip(attack_lr * grad_X(-F_y), epsilon)`.
pub fn one_step_attack(
    net: &Network,
    patches: &[f64],
    label: usize,
    attack_lr: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let grad = grad_input_margin(net, patches, label)?;
    Ok(patches
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| x + (attack_lr * g).clamp(-epsilon, epsilon))
        .collect())
}

/// Objective driving multi-step attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackObjective {
    /// `-F_y`, the loss used throughout training.
    #[default]
    Margin,
    /// `-(F_y - max_{j != y} F_j)`; optional variant, not used by defaults.
    GapMargin,
}

fn attack_gradient(
    net: &Network,
    patches: &[f64],
    label: usize,
    objective: AttackObjective,
) -> Result<Vec<f64>> {
    match objective {
        AttackObjective::Margin => grad_input_margin(net, patches, label),
        AttackObjective::GapMargin => {
            let scores = net.forward(patches)?;
            let rival = (0..net.k)
                .filter(|&j| j != label)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .ok_or_else(|| Error::Config("gap margin needs k >= 2".into()))?;
            let g_y = grad_input_margin(net, patches, label)?;
            let g_r = grad_input_margin(net, patches, rival)?;
            // -(grad F_y - grad F_rival) = grad(-F_y) - grad(-F_rival)
            Ok(g_y.iter().zip(&g_r).map(|(a, b)| a - b).collect())
        }
    }
}

fn attack_loss(
    net: &Network,
    patches: &[f64],
    label: usize,
    objective: AttackObjective,
) -> Result<f64> {
    match objective {
        AttackObjective::Margin => margin_loss(net, patches, label),
        AttackObjective::GapMargin => {
            let scores = net.forward(patches)?;
            let rival = (0..net.k)
                .filter(|&j| j != label)
                .map(|j| scores[j])
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(-(scores[label] - rival))
        }
    }
}

/// Projected signed-gradient ascent on the margin loss. Returns the iterate
/// with the largest loss seen, the clean input included, so the attack never
/// reports something weaker than no attack.
///
/// The margin objective touches only the label-class filters, so each
/// iterate computes that filter row's dot products once and reuses them for
/// both the best-iterate bookkeeping and the ascent direction.
pub fn pgd_attack(
    net: &Network,
    patches: &[f64],
    label: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("PGD needs at least one step".into()));
    }
    if label >= net.k {
        return Err(Error::LabelOutOfRange {
            label,
            classes: net.k,
        });
    }
    let d = net.d;
    if patches.is_empty() || patches.len() % d != 0 {
        return Err(Error::Shape(format!(
            "patch buffer of {} values is not a multiple of d = {}",
            patches.len(),
            d
        )));
    }
    let p_count = patches.len() / d;
    let mut current = patches.to_vec();
    let mut best = patches.to_vec();
    let mut best_loss = f64::NEG_INFINITY;
    let mut slopes = vec![0.0; net.m * p_count];
    let mut grad = vec![0.0; patches.len()];
    for step in 0..=steps {
        let mut loss = 0.0;
        for p in 0..p_count {
            let x = &current[p * d..(p + 1) * d];
            for s in 0..net.m {
                let z = crate::linalg::dot(net.weight(label, s), x);
                loss -= net.act.srelu(z);
                slopes[s * p_count + p] = net.act.srelu_prime(z);
            }
        }
        if step == 0 || loss > best_loss {
            best_loss = loss;
            best.copy_from_slice(&current);
        }
        if step == steps {
            break;
        }
        grad.fill(0.0);
        for p in 0..p_count {
            let out = &mut grad[p * d..(p + 1) * d];
            for s in 0..net.m {
                let slope = slopes[s * p_count + p];
                if slope != 0.0 {
                    axpy(out, -slope, net.weight(label, s));
                }
            }
        }
        for ((c, &x0), g) in current.iter_mut().zip(patches).zip(&grad) {
            let stepped = *c + step_size * g.signum() * if *g == 0.0 { 0.0 } else { 1.0 };
            *c = x0 + (stepped - x0).clamp(-epsilon, epsilon);
        }
    }
    Ok(best)
}

pub fn pgd_attack_with_objective(
    net: &Network,
    patches: &[f64],
    label: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    objective: AttackObjective,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("PGD needs at least one step".into()));
    }
    let mut current = patches.to_vec();
    let mut best = patches.to_vec();
    let mut best_loss = attack_loss(net, patches, label, objective)?;
    for _ in 0..steps {
        let grad = attack_gradient(net, &current, label, objective)?;
        for ((c, &x0), g) in current.iter_mut().zip(patches).zip(&grad) {
            let stepped = *c + step_size * g.signum() * if *g == 0.0 { 0.0 } else { 1.0 };
            *c = x0 + (stepped - x0).clamp(-epsilon, epsilon);
        }
        let loss = attack_loss(net, &current, label, objective)?;
        if loss > best_loss {
            best_loss = loss;
            best.copy_from_slice(&current);
        }
    }
    Ok(best)
}

/// The feature-swap perturbation: every non-robust patch has its class
/// signal removed and the target class' non-robust feature added at radius
/// strength; robust patches are untouched. Depends only on the example, not
/// on any network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSwap {
    /// Flattened perturbation, same layout as the example patches.
    pub delta: Vec<f64>,
    /// The drawn class the swap points to.
    pub target: usize,
    /// Whether every removed coefficient fit inside the radius.
    pub within_radius: bool,
}

pub fn feature_swap_perturbation(
    ex: &LabeledExample,
    fs: &FeatureSet,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureSwap> {
    let k = fs.k();
    if k < 2 {
        return Err(Error::Config(
            "feature swap needs at least two classes".into(),
        ));
    }
    let d = fs.dim();
    if ex.roles.len() != ex.patch_count(d) {
        return Err(Error::MissingMetadata(
            "feature swap needs patch roles".into(),
        ));
    }
    // uniform over [k] \ {label}
    let offset = rng.gen_range(1..k);
    let target = (ex.label + offset) % k;

    let mut delta = vec![0.0; ex.patches.len()];
    let mut within_radius = true;
    for (p, role) in ex.roles.iter().enumerate() {
        if let PatchRole::NonRobust { coeff } = *role {
            let slice = &mut delta[p * d..(p + 1) * d];
            slice[fs.coordinate(FeatureKind::NonRobust, ex.label)] -= coeff;
            slice[fs.coordinate(FeatureKind::NonRobust, target)] += epsilon;
            if coeff > epsilon {
                within_radius = false;
            }
        }
    }
    Ok(FeatureSwap {
        delta,
        target,
        within_radius,
    })
}

/// Accuracy report over a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_class_total: Vec<usize>,
    pub per_class_correct: Vec<usize>,
}

impl EvalReport {
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.per_class_total
            .iter()
            .zip(&self.per_class_correct)
            .map(|(&t, &c)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }
}

/// Feature-swap evaluation carries the extra model-free attack bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct SwapEvalReport {
    pub report: EvalReport,
    /// Fraction of examples predicted as the drawn target class.
    pub target_rate: f64,
    /// Examples whose removed coefficient exceeded the radius.
    pub radius_violations: usize,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn predict_attacked(
    net: &Network,
    ex: &LabeledExample,
    fs: Option<&FeatureSet>,
    spec: &AttackSpec,
    index: usize,
) -> Result<(usize, Option<(usize, bool)>)> {
    let attacked: Vec<f64>;
    let mut swap_info = None;
    let patches = match spec.kind {
        AttackKind::None => &ex.patches,
        AttackKind::OneStep { attack_lr } => {
            attacked = one_step_attack(net, &ex.patches, ex.label, attack_lr, spec.epsilon)?;
            &attacked
        }
        AttackKind::Pgd { steps, step_size } => {
            attacked = pgd_attack(net, &ex.patches, ex.label, spec.epsilon, steps, step_size)?;
            &attacked
        }
        AttackKind::FeatureSwap { seed } => {
            let fs = fs.ok_or_else(|| {
                Error::Config("feature-swap evaluation needs the feature set".into())
            })?;
            let mut rng = stream(seed, TAG_EVAL, index as u64);
            let swap = feature_swap_perturbation(ex, fs, spec.epsilon, &mut rng)?;
            swap_info = Some((swap.target, swap.within_radius));
            attacked = ex
                .patches
                .iter()
                .zip(&swap.delta)
                .map(|(x, d)| x + d)
                .collect();
            &attacked
        }
    };
    let scores = net.forward(patches)?;
    Ok((argmax_lowest(&scores), swap_info))
}

fn evaluate_inner(
    net: &Network,
    data: &Dataset,
    fs: Option<&FeatureSet>,
    spec: &AttackSpec,
) -> Result<SwapEvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    spec.validate()?;
    let preds: Result<Vec<_>> = data
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| predict_attacked(net, ex, fs, spec, i))
        .collect();
    let preds = preds?;

    let mut per_class_total = vec![0usize; net.k];
    let mut per_class_correct = vec![0usize; net.k];
    let mut target_hits = 0usize;
    let mut radius_violations = 0usize;
    for (ex, (pred, swap)) in data.examples.iter().zip(&preds) {
        per_class_total[ex.label] += 1;
        if *pred == ex.label {
            per_class_correct[ex.label] += 1;
        }
        if let Some((target, within)) = swap {
            if pred == target {
                target_hits += 1;
            }
            if !within {
                radius_violations += 1;
            }
        }
    }
    let n = data.len();
    let correct: usize = per_class_correct.iter().sum();
    Ok(SwapEvalReport {
        report: EvalReport {
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            per_class_total,
            per_class_correct,
        },
        target_rate: target_hits as f64 / n as f64,
        radius_violations,
    })
}

/// Fraction of examples still classified correctly under the attack.
pub fn evaluate(net: &Network, data: &Dataset, spec: &AttackSpec) -> Result<EvalReport> {
    Ok(evaluate_inner(net, data, None, spec)?.report)
}

/// As [`evaluate`] for the feature-swap attack, with target-hit bookkeeping.
pub fn evaluate_feature_swap(
    net: &Network,
    data: &Dataset,
    fs: &FeatureSet,
    epsilon: f64,
    seed: u64,
) -> Result<SwapEvalReport> {
    evaluate_inner(
        net,
        data,
        Some(fs),
        &AttackSpec {
            kind: AttackKind::FeatureSwap { seed },
            epsilon,
        },
    )
}

/// Accuracy on representatives keeping only one feature family.
pub fn feature_learning_accuracy(
    net: &Network,
    data: &Dataset,
    fs: &FeatureSet,
    keep: FeatureKind,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reps: Result<Vec<_>> = data
        .examples
        .par_iter()
        .map(|ex| make_representative(ex, fs, keep))
        .collect();
    let rep_data = Dataset {
        examples: reps?,
        seed: data.seed,
    };
    evaluate(net, &rep_data, &AttackSpec::none())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_feature_set, sample_example, DataConfig, Dataset};
    use crate::network::Activation;
    use crate::rng::{stream, TAG_INIT, TAG_TRAIN_DATA};

    fn noiseless() -> (DataConfig, FeatureSet) {
        let cfg = DataConfig {
            noise_std: 0.0,
            ..DataConfig::default()
        };
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        (cfg, fs)
    }

    #[test]
    fn clip_clamps_coordinatewise() {
        assert_eq!(clip_inf(&[2.0, -1.5, 0.3], 1.2), vec![1.2, -1.2, 0.3]);
        let inside = vec![0.3, -0.8, 0.0];
        assert_eq!(clip_inf(&inside, 1.0), inside);
        assert_eq!(clip_inf(&[5.0, -3.0], 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn clip_idempotent_and_contractive() {
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let once = clip_inf(&vals, 0.9);
        assert_eq!(clip_inf(&once, 0.9), once);
        for (a, b) in vals.iter().zip(&once) {
            assert!(b.abs() <= a.abs() + 1e-15);
            assert!(b.abs() <= 0.9);
        }
    }

    #[test]
    fn one_step_zero_weights_is_identity() {
        let net = Network::from_weights(2, 1, 6, Activation::default(), vec![0.0; 12]).unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        assert_eq!(one_step_attack(&net, &x, 0, 1e3, 1.2).unwrap(), x);
        assert_eq!(
            pgd_attack(&net, &x, 0, 1.2, 1, 1.2).unwrap(),
            x,
            "zero gradient leaves PGD at the clean input"
        );
    }

    #[test]
    fn one_step_zero_radius_is_identity() {
        let mut rng = stream(3, TAG_INIT, 0);
        let net = Network::random(2, 2, 6, 0.5, &mut rng).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        assert_eq!(one_step_attack(&net, &x, 1, 1e3, 0.0).unwrap(), x);
    }

    #[test]
    fn one_step_saturates_nonrobust_coordinate() {
        let (cfg, fs) = noiseless();
        let ex = sample_example(&cfg, &fs, &mut stream(1, TAG_TRAIN_DATA, 0)).unwrap();
        let net = Network::rank_one(&fs, 100.0, FeatureKind::NonRobust, Activation::default());
        let attacked = one_step_attack(&net, &ex.patches, ex.label, 1e3, 1.2).unwrap();
        let coord = fs.coordinate(FeatureKind::NonRobust, ex.label);
        for p in 1..cfg.patches {
            let v = attacked[p * cfg.d + coord];
            assert!((v - (1.0 - 1.2)).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn attacks_respect_radius() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let ex = sample_example(&cfg, &fs, &mut stream(2, TAG_TRAIN_DATA, 5)).unwrap();
        let mut rng = stream(4, TAG_INIT, 0);
        let net = Network::random(cfg.k, 8, cfg.d, 0.1, &mut rng).unwrap();
        for attacked in [
            one_step_attack(&net, &ex.patches, ex.label, 1e3, 1.2).unwrap(),
            pgd_attack(&net, &ex.patches, ex.label, 1.2, 20, 0.3).unwrap(),
        ] {
            let max_diff = attacked
                .iter()
                .zip(&ex.patches)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1.2 + 1e-12);
        }
    }

    #[test]
    fn pgd_never_reports_weaker_than_clean() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        for i in 0..8u64 {
            let ex = sample_example(&cfg, &fs, &mut stream(6, TAG_TRAIN_DATA, i)).unwrap();
            let mut rng = stream(i, TAG_INIT, 0);
            let net = Network::random(cfg.k, 4, cfg.d, 0.2, &mut rng).unwrap();
            let clean = margin_loss(&net, &ex.patches, ex.label).unwrap();
            let attacked = pgd_attack(&net, &ex.patches, ex.label, 1.2, 20, 0.3).unwrap();
            let adv = margin_loss(&net, &attacked, ex.label).unwrap();
            assert!(adv >= clean - 1e-12);
        }
    }

    #[test]
    fn pgd_flips_nonrobust_but_not_robust_rank_one() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let data = Dataset::sample(&cfg, &fs, 7, 300).unwrap();
        let spec = AttackSpec::pgd(1.2, 20, 0.3);

        let nonrobust = Network::rank_one(&fs, 100.0, FeatureKind::NonRobust, Activation::default());
        let rep = evaluate(&nonrobust, &data, &spec).unwrap();
        assert!(rep.accuracy <= 0.05, "non-robust net PGD acc {}", rep.accuracy);

        let robust = Network::rank_one(&fs, 3.0, FeatureKind::Robust, Activation::default());
        let rep = evaluate(&robust, &data, &spec).unwrap();
        assert!(rep.accuracy >= 0.95, "robust net PGD acc {}", rep.accuracy);
    }

    #[test]
    fn swap_is_model_free_and_deterministic() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let ex = sample_example(&cfg, &fs, &mut stream(9, TAG_TRAIN_DATA, 2)).unwrap();
        let a = feature_swap_perturbation(&ex, &fs, 1.2, &mut stream(5, TAG_EVAL, 0)).unwrap();
        let b = feature_swap_perturbation(&ex, &fs, 1.2, &mut stream(5, TAG_EVAL, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.within_radius);
        assert_ne!(a.target, ex.label);
        // robust patch untouched
        assert!(a.delta[..cfg.d].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn swap_needs_two_classes() {
        let cfg = DataConfig {
            k: 1,
            d: 4,
            patches: 2,
            robust_patches: 1,
            nonrobust_patches: 1,
            ..DataConfig::default()
        };
        let fs = build_feature_set(1, 4).unwrap();
        let ex = sample_example(&cfg, &fs, &mut stream(1, TAG_TRAIN_DATA, 0)).unwrap();
        assert!(feature_swap_perturbation(&ex, &fs, 1.2, &mut stream(0, TAG_EVAL, 0)).is_err());
    }

    #[test]
    fn swap_flags_radius_violation() {
        let cfg = DataConfig::default(); // nonrobust coeff 1.0
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let ex = sample_example(&cfg, &fs, &mut stream(9, TAG_TRAIN_DATA, 3)).unwrap();
        let swap = feature_swap_perturbation(&ex, &fs, 0.5, &mut stream(5, TAG_EVAL, 1)).unwrap();
        assert!(!swap.within_radius); // coeff 1.0 > radius 0.5
    }

    #[test]
    fn evaluate_ties_break_low() {
        // identical filters for both classes: every score ties, class 0 wins
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let data = Dataset::sample(&cfg, &fs, 3, 200).unwrap();
        let mut weights = vec![0.0; 2 * 100];
        weights[2] = 1.0; // w_{0,0} = v_0
        weights[100 + 2] = 1.0; // w_{1,0} = v_0 as well
        let net = Network::from_weights(2, 1, 100, Activation::default(), weights).unwrap();
        let rep = evaluate(&net, &data, &AttackSpec::none()).unwrap();
        let per_class = rep.per_class_accuracy();
        assert_eq!(per_class[0], 1.0);
        assert_eq!(per_class[1], 0.0);
        let n0 = rep.per_class_total[0];
        assert!((rep.accuracy - n0 as f64 / rep.n as f64).abs() < 1e-12);
    }

    #[test]
    fn evaluate_empty_dataset_errors() {
        let fs = build_feature_set(2, 10).unwrap();
        let net = Network::rank_one(&fs, 1.0, FeatureKind::Robust, Activation::default());
        let data = Dataset {
            examples: vec![],
            seed: 0,
        };
        assert!(matches!(
            evaluate(&net, &data, &AttackSpec::none()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn rank_one_nets_on_clean_and_swapped_data() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let data = Dataset::sample(&cfg, &fs, 11, 400).unwrap();
        let robust = Network::rank_one(&fs, 100.0, FeatureKind::Robust, Activation::default());
        let clean = evaluate(&robust, &data, &AttackSpec::none()).unwrap();
        assert!(clean.accuracy >= 0.999);
        let swap = evaluate_feature_swap(&robust, &data, &fs, 1.2, 17).unwrap();
        assert!(swap.report.accuracy >= 0.95);
        assert_eq!(swap.radius_violations, 0);

        let nonrobust = Network::rank_one(&fs, 100.0, FeatureKind::NonRobust, Activation::default());
        let swap = evaluate_feature_swap(&nonrobust, &data, &fs, 1.2, 17).unwrap();
        assert!(swap.report.accuracy <= 0.05);
        assert!(swap.target_rate >= 0.90);
    }

    #[test]
    fn feature_learning_accuracy_of_rank_one_nets() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let data = Dataset::sample(&cfg, &fs, 13, 400).unwrap();
        let nonrobust = Network::rank_one(&fs, 100.0, FeatureKind::NonRobust, Activation::default());
        let nr = feature_learning_accuracy(&nonrobust, &data, &fs, FeatureKind::NonRobust).unwrap();
        assert_eq!(nr.accuracy, 1.0);
        // keeping only robust signal starves a non-robust net down to noise
        let r = feature_learning_accuracy(&nonrobust, &data, &fs, FeatureKind::Robust).unwrap();
        assert!(r.accuracy < 0.8);

        let robust = Network::rank_one(&fs, 100.0, FeatureKind::Robust, Activation::default());
        let r = feature_learning_accuracy(&robust, &data, &fs, FeatureKind::Robust).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn fused_pgd_matches_generic_objective_path() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        for i in 0..6u64 {
            let ex = sample_example(&cfg, &fs, &mut stream(31, TAG_TRAIN_DATA, i)).unwrap();
            let mut rng = stream(i, TAG_INIT, 1);
            let net = Network::random(cfg.k, 5, cfg.d, 0.15, &mut rng).unwrap();
            let fused = pgd_attack(&net, &ex.patches, ex.label, 1.2, 10, 0.3).unwrap();
            let generic = pgd_attack_with_objective(
                &net,
                &ex.patches,
                ex.label,
                1.2,
                10,
                0.3,
                AttackObjective::Margin,
            )
            .unwrap();
            assert_eq!(fused, generic);
        }
    }

    #[test]
    fn gap_margin_objective_also_attacks() {
        let cfg = DataConfig::default();
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let ex = sample_example(&cfg, &fs, &mut stream(21, TAG_TRAIN_DATA, 0)).unwrap();
        let net = Network::rank_one(&fs, 100.0, FeatureKind::NonRobust, Activation::default());
        let attacked = pgd_attack_with_objective(
            &net,
            &ex.patches,
            ex.label,
            1.2,
            20,
            0.3,
            AttackObjective::GapMargin,
        )
        .unwrap();
        let scores = net.forward(&attacked).unwrap();
        assert_ne!(argmax_lowest(&scores), ex.label);
    }
}
