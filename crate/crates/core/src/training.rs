//! Full-batch standard and adversarial training.
//!
//! Standard training runs gradient descent on the mean cross-entropy over
//! the training set. Adversarial training regenerates, at every epoch, a
//! one-step clipped ascent example from the clean data under the current
//! network, then descends on the cross-entropy at the attacked batch.
//!
//! Gradients are means over the batch so the configured learning rates match
//! the empirical-expectation objective; the attack rate follows the same
//! convention, i.e. the per-example ascent step uses `attack_lr / N`.

use crate::attacks::{evaluate, feature_learning_accuracy, one_step_attack, AttackSpec};
use crate::features::{Dataset, FeatureSet};
use crate::linalg::dot;
use crate::network::{ce_loss, grad_weights_ce, Network};
use crate::{Error, FeatureKind, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    Adversarial,
}

/// PGD settings used for robust-accuracy logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdSettings {
    pub steps: usize,
    pub step_size: f64,
}

impl PgdSettings {
    /// The logging default: 20 steps of a quarter radius each.
    pub fn for_radius(epsilon: f64) -> Self {
        PgdSettings {
            steps: 20,
            step_size: epsilon / 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight learning rate.
    pub lr: f64,
    /// Attack learning rate (through the mean empirical loss).
    pub attack_lr: f64,
    /// Perturbation radius.
    pub epsilon: f64,
    pub epochs: usize,
    pub mode: TrainMode,
    /// Epoch stride for metric logging.
    pub eval_every: usize,
    /// PGD used for the logged robust accuracy.
    pub attack_eval: PgdSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            attack_lr: 1e3,
            epsilon: 1.2,
            epochs: 1000,
            mode: TrainMode::Standard,
            eval_every: 25,
            attack_eval: PgdSettings::for_radius(1.2),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval stride must be positive".into()));
        }
        if self.mode == TrainMode::Adversarial {
            if !(self.attack_lr > 0.0) {
                return Err(Error::Config(
                    "adversarial mode needs a positive attack rate".into(),
                ));
            }
            if !(self.epsilon > 0.0) {
                return Err(Error::Config(
                    "adversarial mode needs a positive radius".into(),
                ));
            }
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("radius must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One logged metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_ce: f64,
    pub std_acc: f64,
    pub rob_acc: f64,
    /// Per class: `max_r <w_{i,r}, u_i>`.
    pub corr_u: Vec<f64>,
    /// Per class: `max_r <w_{i,r}, v_i>`.
    pub corr_v: Vec<f64>,
    pub fl_acc_robust: f64,
    pub fl_acc_nonrobust: f64,
}

/// Metrics along one training run; one row per logged epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// First logged epoch whose robust accuracy exceeds `level`.
    pub fn first_epoch_rob_acc_above(&self, level: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.rob_acc > level)
            .map(|r| r.epoch)
    }

    pub fn csv_header(k: usize) -> String {
        let mut cols = vec![
            "epoch".to_string(),
            "train_ce".into(),
            "std_acc".into(),
            "rob_acc".into(),
        ];
        for i in 0..k {
            cols.push(format!("corr_u_{}", i + 1));
            cols.push(format!("corr_v_{}", i + 1));
        }
        cols.push("fl_acc_R".into());
        cols.push("fl_acc_NR".into());
        cols.join(",")
    }

    pub fn to_csv(&self, k: usize) -> String {
        let mut out = Self::csv_header(k);
        out.push('\n');
        for row in &self.rows {
            let mut cols = vec![
                row.epoch.to_string(),
                row.train_ce.to_string(),
                row.std_acc.to_string(),
                row.rob_acc.to_string(),
            ];
            for i in 0..k {
                cols.push(row.corr_u[i].to_string());
                cols.push(row.corr_v[i].to_string());
            }
            cols.push(row.fl_acc_robust.to_string());
            cols.push(row.fl_acc_nonrobust.to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<(TrainingTrace, usize)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty trace file".into()))?;
        let ncols = header.split(',').count();
        if ncols < 6 || (ncols - 6) % 2 != 0 {
            return Err(Error::Config(format!("unexpected trace header: {header}")));
        }
        let k = (ncols - 6) / 2;
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != ncols {
                return Err(Error::Config(format!("ragged trace row: {line}")));
            }
            let f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad float {s} in trace")))
            };
            let mut corr_u = Vec::with_capacity(k);
            let mut corr_v = Vec::with_capacity(k);
            for i in 0..k {
                corr_u.push(f(vals[4 + 2 * i])?);
                corr_v.push(f(vals[5 + 2 * i])?);
            }
            rows.push(TraceRow {
                epoch: vals[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad epoch {}", vals[0])))?,
                train_ce: f(vals[1])?,
                std_acc: f(vals[2])?,
                rob_acc: f(vals[3])?,
                corr_u,
                corr_v,
                fl_acc_robust: f(vals[ncols - 2])?,
                fl_acc_nonrobust: f(vals[ncols - 1])?,
            });
        }
        Ok((TrainingTrace { rows }, k))
    }
}

fn batch_of(data: &Dataset) -> Vec<(&[f64], usize)> {
    data.examples
        .iter()
        .map(|e| (e.patches.as_slice(), e.label))
        .collect()
}

fn apply_gradient(net: &Network, grad: &crate::network::Gradients, lr: f64) -> Result<Network> {
    if !grad.all_finite() {
        return Err(Error::NonFinite("weight gradient".into()));
    }
    let mut next = net.clone();
    for (w, g) in next.weights_mut().iter_mut().zip(grad.values()) {
        *w -= lr * g;
    }
    if !next.all_finite() {
        return Err(Error::NonFinite("weights after update".into()));
    }
    Ok(next)
}

/// One full-batch gradient-descent epoch on the clean cross-entropy.
pub fn standard_step(net: &Network, data: &Dataset, lr: f64) -> Result<Network> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = batch_of(data);
    let grad = grad_weights_ce(net, &batch)?;
    apply_gradient(net, &grad, lr)
}

/// Build the per-example one-step attacked batch under the current network.
/// The per-example ascent rate is `attack_lr / N` (mean-loss convention).
pub fn attack_batch(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let rate = cfg.attack_lr / data.len() as f64;
    data.examples
        .par_iter()
        .map(|ex| one_step_attack(net, &ex.patches, ex.label, rate, cfg.epsilon))
        .collect()
}

/// One adversarial epoch: regenerate attacked examples from the clean data
/// under the current network, then descend on the attacked batch. Returns
/// the updated network and the attacked patches.
pub fn adversarial_step(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<Vec<f64>>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let attacked = attack_batch(net, data, cfg)?;
    let batch: Vec<(&[f64], usize)> = attacked
        .iter()
        .zip(&data.examples)
        .map(|(p, e)| (p.as_slice(), e.label))
        .collect();
    let grad = grad_weights_ce(net, &batch)?;
    Ok((apply_gradient(net, &grad, cfg.lr)?, attacked))
}

/// Mean cross-entropy over a dataset.
pub fn mean_ce(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: Result<Vec<f64>> = data
        .examples
        .par_iter()
        .map(|e| ce_loss(net, &e.patches, e.label))
        .collect();
    Ok(total?.iter().sum::<f64>() / data.len() as f64)
}

pub(crate) fn max_diag_correlations(net: &Network, fs: &FeatureSet) -> (Vec<f64>, Vec<f64>) {
    let mut corr_u = Vec::with_capacity(net.k);
    let mut corr_v = Vec::with_capacity(net.k);
    for i in 0..net.k {
        let u = fs.robust(i);
        let v = fs.nonrobust(i);
        let mut best_u = f64::NEG_INFINITY;
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..net.m {
            let w = net.weight(i, r);
            best_u = best_u.max(dot(w, u));
            best_v = best_v.max(dot(w, v));
        }
        corr_u.push(best_u);
        corr_v.push(best_v);
    }
    (corr_u, corr_v)
}

fn metrics_row(
    net: &Network,
    epoch: usize,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    fs: &FeatureSet,
) -> Result<TraceRow> {
    let train_ce = mean_ce(net, train)?;
    if train_ce > 1e3 {
        return Err(Error::NonFinite(format!(
            "training diverged: CE {train_ce} at epoch {epoch}"
        )));
    }
    let std_acc = evaluate(net, test, &AttackSpec::none())?.accuracy;
    let rob_acc = evaluate(
        net,
        test,
        &AttackSpec::pgd(cfg.epsilon, cfg.attack_eval.steps, cfg.attack_eval.step_size),
    )?
    .accuracy;
    let (corr_u, corr_v) = max_diag_correlations(net, fs);
    let fl_acc_robust = feature_learning_accuracy(net, test, fs, FeatureKind::Robust)?.accuracy;
    let fl_acc_nonrobust =
        feature_learning_accuracy(net, test, fs, FeatureKind::NonRobust)?.accuracy;
    Ok(TraceRow {
        epoch,
        train_ce,
        std_acc,
        rob_acc,
        corr_u,
        corr_v,
        fl_acc_robust,
        fl_acc_nonrobust,
    })
}

/// Run the configured training mode for `cfg.epochs` epochs, logging metrics
/// at epoch 0, every `cfg.eval_every` epochs, and the final epoch.
pub fn train(
    net0: &Network,
    data: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    fs: &FeatureSet,
) -> Result<(Network, TrainingTrace)> {
    cfg.validate()?;
    let mut net = net0.clone();
    let mut trace = TrainingTrace::default();
    trace
        .rows
        .push(metrics_row(&net, 0, data, test, cfg, fs)?);
    for epoch in 1..=cfg.epochs {
        net = match cfg.mode {
            TrainMode::Standard => standard_step(&net, data, cfg.lr)?,
            TrainMode::Adversarial => adversarial_step(&net, data, cfg)?.0,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            trace
                .rows
                .push(metrics_row(&net, epoch, data, test, cfg, fs)?);
        }
    }
    Ok((net, trace))
}
