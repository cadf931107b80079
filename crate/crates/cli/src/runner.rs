//! Per-seed experiment execution and cross-seed summary emission.

use crate::config::ExperimentConfig;
use anyhow::Context;
use patchlab::attacks::{
    evaluate, evaluate_feature_swap, feature_learning_accuracy, AttackSpec, EvalReport,
    SwapEvalReport,
};
use patchlab::features::{build_feature_set, CoeffDist, Dataset};
use patchlab::jsonfmt::to_string_17;
use patchlab::network::Network;
use patchlab::rng::{derive, stream, TAG_EVAL, TAG_INIT, TAG_TEST_DATA, TAG_TRAIN_DATA};
use patchlab::training::{train, TrainMode, TrainingTrace};
use patchlab::FeatureKind;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct FinalEval {
    pub seed: u64,
    pub epoch: usize,
    pub train_ce: f64,
    pub clean: EvalReport,
    pub pgd: EvalReport,
    pub feature_swap: SwapEvalReport,
    pub fl_acc_robust: f64,
    pub fl_acc_nonrobust: f64,
}

#[derive(Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_train_ce: f64,
    pub final_std_acc: f64,
    pub final_rob_acc: f64,
    pub final_fl_acc_robust: f64,
    pub final_fl_acc_nonrobust: f64,
    pub final_corr_u: Vec<f64>,
    pub final_corr_v: Vec<f64>,
    /// First logged epoch with `corr_v_i >= threshold / nonrobust_coeff`,
    /// per class.
    pub v_crossing_epoch: Vec<Option<usize>>,
    /// Same for `corr_u_i >= threshold / robust_coeff`.
    pub u_crossing_epoch: Vec<Option<usize>>,
    /// First logged epoch with robust accuracy above one half.
    pub rob_acc_half_epoch: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    fn over(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
        let n = values.clone().count().max(1) as f64;
        Aggregate {
            mean: values.clone().sum::<f64>() / n,
            min: values.clone().fold(f64::INFINITY, f64::min),
            max: values.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ExperimentSummary {
    pub mode: String,
    pub seeds: Vec<SeedSummary>,
    pub std_acc: Aggregate,
    pub rob_acc: Aggregate,
    pub train_ce: Aggregate,
    pub fl_acc_robust: Aggregate,
    pub fl_acc_nonrobust: Aggregate,
}

pub struct SeedArtifacts {
    pub seed: u64,
    pub network: Network,
    pub trace: TrainingTrace,
    pub eval: FinalEval,
}

fn coeff_scale(dist: &CoeffDist) -> f64 {
    dist.mean()
}

/// Run one seed end to end without touching the filesystem.
pub fn run_seed(cfg: &ExperimentConfig, mode: TrainMode, seed: u64) -> anyhow::Result<SeedArtifacts> {
    let fs = build_feature_set(cfg.data.k, cfg.data.d)?;
    let train_set = Dataset::sample(&cfg.data, &fs, derive(seed, TAG_TRAIN_DATA), cfg.train_n)?;
    let test_set = Dataset::sample(&cfg.data, &fs, derive(seed, TAG_TEST_DATA), cfg.test_n)?;
    let net0 = Network::random_with_activation(
        cfg.data.k,
        cfg.network.m,
        cfg.data.d,
        cfg.network.weight_std,
        cfg.network.activation()?,
        &mut stream(seed, TAG_INIT, 0),
    )?;
    let tc = cfg.train.train_config(mode);
    let (net, trace) = train(&net0, &train_set, &test_set, &tc, &fs)?;

    let last = trace.last().context("trace has no rows")?;
    let eval = FinalEval {
        seed,
        epoch: last.epoch,
        train_ce: last.train_ce,
        clean: evaluate(&net, &test_set, &AttackSpec::none())?,
        pgd: evaluate(
            &net,
            &test_set,
            &AttackSpec::pgd(tc.epsilon, tc.attack_eval.steps, tc.attack_eval.step_size),
        )?,
        feature_swap: evaluate_feature_swap(
            &net,
            &test_set,
            &fs,
            tc.epsilon,
            derive(seed, TAG_EVAL),
        )?,
        fl_acc_robust: feature_learning_accuracy(&net, &test_set, &fs, FeatureKind::Robust)?
            .accuracy,
        fl_acc_nonrobust: feature_learning_accuracy(&net, &test_set, &fs, FeatureKind::NonRobust)?
            .accuracy,
    };
    Ok(SeedArtifacts {
        seed,
        network: net,
        trace,
        eval,
    })
}

fn seed_summary(cfg: &ExperimentConfig, art: &SeedArtifacts) -> SeedSummary {
    let last = art.trace.last().expect("nonempty trace");
    let k = cfg.data.k;
    let v_level = cfg.network.threshold / coeff_scale(&cfg.data.nonrobust_coeff);
    let u_level = cfg.network.threshold / coeff_scale(&cfg.data.robust_coeff);
    let crossing = |get: &dyn Fn(&patchlab::training::TraceRow, usize) -> f64, level: f64| {
        (0..k)
            .map(|i| {
                art.trace
                    .rows
                    .iter()
                    .find(|row| get(row, i) >= level)
                    .map(|row| row.epoch)
            })
            .collect::<Vec<_>>()
    };
    SeedSummary {
        seed: art.seed,
        final_train_ce: last.train_ce,
        final_std_acc: last.std_acc,
        final_rob_acc: last.rob_acc,
        final_fl_acc_robust: last.fl_acc_robust,
        final_fl_acc_nonrobust: last.fl_acc_nonrobust,
        final_corr_u: last.corr_u.clone(),
        final_corr_v: last.corr_v.clone(),
        v_crossing_epoch: crossing(&|row, i| row.corr_v[i], v_level),
        u_crossing_epoch: crossing(&|row, i| row.corr_u[i], u_level),
        rob_acc_half_epoch: art.trace.first_epoch_rob_acc_above(0.5),
    }
}

pub fn write_seed_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    art: &SeedArtifacts,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.csv"), art.trace.to_csv(cfg.data.k))?;
    fs::write(dir.join("trace.json"), to_string_17(&art.trace)?)?;
    fs::write(dir.join("checkpoint.json"), art.network.to_json()?)?;
    fs::write(dir.join("eval.json"), to_string_17(&art.eval)?)?;
    Ok(())
}

/// Run every configured seed, write per-seed artifacts plus the cross-seed
/// summary, and return the summary.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    quiet: bool,
) -> anyhow::Result<ExperimentSummary> {
    cfg.validate()?;
    let mode_name = match mode {
        TrainMode::Standard => "std",
        TrainMode::Adversarial => "adv",
    };
    let out = cfg.output_dir.join(mode_name);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let art = run_seed(cfg, mode, seed)?;
        write_seed_artifacts(&out.join(format!("seed_{seed}")), cfg, &art)?;
        let summary = seed_summary(cfg, &art);
        if !quiet {
            println!(
                "[{mode_name}] seed {seed}: std_acc={:.4} rob_acc={:.4} fl_R={:.4} fl_NR={:.4} ce={:.3e}",
                summary.final_std_acc,
                summary.final_rob_acc,
                summary.final_fl_acc_robust,
                summary.final_fl_acc_nonrobust,
                summary.final_train_ce
            );
        }
        seeds.push(summary);
    }

    let summary = ExperimentSummary {
        mode: mode_name.to_string(),
        std_acc: Aggregate::over(seeds.iter().map(|s| s.final_std_acc)),
        rob_acc: Aggregate::over(seeds.iter().map(|s| s.final_rob_acc)),
        train_ce: Aggregate::over(seeds.iter().map(|s| s.final_train_ce)),
        fl_acc_robust: Aggregate::over(seeds.iter().map(|s| s.final_fl_acc_robust)),
        fl_acc_nonrobust: Aggregate::over(seeds.iter().map(|s| s.final_fl_acc_nonrobust)),
        seeds,
    };
    fs::write(out.join("summary.json"), to_string_17(&summary)?)?;
    Ok(summary)
}
