//! Verification subcommands: the rank-one constructor checks, the gradient
//! check, and the simulator-vs-oracle comparisons.

use crate::config::ExperimentConfig;
use anyhow::Context;
use patchlab::attacks::{evaluate, evaluate_feature_swap, AttackSpec};
use patchlab::diagnostics::{
    run_lockstep, run_oracle, LockstepResult, OracleConfig, OracleState,
};
use patchlab::features::{build_feature_set, CoeffDist, DataConfig, Dataset};
use patchlab::jsonfmt::to_string_17;
use patchlab::network::Network;
use patchlab::rng::{derive, stream, TAG_EVAL, TAG_INIT, TAG_TEST_DATA};
use patchlab::training::{mean_ce, TrainMode};
use patchlab::FeatureKind;
use serde::Serialize;
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct RankOneEval {
    pub scale: f64,
    pub train_ce: f64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub swap_acc: f64,
    pub swap_target_rate: f64,
}

#[derive(Debug, Serialize)]
pub struct PropsReport {
    pub nonrobust: RankOneEval,
    pub robust: RankOneEval,
    pub assertions: Vec<(String, bool)>,
    pub pass: bool,
}

fn eval_rank_one(
    cfg: &ExperimentConfig,
    kind: FeatureKind,
    scale: f64,
    data: &Dataset,
    seed: u64,
) -> anyhow::Result<RankOneEval> {
    let fs = build_feature_set(cfg.data.k, cfg.data.d)?;
    let net = Network::rank_one(&fs, scale, kind, cfg.network.activation()?);
    let eps = cfg.train.epsilon;
    let pgd = AttackSpec::pgd(
        eps,
        cfg.train.pgd_steps,
        cfg.train.pgd_step_size.unwrap_or(eps / 4.0),
    );
    let swap = evaluate_feature_swap(&net, data, &fs, eps, derive(seed, TAG_EVAL))?;
    Ok(RankOneEval {
        scale,
        train_ce: mean_ce(&net, data)?,
        clean_acc: evaluate(&net, data, &AttackSpec::none())?.accuracy,
        pgd_acc: evaluate(&net, data, &pgd)?.accuracy,
        swap_acc: swap.report.accuracy,
        swap_target_rate: swap.target_rate,
    })
}

/// Evaluate both hand-crafted rank-one networks on a fresh dataset.
pub fn props_check(cfg: &ExperimentConfig, scale: f64, seed: u64) -> anyhow::Result<PropsReport> {
    anyhow::ensure!(scale > 0.0, "scale must be positive");
    cfg.validate()?;
    let fs = build_feature_set(cfg.data.k, cfg.data.d)?;
    let data = Dataset::sample(&cfg.data, &fs, derive(seed, TAG_TEST_DATA), cfg.test_n)?;
    let nonrobust = eval_rank_one(cfg, FeatureKind::NonRobust, scale, &data, seed)?;
    let robust = eval_rank_one(cfg, FeatureKind::Robust, scale, &data, seed)?;

    let assertions = vec![
        ("nonrobust train_ce <= 1e-6".into(), nonrobust.train_ce <= 1e-6),
        ("nonrobust clean_acc = 1.0".into(), nonrobust.clean_acc == 1.0),
        ("nonrobust pgd_acc <= 0.05".into(), nonrobust.pgd_acc <= 0.05),
        ("robust clean_acc >= 0.95".into(), robust.clean_acc >= 0.95),
        ("robust pgd_acc >= 0.95".into(), robust.pgd_acc >= 0.95),
    ];
    let pass = assertions.iter().all(|(_, ok)| *ok);
    Ok(PropsReport {
        nonrobust,
        robust,
        assertions,
        pass,
    })
}

#[derive(Debug, Serialize)]
pub struct LockstepVerdict {
    pub mode: String,
    pub epochs: usize,
    pub max_divergence: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct CrossingVerdict {
    pub seed: u64,
    /// Non-robust correlation crossed its activation knee strictly before
    /// the robust one, for every class.
    pub nonrobust_first: bool,
}

#[derive(Debug, Serialize)]
pub struct OracleCompareReport {
    pub lockstep: Vec<LockstepVerdict>,
    pub noisy_crossings: Vec<CrossingVerdict>,
    pub adversarial_final_robust_dominates: bool,
    pub pass: bool,
}

fn constant_coeff(dist: &CoeffDist) -> anyhow::Result<f64> {
    match dist {
        CoeffDist::Constant { value } => Ok(*value),
        _ => anyhow::bail!("oracle comparison needs constant coefficients"),
    }
}

fn write_lockstep_csv(path: &Path, res: &LockstepResult) -> anyhow::Result<()> {
    let mut out = String::from("epoch,sim_max_a,sim_max_b,oracle_max_a,oracle_max_b,diff_a,diff_b\n");
    for ((snap, state), div) in res
        .sim
        .iter()
        .zip(&res.oracle)
        .zip(&res.report.per_epoch)
    {
        let max = |v: &[f64]| v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            snap.epoch,
            max(&snap.diag_robust),
            max(&snap.diag_nonrobust),
            max(&state.diag_robust),
            max(&state.diag_nonrobust),
            div.robust_diff,
            div.nonrobust_diff
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Lockstep equivalence, noisy crossing order, and the adversarial oracle's
/// terminal verdict. Writes divergence CSVs into `out_dir`.
pub fn oracle_compare(
    cfg: &ExperimentConfig,
    lockstep_epochs: usize,
    out_dir: &Path,
    quiet: bool,
) -> anyhow::Result<OracleCompareReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let noiseless = DataConfig {
        noise_std: 0.0,
        ..cfg.data.clone()
    };
    let act = cfg.network.activation()?;
    let attack_rate = cfg.train.attack_lr / cfg.train_n as f64;

    // (a) lockstep equivalence in both modes
    let mut lockstep = Vec::new();
    for (mode, name) in [
        (TrainMode::Standard, "std"),
        (TrainMode::Adversarial, "adv"),
    ] {
        let res = run_lockstep(
            &noiseless,
            cfg.network.m,
            act,
            mode,
            cfg.train.lr,
            attack_rate,
            cfg.train.epsilon,
            lockstep_epochs,
            cfg.network.weight_std,
            &mut stream(cfg.seeds[0], TAG_INIT, 1),
        )?;
        write_lockstep_csv(&out_dir.join(format!("lockstep_{name}.csv")), &res)?;
        let verdict = LockstepVerdict {
            mode: name.to_string(),
            epochs: lockstep_epochs,
            max_divergence: res.report.max_diff(),
            pass: res.report.max_diff() <= 1e-6,
        };
        if !quiet {
            println!(
                "[oracle-compare] lockstep {name}: max divergence {:.3e} over {lockstep_epochs} epochs",
                verdict.max_divergence
            );
        }
        lockstep.push(verdict);
    }

    // (b) noisy standard runs: the non-robust correlation must reach its
    // knee strictly before the robust one on every seed.
    let mut noisy_crossings = Vec::new();
    let v_level = cfg.network.threshold / constant_coeff(&cfg.data.nonrobust_coeff)?;
    let u_level = cfg.network.threshold / constant_coeff(&cfg.data.robust_coeff)?;
    for &seed in &cfg.seeds {
        let short = ExperimentConfig {
            train: crate::config::TrainSection {
                epochs: lockstep_epochs.max(300),
                eval_every: 5,
                ..cfg.train.clone()
            },
            seeds: vec![seed],
            ..cfg.clone()
        };
        let art = crate::runner::run_seed(&short, TrainMode::Standard, seed)?;
        let first_at = |get: &dyn Fn(&patchlab::training::TraceRow, usize) -> f64,
                        level: f64,
                        i: usize| {
            art.trace
                .rows
                .iter()
                .find(|row| get(row, i) >= level)
                .map(|row| row.epoch)
        };
        let mut ok = true;
        for i in 0..cfg.data.k {
            let v_at = first_at(&|r, i| r.corr_v[i], v_level, i);
            let u_at = first_at(&|r, i| r.corr_u[i], u_level, i);
            ok &= match (v_at, u_at) {
                (Some(v), Some(u)) => v < u,
                (Some(_), None) => true,
                _ => false,
            };
        }
        if !quiet {
            println!("[oracle-compare] noisy std seed {seed}: nonrobust-first = {ok}");
        }
        noisy_crossings.push(CrossingVerdict {
            seed,
            nonrobust_first: ok,
        });
    }

    // (c) long adversarial oracle run: robust coefficients end on top.
    // Seed from the diagonal correlations of a fresh Gaussian network.
    let oracle_cfg = OracleConfig {
        k: cfg.data.k,
        m: cfg.network.m,
        lr: cfg.train.lr,
        attack_lr: attack_rate,
        epsilon: cfg.train.epsilon,
        robust_coeff: constant_coeff(&cfg.data.robust_coeff)?,
        nonrobust_coeff: constant_coeff(&cfg.data.nonrobust_coeff)?,
        robust_patches: cfg.data.robust_patches,
        nonrobust_patches: cfg.data.nonrobust_patches,
        act,
    };
    let fs = build_feature_set(cfg.data.k, cfg.data.d)?;
    let draw = Network::random_with_activation(
        cfg.data.k,
        cfg.network.m,
        cfg.data.d,
        cfg.network.weight_std,
        act,
        &mut stream(cfg.seeds[0], TAG_INIT, 2),
    )?;
    let dec = patchlab::diagnostics::decompose(&draw, &fs);
    let init = OracleState::new(
        oracle_cfg,
        TrainMode::Adversarial,
        dec.diag_robust,
        dec.diag_nonrobust,
    )?;
    let traj = run_oracle(&init, cfg.train.epochs)?;
    let (max_a, max_b) = traj.last().context("nonempty trajectory")?.max_diag();
    let adversarial_final_robust_dominates = max_a
        .iter()
        .zip(&max_b)
        .all(|(a, b)| a > b);
    if !quiet {
        println!(
            "[oracle-compare] adversarial oracle final: max_a={max_a:?} max_b={max_b:?} robust-dominates={adversarial_final_robust_dominates}"
        );
    }
    let mut csv = String::from("epoch,max_a,max_b\n");
    for state in &traj {
        let (a, b) = state.max_diag();
        let amax = a.iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        let bmax = b.iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        csv.push_str(&format!("{},{},{}\n", state.step, amax, bmax));
    }
    fs::write(out_dir.join("oracle_adv_trajectory.csv"), csv)?;

    let pass = lockstep.iter().all(|v| v.pass)
        && noisy_crossings.iter().all(|c| c.nonrobust_first)
        && adversarial_final_robust_dominates;
    let report = OracleCompareReport {
        lockstep,
        noisy_crossings,
        adversarial_final_robust_dominates,
        pass,
    };
    fs::write(
        out_dir.join("oracle_compare.json"),
        to_string_17(&report)?,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn props_check_rejects_nonpositive_scale() {
        let cfg = ExperimentConfig::default();
        assert!(props_check(&cfg, 0.0, 1).is_err());
    }
}
