//! Theory-facing instrumentation.
//!
//! `decompose` projects every filter onto the feature dictionary, splitting
//! it into diagonal coefficients (own-class robust / non-robust), non-diagonal
//! coefficients (other classes' features) and an off-dictionary residual.
//!
//! The oracle propagates the diagonal coefficient recursions directly: the
//! standard-mode step applies the clean feature-learning iteration, the
//! adversarial-mode step first forms the clipped tilde coefficients of the
//! one-step attacked patches and then applies the descent update restricted
//! to diagonal terms. On noiseless, class-balanced data with identical
//! examples per class and a network whose filters carry only diagonal
//! components, the full simulator reproduces these recursions exactly;
//! `run_lockstep` wires that comparison up.

use crate::features::{DataConfig, Dataset, FeatureSet, LabeledExample, PatchRole};
use crate::linalg::dot;
use crate::network::{softmax, Activation, Network};
use crate::training::{adversarial_step, standard_step, TrainConfig, TrainMode};
use crate::{Error, FeatureKind, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

/// Exact projection of every filter onto the feature dictionary.
#[derive(Debug, Clone)]
pub struct WeightDecomposition {
    pub k: usize,
    pub m: usize,
    /// `<w_{i,r}, u_i>`, layout `i * m + r`.
    pub diag_robust: Vec<f64>,
    /// `<w_{i,r}, v_i>`.
    pub diag_nonrobust: Vec<f64>,
    /// `<w_{i,r}, u_j>` for `j != i`, layout `(i * m + r) * (k - 1) + slot`
    /// with `slot = j` for `j < i` and `j - 1` otherwise.
    pub cross_robust: Vec<f64>,
    /// `<w_{i,r}, v_j>` for `j != i`, same layout.
    pub cross_nonrobust: Vec<f64>,
    /// L2 norm of the component orthogonal to the whole dictionary.
    pub residual_norms: Vec<f64>,
}

impl WeightDecomposition {
    pub fn diag_robust(&self, i: usize, r: usize) -> f64 {
        self.diag_robust[i * self.m + r]
    }

    pub fn diag_nonrobust(&self, i: usize, r: usize) -> f64 {
        self.diag_nonrobust[i * self.m + r]
    }

    fn cross_slot(&self, i: usize, j: usize) -> usize {
        if j < i {
            j
        } else {
            j - 1
        }
    }

    pub fn cross_robust(&self, i: usize, r: usize, j: usize) -> f64 {
        self.cross_robust[(i * self.m + r) * (self.k - 1) + self.cross_slot(i, j)]
    }

    pub fn cross_nonrobust(&self, i: usize, r: usize, j: usize) -> f64 {
        self.cross_nonrobust[(i * self.m + r) * (self.k - 1) + self.cross_slot(i, j)]
    }

    pub fn residual_norm(&self, i: usize, r: usize) -> f64 {
        self.residual_norms[i * self.m + r]
    }

    /// Per class `max_r` of the diagonal coefficients.
    pub fn max_diag(&self) -> (Vec<f64>, Vec<f64>) {
        let per_class = |vals: &[f64]| {
            (0..self.k)
                .map(|i| {
                    vals[i * self.m..(i + 1) * self.m]
                        .iter()
                        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                })
                .collect()
        };
        (per_class(&self.diag_robust), per_class(&self.diag_nonrobust))
    }
}

/// Project every filter onto the orthonormal dictionary.
pub fn decompose(net: &Network, fs: &FeatureSet) -> WeightDecomposition {
    let (k, m, d) = (net.k, net.m, net.d);
    let mut out = WeightDecomposition {
        k,
        m,
        diag_robust: vec![0.0; k * m],
        diag_nonrobust: vec![0.0; k * m],
        cross_robust: vec![0.0; k * m * (k - 1).max(0)],
        cross_nonrobust: vec![0.0; k * m * (k - 1)],
        residual_norms: vec![0.0; k * m],
    };
    for i in 0..k {
        for r in 0..m {
            let w = net.weight(i, r);
            let mut reconstructed = vec![0.0; d];
            for j in 0..k {
                let cu = dot(w, fs.robust(j));
                let cv = dot(w, fs.nonrobust(j));
                for (out_c, (fu, fv)) in reconstructed
                    .iter_mut()
                    .zip(fs.robust(j).iter().zip(fs.nonrobust(j)))
                {
                    *out_c += cu * fu + cv * fv;
                }
                if j == i {
                    out.diag_robust[i * m + r] = cu;
                    out.diag_nonrobust[i * m + r] = cv;
                } else {
                    let slot = if j < i { j } else { j - 1 };
                    out.cross_robust[(i * m + r) * (k - 1) + slot] = cu;
                    out.cross_nonrobust[(i * m + r) * (k - 1) + slot] = cv;
                }
            }
            let mut residual_sq = 0.0;
            for (wc, rc) in w.iter().zip(&reconstructed) {
                let diff = wc - rc;
                residual_sq += diff * diff;
            }
            out.residual_norms[i * m + r] = residual_sq.sqrt();
        }
    }
    out
}

/// Constant-coefficient, noiseless data parameters driving the recursions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleConfig {
    pub k: usize,
    pub m: usize,
    /// Weight learning rate.
    pub lr: f64,
    /// Per-example attack rate entering the tilde coefficients.
    pub attack_lr: f64,
    pub epsilon: f64,
    pub robust_coeff: f64,
    pub nonrobust_coeff: f64,
    pub robust_patches: usize,
    pub nonrobust_patches: usize,
    pub act: Activation,
}

/// Diagonal coefficient state of the recursions at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleState {
    pub config: OracleConfig,
    pub mode: TrainMode,
    pub step: usize,
    /// Robust diagonal coefficients, layout `i * m + r`.
    pub diag_robust: Vec<f64>,
    /// Non-robust diagonal coefficients.
    pub diag_nonrobust: Vec<f64>,
}

impl OracleState {
    pub fn new(
        config: OracleConfig,
        mode: TrainMode,
        diag_robust: Vec<f64>,
        diag_nonrobust: Vec<f64>,
    ) -> Result<Self> {
        if diag_robust.len() != config.k * config.m || diag_nonrobust.len() != config.k * config.m
        {
            return Err(Error::Shape(format!(
                "oracle state needs k*m = {} coefficients",
                config.k * config.m
            )));
        }
        Ok(OracleState {
            config,
            mode,
            step: 0,
            diag_robust,
            diag_nonrobust,
        })
    }

    pub fn max_diag(&self) -> (Vec<f64>, Vec<f64>) {
        let per_class = |vals: &[f64]| {
            (0..self.config.k)
                .map(|i| {
                    vals[i * self.config.m..(i + 1) * self.config.m]
                        .iter()
                        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                })
                .collect()
        };
        (
            per_class(&self.diag_robust),
            per_class(&self.diag_nonrobust),
        )
    }

    fn check_finite(&self) -> Result<()> {
        if self
            .diag_robust
            .iter()
            .chain(&self.diag_nonrobust)
            .all(|x| x.is_finite())
        {
            Ok(())
        } else {
            Err(Error::NonFinite("oracle coefficients".into()))
        }
    }

    /// Class logit from oracle-internal outputs: the own-class score comes
    /// from the diagonal coefficients, every other class scores zero.
    fn logit_from_score(&self, score: f64) -> f64 {
        let mut scores = vec![0.0; self.config.k];
        scores[0] = score;
        softmax(&scores)[0]
    }
}

/// Clean-data diagonal iteration, one step.
pub fn oracle_step_standard(state: &OracleState) -> Result<OracleState> {
    state.check_finite()?;
    let c = &state.config;
    let act = &c.act;
    let mut next = state.clone();
    for i in 0..c.k {
        let row = i * c.m..(i + 1) * c.m;
        let a = &state.diag_robust[row.clone()];
        let b = &state.diag_nonrobust[row.clone()];
        let score: f64 = (0..c.m)
            .map(|r| {
                c.robust_patches as f64 * act.srelu(c.robust_coeff * a[r])
                    + c.nonrobust_patches as f64 * act.srelu(c.nonrobust_coeff * b[r])
            })
            .sum();
        let residual = 1.0 - state.logit_from_score(score);
        let scale = c.lr / c.k as f64;
        for r in 0..c.m {
            next.diag_robust[i * c.m + r] += scale
                * residual
                * c.robust_patches as f64
                * act.srelu_prime(c.robust_coeff * a[r])
                * c.robust_coeff;
            next.diag_nonrobust[i * c.m + r] += scale
                * residual
                * c.nonrobust_patches as f64
                * act.srelu_prime(c.nonrobust_coeff * b[r])
                * c.nonrobust_coeff;
        }
    }
    next.step += 1;
    next.check_finite()?;
    Ok(next)
}

/// The clipped feature coordinates of a one-step attacked patch pair,
/// per class: (robust-patch u, robust-patch v, non-robust-patch u,
/// non-robust-patch v).
pub fn adversarial_tilde_coeffs(state: &OracleState, class: usize) -> (f64, f64, f64, f64) {
    let c = &state.config;
    let act = &c.act;
    let row = class * c.m..(class + 1) * c.m;
    let a = &state.diag_robust[row.clone()];
    let b = &state.diag_nonrobust[row];
    let mut sum_ra = 0.0; // srelu'(alpha A_s) A_s
    let mut sum_rb = 0.0; // srelu'(alpha A_s) B_s
    let mut sum_na = 0.0; // srelu'(beta B_s) A_s
    let mut sum_nb = 0.0; // srelu'(beta B_s) B_s
    for s in 0..c.m {
        let slope_r = act.srelu_prime(c.robust_coeff * a[s]);
        let slope_n = act.srelu_prime(c.nonrobust_coeff * b[s]);
        sum_ra += slope_r * a[s];
        sum_rb += slope_r * b[s];
        sum_na += slope_n * a[s];
        sum_nb += slope_n * b[s];
    }
    let clip = |z: f64| z.clamp(-c.epsilon, c.epsilon);
    (
        c.robust_coeff + clip(-c.attack_lr * sum_ra),
        clip(-c.attack_lr * sum_rb),
        clip(-c.attack_lr * sum_na),
        c.nonrobust_coeff + clip(-c.attack_lr * sum_nb),
    )
}

/// Adversarial diagonal iteration: tilde coefficients first, then the
/// descent update at the attacked patches.
pub fn oracle_step_adversarial(state: &OracleState) -> Result<OracleState> {
    state.check_finite()?;
    let c = &state.config;
    let act = &c.act;
    let mut next = state.clone();
    for i in 0..c.k {
        let (ta_r, tb_r, ta_n, tb_n) = adversarial_tilde_coeffs(state, i);
        let row = i * c.m..(i + 1) * c.m;
        let a = &state.diag_robust[row.clone()];
        let b = &state.diag_nonrobust[row.clone()];
        let score: f64 = (0..c.m)
            .map(|r| {
                c.robust_patches as f64 * act.srelu(ta_r * a[r] + tb_r * b[r])
                    + c.nonrobust_patches as f64 * act.srelu(ta_n * a[r] + tb_n * b[r])
            })
            .sum();
        let residual = 1.0 - state.logit_from_score(score);
        let scale = c.lr / c.k as f64;
        for r in 0..c.m {
            let slope_r = act.srelu_prime(ta_r * a[r] + tb_r * b[r]);
            let slope_n = act.srelu_prime(ta_n * a[r] + tb_n * b[r]);
            next.diag_robust[i * c.m + r] += scale
                * residual
                * (c.robust_patches as f64 * slope_r * ta_r
                    + c.nonrobust_patches as f64 * slope_n * ta_n);
            next.diag_nonrobust[i * c.m + r] += scale
                * residual
                * (c.robust_patches as f64 * slope_r * tb_r
                    + c.nonrobust_patches as f64 * slope_n * tb_n);
        }
    }
    next.step += 1;
    next.check_finite()?;
    Ok(next)
}

pub fn oracle_step(state: &OracleState) -> Result<OracleState> {
    match state.mode {
        TrainMode::Standard => oracle_step_standard(state),
        TrainMode::Adversarial => oracle_step_adversarial(state),
    }
}

/// Propagate the recursions; the returned trajectory includes the initial
/// state, so it has `epochs + 1` entries.
pub fn run_oracle(init: &OracleState, epochs: usize) -> Result<Vec<OracleState>> {
    let mut states = Vec::with_capacity(epochs + 1);
    states.push(init.clone());
    for _ in 0..epochs {
        let next = oracle_step(states.last().expect("nonempty"))?;
        states.push(next);
    }
    Ok(states)
}

// ---------------------------------------------------------------------------
// Tensor-power sequence check
// ---------------------------------------------------------------------------

/// Outcome of racing the two polynomial growth sequences.
#[derive(Debug, Clone, Serialize)]
pub struct TensorPowerReport {
    /// Whether the leading sequence reached the target within the cap.
    pub converged: bool,
    /// First step with `x >= target` (when converged).
    pub crossing_step: usize,
    pub x_at_crossing: f64,
    pub y_at_crossing: f64,
    /// `y(T_x) / y0`.
    pub growth_ratio: f64,
    /// Whether `x` reached the target strictly before `y` did.
    pub x_crossed_first: bool,
    /// The gap hypothesis `x0 > y0 * s^(1/(q-2))`.
    pub hypothesis_ok: bool,
}

/// Simulate `x_{t+1} = x_t + lr * C_t * x_t^(q-1)` against
/// `y_{t+1} = y_t + lr * s * C_t * y_t^(q-1)` until `x` reaches `target`.
/// `c_schedule` is indexed by step; its last value repeats once exhausted.
pub fn tensor_power_check(
    x0: f64,
    y0: f64,
    s: f64,
    c_schedule: &[f64],
    lr: f64,
    q: u32,
    target: f64,
    max_steps: usize,
) -> Result<TensorPowerReport> {
    if !(x0 > 0.0 && y0 > 0.0) {
        return Err(Error::Config("sequence starts must be positive".into()));
    }
    if q < 3 {
        return Err(Error::Config("tensor power check needs q >= 3".into()));
    }
    if c_schedule.is_empty() {
        return Err(Error::Config("empty growth-rate schedule".into()));
    }
    let hypothesis_ok = x0 > y0 * s.powf(1.0 / (q as f64 - 2.0));
    let mut x = x0;
    let mut y = y0;
    let mut y_crossed = false;
    for t in 0..max_steps {
        if x >= target {
            return Ok(TensorPowerReport {
                converged: true,
                crossing_step: t,
                x_at_crossing: x,
                y_at_crossing: y,
                growth_ratio: y / y0,
                x_crossed_first: !y_crossed,
                hypothesis_ok,
            });
        }
        if y >= target {
            y_crossed = true;
        }
        let c = c_schedule[t.min(c_schedule.len() - 1)];
        let exp = q as i32 - 1;
        x += lr * c * x.powi(exp);
        y += lr * s * c * y.powi(exp);
        if !(x.is_finite() && y.is_finite()) {
            break;
        }
    }
    Ok(TensorPowerReport {
        converged: false,
        crossing_step: max_steps,
        x_at_crossing: x,
        y_at_crossing: y,
        growth_ratio: y / y0,
        x_crossed_first: false,
        hypothesis_ok,
    })
}

// ---------------------------------------------------------------------------
// Simulator/oracle comparison
// ---------------------------------------------------------------------------

/// Diagonal correlations of the full simulator at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSnapshot {
    pub epoch: usize,
    pub diag_robust: Vec<f64>,
    pub diag_nonrobust: Vec<f64>,
}

impl CorrelationSnapshot {
    pub fn from_network(epoch: usize, net: &Network, fs: &FeatureSet) -> Self {
        let dec = decompose(net, fs);
        CorrelationSnapshot {
            epoch,
            diag_robust: dec.diag_robust,
            diag_nonrobust: dec.diag_nonrobust,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochDivergence {
    pub epoch: usize,
    /// Max absolute coefficient difference, robust side.
    pub robust_diff: f64,
    /// Max absolute coefficient difference, non-robust side.
    pub nonrobust_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceReport {
    pub per_epoch: Vec<EpochDivergence>,
    pub max_robust_diff: f64,
    pub max_nonrobust_diff: f64,
}

impl DivergenceReport {
    pub fn max_diff(&self) -> f64 {
        self.max_robust_diff.max(self.max_nonrobust_diff)
    }
}

/// Coordinatewise divergence between simulator correlations and oracle
/// coefficients on a shared epoch grid.
pub fn compare_trace(
    sim: &[CorrelationSnapshot],
    oracle: &[OracleState],
) -> Result<DivergenceReport> {
    if sim.len() != oracle.len() {
        return Err(Error::GridMismatch(format!(
            "{} simulator epochs vs {} oracle epochs",
            sim.len(),
            oracle.len()
        )));
    }
    let mut per_epoch = Vec::with_capacity(sim.len());
    let mut max_r: f64 = 0.0;
    let mut max_n: f64 = 0.0;
    for (snap, state) in sim.iter().zip(oracle) {
        if snap.epoch != state.step {
            return Err(Error::GridMismatch(format!(
                "simulator epoch {} aligned with oracle step {}",
                snap.epoch, state.step
            )));
        }
        if snap.diag_robust.len() != state.diag_robust.len() {
            return Err(Error::Shape("coefficient counts differ".into()));
        }
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let dr = diff(&snap.diag_robust, &state.diag_robust);
        let dn = diff(&snap.diag_nonrobust, &state.diag_nonrobust);
        max_r = max_r.max(dr);
        max_n = max_n.max(dn);
        per_epoch.push(EpochDivergence {
            epoch: snap.epoch,
            robust_diff: dr,
            nonrobust_diff: dn,
        });
    }
    Ok(DivergenceReport {
        per_epoch,
        max_robust_diff: max_r,
        max_nonrobust_diff: max_n,
    })
}

// ---------------------------------------------------------------------------
// Lockstep harness
// ---------------------------------------------------------------------------

/// Network whose filters carry only diagonal feature components:
/// `w_{i,r} = a[i,r] u_i + b[i,r] v_i`.
pub fn diagonal_network(
    fs: &FeatureSet,
    m: usize,
    act: Activation,
    diag_robust: &[f64],
    diag_nonrobust: &[f64],
) -> Result<Network> {
    let (k, d) = (fs.k(), fs.dim());
    if diag_robust.len() != k * m || diag_nonrobust.len() != k * m {
        return Err(Error::Shape("need k*m diagonal coefficients".into()));
    }
    let mut weights = vec![0.0; k * m * d];
    for i in 0..k {
        for r in 0..m {
            let base = (i * m + r) * d;
            weights[base + fs.coordinate(FeatureKind::Robust, i)] = diag_robust[i * m + r];
            weights[base + fs.coordinate(FeatureKind::NonRobust, i)] = diag_nonrobust[i * m + r];
        }
    }
    Network::from_weights(k, m, d, act, weights)
}

/// One noiseless example per class with the leading-robust partition;
/// requires constant coefficients.
pub fn prototype_dataset(cfg: &DataConfig, fs: &FeatureSet) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.noise_std != 0.0 {
        return Err(Error::Config("prototype data must be noiseless".into()));
    }
    let (a, b) = match (cfg.robust_coeff, cfg.nonrobust_coeff) {
        (
            crate::features::CoeffDist::Constant { value: a },
            crate::features::CoeffDist::Constant { value: b },
        ) => (a, b),
        _ => {
            return Err(Error::Config(
                "prototype data needs constant coefficients".into(),
            ))
        }
    };
    let d = cfg.d;
    let examples = (0..cfg.k)
        .map(|label| {
            let mut patches = vec![0.0; cfg.patches * d];
            let mut roles = Vec::with_capacity(cfg.patches);
            for p in 0..cfg.patches {
                if p < cfg.robust_patches {
                    patches[p * d + fs.coordinate(FeatureKind::Robust, label)] = a;
                    roles.push(PatchRole::Robust { coeff: a });
                } else {
                    patches[p * d + fs.coordinate(FeatureKind::NonRobust, label)] = b;
                    roles.push(PatchRole::NonRobust { coeff: b });
                }
            }
            LabeledExample {
                label,
                patches,
                noise: vec![0.0; cfg.patches * d],
                roles,
            }
        })
        .collect();
    Ok(Dataset { examples, seed: 0 })
}

/// Result of running simulator and oracle side by side.
#[derive(Debug)]
pub struct LockstepResult {
    pub sim: Vec<CorrelationSnapshot>,
    pub oracle: Vec<OracleState>,
    pub report: DivergenceReport,
}

/// Run the full simulator on the identical-example noiseless regime against
/// the oracle recursions seeded with the simulator's exact initial diagonal
/// correlations. `attack_rate` is the per-example ascent rate; the
/// simulator's batch convention is matched internally.
pub fn run_lockstep(
    cfg: &DataConfig,
    m: usize,
    act: Activation,
    mode: TrainMode,
    lr: f64,
    attack_rate: f64,
    epsilon: f64,
    epochs: usize,
    init_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LockstepResult> {
    let fs = crate::features::build_feature_set(cfg.k, cfg.d)?;
    let data = prototype_dataset(cfg, &fs)?;

    // Diagonal-only init: draw the robust row first, then the non-robust row.
    let normal = Normal::new(0.0, init_std)
        .map_err(|_| Error::Config("init std must be positive and finite".into()))?;
    let diag_robust: Vec<f64> = (0..cfg.k * m).map(|_| normal.sample(rng)).collect();
    let diag_nonrobust: Vec<f64> = (0..cfg.k * m).map(|_| normal.sample(rng)).collect();
    let mut net = diagonal_network(&fs, m, act, &diag_robust, &diag_nonrobust)?;

    let (a, b) = match (cfg.robust_coeff, cfg.nonrobust_coeff) {
        (
            crate::features::CoeffDist::Constant { value: a },
            crate::features::CoeffDist::Constant { value: b },
        ) => (a, b),
        _ => unreachable!("prototype_dataset enforces constant coefficients"),
    };
    let oracle_cfg = OracleConfig {
        k: cfg.k,
        m,
        lr,
        attack_lr: attack_rate,
        epsilon,
        robust_coeff: a,
        nonrobust_coeff: b,
        robust_patches: cfg.robust_patches,
        nonrobust_patches: cfg.nonrobust_patches,
        act,
    };
    let init_dec = decompose(&net, &fs);
    let init_state = OracleState::new(
        oracle_cfg,
        mode,
        init_dec.diag_robust,
        init_dec.diag_nonrobust,
    )?;
    let oracle = run_oracle(&init_state, epochs)?;

    // adversarial_step divides attack_lr by the dataset size
    let train_cfg = TrainConfig {
        lr,
        attack_lr: attack_rate * data.len() as f64,
        epsilon,
        epochs,
        mode,
        eval_every: 1,
        attack_eval: crate::training::PgdSettings::for_radius(epsilon),
    };
    let mut sim = Vec::with_capacity(epochs + 1);
    sim.push(CorrelationSnapshot::from_network(0, &net, &fs));
    for epoch in 1..=epochs {
        net = match mode {
            TrainMode::Standard => standard_step(&net, &data, lr)?,
            TrainMode::Adversarial => adversarial_step(&net, &data, &train_cfg)?.0,
        };
        sim.push(CorrelationSnapshot::from_network(epoch, &net, &fs));
    }

    let report = compare_trace(&sim, &oracle)?;
    Ok(LockstepResult {
        sim,
        oracle,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_feature_set, CoeffDist};
    use crate::rng::{stream, TAG_INIT};

    fn oracle_cfg(m: usize) -> OracleConfig {
        OracleConfig {
            k: 2,
            m,
            lr: 0.1,
            attack_lr: 10.0,
            epsilon: 1.2,
            robust_coeff: 2.0,
            nonrobust_coeff: 1.0,
            robust_patches: 1,
            nonrobust_patches: 15,
            act: Activation::default(),
        }
    }

    #[test]
    fn decompose_recovers_diagonal_combination() {
        let fs = build_feature_set(2, 100).unwrap();
        let net = diagonal_network(&fs, 1, Activation::default(), &[0.7, 0.0], &[0.2, 0.0])
            .unwrap();
        let dec = decompose(&net, &fs);
        assert_eq!(dec.diag_robust(0, 0), 0.7);
        assert_eq!(dec.diag_nonrobust(0, 0), 0.2);
        assert_eq!(dec.cross_robust(0, 0, 1), 0.0);
        assert_eq!(dec.cross_nonrobust(0, 0, 1), 0.0);
        assert!(dec.residual_norm(0, 0) < 1e-15);
    }

    #[test]
    fn decompose_off_dictionary_mass_is_residual() {
        let fs = build_feature_set(2, 10).unwrap();
        let mut weights = vec![0.0; 2 * 10];
        weights[7] = 3.0; // outside the 4 feature coordinates
        let net = Network::from_weights(2, 1, 10, Activation::default(), weights).unwrap();
        let dec = decompose(&net, &fs);
        assert_eq!(dec.diag_robust(0, 0), 0.0);
        assert_eq!(dec.diag_nonrobust(0, 0), 0.0);
        assert_eq!(dec.residual_norm(0, 0), 3.0);
    }

    #[test]
    fn decompose_reconstruction_identity() {
        let fs = build_feature_set(3, 20).unwrap();
        let mut rng = stream(7, TAG_INIT, 0);
        let net = Network::random(3, 4, 20, 0.5, &mut rng).unwrap();
        let dec = decompose(&net, &fs);
        for i in 0..3 {
            for r in 0..4 {
                let w = net.weight(i, r);
                let mut rec = vec![0.0; 20];
                for j in 0..3 {
                    let (cu, cv) = if j == i {
                        (dec.diag_robust(i, r), dec.diag_nonrobust(i, r))
                    } else {
                        (dec.cross_robust(i, r, j), dec.cross_nonrobust(i, r, j))
                    };
                    for (x, (fu, fv)) in
                        rec.iter_mut().zip(fs.robust(j).iter().zip(fs.nonrobust(j)))
                    {
                        *x += cu * fu + cv * fv;
                    }
                }
                let residual: Vec<f64> = w.iter().zip(&rec).map(|(a, b)| a - b).collect();
                let res_norm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((res_norm - dec.residual_norm(i, r)).abs() < 1e-10);
                for ((wc, rc), res) in w.iter().zip(&rec).zip(&residual) {
                    assert!((wc - (rc + res)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn oracle_zero_state_is_fixed_point() {
        for mode in [TrainMode::Standard, TrainMode::Adversarial] {
            let st =
                OracleState::new(oracle_cfg(3), mode, vec![0.0; 6], vec![0.0; 6]).unwrap();
            let next = oracle_step(&st).unwrap();
            assert_eq!(next.diag_robust, st.diag_robust);
            assert_eq!(next.diag_nonrobust, st.diag_nonrobust);
        }
    }

    #[test]
    fn oracle_logit_uniform_at_zero_output() {
        let st = OracleState::new(oracle_cfg(2), TrainMode::Standard, vec![0.0; 4], vec![0.0; 4])
            .unwrap();
        assert!((st.logit_from_score(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_standard_single_filter_update() {
        // k=2, m=1, A=0.01: dA = (lr/k)(1 - logit) srelu'(2*0.01) * 2,
        // with the logit taken at the oracle's own output srelu(0.02).
        let st = OracleState::new(
            oracle_cfg(1),
            TrainMode::Standard,
            vec![0.01, 0.01],
            vec![0.0, 0.0],
        )
        .unwrap();
        let next = oracle_step_standard(&st).unwrap();
        let score = 0.02f64.powi(3) / 3.0;
        let logit = score.exp() / (score.exp() + 1.0);
        let expect = 0.01 + (0.1 / 2.0) * (1.0 - logit) * (0.02f64 * 0.02) * 2.0;
        assert!((next.diag_robust[0] - expect).abs() < 1e-15);
        // the spec-level approximation with logit = 1/2 holds to float slack
        let approx = 0.01 + (0.1 / 2.0) * 0.5 * (0.02f64 * 0.02) * 2.0;
        assert!((next.diag_robust[0] - approx).abs() < 1e-10);
    }

    #[test]
    fn adversarial_tilde_saturation_and_floor() {
        // Saturated non-robust side: beta tilde = beta - epsilon = -0.2.
        let st = OracleState::new(
            oracle_cfg(1),
            TrainMode::Adversarial,
            vec![5.0, 5.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let (ta_r, _tb_r, _ta_n, tb_n) = adversarial_tilde_coeffs(&st, 0);
        assert!((tb_n - (1.0 - 1.2)).abs() < 1e-12);
        // Robust clause floors at alpha - epsilon = 0.8 > 0.
        assert!((ta_r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adversarial_saturated_nonrobust_increment_is_nonpositive() {
        let st = OracleState::new(
            oracle_cfg(1),
            TrainMode::Adversarial,
            vec![0.05, 0.05],
            vec![1.0, 1.0],
        )
        .unwrap();
        let next = oracle_step_adversarial(&st).unwrap();
        for (after, before) in next.diag_nonrobust.iter().zip(&st.diag_nonrobust) {
            assert!(after - before <= 1e-12, "B increment {}", after - before);
        }
    }

    #[test]
    fn run_oracle_zero_epochs_returns_init() {
        let st = OracleState::new(oracle_cfg(2), TrainMode::Standard, vec![0.1; 4], vec![0.1; 4])
            .unwrap();
        let traj = run_oracle(&st, 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0], st);
    }

    #[test]
    fn compare_trace_self_is_zero() {
        let st = OracleState::new(
            oracle_cfg(2),
            TrainMode::Standard,
            vec![0.02; 4],
            vec![0.03; 4],
        )
        .unwrap();
        let traj = run_oracle(&st, 5).unwrap();
        let sim: Vec<CorrelationSnapshot> = traj
            .iter()
            .map(|s| CorrelationSnapshot {
                epoch: s.step,
                diag_robust: s.diag_robust.clone(),
                diag_nonrobust: s.diag_nonrobust.clone(),
            })
            .collect();
        let rep = compare_trace(&sim, &traj).unwrap();
        assert_eq!(rep.max_diff(), 0.0);
    }

    #[test]
    fn compare_trace_grid_mismatch() {
        let st = OracleState::new(oracle_cfg(1), TrainMode::Standard, vec![0.1; 2], vec![0.1; 2])
            .unwrap();
        let traj = run_oracle(&st, 3).unwrap();
        let sim = vec![CorrelationSnapshot {
            epoch: 0,
            diag_robust: vec![0.1; 2],
            diag_nonrobust: vec![0.1; 2],
        }];
        assert!(matches!(
            compare_trace(&sim, &traj),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn tensor_power_basic_race() {
        // x0 = 1.1 * y0 * S, q = 3: x must cross first with bounded y growth.
        let y0 = 0.01;
        for s in [1.0, 2.0, 4.0] {
            let x0 = 1.1 * y0 * s;
            let rep =
                tensor_power_check(x0, y0, s, &[1.0], 1e-4, 3, 1.0, 50_000_000).unwrap();
            assert!(rep.converged);
            assert!(rep.hypothesis_ok);
            assert!(rep.x_crossed_first);
            assert!(rep.growth_ratio <= 100.0, "ratio {}", rep.growth_ratio);
        }
    }

    #[test]
    fn tensor_power_flags_violated_hypothesis() {
        let rep = tensor_power_check(0.01, 0.01, 4.0, &[1.0], 1e-4, 3, 1.0, 10_000_000).unwrap();
        assert!(!rep.hypothesis_ok);
    }

    #[test]
    fn tensor_power_zero_rate_does_not_converge() {
        let rep = tensor_power_check(0.02, 0.01, 1.0, &[1.0], 0.0, 3, 1.0, 1000).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.x_at_crossing, 0.02);
    }

    #[test]
    fn prototype_dataset_is_balanced_and_noiseless() {
        let cfg = DataConfig {
            noise_std: 0.0,
            ..DataConfig::default()
        };
        let fs = build_feature_set(cfg.k, cfg.d).unwrap();
        let data = prototype_dataset(&cfg, &fs).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.examples[0].label, 0);
        assert_eq!(data.examples[1].label, 1);
        assert_eq!(data.examples[0].patches[0], 2.0);
        let noisy = DataConfig::default();
        assert!(prototype_dataset(&noisy, &fs).is_err());
        let random = DataConfig {
            noise_std: 0.0,
            robust_coeff: CoeffDist::Uniform { lo: 1.0, hi: 2.0 },
            ..DataConfig::default()
        };
        assert!(prototype_dataset(&random, &fs).is_err());
    }

    #[test]
    fn lockstep_small_standard_matches_tightly() {
        let cfg = DataConfig {
            noise_std: 0.0,
            ..DataConfig::default()
        };
        let mut rng = stream(5, TAG_INIT, 0);
        let res = run_lockstep(
            &cfg,
            4,
            Activation::default(),
            TrainMode::Standard,
            0.1,
            10.0,
            1.2,
            50,
            0.01,
            &mut rng,
        )
        .unwrap();
        assert!(res.report.max_diff() <= 1e-9, "diff {}", res.report.max_diff());
    }

    #[test]
    fn lockstep_small_adversarial_matches_tightly() {
        let cfg = DataConfig {
            noise_std: 0.0,
            ..DataConfig::default()
        };
        let mut rng = stream(6, TAG_INIT, 0);
        let res = run_lockstep(
            &cfg,
            4,
            Activation::default(),
            TrainMode::Adversarial,
            0.1,
            10.0,
            1.2,
            50,
            0.01,
            &mut rng,
        )
        .unwrap();
        assert!(res.report.max_diff() <= 1e-9, "diff {}", res.report.max_diff());
    }
}
