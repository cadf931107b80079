//! The structured patch-data model: an orthonormal feature dictionary,
//! labeled example sampling, feature-representative construction, and the
//! strength/density assumption checker.
//!
//! Every class `j` owns two coordinate-aligned unit features: a robust one on
//! coordinate `j` and a non-robust one on coordinate `k + j`. An example is
//! `P` patches in `R^d`; each patch carries exactly one feature of the label
//! class, scaled by a positive coefficient, plus isotropic Gaussian noise.

use crate::linalg::dot;
use crate::rng::{derive, stream, TAG_ASSUMPTION_MC};
use crate::{Error, FeatureKind, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The `2k` orthonormal feature vectors, `u_j = e_j` and `v_j = e_{k+j}`.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    k: usize,
    d: usize,
    robust: Vec<Vec<f64>>,
    nonrobust: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Robust feature of class `j`.
    pub fn robust(&self, j: usize) -> &[f64] {
        &self.robust[j]
    }

    /// Non-robust feature of class `j`.
    pub fn nonrobust(&self, j: usize) -> &[f64] {
        &self.nonrobust[j]
    }

    pub fn feature(&self, kind: FeatureKind, j: usize) -> &[f64] {
        match kind {
            FeatureKind::Robust => self.robust(j),
            FeatureKind::NonRobust => self.nonrobust(j),
        }
    }

    /// Coordinate carrying the feature (features are basis vectors).
    pub fn coordinate(&self, kind: FeatureKind, j: usize) -> usize {
        match kind {
            FeatureKind::Robust => j,
            FeatureKind::NonRobust => self.k + j,
        }
    }

    /// Gram matrix of all `2k` features, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let all: Vec<&[f64]> = (0..self.k)
            .map(|j| self.robust(j))
            .chain((0..self.k).map(|j| self.nonrobust(j)))
            .collect();
        let n = all.len();
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = dot(all[a], all[b]);
            }
        }
        g
    }
}

/// Build the canonical feature dictionary for `k` classes in dimension `d`.
pub fn build_feature_set(k: usize, d: usize) -> Result<FeatureSet> {
    if k == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    if d < 2 * k {
        return Err(Error::Config(format!(
            "patch dimension {d} too small for 2k = {} orthogonal features",
            2 * k
        )));
    }
    let basis = |coord: usize| {
        let mut v = vec![0.0; d];
        v[coord] = 1.0;
        v
    };
    Ok(FeatureSet {
        k,
        d,
        robust: (0..k).map(basis).collect(),
        nonrobust: (0..k).map(|j| basis(k + j)).collect(),
    })
}

/// Positive coefficient distribution for patch signal strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum CoeffDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl CoeffDist {
    pub fn constant(value: f64) -> Self {
        CoeffDist::Constant { value }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CoeffDist::Constant { value } => value,
            CoeffDist::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CoeffDist::Constant { value } => value,
            CoeffDist::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoeffDist::Constant { .. })
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            CoeffDist::Constant { value } => value > 0.0,
            CoeffDist::Uniform { lo, hi } => lo > 0.0 && hi >= lo,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name} coefficient distribution must be strictly positive"
            )))
        }
    }
}

/// How patch indices are split into robust / non-robust sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Patches `0..robust_patches` are robust, the rest non-robust.
    #[default]
    LeadingRobust,
    /// A uniformly random subset of `robust_patches` indices is robust.
    UniformRandom,
}

/// Sampling configuration for the patch data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub k: usize,
    pub d: usize,
    /// Total patches per example.
    pub patches: usize,
    /// Number of robust-feature patches.
    pub robust_patches: usize,
    /// Number of non-robust-feature patches.
    pub nonrobust_patches: usize,
    /// Robust signal strength distribution.
    pub robust_coeff: CoeffDist,
    /// Non-robust signal strength distribution.
    pub nonrobust_coeff: CoeffDist,
    /// Per-coordinate Gaussian noise std.
    pub noise_std: f64,
    /// Density exponent used by the assumption checker.
    pub density_exponent: f64,
    #[serde(default)]
    pub partition: PartitionMode,
}

impl Default for DataConfig {
    /// Defaults of the synthetic experiment: two classes, 100-dimensional
    /// patches, one strong robust patch against fifteen weak non-robust ones.
    fn default() -> Self {
        DataConfig {
            k: 2,
            d: 100,
            patches: 16,
            robust_patches: 1,
            nonrobust_patches: 15,
            robust_coeff: CoeffDist::constant(2.0),
            nonrobust_coeff: CoeffDist::constant(1.0),
            noise_std: 0.1,
            density_exponent: 3.0,
            partition: PartitionMode::LeadingRobust,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if self.d < 2 * self.k {
            return Err(Error::Config(format!(
                "patch dimension {} must be at least 2k = {}",
                self.d,
                2 * self.k
            )));
        }
        if self.robust_patches + self.nonrobust_patches != self.patches {
            return Err(Error::Config(format!(
                "patch partition {} + {} does not cover {} patches",
                self.robust_patches, self.nonrobust_patches, self.patches
            )));
        }
        if self.patches == 0 {
            return Err(Error::Config("need at least one patch".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise std must be nonnegative".into()));
        }
        if self.density_exponent < 0.0 {
            return Err(Error::Config("density exponent must be nonnegative".into()));
        }
        self.robust_coeff.validate("robust")?;
        self.nonrobust_coeff.validate("non-robust")
    }

    fn matches(&self, fs: &FeatureSet) -> Result<()> {
        if fs.k() != self.k || fs.dim() != self.d {
            return Err(Error::Shape(format!(
                "feature set ({}, {}) does not match config ({}, {})",
                fs.k(),
                fs.dim(),
                self.k,
                self.d
            )));
        }
        Ok(())
    }
}

/// Role and drawn coefficient of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchRole {
    Robust { coeff: f64 },
    NonRobust { coeff: f64 },
}

impl PatchRole {
    pub fn kind(&self) -> FeatureKind {
        match self {
            PatchRole::Robust { .. } => FeatureKind::Robust,
            PatchRole::NonRobust { .. } => FeatureKind::NonRobust,
        }
    }

    pub fn coeff(&self) -> f64 {
        match *self {
            PatchRole::Robust { coeff } | PatchRole::NonRobust { coeff } => coeff,
        }
    }
}

/// One labeled data point: `P` patches stored flat (`P * d` values), plus
/// the generation metadata needed by the diagnostics and representatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub label: usize,
    /// Flattened patches, patch-major.
    pub patches: Vec<f64>,
    pub roles: Vec<PatchRole>,
    /// Stored noise draws, same layout as `patches`.
    pub noise: Vec<f64>,
}

impl LabeledExample {
    pub fn patch_count(&self, d: usize) -> usize {
        self.patches.len() / d
    }

    pub fn patch(&self, p: usize, d: usize) -> &[f64] {
        &self.patches[p * d..(p + 1) * d]
    }

    pub fn noise_patch(&self, p: usize, d: usize) -> &[f64] {
        &self.noise[p * d..(p + 1) * d]
    }

    fn check_metadata(&self, d: usize) -> Result<()> {
        let p = self.patch_count(d);
        if self.roles.len() != p || self.noise.len() != self.patches.len() {
            return Err(Error::MissingMetadata(format!(
                "example has {} roles and {} noise values for {} patches",
                self.roles.len(),
                self.noise.len(),
                p
            )));
        }
        Ok(())
    }
}

/// Sample one labeled example. Draw order is fixed: label, partition (random
/// mode only), then per patch the coefficient followed by the noise vector.
pub fn sample_example(
    cfg: &DataConfig,
    fs: &FeatureSet,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledExample> {
    cfg.validate()?;
    cfg.matches(fs)?;
    let label = rng.gen_range(0..cfg.k);

    let mut robust_slot = vec![false; cfg.patches];
    match cfg.partition {
        PartitionMode::LeadingRobust => {
            robust_slot[..cfg.robust_patches].fill(true);
        }
        PartitionMode::UniformRandom => {
            // Partial Fisher-Yates: uniform subset of robust positions.
            let mut idx: Vec<usize> = (0..cfg.patches).collect();
            for i in 0..cfg.robust_patches {
                let j = rng.gen_range(i..cfg.patches);
                idx.swap(i, j);
            }
            for &p in &idx[..cfg.robust_patches] {
                robust_slot[p] = true;
            }
        }
    }

    let normal = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).expect("validated std"))
    } else {
        None
    };

    let d = cfg.d;
    let mut patches = vec![0.0; cfg.patches * d];
    let mut noise = vec![0.0; cfg.patches * d];
    let mut roles = Vec::with_capacity(cfg.patches);
    for p in 0..cfg.patches {
        let (role, feature) = if robust_slot[p] {
            let coeff = cfg.robust_coeff.sample(rng);
            (PatchRole::Robust { coeff }, fs.robust(label))
        } else {
            let coeff = cfg.nonrobust_coeff.sample(rng);
            (PatchRole::NonRobust { coeff }, fs.nonrobust(label))
        };
        let xi = &mut noise[p * d..(p + 1) * d];
        if let Some(n) = &normal {
            for x in xi.iter_mut() {
                *x = n.sample(rng);
            }
        }
        let patch = &mut patches[p * d..(p + 1) * d];
        for j in 0..d {
            patch[j] = role.coeff() * feature[j] + xi[j];
        }
        roles.push(role);
    }

    Ok(LabeledExample {
        label,
        patches,
        roles,
        noise,
    })
}

/// A reproducible collection of labeled examples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub seed: u64,
}

impl Dataset {
    /// Sample `n` examples; example `i` consumes only stream `i` of `seed`,
    /// so generation parallelizes without changing the result.
    pub fn sample(cfg: &DataConfig, fs: &FeatureSet, seed: u64, n: usize) -> Result<Dataset> {
        cfg.validate()?;
        cfg.matches(fs)?;
        let examples: Result<Vec<_>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, 0, i as u64);
                sample_example(cfg, fs, &mut rng)
            })
            .collect();
        Ok(Dataset {
            examples: examples?,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Representative of `ex` keeping only `keep`-role signals: every patch of
/// the other role has its signal dropped while the stored noise remains.
pub fn make_representative(
    ex: &LabeledExample,
    fs: &FeatureSet,
    keep: FeatureKind,
) -> Result<LabeledExample> {
    let d = fs.dim();
    ex.check_metadata(d)?;
    let mut out = ex.clone();
    for (p, role) in ex.roles.iter().enumerate() {
        if role.kind() != keep {
            out.patches[p * d..(p + 1) * d].copy_from_slice(ex.noise_patch(p, d));
        }
    }
    Ok(out)
}

/// Outcome of the strength/density sanity check on a data configuration.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// `E[min robust coeff] / E[max non-robust coeff]`; robust features are
    /// stronger when this exceeds one.
    pub ratio_strength: f64,
    /// `E[sum robust coeff^tau] / E[sum non-robust coeff^tau]`; non-robust
    /// features are denser when this is below one.
    pub ratio_density: f64,
    pub strength_ok: bool,
    pub density_ok: bool,
}

const ASSUMPTION_MC_TRIALS: usize = 20_000;

/// Check the two data-model conditions. Expectations are exact for constant
/// coefficients and Monte-Carlo estimates otherwise; never fails, the report
/// carries the verdicts.
pub fn check_assumptions(cfg: &DataConfig) -> Result<AssumptionReport> {
    cfg.validate()?;
    let tau = cfg.density_exponent;
    let exact = cfg.robust_coeff.is_constant() && cfg.nonrobust_coeff.is_constant();

    let (e_min_robust, e_max_nonrobust, e_sum_robust_tau, e_sum_nonrobust_tau) = if exact {
        let a = cfg.robust_coeff.mean();
        let b = cfg.nonrobust_coeff.mean();
        (
            a,
            b,
            cfg.robust_patches as f64 * a.powf(tau),
            cfg.nonrobust_patches as f64 * b.powf(tau),
        )
    } else {
        let mut rng = stream(0xA55, TAG_ASSUMPTION_MC, derive(0, tau.to_bits()));
        let mut min_r = 0.0;
        let mut max_n = 0.0;
        let mut sum_r = 0.0;
        let mut sum_n = 0.0;
        for _ in 0..ASSUMPTION_MC_TRIALS {
            let mut mr = f64::INFINITY;
            let mut sr = 0.0;
            for _ in 0..cfg.robust_patches {
                let a = cfg.robust_coeff.sample(&mut rng);
                mr = mr.min(a);
                sr += a.powf(tau);
            }
            let mut mn = f64::NEG_INFINITY;
            let mut sn = 0.0;
            for _ in 0..cfg.nonrobust_patches {
                let b = cfg.nonrobust_coeff.sample(&mut rng);
                mn = mn.max(b);
                sn += b.powf(tau);
            }
            min_r += if cfg.robust_patches > 0 { mr } else { 0.0 };
            max_n += if cfg.nonrobust_patches > 0 { mn } else { 0.0 };
            sum_r += sr;
            sum_n += sn;
        }
        let t = ASSUMPTION_MC_TRIALS as f64;
        (min_r / t, max_n / t, sum_r / t, sum_n / t)
    };

    let ratio_strength = e_min_robust / e_max_nonrobust;
    let ratio_density = e_sum_robust_tau / e_sum_nonrobust_tau;
    Ok(AssumptionReport {
        ratio_strength,
        ratio_density,
        strength_ok: ratio_strength > 1.0,
        density_ok: ratio_density < 1.0,
    })
}

// ---------------------------------------------------------------------------
// Dataset serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    label: usize,
    roles: Vec<PatchRole>,
    patches: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    k: usize,
    d: usize,
    #[serde(rename = "P")]
    patches: usize,
    seed: u64,
    examples: Vec<ExampleRecord>,
}

/// Serialize a dataset to the flat JSON record format.
pub fn dataset_to_json(ds: &Dataset, cfg: &DataConfig) -> Result<String> {
    let file = DatasetFile {
        k: cfg.k,
        d: cfg.d,
        patches: cfg.patches,
        seed: ds.seed,
        examples: ds
            .examples
            .iter()
            .map(|e| ExampleRecord {
                label: e.label,
                roles: e.roles.clone(),
                patches: e.patches.clone(),
            })
            .collect(),
    };
    crate::jsonfmt::to_string_17(&file)
}

/// Parse a dataset back; noise metadata is reconstructed as
/// `patch - coeff * feature` against the canonical dictionary.
pub fn dataset_from_json(text: &str) -> Result<(Dataset, usize, usize, usize)> {
    let file: DatasetFile = serde_json::from_str(text)?;
    let fs = build_feature_set(file.k, file.d)?;
    let d = file.d;
    let examples = file
        .examples
        .into_iter()
        .map(|rec| {
            let mut noise = rec.patches.clone();
            for (p, role) in rec.roles.iter().enumerate() {
                let coord = fs.coordinate(role.kind(), rec.label);
                noise[p * d + coord] -= role.coeff();
            }
            LabeledExample {
                label: rec.label,
                patches: rec.patches,
                roles: rec.roles,
                noise,
            }
        })
        .collect();
    Ok((
        Dataset {
            examples,
            seed: file.seed,
        },
        file.k,
        file.d,
        file.patches,
    ))
}
