//! Synthetic classifier populations with known calibration and per-stage
//! gains.
//!
//! Each instance draws its stage-0 confidence from a Beta distribution
//! rescaled to `[1/L, 1]`, is correct with probability
//! `calibration(conf) + accuracy_offset`, and at every later stage is fixed
//! (made correct, confidence boosted) with the stage's flip probability.
//! Fixes compound across stages.
//!
//! Every instance has its own ChaCha stream keyed by (seed, dataset tag)
//! and indexed by instance number, and consumes a fixed number of draws, so
//! output is independent of generation order and thread count. Raising a
//! flip probability never turns a correct prediction wrong.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::resolve_stages;
use crate::metrics::StageReport;
use crate::record::{InstanceRecord, LabelSpace, Prediction, RecordSet, StageOutput, MAX_STAGE, VARIANT_STAGE};

/// Probability that a stage-1 variant keeps the stage-1 label.
const VARIANT_KEEP: f64 = 0.8;
/// Half-width of the uniform jitter applied to variant confidences.
const VARIANT_JITTER: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("record set was not produced by this config (expected source '{expected}', found '{found}')")]
    ProvenanceMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub tag: String,
    pub accuracy_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub alpha: f64,
    pub beta: f64,
}

/// Maps confidence to the probability of being correct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Calibration {
    Identity,
    Logistic { k: f64, x0: f64 },
}

impl Calibration {
    pub fn apply(&self, conf: f64) -> f64 {
        match *self {
            Calibration::Identity => conf,
            Calibration::Logistic { k, x0 } => 1.0 / (1.0 + (-k * (conf - x0)).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageGain {
    /// Probability the stage makes the prediction correct.
    pub flip: f64,
    /// Fraction of the remaining confidence gap closed when it does.
    pub boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub datasets: Vec<DatasetSpec>,
    pub n_labels: usize,
    /// Label names; defaults to `class_0..class_{n_labels-1}`.
    pub labels: Option<Vec<String>>,
    pub conf_dist: BetaShape,
    pub calibration: Calibration,
    /// Gains for stages 1..=4.
    pub stage_gains: [StageGain; 4],
    pub variants_per_instance: usize,
    /// Emit stage 1 as variants only, leaving resolution to the cascade.
    pub variants_only: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 1000,
            datasets: vec![DatasetSpec {
                tag: "sim".into(),
                accuracy_offset: 0.0,
            }],
            n_labels: 3,
            labels: None,
            conf_dist: BetaShape { alpha: 2.0, beta: 1.0 },
            calibration: Calibration::Identity,
            stage_gains: [StageGain::default(); 4],
            variants_per_instance: 0,
            variants_only: false,
            seed: 0,
        }
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.n_labels < 2 {
            return bad("n_labels must be at least 2".into());
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.n_labels {
                return bad(format!("{} label names for n_labels = {}", labels.len(), self.n_labels));
            }
            let distinct: HashSet<_> = labels.iter().collect();
            if distinct.len() != labels.len() || labels.iter().any(String::is_empty) {
                return bad("label names must be distinct and non-empty".into());
            }
        }
        if self.datasets.is_empty() {
            return bad("at least one dataset is required".into());
        }
        let mut tags = HashSet::new();
        for d in &self.datasets {
            if d.tag.is_empty() || !tags.insert(d.tag.as_str()) {
                return bad(format!("dataset tag '{}' empty or repeated", d.tag));
            }
            if !d.accuracy_offset.is_finite() {
                return bad(format!("dataset '{}': accuracy_offset must be finite", d.tag));
            }
        }
        let BetaShape { alpha, beta } = self.conf_dist;
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return bad("conf_dist alpha and beta must be positive".into());
        }
        if let Calibration::Logistic { k, x0 } = self.calibration {
            if !(k.is_finite() && x0.is_finite()) {
                return bad("logistic k and x0 must be finite".into());
            }
        }
        for (i, g) in self.stage_gains.iter().enumerate() {
            if !unit(g.flip) || !unit(g.boost) {
                return bad(format!("stage {}: flip and boost must lie in [0,1]", i + 1));
            }
        }
        Ok(())
    }

    pub fn label_space(&self) -> LabelSpace {
        match &self.labels {
            Some(names) => LabelSpace::new(names.iter().cloned()),
            None => LabelSpace::new((0..self.n_labels).map(|i| format!("class_{i}"))),
        }
    }

    pub fn gain(&self, stage: u8) -> StageGain {
        match stage {
            1..=4 => self.stage_gains[usize::from(stage) - 1],
            _ => StageGain::default(),
        }
    }

    /// Source string stamped on simulated record sets: seed plus a digest of
    /// the full config.
    pub fn provenance(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("simulate:seed={}:config={hex}", self.seed)
    }

    /// Parses the TOML config format:
    ///
    /// ```toml
    /// n = 10000
    /// n_labels = 3
    /// seed = 7
    /// variants_per_instance = 5
    ///
    /// [conf_dist]
    /// alpha = 2.0
    /// beta = 1.0
    ///
    /// [calibration]
    /// kind = "logistic"
    /// k = 8.0
    /// x0 = 0.6
    ///
    /// [stages.3]
    /// flip = 0.5
    /// boost = 0.5
    ///
    /// [datasets.snli]
    /// accuracy_offset = 0.0
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let file: ConfigFile = toml::from_str(text)?;
        let defaults = SimConfig::default();
        let mut stage_gains = [StageGain::default(); 4];
        for (key, gain) in file.stages {
            let s: usize = key
                .parse()
                .ok()
                .filter(|s| (1..=4).contains(s))
                .ok_or_else(|| SimError::InvalidConfig(format!("stage key '{key}' must be 1..=4")))?;
            stage_gains[s - 1] = gain;
        }
        let datasets = if file.datasets.is_empty() {
            defaults.datasets
        } else {
            file.datasets
                .into_iter()
                .map(|(tag, d)| DatasetSpec {
                    tag,
                    accuracy_offset: d.accuracy_offset,
                })
                .collect()
        };
        let cfg = SimConfig {
            n: file.n.unwrap_or(defaults.n),
            datasets,
            n_labels: file
                .n_labels
                .or(file.labels.as_ref().map(Vec::len))
                .unwrap_or(defaults.n_labels),
            labels: file.labels,
            conf_dist: file.conf_dist.unwrap_or(defaults.conf_dist),
            calibration: file.calibration.unwrap_or(defaults.calibration),
            stage_gains,
            variants_per_instance: file.variants_per_instance.unwrap_or(0),
            variants_only: file.variants_only.unwrap_or(false),
            seed: file.seed.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    n: Option<usize>,
    n_labels: Option<usize>,
    labels: Option<Vec<String>>,
    seed: Option<u64>,
    variants_per_instance: Option<usize>,
    variants_only: Option<bool>,
    conf_dist: Option<BetaShape>,
    calibration: Option<Calibration>,
    #[serde(default)]
    stages: BTreeMap<String, StageGain>,
    #[serde(default)]
    datasets: BTreeMap<String, DatasetFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    #[serde(default)]
    accuracy_offset: f64,
}

fn instance_rng(seed: u64, tag: &str, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"stagewise-sim");
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index as u64);
    rng
}

fn boosted(conf: f64, boost: f64) -> f64 {
    if boost >= 1.0 {
        1.0
    } else {
        (conf + boost * (1.0 - conf)).min(1.0)
    }
}

fn simulate_instance(
    cfg: &SimConfig,
    ds: &DatasetSpec,
    index: usize,
    labels: &LabelSpace,
    beta: &Beta<f64>,
) -> InstanceRecord {
    let n_labels = labels.len();
    let floor = 1.0 / n_labels as f64;
    let mut rng = instance_rng(cfg.seed, &ds.tag, index);

    let gold = rng.random_range(0..n_labels);
    let x: f64 = beta.sample(&mut rng);
    let mut conf = floor + (1.0 - floor) * x;
    let p_correct = (cfg.calibration.apply(conf) + ds.accuracy_offset).clamp(0.0, 1.0);
    let u_correct: f64 = rng.random();
    let wrong = rng.random_range(0..n_labels - 1);
    let mut pred = if u_correct < p_correct {
        gold
    } else if wrong >= gold {
        wrong + 1
    } else {
        wrong
    };

    let label = |i: usize| labels.get(i).expect("label index in range").clone();
    let mut stages = vec![StageOutput::new(0, label(pred), conf)];
    for s in 1..=MAX_STAGE {
        let g = cfg.gain(s);
        let u: f64 = rng.random();
        if u < g.flip {
            pred = gold;
            conf = boosted(conf, g.boost);
        }
        let mut out = StageOutput::new(s, label(pred), conf);
        if s == VARIANT_STAGE && cfg.variants_per_instance > 0 {
            out.variants = (0..cfg.variants_per_instance)
                .map(|_| {
                    let keep: f64 = rng.random();
                    let other = rng.random_range(0..n_labels);
                    let jitter = rng.random_range(-VARIANT_JITTER..=VARIANT_JITTER);
                    let l = if keep < VARIANT_KEEP { pred } else { other };
                    Prediction::new(label(l), (conf + jitter).clamp(0.0, 1.0))
                })
                .collect();
            if cfg.variants_only {
                out.output = None;
            }
        }
        stages.push(out);
    }

    InstanceRecord {
        id: format!("{}-{index}", ds.tag),
        dataset: ds.tag.clone(),
        gold: label(gold),
        stages,
    }
}

/// Generates `n` records per dataset tag, in dataset order then index order.
pub fn simulate(cfg: &SimConfig) -> Result<RecordSet, SimError> {
    cfg.validate()?;
    let labels = cfg.label_space();
    let beta = Beta::new(cfg.conf_dist.alpha, cfg.conf_dist.beta)
        .map_err(|e| SimError::InvalidConfig(format!("conf_dist: {e}")))?;
    let cells: Vec<(&DatasetSpec, usize)> = cfg
        .datasets
        .iter()
        .flat_map(|d| (0..cfg.n).map(move |i| (d, i)))
        .collect();
    let records = cells
        .par_iter()
        .map(|&(d, i)| simulate_instance(cfg, d, i, &labels, &beta))
        .collect();
    Ok(RecordSet {
        labels,
        records,
        source: cfg.provenance(),
    })
}

/// What a simulated set's AUC must satisfy relative to stage 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AucExpectation {
    /// Stage outputs equal stage 0's, so the AUC equals the stage-0 AUC exactly.
    EqualToStage0,
    /// Every instance reaching the stage is fixed with confidence 1.
    Zero,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageExpectation {
    pub stage: u8,
    /// Expected accuracy of raw stage outputs and its tolerance (five
    /// standard deviations). Absent where the cascade resolves variants.
    pub accuracy: Option<(f64, f64)>,
    pub auc: AucExpectation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetExpectation {
    pub dataset: String,
    pub stages: Vec<StageExpectation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub datasets: Vec<DatasetExpectation>,
}

/// Expected per-stage behaviour of a set produced by [`simulate`] with `cfg`.
///
/// Accuracy expectations are conditional on the realized stage-0
/// confidences: each instance is correct at stage `s` with probability
/// `1 - (1 - p) * prod(1 - flip_t)`.
pub fn ground_truth_summary(cfg: &SimConfig, rs: &RecordSet) -> Result<GroundTruth, SimError> {
    let expected = cfg.provenance();
    if rs.source != expected {
        return Err(SimError::ProvenanceMismatch {
            expected,
            found: rs.source.clone(),
        });
    }
    let datasets = cfg
        .datasets
        .iter()
        .map(|ds| {
            let p0: Vec<f64> = rs
                .records
                .iter()
                .filter(|r| r.dataset == ds.tag)
                .filter_map(|r| r.stages.first()?.output.as_ref())
                .map(|p| (cfg.calibration.apply(p.conf) + ds.accuracy_offset).clamp(0.0, 1.0))
                .collect();
            let n = p0.len().max(1) as f64;
            let mut stay_wrong = 1.0;
            let mut untouched = true;
            let stages = (0..=MAX_STAGE)
                .map(|s| {
                    let g = cfg.gain(s);
                    stay_wrong *= 1.0 - g.flip;
                    untouched &= g.flip == 0.0;
                    let resolves_variants = s == VARIANT_STAGE && cfg.variants_only && cfg.variants_per_instance > 0;
                    let (mean, var) = p0.iter().fold((0.0, 0.0), |(m, v), &p| {
                        let q = 1.0 - (1.0 - p) * stay_wrong;
                        (m + q, v + q * (1.0 - q))
                    });
                    let accuracy = (!resolves_variants).then(|| (mean / n, 5.0 * var.sqrt() / n + 1e-12));
                    let auc = if resolves_variants {
                        AucExpectation::Unconstrained
                    } else if untouched {
                        AucExpectation::EqualToStage0
                    } else if s > 0 && g.flip == 1.0 && g.boost == 1.0 {
                        AucExpectation::Zero
                    } else {
                        AucExpectation::Unconstrained
                    };
                    StageExpectation { stage: s, accuracy, auc }
                })
                .collect();
            DatasetExpectation {
                dataset: ds.tag.clone(),
                stages,
            }
        })
        .collect();
    Ok(GroundTruth { datasets })
}

impl GroundTruth {
    /// Checks a record set and its evaluation against the expectations;
    /// returns one message per failed check.
    pub fn check(&self, rs: &RecordSet, reports: &[StageReport]) -> Vec<String> {
        let mut failures = Vec::new();
        for ds in &self.datasets {
            let resolved: Vec<_> = rs
                .records
                .iter()
                .filter(|r| r.dataset == ds.dataset)
                .map(|r| resolve_stages(r, &rs.labels))
                .collect();
            let auc_of = |stage: u8| {
                reports
                    .iter()
                    .find(|r| r.dataset == ds.dataset && r.stage == stage)
                    .map(|r| r.auc)
            };
            for exp in &ds.stages {
                if let Some((mean, tol)) = exp.accuracy {
                    let correct = resolved
                        .iter()
                        .filter(|st| st.iter().any(|x| x.stage == exp.stage && x.correct))
                        .count();
                    let acc = correct as f64 / resolved.len().max(1) as f64;
                    if (acc - mean).abs() > tol {
                        failures.push(format!(
                            "{} stage {}: accuracy {acc:.6} outside {mean:.6} ± {tol:.6}",
                            ds.dataset, exp.stage
                        ));
                    }
                }
                let (Some(a), Some(base)) = (auc_of(exp.stage), auc_of(0)) else {
                    continue;
                };
                match exp.auc {
                    AucExpectation::EqualToStage0 if a != base => failures.push(format!(
                        "{} stage {}: AUC {a} differs from stage-0 AUC {base}",
                        ds.dataset, exp.stage
                    )),
                    AucExpectation::Zero if a != 0.0 => {
                        failures.push(format!("{} stage {}: AUC {a} expected 0", ds.dataset, exp.stage))
                    }
                    _ => {}
                }
            }
        }
        failures
    }
}
