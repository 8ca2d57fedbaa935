//! The staged answer-or-abstain cascade.
//!
//! For a threshold `th`, an instance is answered at the first stage whose
//! confidence exceeds `th`; later stages are never consulted. Abstention
//! happens when even the last stage fails to clear it.
//!
//! For metrics every stage `s` also gets a carried pair `(c_s, p_s)`:
//! `(c_s, p_s) = (c_{s-1}, p_{s-1})` when `c_{s-1} > th`, otherwise the
//! stage-`s` output. Coverage then counts `c_s >= th`. The comparison for
//! carrying is strict while coverage is inclusive, so a confidence exactly
//! equal to `th` moves on to the next stage yet still counts as covered.

use rayon::prelude::*;
use thiserror::Error;

use crate::ensemble::aggregate_variants;
use crate::record::{InstanceRecord, Label, LabelSpace, Prediction, RecordSet, VARIANT_STAGE};

/// A stage output after variant resolution, with its correctness against gold.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedStage {
    pub stage: u8,
    pub pred: Prediction,
    pub correct: bool,
}

/// Resolves each stage of a record into a single prediction.
///
/// Stage-1 outputs given only as variants go through
/// [`aggregate_variants`] with stage 0 as the original. Resolution stops at
/// the first stage that cannot be resolved (invalid records only).
pub fn resolve_stages(rec: &InstanceRecord, labels: &LabelSpace) -> Vec<ResolvedStage> {
    let mut out: Vec<ResolvedStage> = Vec::with_capacity(rec.stages.len());
    for st in &rec.stages {
        let pred = match (&st.output, out.first()) {
            (Some(p), _) => p.clone(),
            (None, Some(orig)) if st.stage == VARIANT_STAGE => {
                match aggregate_variants(&orig.pred, &st.variants, labels) {
                    Ok(p) => p,
                    Err(_) => break,
                }
            }
            _ => break,
        };
        let correct = pred.label == rec.gold;
        out.push(ResolvedStage {
            stage: st.stage,
            pred,
            correct,
        });
    }
    out
}

/// Index of the stage whose output is carried at each stage.
pub(crate) fn carry_sources<F>(len: usize, conf: F, th: f64, out: &mut Vec<usize>)
where
    F: Fn(usize) -> f64,
{
    out.clear();
    if len == 0 {
        return;
    }
    let mut src = 0;
    out.push(src);
    for s in 1..len {
        if conf(src) <= th {
            src = s;
        }
        out.push(src);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Carried {
    pub stage: u8,
    pub conf: f64,
    pub pred: Label,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    pub id: String,
    pub threshold: f64,
    /// One entry per present stage, in stage order.
    pub carried: Vec<Carried>,
    pub final_stage: u8,
    pub answered: bool,
    pub final_pred: Option<Label>,
}

impl CascadeOutcome {
    /// Carried value at `stage`. A record that stops early keeps its last
    /// carried value for every later stage.
    pub fn carried_at(&self, stage: u8) -> Option<&Carried> {
        self.carried
            .iter()
            .rev()
            .find(|c| c.stage <= stage)
    }

    /// `(c_s >= th, correct)` at `stage`.
    pub fn covered_at(&self, stage: u8) -> Option<(bool, bool)> {
        self.carried_at(stage)
            .map(|c| (c.conf >= self.threshold, c.correct))
    }
}

fn outcome_from_resolved(id: &str, stages: &[ResolvedStage], th: f64) -> CascadeOutcome {
    let mut src = Vec::with_capacity(stages.len());
    carry_sources(stages.len(), |i| stages[i].pred.conf, th, &mut src);
    let carried: Vec<Carried> = stages
        .iter()
        .zip(&src)
        .map(|(st, &from)| {
            let f = &stages[from];
            Carried {
                stage: st.stage,
                conf: f.pred.conf,
                pred: f.pred.label.clone(),
                correct: f.correct,
            }
        })
        .collect();
    let (final_stage, answered, final_pred) = match (src.last(), carried.last()) {
        (Some(&from), Some(last)) => {
            let answered = last.conf >= th;
            (
                stages[from].stage,
                answered,
                answered.then(|| last.pred.clone()),
            )
        }
        _ => (0, false, None),
    };
    CascadeOutcome {
        id: id.to_owned(),
        threshold: th,
        carried,
        final_stage,
        answered,
        final_pred,
    }
}

/// Runs one record through the cascade at threshold `th`.
pub fn run_cascade(rec: &InstanceRecord, th: f64, labels: &LabelSpace) -> CascadeOutcome {
    let stages = resolve_stages(rec, labels);
    outcome_from_resolved(&rec.id, &stages, th)
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("threshold grid must not be empty")]
    Empty,
    #[error("threshold {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("thresholds must be strictly ascending")]
    NotAscending,
    #[error("threshold grid must include 0.0")]
    MissingZero,
}

/// Strictly ascending thresholds in [0,1], starting at 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<Self, GridError> {
        if thresholds.is_empty() {
            return Err(GridError::Empty);
        }
        if let Some(&t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(GridError::OutOfRange(t));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GridError::NotAscending);
        }
        if thresholds[0] != 0.0 {
            return Err(GridError::MissingZero);
        }
        Ok(ThresholdGrid(thresholds))
    }

    /// `k + 1` evenly spaced thresholds `i / k`.
    pub fn uniform(k: usize) -> Self {
        let k = k.max(1);
        ThresholdGrid((0..=k).map(|i| i as f64 / k as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds a point strictly inside every gap between consecutive
    /// thresholds. Between two observed confidences every comparison is
    /// settled the same way, so one interior point per gap completes the
    /// sweep over all thresholds in [0,1].
    pub fn with_interior_points(&self) -> Self {
        let mut out = Vec::with_capacity(self.0.len() * 2);
        for w in self.0.windows(2) {
            out.push(w[0]);
            let mid = w[0] + (w[1] - w[0]) / 2.0;
            if mid > w[0] && mid < w[1] {
                out.push(mid);
            }
        }
        out.push(*self.0.last().expect("non-empty grid"));
        ThresholdGrid(out)
    }
}

/// Which thresholds a sweep evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridPolicy {
    /// Every distinct observed confidence, plus 0.0.
    #[default]
    Observed,
    /// Observed confidences plus one point inside each gap.
    Complete,
}

fn grid_from_confs(mut confs: Vec<f64>) -> ThresholdGrid {
    confs.push(0.0);
    confs.retain(|c| (0.0..=1.0).contains(c));
    confs.sort_by(f64::total_cmp);
    // dedup merges -0.0 into 0.0; normalize the sign of the survivor
    confs.dedup();
    confs[0] = 0.0;
    ThresholdGrid(confs)
}

/// Distinct resolved confidences at any stage of any record, plus 0.0.
pub fn default_grid(rs: &RecordSet) -> ThresholdGrid {
    let confs = rs
        .records
        .iter()
        .flat_map(|r| resolve_stages(r, &rs.labels))
        .map(|s| s.pred.conf)
        .collect();
    grid_from_confs(confs)
}

pub fn grid_for(rs: &RecordSet, policy: GridPolicy) -> ThresholdGrid {
    let grid = default_grid(rs);
    match policy {
        GridPolicy::Observed => grid,
        GridPolicy::Complete => grid.with_interior_points(),
    }
}

/// Outcomes for every (record, threshold) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeTable {
    pub thresholds: Vec<f64>,
    /// `rows[record][threshold]`
    pub rows: Vec<Vec<CascadeOutcome>>,
}

impl CascadeTable {
    pub fn get(&self, record: usize, threshold: usize) -> Option<&CascadeOutcome> {
        self.rows.get(record).and_then(|r| r.get(threshold))
    }

    /// All outcomes at one threshold column.
    pub fn column(&self, threshold: usize) -> Vec<&CascadeOutcome> {
        self.rows.iter().filter_map(|r| r.get(threshold)).collect()
    }
}

/// Runs the cascade over the cross product of records and thresholds.
/// Parallel across records; the result does not depend on worker count.
pub fn cascade_matrix(rs: &RecordSet, grid: &ThresholdGrid) -> CascadeTable {
    let rows = rs
        .records
        .par_iter()
        .map(|rec| {
            let stages = resolve_stages(rec, &rs.labels);
            grid.as_slice()
                .iter()
                .map(|&th| outcome_from_resolved(&rec.id, &stages, th))
                .collect()
        })
        .collect();
    CascadeTable {
        thresholds: grid.as_slice().to_vec(),
        rows,
    }
}
