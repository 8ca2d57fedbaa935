//! Stage-wise coverage, selective risk, risk-coverage curves and their area.
//!
//! AUC is integrated over coverage in [0, 1]: a rectangle from coverage 0 to
//! the first point at that point's risk, then trapezoids between consecutive
//! points. It is reported in percentage points.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::cascade::{carry_sources, grid_for, resolve_stages, CascadeOutcome, GridPolicy, ResolvedStage, ThresholdGrid};
use crate::record::RecordSet;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no outcomes (n = 0)")]
    NoOutcomes,
    #[error("empty curve")]
    EmptyCurve,
    #[error("curve coverage must be strictly ascending")]
    UnsortedCurve,
    #[error("stage-0 AUC is zero; improvement undefined")]
    ZeroBaseline,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageAccuracy {
    pub coverage: f64,
    /// Absent when nothing is covered.
    pub accuracy: Option<f64>,
}

/// Coverage and accuracy-on-covered at `stage` for outcomes computed at one
/// threshold. `n` is the number of outcomes.
pub fn coverage_accuracy(outcomes: &[CascadeOutcome], stage: u8) -> Result<CoverageAccuracy, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::NoOutcomes);
    }
    let (covered, correct) = outcomes
        .iter()
        .filter_map(|o| o.covered_at(stage))
        .filter(|(cov, _)| *cov)
        .fold((0usize, 0usize), |(n, k), (_, ok)| (n + 1, k + usize::from(ok)));
    let n = outcomes.len();
    Ok(CoverageAccuracy {
        coverage: covered as f64 / n as f64,
        accuracy: (covered > 0).then(|| correct as f64 / covered as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCoveragePoint {
    pub threshold: f64,
    pub coverage: f64,
    pub risk: f64,
    pub accuracy: f64,
}

/// Covered/correct counts at every grid threshold for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSweep {
    pub stage: u8,
    pub n: usize,
    pub thresholds: Vec<f64>,
    pub covered: Vec<usize>,
    pub correct: Vec<usize>,
}

impl StageSweep {
    /// Risk-coverage points: coverage-0 thresholds dropped, one point per
    /// distinct coverage (lowest risk, then lowest threshold), ascending.
    pub fn curve(&self) -> Vec<RiskCoveragePoint> {
        // covered count -> (correct, grid index)
        let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (i, (&cov, &ok)) in self.covered.iter().zip(&self.correct).enumerate() {
            if cov == 0 {
                continue;
            }
            best.entry(cov)
                .and_modify(|e| {
                    if ok > e.0 {
                        *e = (ok, i);
                    }
                })
                .or_insert((ok, i));
        }
        best.into_iter()
            .map(|(cov, (ok, i))| RiskCoveragePoint {
                threshold: self.thresholds[i],
                coverage: cov as f64 / self.n as f64,
                risk: (cov - ok) as f64 / cov as f64,
                accuracy: ok as f64 / cov as f64,
            })
            .collect()
    }
}

struct Diff {
    covered: Vec<Vec<i64>>,
    correct: Vec<Vec<i64>>,
}

impl Diff {
    fn new(stages: usize, len: usize) -> Self {
        Diff {
            covered: vec![vec![0; len + 1]; stages],
            correct: vec![vec![0; len + 1]; stages],
        }
    }

    fn merge(mut self, other: Diff) -> Diff {
        for (a, b) in self.covered.iter_mut().zip(other.covered) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.correct.iter_mut().zip(other.correct) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self
    }
}

/// Adds one record's contribution to every stage.
///
/// A record's cascade state only changes where `th` crosses one of its own
/// confidences, so the grid splits into at most `2k + 1` runs (below, at and
/// between its `k` distinct confidences) with constant state. One cascade
/// per run is enough.
fn accumulate(stages: &[ResolvedStage], grid: &[f64], diff: &mut Diff, src: &mut Vec<usize>) {
    if stages.is_empty() {
        return;
    }
    let mut breaks: Vec<f64> = stages.iter().map(|s| s.pred.conf).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut runs = Vec::with_capacity(2 * breaks.len() + 1);
    let mut start = 0;
    for &b in &breaks {
        let at = grid.partition_point(|&t| t < b);
        let past = grid.partition_point(|&t| t <= b);
        runs.push((start, at));
        runs.push((at, past));
        start = past;
    }
    runs.push((start, grid.len()));

    let n_stages = diff.covered.len();
    for (lo, hi) in runs {
        if lo >= hi {
            continue;
        }
        let th = grid[lo];
        carry_sources(stages.len(), |i| stages[i].pred.conf, th, src);
        for s in 0..n_stages {
            let from = src[s.min(stages.len() - 1)];
            let st = &stages[from];
            if st.pred.conf >= th {
                diff.covered[s][lo] += 1;
                diff.covered[s][hi] -= 1;
                if st.correct {
                    diff.correct[s][lo] += 1;
                    diff.correct[s][hi] -= 1;
                }
            }
        }
    }
}

fn prefix(d: &[i64], len: usize) -> Vec<usize> {
    let mut acc = 0i64;
    d[..len]
        .iter()
        .map(|x| {
            acc += x;
            acc as usize
        })
        .collect()
}

/// Highest stage index present in any record.
pub fn max_stage(rs: &RecordSet) -> Option<u8> {
    rs.records.iter().filter_map(|r| r.last_stage()).max()
}

/// Sweeps stages `0..=max_stage` over the grid in one pass over the records.
/// Integer counts are merged, so results are identical for any worker count.
pub fn sweep_stages(rs: &RecordSet, grid: &ThresholdGrid) -> Vec<StageSweep> {
    let Some(top) = max_stage(rs) else {
        return Vec::new();
    };
    let n_stages = usize::from(top) + 1;
    let g = grid.as_slice();
    let diff = rs
        .records
        .par_chunks(512)
        .fold(
            || (Diff::new(n_stages, g.len()), Vec::new()),
            |(mut d, mut src), chunk| {
                for rec in chunk {
                    accumulate(&resolve_stages(rec, &rs.labels), g, &mut d, &mut src);
                }
                (d, src)
            },
        )
        .map(|(d, _)| d)
        .reduce(|| Diff::new(n_stages, g.len()), Diff::merge);

    (0..n_stages)
        .map(|s| StageSweep {
            stage: s as u8,
            n: rs.len(),
            thresholds: g.to_vec(),
            covered: prefix(&diff.covered[s], g.len()),
            correct: prefix(&diff.correct[s], g.len()),
        })
        .collect()
}

/// Counts for a single stage. Stages past a record's last stage use its last
/// carried value.
pub fn sweep_stage(rs: &RecordSet, stage: u8, grid: &ThresholdGrid) -> StageSweep {
    let sweeps = sweep_stages(rs, grid);
    match sweeps.last() {
        None => StageSweep {
            stage,
            n: rs.len(),
            thresholds: grid.as_slice().to_vec(),
            covered: vec![0; grid.len()],
            correct: vec![0; grid.len()],
        },
        Some(last) if usize::from(stage) >= sweeps.len() => StageSweep { stage, ..last.clone() },
        Some(_) => sweeps.into_iter().nth(usize::from(stage)).expect("stage in range"),
    }
}

pub fn risk_coverage_curve(rs: &RecordSet, stage: u8, grid: &ThresholdGrid) -> Vec<RiskCoveragePoint> {
    sweep_stage(rs, stage, grid).curve()
}

/// Area under a risk-coverage curve, in percentage points.
pub fn auc(curve: &[RiskCoveragePoint]) -> Result<f64, MetricsError> {
    let first = curve.first().ok_or(MetricsError::EmptyCurve)?;
    if curve.windows(2).any(|w| w[0].coverage >= w[1].coverage) {
        return Err(MetricsError::UnsortedCurve);
    }
    let mut area = first.coverage * first.risk;
    for w in curve.windows(2) {
        area += (w[0].risk + w[1].risk) / 2.0 * (w[1].coverage - w[0].coverage);
    }
    Ok(100.0 * area)
}

/// Relative AUC reduction against stage 0, in percent.
pub fn improvement(auc_0: f64, auc_s: f64) -> Result<f64, MetricsError> {
    if auc_0 == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok(100.0 * (auc_0 - auc_s) / auc_0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub dataset: String,
    pub stage: u8,
    pub auc: f64,
    /// `None` when the dataset's stage-0 AUC is zero and `stage > 0`.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub grid: GridPolicy,
}

/// Per-dataset, per-stage AUC and improvement over stage 0, using each
/// dataset's own observed-confidence grid.
pub fn evaluate(rs: &RecordSet) -> Vec<StageReport> {
    evaluate_with(rs, EvalOptions::default())
}

pub fn evaluate_with(rs: &RecordSet, opts: EvalOptions) -> Vec<StageReport> {
    rs.datasets()
        .into_iter()
        .flat_map(|tag| {
            let subset = rs.filter_dataset(&tag);
            let grid = grid_for(&subset, opts.grid);
            let aucs: Vec<f64> = sweep_stages(&subset, &grid)
                .iter()
                .map(|sw| auc(&sw.curve()).unwrap_or(0.0))
                .collect();
            let base = aucs.first().copied().unwrap_or(0.0);
            aucs.into_iter()
                .enumerate()
                .map(|(s, a)| StageReport {
                    dataset: tag.clone(),
                    stage: s as u8,
                    auc: a,
                    improvement_pct: if s == 0 { Some(0.0) } else { improvement(base, a).ok() },
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Six-decimal fixed notation without a negative zero.
pub fn fmt6(x: f64) -> String {
    format!("{:.6}", if x == 0.0 { 0.0 } else { x })
}

/// Writes `stage,threshold,coverage,risk,accuracy`.
pub fn write_curve_csv<W: Write>(stage: u8, curve: &[RiskCoveragePoint], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "threshold", "coverage", "risk", "accuracy"])?;
    for p in curve {
        w.write_record([
            stage.to_string(),
            fmt6(p.threshold),
            fmt6(p.coverage),
            fmt6(p.risk),
            fmt6(p.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `dataset,stage,auc,improvement_pct`; an undefined improvement is
/// left empty.
pub fn write_report_csv<W: Write>(reports: &[StageReport], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "stage", "auc", "improvement_pct"])?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.stage.to_string(),
            fmt6(r.auc),
            r.improvement_pct.map(fmt6).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{cascade_matrix, default_grid, run_cascade};
    use crate::record::{InstanceRecord, Label, LabelSpace, StageOutput};

    fn rec(id: &str, dataset: &str, gold: &str, stages: &[(&str, f64)]) -> InstanceRecord {
        InstanceRecord {
            id: id.into(),
            dataset: dataset.into(),
            gold: Label::from(gold),
            stages: stages
                .iter()
                .enumerate()
                .map(|(i, (l, c))| StageOutput::new(i as u8, *l, *c))
                .collect(),
        }
    }

    fn set(records: Vec<InstanceRecord>) -> RecordSet {
        RecordSet {
            labels: LabelSpace::new(["E", "C", "N"]),
            records,
            source: String::new(),
        }
    }

    /// conf 0.9 correct, 0.6 wrong, 0.3 correct
    fn three() -> RecordSet {
        set(vec![
            rec("a", "d", "E", &[("E", 0.9)]),
            rec("b", "d", "E", &[("C", 0.6)]),
            rec("c", "d", "E", &[("E", 0.3)]),
        ])
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn coverage_accuracy_counts() {
        let rs = three();
        let outcomes: Vec<_> = rs.records.iter().map(|r| run_cascade(r, 0.5, &rs.labels)).collect();
        // enumeration: covered = {a, b}, correct among covered = {a}
        let ca = coverage_accuracy(&outcomes, 0).unwrap();
        assert!(close(ca.coverage, 2.0 / 3.0, 1e-15));
        assert_eq!(ca.accuracy, Some(0.5));

        let all: Vec<_> = rs.records.iter().map(|r| run_cascade(r, 0.0, &rs.labels)).collect();
        let ca = coverage_accuracy(&all[..1], 0).unwrap();
        assert_eq!((ca.coverage, ca.accuracy), (1.0, Some(1.0)));

        let none: Vec<_> = rs.records.iter().map(|r| run_cascade(r, 0.95, &rs.labels)).collect();
        let ca = coverage_accuracy(&none, 0).unwrap();
        assert_eq!((ca.coverage, ca.accuracy), (0.0, None));

        assert!(matches!(coverage_accuracy(&[], 0), Err(MetricsError::NoOutcomes)));
    }

    #[test]
    fn three_record_curve_and_auc() {
        let rs = three();
        let curve = risk_coverage_curve(&rs, 0, &default_grid(&rs));
        let pts: Vec<_> = curve.iter().map(|p| (p.coverage, p.risk)).collect();
        let want = [(1.0 / 3.0, 0.0), (2.0 / 3.0, 0.5), (1.0, 1.0 / 3.0)];
        assert_eq!(pts.len(), 3);
        for (g, w) in pts.iter().zip(want) {
            assert!(close(g.0, w.0, 1e-15) && close(g.1, w.1, 1e-15), "{g:?} vs {w:?}");
        }
        let area = auc(&curve).unwrap();
        let hand = 100.0 * (0.0 / 3.0 + (0.0 + 0.5) / 2.0 / 3.0 + (0.5 + 1.0 / 3.0) / 2.0 / 3.0);
        assert!(close(area, hand, 1e-9));
        assert!(close(area, 22.2222, 1e-4));
    }

    #[test]
    fn trivial_bounds() {
        let right = set((0..5).map(|i| rec(&i.to_string(), "d", "E", &[("E", 0.2 + 0.1 * i as f64)])).collect());
        let curve = risk_coverage_curve(&right, 0, &default_grid(&right));
        assert!(curve.iter().all(|p| p.risk == 0.0));
        assert_eq!(auc(&curve).unwrap(), 0.0);

        let wrong = set((0..5).map(|i| rec(&i.to_string(), "d", "E", &[("C", 1.0)])).collect());
        let curve = risk_coverage_curve(&wrong, 0, &default_grid(&wrong));
        assert_eq!(curve.len(), 1);
        assert_eq!((curve[0].coverage, curve[0].risk), (1.0, 1.0));
        assert_eq!(auc(&curve).unwrap(), 100.0);
    }

    #[test]
    fn single_record_curve() {
        let rs = set(vec![rec("a", "d", "E", &[("C", 0.4)])]);
        let curve = risk_coverage_curve(&rs, 0, &default_grid(&rs));
        assert_eq!(curve.len(), 1);
        assert_eq!((curve[0].coverage, curve[0].risk), (1.0, 1.0));
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(auc(&[]), Err(MetricsError::EmptyCurve)));
        let p = RiskCoveragePoint { threshold: 0.0, coverage: 0.5, risk: 0.1, accuracy: 0.9 };
        assert!(matches!(auc(&[p, p]), Err(MetricsError::UnsortedCurve)));
    }

    #[test]
    fn improvement_formula() {
        assert_eq!(improvement(31.0, 31.0).unwrap(), 0.0);
        assert!(close(improvement(57.2, 16.005).unwrap(), 72.02, 0.01));
        assert!(close(improvement(57.2, 25.81).unwrap(), 54.88, 0.01));
        assert!(matches!(improvement(0.0, 1.0), Err(MetricsError::ZeroBaseline)));
    }

    #[test]
    fn evaluate_groups_by_dataset() {
        let mut records = three().records;
        records.push(rec("x", "other", "E", &[("C", 0.7), ("E", 0.9)]));
        records.push(rec("y", "other", "C", &[("C", 0.8), ("C", 0.8)]));
        let reports = evaluate(&set(records));
        let tags: Vec<_> = reports.iter().map(|r| (r.dataset.as_str(), r.stage)).collect();
        assert_eq!(tags, [("d", 0), ("other", 0), ("other", 1)]);
        assert!(close(reports[0].auc, 22.2222, 1e-4));
        assert_eq!(reports[0].improvement_pct, Some(0.0));
    }

    #[test]
    fn single_stage_set_reports_zero_improvement() {
        let reports = evaluate(&three());
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].improvement_pct, Some(0.0));
    }

    #[test]
    fn zero_baseline_leaves_improvement_undefined() {
        let rs = set(vec![rec("a", "d", "E", &[("E", 0.9), ("C", 0.95)])]);
        let reports = evaluate(&rs);
        assert_eq!(reports[0].auc, 0.0);
        assert_eq!(reports[1].improvement_pct, None);
    }

    #[test]
    fn interior_thresholds_matter_after_stage_zero() {
        // for th strictly between 0.25 and 0.5 the first record is carried
        // and the second is uncovered; no observed threshold gives that state
        let rs = set(vec![
            rec("a", "d", "E", &[("C", 0.5), ("C", 0.25)]),
            rec("b", "d", "E", &[("E", 0.25), ("C", 0.25)]),
        ]);
        let observed = evaluate(&rs);
        let complete = evaluate_with(&rs, EvalOptions { grid: GridPolicy::Complete });
        assert!(close(observed[1].auc, 50.0, 1e-9));
        assert!(close(complete[1].auc, 87.5, 1e-9));
        assert_eq!(observed[0].auc, complete[0].auc);
    }

    #[test]
    fn sweep_matches_matrix() {
        let rs = set(vec![
            rec("a", "d", "E", &[("E", 0.3), ("C", 0.8), ("E", 0.5)]),
            rec("b", "d", "C", &[("C", 0.5)]),
            rec("c", "d", "N", &[("E", 0.5), ("N", 0.5), ("N", 0.95)]),
            rec("e", "d", "N", &[("N", 0.8), ("E", 0.3)]),
        ]);
        let grid = default_grid(&rs).with_interior_points();
        let table = cascade_matrix(&rs, &grid);
        let sweeps = sweep_stages(&rs, &grid);
        for sw in &sweeps {
            for j in 0..grid.len() {
                let col: Vec<CascadeOutcome> = table.column(j).into_iter().cloned().collect();
                let ca = coverage_accuracy(&col, sw.stage).unwrap();
                assert_eq!(ca.coverage, sw.covered[j] as f64 / 4.0);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let rs = three();
        let curve = risk_coverage_curve(&rs, 0, &default_grid(&rs));
        let mut buf = Vec::new();
        write_curve_csv(0, &curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "stage,threshold,coverage,risk,accuracy\n\
             0,0.900000,0.333333,0.000000,1.000000\n\
             0,0.600000,0.666667,0.500000,0.500000\n\
             0,0.000000,1.000000,0.333333,0.666667\n"
        );

        let mut buf = Vec::new();
        write_report_csv(&evaluate(&rs), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "dataset,stage,auc,improvement_pct\nd,0,22.222222,0.000000\n");
    }
}
