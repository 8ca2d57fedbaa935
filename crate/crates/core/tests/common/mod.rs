//! Test-only oracles, written directly from the metric definitions and kept
//! apart from the library's sweep implementation.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use stagewise::record::{InstanceRecord, Label, LabelSpace, Prediction, RecordSet, StageOutput};

pub const LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

pub fn nli() -> LabelSpace {
    LabelSpace::new(LABELS)
}

/// Confidence with frequent exact ties on a coarse lattice.
fn random_conf<R: Rng>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        f64::from(rng.random_range(0..=4u8)) / 4.0
    } else {
        rng.random::<f64>()
    }
}

fn random_label<R: Rng>(rng: &mut R) -> &'static str {
    LABELS[rng.random_range(0..LABELS.len())]
}

/// A record set of up to `max_n` ragged records over one or two dataset
/// tags. Some stage-1 outputs are given only as variants.
pub fn random_record_set<R: Rng>(rng: &mut R, max_n: usize, max_stages: usize) -> RecordSet {
    let n = rng.random_range(1..=max_n);
    let records = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=max_stages);
            let stages = (0..len)
                .map(|s| {
                    if s == 1 && rng.random_bool(0.3) {
                        let k = rng.random_range(1..=4);
                        StageOutput::variants_only(
                            1,
                            (0..k).map(|_| Prediction::new(random_label(rng), random_conf(rng))).collect(),
                        )
                    } else {
                        StageOutput::new(s as u8, random_label(rng), random_conf(rng))
                    }
                })
                .collect();
            InstanceRecord {
                id: format!("r{i}"),
                dataset: if rng.random_bool(0.7) { "a".into() } else { "b".into() },
                gold: Label::from(random_label(rng)),
                stages,
            }
        })
        .collect();
    RecordSet {
        labels: nli(),
        records,
        source: "random".into(),
    }
}

/// Stage-1 ensemble restated by enumeration over the label space.
fn oracle_ensemble(original: &Prediction, variants: &[Prediction], labels: &LabelSpace) -> Prediction {
    let count = |l: &Label| variants.iter().filter(|v| &v.label == l).count();
    let top = labels.iter().map(count).max().unwrap();
    let tied: Vec<&Label> = labels.iter().filter(|l| count(l) == top).collect();
    let pick = if tied.contains(&&original.label) { original.label.clone() } else { tied[0].clone() };
    let confs: Vec<f64> = variants.iter().filter(|v| v.label == pick).map(|v| v.conf).collect();
    let conf = if pick == original.label {
        confs.iter().cloned().fold(0.0, f64::max)
    } else {
        let mut c = confs.clone();
        c.sort_by(f64::total_cmp);
        c.iter().sum::<f64>() / c.len() as f64
    };
    Prediction { label: pick, conf }
}

/// (conf, correct) per stage.
pub fn oracle_stages(rec: &InstanceRecord, labels: &LabelSpace) -> Vec<(f64, bool)> {
    let mut out: Vec<(f64, bool)> = Vec::new();
    let mut stage0: Option<Prediction> = None;
    for st in &rec.stages {
        let p = match &st.output {
            Some(p) => p.clone(),
            None => oracle_ensemble(stage0.as_ref().unwrap(), &st.variants, labels),
        };
        if st.stage == 0 {
            stage0 = Some(p.clone());
        }
        out.push((p.conf, p.label == rec.gold));
    }
    out
}

/// Carried (c_s, correct_s) for stages `0..=top`, straight from the
/// recurrence. Stages past the record's end repeat its last value.
pub fn oracle_carried(stages: &[(f64, bool)], th: f64, top: usize) -> Vec<(f64, bool)> {
    let mut carried = vec![stages[0]];
    for s in 1..=top {
        let prev = carried[s - 1];
        if s >= stages.len() || prev.0 > th {
            carried.push(prev);
        } else {
            carried.push(stages[s]);
        }
    }
    carried
}

/// AUC for every (dataset, stage), recomputing the cascade from scratch at
/// every observed threshold.
pub fn brute_force_auc(rs: &RecordSet) -> BTreeMap<(String, u8), f64> {
    let mut out = BTreeMap::new();
    let mut tags: Vec<&str> = rs.records.iter().map(|r| r.dataset.as_str()).collect();
    tags.sort();
    tags.dedup();
    for tag in tags {
        let recs: Vec<Vec<(f64, bool)>> = rs
            .records
            .iter()
            .filter(|r| r.dataset == tag)
            .map(|r| oracle_stages(r, &rs.labels))
            .collect();
        let top = recs.iter().map(|r| r.len()).max().unwrap() - 1;
        let mut grid: Vec<f64> = recs.iter().flatten().map(|x| x.0).collect();
        grid.push(0.0);
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        let n = recs.len() as f64;
        for s in 0..=top {
            // coverage -> lowest risk
            let mut points: Vec<(f64, f64)> = Vec::new();
            for &th in &grid {
                let mut covered = 0usize;
                let mut correct = 0usize;
                for r in &recs {
                    let c = oracle_carried(r, th, top)[s];
                    if c.0 >= th {
                        covered += 1;
                        correct += usize::from(c.1);
                    }
                }
                if covered == 0 {
                    continue;
                }
                let cov = covered as f64 / n;
                let risk = (covered - correct) as f64 / covered as f64;
                match points.iter_mut().find(|p| p.0 == cov) {
                    Some(p) => p.1 = p.1.min(risk),
                    None => points.push((cov, risk)),
                }
            }
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            out.insert((tag.to_owned(), s as u8), 100.0 * integrate(&points));
        }
    }
    out
}

/// Leading rectangle plus trapezoids over (coverage, risk) points.
pub fn integrate(points: &[(f64, f64)]) -> f64 {
    let mut area = points[0].0 * points[0].1;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}

/// Midpoint-rule integral of the curve's piecewise-linear interpolant
/// (flat before the first point) over `samples` cells.
pub fn numeric_auc(points: &[(f64, f64)], samples: usize) -> f64 {
    let last = points.last().unwrap().0;
    let h = last / samples as f64;
    let mut area = 0.0;
    for i in 0..samples {
        let x = (i as f64 + 0.5) * h;
        let y = if x <= points[0].0 {
            points[0].1
        } else {
            let j = points.windows(2).position(|w| x <= w[1].0).unwrap();
            let (a, b) = (points[j], points[j + 1]);
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        };
        area += y * h;
    }
    100.0 * area
}
