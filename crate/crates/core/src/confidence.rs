//! MaxProb confidence and confidence-vs-accuracy buckets.

use std::io::Write;

use thiserror::Error;

use crate::cascade::resolve_stages;
use crate::metrics::fmt6;
use crate::record::{Label, LabelSpace, RecordSet};

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("probability vector needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("probability {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
    #[error("probability vector has {probs} entries but label space has {labels}")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("bucket count must be at least 1")]
    NoBuckets,
    #[error("no record has stage {0}")]
    MissingStage(u8),
}

const SUM_TOLERANCE: f64 = 1e-9;

/// Class probabilities in label-space order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, ConfidenceError> {
        if probs.len() < 2 {
            return Err(ConfidenceError::TooShort(probs.len()));
        }
        if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ConfidenceError::OutOfRange(p));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ConfidenceError::BadSum(sum));
        }
        Ok(ProbVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Label of the largest probability and that probability. Ties go to the
/// lowest index.
pub fn max_prob(p: &ProbVector, labels: &LabelSpace) -> Result<(Label, f64), ConfidenceError> {
    if p.0.len() != labels.len() {
        return Err(ConfidenceError::LengthMismatch {
            probs: p.0.len(),
            labels: labels.len(),
        });
    }
    let (idx, conf) = p
        .0
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
    Ok((labels.get(idx).expect("length checked").clone(), conf))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub correct: usize,
}

impl ConfidenceBucket {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }

    pub fn midpoint(&self) -> f64 {
        (self.lo + self.hi) / 2.0
    }
}

/// Index of the equal-width bucket holding `conf`: `[lo, hi)`, last closed.
fn bucket_index(conf: f64, n: usize) -> usize {
    let lo = |i: usize| i as f64 / n as f64;
    let mut i = ((conf * n as f64).floor().max(0.0) as usize).min(n - 1);
    while i > 0 && conf < lo(i) {
        i -= 1;
    }
    while i + 1 < n && conf >= lo(i + 1) {
        i += 1;
    }
    i
}

/// Accuracy of the raw stage-`stage` predictions grouped by confidence.
pub fn bucketed_accuracy(rs: &RecordSet, stage: u8, n_buckets: usize) -> Result<Vec<ConfidenceBucket>, ConfidenceError> {
    if n_buckets == 0 {
        return Err(ConfidenceError::NoBuckets);
    }
    let mut buckets: Vec<ConfidenceBucket> = (0..n_buckets)
        .map(|i| ConfidenceBucket {
            lo: i as f64 / n_buckets as f64,
            hi: (i + 1) as f64 / n_buckets as f64,
            count: 0,
            correct: 0,
        })
        .collect();
    let mut seen = false;
    for rec in &rs.records {
        let resolved = resolve_stages(rec, &rs.labels);
        let Some(st) = resolved.iter().find(|s| s.stage == stage) else {
            continue;
        };
        seen = true;
        let b = &mut buckets[bucket_index(st.pred.conf, n_buckets)];
        b.count += 1;
        b.correct += usize::from(st.correct);
    }
    if !seen {
        return Err(ConfidenceError::MissingStage(stage));
    }
    Ok(buckets)
}

/// Writes `lo,hi,count,accuracy`; empty buckets leave accuracy blank.
pub fn write_buckets_csv<W: Write>(buckets: &[ConfidenceBucket], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lo", "hi", "count", "accuracy"])?;
    for b in buckets {
        w.write_record([fmt6(b.lo), fmt6(b.hi), b.count.to_string(), b.accuracy().map(fmt6).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{InstanceRecord, StageOutput};
    use proptest::prelude::*;

    fn nli() -> LabelSpace {
        LabelSpace::new(["entailment", "contradiction", "neutral"])
    }

    #[test]
    fn max_prob_examples() {
        let l = nli();
        let (lab, c) = max_prob(&ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap(), &l).unwrap();
        assert_eq!((lab.as_str(), c), ("neutral", 0.5));
        let (lab, c) = max_prob(&ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap(), &l).unwrap();
        assert_eq!((lab.as_str(), c), ("entailment", 1.0));
        let third = 1.0 / 3.0;
        let (lab, c) = max_prob(&ProbVector::new(vec![third; 3]).unwrap(), &l).unwrap();
        assert_eq!((lab.as_str(), c), ("entailment", third));
    }

    #[test]
    fn prob_vector_checks() {
        assert_eq!(ProbVector::new(vec![1.0]), Err(ConfidenceError::TooShort(1)));
        assert_eq!(ProbVector::new(vec![1.2, -0.2]), Err(ConfidenceError::OutOfRange(1.2)));
        assert!(matches!(ProbVector::new(vec![0.5, 0.4]), Err(ConfidenceError::BadSum(_))));
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(
            max_prob(&p, &nli()),
            Err(ConfidenceError::LengthMismatch { probs: 2, labels: 3 })
        );
    }

    fn set(rows: &[(f64, bool)]) -> RecordSet {
        RecordSet {
            labels: LabelSpace::new(["a", "b"]),
            records: rows
                .iter()
                .enumerate()
                .map(|(i, &(c, ok))| InstanceRecord {
                    id: i.to_string(),
                    dataset: "d".into(),
                    gold: "a".into(),
                    stages: vec![StageOutput::new(0, if ok { "a" } else { "b" }, c)],
                })
                .collect(),
            source: String::new(),
        }
    }

    #[test]
    fn all_confident_land_in_last_bucket() {
        let rs = set(&[(1.0, true); 7]);
        let b = bucketed_accuracy(&rs, 0, 10).unwrap();
        assert_eq!(b[9].count, 7);
        assert_eq!(b[9].accuracy(), Some(1.0));
        assert!(b[..9].iter().all(|x| x.count == 0 && x.accuracy().is_none()));
    }

    #[test]
    fn two_buckets_forced_placement() {
        let rs = set(&[(0.05, false), (0.95, true)]);
        let b = bucketed_accuracy(&rs, 0, 2).unwrap();
        assert_eq!(b[0].accuracy(), Some(0.0));
        assert_eq!(b[1].accuracy(), Some(1.0));
    }

    #[test]
    fn boundaries_are_half_open() {
        let rs = set(&[(0.3, true), (0.5, true), (0.0, true)]);
        let b = bucketed_accuracy(&rs, 0, 10).unwrap();
        assert_eq!(b[3].count, 1);
        assert_eq!(b[5].count, 1);
        assert_eq!(b[0].count, 1);
    }

    #[test]
    fn missing_stage_and_zero_buckets() {
        let rs = set(&[(0.5, true)]);
        assert_eq!(bucketed_accuracy(&rs, 2, 10), Err(ConfidenceError::MissingStage(2)));
        assert_eq!(bucketed_accuracy(&rs, 0, 0), Err(ConfidenceError::NoBuckets));
    }

    #[test]
    fn bucket_csv() {
        let rs = set(&[(0.05, false), (0.95, true)]);
        let mut buf = Vec::new();
        write_buckets_csv(&bucketed_accuracy(&rs, 0, 2).unwrap(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "lo,hi,count,accuracy\n0.000000,0.500000,1,0.000000\n0.500000,1.000000,1,1.000000\n"
        );
    }

    fn arb_probs() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..6).prop_filter_map("positive mass", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-6).then(|| raw.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn max_prob_at_least_uniform(probs in arb_probs()) {
            let labels = LabelSpace::new((0..probs.len()).map(|i| format!("l{i}")));
            let n = probs.len();
            let (_, c) = max_prob(&ProbVector::new(probs).unwrap(), &labels).unwrap();
            prop_assert!(c + 1e-12 >= 1.0 / n as f64);
        }

        #[test]
        fn consistent_permutation(probs in arb_probs(), rot in 0usize..6) {
            let n = probs.len();
            let labels: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
            let (l1, c1) = max_prob(&ProbVector::new(probs.clone()).unwrap(), &LabelSpace::new(labels.clone())).unwrap();
            let mut p2 = probs.clone();
            let mut l2 = labels.clone();
            p2.rotate_left(rot % n);
            l2.rotate_left(rot % n);
            let (got, c2) = max_prob(&ProbVector::new(p2).unwrap(), &LabelSpace::new(l2)).unwrap();
            prop_assert_eq!(c1, c2);
            // labels agree unless the maximum is tied
            let ties = probs.iter().filter(|&&x| x == c1).count();
            if ties == 1 {
                prop_assert_eq!(got, l1);
            }
        }

        #[test]
        fn counts_sum_to_stage_population(confs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..50), k in 1usize..20) {
            let rs = set(&confs);
            let b = bucketed_accuracy(&rs, 0, k).unwrap();
            prop_assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), confs.len());
            for (conf, _) in &confs {
                let i = bucket_index(*conf, k);
                prop_assert!(*conf >= b[i].lo);
                prop_assert!(*conf < b[i].hi || (i == k - 1 && *conf <= 1.0));
            }
        }
    }
}
