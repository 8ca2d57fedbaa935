//! Stage-1 aggregation of predictions made on simplified variants of an
//! instance.
//!
//! The variant mode becomes the stage prediction. When it agrees with the
//! original prediction the stage confidence is the highest confidence among
//! variants predicting the mode; otherwise it is their mean.

use thiserror::Error;

use crate::record::{LabelSpace, Prediction};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("empty variant list")]
    NoVariants,
}

/// Rank of a label for tie-breaks: label-space index, unknown labels last.
fn rank(labels: &LabelSpace, p: &Prediction) -> (usize, String) {
    match labels.index_of(&p.label) {
        Some(i) => (i, String::new()),
        None => (usize::MAX, p.label.as_str().to_owned()),
    }
}

/// Combines a stage-0 prediction with predictions on its variants.
///
/// The original is not counted toward the mode. Mode ties go to the
/// original's label when it is tied, else to the lowest label-space index.
pub fn aggregate_variants(
    original: &Prediction,
    variants: &[Prediction],
    labels: &LabelSpace,
) -> Result<Prediction, EnsembleError> {
    if variants.is_empty() {
        return Err(EnsembleError::NoVariants);
    }

    // label -> confidences of variants predicting it
    let mut tally: Vec<(&Prediction, Vec<f64>)> = Vec::new();
    for v in variants {
        match tally.iter_mut().find(|(p, _)| p.label == v.label) {
            Some((_, confs)) => confs.push(v.conf),
            None => tally.push((v, vec![v.conf])),
        }
    }
    let top = tally.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let (mode, confs) = tally
        .into_iter()
        .filter(|(_, c)| c.len() == top)
        .min_by(|(a, _), (b, _)| {
            let a_orig = a.label != original.label;
            let b_orig = b.label != original.label;
            (a_orig, rank(labels, a)).cmp(&(b_orig, rank(labels, b)))
        })
        .expect("non-empty tally");

    let conf = if mode.label == original.label {
        confs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        // sorted so the sum does not depend on variant order
        let mut sorted = confs;
        sorted.sort_by(f64::total_cmp);
        sorted.iter().sum::<f64>() / sorted.len() as f64
    };
    Ok(Prediction {
        label: mode.label.clone(),
        conf,
    })
}
