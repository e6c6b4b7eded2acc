//! Precision, recall and F1 of detected task boundaries.

use serde::{Deserialize, Serialize};

/// Detections within this many steps of a true boundary count as hits.
pub const DEFAULT_TOLERANCE: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BoundaryScore {
    fn from_counts(tp: usize, detections: usize, truths: usize) -> Self {
        // an empty side is vacuously perfect
        let precision = if detections == 0 { 1.0 } else { tp as f64 / detections as f64 };
        let recall = if truths == 0 { 1.0 } else { tp as f64 / truths as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self {
            true_positives: tp,
            false_positives: detections - tp,
            false_negatives: truths - tp,
            precision,
            recall,
            f1,
        }
    }
}

/// Matches detections to true boundaries one-to-one within `tolerance`
/// steps, maximising the number of matches.
///
/// All windows have the same width, so scanning both sorted lists and
/// pairing each detection with the earliest truth still reachable is optimal.
pub fn score_boundaries(truth: &[u64], detections: &[u64], tolerance: u64) -> BoundaryScore {
    let mut t: Vec<u64> = truth.to_vec();
    let mut d: Vec<u64> = detections.to_vec();
    t.sort_unstable();
    d.sort_unstable();
    let (mut i, mut tp) = (0, 0);
    for &det in &d {
        while i < t.len() && t[i] + tolerance < det {
            i += 1;
        }
        if i < t.len() && t[i] <= det + tolerance {
            tp += 1;
            i += 1;
        }
    }
    BoundaryScore::from_counts(tp, d.len(), t.len())
}
