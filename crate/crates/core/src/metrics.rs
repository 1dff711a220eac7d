//! Frame-level evaluation: accuracy, per-phase precision / recall / Jaccard
//! / F1 with per-video phase averaging, a relaxed-boundary variant, and
//! mean +- std aggregation across videos.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::seq::PhaseLabelSequence;

/// Default half-width of the relaxed-boundary window, in seconds.
pub const RELAX_WINDOW_SECONDS: f64 = 10.0;

/// Precision, recall, Jaccard, and F1 for one phase, as percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseScores {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
}

/// Scores for one video: global accuracy, per-phase scores over phases
/// present in ground truth or prediction, and their unweighted average.
#[derive(Debug, Clone)]
pub struct VideoMetrics {
    pub accuracy: f64,
    pub per_phase: BTreeMap<usize, PhaseScores>,
    pub averaged: PhaseScores,
}

/// Evaluate a prediction against dense ground truth.
///
/// Per phase c with frame sets GT_c and P_c: PR = |GT_c intersect P_c| /
/// |P_c|, RE = .. / |GT_c|, JA = .. / |GT_c union P_c|, each 0 when its
/// denominator is 0. Averages run over phases appearing in either sequence.
pub fn evaluate_video(
    pred: &PhaseLabelSequence,
    gt: &PhaseLabelSequence,
) -> Result<VideoMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let c = pred.num_phases().max(gt.num_phases());
    let mut tp = vec![0usize; c];
    let mut in_pred = vec![0usize; c];
    let mut in_gt = vec![0usize; c];
    let mut correct = 0usize;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        in_pred[p] += 1;
        in_gt[g] += 1;
        if p == g {
            tp[g] += 1;
            correct += 1;
        }
    }
    let mut per_phase = BTreeMap::new();
    for phase in 0..c {
        if in_pred[phase] == 0 && in_gt[phase] == 0 {
            continue;
        }
        let t = tp[phase] as f64;
        let precision = ratio_pct(t, in_pred[phase] as f64);
        let recall = ratio_pct(t, in_gt[phase] as f64);
        let union = (in_pred[phase] + in_gt[phase] - tp[phase]) as f64;
        let jaccard = ratio_pct(t, union);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_phase.insert(
            phase,
            PhaseScores { precision, recall, jaccard, f1 },
        );
    }
    let n = per_phase.len() as f64;
    let averaged = PhaseScores {
        precision: per_phase.values().map(|s| s.precision).sum::<f64>() / n,
        recall: per_phase.values().map(|s| s.recall).sum::<f64>() / n,
        jaccard: per_phase.values().map(|s| s.jaccard).sum::<f64>() / n,
        f1: per_phase.values().map(|s| s.f1).sum::<f64>() / n,
    };
    Ok(VideoMetrics {
        accuracy: 100.0 * correct as f64 / pred.len() as f64,
        per_phase,
        averaged,
    })
}

fn ratio_pct(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else {
        0.0
    }
}

/// Per-frame acceptable-label sets: frames within `window_seconds * fps`
/// frames of a phase transition accept both adjacent phases; all others
/// accept only their ground-truth label. Sets are sorted and deduplicated.
pub fn relax_ground_truth(
    gt: &PhaseLabelSequence,
    fps: f64,
    window_seconds: f64,
) -> Result<Vec<Vec<usize>>> {
    if !(fps > 0.0) || !(window_seconds >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "fps {fps} and window {window_seconds}s must be positive"
        )));
    }
    let w = (fps * window_seconds).round() as usize;
    let t_len = gt.len();
    let mut sets: Vec<Vec<usize>> = gt.labels().iter().map(|&l| vec![l]).collect();
    let segments = gt.segments();
    for pair in segments.windows(2) {
        let (boundary, prev_label, next_label) = (pair[1].0, pair[0].2, pair[1].2);
        let lo = boundary.saturating_sub(w);
        let hi = (boundary + w).min(t_len);
        for set in &mut sets[lo..hi] {
            for l in [prev_label, next_label] {
                if !set.contains(&l) {
                    set.push(l);
                }
            }
        }
    }
    for set in &mut sets {
        set.sort_unstable();
    }
    Ok(sets)
}

/// Relaxed evaluation: a frame whose prediction is in its acceptable set
/// counts as correct for the predicted phase; everything else scores as in
/// `evaluate_video`.
pub fn evaluate_video_relaxed(
    pred: &PhaseLabelSequence,
    gt: &PhaseLabelSequence,
    fps: f64,
    window_seconds: f64,
) -> Result<VideoMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let sets = relax_ground_truth(gt, fps, window_seconds)?;
    let effective: Vec<usize> = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .zip(&sets)
        .map(|((&p, &g), set)| if set.contains(&p) { p } else { g })
        .collect();
    let c = pred.num_phases().max(gt.num_phases());
    let effective = PhaseLabelSequence::new(effective, c)?;
    evaluate_video(pred, &effective)
}

/// Mean and population standard deviation of one metric across videos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation of a non-empty sample.
    pub fn from_values(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }

    /// Table cell formatting with one decimal, e.g. "85.0±5.0".
    pub fn format(&self) -> String {
        format!("{:.1}±{:.1}", self.mean, self.std)
    }
}

/// Cross-video aggregate of accuracy and the phase-averaged scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub num_videos: usize,
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub jaccard: Stat,
    pub f1: Stat,
}

/// Aggregate per-video metrics into mean +- population std per metric.
pub fn aggregate(per_video: &[VideoMetrics]) -> Result<AggregateReport> {
    if per_video.is_empty() {
        return Err(Error::InvalidParameter("no videos to aggregate".into()));
    }
    let col = |f: fn(&VideoMetrics) -> f64| -> Vec<f64> {
        per_video.iter().map(f).collect()
    };
    Ok(AggregateReport {
        num_videos: per_video.len(),
        accuracy: Stat::from_values(&col(|m| m.accuracy)),
        precision: Stat::from_values(&col(|m| m.averaged.precision)),
        recall: Stat::from_values(&col(|m| m.averaged.recall)),
        jaccard: Stat::from_values(&col(|m| m.averaged.jaccard)),
        f1: Stat::from_values(&col(|m| m.averaged.f1)),
    })
}
