//! Uncertainty-gated pseudo-labeling.
//!
//! Stage 1 diffuses each ground-truth annotation outward frame by frame
//! while the model agrees and is certain (`uatd_expand`). Stage 2 freezes
//! argmax pseudo-labels away from detected transitions (`stage2_labels`).
//! Uncertainty is the entropy of a temperature-sharpened softmax
//! (`scaled_entropy`), which stays near zero inside confident segments and
//! spikes only where the prediction actually flips.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seq::{AnnotationEntry, AnnotationSet, ProbabilityMatrix, Provenance, PROB_FLOOR};

/// Per-frame uncertainty values u_t >= 0 at a given temperature.
#[derive(Debug, Clone)]
pub struct UncertaintySeries {
    values: Vec<f64>,
    temperature: f64,
}

impl UncertaintySeries {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sorted frame indices where uncertainty crosses the threshold upward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionSet {
    events: Vec<usize>,
}

impl TransitionSet {
    pub fn events(&self) -> &[usize] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// u_t = H(softmax(l_t / M_T)): entropy of the temperature-sharpened
/// distribution. M_T < 1 pushes confident rows toward one-hot, so u_t
/// separates transitions from mere low confidence.
pub fn scaled_entropy(logits: &Array2<f64>, m_t_temp: f64) -> Result<UncertaintySeries> {
    if !(m_t_temp > 0.0 && m_t_temp <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be in (0, 1], got {m_t_temp}"
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut values = Vec::with_capacity(logits.nrows());
    for row in logits.rows() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let exps: Vec<f64> = row.iter().map(|&l| ((l - max) / m_t_temp).exp()).collect();
        for &e in &exps {
            sum += e;
        }
        let mut h = 0.0;
        for &e in &exps {
            let p = e / sum;
            if p > 0.0 {
                h -= p * p.max(PROB_FLOOR).ln();
            }
        }
        values.push(h);
    }
    Ok(UncertaintySeries {
        values,
        temperature: m_t_temp,
    })
}

/// Upward threshold crossings: an event at every t with u_{t-1} <= tau <
/// u_t, plus an event at 0 when the series starts above the threshold.
pub fn detect_transitions(u: &UncertaintySeries, tau: f64) -> Result<TransitionSet> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter("tau must be > 0".into()));
    }
    let v = &u.values;
    let mut events = Vec::new();
    for t in 0..v.len() {
        let above = v[t] > tau;
        let prev_above = t > 0 && v[t - 1] > tau;
        if above && !prev_above {
            events.push(t);
        }
    }
    Ok(TransitionSet { events })
}

/// Diffuse each ground-truth annotation outward while (a) the frame's
/// argmax matches the annotated phase, (b) uncertainty stays at or below
/// `tau`, and (c) the frame is on this annotation's side of the midpoint
/// toward the neighboring annotation. Diffusion stops at the first failing
/// frame. Original entries are kept; diffused frames get provenance pseudo.
pub fn uatd_expand(
    p: &ProbabilityMatrix,
    annotations: &AnnotationSet,
    u: &UncertaintySeries,
    tau: f64,
) -> Result<AnnotationSet> {
    let t_len = p.num_frames();
    if annotations.total_frames() != t_len || u.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "matrix spans {} frames, annotations {}, uncertainty {}",
            t_len,
            annotations.total_frames(),
            u.len()
        )));
    }
    if annotations.is_empty() {
        return Err(Error::EmptyAnnotations("uatd_expand".into()));
    }
    if annotations
        .entries()
        .iter()
        .any(|e| e.provenance != Provenance::GroundTruth)
    {
        return Err(Error::InvalidAnnotation(
            "uatd_expand expects ground-truth annotations only".into(),
        ));
    }
    let argmax = phase_argmax(p);
    let anchors = annotations.entries();
    let mut out = anchors.to_vec();
    for (i, anchor) in anchors.iter().enumerate() {
        let extendable = |t: usize| argmax[t] == anchor.label && u.values[t] <= tau;
        // Left sweep down to one past the midpoint with the previous anchor.
        let left_limit = if i == 0 {
            0
        } else {
            (anchors[i - 1].frame + anchor.frame) / 2 + 1
        };
        let mut t = anchor.frame;
        while t > left_limit {
            t -= 1;
            if !extendable(t) {
                break;
            }
            out.push(AnnotationEntry {
                frame: t,
                label: anchor.label,
                provenance: Provenance::Pseudo,
            });
        }
        // Right sweep up to the midpoint with the next anchor.
        let right_limit = if i + 1 == anchors.len() {
            t_len - 1
        } else {
            (anchor.frame + anchors[i + 1].frame) / 2
        };
        for t in anchor.frame + 1..=right_limit {
            if !extendable(t) {
                break;
            }
            out.push(AnnotationEntry {
                frame: t,
                label: anchor.label,
                provenance: Provenance::Pseudo,
            });
        }
    }
    AnnotationSet::new(out, t_len)
}

/// Fixed pseudo-labels for the second training stage: argmax at every frame
/// whose distance to every transition event exceeds `window_w`.
pub fn stage2_labels(
    p: &ProbabilityMatrix,
    transitions: &TransitionSet,
    window_w: usize,
) -> Result<AnnotationSet> {
    let t_len = p.num_frames();
    let argmax = phase_argmax(p);
    let mut entries = Vec::new();
    for t in 0..t_len {
        let masked = transitions
            .events
            .iter()
            .any(|&e| t.abs_diff(e) <= window_w);
        if !masked {
            entries.push(AnnotationEntry {
                frame: t,
                label: argmax[t],
                provenance: Provenance::Pseudo,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {t_len} frames fall within {window_w} frames of a transition"
        )));
    }
    AnnotationSet::new(entries, t_len)
}

/// Overlay ground-truth entries on a pseudo-label set: ground truth wins at
/// conflicting frames.
pub fn merge_with_ground_truth(
    base: &AnnotationSet,
    gt: &AnnotationSet,
) -> Result<AnnotationSet> {
    if base.total_frames() != gt.total_frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} frames",
            base.total_frames(),
            gt.total_frames()
        )));
    }
    let gt_mask = gt.mask();
    let mut entries: Vec<AnnotationEntry> = gt.entries().to_vec();
    entries.extend(base.entries().iter().copied().filter(|e| !gt_mask[e.frame]));
    AnnotationSet::new(entries, base.total_frames())
}

/// Argmax over phase columns only (auxiliary columns never label a frame).
fn phase_argmax(p: &ProbabilityMatrix) -> Vec<usize> {
    let c = p.num_phase_columns();
    p.probs()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
