//! Core value types: feature sequences, label sequences, sparse annotations,
//! probability matrices, and hyperparameters.
//!
//! All types are immutable after construction and safe to share across
//! concurrent readers.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-video matrix of frame feature vectors (T x D).
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    frames: Array2<f64>,
    fps: f64,
    video_id: String,
}

impl FeatureSequence {
    /// Build a feature sequence, validating T >= 1, D >= 1 and finiteness.
    pub fn new(frames: Array2<f64>, fps: f64, video_id: impl Into<String>) -> Result<Self> {
        let (t, d) = frames.dim();
        if t == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature sequence must be at least 1x1, got {t}x{d}"
            )));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidParameter(format!("fps must be > 0, got {fps}")));
        }
        Ok(Self {
            frames,
            fps,
            video_id: video_id.into(),
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }
}

/// Dense per-frame phase labels over `num_phases` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseLabelSequence {
    labels: Vec<usize>,
    num_phases: usize,
}

impl PhaseLabelSequence {
    pub fn new(labels: Vec<usize>, num_phases: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::ShapeMismatch("label sequence must be non-empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_phases) {
            return Err(Error::InvalidAnnotation(format!(
                "label {bad} out of range for {num_phases} phases"
            )));
        }
        Ok(Self { labels, num_phases })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_phases(&self) -> usize {
        self.num_phases
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Maximal constant-label segments as (start, end_exclusive, label).
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 1..=self.labels.len() {
            if t == self.labels.len() || self.labels[t] != self.labels[start] {
                out.push((start, t, self.labels[start]));
                start = t;
            }
        }
        out
    }
}

/// Where a sparse label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::Pseudo => "pseudo",
        }
    }
}

/// One sparse frame label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotationEntry {
    pub frame: usize,
    pub label: usize,
    pub provenance: Provenance,
}

/// Sparse frame labels for one video, sorted by frame index with unique
/// frame indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    entries: Vec<AnnotationEntry>,
    total_frames: usize,
}

impl AnnotationSet {
    /// Build an annotation set. Entries are sorted by frame index; duplicate
    /// frame indices and out-of-range frames are rejected.
    pub fn new(mut entries: Vec<AnnotationEntry>, total_frames: usize) -> Result<Self> {
        entries.sort_by_key(|e| e.frame);
        for pair in entries.windows(2) {
            if pair[0].frame == pair[1].frame {
                return Err(Error::InvalidAnnotation(format!(
                    "duplicate frame index {}",
                    pair[0].frame
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| e.frame >= total_frames) {
            return Err(Error::InvalidAnnotation(format!(
                "frame index {} out of range for {} frames",
                e.frame, total_frames
            )));
        }
        Ok(Self { entries, total_frames })
    }

    pub fn entries(&self) -> &[AnnotationEntry] {
        &self.entries
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Per-frame mask: m_t = true iff frame t carries a label.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total_frames];
        for e in &self.entries {
            m[e.frame] = true;
        }
        m
    }

    /// Label at frame t, if annotated.
    pub fn label_at(&self, frame: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&frame, |e| e.frame)
            .ok()
            .map(|i| self.entries[i].label)
    }

    /// Restriction to ground-truth entries.
    pub fn ground_truth_only(&self) -> AnnotationSet {
        AnnotationSet {
            entries: self
                .entries
                .iter()
                .copied()
                .filter(|e| e.provenance == Provenance::GroundTruth)
                .collect(),
            total_frames: self.total_frames,
        }
    }

    /// Every frame of a dense label sequence, as ground truth.
    pub fn from_full_labels(labels: &PhaseLabelSequence) -> AnnotationSet {
        AnnotationSet {
            entries: labels
                .labels()
                .iter()
                .enumerate()
                .map(|(t, &l)| AnnotationEntry {
                    frame: t,
                    label: l,
                    provenance: Provenance::GroundTruth,
                })
                .collect(),
            total_frames: labels.len(),
        }
    }
}

/// Per-video logits together with their row-normalized phase distributions.
///
/// Columns `0..num_phase_columns()` are phase classes; any columns beyond
/// that are auxiliary (a BLANK class for alignment losses). Dense losses sum
/// over phase columns only; auxiliary columns still shape the normalization.
#[derive(Debug, Clone)]
pub struct ProbabilityMatrix {
    logits: Array2<f64>,
    probs: Array2<f64>,
    phase_cols: usize,
}

impl ProbabilityMatrix {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn num_frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Number of leading phase columns (excludes auxiliary columns).
    pub fn num_phase_columns(&self) -> usize {
        self.phase_cols
    }

    /// Mark the trailing `aux` columns as auxiliary (non-phase).
    pub fn with_aux_columns(mut self, aux: usize) -> Result<Self> {
        if aux >= self.probs.ncols() {
            return Err(Error::InvalidParameter(format!(
                "{aux} auxiliary columns leaves no phase columns"
            )));
        }
        self.phase_cols = self.probs.ncols() - aux;
        Ok(self)
    }

    /// Argmax class per row. Ties break toward the lower class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Entropy of row t over all classes, with the probability floor applied
    /// inside the logarithm.
    pub fn row_entropy(&self, t: usize) -> f64 {
        self.probs
            .row(t)
            .iter()
            .map(|&p| if p > 0.0 { -p * p.max(PROB_FLOOR).ln() } else { 0.0 })
            .sum()
    }

    /// Build a matrix from explicit row-stochastic probabilities. Logits are
    /// the clamped logs, so the softmax invariant holds exactly.
    pub fn from_probs(probs: Array2<f64>) -> Result<Self> {
        if !probs.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::NonFinite("probability matrix".into()));
        }
        for (t, row) in probs.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "row {t} sums to {s}, expected 1"
                )));
            }
        }
        let logits = probs.mapv(|p| p.max(PROB_FLOOR).ln());
        normalize_logits(&logits)
    }
}

/// Row-wise exponential normalization of logits into a probability matrix.
///
/// Numerically stable by max subtraction; argmax of each row is preserved.
pub fn normalize_logits(logits: &Array2<f64>) -> Result<ProbabilityMatrix> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let (t, c) = logits.dim();
    if t == 0 || c == 0 {
        return Err(Error::ShapeMismatch(format!("logits must be at least 1x1, got {t}x{c}")));
    }
    let mut probs = Array2::<f64>::zeros((t, c));
    for (mut out, row) in probs.rows_mut().into_iter().zip(logits.rows()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &l) in out.iter_mut().zip(row.iter()) {
            let e = (l - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(ProbabilityMatrix {
        logits: logits.clone(),
        probs,
        phase_cols: c,
    })
}

/// Loss weights, thresholds, and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Focal exponent.
    pub gamma: f64,
    /// Weights of smoothness, entropy, confidence, and ordering losses.
    pub alpha: [f64; 4],
    /// Smoothness clip threshold on |delta log p|.
    pub tau_s: f64,
    /// Uncertainty threshold for transition detection.
    pub tau_transition: f64,
    /// Scaling temperature for the uncertainty estimator, in (0, 1].
    pub m_t_temp: f64,
    /// Half-width of the transition exclusion window, in frames.
    pub window_w: usize,
    /// Learning rate.
    pub lr: f64,
    /// Training epochs.
    pub epochs: usize,
    /// Epochs trained on ground-truth annotations only before pseudo-label
    /// refreshes begin.
    pub warmup_epochs: usize,
    /// RNG seed.
    pub seed: u64,
}

impl Hyperparams {
    /// Threshold placing the transition cut at half the maximum entropy.
    pub fn default_tau_transition(num_phases: usize) -> f64 {
        0.5 * (num_phases.max(2) as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::InvalidParameter("gamma must be >= 0".into()));
        }
        if self.alpha.iter().any(|a| *a < 0.0) {
            return Err(Error::InvalidParameter("alpha weights must be >= 0".into()));
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::InvalidParameter("tau_s must be > 0".into()));
        }
        if !(self.m_t_temp > 0.0 && self.m_t_temp <= 1.0) {
            return Err(Error::InvalidParameter("m_t_temp must be in (0, 1]".into()));
        }
        if !(self.tau_transition > 0.0) {
            return Err(Error::InvalidParameter("tau_transition must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: [0.15, 0.5, 1.0, 0.2],
            tau_s: 16.0,
            tau_transition: Self::default_tau_transition(7),
            m_t_temp: 0.25,
            window_w: 25,
            lr: 5e-4,
            epochs: 50,
            warmup_epochs: 30,
            seed: 0,
        }
    }
}
