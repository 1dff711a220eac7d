//! Dense per-frame loss components with exact gradients w.r.t. logits.
//!
//! Four terms: class-balanced focal classification on annotated frames,
//! entropy minimization on annotated frames, confidence (unimodality around
//! interior anchors), and truncated-MSE smoothness over log probabilities.
//! `total_loss` combines them with an alignment term under fixed weights.
//!
//! Every component returns a [`LossValue`] whose gradient is taken with
//! respect to the *logits* that produced the probability matrix, so callers
//! can feed it straight into backprop. Probabilities are clamped at
//! [`PROB_FLOOR`] before any logarithm; the clamp acts as a stop-gradient.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seq::{AnnotationSet, ProbabilityMatrix, PROB_FLOOR};

/// Inverse-frequency class weights over annotated frames.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    weights: Vec<f64>,
    total_annotated: usize,
    per_class: Vec<usize>,
}

impl ClassWeights {
    /// Weight for class c; NaN sentinel when the class has no annotations.
    pub fn weight(&self, c: usize) -> f64 {
        self.weights[c]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_annotated(&self) -> usize {
        self.total_annotated
    }

    pub fn per_class(&self) -> &[usize] {
        &self.per_class
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Uniform unit weights (used by the second training stage).
    pub fn uniform(num_phases: usize) -> Self {
        Self {
            weights: vec![1.0; num_phases],
            total_annotated: 0,
            per_class: vec![0; num_phases],
        }
    }

    /// Weights from raw per-class annotation counts (e.g. pooled across
    /// videos): w_c = N / N_c, NaN sentinel at zero-count classes.
    pub fn from_counts(per_class: Vec<usize>) -> Result<Self> {
        let n: usize = per_class.iter().sum();
        if n == 0 {
            return Err(Error::EmptyAnnotations("class weight counts".into()));
        }
        let weights = per_class
            .iter()
            .map(|&c| if c > 0 { n as f64 / c as f64 } else { f64::NAN })
            .collect();
        Ok(Self {
            weights,
            total_annotated: n,
            per_class,
        })
    }
}

/// Scalar loss plus its T x C gradient w.r.t. logits.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossValue {
    pub fn new(value: f64, grad: Array2<f64>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("loss gradient".into()));
        }
        Ok(Self { value, grad })
    }

    pub fn zero(num_frames: usize, num_classes: usize) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros((num_frames, num_classes)),
        }
    }
}

/// Focal term on a single probability: −(1−q)^γ · log(q).
pub fn focal(q: f64, gamma: f64) -> f64 {
    let qf = q.max(PROB_FLOOR);
    let omq = 1.0 - q;
    if omq <= 0.0 {
        return 0.0;
    }
    -omq.powf(gamma) * qf.ln()
}

/// d focal / d q, with the clamp acting as a stop-gradient below the floor.
fn focal_dq(q: f64, gamma: f64) -> f64 {
    let qf = q.max(PROB_FLOOR);
    let omq = 1.0 - q;
    if omq <= 0.0 {
        return 0.0;
    }
    let ln_term = if gamma == 0.0 {
        0.0
    } else {
        gamma * omq.powf(gamma - 1.0) * qf.ln()
    };
    let inv_term = if q >= PROB_FLOOR { omq.powf(gamma) / qf } else { 0.0 };
    ln_term - inv_term
}

/// Inverse class frequency weights w_c = N / N_c over all annotated frames.
pub fn class_weights(annotations: &AnnotationSet, num_phases: usize) -> Result<ClassWeights> {
    if annotations.is_empty() {
        return Err(Error::EmptyAnnotations("class_weights".into()));
    }
    let mut per_class = vec![0usize; num_phases];
    for e in annotations.entries() {
        if e.label >= num_phases {
            return Err(Error::InvalidAnnotation(format!(
                "label {} out of range for {} phases",
                e.label, num_phases
            )));
        }
        per_class[e.label] += 1;
    }
    let n = annotations.len();
    let weights = per_class
        .iter()
        .map(|&c| if c > 0 { n as f64 / c as f64 } else { f64::NAN })
        .collect();
    Ok(ClassWeights {
        weights,
        total_annotated: n,
        per_class,
    })
}

/// Chain a gradient w.r.t. probabilities through row-wise softmax to logits.
pub(crate) fn chain_through_softmax(probs: &Array2<f64>, dl_dp: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(probs.raw_dim());
    for ((mut orow, prow), grow) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(dl_dp.rows())
    {
        let dot: f64 = prow.iter().zip(grow.iter()).map(|(p, g)| p * g).sum();
        for ((o, &p), &g) in orow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
            *o = p * (g - dot);
        }
    }
    out
}

/// d log(max(p, floor)) / d p.
fn inv_clamped(p: f64) -> f64 {
    if p >= PROB_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

/// Weighted focal classification loss over annotated frames.
///
/// value = (Σ_t m_t)^{-1} Σ_t m_t · w_{y_t} · focal(P_{t,y_t}); the gradient
/// vanishes at unannotated frames.
pub fn classification_loss(
    p: &ProbabilityMatrix,
    annotations: &AnnotationSet,
    w: &ClassWeights,
    gamma: f64,
) -> Result<LossValue> {
    check_frames(p, annotations)?;
    if annotations.is_empty() {
        return Err(Error::EmptyAnnotations("classification_loss".into()));
    }
    let m = annotations.len() as f64;
    let mut value = 0.0;
    let mut dl_dp = Array2::<f64>::zeros(p.probs().raw_dim());
    for e in annotations.entries() {
        if e.label >= p.num_phase_columns() || e.label >= w.num_classes() {
            return Err(Error::InvalidAnnotation(format!(
                "label {} out of range",
                e.label
            )));
        }
        let wc = w.weight(e.label);
        if !wc.is_finite() {
            return Err(Error::InvalidAnnotation(format!(
                "label {} has zero class count in weights",
                e.label
            )));
        }
        let q = p.probs()[[e.frame, e.label]];
        value += wc * focal(q, gamma);
        dl_dp[[e.frame, e.label]] += wc * focal_dq(q, gamma) / m;
    }
    LossValue::new(value / m, chain_through_softmax(p.probs(), &dl_dp))
}

/// Mean entropy over annotated frames (phase columns only).
pub fn entropy_loss(p: &ProbabilityMatrix, annotations: &AnnotationSet) -> Result<LossValue> {
    check_frames(p, annotations)?;
    if annotations.is_empty() {
        return Err(Error::EmptyAnnotations("entropy_loss".into()));
    }
    let m = annotations.len() as f64;
    let c = p.num_phase_columns();
    let mut value = 0.0;
    let mut dl_dp = Array2::<f64>::zeros(p.probs().raw_dim());
    for e in annotations.entries() {
        let row = p.probs().row(e.frame);
        for j in 0..c {
            let pj = row[j];
            let u = pj.max(PROB_FLOOR);
            value += -pj * u.ln();
            // d(-p ln u)/dp, stop-gradient through the clamp.
            let d = if pj >= PROB_FLOOR { -(u.ln() + 1.0) } else { -u.ln() };
            dl_dp[[e.frame, j]] += d / m;
        }
    }
    LossValue::new(value / m, chain_through_softmax(p.probs(), &dl_dp))
}

/// Unimodality penalty around interior ground-truth anchors.
///
/// For each interior anchor i, the log-probability of its phase must rise
/// until the anchor frame and fall after it across [t_{i-1}, t_{i+1}];
/// violations accumulate and are divided by T' = 2(t_last − t_first).
pub fn confidence_loss(p: &ProbabilityMatrix, annotations: &AnnotationSet) -> Result<LossValue> {
    check_frames(p, annotations)?;
    let gt = annotations.ground_truth_only();
    let entries = gt.entries();
    let (t_len, c_len) = p.probs().dim();
    if entries.len() < 3 {
        return Ok(LossValue::zero(t_len, c_len));
    }
    let t_first = entries[0].frame;
    let t_last = entries[entries.len() - 1].frame;
    let t_prime = 2.0 * (t_last - t_first) as f64;
    let lp = |t: usize, c: usize| p.probs()[[t, c]].max(PROB_FLOOR).ln();

    let mut value = 0.0;
    let mut k = Array2::<f64>::zeros((t_len, c_len));
    for i in 1..entries.len() - 1 {
        let anchor = entries[i].frame;
        let y = entries[i].label;
        if y >= p.num_phase_columns() {
            return Err(Error::InvalidAnnotation(format!("label {y} out of range")));
        }
        for t in entries[i - 1].frame..=entries[i + 1].frame {
            if t == 0 {
                continue;
            }
            let d = lp(t, y) - lp(t - 1, y);
            if t <= anchor {
                // Want a rise; penalize drops.
                if d < 0.0 {
                    value += -d;
                    k[[t, y]] -= 1.0;
                    k[[t - 1, y]] += 1.0;
                }
            } else {
                // Want a fall; penalize rises.
                if d > 0.0 {
                    value += d;
                    k[[t, y]] += 1.0;
                    k[[t - 1, y]] -= 1.0;
                }
            }
        }
    }
    let mut dl_dp = Array2::<f64>::zeros((t_len, c_len));
    for t in 0..t_len {
        for c in 0..c_len {
            if k[[t, c]] != 0.0 {
                dl_dp[[t, c]] = k[[t, c]] / t_prime * inv_clamped(p.probs()[[t, c]]);
            }
        }
    }
    LossValue::new(value / t_prime, chain_through_softmax(p.probs(), &dl_dp))
}

/// Truncated MSE over consecutive log-probability differences on an explicit
/// log-probability matrix. Returns the value and its gradient w.r.t. the
/// log-probabilities. Shared core of [`smoothness_loss`].
pub(crate) fn smoothness_on_logp(logp: &Array2<f64>, tau_s: f64) -> (f64, Array2<f64>) {
    let (t_len, c_len) = logp.dim();
    let mut grad = Array2::<f64>::zeros((t_len, c_len));
    if t_len < 2 {
        return (0.0, grad);
    }
    let denom = ((t_len - 1) * c_len) as f64;
    let mut value = 0.0;
    for t in 1..t_len {
        for c in 0..c_len {
            let d = logp[[t, c]] - logp[[t - 1, c]];
            let clipped = d.abs().min(tau_s);
            value += clipped * clipped;
            if d.abs() < tau_s {
                let g = 2.0 * d / denom;
                grad[[t, c]] += g;
                grad[[t - 1, c]] -= g;
            }
        }
    }
    (value / denom, grad)
}

/// Smoothness loss: mean over (T−1)·C of min(|Δ log P|, τ_S)² across
/// consecutive frames, phase columns only.
pub fn smoothness_loss(p: &ProbabilityMatrix, tau_s: f64) -> Result<LossValue> {
    if !(tau_s > 0.0) {
        return Err(Error::InvalidParameter("tau_s must be > 0".into()));
    }
    let (t_len, c_full) = p.probs().dim();
    if t_len < 2 {
        return Ok(LossValue::zero(t_len, c_full));
    }
    let c = p.num_phase_columns();
    let logp = Array2::from_shape_fn((t_len, c), |(t, j)| p.probs()[[t, j]].max(PROB_FLOOR).ln());
    let (value, glogp) = smoothness_on_logp(&logp, tau_s);
    let mut dl_dp = Array2::<f64>::zeros((t_len, c_full));
    for t in 0..t_len {
        for j in 0..c {
            dl_dp[[t, j]] = glogp[[t, j]] * inv_clamped(p.probs()[[t, j]]);
        }
    }
    LossValue::new(value, chain_through_softmax(p.probs(), &dl_dp))
}

/// Weighted sum: cls + α₁·smooth + α₂·entropy + α₃·confidence + α₄·align.
pub fn total_loss(
    cls: &LossValue,
    smooth: &LossValue,
    entropy: &LossValue,
    confidence: &LossValue,
    align: &LossValue,
    alpha: [f64; 4],
) -> Result<LossValue> {
    let shape = cls.grad.raw_dim();
    for (name, lv) in [
        ("smoothness", smooth),
        ("entropy", entropy),
        ("confidence", confidence),
        ("alignment", align),
    ] {
        if lv.grad.raw_dim() != shape {
            return Err(Error::ShapeMismatch(format!(
                "{name} gradient shape {:?} != {:?}",
                lv.grad.shape(),
                cls.grad.shape()
            )));
        }
    }
    let value = cls.value
        + alpha[0] * smooth.value
        + alpha[1] * entropy.value
        + alpha[2] * confidence.value
        + alpha[3] * align.value;
    let grad = &cls.grad
        + &(alpha[0] * &smooth.grad)
        + &(alpha[1] * &entropy.grad)
        + &(alpha[2] * &confidence.grad)
        + &(alpha[3] * &align.grad);
    LossValue::new(value, grad)
}

fn check_frames(p: &ProbabilityMatrix, annotations: &AnnotationSet) -> Result<()> {
    if annotations.total_frames() != p.num_frames() {
        return Err(Error::ShapeMismatch(format!(
            "annotation set spans {} frames, matrix has {}",
            annotations.total_frames(),
            p.num_frames()
        )));
    }
    Ok(())
}
