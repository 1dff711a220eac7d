//! Annotation simulators deriving sparse supervision from full labels.
//!
//! Three regimes are supported: timestamp (one frame per phase segment),
//! timestamp with missing phases (independent drops at a miss rate), and
//! SkipTag@K (one frame from each of K near-equal video partitions). All
//! simulators are pure functions of an explicit RNG, so a seed pins the
//! entire annotation set.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::seq::{AnnotationEntry, AnnotationSet, PhaseLabelSequence, Provenance};

/// Which annotation regime to simulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupervisionKind {
    /// Every frame labeled.
    Full,
    /// One annotated frame per maximal phase segment.
    Timestamp,
    /// Timestamp annotations, each dropped independently at the miss rate.
    TimestampMissing(f64),
    /// One annotated frame per each of K contiguous partitions.
    SkipTag(usize),
}

/// A supervision regime plus the seed that pins its random draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionSpec {
    pub kind: SupervisionKind,
    pub seed: u64,
}

impl SupervisionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SupervisionKind::TimestampMissing(p) if !(0.0..=1.0).contains(&p) => Err(
                Error::InvalidParameter(format!("miss rate must be in [0,1], got {p}")),
            ),
            SupervisionKind::SkipTag(0) => {
                Err(Error::InvalidParameter("K must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Mix a base seed with a stream index into an independent RNG seed
/// (splitmix64 finalizer), so per-video streams never collide.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-stream RNG for a base seed.
pub fn derive_rng(base: u64, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, stream))
}

/// Simulate one video's annotations under `spec`, using stream `video_index`.
pub fn annotate(
    full: &PhaseLabelSequence,
    spec: &SupervisionSpec,
    video_index: u64,
) -> Result<AnnotationSet> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, video_index);
    match spec.kind {
        SupervisionKind::Full => Ok(AnnotationSet::from_full_labels(full)),
        SupervisionKind::Timestamp => timestamp_sample(full, &mut rng),
        SupervisionKind::TimestampMissing(p_m) => {
            let ts = timestamp_sample(full, &mut rng)?;
            apply_missing(&ts, p_m, &mut rng)
        }
        SupervisionKind::SkipTag(k) => skiptag_sample(full, k, &mut rng),
    }
}

/// One uniformly random annotated frame per maximal constant-label segment.
pub fn timestamp_sample(
    full: &PhaseLabelSequence,
    rng: &mut impl Rng,
) -> Result<AnnotationSet> {
    let entries = full
        .segments()
        .into_iter()
        .map(|(start, end, label)| AnnotationEntry {
            frame: rng.gen_range(start..end),
            label,
            provenance: Provenance::GroundTruth,
        })
        .collect();
    AnnotationSet::new(entries, full.len())
}

/// The segment-midpoint alternative to random timestamp placement.
pub fn timestamp_midpoint(full: &PhaseLabelSequence) -> Result<AnnotationSet> {
    let entries = full
        .segments()
        .into_iter()
        .map(|(start, end, label)| AnnotationEntry {
            frame: (start + end - 1) / 2,
            label,
            provenance: Provenance::GroundTruth,
        })
        .collect();
    AnnotationSet::new(entries, full.len())
}

/// Drop each entry independently with probability `p_m`. If every entry
/// would drop, one uniformly chosen entry is retained so the output is
/// never empty.
pub fn apply_missing(
    ts: &AnnotationSet,
    p_m: f64,
    rng: &mut impl Rng,
) -> Result<AnnotationSet> {
    if !(0.0..=1.0).contains(&p_m) {
        return Err(Error::InvalidParameter(format!(
            "miss rate must be in [0,1], got {p_m}"
        )));
    }
    if ts.is_empty() {
        return Err(Error::EmptyAnnotations("apply_missing".into()));
    }
    let mut kept: Vec<AnnotationEntry> = ts
        .entries()
        .iter()
        .copied()
        .filter(|_| !(rng.gen::<f64>() < p_m))
        .collect();
    if kept.is_empty() {
        kept.push(ts.entries()[rng.gen_range(0..ts.len())]);
    }
    AnnotationSet::new(kept, ts.total_frames())
}

/// One uniformly random annotated frame from each of `k` contiguous
/// near-equal partitions (sizes differ by at most one, longer partitions
/// first), labeled with the frame's true label.
pub fn skiptag_sample(
    full: &PhaseLabelSequence,
    k: usize,
    rng: &mut impl Rng,
) -> Result<AnnotationSet> {
    let t = full.len();
    if k == 0 || k > t {
        return Err(Error::InvalidParameter(format!(
            "K must be in [1, {t}], got {k}"
        )));
    }
    let base = t / k;
    let rem = t % k;
    let mut start = 0;
    let mut entries = Vec::with_capacity(k);
    for i in 0..k {
        let size = base + usize::from(i < rem);
        let frame = rng.gen_range(start..start + size);
        entries.push(AnnotationEntry {
            frame,
            label: full.labels()[frame],
            provenance: Provenance::GroundTruth,
        });
        start += size;
    }
    AnnotationSet::new(entries, t)
}

/// Normalized per-class frequency of a slice of labels.
pub fn label_histogram(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; num_classes];
    for &l in labels {
        h[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    for v in &mut h {
        *v /= n;
    }
    h
}

/// Chi-squared distance between two normalized histograms:
/// 0.5 * sum_i (p_i - q_i)^2 / (p_i + q_i), skipping empty bins.
pub fn chi2_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "histograms have {} vs {} bins",
            p.len(),
            q.len()
        )));
    }
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a + b > 0.0 {
            d += 0.5 * (a - b).powi(2) / (a + b);
        }
    }
    Ok(d)
}
