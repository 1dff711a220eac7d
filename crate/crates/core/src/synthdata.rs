//! Synthetic surgical-workflow generator.
//!
//! Emits per-video dense phase labels with realistic structure (variable
//! durations, occasionally skipped or swapped phases, strong class
//! imbalance) and feature vectors around per-phase prototypes with Gaussian
//! noise plus a slow cumulative drift. Everything is a pure function of the
//! config seed, so datasets are reproducible and train/test splits disjoint.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seq::{FeatureSequence, PhaseLabelSequence};
use crate::supervise::derive_rng;

/// RNG stream offsets keeping prototype, train, val, and test draws disjoint.
const PROTO_STREAM: u64 = 0x5eed_0001;
const TRAIN_STREAM: u64 = 0;
const VAL_STREAM: u64 = 2_000_000;
const TEST_STREAM: u64 = 1_000_000;

/// Generator settings for one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowConfig {
    pub num_phases: usize,
    /// Canonical phase visit order.
    pub order: Vec<usize>,
    /// Per-phase duration range in frames, inclusive on both ends.
    pub durations: Vec<(usize, usize)>,
    /// Per-phase probability of being skipped in a video.
    pub skip_prob: Vec<f64>,
    /// Probability of swapping an adjacent phase pair.
    pub swap_prob: f64,
    pub feature_dim: usize,
    /// Target mean distance between class prototypes.
    pub prototype_separation: f64,
    pub noise_std: f64,
    /// Per-step standard deviation of the cumulative within-video drift.
    pub drift_std: f64,
    pub num_train_videos: usize,
    pub num_val_videos: usize,
    pub num_test_videos: usize,
    pub fps: f64,
    pub seed: u64,
}

impl WorkflowConfig {
    /// Seven-phase preset: one dominant long phase, several rare short
    /// ones, video lengths in roughly 200..=400 frames, 40/40 split.
    pub fn cholec_like() -> Self {
        Self {
            num_phases: 7,
            order: (0..7).collect(),
            durations: vec![
                (45, 75),
                (50, 90),
                (10, 20),
                (65, 110),
                (8, 16),
                (40, 75),
                (6, 14),
            ],
            skip_prob: vec![0.0, 0.0, 0.2, 0.0, 0.15, 0.0, 0.1],
            swap_prob: 0.08,
            feature_dim: 16,
            prototype_separation: 5.0,
            noise_std: 1.0,
            drift_std: 0.05,
            num_train_videos: 40,
            num_val_videos: 0,
            num_test_videos: 40,
            fps: 1.0,
            seed: 0,
        }
    }

    /// Twelve-phase preset with longer videos and an 80/20/40 split.
    pub fn bypass_like() -> Self {
        Self {
            num_phases: 12,
            order: (0..12).collect(),
            durations: vec![
                (20, 45),
                (25, 50),
                (5, 12),
                (20, 45),
                (30, 60),
                (5, 12),
                (40, 80),
                (20, 45),
                (8, 18),
                (25, 50),
                (15, 35),
                (10, 24),
            ],
            skip_prob: vec![
                0.0, 0.0, 0.25, 0.0, 0.0, 0.2, 0.0, 0.0, 0.15, 0.0, 0.0, 0.1,
            ],
            swap_prob: 0.08,
            feature_dim: 16,
            prototype_separation: 5.0,
            noise_std: 1.0,
            drift_std: 0.05,
            num_train_videos: 80,
            num_val_videos: 20,
            num_test_videos: 40,
            fps: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_phases == 0 || self.order.is_empty() {
            return Err(Error::InvalidParameter("need at least one phase".into()));
        }
        if self.durations.len() != self.num_phases || self.skip_prob.len() != self.num_phases {
            return Err(Error::ShapeMismatch(format!(
                "durations and skip_prob must list all {} phases",
                self.num_phases
            )));
        }
        if let Some(&p) = self.order.iter().find(|&&p| p >= self.num_phases) {
            return Err(Error::InvalidParameter(format!(
                "phase {p} out of range in order"
            )));
        }
        for &(lo, hi) in &self.durations {
            if lo < 1 || hi < lo {
                return Err(Error::InvalidParameter(format!(
                    "bad duration range ({lo}, {hi})"
                )));
            }
        }
        for p in self.skip_prob.iter().chain(std::iter::once(&self.swap_prob)) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidParameter(format!(
                    "probability {p} outside [0,1]"
                )));
            }
        }
        if !(self.prototype_separation > 0.0) {
            return Err(Error::InvalidParameter("separation must be > 0".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidParameter("feature_dim must be >= 1".into()));
        }
        if self.noise_std < 0.0 || self.drift_std < 0.0 {
            return Err(Error::InvalidParameter("stds must be >= 0".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidParameter("fps must be > 0".into()));
        }
        Ok(())
    }
}

/// One video's dense labels: canonical order with per-phase skips, adjacent
/// swaps, and uniform durations. Retries (bounded) when every phase skips.
pub fn gen_labels(cfg: &WorkflowConfig, rng: &mut impl Rng) -> Result<PhaseLabelSequence> {
    cfg.validate()?;
    for _ in 0..100 {
        let mut phases: Vec<usize> = cfg
            .order
            .iter()
            .copied()
            .filter(|&p| !(rng.gen::<f64>() < cfg.skip_prob[p]))
            .collect();
        if phases.is_empty() {
            continue;
        }
        let mut i = 0;
        while i + 1 < phases.len() {
            if rng.gen::<f64>() < cfg.swap_prob {
                phases.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        let mut labels = Vec::new();
        for &p in &phases {
            let (lo, hi) = cfg.durations[p];
            let dur = rng.gen_range(lo..=hi);
            labels.extend(std::iter::repeat(p).take(dur));
        }
        return PhaseLabelSequence::new(labels, cfg.num_phases);
    }
    Err(Error::Degenerate(
        "all phases skipped in 100 consecutive draws".into(),
    ))
}

/// Class prototypes for a dataset: one Gaussian vector per phase, scaled so
/// the mean pairwise distance is close to the configured separation. The
/// draw depends only on the config seed, so every video of a dataset shares
/// the same prototypes.
pub fn prototypes(cfg: &WorkflowConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, PROTO_STREAM);
    let sigma = cfg.prototype_separation / (2.0 * cfg.feature_dim as f64).sqrt();
    let mut protos = Array2::zeros((cfg.num_phases, cfg.feature_dim));
    for v in protos.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = sigma * z;
    }
    Ok(protos)
}

/// Frame features for one labeled video: prototype + Gaussian noise +
/// cumulative drift.
pub fn gen_features(
    labels: &PhaseLabelSequence,
    cfg: &WorkflowConfig,
    rng: &mut impl Rng,
    video_id: impl Into<String>,
) -> Result<FeatureSequence> {
    let protos = prototypes(cfg)?;
    let d = cfg.feature_dim;
    let mut frames = Array2::zeros((labels.len(), d));
    let mut drift = Array1::<f64>::zeros(d);
    for (t, &label) in labels.labels().iter().enumerate() {
        if t > 0 && cfg.drift_std > 0.0 {
            for v in drift.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += cfg.drift_std * z;
            }
        }
        for j in 0..d {
            let z: f64 = if cfg.noise_std > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            frames[[t, j]] = protos[[label, j]] + cfg.noise_std * z + drift[j];
        }
    }
    FeatureSequence::new(frames, cfg.fps, video_id)
}

/// One generated video.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub features: FeatureSequence,
    pub labels: PhaseLabelSequence,
}

/// A reproducible dataset with disjoint train/val/test splits.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

fn gen_split(
    cfg: &WorkflowConfig,
    count: usize,
    stream_base: u64,
    prefix: &str,
) -> Result<Vec<SyntheticVideo>> {
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(cfg.seed, stream_base + i as u64);
            let labels = gen_labels(cfg, &mut rng)?;
            let features =
                gen_features(&labels, cfg, &mut rng, format!("{prefix}_{i:03}"))?;
            Ok(SyntheticVideo { features, labels })
        })
        .collect()
}

/// Generate the full dataset for a config.
pub fn gen_dataset(cfg: &WorkflowConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    Ok(SyntheticDataset {
        train: gen_split(cfg, cfg.num_train_videos, TRAIN_STREAM, "train")?,
        val: gen_split(cfg, cfg.num_val_videos, VAL_STREAM, "val")?,
        test: gen_split(cfg, cfg.num_test_videos, TEST_STREAM, "test")?,
    })
}
