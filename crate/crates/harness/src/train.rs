//! The two training stages, prediction, and test-split evaluation.
//!
//! Stage 1 trains on sparse annotations with the combined loss; after the
//! warmup epochs the annotation set is refreshed once per epoch by
//! uncertainty-gated diffusion. Stage 2 freezes argmax pseudo-labels away
//! from detected transitions and retrains a fresh, blank-free model with
//! unweighted focal plus smoothness only.

use ndarray::s;

use phaseseg_core::error::Error as CoreError;
use phaseseg_core::losses::{
    class_weights, classification_loss, confidence_loss, entropy_loss, smoothness_loss,
    total_loss, ClassWeights, LossValue,
};
use phaseseg_core::metrics::{
    aggregate, evaluate_video, evaluate_video_relaxed, AggregateReport, VideoMetrics,
    RELAX_WINDOW_SECONDS,
};
use phaseseg_core::model::{
    tcn_forward, tcn_forward_with_tape, train_step, TcnArch, TcnParams,
};
use phaseseg_core::pseudolabel::{
    detect_transitions, merge_with_ground_truth, scaled_entropy, stage2_labels,
    uatd_expand,
};
use phaseseg_core::seq::{
    normalize_logits, AnnotationSet, FeatureSequence, PhaseLabelSequence,
};
use phaseseg_core::stc::{
    neighbor_copy, star_augment, stc_loss, transcript_from_annotations, Transcript,
};
use phaseseg_core::supervise::{annotate, derive_seed};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Video};
use crate::CliError;

/// Seed stream separating the stage-2 initialization from stage 1.
const STAGE2_INIT_STREAM: u64 = 0x57a6_e002;

/// Per-epoch mean weighted loss contributions (per video, per stage).
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub smooth: f64,
    pub entropy: f64,
    pub confidence: f64,
    pub align: f64,
    pub total: f64,
}

/// Render the training log as CSV.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,cls,smooth,entropy,confidence,align,total\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.cls, e.smooth, e.entropy, e.confidence, e.align, e.total
        ));
    }
    out
}

/// A trained model together with its per-epoch loss log.
pub struct TrainedModel {
    pub params: TcnParams,
    pub log: Vec<EpochLog>,
}

/// Map a loss-component failure to the right exit class: non-finite values
/// are divergence (exit 3), anything else is a hard error.
fn component(name: &str, r: Result<LossValue, CoreError>) -> Result<LossValue, CliError> {
    r.map_err(|e| match e {
        CoreError::NonFinite(_) => {
            CliError::Divergence(format!("{name} loss became non-finite"))
        }
        other => CliError::Other(format!("{name} loss: {other}")),
    })
}

fn step_err(e: CoreError) -> CliError {
    match e {
        CoreError::NonFinite(_) => {
            CliError::Divergence("parameter gradient became non-finite".into())
        }
        other => CliError::Other(other.to_string()),
    }
}

/// Simulated sparse annotations for every training video.
pub fn stage1_annotations(
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<AnnotationSet>, CliError> {
    let spec = cfg.supervision.spec()?;
    ds.train
        .iter()
        .enumerate()
        .map(|(i, v)| annotate(&v.labels, &spec, i as u64).map_err(Into::into))
        .collect()
}

/// Uncertainty-gated diffusion of one video's annotations under the
/// current model.
fn diffuse(
    params: &TcnParams,
    video: &Video,
    gt: &AnnotationSet,
    num_phases: usize,
    m_t_temp: f64,
    tau: f64,
) -> Result<AnnotationSet, CliError> {
    let logits = tcn_forward(params, &video.features)?;
    let last = logits.last().expect("at least one stage");
    let pm = normalize_logits(last)?.with_aux_columns(last.ncols() - num_phases)?;
    let phase_logits = last.slice(s![.., ..num_phases]).to_owned();
    let u = scaled_entropy(&phase_logits, m_t_temp)?;
    uatd_expand(&pm, gt, &u, tau).map_err(Into::into)
}

/// Stage-1 training: combined loss on every stage's output, ground-truth
/// annotations only during warmup, per-epoch diffusion refresh afterwards.
pub fn run_stage1(ds: &Dataset, cfg: &ExperimentConfig) -> Result<TrainedModel, CliError> {
    if ds.train.is_empty() {
        return Err(CliError::Config("no training videos".into()));
    }
    let c = ds.num_phases;
    let hp = cfg.hyperparams(c);
    hp.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let gt = stage1_annotations(ds, cfg)?;
    let transcripts: Vec<Transcript> = gt
        .iter()
        .map(|a| transcript_from_annotations(a).and_then(|t| star_augment(&t)))
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    let arch = TcnArch {
        in_dim: ds.train[0].features.dim(),
        hidden: cfg.model.hidden,
        num_classes: c + 1,
        num_stages: cfg.model.num_stages,
        layers_per_stage: cfg.model.layers_per_stage,
    };
    let mut params = TcnParams::init(arch, hp.seed).map_err(|e| CliError::Config(e.to_string()))?;
    // Inverse-frequency weights are per video, from the annotator-provided
    // entries only: each video's loss is balanced over its own anchor
    // counts, and diffused pseudo-labels never feed back into the weights.
    let weights: Vec<ClassWeights> = if cfg.train.reweighting {
        gt.iter()
            .map(|a| class_weights(a, c))
            .collect::<Result<_, _>>()
            .map_err(CliError::from)?
    } else {
        vec![ClassWeights::uniform(c); ds.train.len()]
    };
    let mut current = gt.clone();
    let mut log = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        if cfg.train.diffusion && epoch >= hp.warmup_epochs {
            for (i, v) in ds.train.iter().enumerate() {
                current[i] = diffuse(&params, v, &gt[i], c, hp.m_t_temp, hp.tau_transition)?;
            }
        }
        let mut sums = [0.0f64; 6];
        for (i, v) in ds.train.iter().enumerate() {
            let (logits, tape) = tcn_forward_with_tape(&params, &v.features)?;
            let mut dlogits = Vec::with_capacity(logits.len());
            for stage_logits in &logits {
                let pm = normalize_logits(stage_logits)?.with_aux_columns(1)?;
                let (t_len, width) = (pm.num_frames(), pm.num_classes());
                let zero = || LossValue::zero(t_len, width);
                let cls = component(
                    "classification",
                    classification_loss(&pm, &current[i], &weights[i], hp.gamma),
                )?;
                let smooth = if hp.alpha[0] != 0.0 {
                    component("smoothness", smoothness_loss(&pm, hp.tau_s))?
                } else {
                    zero()
                };
                let ent = if hp.alpha[1] != 0.0 {
                    component("entropy", entropy_loss(&pm, &current[i]))?
                } else {
                    zero()
                };
                let conf = if hp.alpha[2] != 0.0 {
                    component("confidence", confidence_loss(&pm, &current[i]))?
                } else {
                    zero()
                };
                let align = if hp.alpha[3] != 0.0 {
                    component("alignment", stc_loss(&pm, &transcripts[i]))?
                } else {
                    zero()
                };
                let total = component(
                    "total",
                    total_loss(&cls, &smooth, &ent, &conf, &align, hp.alpha),
                )?;
                sums[0] += cls.value;
                sums[1] += hp.alpha[0] * smooth.value;
                sums[2] += hp.alpha[1] * ent.value;
                sums[3] += hp.alpha[2] * conf.value;
                sums[4] += hp.alpha[3] * align.value;
                sums[5] += total.value;
                dlogits.push(total.grad);
            }
            train_step(&mut params, &dlogits, tape, hp.lr).map_err(step_err)?;
        }
        let denom = (ds.train.len() * arch.num_stages) as f64;
        log.push(EpochLog {
            epoch,
            cls: sums[0] / denom,
            smooth: sums[1] / denom,
            entropy: sums[2] / denom,
            confidence: sums[3] / denom,
            align: sums[4] / denom,
            total: sums[5] / denom,
        });
    }
    Ok(TrainedModel { params, log })
}

/// Final diffusion pass of a trained stage-1 model over the train split
/// (the `expand` command's payload).
pub fn expand_labels(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    params: &TcnParams,
) -> Result<Vec<(String, AnnotationSet)>, CliError> {
    let c = ds.num_phases;
    let hp = cfg.hyperparams(c);
    let gt = stage1_annotations(ds, cfg)?;
    ds.train
        .iter()
        .zip(&gt)
        .map(|(v, g)| {
            let expanded = diffuse(params, v, g, c, hp.m_t_temp, hp.tau_transition)?;
            Ok((v.features.video_id().to_string(), expanded))
        })
        .collect()
}

/// Stage-2 training: fixed argmax pseudo-labels away from transitions
/// (ground truth overriding where they conflict), fresh blank-free model,
/// unweighted focal plus smoothness.
pub fn run_stage2(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    base: &TcnParams,
) -> Result<TrainedModel, CliError> {
    if ds.train.is_empty() {
        return Err(CliError::Config("no training videos".into()));
    }
    let c = ds.num_phases;
    let hp = cfg.hyperparams(c);
    let gt = stage1_annotations(ds, cfg)?;
    let mut labels = Vec::with_capacity(ds.train.len());
    let mut any_unmasked = false;
    for (i, v) in ds.train.iter().enumerate() {
        let logits = tcn_forward(base, &v.features)?;
        let last = logits.last().expect("at least one stage");
        let pm = normalize_logits(last)?.with_aux_columns(last.ncols() - c)?;
        let phase_logits = last.slice(s![.., ..c]).to_owned();
        let u = scaled_entropy(&phase_logits, hp.m_t_temp)?;
        let events = detect_transitions(&u, hp.tau_transition)?;
        match stage2_labels(&pm, &events, hp.window_w) {
            Ok(pseudo) => {
                any_unmasked = true;
                labels.push(merge_with_ground_truth(&pseudo, &gt[i])?);
            }
            // A fully masked video falls back to its sparse annotations.
            Err(CoreError::Degenerate(_)) => labels.push(gt[i].clone()),
            Err(e) => return Err(e.into()),
        }
    }
    if !any_unmasked {
        return Err(CliError::Other(
            "every video is fully masked within the transition window".into(),
        ));
    }
    let arch = TcnArch {
        in_dim: ds.train[0].features.dim(),
        hidden: cfg.model.hidden,
        num_classes: c,
        num_stages: cfg.model.num_stages,
        layers_per_stage: cfg.model.layers_per_stage,
    };
    let mut params = TcnParams::init(arch, derive_seed(hp.seed, STAGE2_INIT_STREAM))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let uniform = ClassWeights::uniform(c);
    let epochs = cfg.train.stage2_epochs.unwrap_or(hp.epochs);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut sums = [0.0f64; 3];
        for (i, v) in ds.train.iter().enumerate() {
            let (logits, tape) = tcn_forward_with_tape(&params, &v.features)?;
            let mut dlogits = Vec::with_capacity(logits.len());
            for stage_logits in &logits {
                let pm = normalize_logits(stage_logits)?;
                let (t_len, width) = (pm.num_frames(), pm.num_classes());
                let cls = component(
                    "classification",
                    classification_loss(&pm, &labels[i], &uniform, hp.gamma),
                )?;
                let smooth = component("smoothness", smoothness_loss(&pm, hp.tau_s))?;
                let zero = LossValue::zero(t_len, width);
                let total = component(
                    "total",
                    total_loss(&cls, &smooth, &zero, &zero, &zero, [hp.alpha[0], 0.0, 0.0, 0.0]),
                )?;
                sums[0] += cls.value;
                sums[1] += hp.alpha[0] * smooth.value;
                sums[2] += total.value;
                dlogits.push(total.grad);
            }
            train_step(&mut params, &dlogits, tape, hp.lr).map_err(step_err)?;
        }
        let denom = (ds.train.len() * arch.num_stages) as f64;
        log.push(EpochLog {
            epoch,
            cls: sums[0] / denom,
            smooth: sums[1] / denom,
            entropy: 0.0,
            confidence: 0.0,
            align: 0.0,
            total: sums[2] / denom,
        });
    }
    Ok(TrainedModel { params, log })
}

/// Predict dense phase labels for one video. Models with a blank output
/// head fall back to the nearest non-blank prediction at blank frames.
pub fn predict(
    params: &TcnParams,
    feats: &FeatureSequence,
    num_phases: usize,
) -> Result<PhaseLabelSequence, CliError> {
    let logits = tcn_forward(params, feats)?;
    let last = logits.last().expect("at least one stage");
    let width = last.ncols();
    if width == num_phases {
        let pm = normalize_logits(last)?;
        return PhaseLabelSequence::new(pm.argmax(), num_phases).map_err(Into::into);
    }
    if width != num_phases + 1 {
        return Err(CliError::Other(format!(
            "model emits {width} classes for {num_phases} phases"
        )));
    }
    let pm = normalize_logits(last)?.with_aux_columns(1)?;
    let raw = PhaseLabelSequence::new(pm.argmax(), num_phases + 1)?;
    neighbor_copy(&pm, &raw).map_err(Into::into)
}

/// Strict and relaxed aggregates over a video list.
pub struct Evaluation {
    pub strict: AggregateReport,
    pub relaxed: AggregateReport,
    pub per_video: Vec<VideoMetrics>,
}

/// Evaluate a model on a list of videos (strict plus relaxed-boundary).
pub fn evaluate_model(
    params: &TcnParams,
    videos: &[Video],
    num_phases: usize,
    fps: f64,
) -> Result<Evaluation, CliError> {
    let mut strict = Vec::with_capacity(videos.len());
    let mut relaxed = Vec::with_capacity(videos.len());
    for v in videos {
        let pred = predict(params, &v.features, num_phases)?;
        strict.push(evaluate_video(&pred, &v.labels)?);
        relaxed.push(evaluate_video_relaxed(
            &pred,
            &v.labels,
            fps,
            RELAX_WINDOW_SECONDS,
        )?);
    }
    Ok(Evaluation {
        strict: aggregate(&strict)?,
        relaxed: aggregate(&relaxed)?,
        per_video: strict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use phaseseg_core::synthdata::{gen_dataset, WorkflowConfig};

    /// A fast three-phase dataset with short videos.
    fn tiny_dataset(noise: f64) -> Dataset {
        let cfg = WorkflowConfig {
            num_phases: 3,
            order: vec![0, 1, 2],
            durations: vec![(12, 20), (18, 30), (8, 14)],
            skip_prob: vec![0.0; 3],
            swap_prob: 0.0,
            feature_dim: 6,
            prototype_separation: 5.0,
            noise_std: noise,
            drift_std: 0.0,
            num_train_videos: 3,
            num_val_videos: 0,
            num_test_videos: 2,
            fps: 1.0,
            seed: 5,
        };
        let ds = gen_dataset(&cfg).unwrap();
        Dataset {
            train: ds.train.into_iter().map(Video::from).collect(),
            test: ds.test.into_iter().map(Video::from).collect(),
            num_phases: 3,
            fps: 1.0,
        }
    }

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.supervision.kind = "full".into();
        cfg.model.hidden = 8;
        cfg.model.layers_per_stage = 4;
        cfg.train.epochs = 12;
        cfg.train.warmup_epochs = 6;
        cfg.train.window_w = 3;
        cfg.train.lr = 5e-3;
        cfg
    }

    #[test]
    fn stage1_loss_decreases_and_is_deterministic() {
        let ds = tiny_dataset(0.0);
        let cfg = tiny_cfg();
        let a = run_stage1(&ds, &cfg).unwrap();
        assert!(a.log.last().unwrap().total < a.log[0].total);
        // Smoothed (3-epoch mean) total is non-increasing after epoch 3.
        let t: Vec<f64> = a.log.iter().map(|e| e.total).collect();
        let smooth: Vec<f64> = (2..t.len())
            .map(|i| (t[i] + t[i - 1] + t[i - 2]) / 3.0)
            .collect();
        for w in smooth.windows(2).skip(1) {
            assert!(w[1] <= w[0] + 1e-6, "smoothed loss rose: {w:?}");
        }
        let b = run_stage1(&ds, &cfg).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
    }

    #[test]
    fn zero_alpha_leaves_only_classification_active() {
        let ds = tiny_dataset(0.5);
        let mut cfg = tiny_cfg();
        cfg.train.alpha = [0.0; 4];
        cfg.train.epochs = 2;
        let m = run_stage1(&ds, &cfg).unwrap();
        for e in &m.log {
            assert!(e.cls > 0.0);
            assert_eq!(e.smooth, 0.0);
            assert_eq!(e.entropy, 0.0);
            assert_eq!(e.confidence, 0.0);
            assert_eq!(e.align, 0.0);
            assert_eq!(e.total, e.cls);
        }
    }

    #[test]
    fn timestamp_training_with_diffusion_runs() {
        let ds = tiny_dataset(0.3);
        let mut cfg = tiny_cfg();
        cfg.supervision.kind = "timestamp".into();
        cfg.train.epochs = 8;
        cfg.train.warmup_epochs = 4;
        let m = run_stage1(&ds, &cfg).unwrap();
        let eval = evaluate_model(&m.params, &ds.test, ds.num_phases, ds.fps).unwrap();
        assert!(eval.strict.accuracy.mean > 40.0, "{}", eval.strict.accuracy.mean);
        assert!(eval.relaxed.accuracy.mean >= eval.strict.accuracy.mean - 1e-9);
    }

    #[test]
    fn stage2_trains_blank_free_model() {
        let ds = tiny_dataset(0.2);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 8;
        cfg.train.warmup_epochs = 8;
        let m1 = run_stage1(&ds, &cfg).unwrap();
        let m2 = run_stage2(&ds, &cfg, &m1.params).unwrap();
        assert_eq!(m2.params.arch().num_classes, ds.num_phases);
        assert_eq!(m1.params.arch().num_classes, ds.num_phases + 1);
        let pred = predict(&m2.params, &ds.test[0].features, ds.num_phases).unwrap();
        assert_eq!(pred.len(), ds.test[0].features.num_frames());
        for e in &m2.log {
            assert_eq!(e.align, 0.0);
            assert_eq!(e.confidence, 0.0);
        }
    }

    #[test]
    fn log_csv_shape() {
        let log = vec![EpochLog {
            epoch: 0,
            cls: 1.0,
            smooth: 0.25,
            entropy: 0.5,
            confidence: 0.0,
            align: 2.0,
            total: 3.75,
        }];
        let csv = log_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,cls,smooth,entropy,confidence,align,total"
        );
        assert!(lines.next().unwrap().starts_with("0,1.000000,0.250000,"));
    }
}
