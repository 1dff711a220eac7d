//! TOML-backed experiment configuration with presets and ablation toggles.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use phaseseg_core::seq::Hyperparams;
use phaseseg_core::supervise::{derive_seed, SupervisionKind, SupervisionSpec};
use phaseseg_core::synthdata::WorkflowConfig;

use crate::CliError;

/// Full configuration for one experiment (or a matrix of them).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub supervision: SupervisionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub matrix: MatrixConfig,
    pub output: OutputConfig,
}

/// Where frames and labels come from: a named synthetic preset or an
/// on-disk directory produced by `phaseseg synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub preset: Option<String>,
    pub dir: Option<PathBuf>,
    /// Required for directory datasets; presets know their own phase count.
    pub num_phases: Option<usize>,
    pub num_train_videos: Option<usize>,
    pub num_test_videos: Option<usize>,
    pub fps: Option<f64>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            preset: Some("cholec-like".into()),
            dir: None,
            num_phases: None,
            num_train_videos: None,
            num_test_videos: None,
            fps: None,
            seed: 7,
        }
    }
}

/// Annotation regime simulated on top of the dense labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionConfig {
    /// One of "full", "timestamp", "timestamp_missing", "skiptag".
    pub kind: String,
    pub miss_rate: Option<f64>,
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            kind: "timestamp".into(),
            miss_rate: None,
            k: None,
            seed: 11,
        }
    }
}

impl SupervisionConfig {
    pub fn spec(&self) -> Result<SupervisionSpec, CliError> {
        let kind = match self.kind.as_str() {
            "full" => SupervisionKind::Full,
            "timestamp" => SupervisionKind::Timestamp,
            "timestamp_missing" | "missing" => SupervisionKind::TimestampMissing(
                self.miss_rate.ok_or_else(|| {
                    CliError::Config("timestamp_missing requires miss_rate".into())
                })?,
            ),
            "skiptag" => SupervisionKind::SkipTag(self.k.ok_or_else(|| {
                CliError::Config("skiptag requires k".into())
            })?),
            other => {
                return Err(CliError::Config(format!(
                    "unknown supervision kind \"{other}\""
                )))
            }
        };
        let spec = SupervisionSpec { kind, seed: self.seed };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// Network shape; input width and class count come from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub num_stages: usize,
    pub layers_per_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            num_stages: 2,
            layers_per_stage: 7,
        }
    }
}

/// Optimization settings, loss weights, and ablation toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Weights of smoothness, entropy, confidence, and alignment losses.
    pub alpha: [f64; 4],
    pub tau_s: f64,
    /// Defaults to half the maximum entropy, 0.5 * ln(num_phases).
    pub tau_transition: Option<f64>,
    pub m_t_temp: f64,
    pub window_w: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Run the additional training stage after stage 1.
    pub stage2: bool,
    pub stage2_epochs: Option<usize>,
    /// Ablation toggles. `focal = false` degrades the classification loss
    /// to plain cross-entropy; `reweighting = false` uses uniform class
    /// weights; `conf`/`stc` zero the respective loss weights; `diffusion =
    /// false` trains on the sparse annotations for all epochs.
    pub focal: bool,
    pub reweighting: bool,
    pub conf: bool,
    pub stc: bool,
    pub diffusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        Self {
            gamma: hp.gamma,
            alpha: hp.alpha,
            tau_s: hp.tau_s,
            tau_transition: None,
            m_t_temp: hp.m_t_temp,
            window_w: hp.window_w,
            lr: hp.lr,
            epochs: hp.epochs,
            warmup_epochs: hp.warmup_epochs,
            seed: hp.seed,
            stage2: true,
            stage2_epochs: None,
            focal: true,
            reweighting: true,
            conf: true,
            stc: true,
            diffusion: true,
        }
    }
}

/// Supervision setups the matrix runner sweeps over, in row order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    pub setups: Vec<String>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            setups: vec![
                "timestamp".into(),
                "missing:0.1".into(),
                "missing:0.2".into(),
                "missing:0.3".into(),
                "skiptag:7".into(),
                "skiptag:4".into(),
                "skiptag:2".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/out") }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.dataset.preset, &self.dataset.dir) {
            (None, None) => {
                return Err(CliError::Config(
                    "dataset needs either a preset or a dir".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "dataset preset and dir are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if self.dataset.preset.is_some() {
            self.workflow()?;
        } else if self.dataset.num_phases.is_none() {
            return Err(CliError::Config(
                "directory datasets require dataset.num_phases".into(),
            ));
        }
        self.supervision.spec()?;
        if self.train.epochs == 0 {
            return Err(CliError::Config("train.epochs must be >= 1".into()));
        }
        self.hyperparams(self.dataset.num_phases.unwrap_or(7))
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for s in &self.matrix.setups {
            crate::matrix::parse_setup(s)?;
        }
        Ok(())
    }

    /// Resolve the synthetic-dataset generator config (presets only).
    pub fn workflow(&self) -> Result<WorkflowConfig, CliError> {
        let name = self.dataset.preset.as_deref().ok_or_else(|| {
            CliError::Config("dataset has no preset; it is directory-backed".into())
        })?;
        let mut wf = match name {
            "cholec-like" => WorkflowConfig::cholec_like(),
            "bypass-like" => WorkflowConfig::bypass_like(),
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset \"{other}\" (expected cholec-like or bypass-like)"
                )))
            }
        };
        wf.seed = self.dataset.seed;
        if let Some(n) = self.dataset.num_train_videos {
            wf.num_train_videos = n;
        }
        if let Some(n) = self.dataset.num_test_videos {
            wf.num_test_videos = n;
        }
        if let Some(fps) = self.dataset.fps {
            wf.fps = fps;
        }
        if let Some(c) = self.dataset.num_phases {
            if c != wf.num_phases {
                return Err(CliError::Config(format!(
                    "preset {name} has {} phases, config says {c}",
                    wf.num_phases
                )));
            }
        }
        wf.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(wf)
    }

    /// Loss and optimizer settings with ablation toggles applied.
    pub fn hyperparams(&self, num_phases: usize) -> Hyperparams {
        let t = &self.train;
        let mut alpha = t.alpha;
        if !t.conf {
            alpha[2] = 0.0;
        }
        if !t.stc {
            alpha[3] = 0.0;
        }
        Hyperparams {
            gamma: if t.focal { t.gamma } else { 0.0 },
            alpha,
            tau_s: t.tau_s,
            tau_transition: t
                .tau_transition
                .unwrap_or_else(|| Hyperparams::default_tau_transition(num_phases)),
            m_t_temp: t.m_t_temp,
            window_w: t.window_w,
            lr: t.lr,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            seed: t.seed,
        }
    }

    /// Re-seed every random stream from one knob (used by `--seed`).
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = derive_seed(seed, 1);
        self.supervision.seed = derive_seed(seed, 2);
        self.train.seed = derive_seed(seed, 3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_minimal_toml() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            [dataset]
            preset = "cholec-like"
            num_train_videos = 4
            num_test_videos = 2

            [supervision]
            kind = "skiptag"
            k = 4

            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.workflow().unwrap().num_train_videos, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert!(matches!(
            cfg.supervision.spec().unwrap().kind,
            SupervisionKind::SkipTag(4)
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_kinds() {
        assert!(toml::from_str::<ExperimentConfig>("[dataset]\nbogus = 1\n").is_err());
        let cfg: ExperimentConfig =
            toml::from_str("[supervision]\nkind = \"nope\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let cfg: ExperimentConfig =
            toml::from_str("[supervision]\nkind = \"skiptag\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_toggles_zero_alphas() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.conf = false;
        cfg.train.stc = false;
        cfg.train.focal = false;
        let hp = cfg.hyperparams(7);
        assert_eq!(hp.alpha[2], 0.0);
        assert_eq!(hp.alpha[3], 0.0);
        assert_eq!(hp.gamma, 0.0);
        assert!(hp.alpha[0] > 0.0);
    }

    #[test]
    fn committed_example_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().and_then(|e| e.to_str()) != Some("toml") {
                continue;
            }
            let cfg = ExperimentConfig::load(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.workflow()
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
        assert!(seen >= 5, "expected the example configs, found {seen}");
    }

    #[test]
    fn seed_override_changes_all_streams() {
        let mut cfg = ExperimentConfig::default();
        let before = (cfg.dataset.seed, cfg.supervision.seed, cfg.train.seed);
        cfg.override_seed(99);
        let after = (cfg.dataset.seed, cfg.supervision.seed, cfg.train.seed);
        assert_ne!(before, after);
        assert_ne!(after.0, after.1);
        assert_ne!(after.1, after.2);
    }
}
