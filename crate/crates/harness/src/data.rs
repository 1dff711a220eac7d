//! Dataset plumbing: synthetic generation via presets, plus a simple
//! on-disk layout (`dataset.toml`, split lists, one feature file and one
//! label CSV per video) so experiments can also run on precomputed
//! features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use phaseseg_core::io::{
    atomic_write, read_features, read_label_csv, write_features, write_label_csv,
};
use phaseseg_core::seq::{FeatureSequence, PhaseLabelSequence};
use phaseseg_core::synthdata::{gen_dataset, SyntheticVideo};

use crate::config::ExperimentConfig;
use crate::CliError;

/// One video: frame features plus dense ground-truth labels.
#[derive(Debug, Clone)]
pub struct Video {
    pub features: FeatureSequence,
    pub labels: PhaseLabelSequence,
}

impl From<SyntheticVideo> for Video {
    fn from(v: SyntheticVideo) -> Self {
        Video { features: v.features, labels: v.labels }
    }
}

/// A train/test split with shared phase vocabulary and frame rate.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Video>,
    pub test: Vec<Video>,
    pub num_phases: usize,
    pub fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    num_phases: usize,
    fps: f64,
}

/// Materialize the dataset an experiment refers to.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    if let Some(dir) = &cfg.dataset.dir {
        return load_dir(dir, cfg);
    }
    let wf = cfg.workflow()?;
    let ds = gen_dataset(&wf).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(Dataset {
        train: ds.train.into_iter().map(Video::from).collect(),
        test: ds.test.into_iter().map(Video::from).collect(),
        num_phases: wf.num_phases,
        fps: wf.fps,
    })
}

fn load_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let meta_path = dir.join("dataset.toml");
    let meta: DatasetMeta = toml::from_str(
        &fs::read_to_string(&meta_path)
            .map_err(|e| CliError::Config(format!("{}: {e}", meta_path.display())))?,
    )
    .map_err(|e| CliError::Config(format!("{}: {e}", meta_path.display())))?;
    if let Some(c) = cfg.dataset.num_phases {
        if c != meta.num_phases {
            return Err(CliError::Config(format!(
                "dataset at {} has {} phases, config says {c}",
                dir.display(),
                meta.num_phases
            )));
        }
    }
    let load_split = |name: &str| -> Result<Vec<Video>, CliError> {
        let list = dir.join(format!("{name}.txt"));
        let text = fs::read_to_string(&list)
            .map_err(|e| CliError::Config(format!("{}: {e}", list.display())))?;
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|id| {
                let features =
                    read_features(&dir.join(format!("{id}.feat")), id, meta.fps)?;
                let labels =
                    read_label_csv(&dir.join(format!("{id}.labels.csv")), meta.num_phases)?;
                if labels.len() != features.num_frames() {
                    return Err(CliError::Other(format!(
                        "{id}: {} labels for {} frames",
                        labels.len(),
                        features.num_frames()
                    )));
                }
                Ok(Video { features, labels })
            })
            .collect()
    };
    let train = load_split("train")?;
    let test = load_split("test")?;
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Config(format!(
            "dataset at {} has an empty split",
            dir.display()
        )));
    }
    Ok(Dataset { train, test, num_phases: meta.num_phases, fps: meta.fps })
}

/// Write a dataset in the directory layout `load_dataset` reads.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta { num_phases: ds.num_phases, fps: ds.fps };
    let meta_text =
        toml::to_string(&meta).map_err(|e| CliError::Other(e.to_string()))?;
    atomic_write(&dir.join("dataset.toml"), meta_text.as_bytes())?;
    for (name, videos) in [("train", &ds.train), ("test", &ds.test)] {
        let mut ids = String::new();
        for v in videos {
            let id = v.features.video_id();
            ids.push_str(id);
            ids.push('\n');
            write_features(&dir.join(format!("{id}.feat")), &v.features)?;
            write_label_csv(&dir.join(format!("{id}.labels.csv")), &v.labels)?;
        }
        atomic_write(&dir.join(format!("{name}.txt")), ids.as_bytes())?;
    }
    Ok(())
}
