//! Supervision-regime sweep: run every configured setup through both
//! training stages, collect strict and relaxed aggregates, and render the
//! report artifacts.

use std::fs;
use std::path::Path;

use serde_json::json;

use phaseseg_core::io::atomic_write;
use phaseseg_core::metrics::AggregateReport;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::train::{evaluate_model, run_stage1, run_stage2};
use crate::CliError;

/// A parsed matrix setup string such as `"missing:0.2"` or `"skiptag:4"`.
#[derive(Debug, Clone, PartialEq)]
pub struct SetupSpec {
    /// Row label used in reports, e.g. `missing_0.2`.
    pub label: String,
    pub kind: String,
    pub miss_rate: Option<f64>,
    pub k: Option<usize>,
}

/// Parse one setup string: `full`, `timestamp`, `missing:<p>`
/// (alias `timestamp_missing:<p>`), or `skiptag:<k>`.
pub fn parse_setup(s: &str) -> Result<SetupSpec, CliError> {
    let bad = |msg: &str| CliError::Config(format!("matrix setup \"{s}\": {msg}"));
    let (head, arg) = match s.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (s, None),
    };
    match (head, arg) {
        ("full", None) => Ok(SetupSpec {
            label: "full".into(),
            kind: "full".into(),
            miss_rate: None,
            k: None,
        }),
        ("timestamp", None) => Ok(SetupSpec {
            label: "timestamp".into(),
            kind: "timestamp".into(),
            miss_rate: None,
            k: None,
        }),
        ("missing" | "timestamp_missing", Some(a)) => {
            let p: f64 = a.parse().map_err(|_| bad("rate must be a number"))?;
            if !(0.0..1.0).contains(&p) {
                return Err(bad("rate must be in [0, 1)"));
            }
            Ok(SetupSpec {
                label: format!("missing_{a}"),
                kind: "timestamp_missing".into(),
                miss_rate: Some(p),
                k: None,
            })
        }
        ("skiptag", Some(a)) => {
            let k: usize = a.parse().map_err(|_| bad("k must be an integer"))?;
            if k == 0 {
                return Err(bad("k must be >= 1"));
            }
            Ok(SetupSpec {
                label: format!("skiptag_{k}"),
                kind: "skiptag".into(),
                miss_rate: None,
                k: Some(k),
            })
        }
        ("missing" | "timestamp_missing" | "skiptag", None) => {
            Err(bad("missing the :<value> argument"))
        }
        _ => Err(bad("unknown setup")),
    }
}

impl SetupSpec {
    /// Experiment config for this row (same dataset and training settings,
    /// different supervision).
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.supervision.kind = self.kind.clone();
        cfg.supervision.miss_rate = self.miss_rate;
        cfg.supervision.k = self.k;
        cfg
    }
}

/// One report row: a setup evaluated after one of the two stages.
#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub setup: String,
    /// `"base"` after stage 1, `"stage2"` after the second stage.
    pub stage: String,
    pub strict: Option<AggregateReport>,
    pub relaxed: Option<AggregateReport>,
    pub error: Option<String>,
}

impl MatrixCell {
    fn failed(setup: &str, stage: &str, error: String) -> Self {
        Self {
            setup: setup.into(),
            stage: stage.into(),
            strict: None,
            relaxed: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatrixResults {
    pub cells: Vec<MatrixCell>,
}

impl MatrixResults {
    /// Look up one row by setup label and stage name.
    pub fn cell(&self, setup: &str, stage: &str) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.setup == setup && c.stage == stage)
    }
}

/// Run every setup through stage 1 (and stage 2 when enabled) on a shared
/// dataset. A failing setup is recorded in its cell; the sweep continues.
pub fn run_matrix(ds: &Dataset, cfg: &ExperimentConfig) -> Result<MatrixResults, CliError> {
    // Audit: the sweep must never train on a test-split video.
    for tr in &ds.train {
        if ds
            .test
            .iter()
            .any(|te| te.features.video_id() == tr.features.video_id())
        {
            return Err(CliError::Config(format!(
                "video \"{}\" appears in both train and test splits",
                tr.features.video_id()
            )));
        }
    }
    let mut cells = Vec::new();
    for raw in &cfg.matrix.setups {
        let spec = parse_setup(raw)?;
        let row_cfg = spec.apply(cfg);
        let label = &spec.label;
        let stage1 = match run_stage1(ds, &row_cfg) {
            Ok(m) => m,
            Err(e) => {
                cells.push(MatrixCell::failed(label, "base", e.to_string()));
                if row_cfg.train.stage2 {
                    cells.push(MatrixCell::failed(
                        label,
                        "stage2",
                        "skipped: stage 1 failed".into(),
                    ));
                }
                continue;
            }
        };
        match evaluate_model(&stage1.params, &ds.test, ds.num_phases, ds.fps) {
            Ok(eval) => cells.push(MatrixCell {
                setup: label.clone(),
                stage: "base".into(),
                strict: Some(eval.strict),
                relaxed: Some(eval.relaxed),
                error: None,
            }),
            Err(e) => cells.push(MatrixCell::failed(label, "base", e.to_string())),
        }
        if row_cfg.train.stage2 {
            let outcome = run_stage2(ds, &row_cfg, &stage1.params).and_then(|m| {
                evaluate_model(&m.params, &ds.test, ds.num_phases, ds.fps)
            });
            match outcome {
                Ok(eval) => cells.push(MatrixCell {
                    setup: label.clone(),
                    stage: "stage2".into(),
                    strict: Some(eval.strict),
                    relaxed: Some(eval.relaxed),
                    error: None,
                }),
                Err(e) => cells.push(MatrixCell::failed(label, "stage2", e.to_string())),
            }
        }
    }
    Ok(MatrixResults { cells })
}

fn report_row(setup: &str, stage: &str, report: Option<&AggregateReport>) -> String {
    match report {
        Some(r) => format!(
            "{},{},{},{},{},{},{}\n",
            setup,
            stage,
            r.recall.format(),
            r.precision.format(),
            r.jaccard.format(),
            r.accuracy.format(),
            r.f1.format()
        ),
        None => format!("{setup},{stage},error,error,error,error,error\n"),
    }
}

/// Render the report table. Column order is fixed: RE, PR, JA, AC, F1.
pub fn report_csv(results: &MatrixResults, relaxed: bool) -> String {
    let mut out = String::from("setup,stage,RE,PR,JA,AC,F1\n");
    for cell in &results.cells {
        let report = if relaxed {
            cell.relaxed.as_ref()
        } else {
            cell.strict.as_ref()
        };
        out.push_str(&report_row(&cell.setup, &cell.stage, report));
    }
    out
}

/// Machine-readable run manifest: the resolved config, per-cell status, and
/// raw aggregate numbers. Contains nothing run-dependent beyond the results
/// themselves, so identical runs produce identical bytes.
pub fn manifest_json(
    cfg: &ExperimentConfig,
    results: &MatrixResults,
) -> Result<String, CliError> {
    let report_json = |r: &AggregateReport| {
        json!({
            "num_videos": r.num_videos,
            "accuracy": [r.accuracy.mean, r.accuracy.std],
            "precision": [r.precision.mean, r.precision.std],
            "recall": [r.recall.mean, r.recall.std],
            "jaccard": [r.jaccard.mean, r.jaccard.std],
            "f1": [r.f1.mean, r.f1.std],
        })
    };
    let cells: Vec<_> = results
        .cells
        .iter()
        .map(|c| {
            json!({
                "setup": c.setup,
                "stage": c.stage,
                "status": if c.error.is_none() { "ok" } else { "error" },
                "error": c.error,
                "strict": c.strict.as_ref().map(report_json),
                "relaxed": c.relaxed.as_ref().map(report_json),
            })
        })
        .collect();
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "cells": cells,
    });
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Other(format!("manifest serialization: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Write `report.csv`, `report_relaxed.csv`, and `manifest.json` into the
/// output directory (each atomically).
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    results: &MatrixResults,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    atomic_write(&dir.join("report.csv"), report_csv(results, false).as_bytes())?;
    atomic_write(
        &dir.join("report_relaxed.csv"),
        report_csv(results, true).as_bytes(),
    )?;
    atomic_write(
        &dir.join("manifest.json"),
        manifest_json(cfg, results)?.as_bytes(),
    )?;
    Ok(())
}
