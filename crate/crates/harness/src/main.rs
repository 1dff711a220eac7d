//! `phaseseg` — CLI for the annotation-efficient phase recognition
//! experiments: dataset synthesis, sparse annotation, two-stage training,
//! pseudo-label expansion, evaluation, and the supervision-regime matrix.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use phaseseg_core::io::{atomic_write, write_annotation_csv, write_pseudo_label_csv};
use phaseseg_core::model::{load_checkpoint, save_checkpoint, TcnParams};

use phaseseg_harness::config::ExperimentConfig;
use phaseseg_harness::data::{load_dataset, save_dataset};
use phaseseg_harness::matrix::{report_csv, run_matrix, write_outputs};
use phaseseg_harness::train::{
    evaluate_model, expand_labels, log_csv, run_stage1, run_stage2, stage1_annotations,
    Evaluation,
};
use phaseseg_harness::CliError;

#[derive(Parser)]
#[command(name = "phaseseg", version, about = "Sparse-annotation phase recognition experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override every RNG seed in the config from this one value.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and save it to <out>/dataset.
    Synth(Common),
    /// Write the simulated sparse annotations for the train split.
    Annotate(Common),
    /// Stage-1 training; writes stage1.ckpt and stage1_log.csv.
    Train(Common),
    /// Expand annotations by uncertainty-gated diffusion; writes pseudo_labels.csv.
    Expand(Common),
    /// Stage-2 retraining from stage1.ckpt; writes stage2.ckpt and stage2_log.csv.
    Retrain(Common),
    /// Evaluate the newest checkpoint on the test split.
    Eval(Common),
    /// Run every supervision setup and write the report files.
    Matrix(Common),
    /// Print the report tables from a finished matrix run.
    Report(Common),
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Synth(c)
            | Cmd::Annotate(c)
            | Cmd::Train(c)
            | Cmd::Expand(c)
            | Cmd::Retrain(c)
            | Cmd::Eval(c)
            | Cmd::Matrix(c)
            | Cmd::Report(c) => c,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn load_stage1(out: &Path) -> Result<TcnParams, CliError> {
    let path = out.join("stage1.ckpt");
    if !path.exists() {
        return Err(CliError::Other(format!(
            "{} not found; run `phaseseg train` first",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path)?)
}

fn eval_json(eval: &Evaluation) -> serde_json::Value {
    let agg = |r: &phaseseg_core::metrics::AggregateReport| {
        json!({
            "num_videos": r.num_videos,
            "AC": r.accuracy.format(),
            "PR": r.precision.format(),
            "RE": r.recall.format(),
            "JA": r.jaccard.format(),
            "F1": r.f1.format(),
        })
    };
    json!({
        "strict": agg(&eval.strict),
        "relaxed": agg(&eval.relaxed),
        "per_video_accuracy": eval
            .per_video
            .iter()
            .map(|m| m.accuracy)
            .collect::<Vec<_>>(),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.cmd.common())?;
    let out = cfg.output.dir.clone();
    match cli.cmd {
        Cmd::Synth(_) => {
            let ds = load_dataset(&cfg)?;
            let dir = out.join("dataset");
            save_dataset(&ds, &dir)?;
            println!(
                "wrote {} train / {} test videos to {}",
                ds.train.len(),
                ds.test.len(),
                dir.display()
            );
        }
        Cmd::Annotate(_) => {
            let ds = load_dataset(&cfg)?;
            let anns = stage1_annotations(&ds, &cfg)?;
            let rows: Vec<(String, Vec<(usize, usize)>)> = ds
                .train
                .iter()
                .zip(&anns)
                .map(|(v, a)| {
                    let pairs = a.entries().iter().map(|e| (e.frame, e.label)).collect();
                    (v.features.video_id().to_string(), pairs)
                })
                .collect();
            fs::create_dir_all(&out)?;
            let path = out.join("annotations.csv");
            write_annotation_csv(&path, &rows)?;
            let total: usize = rows.iter().map(|(_, r)| r.len()).sum();
            println!("wrote {} annotations to {}", total, path.display());
        }
        Cmd::Train(_) => {
            let ds = load_dataset(&cfg)?;
            let model = run_stage1(&ds, &cfg)?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&out.join("stage1.ckpt"), &model.params)?;
            atomic_write(&out.join("stage1_log.csv"), log_csv(&model.log).as_bytes())?;
            let last = model.log.last().expect("at least one epoch");
            println!(
                "stage 1 done: {} epochs, final loss {:.4} -> {}",
                model.log.len(),
                last.total,
                out.join("stage1.ckpt").display()
            );
        }
        Cmd::Expand(_) => {
            let ds = load_dataset(&cfg)?;
            let params = load_stage1(&out)?;
            let expanded = expand_labels(&ds, &cfg, &params)?;
            let rows: Vec<_> = expanded
                .iter()
                .map(|(id, a)| (id.clone(), a.entries().to_vec()))
                .collect();
            let path = out.join("pseudo_labels.csv");
            write_pseudo_label_csv(&path, &rows)?;
            let total: usize = rows.iter().map(|(_, r)| r.len()).sum();
            println!("wrote {} labels to {}", total, path.display());
        }
        Cmd::Retrain(_) => {
            let ds = load_dataset(&cfg)?;
            let base = load_stage1(&out)?;
            let model = run_stage2(&ds, &cfg, &base)?;
            save_checkpoint(&out.join("stage2.ckpt"), &model.params)?;
            atomic_write(&out.join("stage2_log.csv"), log_csv(&model.log).as_bytes())?;
            let last = model.log.last().expect("at least one epoch");
            println!(
                "stage 2 done: {} epochs, final loss {:.4} -> {}",
                model.log.len(),
                last.total,
                out.join("stage2.ckpt").display()
            );
        }
        Cmd::Eval(_) => {
            let ds = load_dataset(&cfg)?;
            let stage2 = out.join("stage2.ckpt");
            let (params, which) = if stage2.exists() {
                (load_checkpoint(&stage2)?, "stage2")
            } else {
                (load_stage1(&out)?, "stage1")
            };
            let eval = evaluate_model(&params, &ds.test, ds.num_phases, ds.fps)?;
            let mut text = serde_json::to_string_pretty(&eval_json(&eval))
                .map_err(|e| CliError::Other(e.to_string()))?;
            text.push('\n');
            atomic_write(&out.join("eval.json"), text.as_bytes())?;
            println!(
                "{} on {} test videos: AC {} | PR {} | RE {} | JA {} | F1 {}",
                which,
                eval.strict.num_videos,
                eval.strict.accuracy.format(),
                eval.strict.precision.format(),
                eval.strict.recall.format(),
                eval.strict.jaccard.format(),
                eval.strict.f1.format()
            );
        }
        Cmd::Matrix(_) => {
            let ds = load_dataset(&cfg)?;
            let results = run_matrix(&ds, &cfg)?;
            write_outputs(&out, &cfg, &results)?;
            let failures: Vec<_> = results
                .cells
                .iter()
                .filter_map(|c| c.error.as_ref().map(|e| format!("{}/{}: {e}", c.setup, c.stage)))
                .collect();
            println!(
                "matrix done: {} cells ({} failed) -> {}",
                results.cells.len(),
                failures.len(),
                out.join("report.csv").display()
            );
            for f in &failures {
                eprintln!("warning: {f}");
            }
            print!("{}", report_csv(&results, false));
        }
        Cmd::Report(_) => {
            for (title, file) in [("strict", "report.csv"), ("relaxed", "report_relaxed.csv")] {
                let path = out.join(file);
                let text = fs::read_to_string(&path).map_err(|e| {
                    CliError::Other(format!("{}: {e}", path.display()))
                })?;
                println!("# {title}");
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
