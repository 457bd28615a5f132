//! Operator surface: dataset generation, training in four modes, offline
//! pseudo labeling, evaluation, and run comparison reports.
//!
//! Every command is deterministic given its config and seed, writes a
//! resolved config snapshot into its output directory, and exits nonzero
//! with a machine-readable JSON error record on stderr when it fails.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use boxseg::config::RunConfig;
use boxseg::data::{generate_shapes, load_eval_dataset, write_dataset, ShapesConfig};
use boxseg::engine::{
    infer_predictions, model_from_checkpoint, pseudo_label_dataset, run_training,
};
use boxseg::eval::evaluate;
use boxseg::report::{generate_report, qualitative_panel};

#[derive(Parser)]
#[command(name = "boxseg", about = "Box-supervised instance segmentation trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset (train/ and eval/ splits).
    Generate(GenerateArgs),
    /// Train a model in one of the four modes.
    Train(TrainArgs),
    /// Label a dataset's ground-truth boxes with a trained checkpoint.
    PseudoLabel(PseudoLabelArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Build a comparison report over finished run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Optional TOML config for the generator.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value overrides of the generator config.
    #[arg(long = "set")]
    sets: Vec<String>,
}

/// Generator config: counts per split plus the shape parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenerateConfig {
    train_count: usize,
    eval_count: usize,
    image_size: usize,
    min_objects: usize,
    max_objects: usize,
    min_half_axis: f64,
    max_half_axis: f64,
    bg_noise: f64,
    color_noise: f64,
    occlusion_rate: f64,
    seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let s = ShapesConfig::default();
        GenerateConfig {
            train_count: 500,
            eval_count: 100,
            image_size: s.image_size,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_half_axis: s.min_half_axis,
            max_half_axis: s.max_half_axis,
            bg_noise: s.bg_noise,
            color_noise: s.color_noise,
            occlusion_rate: s.occlusion_rate,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    fn shapes(&self, count: usize, seed: u64) -> ShapesConfig {
        ShapesConfig {
            count,
            image_size: self.image_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_half_axis: self.min_half_axis,
            max_half_axis: self.max_half_axis,
            bg_noise: self.bg_noise,
            color_noise: self.color_noise,
            occlusion_rate: self.occlusion_rate,
            seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Training mode override: box_only | boxteacher | self_train | oracle_full_sup.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Iteration count override.
    #[arg(long)]
    iters: Option<u64>,
    /// Labeler checkpoint (self_train mode).
    #[arg(long)]
    labeler: Option<PathBuf>,
    /// key=value overrides into the run config.
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Args)]
struct PseudoLabelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root containing the train/ split to label.
    #[arg(long)]
    dataset: PathBuf,
    /// Output annotation file (the score sidecar lands next to it).
    #[arg(long)]
    out: PathBuf,
    /// Optional run config supplying the assignment thresholds.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    dataset: PathBuf,
    /// Split to evaluate (train or eval).
    #[arg(long, default_value = "eval")]
    split: String,
    /// Where to write eval_report.json and qualitative.png; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory for report.md, summary.json, and plots.
    #[arg(long)]
    out: PathBuf,
    /// Run directories to compare.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    command: &'a str,
}

fn main() {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::Generate(a) => ("generate", cmd_generate(a)),
        Command::Train(a) => ("train", cmd_train(a)),
        Command::PseudoLabel(a) => ("pseudo-label", cmd_pseudo_label(a)),
        Command::Evaluate(a) => ("evaluate", cmd_evaluate(a)),
        Command::Report(a) => ("report", cmd_report(a)),
    };
    if let Err(e) = result {
        let record = ErrorRecord {
            error: &format!("{e:#}"),
            command: name,
        };
        eprintln!("{}", serde_json::to_string(&record).expect("error serializes"));
        std::process::exit(1);
    }
}

/// Load a TOML config (or defaults when absent) and apply `key=value` sets.
fn load_toml_with_sets<T: serde::de::DeserializeOwned + Default + Serialize>(
    path: Option<&Path>,
    sets: &[String],
) -> Result<T> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .with_context(|| format!("override '{set}' is not key=value"))?;
        let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let keys: Vec<&str> = key.split('.').collect();
        let mut current = &mut table;
        for k in &keys[..keys.len() - 1] {
            current = current
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .with_context(|| format!("override '{key}' crosses a non-table"))?;
        }
        current.insert(keys[keys.len() - 1].to_string(), value);
    }
    let value: T = toml::Value::Table(table).try_into()?;
    Ok(value)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg: GenerateConfig = load_toml_with_sets(args.config.as_deref(), &args.sets)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&args.out)?;
    // distinct deterministic streams for the two splits
    let train = generate_shapes::<f32>(&cfg.shapes(cfg.train_count, cfg.seed))?;
    let eval_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let eval = generate_shapes::<f32>(&cfg.shapes(cfg.eval_count, eval_seed))?;
    write_dataset(&args.out.join("train"), &train)?;
    write_dataset(&args.out.join("eval"), &eval)?;
    std::fs::write(
        args.out.join("generate.snapshot.toml"),
        toml::to_string_pretty(&cfg)?,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "out": args.out,
            "train_images": train.len(),
            "eval_images": eval.len(),
        })
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut sets = args.sets.clone();
    if let Some(mode) = &args.mode {
        sets.push(format!("mode={mode}"));
    }
    if let Some(seed) = args.seed {
        sets.push(format!("schedule.seed={seed}"));
    }
    if let Some(out) = &args.out {
        sets.push(format!("out=\"{}\"", out.display()));
    }
    if let Some(iters) = args.iters {
        sets.push(format!("schedule.iters={iters}"));
    }
    if let Some(labeler) = &args.labeler {
        sets.push(format!("labeler=\"{}\"", labeler.display()));
    }
    let cfg = RunConfig::load_with_overrides(&args.config, &sets)?;
    let summary = run_training(&cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "out": summary.out_dir,
            "checkpoint": summary.checkpoint,
            "metrics": summary.metrics,
            "iters": summary.iters,
        })
    );
    Ok(())
}

fn cmd_pseudo_label(args: PseudoLabelArgs) -> Result<()> {
    let loss = match &args.config {
        Some(p) => RunConfig::load_with_overrides(p, &args.sets)?.loss,
        None => {
            // allow loss.* overrides without a config file
            #[derive(Default, Serialize, Deserialize)]
            #[serde(deny_unknown_fields, default)]
            struct Bare {
                loss: boxseg::config::LossConfig,
            }
            load_toml_with_sets::<Bare>(None, &args.sets)?.loss
        }
    };
    let data = boxseg::data::load_train_dataset::<f64>(&args.dataset.join("train"))?;
    let model = model_from_checkpoint::<f64>(&args.checkpoint)?;
    let (coco, scores, _) = pseudo_label_dataset(&model, &data, &loss)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    coco.save(&args.out)?;
    let sidecar = args.out.with_extension("scores.json");
    boxseg::data::coco::save_pseudo_scores(&sidecar, &scores)?;
    let assigned = coco
        .annotations
        .iter()
        .filter(|a| a.segmentation.is_some())
        .count();
    println!(
        "{}",
        serde_json::json!({
            "annotations": coco.annotations.len(),
            "assigned": assigned,
            "out": args.out,
            "scores": sidecar,
        })
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let split_dir = args.dataset.join(&args.split);
    let dataset = load_eval_dataset::<f64>(&split_dir)?;
    let model = model_from_checkpoint::<f64>(&args.checkpoint)?;
    let images: Vec<_> = dataset.iter().map(|s| s.image.clone()).collect();
    let preds = infer_predictions(&model, &images, 0.05)?;
    let report = evaluate(&preds, &dataset, &[]);

    let out_dir = args
        .out
        .clone()
        .or_else(|| args.checkpoint.parent().map(|p| p.to_path_buf()))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join("eval_report.json"), &report_json)?;
    let panel = qualitative_panel(&dataset, &preds, 8);
    panel
        .save(out_dir.join("qualitative.png"))
        .context("writing qualitative panel")?;
    println!(
        "{}",
        serde_json::json!({
            "miou": report.miou,
            "ap50": report.ap50,
            "ap75": report.ap75,
            "map_50_95": report.map_50_95,
            "out": out_dir,
        })
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let path = generate_report(&args.runs, &args.out)?;
    println!("{}", serde_json::json!({ "report": path }));
    Ok(())
}
