//! Command-line interface: generate data, train, infer, evaluate, account
//! adapter cost, demo augmentation, and render timelines.
//!
//! Every run writes `manifest.json` (schema, command, seed, full config,
//! format versions) into its output directory; rerunning with an identical
//! manifest reproduces every artifact bit for bit.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapters::{count_flops, count_params, AdapterKind, FlopDims};
use crate::data::{
    load_checkpoint, parse_config, save_config, Dataset, PipelineConfig,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::pipeline::Pipeline;
use crate::tensor::ParamStore;
use crate::types::{ProposalRecord};

#[derive(Parser)]
#[command(
    name = "east",
    version,
    about = "End-to-end action segmentation: detection over sampled frames, aggregation, TCN refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (features, labels, annotations, splits)
    /// plus a matching config file.
    Gen(GenArgs),
    /// Two-stage training: detector first, then the full pipeline with
    /// proposal-drop augmentation.
    Train(TrainArgs),
    /// Run inference for a split: predictions, proposals, segment summaries.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a split: Acc, Edit, F1@{k}, AP/mAP.
    Eval(InferArgs),
    /// Analytic adapter cost table (FLOPs and parameter counts).
    Flops(FlopsArgs),
    /// Read a proposal dump and emit augmented variants plus a removal report.
    AugmentDemo(AugmentDemoArgs),
    /// Render ground-truth/prediction label files as SVG timelines + CSV.
    PlotEmit(PlotEmitArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub train_videos: usize,
    #[arg(long, default_value_t = 10)]
    pub val_videos: usize,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 15.0)]
    pub fps_high: f64,
    #[arg(long, default_value_t = 3.0)]
    pub fps_low: f64,
    /// Also write clip files for end-to-end backbone training.
    #[arg(long, default_value_t = false)]
    pub with_clips: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Config overrides, e.g. --set train.seed=7 --set data.fps_low=1.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split name (a file under <root>/splits/).
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 1408)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 48)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub height: usize,
    #[arg(long, default_value_t = 10)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub pooled_h: usize,
    #[arg(long, default_value_t = 1)]
    pub pooled_w: usize,
    /// Output directory for the CSV table (printed to stdout regardless).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AugmentDemoArgs {
    /// Proposal dump (JSON lines: {video_id, t_start, t_end, dist, confidence}).
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub top_pool: usize,
    #[arg(long, default_value_t = 5)]
    pub deletions: usize,
    #[arg(long, default_value_t = 3)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PlotEmitArgs {
    /// Predicted label file (one class name per line).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Class-list mapping file.
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Apply `--set section.key=value` overrides to a config text.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut value: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override '{ov}' is not KEY=VALUE")))?;
        let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
            .map(|t: toml::Value| t["v"].clone())
            .or_else(|_| toml::from_str(&format!("v = \"{raw}\"")).map(|t: toml::Value| t["v"].clone()))
            .map_err(|e| Error::Invalid(format!("override '{ov}': {e}")))?;
        let mut cursor = &mut value;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                cursor
                    .as_table_mut()
                    .ok_or_else(|| Error::Invalid(format!("override '{ov}': not a table")))?
                    .insert(part.to_string(), parsed.clone());
            } else {
                cursor = cursor
                    .as_table_mut()
                    .and_then(|t| t.get_mut(*part))
                    .ok_or_else(|| Error::Invalid(format!("override '{ov}': unknown section {part}")))?;
            }
        }
    }
    Ok(toml::to_string_pretty(&value).expect("toml value serializes"))
}

const MANIFEST_SCHEMA: u32 = 1;

fn write_manifest(out: &Path, command: &str, seed: u64, config: Option<&PipelineConfig>) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = serde_json::json!({
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "seed": seed,
        "versions": {
            "crate": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": crate::tensor::CHECKPOINT_VERSION,
            "feature_format": crate::backbone::FEATURE_VERSION,
        },
        "config": config.map(|c| c.to_toml()),
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(out.join("manifest.json"), e))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_actions: args.classes,
        instances_per_video: args.instances,
        feature_dim: args.feature_dim,
        noise: args.noise,
        fps_high: args.fps_high,
        fps_low: args.fps_low,
        train_videos: args.train_videos,
        val_videos: args.val_videos,
        seed: args.seed,
        with_clips: args.with_clips,
        ..SyntheticSpec::default()
    };
    crate::data::synthetic::generate_dataset(&spec, &args.out)?;
    let mut cfg = PipelineConfig::synthetic_default(
        args.out.to_str().unwrap_or("."),
        args.classes,
        args.feature_dim,
    );
    cfg.data.fps_high = args.fps_high;
    cfg.data.fps_low = args.fps_low;
    cfg.train.seed = args.seed;
    save_config(&args.out.join("config.toml"), &cfg)?;
    write_manifest(&args.out, "gen", args.seed, Some(&cfg))?;
    println!(
        "generated {} train / {} val videos under {}",
        args.train_videos,
        args.val_videos,
        args.out.display()
    );
    Ok(())
}

fn load_config_with_overrides(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let text = apply_overrides(&text, overrides)?;
    parse_config(&text)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config_with_overrides(&args.config, &args.overrides)?;
    write_manifest(&args.out, "train", cfg.train.seed, Some(&cfg))?;
    let root = PathBuf::from(&cfg.data.root);
    let train = Dataset::open(&root, "train")?;
    let val = Dataset::open(&root, "val")?;
    let pipe = Pipeline::new(cfg)?;
    let mut store = ParamStore::new();
    pipe.register(&mut store)?;
    let summary = pipe.train(&mut store, &train, &val, &args.out, args.resume.as_deref())?;
    println!(
        "training done: best selection {:.3} at stage {} epoch {} ({} epochs logged)",
        summary.best_selection,
        summary.best_stage,
        summary.best_epoch,
        summary.epochs.len()
    );
    println!("checkpoints: {}", args.out.join("best.ckpt").display());
    Ok(())
}

fn load_pipeline_with_checkpoint(
    cfg: PipelineConfig,
    checkpoint: &Path,
) -> Result<(Pipeline, ParamStore<f32>)> {
    let pipe = Pipeline::new(cfg)?;
    let mut store = ParamStore::new();
    pipe.register(&mut store)?;
    let ck = load_checkpoint(checkpoint)?;
    let notes = ck.apply_to(&mut store, &pipe.cfg.to_toml())?;
    if notes.config_differs {
        eprintln!("warning: checkpoint was trained with a different config");
    }
    Ok((pipe, store))
}

fn run_inference(
    args: &InferArgs,
    write_predictions: bool,
) -> Result<(Pipeline, Dataset, Vec<crate::pipeline::VideoInference>)> {
    let cfg = load_config_with_overrides(&args.config, &args.overrides)?;
    write_manifest(&args.out, if write_predictions { "infer" } else { "eval" }, cfg.train.seed, Some(&cfg))?;
    let root = PathBuf::from(&cfg.data.root);
    let dataset = Dataset::open(&root, &args.split)?;
    let (pipe, store) = load_pipeline_with_checkpoint(cfg, &args.checkpoint)?;
    let inferences = pipe.infer_split(&store, &dataset)?;
    Ok((pipe, dataset, inferences))
}

fn write_prediction_files(
    out: &Path,
    dataset: &Dataset,
    inferences: &[crate::pipeline::VideoInference],
) -> Result<()> {
    let pred_dir = out.join("predictions");
    let prop_dir = out.join("proposals");
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    fs::create_dir_all(&prop_dir).map_err(|e| Error::io(&prop_dir, e))?;
    for inf in inferences {
        crate::metrics::save_label_file(
            &pred_dir.join(format!("{}.txt", inf.video_id)),
            &inf.y2,
            &dataset.classes,
        )?;
        let mut jsonl = String::new();
        for p in &inf.proposals {
            let rec = ProposalRecord::from_proposal(&inf.video_id, p);
            jsonl.push_str(&serde_json::to_string(&rec).expect("proposal serializes"));
            jsonl.push('\n');
        }
        fs::write(prop_dir.join(format!("{}.jsonl", inf.video_id)), jsonl)
            .map_err(|e| Error::io(&prop_dir, e))?;
        // JSON segment summary of the refined labeling
        let segs = crate::metrics::segments_from_labels(&inf.y2);
        let summary: Vec<serde_json::Value> = segs
            .iter()
            .map(|s| {
                serde_json::json!({
                    "start_frame": s.start,
                    "end_frame": s.end,
                    "class_index": s.class,
                    "class_name": dataset.classes.name(s.class).unwrap_or("?"),
                })
            })
            .collect();
        fs::write(
            pred_dir.join(format!("{}.segments.json", inf.video_id)),
            serde_json::to_string_pretty(&summary).expect("segments serialize"),
        )
        .map_err(|e| Error::io(&pred_dir, e))?;
    }
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let (_pipe, dataset, inferences) = run_inference(args, true)?;
    write_prediction_files(&args.out, &dataset, &inferences)?;
    println!(
        "wrote predictions and proposals for {} videos under {}",
        inferences.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &InferArgs) -> Result<()> {
    let (pipe, dataset, inferences) = run_inference(args, false)?;
    write_prediction_files(&args.out, &dataset, &inferences)?;
    let summary = pipe.summarize(&dataset, &inferences)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&summary).expect("report serializes"),
    )
    .map_err(|e| Error::io(args.out.join("report.json"), e))?;
    let mut csv = summary.metrics.csv();
    csv.push('\n');
    csv.push_str("iou_threshold,ap\n");
    for (thr, ap) in &summary.ap_per_iou {
        csv.push_str(&format!("{thr},{ap:.6}\n"));
    }
    csv.push_str(&format!("mAP,{:.6}\n", summary.map));
    fs::write(args.out.join("report.csv"), &csv)
        .map_err(|e| Error::io(args.out.join("report.csv"), e))?;

    println!("Acc   {:.2}", summary.metrics.acc);
    println!("Edit  {:.2}", summary.metrics.edit);
    for (k, f) in summary.metrics.f1_thresholds.iter().zip(&summary.metrics.f1) {
        println!("F1@{k:<3} {f:.2}");
    }
    for (thr, ap) in &summary.ap_per_iou {
        println!("AP@{thr:<4} {ap:.4}");
    }
    println!("mAP   {:.4}", summary.map);
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let dims = FlopDims {
        batch: 1,
        channels: args.channels,
        ratio: args.ratio,
        kernel: args.kernel,
        frames: args.frames,
        height: args.height,
        width: args.width,
        pooled: (args.pooled_h, args.pooled_w),
    };
    let mut csv = String::from("kind,flops,gflops,params\n");
    println!(
        "adapter cost at C={} r={} k={} T={} HxW={}x{} pooled={}x{}",
        args.channels,
        args.ratio,
        args.kernel,
        args.frames,
        args.height,
        args.width,
        args.pooled_h,
        args.pooled_w
    );
    println!("{:<10} {:>16} {:>12} {:>12}", "kind", "flops", "gflops", "params");
    for kind in [AdapterKind::Standard, AdapterKind::Cea, AdapterKind::Tia] {
        let rep = count_flops(kind, &dims);
        let params = count_params(kind, args.channels, args.ratio, args.kernel);
        println!(
            "{:<10} {:>16} {:>12.4} {:>12}",
            kind.to_string(),
            rep.total,
            rep.total as f64 / 1e9,
            params
        );
        csv.push_str(&format!(
            "{},{},{:.6},{}\n",
            kind,
            rep.total,
            rep.total as f64 / 1e9,
            params
        ));
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        fs::write(out.join("flops.csv"), &csv).map_err(|e| Error::io(out.join("flops.csv"), e))?;
        write_manifest(out, "flops", 0, None)?;
    }
    Ok(())
}

fn cmd_augment_demo(args: &AugmentDemoArgs) -> Result<()> {
    let file = fs::File::open(&args.proposals).map_err(|e| Error::io(&args.proposals, e))?;
    let reader = std::io::BufReader::new(file);
    let mut by_video: BTreeMap<String, Vec<crate::types::ActionProposal>> = BTreeMap::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&args.proposals, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format(&args.proposals, format!("line {}: {e}", ln + 1))
        })?;
        by_video.entry(rec.video_id.clone()).or_default().push(rec.into_proposal());
    }
    if by_video.is_empty() {
        return Err(Error::Data(format!(
            "no proposals in {}",
            args.proposals.display()
        )));
    }
    let spec = crate::augment::AugmentSpec {
        top_pool: args.top_pool,
        deletions: args.deletions,
        draws: args.draws,
        include_original: false,
        resample_k: false,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_manifest(&args.out, "augment-demo", args.seed, None)?;
    let mut report = Vec::new();
    for (video_id, props) in &by_video {
        let variants = crate::augment::augmented_batches(props, &spec, args.seed, video_id)?;
        for (d, (variant, removal)) in variants.iter().enumerate() {
            let mut jsonl = String::new();
            for p in variant {
                jsonl.push_str(
                    &serde_json::to_string(&ProposalRecord::from_proposal(video_id, p))
                        .expect("proposal serializes"),
                );
                jsonl.push('\n');
            }
            let name = format!("{video_id}.variant{d}.jsonl");
            fs::write(args.out.join(&name), jsonl).map_err(|e| Error::io(&args.out, e))?;
            report.push(serde_json::json!({
                "video_id": video_id,
                "variant": d,
                "removed_indices": removal.removed,
                "pool_size": removal.pool_size,
                "remaining": variant.len(),
            }));
        }
    }
    fs::write(
        args.out.join("removal_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(&args.out, e))?;
    println!(
        "wrote {} variants for {} videos under {}",
        args.draws,
        by_video.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_plot_emit(args: &PlotEmitArgs) -> Result<()> {
    let classes = ClassMap::load(&args.classes)?;
    let gt = crate::metrics::load_label_file(&args.gt, &classes)?;
    let pred = crate::metrics::load_label_file(&args.pred, &classes)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_manifest(&args.out, "plot-emit", 0, None)?;
    let rows: Vec<(&str, &[usize])> = vec![("gt", &gt), ("pred", &pred)];
    let svg = crate::plot::render_timeline_svg(&rows);
    fs::write(args.out.join("timeline.svg"), svg)
        .map_err(|e| Error::io(args.out.join("timeline.svg"), e))?;
    let csv = crate::plot::segments_csv(&rows, &classes)?;
    fs::write(args.out.join("segments.csv"), csv)
        .map_err(|e| Error::io(args.out.join("segments.csv"), e))?;
    println!("wrote timeline.svg and segments.csv under {}", args.out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
        Command::AugmentDemo(a) => cmd_augment_demo(a),
        Command::PlotEmit(a) => cmd_plot_emit(a),
    }
}

/// Binary entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
