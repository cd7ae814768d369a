//! Command-line front end. Every subcommand reads a flat `key = value`
//! config (`--config`) with `--set key=value` overrides on top.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datamodel::{read_annotations, read_detections, read_ground_truth, write_atomic, write_detections, Task};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, with_actions, ActionPairing, EvalReport, IOU_THRESHOLDS};
use crate::ingest::{load_feature_dir, Modality};
use crate::kvconfig::{parse_list, KvConfig};
use crate::model::ModelParams;
use crate::postprocess::{postprocess_video, read_scores, write_scores, PostprocessConfig};
use crate::synthgen::{generate, SynthConfig};
use crate::trainer::{detect, score_videos, train, write_log, Dataset, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "nwsd",
    version,
    about = "Temporal action detection from narration timestamps"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "NWSD_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    #[command(after_help = generate_help())]
    Generate(ConfigArgs),
    /// Train a detector and keep the best validation checkpoint.
    #[command(after_help = train_help())]
    Train(ConfigArgs),
    /// Dump per-frame class scores for every video.
    #[command(after_help = infer_help())]
    Infer(ConfigArgs),
    /// Turn score dumps into detections.
    #[command(after_help = postprocess_help())]
    Postprocess(ConfigArgs),
    /// Evaluate detections against ground truth.
    #[command(after_help = eval_help())]
    Eval(ConfigArgs),
    /// Compare several checkpoints on the same videos.
    #[command(after_help = report_help())]
    Report(ConfigArgs),
}

fn keys_help(groups: &[(&str, Vec<(&str, String)>)]) -> String {
    let mut out = String::from("Config keys (default):\n");
    for (title, pairs) in groups {
        let _ = writeln!(out, "  [{title}]");
        for (k, v) in pairs {
            let shown = if v.is_empty() { "<required>" } else { v.as_str() };
            let _ = writeln!(out, "    {k} = {shown}");
        }
    }
    out
}

fn postprocess_pairs() -> Vec<(&'static str, String)> {
    let d = PostprocessConfig::default();
    vec![
        ("smooth_size", d.smooth_size.to_string()),
        ("threshold_low", crate::postprocess::THRESHOLD_LOW.to_string()),
        ("threshold_high", crate::postprocess::THRESHOLD_HIGH.to_string()),
        ("threshold_count", crate::postprocess::THRESHOLD_COUNT.to_string()),
        ("nms_iou", d.nms_iou.to_string()),
    ]
}

fn pairing_pairs() -> Vec<(&'static str, String)> {
    vec![("action_pair_iou", ActionPairing::default().min_iou.to_string())]
}

fn generate_help() -> String {
    keys_help(&[
        ("paths", vec![("out_dir", String::new())]),
        ("data", SynthConfig::default().to_pairs()),
    ])
}

fn train_help() -> String {
    keys_help(&[
        (
            "paths",
            vec![
                ("features_dir", String::new()),
                ("annotations", String::new()),
                ("ground_truth", String::new()),
                ("checkpoint", String::new()),
                ("log", String::new()),
                ("val_list", "(not written)".into()),
                ("c_verb", "(largest label + 1)".into()),
                ("c_noun", "(largest label + 1)".into()),
            ],
        ),
        ("training", TrainConfig::default().to_pairs()),
    ])
}

fn infer_help() -> String {
    keys_help(&[(
        "paths",
        vec![
            ("checkpoint", String::new()),
            ("features_dir", String::new()),
            ("scores", String::new()),
            ("modalities", "rgb,flow,audio".into()),
            ("video_list", "(all videos)".into()),
        ],
    )])
}

fn postprocess_help() -> String {
    keys_help(&[
        ("paths", vec![("scores", String::new()), ("detections", String::new())]),
        ("postprocess", postprocess_pairs()),
    ])
}

fn eval_help() -> String {
    keys_help(&[
        (
            "paths",
            vec![
                ("detections", String::new()),
                ("ground_truth", String::new()),
                ("report_csv", "(not written)".into()),
                ("report_json", "(not written)".into()),
            ],
        ),
        ("evaluation", pairing_pairs()),
    ])
}

fn report_help() -> String {
    let mut post = postprocess_pairs();
    post.extend(pairing_pairs());
    keys_help(&[
        (
            "paths",
            vec![
                ("checkpoints", String::new()),
                ("features_dir", String::new()),
                ("ground_truth", String::new()),
                ("modalities", "rgb,flow,audio".into()),
                ("video_list", "(all videos)".into()),
                ("out", "(stdout only)".into()),
            ],
        ),
        ("postprocess", post),
    ])
}

/// Files created by a command; removed again unless the command commits.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.paths.iter().rev() {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(p);
            } else {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<KvConfig> {
    let mut cfg = match &args.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

fn required_path(cfg: &mut KvConfig, key: &str) -> Result<PathBuf> {
    cfg.take_raw(key)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

fn optional_path(cfg: &mut KvConfig, key: &str) -> Option<PathBuf> {
    cfg.take_raw(key).filter(|s| !s.is_empty()).map(PathBuf::from)
}

fn take_modalities(cfg: &mut KvConfig) -> Result<Vec<Modality>> {
    match cfg.take_raw("modalities") {
        Some(raw) => parse_list("modalities", &raw),
        None => Ok(Modality::ALL.to_vec()),
    }
}

fn take_pairing(cfg: &mut KvConfig) -> Result<ActionPairing> {
    let min_iou: f64 = cfg.take_or("action_pair_iou", ActionPairing::default().min_iou)?;
    if !(0.0..=1.0).contains(&min_iou) {
        return Err(Error::InvalidValue {
            key: "action_pair_iou".into(),
            reason: format!("{min_iou} is outside [0, 1]"),
        });
    }
    Ok(ActionPairing { min_iou })
}

fn read_video_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// Features of `features_dir` restricted to an optional video list, fused
/// with `modalities` and paired with whatever ground truth is given.
fn load_videos(
    features_dir: &Path,
    modalities: &[Modality],
    video_list: Option<&Path>,
    ground_truth: &[crate::datamodel::GroundTruthInstance],
) -> Result<Dataset> {
    let mut features = load_feature_dir(features_dir)?;
    if let Some(list) = video_list {
        let wanted = read_video_list(list)?;
        features.retain(|v| wanted.contains(&v.video_id));
    }
    if features.is_empty() {
        return Err(Error::Config(format!(
            "no videos selected from {}",
            features_dir.display()
        )));
    }
    let ids: BTreeSet<&str> = features.iter().map(|v| v.video_id.as_str()).collect();
    let gt: Vec<_> = ground_truth
        .iter()
        .filter(|g| ids.contains(g.video_id.as_str()))
        .cloned()
        .collect();
    // class counts only matter for training; keep them loose here
    Dataset::assemble(&features, &[], &gt, modalities, Some((usize::MAX, usize::MAX)))
}

fn cmd_generate(args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    let out_dir = required_path(&mut cfg, "out_dir")?;
    let synth = SynthConfig::from_kv(&mut cfg)?;
    cfg.finish()?;
    let mut outputs = Outputs::new();
    if !out_dir.exists() {
        outputs.track(&out_dir);
    }
    let ds = generate(&synth)?;
    ds.write(&out_dir)?;
    outputs.commit();
    println!(
        "generated {} videos, {} instances in {}",
        ds.videos.len(),
        ds.ground_truth.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    let features_dir = required_path(&mut cfg, "features_dir")?;
    let annotations = required_path(&mut cfg, "annotations")?;
    let ground_truth = required_path(&mut cfg, "ground_truth")?;
    let checkpoint = required_path(&mut cfg, "checkpoint")?;
    let log_path = required_path(&mut cfg, "log")?;
    let val_list = optional_path(&mut cfg, "val_list");
    let c_verb: Option<usize> = cfg.take("c_verb")?;
    let c_noun: Option<usize> = cfg.take("c_noun")?;
    let train_cfg = TrainConfig::from_kv(&mut cfg)?;
    cfg.finish()?;

    let features = load_feature_dir(&features_dir)?;
    let anns = read_annotations(&annotations)?;
    let gt = read_ground_truth(&ground_truth)?;
    let classes = match (c_verb, c_noun) {
        (Some(v), Some(n)) => Some((v, n)),
        (None, None) => None,
        _ => return Err(Error::Config("set both c_verb and c_noun or neither".into())),
    };
    let data = Dataset::assemble(&features, &anns, &gt, &train_cfg.modalities, classes)?;
    let outcome = train(&data, &train_cfg)?;
    if !outcome.params.is_finite() {
        return Err(Error::Numeric("trained parameters are not finite".into()));
    }
    let mut outputs = Outputs::new();
    outputs.track(&checkpoint);
    outcome.params.save(&checkpoint)?;
    outputs.track(&log_path);
    write_log(&log_path, &outcome.log)?;
    if let Some(p) = &val_list {
        outputs.track(p);
        let mut text = outcome.val_videos.join("\n");
        text.push('\n');
        write_text(p, &text)?;
    }
    outputs.commit();
    match (outcome.best_step, outcome.best_val_map) {
        (Some(s), Some(m)) => println!("best checkpoint at step {s}, val action mAP {m:.6}"),
        _ => println!("no validation videos; saved final parameters"),
    }
    Ok(())
}

fn cmd_infer(args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    let checkpoint = required_path(&mut cfg, "checkpoint")?;
    let features_dir = required_path(&mut cfg, "features_dir")?;
    let scores_path = required_path(&mut cfg, "scores")?;
    let modalities = take_modalities(&mut cfg)?;
    let video_list = optional_path(&mut cfg, "video_list");
    cfg.finish()?;
    let params = ModelParams::load(&checkpoint)?;
    let data = load_videos(&features_dir, &modalities, video_list.as_deref(), &[])?;
    let videos: Vec<_> = data.videos.iter().collect();
    let scores = score_videos(&params, &videos)?;
    if scores.iter().any(|s| s.heads.iter().any(|h| !h.is_finite())) {
        return Err(Error::Numeric("non-finite frame scores".into()));
    }
    write_scores(&scores_path, &scores)?;
    println!("scored {} videos into {}", scores.len(), scores_path.display());
    Ok(())
}

fn cmd_postprocess(args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    let scores_path = required_path(&mut cfg, "scores")?;
    let detections_path = required_path(&mut cfg, "detections")?;
    let pp = PostprocessConfig::from_kv(&mut cfg)?;
    cfg.finish()?;
    let scores = read_scores(&scores_path)?;
    let mut detections = Vec::new();
    for s in &scores {
        detections.extend(postprocess_video(s, &pp)?);
    }
    write_detections(&detections_path, &detections)?;
    println!("wrote {} detections to {}", detections.len(), detections_path.display());
    Ok(())
}

fn write_report(report: &EvalReport, csv: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let mut outputs = Outputs::new();
    if let Some(p) = csv {
        outputs.track(p);
    }
    if let Some(p) = json {
        outputs.track(p);
    }
    report.write(csv, json)?;
    outputs.commit();
    Ok(())
}

fn summary_line(report: &EvalReport) -> String {
    Task::ALL
        .iter()
        .map(|&t| format!("{t} {:.4}", report.task(t).avg))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_eval(args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    let detections_path = required_path(&mut cfg, "detections")?;
    let gt_path = required_path(&mut cfg, "ground_truth")?;
    let csv = optional_path(&mut cfg, "report_csv");
    let json = optional_path(&mut cfg, "report_json");
    let pairing = take_pairing(&mut cfg)?;
    cfg.finish()?;
    let detections = with_actions(read_detections(&detections_path)?, pairing);
    let gt = read_ground_truth(&gt_path)?;
    let report = evaluate(&detections, &gt)?;
    write_report(&report, csv.as_deref(), json.as_deref())?;
    println!("average mAP: {}", summary_line(&report));
    Ok(())
}

/// Rows `model,task,@0.1..@0.5,Avg` for each checkpoint and task.
pub fn comparison_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("model,task");
    for t in IOU_THRESHOLDS {
        let _ = write!(out, ",@{t}");
    }
    out.push_str(",Avg\n");
    for (name, report) in rows {
        for task in &report.tasks {
            let _ = write!(out, "{name},{}", task.task);
            for v in task.map {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{:.6}", task.avg);
        }
    }
    out
}

fn cmd_report(args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    let raw = cfg
        .take_raw("checkpoints")
        .ok_or_else(|| Error::Config("missing required key `checkpoints`".into()))?;
    let checkpoints: Vec<PathBuf> = parse_list::<String>("checkpoints", &raw)?
        .into_iter()
        .map(PathBuf::from)
        .collect();
    if checkpoints.is_empty() {
        return Err(Error::Config("`checkpoints` lists no files".into()));
    }
    let features_dir = required_path(&mut cfg, "features_dir")?;
    let gt_path = required_path(&mut cfg, "ground_truth")?;
    let modalities = take_modalities(&mut cfg)?;
    let video_list = optional_path(&mut cfg, "video_list");
    let out = optional_path(&mut cfg, "out");
    let pp = PostprocessConfig::from_kv(&mut cfg)?;
    let pairing = take_pairing(&mut cfg)?;
    cfg.finish()?;

    let gt_all = read_ground_truth(&gt_path)?;
    let data = load_videos(&features_dir, &modalities, video_list.as_deref(), &gt_all)?;
    let videos: Vec<_> = data.videos.iter().collect();
    let gt: Vec<_> = videos.iter().flat_map(|v| v.ground_truth.iter().cloned()).collect();
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in &checkpoints {
        let params = ModelParams::load(path)?;
        let detections = detect(&score_videos(&params, &videos)?, &pp, pairing)?;
        let report = evaluate(&detections, &gt)?;
        let stem = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((format!("{}:{stem}", params.shape.variant), report));
    }
    let text = comparison_csv(&rows);
    if let Some(p) = &out {
        write_text(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Runs one command line. `argv[0]` is the program name.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(e.to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let body = || match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Postprocess(a) => cmd_postprocess(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match cli.threads {
        Some(0) => Err(Error::InvalidValue {
            key: "threads".into(),
            reason: "must be at least 1".into(),
        }),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}
