//! Clip construction from narration timestamps, Adam optimisation and
//! validation-based checkpoint selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{
    group_by_video, seconds_to_frame, validate_dataset, write_atomic, Clip, Detection, GroundTruthInstance,
    NarrationAnnotation, VideoInfo,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, with_actions, ActionPairing, EvalReport};
use crate::ingest::{fuse, Modality, VideoFeatures};
use crate::kvconfig::{parse_list, KvConfig};
use crate::model::{infer_scores, loss_and_grads, Dropout, ModelParams, ModelShape, Target, Variant, DEFAULT_HIDDEN};
use crate::numkernel::Matrix;
use crate::postprocess::{postprocess_video, PostprocessConfig, VideoScores};

/// Cuts one video's narrations into clips: clip i spans
/// `[frame(t_i), frame(t_{i+1}))` and the last clip runs to the video end.
/// `annotations` must be sorted by time.
pub fn cut_clips(annotations: &[NarrationAnnotation], video_len_frames: usize, fps: f64) -> Vec<Clip> {
    let starts: Vec<usize> = annotations
        .iter()
        .map(|a| seconds_to_frame(a.time, fps).min(video_len_frames))
        .collect();
    annotations
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let start = starts[i];
            let end = starts.get(i + 1).copied().unwrap_or(video_len_frames).max(start);
            (end > start).then(|| Clip {
                video_id: a.video_id.clone(),
                start_frame: start,
                end_frame: end,
                verb: a.verb,
                noun: a.noun,
            })
        })
        .collect()
}

/// Per-frame verb and noun labels for a clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabels {
    pub verb: Vec<usize>,
    pub noun: Vec<usize>,
}

/// Narration-baseline labels: every frame of a clip takes the clip's class.
pub fn make_narr_bas_labels(clips: &[Clip]) -> Vec<FrameLabels> {
    clips
        .iter()
        .map(|c| FrameLabels {
            verb: vec![c.verb; c.len()],
            noun: vec![c.noun; c.len()],
        })
        .collect()
}

/// Ground-truth frame labels over `range`; frames outside every instance get
/// the background class (`c_verb` / `c_noun`).
pub fn ground_truth_frame_labels(
    instances: &[&GroundTruthInstance],
    range: std::ops::Range<usize>,
    fps: f64,
    c_verb: usize,
    c_noun: usize,
) -> FrameLabels {
    let mut verb = vec![c_verb; range.len()];
    let mut noun = vec![c_noun; range.len()];
    for g in instances {
        let s = seconds_to_frame(g.t_start, fps).max(range.start);
        let e = seconds_to_frame(g.t_end, fps).min(range.end);
        for f in s..e.max(s) {
            verb[f - range.start] = g.verb;
            noun[f - range.start] = g.noun;
        }
    }
    FrameLabels { verb, noun }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for every parameter block.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.first.len() {
        return Err(Error::Config(format!(
            "adam: {} parameter blocks, {} gradients, {} moment blocks",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "adam: block {i} is {:?} but gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in block {i} entry {k} at step {}",
                g.data()[k],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub hidden: usize,
    pub shared_trunk: bool,
    pub val_fraction: f64,
    pub modalities: Vec<Modality>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 8,
            max_steps: 2000,
            dropout_p: 0.5,
            seed: 0,
            variant: Variant::Ours,
            eval_every: 200,
            hidden: DEFAULT_HIDDEN,
            shared_trunk: true,
            val_fraction: 0.2,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "learning_rate",
        "batch_size",
        "max_steps",
        "dropout_p",
        "seed",
        "variant",
        "eval_every",
        "hidden",
        "shared_trunk",
        "val_fraction",
        "modalities",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p", "must be in [0, 1)");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must be in [0, 1)");
        }
        if self.modalities.is_empty() {
            return bad("modalities", "select at least one modality");
        }
        Ok(())
    }

    /// Reads the training keys, leaving everything else in `cfg`.
    pub fn from_kv(cfg: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let modalities = match cfg.take_raw("modalities") {
            Some(raw) => parse_list::<Modality>("modalities", &raw)?,
            None => d.modalities,
        };
        let out = Self {
            learning_rate: cfg.take_or("learning_rate", d.learning_rate)?,
            batch_size: cfg.take_or("batch_size", d.batch_size)?,
            max_steps: cfg.take_or("max_steps", d.max_steps)?,
            dropout_p: cfg.take_or("dropout_p", d.dropout_p)?,
            seed: cfg.take_or("seed", d.seed)?,
            variant: cfg.take_or("variant", d.variant)?,
            eval_every: cfg.take_or("eval_every", d.eval_every)?,
            hidden: cfg.take_or("hidden", d.hidden)?,
            shared_trunk: cfg.take_or("shared_trunk", d.shared_trunk)?,
            val_fraction: cfg.take_or("val_fraction", d.val_fraction)?,
            modalities,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let modalities: Vec<String> = self.modalities.iter().map(|m| m.to_string()).collect();
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("hidden", self.hidden.to_string()),
            ("shared_trunk", self.shared_trunk.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("modalities", modalities.join(",")),
        ]
    }
}

/// One fused video with its annotations.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub video_id: String,
    pub fps: f64,
    pub features: Matrix,
    pub annotations: Vec<NarrationAnnotation>,
    pub ground_truth: Vec<GroundTruthInstance>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Videos sorted by id plus class counts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub c_verb: usize,
    pub c_noun: usize,
}

impl Dataset {
    /// Fuses features and attaches annotations and ground truth. Class counts
    /// default to one past the largest label seen.
    pub fn assemble(
        features: &[VideoFeatures],
        annotations: &[NarrationAnnotation],
        ground_truth: &[GroundTruthInstance],
        modalities: &[Modality],
        classes: Option<(usize, usize)>,
    ) -> Result<Self> {
        let (c_verb, c_noun) = classes.unwrap_or_else(|| {
            let v = annotations
                .iter()
                .map(|a| a.verb)
                .chain(ground_truth.iter().map(|g| g.verb));
            let n = annotations
                .iter()
                .map(|a| a.noun)
                .chain(ground_truth.iter().map(|g| g.noun));
            (v.max().map_or(1, |m| m + 1), n.max().map_or(1, |m| m + 1))
        });
        let infos: Vec<VideoInfo> = features
            .iter()
            .map(|v| {
                Ok(VideoInfo {
                    video_id: v.video_id.clone(),
                    duration_sec: v
                        .duration_sec()
                        .ok_or_else(|| Error::Config(format!("video {} has no frames", v.video_id)))?,
                })
            })
            .collect::<Result<_>>()?;
        let violations = validate_dataset(annotations, &infos, c_verb, c_noun);
        if let Some(v) = violations.first() {
            return Err(Error::Config(format!(
                "{} annotation problem(s), first: {v}",
                violations.len()
            )));
        }
        if let Some(g) = ground_truth.iter().find(|g| g.verb >= c_verb || g.noun >= c_noun) {
            return Err(Error::Config(format!(
                "ground truth in {} has class {}:{} outside {c_verb}x{c_noun}",
                g.video_id, g.verb, g.noun
            )));
        }
        let mut by_video = group_by_video(annotations);
        let mut videos: Vec<VideoRecord> = features
            .iter()
            .map(|v| {
                let fused = fuse(v, modalities)?;
                Ok(VideoRecord {
                    video_id: v.video_id.clone(),
                    fps: v.fps,
                    features: fused.data,
                    annotations: by_video.remove(&v.video_id).unwrap_or_default(),
                    ground_truth: ground_truth
                        .iter()
                        .filter(|g| g.video_id == v.video_id)
                        .cloned()
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        if let Some(w) = videos.windows(2).find(|w| w[0].video_id == w[1].video_id) {
            return Err(Error::Config(format!("duplicate features for video {}", w[0].video_id)));
        }
        Ok(Self { videos, c_verb, c_noun })
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.cols())
    }
}

/// Deterministic by-video split: returns (train, val) indices into `videos`.
pub fn split_videos(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug)]
enum ExampleTarget {
    Clip { verb: usize, noun: usize },
    Frames(FrameLabels),
}

/// One training clip: a frame span of a video and its supervision.
#[derive(Clone, Debug)]
struct Example {
    video: usize,
    start: usize,
    end: usize,
    target: ExampleTarget,
}

fn build_examples(data: &Dataset, train: &[usize], variant: Variant) -> Vec<Example> {
    let mut out = Vec::new();
    for &vi in train {
        let v = &data.videos[vi];
        match variant {
            Variant::Ours | Variant::ClsAgno => {
                for c in cut_clips(&v.annotations, v.len(), v.fps) {
                    out.push(Example {
                        video: vi,
                        start: c.start_frame,
                        end: c.end_frame,
                        target: ExampleTarget::Clip {
                            verb: c.verb,
                            noun: c.noun,
                        },
                    });
                }
            }
            Variant::NarrBas => {
                let clips = cut_clips(&v.annotations, v.len(), v.fps);
                for (c, labels) in clips.iter().zip(make_narr_bas_labels(&clips)) {
                    out.push(Example {
                        video: vi,
                        start: c.start_frame,
                        end: c.end_frame,
                        target: ExampleTarget::Frames(labels),
                    });
                }
            }
            Variant::Ful => {
                let mut starts: Vec<NarrationAnnotation> = v
                    .ground_truth
                    .iter()
                    .map(|g| NarrationAnnotation {
                        video_id: g.video_id.clone(),
                        time: g.t_start,
                        verb: g.verb,
                        noun: g.noun,
                    })
                    .collect();
                starts.sort_by(|a, b| a.time.total_cmp(&b.time));
                let instances: Vec<&GroundTruthInstance> = v.ground_truth.iter().collect();
                for c in cut_clips(&starts, v.len(), v.fps) {
                    let labels = ground_truth_frame_labels(
                        &instances,
                        c.start_frame..c.end_frame,
                        v.fps,
                        data.c_verb,
                        data.c_noun,
                    );
                    out.push(Example {
                        video: vi,
                        start: c.start_frame,
                        end: c.end_frame,
                        target: ExampleTarget::Frames(labels),
                    });
                }
            }
        }
    }
    out
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Sum of per-clip losses over the batch.
    pub loss: f64,
    pub val_action_map: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,val_action_map\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.step, r.loss);
        match r.val_action_map {
            Some(m) => {
                let _ = writeln!(out, ",{m}");
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let text = log_to_csv(rows);
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by validation action mAP, or the last one without validation.
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub best_step: Option<usize>,
    pub best_val_map: Option<f64>,
    pub train_videos: Vec<String>,
    pub val_videos: Vec<String>,
}

/// Per-frame scores for each video.
pub fn score_videos(params: &ModelParams, videos: &[&VideoRecord]) -> Result<Vec<VideoScores>> {
    videos
        .par_iter()
        .map(|v| {
            Ok(VideoScores {
                video_id: v.video_id.clone(),
                fps: v.fps,
                heads: infer_scores(params, &v.features)?,
            })
        })
        .collect()
}

/// Post-processed verb, noun and action detections for `scores`.
pub fn detect(scores: &[VideoScores], cfg: &PostprocessConfig, pairing: ActionPairing) -> Result<Vec<Detection>> {
    let per_video: Vec<Vec<Detection>> = scores
        .par_iter()
        .map(|s| postprocess_video(s, cfg))
        .collect::<Result<_>>()?;
    Ok(with_actions(per_video.into_iter().flatten().collect(), pairing))
}

/// Runs the full inference pipeline on `videos` and evaluates it; `None` when
/// the videos carry no ground truth.
pub fn validate_params(
    params: &ModelParams,
    videos: &[&VideoRecord],
    cfg: &PostprocessConfig,
    pairing: ActionPairing,
) -> Result<Option<EvalReport>> {
    let gt: Vec<GroundTruthInstance> = videos.iter().flat_map(|v| v.ground_truth.iter().cloned()).collect();
    if gt.is_empty() {
        return Ok(None);
    }
    let detections = detect(&score_videos(params, videos)?, cfg, pairing)?;
    evaluate(&detections, &gt).map(Some)
}

/// Trains one model. Batch members run in parallel; their dropout seeds are
/// drawn up front and gradients are summed in batch order, so the result
/// does not depend on the thread count.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let din = data
        .input_dim()
        .ok_or_else(|| Error::Config("dataset has no videos".into()))?;
    let (train_idx, val_idx) = split_videos(data.videos.len(), config.val_fraction, config.seed);
    let examples = build_examples(data, &train_idx, config.variant);
    if examples.is_empty() {
        return Err(Error::Config("training split has no clips".into()));
    }
    let shape = ModelShape {
        variant: config.variant,
        din,
        d: config.hidden,
        c_verb: data.c_verb,
        c_noun: data.c_noun,
        shared_trunk: config.shared_trunk,
    };
    let mut params = ModelParams::init(shape, config.seed)?;
    let mut state = OptimizerState::new(&params.blocks());
    let val_videos: Vec<&VideoRecord> = val_idx.iter().map(|&i| &data.videos[i]).collect();
    let pp = PostprocessConfig::default();
    let pairing = ActionPairing::default();

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(0);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut log = Vec::with_capacity(config.max_steps);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let seeds: Vec<u64> = batch.iter().map(|_| dropout_rng.random()).collect();
        let results: Vec<(f64, Vec<Matrix>)> = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&ei, &seed)| {
                let ex = &examples[ei];
                let feats = data.videos[ex.video].features.slice_rows(ex.start, ex.end);
                let target = match &ex.target {
                    ExampleTarget::Clip { verb, noun } => Target::Clip {
                        verb: *verb,
                        noun: *noun,
                    },
                    ExampleTarget::Frames(l) => Target::Frames {
                        verb: &l.verb,
                        noun: &l.noun,
                    },
                };
                let mut dropout = if config.dropout_p > 0.0 {
                    Dropout::training(config.dropout_p, seed)
                } else {
                    Dropout::inference()
                };
                loss_and_grads(&params, &feats, target, &mut dropout)
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Matrix>> = None;
        for (l, g) in results {
            loss += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
        }
        let grads = grads.expect("batch is non-empty");
        adam_step(&mut params.blocks_mut(), &grads, &mut state, config.learning_rate)?;

        let due = step == config.max_steps || (config.eval_every > 0 && step % config.eval_every == 0);
        let mut val_action_map = None;
        if due && !val_videos.is_empty() {
            if let Some(report) = validate_params(&params, &val_videos, &pp, pairing)? {
                let m = report.action_avg();
                val_action_map = Some(m);
                if best.as_ref().is_none_or(|(_, b, _)| m > *b) {
                    best = Some((step, m, params.clone()));
                }
            }
        }
        log.push(LogRow {
            step,
            loss,
            val_action_map,
        });
    }

    let names = |idx: &[usize]| idx.iter().map(|&i| data.videos[i].video_id.clone()).collect();
    let (best_step, best_val_map, params) = match best {
        Some((s, m, p)) => (Some(s), Some(m), p),
        None => (None, None, params),
    };
    Ok(TrainOutcome {
        params,
        log,
        best_step,
        best_val_map,
        train_videos: names(&train_idx),
        val_videos: names(&val_idx),
    })
}

/// Videos of `data` whose ids are in `ids`.
pub fn select_videos<'a>(data: &'a Dataset, ids: &[String]) -> Vec<&'a VideoRecord> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    data.videos
        .iter()
        .filter(|v| wanted.contains(v.video_id.as_str()))
        .collect()
}
