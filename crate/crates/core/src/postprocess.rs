//! Frame scores to scored temporal segments.
//!
//! For every class: smooth the score track, retrieve maximal runs at each
//! threshold of a grid, score each run by its mean smoothed score
//! ("intensity"), then suppress overlapping runs greedily by intensity.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::datamodel::{frames_to_seconds, write_atomic, Detection, Head, Label};
use crate::error::{Error, Result};
use crate::ingest::{write_f64s, write_str, ByteReader};
use crate::kvconfig::{parse_list, KvConfig};
use crate::numkernel::Matrix;

pub const SCORES_MAGIC: &[u8; 4] = b"NWSS";
pub const SCORES_VERSION: u32 = 1;

/// Candidate segment on the frame grid, `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
    pub intensity: f64,
    pub source_threshold: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub smooth_size: usize,
    pub thresholds: Vec<f64>,
    pub nms_iou: f64,
}

pub const DEFAULT_SMOOTH_SIZE: usize = 3;
pub const DEFAULT_NMS_IOU: f64 = 0.4;
pub const THRESHOLD_LOW: f64 = 0.01;
pub const THRESHOLD_HIGH: f64 = 0.4;
pub const THRESHOLD_COUNT: usize = 40;

/// `count` evenly spaced values covering `[low, high]`.
pub fn threshold_grid(low: f64, high: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![low],
        _ => (0..count)
            .map(|i| low + (high - low) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            smooth_size: DEFAULT_SMOOTH_SIZE,
            thresholds: threshold_grid(THRESHOLD_LOW, THRESHOLD_HIGH, THRESHOLD_COUNT),
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smooth_size == 0 || self.smooth_size.is_multiple_of(2) {
            return Err(Error::InvalidValue {
                key: "smooth_size".into(),
                reason: format!("{} is not an odd size >= 1", self.smooth_size),
            });
        }
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidValue {
                key: "thresholds".into(),
                reason: "must be strictly increasing values in (0, 1)".into(),
            });
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::InvalidValue {
                key: "nms_iou".into(),
                reason: format!("{} not in (0, 1]", self.nms_iou),
            });
        }
        Ok(())
    }

    /// Consumes `smooth_size`, `thresholds` (explicit list) or
    /// `threshold_low`/`threshold_high`/`threshold_count`, and `nms_iou`.
    pub fn from_kv(cfg: &mut KvConfig) -> Result<Self> {
        let mut out = Self::default();
        out.smooth_size = cfg.take_or("smooth_size", out.smooth_size)?;
        out.nms_iou = cfg.take_or("nms_iou", out.nms_iou)?;
        let low = cfg.take_or("threshold_low", THRESHOLD_LOW)?;
        let high = cfg.take_or("threshold_high", THRESHOLD_HIGH)?;
        let count = cfg.take_or("threshold_count", THRESHOLD_COUNT)?;
        out.thresholds = match cfg.take_raw("thresholds") {
            Some(raw) => parse_list("thresholds", &raw)?,
            None => threshold_grid(low, high, count),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Mean over a centred window of `size`, clipped at the sequence ends.
pub fn smooth(scores: &[f64], size: usize) -> Vec<f64> {
    let half = size / 2;
    let n = scores.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            scores[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Maximal runs of frames with `score >= threshold`.
pub fn retrieve_segments(scores: &[f64], threshold: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &s) in scores.iter().enumerate() {
        match (s >= threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(b)) => {
                out.push(b..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(b) = start {
        out.push(b..scores.len());
    }
    out
}

pub fn score_segment(scores: &[f64], span: &Range<usize>) -> f64 {
    scores[span.clone()].iter().sum::<f64>() / span.len() as f64
}

/// Intersection over union of two half-open frame ranges.
pub fn frame_iou(a: &Range<usize>, b: &Range<usize>) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ranking used by NMS: intensity desc, then earlier start, then longer, then lower source threshold.
pub fn rank_order(a: &Segment, b: &Segment) -> std::cmp::Ordering {
    b.intensity
        .total_cmp(&a.intensity)
        .then(a.start.cmp(&b.start))
        .then(b.len().cmp(&a.len()))
        .then(a.source_threshold.total_cmp(&b.source_threshold))
}

/// Greedy NMS over segments of one class; a segment is dropped when its IoU
/// with an already kept segment is `>= iou_threshold`.
pub fn nms(mut segments: Vec<Segment>, iou_threshold: f64) -> Vec<Segment> {
    segments.sort_by(rank_order);
    let mut kept: Vec<Segment> = Vec::new();
    for s in segments {
        let span = s.start..s.end;
        if kept.iter().all(|k| frame_iou(&(k.start..k.end), &span) < iou_threshold) {
            kept.push(s);
        }
    }
    kept
}

/// Smoothing, multi-threshold retrieval, scoring and NMS for one class track.
pub fn class_segments(scores: &[f64], class: usize, cfg: &PostprocessConfig) -> Vec<Segment> {
    let smoothed = smooth(scores, cfg.smooth_size);
    let mut candidates = Vec::new();
    for &threshold in &cfg.thresholds {
        for span in retrieve_segments(&smoothed, threshold) {
            candidates.push(Segment {
                start: span.start,
                end: span.end,
                class,
                intensity: score_segment(&smoothed, &span),
                source_threshold: threshold,
            });
        }
    }
    nms(candidates, cfg.nms_iou)
}

/// Detections for one head of one video, sorted by intensity (ties by class, then start).
pub fn postprocess_head(
    video_id: &str,
    scores: &Matrix,
    head: Head,
    cfg: &PostprocessConfig,
    fps: f64,
) -> Result<Vec<Detection>> {
    let mut segments: Vec<Segment> = (0..scores.cols())
        .flat_map(|k| class_segments(&scores.column(k), k, cfg))
        .collect();
    segments.sort_by(|a, b| {
        b.intensity
            .total_cmp(&a.intensity)
            .then(a.class.cmp(&b.class))
            .then(a.start.cmp(&b.start))
    });
    segments
        .into_iter()
        .map(|s| {
            Ok(Detection {
                video_id: video_id.to_string(),
                t_start: frames_to_seconds(s.start, fps)?,
                t_end: frames_to_seconds(s.end, fps)?,
                label: Label::for_head(head, s.class),
                intensity: s.intensity,
            })
        })
        .collect()
}

/// Verb then noun detections for one video.
pub fn postprocess_video(scores: &VideoScores, cfg: &PostprocessConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for head in Head::BOTH {
        out.extend(postprocess_head(
            &scores.video_id,
            &scores.heads[head as usize],
            head,
            cfg,
            scores.fps,
        )?);
    }
    Ok(out)
}

/// Per-frame scores of one video, verb then noun.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    pub fps: f64,
    pub heads: [Matrix; 2],
}

/// Score dump layout (little endian):
///
/// ```text
/// magic "NWSS" | version u32 = 1 | video count u32
/// per video: video_id (u32 len + UTF-8) | fps f64 | per head (verb, noun): L u32 | C u32 | L*C f64
/// ```
pub fn encode_scores(videos: &[VideoScores], w: &mut dyn Write) -> std::io::Result<()> {
    w.write_all(SCORES_MAGIC)?;
    w.write_all(&SCORES_VERSION.to_le_bytes())?;
    w.write_all(&(videos.len() as u32).to_le_bytes())?;
    for v in videos {
        write_str(w, &v.video_id)?;
        w.write_all(&v.fps.to_le_bytes())?;
        for m in &v.heads {
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            write_f64s(w, m.data())?;
        }
    }
    Ok(())
}

pub fn write_scores(path: &Path, videos: &[VideoScores]) -> Result<()> {
    write_atomic(path, |w| encode_scores(videos, w))
}

pub fn read_scores(path: &Path) -> Result<Vec<VideoScores>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scores(&bytes, path)
}

pub fn decode_scores(bytes: &[u8], path: &Path) -> Result<Vec<VideoScores>> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(SCORES_MAGIC)?;
    r.expect_version(SCORES_VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let video_id = r.string()?;
        let fps_at = r.offset();
        let fps = r.f64()?;
        if !fps.is_finite() || fps <= 0.0 {
            return Err(r.error_at(fps_at, format!("fps must be positive, got {fps}")));
        }
        let mut heads = Vec::with_capacity(2);
        for _ in 0..2 {
            let at = r.offset();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if cols == 0 {
                return Err(r.error_at(at, "score block with zero classes".into()));
            }
            heads.push(Matrix::new(rows, cols, r.f64s(rows * cols)?)?);
        }
        if heads[0].rows() != heads[1].rows() {
            return Err(r.error_at(r.offset(), format!("{video_id}: verb and noun lengths differ")));
        }
        let noun = heads.pop().expect("two heads");
        let verb = heads.pop().expect("two heads");
        out.push(VideoScores {
            video_id,
            fps,
            heads: [verb, noun],
        });
    }
    if r.remaining() != 0 {
        return Err(r.error_at(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}
