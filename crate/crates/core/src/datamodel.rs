//! Shared domain vocabulary: narrations, clips, ground truth, detections,
//! and the CSV / JSON Lines files that carry them.
//!
//! Ground truth and detections are expressed in seconds. Model scores are
//! indexed by frame and only converted at the post-processing boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-timestamp weak label read from a narration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NarrationAnnotation {
    pub video_id: String,
    #[serde(rename = "time_sec")]
    pub time: f64,
    pub verb: usize,
    pub noun: usize,
}

/// Frame span between two consecutive narrations, carrying the first one's labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub video_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub verb: usize,
    pub noun: usize,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    pub fn class_for(&self, head: Head) -> usize {
        match head {
            Head::Verb => self.verb,
            Head::Noun => self.noun,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub verb: usize,
    pub noun: usize,
}

/// The two classification heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Verb,
    Noun,
}

impl Head {
    pub const BOTH: [Head; 2] = [Head::Verb, Head::Noun];

    pub fn task(self) -> Task {
        match self {
            Head::Verb => Task::Verb,
            Head::Noun => Task::Noun,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Verb, Task::Noun, Task::Action];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        })
    }
}

/// Class identity of a detection; actions are (verb, noun) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Verb(usize),
    Noun(usize),
    Action { verb: usize, noun: usize },
}

impl Label {
    pub fn task(self) -> Task {
        match self {
            Label::Verb(_) => Task::Verb,
            Label::Noun(_) => Task::Noun,
            Label::Action { .. } => Task::Action,
        }
    }

    pub fn for_head(head: Head, class: usize) -> Self {
        match head {
            Head::Verb => Label::Verb(class),
            Head::Noun => Label::Noun(class),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Verb(c) | Label::Noun(c) => write!(f, "{c}"),
            Label::Action { verb, noun } => write!(f, "{verb}:{noun}"),
        }
    }
}

impl GroundTruthInstance {
    pub fn label(&self, task: Task) -> Label {
        match task {
            Task::Verb => Label::Verb(self.verb),
            Task::Noun => Label::Noun(self.noun),
            Task::Action => Label::Action {
                verb: self.verb,
                noun: self.noun,
            },
        }
    }
}

/// Scored temporal segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub label: Label,
    pub intensity: f64,
}

impl Detection {
    pub fn task(&self) -> Task {
        self.label.task()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ClassField {
    One(usize),
    Pair([usize; 2]),
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    video_id: String,
    t_start: f64,
    t_end: f64,
    task: Task,
    class: ClassField,
    intensity: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        let class = match d.label {
            Label::Verb(c) | Label::Noun(c) => ClassField::One(c),
            Label::Action { verb, noun } => ClassField::Pair([verb, noun]),
        };
        DetectionRecord {
            video_id: d.video_id.clone(),
            t_start: d.t_start,
            t_end: d.t_end,
            task: d.task(),
            class,
            intensity: d.intensity,
        }
    }
}

impl TryFrom<DetectionRecord> for Detection {
    type Error = String;

    fn try_from(r: DetectionRecord) -> std::result::Result<Self, String> {
        let label = match (r.task, r.class) {
            (Task::Verb, ClassField::One(c)) => Label::Verb(c),
            (Task::Noun, ClassField::One(c)) => Label::Noun(c),
            (Task::Action, ClassField::Pair([verb, noun])) => Label::Action { verb, noun },
            (task, _) => return Err(format!("class field does not fit task `{task}`")),
        };
        if r.t_end.partial_cmp(&r.t_start) != Some(std::cmp::Ordering::Greater) {
            return Err(format!("t_end {} not after t_start {}", r.t_end, r.t_start));
        }
        if !r.intensity.is_finite() {
            return Err("non-finite intensity".into());
        }
        Ok(Detection {
            video_id: r.video_id,
            t_start: r.t_start,
            t_end: r.t_end,
            label,
            intensity: r.intensity,
        })
    }
}

/// One-hot clip-level target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipLabel {
    pub hot: usize,
    pub classes: usize,
}

impl ClipLabel {
    pub fn new(hot: usize, classes: usize) -> Result<Self> {
        if hot >= classes {
            return Err(Error::Config(format!("class {hot} outside {classes} classes")));
        }
        Ok(Self { hot, classes })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| if k == self.hot { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn frames_to_seconds(frame: usize, fps: f64) -> Result<f64> {
    if !fps.is_finite() || fps <= 0.0 {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    Ok(frame as f64 / fps)
}

/// Frame index containing time `t` (floor, tolerant to representation error).
pub fn seconds_to_frame(t: f64, fps: f64) -> usize {
    let f = (t * fps + 1e-9).floor();
    if f <= 0.0 {
        0
    } else {
        f as usize
    }
}

/// Per-video facts needed to validate annotations.
#[derive(Clone, Debug)]
pub struct VideoInfo {
    pub video_id: String,
    pub duration_sec: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    VerbOutOfRange {
        video_id: String,
        index: usize,
        verb: usize,
    },
    NounOutOfRange {
        video_id: String,
        index: usize,
        noun: usize,
    },
    NotIncreasing {
        video_id: String,
        index: usize,
        time: f64,
        previous: f64,
    },
    PastVideoEnd {
        video_id: String,
        index: usize,
        time: f64,
        duration: f64,
    },
    NegativeTime {
        video_id: String,
        index: usize,
        time: f64,
    },
    UnknownVideo {
        video_id: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VerbOutOfRange { video_id, index, verb } => {
                write!(f, "{video_id}[{index}]: verb {verb} out of range")
            }
            Violation::NounOutOfRange { video_id, index, noun } => {
                write!(f, "{video_id}[{index}]: noun {noun} out of range")
            }
            Violation::NotIncreasing {
                video_id,
                index,
                time,
                previous,
            } => write!(f, "{video_id}[{index}]: time {time} not after {previous}"),
            Violation::PastVideoEnd {
                video_id,
                index,
                time,
                duration,
            } => write!(f, "{video_id}[{index}]: time {time} beyond duration {duration}"),
            Violation::NegativeTime { video_id, index, time } => {
                write!(f, "{video_id}[{index}]: negative time {time}")
            }
            Violation::UnknownVideo { video_id } => write!(f, "{video_id}: no features for video"),
        }
    }
}

/// Lists every problem in an annotation set; never fails.
pub fn validate_dataset(
    annotations: &[NarrationAnnotation],
    videos: &[VideoInfo],
    c_verb: usize,
    c_noun: usize,
) -> Vec<Violation> {
    let durations: BTreeMap<&str, f64> = videos.iter().map(|v| (v.video_id.as_str(), v.duration_sec)).collect();
    let mut out = Vec::new();
    for (video_id, anns) in group_by_video(annotations) {
        let duration = durations.get(video_id.as_str()).copied();
        if duration.is_none() {
            out.push(Violation::UnknownVideo {
                video_id: video_id.clone(),
            });
        }
        let mut previous: Option<f64> = None;
        for (index, a) in anns.iter().enumerate() {
            let video_id = video_id.clone();
            if a.verb >= c_verb {
                out.push(Violation::VerbOutOfRange {
                    video_id: video_id.clone(),
                    index,
                    verb: a.verb,
                });
            }
            if a.noun >= c_noun {
                out.push(Violation::NounOutOfRange {
                    video_id: video_id.clone(),
                    index,
                    noun: a.noun,
                });
            }
            if a.time < 0.0 {
                out.push(Violation::NegativeTime {
                    video_id: video_id.clone(),
                    index,
                    time: a.time,
                });
            }
            if let Some(prev) = previous {
                if a.time <= prev {
                    out.push(Violation::NotIncreasing {
                        video_id: video_id.clone(),
                        index,
                        time: a.time,
                        previous: prev,
                    });
                }
            }
            if let Some(duration) = duration {
                if a.time >= duration {
                    out.push(Violation::PastVideoEnd {
                        video_id,
                        index,
                        time: a.time,
                        duration,
                    });
                }
            }
            previous = Some(a.time);
        }
    }
    out
}

/// Groups annotations by video, keeping file order within each video.
pub fn group_by_video(annotations: &[NarrationAnnotation]) -> BTreeMap<String, Vec<NarrationAnnotation>> {
    let mut map: BTreeMap<String, Vec<NarrationAnnotation>> = BTreeMap::new();
    for a in annotations {
        map.entry(a.video_id.clone()).or_default().push(a.clone());
    }
    map
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found = reader.headers().map_err(|e| parse_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.into(),
            reason: format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| parse_err(path, e)))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        let mut writer = csv::Writer::from_writer(w);
        for r in rows {
            writer.serialize(r).map_err(std::io::Error::other)?;
        }
        writer.flush()
    })
}

fn parse_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::Parse {
        path: path.into(),
        reason: e.to_string(),
    }
}

pub const ANNOTATION_HEADER: [&str; 4] = ["video_id", "time_sec", "verb", "noun"];
pub const GROUND_TRUTH_HEADER: [&str; 5] = ["video_id", "t_start", "t_end", "verb", "noun"];

pub fn read_annotations(path: &Path) -> Result<Vec<NarrationAnnotation>> {
    read_csv(path, &ANNOTATION_HEADER)
}

pub fn write_annotations(path: &Path, rows: &[NarrationAnnotation]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthInstance>> {
    let rows: Vec<GroundTruthInstance> = read_csv(path, &GROUND_TRUTH_HEADER)?;
    if let Some(bad) = rows
        .iter()
        .find(|g| g.t_end.partial_cmp(&g.t_start) != Some(std::cmp::Ordering::Greater))
    {
        return Err(Error::Parse {
            path: path.into(),
            reason: format!(
                "instance in {} has t_end {} <= t_start {}",
                bad.video_id, bad.t_end, bad.t_start
            ),
        });
    }
    Ok(rows)
}

pub fn write_ground_truth(path: &Path, rows: &[GroundTruthInstance]) -> Result<()> {
    write_csv(path, rows)
}

pub fn detections_to_jsonl(detections: &[Detection], w: &mut dyn Write) -> std::io::Result<()> {
    for d in detections {
        serde_json::to_writer(&mut *w, &DetectionRecord::from(d))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    write_atomic(path, |w| detections_to_jsonl(detections, w))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(Detection::try_from(record).map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(video: &str, time: f64, verb: usize, noun: usize) -> NarrationAnnotation {
        NarrationAnnotation {
            video_id: video.into(),
            time,
            verb,
            noun,
        }
    }

    #[test]
    fn frame_conversion() {
        assert_eq!(frames_to_seconds(0, 12.5).unwrap(), 0.0);
        assert_eq!(frames_to_seconds(30, 30.0).unwrap(), 1.0);
        assert_eq!(frames_to_seconds(7, 4.0).unwrap(), 1.75);
        assert!(frames_to_seconds(3, 0.0).is_err());
        assert!(frames_to_seconds(3, -1.0).is_err());
        assert_eq!(seconds_to_frame(1.75, 4.0), 7);
        // 0.1 * 30 is 3.0000000000000004 and 0.7 * 10 is 7.000000000000001
        assert_eq!(seconds_to_frame(0.1, 30.0), 3);
        assert_eq!(seconds_to_frame(0.7, 10.0), 7);
    }

    #[test]
    fn clip_label_one_hot() {
        let y = ClipLabel::new(2, 4).unwrap();
        assert_eq!(y.one_hot(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(ClipLabel::new(4, 4).is_err());
    }

    #[test]
    fn validation_reports() {
        let videos = vec![VideoInfo {
            video_id: "v".into(),
            duration_sec: 10.0,
        }];
        let clean = vec![ann("v", 1.0, 0, 1), ann("v", 4.0, 2, 0)];
        assert!(validate_dataset(&clean, &videos, 3, 2).is_empty());

        let late = vec![ann("v", 1.0, 0, 1), ann("v", 12.0, 2, 0)];
        let report = validate_dataset(&late, &videos, 3, 2);
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::PastVideoEnd { index: 1, .. }));

        let dup = vec![ann("v", 1.0, 0, 1), ann("v", 1.0, 2, 0), ann("v", 0.5, 1, 1)];
        let report = validate_dataset(&dup, &videos, 3, 2);
        let scan: Vec<usize> = dup
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].time <= w[0].time)
            .map(|(i, _)| i + 1)
            .collect();
        let found: Vec<usize> = report
            .iter()
            .filter_map(|v| match v {
                Violation::NotIncreasing { index, .. } => Some(*index),
                _ => None,
            })
            .collect();
        assert_eq!(found, scan);

        let bad_class = vec![ann("v", 1.0, 3, 2), ann("w", 1.0, 0, 0)];
        let report = validate_dataset(&bad_class, &videos, 3, 2);
        assert_eq!(report.len(), 3);
    }

    #[test]
    fn detection_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let dets = vec![
            Detection {
                video_id: "a".into(),
                t_start: 0.2,
                t_end: 1.0 / 3.0,
                label: Label::Verb(3),
                intensity: 0.123456789012345,
            },
            Detection {
                video_id: "b".into(),
                t_start: 4.0,
                t_end: 10.0,
                label: Label::Action { verb: 1, noun: 7 },
                intensity: 0.4,
            },
        ];
        write_detections(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(r#""task":"action","class":[1,7]"#));
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    #[test]
    fn detection_rejects_mismatched_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            r#"{"video_id":"a","t_start":0,"t_end":1,"task":"verb","class":[1,2],"intensity":0.5}"#,
        )
        .unwrap();
        assert!(matches!(read_detections(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let rows = vec![ann("v1", 0.1, 0, 1), ann("v1", 2.0 / 3.0, 5, 2)];
        write_annotations(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("video_id,time_sec,verb,noun\n"));
        assert_eq!(read_annotations(&path).unwrap(), rows);
        assert!(read_ground_truth(&path).is_err());

        let gt_path = dir.path().join("g.csv");
        let gt = vec![GroundTruthInstance {
            video_id: "v1".into(),
            t_start: 1.0,
            t_end: 2.5,
            verb: 1,
            noun: 0,
        }];
        write_ground_truth(&gt_path, &gt).unwrap();
        assert_eq!(read_ground_truth(&gt_path).unwrap(), gt);
    }
}
