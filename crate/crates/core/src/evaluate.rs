//! Temporal detection evaluation: per-class average precision at several
//! tIoU thresholds for verb, noun and action (verb ∧ noun) detections.
//!
//! AP is non-interpolated: the sum of precision at each true-positive rank,
//! divided by the number of ground-truth instances. Classes with no ground
//! truth are left out of the mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::datamodel::{write_atomic, Detection, GroundTruthInstance, Label, Task};
use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// IoU of two `[start, end]` intervals in seconds.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn span(d: &Detection) -> (f64, f64) {
    (d.t_start, d.t_end)
}

/// Ranking order: intensity desc, then earlier start, then video, then earlier end.
pub fn rank_detections(dets: &mut [&Detection]) {
    dets.sort_by(|a, b| {
        b.intensity
            .total_cmp(&a.intensity)
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.video_id.cmp(&b.video_id))
            .then(a.t_end.total_cmp(&b.t_end))
    });
}

/// Per-rank true-positive flags under greedy matching.
///
/// `dets` must already be ranked. Each detection takes the unmatched
/// ground-truth instance of its video with the highest IoU; it is a true
/// positive when that IoU is at least `theta`.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruthInstance], theta: f64) -> Vec<bool> {
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let Some(candidates) = by_video.get(d.video_id.as_str()) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &g in candidates {
                if matched[g] {
                    continue;
                }
                let iou = temporal_iou(span(d), (gts[g].t_start, gts[g].t_end));
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= theta => {
                    matched[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Non-interpolated AP; `None` when there is no ground truth.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruthInstance], theta: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let flags = match_detections(dets, gts, theta);
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, hit) in flags.iter().enumerate() {
        if *hit {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / gts.len() as f64)
}

/// How verb and noun detections combine into action detections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionPairing {
    /// Minimum verb/noun IoU for a pair to form an action detection.
    pub min_iou: f64,
}

impl Default for ActionPairing {
    fn default() -> Self {
        Self { min_iou: 0.5 }
    }
}

/// Action detections from co-located verb and noun detections of the same
/// video: span is the intersection, intensity the product.
pub fn pair_actions(verbs: &[Detection], nouns: &[Detection], pairing: ActionPairing) -> Vec<Detection> {
    let mut out = Vec::new();
    for v in verbs {
        let Label::Verb(verb) = v.label else { continue };
        for n in nouns {
            let Label::Noun(noun) = n.label else { continue };
            if n.video_id != v.video_id || temporal_iou(span(v), span(n)) < pairing.min_iou {
                continue;
            }
            let t_start = v.t_start.max(n.t_start);
            let t_end = v.t_end.min(n.t_end);
            if t_end <= t_start {
                continue;
            }
            out.push(Detection {
                video_id: v.video_id.clone(),
                t_start,
                t_end,
                label: Label::Action { verb, noun },
                intensity: v.intensity * n.intensity,
            });
        }
    }
    out.sort_by(|a, b| {
        b.intensity
            .total_cmp(&a.intensity)
            .then(a.video_id.cmp(&b.video_id))
            .then(a.label.cmp(&b.label))
            .then(a.t_start.total_cmp(&b.t_start))
    });
    out
}

/// Adds action detections to a verb+noun detection list, video by video.
pub fn with_actions(detections: Vec<Detection>, pairing: ActionPairing) -> Vec<Detection> {
    let mut per_video: BTreeMap<String, (Vec<Detection>, Vec<Detection>)> = BTreeMap::new();
    for d in &detections {
        let entry = per_video.entry(d.video_id.clone()).or_default();
        match d.label {
            Label::Verb(_) => entry.0.push(d.clone()),
            Label::Noun(_) => entry.1.push(d.clone()),
            Label::Action { .. } => {}
        }
    }
    let mut out: Vec<Detection> = detections.into_iter().filter(|d| d.task() != Task::Action).collect();
    for (verbs, nouns) in per_video.values() {
        out.extend(pair_actions(verbs, nouns, pairing));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: String,
    #[serde(skip)]
    pub label: Label,
    pub gt_count: usize,
    pub ap: [f64; 5],
    pub avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: Task,
    /// Mean AP over classes with ground truth, per threshold.
    pub map: [f64; 5],
    pub avg: f64,
    pub classes: Vec<ClassReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: [f64; 5],
    pub tasks: Vec<TaskReport>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean5(rows: impl Iterator<Item = [f64; 5]>) -> [f64; 5] {
    let mut acc = [0.0; 5];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        for a in &mut acc {
            *a /= n as f64;
        }
    }
    acc
}

/// Full report for verb, noun and action tasks.
pub fn evaluate(detections: &[Detection], ground_truth: &[GroundTruthInstance]) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::Report("no ground-truth instances".into()));
    }
    let mut tasks = Vec::with_capacity(3);
    for task in Task::ALL {
        let mut gts: BTreeMap<Label, Vec<&GroundTruthInstance>> = BTreeMap::new();
        for g in ground_truth {
            gts.entry(g.label(task)).or_default().push(g);
        }
        let mut dets: BTreeMap<Label, Vec<&Detection>> = BTreeMap::new();
        for d in detections.iter().filter(|d| d.task() == task) {
            if gts.contains_key(&d.label) {
                dets.entry(d.label).or_default().push(d);
            }
        }
        let mut classes = Vec::with_capacity(gts.len());
        for (label, class_gts) in &gts {
            let mut ranked = dets.remove(label).unwrap_or_default();
            rank_detections(&mut ranked);
            let ap = IOU_THRESHOLDS.map(|theta| average_precision(&ranked, class_gts, theta).expect("non-empty gt"));
            classes.push(ClassReport {
                class: label.to_string(),
                label: *label,
                gt_count: class_gts.len(),
                ap,
                avg: mean(&ap),
            });
        }
        let map = mean5(classes.iter().map(|c| c.ap));
        tasks.push(TaskReport {
            task,
            map,
            avg: mean(&map),
            classes,
        });
    }
    Ok(EvalReport {
        thresholds: IOU_THRESHOLDS,
        tasks,
    })
}

impl EvalReport {
    pub fn task(&self, task: Task) -> &TaskReport {
        self.tasks.iter().find(|t| t.task == task).expect("all tasks present")
    }

    /// Average action mAP over the thresholds.
    pub fn action_avg(&self) -> f64 {
        self.task(Task::Action).avg
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,class");
        for t in self.thresholds {
            let _ = write!(out, ",@{t}");
        }
        out.push_str(",Avg\n");
        for task in &self.tasks {
            push_row(&mut out, &task.task.to_string(), "ALL", &task.map, task.avg);
            for c in &task.classes {
                push_row(&mut out, &task.task.to_string(), &c.class, &c.ap, c.avg);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, csv_path: Option<&Path>, json_path: Option<&Path>) -> Result<()> {
        if let Some(p) = csv_path {
            let text = self.to_csv();
            write_atomic(p, |w| w.write_all(text.as_bytes()))?;
        }
        if let Some(p) = json_path {
            let text = self.to_json();
            write_atomic(p, |w| w.write_all(text.as_bytes()))?;
        }
        Ok(())
    }
}

fn push_row(out: &mut String, task: &str, class: &str, values: &[f64; 5], avg: f64) {
    let _ = write!(out, "{task},{class}");
    for v in values {
        let _ = write!(out, ",{v:.6}");
    }
    let _ = writeln!(out, ",{avg:.6}");
}

/// Distinct classes with ground truth per task, for callers that need the class space.
pub fn gt_classes(ground_truth: &[GroundTruthInstance], task: Task) -> BTreeSet<Label> {
    ground_truth.iter().map(|g| g.label(task)).collect()
}
