//! Deterministic synthetic benchmark: planted action instances,
//! class-conditioned multimodal features and jittered single-timestamp
//! narrations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::datamodel::{
    write_annotations, write_atomic, write_ground_truth, Detection, GroundTruthInstance, Label, NarrationAnnotation,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, with_actions, ActionPairing, EvalReport};
use crate::ingest::{write_features, FeatureTrack, Modality, VideoFeatures};
use crate::kvconfig::{parse_list, KvConfig};
use crate::numkernel::Matrix;

/// What fills the frames between planted instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapFill {
    /// Zero prototype plus noise.
    Background,
    /// Features of a random unannotated verb/noun pair.
    Distractor,
}

impl fmt::Display for GapFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GapFill::Background => "background",
            GapFill::Distractor => "distractor",
        })
    }
}

impl FromStr for GapFill {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "background" => Ok(GapFill::Background),
            "distractor" => Ok(GapFill::Distractor),
            other => Err(format!(
                "unknown gap fill `{other}` (expected background or distractor)"
            )),
        }
    }
}

/// A class silenced in one modality: `v3` for verb 3, `n0` for noun 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SilentClass {
    Verb(usize),
    Noun(usize),
}

impl fmt::Display for SilentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SilentClass::Verb(k) => write!(f, "v{k}"),
            SilentClass::Noun(k) => write!(f, "n{k}"),
        }
    }
}

impl FromStr for SilentClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parse = |rest: &str| rest.parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
        if let Some(rest) = s.strip_prefix('v') {
            Ok(SilentClass::Verb(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix('n') {
            Ok(SilentClass::Noun(parse(rest)?))
        } else {
            Err(format!("`{s}`: expected v<index> or n<index>"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub video_len_frames: usize,
    pub fps: f64,
    pub c_verb: usize,
    pub c_noun: usize,
    /// Feature dims for rgb, flow, audio.
    pub dims: [usize; 3],
    /// Audio feature rate in Hz.
    pub audio_rate: f64,
    pub action_len: usize,
    pub gap_len: usize,
    pub timestamp_noise_sd: f64,
    pub emission_noise_sd: f64,
    pub prototype_scale: f64,
    pub gap_fill: GapFill,
    /// Probability that an instance follows the script: its classes are the
    /// successor `(v + 1, n + 1)` of the previous instance's, and a
    /// distractor after it uses the script's fixed pair for its classes.
    pub script_prob: f64,
    /// Classes that emit no signal, per modality (rgb, flow, audio).
    pub silent: [Vec<SilentClass>; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 50,
            video_len_frames: 240,
            fps: 5.0,
            c_verb: 8,
            c_noun: 8,
            dims: [16, 16, 4],
            audio_rate: 1.0,
            action_len: 20,
            gap_len: 8,
            timestamp_noise_sd: 0.0,
            emission_noise_sd: 1.0,
            prototype_scale: 1.0,
            gap_fill: GapFill::Background,
            script_prob: 0.0,
            silent: [Vec::new(), Vec::new(), Vec::new()],
            seed: 0,
        }
    }
}

const SILENT_KEYS: [&str; 3] = ["silent_rgb", "silent_flow", "silent_audio"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::InvalidValue {
                key: key.into(),
                reason,
            })
        };
        for (key, v) in [
            ("n_videos", self.n_videos),
            ("video_len_frames", self.video_len_frames),
            ("c_verb", self.c_verb),
            ("c_noun", self.c_noun),
            ("action_len", self.action_len),
            ("dim_rgb", self.dims[0]),
            ("dim_flow", self.dims[1]),
            ("dim_audio", self.dims[2]),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps", format!("must be positive, got {}", self.fps));
        }
        if !(self.audio_rate > 0.0 && self.audio_rate.is_finite()) {
            return bad("audio_rate", format!("must be positive, got {}", self.audio_rate));
        }
        for (key, v) in [
            ("timestamp_noise_sd", self.timestamp_noise_sd),
            ("emission_noise_sd", self.emission_noise_sd),
            ("prototype_scale", self.prototype_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.script_prob) {
            return bad("script_prob", format!("must be in [0, 1], got {}", self.script_prob));
        }
        if self.action_len + self.action_len / 2 > self.video_len_frames {
            return bad(
                "action_len",
                format!("{} does not fit in {} frames", self.action_len, self.video_len_frames),
            );
        }
        for (key, list) in SILENT_KEYS.iter().zip(&self.silent) {
            for s in list {
                let ok = match *s {
                    SilentClass::Verb(k) => k < self.c_verb,
                    SilentClass::Noun(k) => k < self.c_noun,
                };
                if !ok {
                    return bad(key, format!("class {s} out of range"));
                }
            }
        }
        Ok(())
    }

    pub fn from_kv(cfg: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut silent: [Vec<SilentClass>; 3] = Default::default();
        for (slot, key) in silent.iter_mut().zip(SILENT_KEYS) {
            if let Some(raw) = cfg.take_raw(key) {
                *slot = parse_list(key, &raw)?;
            }
        }
        let out = Self {
            n_videos: cfg.take_or("n_videos", d.n_videos)?,
            video_len_frames: cfg.take_or("video_len_frames", d.video_len_frames)?,
            fps: cfg.take_or("fps", d.fps)?,
            c_verb: cfg.take_or("c_verb", d.c_verb)?,
            c_noun: cfg.take_or("c_noun", d.c_noun)?,
            dims: [
                cfg.take_or("dim_rgb", d.dims[0])?,
                cfg.take_or("dim_flow", d.dims[1])?,
                cfg.take_or("dim_audio", d.dims[2])?,
            ],
            audio_rate: cfg.take_or("audio_rate", d.audio_rate)?,
            action_len: cfg.take_or("action_len", d.action_len)?,
            gap_len: cfg.take_or("gap_len", d.gap_len)?,
            timestamp_noise_sd: cfg.take_or("timestamp_noise_sd", d.timestamp_noise_sd)?,
            emission_noise_sd: cfg.take_or("emission_noise_sd", d.emission_noise_sd)?,
            prototype_scale: cfg.take_or("prototype_scale", d.prototype_scale)?,
            gap_fill: cfg.take_or("gap_fill", d.gap_fill)?,
            script_prob: cfg.take_or("script_prob", d.script_prob)?,
            silent,
            seed: cfg.take_or("seed", d.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[SilentClass]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("n_videos", self.n_videos.to_string()),
            ("video_len_frames", self.video_len_frames.to_string()),
            ("fps", self.fps.to_string()),
            ("c_verb", self.c_verb.to_string()),
            ("c_noun", self.c_noun.to_string()),
            ("dim_rgb", self.dims[0].to_string()),
            ("dim_flow", self.dims[1].to_string()),
            ("dim_audio", self.dims[2].to_string()),
            ("audio_rate", self.audio_rate.to_string()),
            ("action_len", self.action_len.to_string()),
            ("gap_len", self.gap_len.to_string()),
            ("timestamp_noise_sd", self.timestamp_noise_sd.to_string()),
            ("emission_noise_sd", self.emission_noise_sd.to_string()),
            ("prototype_scale", self.prototype_scale.to_string()),
            ("gap_fill", self.gap_fill.to_string()),
            ("script_prob", self.script_prob.to_string()),
            ("silent_rgb", list(&self.silent[0])),
            ("silent_flow", list(&self.silent[1])),
            ("silent_audio", list(&self.silent[2])),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Mean action length in seconds.
    pub fn action_len_sec(&self) -> f64 {
        self.action_len as f64 / self.fps
    }

    fn is_silent(&self, modality: usize, verb: Option<usize>, noun: Option<usize>) -> (bool, bool) {
        let list = &self.silent[modality];
        (
            verb.is_none_or(|v| list.contains(&SilentClass::Verb(v))),
            noun.is_none_or(|n| list.contains(&SilentClass::Noun(n))),
        )
    }
}

/// Fixed class-to-distractor maps without fixed points (when there are at
/// least two classes), used by scripted instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Script {
    pub distractor_verb: Vec<usize>,
    pub distractor_noun: Vec<usize>,
}

fn derangement(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

fn script(cfg: &SynthConfig) -> Script {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - 1);
    Script {
        distractor_verb: derangement(&mut rng, cfg.c_verb),
        distractor_noun: derangement(&mut rng, cfg.c_noun),
    }
}

/// Per-modality class prototypes: `verb[m]` is `c_verb x dim_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub verb: [Matrix; 3],
    pub noun: [Matrix; 3],
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub prototypes: Prototypes,
    pub script: Script,
    pub videos: Vec<VideoFeatures>,
    pub annotations: Vec<NarrationAnnotation>,
    pub ground_truth: Vec<GroundTruthInstance>,
}

pub fn video_id(index: usize) -> String {
    format!("synth_{index:04}")
}

fn prototypes(cfg: &SynthConfig) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| cfg.prototype_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        Matrix::new(rows, cols, data).expect("shape")
    };
    let verb = cfg.dims.map(|d| draw(cfg.c_verb, d));
    let noun = cfg.dims.map(|d| draw(cfg.c_noun, d));
    Prototypes { verb, noun }
}

/// Uniform integer in `[mean - mean/2, mean + mean/2]`.
fn around(rng: &mut ChaCha8Rng, mean: usize) -> usize {
    let half = mean / 2;
    rng.random_range(mean - half..=mean + half)
}

struct VideoOutput {
    features: VideoFeatures,
    annotations: Vec<NarrationAnnotation>,
    ground_truth: Vec<GroundTruthInstance>,
}

fn generate_video(cfg: &SynthConfig, protos: &Prototypes, script: &Script, index: usize) -> VideoOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = video_id(index);
    let len = cfg.video_len_frames;

    // per-frame (verb, noun) that drives the features; None is background
    let mut frame_class: Vec<Option<(usize, usize)>> = vec![None; len];
    let mut spans = Vec::new();
    let mut t = around(&mut rng, cfg.gap_len);
    loop {
        let l = around(&mut rng, cfg.action_len).max(1);
        if t + l > len {
            break;
        }
        let scripted = rng.random::<f64>() < cfg.script_prob;
        let (verb, noun) = match spans.last() {
            Some(&(_, _, v, n)) if scripted => ((v + 1) % cfg.c_verb, (n + 1) % cfg.c_noun),
            _ => (rng.random_range(0..cfg.c_verb), rng.random_range(0..cfg.c_noun)),
        };
        frame_class[t..t + l].fill(Some((verb, noun)));
        spans.push((t, t + l, verb, noun));
        let gap = around(&mut rng, cfg.gap_len);
        if cfg.gap_fill == GapFill::Distractor && gap > 0 {
            let pair = if scripted {
                (script.distractor_verb[verb], script.distractor_noun[noun])
            } else {
                (rng.random_range(0..cfg.c_verb), rng.random_range(0..cfg.c_noun))
            };
            let end = (t + l + gap).min(len);
            frame_class[t + l..end].fill(Some(pair));
        }
        t += l + gap;
    }
    if cfg.gap_fill == GapFill::Distractor {
        // leading gap and the tail after the last instance
        let pair = (rng.random_range(0..cfg.c_verb), rng.random_range(0..cfg.c_noun));
        let first = spans.first().map_or(len, |s| s.0);
        frame_class[..first].fill(Some(pair));
        let last = spans.last().map_or(len, |s| s.1).max(t.min(len));
        frame_class[last..].fill(Some(pair));
    }

    let noise = Normal::new(0.0, cfg.emission_noise_sd).expect("sd validated");
    let audio_len = ((len as f64 / cfg.fps) * cfg.audio_rate).ceil().max(1.0) as usize;
    let mut tracks = Vec::with_capacity(3);
    for (m, modality) in Modality::ALL.into_iter().enumerate() {
        let dim = cfg.dims[m];
        let (rows, rate) = if modality == Modality::Audio {
            (audio_len, cfg.audio_rate)
        } else {
            (len, cfg.fps)
        };
        let mut data = Matrix::zeros(rows, dim);
        for r in 0..rows {
            // audio rows sit where endpoint-anchored resampling will place them
            let frame = if rows == len || rows == 1 {
                r.min(len - 1)
            } else {
                ((r as f64 * (len - 1) as f64 / (rows - 1) as f64).round() as usize).min(len - 1)
            };
            let row = data.row_mut(r);
            if let Some((v, n)) = frame_class[frame] {
                let (verb_silent, noun_silent) = cfg.is_silent(m, Some(v), Some(n));
                if !verb_silent {
                    row.iter_mut().zip(protos.verb[m].row(v)).for_each(|(o, p)| *o += p);
                }
                if !noun_silent {
                    row.iter_mut().zip(protos.noun[m].row(n)).for_each(|(o, p)| *o += p);
                }
            }
            for o in row.iter_mut() {
                *o += noise.sample(&mut rng);
            }
        }
        tracks.push(FeatureTrack {
            modality,
            step_rate: rate,
            data,
        });
    }

    let starts: Vec<f64> = spans
        .iter()
        .map(|s| {
            let jitter = if cfg.timestamp_noise_sd > 0.0 {
                cfg.timestamp_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            s.0 as f64 + jitter * cfg.fps
        })
        .collect();
    let frames = clamp_increasing(&starts, len);
    let annotations = spans
        .iter()
        .zip(&frames)
        .map(|(s, &f)| NarrationAnnotation {
            video_id: id.clone(),
            time: f as f64 / cfg.fps,
            verb: s.2,
            noun: s.3,
        })
        .collect();
    let ground_truth = spans
        .iter()
        .map(|&(s, e, verb, noun)| GroundTruthInstance {
            video_id: id.clone(),
            t_start: s as f64 / cfg.fps,
            t_end: e as f64 / cfg.fps,
            verb,
            noun,
        })
        .collect();
    VideoOutput {
        features: VideoFeatures {
            video_id: id,
            fps: cfg.fps,
            tracks,
        },
        annotations,
        ground_truth,
    }
}

/// Rounds jittered start positions (in frames) to frames inside `[0, len)`
/// and pushes them apart until they are strictly increasing.
pub fn clamp_increasing(positions: &[f64], len: usize) -> Vec<usize> {
    assert!(positions.len() <= len, "more narrations than frames");
    let mut frames: Vec<usize> = positions
        .iter()
        .map(|&p| p.round().clamp(0.0, (len - 1) as f64) as usize)
        .collect();
    for i in 1..frames.len() {
        frames[i] = frames[i].max(frames[i - 1] + 1);
    }
    let mut ceiling = len;
    for f in frames.iter_mut().rev() {
        *f = (*f).min(ceiling - 1);
        ceiling = *f;
    }
    frames
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let script = script(cfg);
    let outputs: Vec<VideoOutput> = (0..cfg.n_videos)
        .into_par_iter()
        .map(|i| generate_video(cfg, &protos, &script, i))
        .collect();
    let mut videos = Vec::with_capacity(outputs.len());
    let mut annotations = Vec::new();
    let mut ground_truth = Vec::new();
    for o in outputs {
        videos.push(o.features);
        annotations.extend(o.annotations);
        ground_truth.extend(o.ground_truth);
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        prototypes: protos,
        script,
        videos,
        annotations,
        ground_truth,
    })
}

pub const FEATURES_DIR: &str = "features";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

impl SynthDataset {
    pub fn manifest(&self) -> String {
        let mut pairs = self.config.to_pairs();
        pairs.push(("videos", self.videos.len().to_string()));
        pairs.push(("annotations", self.annotations.len().to_string()));
        pairs.push(("instances", self.ground_truth.len().to_string()));
        KvConfig::render(&pairs)
    }

    /// Writes features, CSVs and the manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = dir.join(FEATURES_DIR);
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for v in &self.videos {
            write_features(&features.join(format!("{}.nwsd", v.video_id)), v)?;
        }
        write_annotations(&dir.join(ANNOTATIONS_FILE), &self.annotations)?;
        write_ground_truth(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        let manifest = self.manifest();
        write_atomic(&dir.join(MANIFEST_FILE), |w| w.write_all(manifest.as_bytes()))
    }
}

/// Ground truth as verb and noun detections of intensity 1.
pub fn ground_truth_detections(ground_truth: &[GroundTruthInstance]) -> Vec<Detection> {
    ground_truth
        .iter()
        .flat_map(|g| {
            [Label::Verb(g.verb), Label::Noun(g.noun)].map(|label| Detection {
                video_id: g.video_id.clone(),
                t_start: g.t_start,
                t_end: g.t_end,
                label,
                intensity: 1.0,
            })
        })
        .collect()
}

/// Evaluates ground truth against itself; every AP should be 1.
pub fn oracle_report(ground_truth: &[GroundTruthInstance]) -> Result<EvalReport> {
    let detections = with_actions(ground_truth_detections(ground_truth), ActionPairing::default());
    evaluate(&detections, ground_truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{read_annotations, read_ground_truth};
    use crate::ingest::load_feature_dir;

    fn small() -> SynthConfig {
        SynthConfig {
            n_videos: 4,
            video_len_frames: 120,
            c_verb: 3,
            c_noun: 4,
            action_len: 10,
            gap_len: 4,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", FEATURES_DIR] {
            let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                out.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small()).unwrap().write(a.path()).unwrap();
        generate(&small()).unwrap().write(b.path()).unwrap();
        assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));
        let mut other = small();
        other.seed += 1;
        let c = tempfile::tempdir().unwrap();
        generate(&other).unwrap().write(c.path()).unwrap();
        assert_ne!(read_dir_bytes(a.path()), read_dir_bytes(c.path()));
    }

    #[test]
    fn zero_noise_narrations_hit_ground_truth_starts() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.annotations.len(), ds.ground_truth.len());
        for (a, g) in ds.annotations.iter().zip(&ds.ground_truth) {
            assert_eq!(a.video_id, g.video_id);
            assert_eq!(a.time, g.t_start);
            assert_eq!((a.verb, a.noun), (g.verb, g.noun));
        }
    }

    #[test]
    fn manifest_counts_match_files() {
        let cfg = SynthConfig {
            n_videos: 10,
            video_len_frames: 8 * 28,
            action_len: 20,
            gap_len: 8,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg).unwrap().write(dir.path()).unwrap();
        let mut manifest = KvConfig::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        let videos: usize = manifest.take("videos").unwrap().unwrap();
        let instances: usize = manifest.take("instances").unwrap().unwrap();
        let annotations: usize = manifest.take("annotations").unwrap().unwrap();
        assert_eq!(videos, load_feature_dir(&dir.path().join(FEATURES_DIR)).unwrap().len());
        let gt = read_ground_truth(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert_eq!(instances, gt.len());
        assert_eq!(
            annotations,
            read_annotations(&dir.path().join(ANNOTATIONS_FILE)).unwrap().len()
        );
        // the remaining keys echo the config exactly
        assert_eq!(SynthConfig::from_kv(&mut manifest).unwrap(), cfg);
        manifest.finish().unwrap();
        let per_video = instances as f64 / videos as f64;
        assert!((6.0..=9.0).contains(&per_video), "{per_video}");
    }

    #[test]
    fn instances_disjoint_and_narrations_increasing() {
        for fill in [GapFill::Background, GapFill::Distractor] {
            let cfg = SynthConfig {
                timestamp_noise_sd: 3.0,
                gap_fill: fill,
                ..small()
            };
            let ds = generate(&cfg).unwrap();
            for v in &ds.videos {
                let gts: Vec<_> = ds.ground_truth.iter().filter(|g| g.video_id == v.video_id).collect();
                let anns: Vec<_> = ds.annotations.iter().filter(|a| a.video_id == v.video_id).collect();
                assert_eq!(gts.len(), anns.len());
                assert!(gts.windows(2).all(|w| w[0].t_end <= w[1].t_start));
                assert!(gts.iter().all(|g| g.t_end > g.t_start));
                assert!(anns.windows(2).all(|w| w[0].time < w[1].time));
                let duration = cfg.video_len_frames as f64 / cfg.fps;
                assert!(anns.iter().all(|a| a.time >= 0.0 && a.time < duration));
            }
        }
    }

    #[test]
    fn clamping_orders_and_bounds() {
        assert_eq!(clamp_increasing(&[5.0, 3.0, 3.2], 10), vec![5, 6, 7]);
        assert_eq!(clamp_increasing(&[8.7, 9.5, 30.0], 10), vec![7, 8, 9]);
        assert_eq!(clamp_increasing(&[-4.0, -1.0], 3), vec![0, 1]);
        assert_eq!(clamp_increasing(&[2.0, 2.0, 2.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn class_means_recover_prototypes() {
        let cfg = SynthConfig {
            n_videos: 12,
            c_verb: 2,
            c_noun: 2,
            emission_noise_sd: 0.5,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        for (v, n) in [(0, 0), (1, 1), (0, 1)] {
            let mut sum = vec![0.0; cfg.dims[0]];
            let mut count = 0usize;
            for g in ds.ground_truth.iter().filter(|g| g.verb == v && g.noun == n) {
                let feats = &ds.videos.iter().find(|x| x.video_id == g.video_id).unwrap().tracks[0].data;
                let (s, e) = (
                    (g.t_start * cfg.fps).round() as usize,
                    (g.t_end * cfg.fps).round() as usize,
                );
                for f in s..e {
                    sum.iter_mut().zip(feats.row(f)).for_each(|(a, b)| *a += b);
                    count += 1;
                }
            }
            assert!(count > 0);
            let bound = 3.0 * cfg.emission_noise_sd / (count as f64).sqrt();
            for (k, s) in sum.iter().enumerate() {
                let expected = ds.prototypes.verb[0].get(v, k) + ds.prototypes.noun[0].get(n, k);
                assert!((s / count as f64 - expected).abs() < bound, "class ({v},{n}) dim {k}");
            }
        }
    }

    #[test]
    fn silent_classes_emit_noise_only() {
        let cfg = SynthConfig {
            emission_noise_sd: 0.0,
            silent: [
                Vec::new(),
                Vec::new(),
                (0..3)
                    .map(SilentClass::Verb)
                    .chain((0..4).map(SilentClass::Noun))
                    .collect(),
            ],
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        for v in &ds.videos {
            assert!(v.track(Modality::Audio).unwrap().data.data().iter().all(|&x| x == 0.0));
            assert!(v.track(Modality::Rgb).unwrap().data.data().iter().any(|&x| x != 0.0));
        }
        let bad = SynthConfig {
            silent: [vec![SilentClass::Verb(3)], Vec::new(), Vec::new()],
            ..small()
        };
        assert!(generate(&bad).is_err());
        let zero_dim = SynthConfig {
            dims: [16, 0, 4],
            ..small()
        };
        assert!(matches!(generate(&zero_dim), Err(Error::InvalidValue { .. })));
    }

    #[test]
    fn oracle_is_perfect_and_permutation_invariant() {
        let ds = generate(&small()).unwrap();
        let report = oracle_report(&ds.ground_truth).unwrap();
        for t in &report.tasks {
            assert!(t.classes.iter().all(|c| c.ap == [1.0; 5]));
        }
        let perm = [2usize, 0, 1];
        let permuted: Vec<_> = ds
            .ground_truth
            .iter()
            .map(|g| GroundTruthInstance {
                verb: perm[g.verb],
                ..g.clone()
            })
            .collect();
        let p = oracle_report(&permuted).unwrap();
        for (a, b) in report.tasks.iter().zip(&p.tasks) {
            assert_eq!(a.map, b.map);
        }
    }

    #[test]
    fn half_shifted_detections_miss_at_half_iou() {
        let ds = generate(&small()).unwrap();
        let shifted: Vec<Detection> = ground_truth_detections(&ds.ground_truth)
            .into_iter()
            .map(|mut d| {
                let half = (d.t_end - d.t_start) / 2.0;
                d.t_start += half;
                d.t_end += half;
                d
            })
            .collect();
        let report = evaluate(&shifted, &ds.ground_truth).unwrap();
        let verb = report.task(crate::datamodel::Task::Verb);
        assert!(verb.map[4] < 1.0);
        assert!(verb.map[0] > 0.0);
    }
}
