//! Per-video multimodal feature files, temporal alignment and early fusion.
//!
//! Feature file layout (little endian):
//!
//! ```text
//! magic "NWSD" | version u32 = 1 | video_id (u32 len + UTF-8) | fps f64 | track count u32
//! per track: modality u8 (0 rgb, 1 flow, 2 audio) | dim u32 | T u32 | T*dim f64 row-major
//! ```

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datamodel::write_atomic;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"NWSD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Audio];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Flow => 1,
            Modality::Audio => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Rgb),
            1 => Some(Modality::Flow),
            2 => Some(Modality::Audio),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Audio => "audio",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            "audio" => Ok(Modality::Audio),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// One modality's feature sequence (`T×dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub modality: Modality,
    /// Samples per second.
    pub step_rate: f64,
    pub data: Matrix,
}

impl FeatureTrack {
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// Frame rate of the rgb/flow tracks, which define the frame grid.
    pub fps: f64,
    pub tracks: Vec<FeatureTrack>,
}

impl VideoFeatures {
    pub fn track(&self, modality: Modality) -> Option<&FeatureTrack> {
        self.tracks.iter().find(|t| t.modality == modality)
    }

    /// Number of frames on the rgb/flow grid.
    pub fn frame_count(&self) -> Option<usize> {
        self.track(Modality::Rgb)
            .or_else(|| self.track(Modality::Flow))
            .map(FeatureTrack::len)
    }

    pub fn duration_sec(&self) -> Option<f64> {
        self.frame_count().map(|l| l as f64 / self.fps)
    }
}

/// Early-fused per-frame features, modality blocks concatenated rgb‖flow‖audio.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub video_id: String,
    pub fps: f64,
    pub data: Matrix,
    pub spans: Vec<(Modality, Range<usize>)>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Resamples `track` to `target_len` rows with endpoint-anchored linear interpolation.
pub fn interpolate_track(track: &Matrix, target_len: usize) -> Matrix {
    let (src_len, dim) = track.shape();
    assert!(
        src_len >= 1 && target_len >= 1,
        "interpolation needs non-empty source and target"
    );
    if src_len == target_len {
        return track.clone();
    }
    let mut out = Matrix::zeros(target_len, dim);
    if src_len == 1 || target_len == 1 {
        for t in 0..target_len {
            out.row_mut(t).copy_from_slice(track.row(0));
        }
        return out;
    }
    let scale = (src_len - 1) as f64 / (target_len - 1) as f64;
    for t in 0..target_len {
        let pos = t as f64 * scale;
        let lo = (pos.floor() as usize).min(src_len - 1);
        let frac = pos - lo as f64;
        let row = out.row_mut(t);
        if lo + 1 >= src_len || frac == 0.0 {
            row.copy_from_slice(track.row(lo));
            continue;
        }
        let (a, b) = (track.row(lo), track.row(lo + 1));
        for ((o, &x), &y) in row.iter_mut().zip(a).zip(b) {
            *o = x + (y - x) * frac;
        }
    }
    out
}

/// Concatenates the selected modalities frame by frame.
pub fn fuse(video: &VideoFeatures, modalities: &[Modality]) -> Result<FusedSequence> {
    if modalities.is_empty() {
        return Err(Error::Config("modality selection is empty".into()));
    }
    let len = video
        .frame_count()
        .ok_or_else(|| Error::Config(format!("video {} has neither rgb nor flow track", video.video_id)))?;
    let mut parts = Vec::new();
    let mut spans = Vec::new();
    let mut offset = 0;
    for modality in Modality::ALL {
        if !modalities.contains(&modality) {
            continue;
        }
        let track = video
            .track(modality)
            .ok_or_else(|| Error::Config(format!("video {} has no {modality} track", video.video_id)))?;
        parts.push(interpolate_track(&track.data, len));
        spans.push((modality, offset..offset + track.dim()));
        offset += track.dim();
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(FusedSequence {
        video_id: video.video_id.clone(),
        fps: video.fps,
        data: Matrix::hstack(&refs)?,
        spans,
    })
}

pub fn encode_features(video: &VideoFeatures, w: &mut dyn Write) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_str(w, &video.video_id)?;
    w.write_all(&video.fps.to_le_bytes())?;
    w.write_all(&(video.tracks.len() as u32).to_le_bytes())?;
    for track in &video.tracks {
        w.write_all(&[track.modality.tag()])?;
        w.write_all(&(track.dim() as u32).to_le_bytes())?;
        w.write_all(&(track.len() as u32).to_le_bytes())?;
        write_f64s(w, track.data.data())?;
    }
    Ok(())
}

pub fn write_features(path: &Path, video: &VideoFeatures) -> Result<()> {
    write_atomic(path, |w| encode_features(video, w))
}

pub fn load_features(path: &Path) -> Result<VideoFeatures> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<VideoFeatures> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(FEATURE_MAGIC)?;
    r.expect_version(FORMAT_VERSION)?;
    let video_id = r.string()?;
    let fps_at = r.offset();
    let fps = r.f64()?;
    if !fps.is_finite() || fps <= 0.0 {
        return Err(r.error_at(fps_at, format!("fps must be positive, got {fps}")));
    }
    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count);
    for i in 0..count {
        let tag_at = r.offset();
        let tag = r.u8()?;
        let modality =
            Modality::from_tag(tag).ok_or_else(|| r.error_at(tag_at, format!("unknown modality tag {tag}")))?;
        if raw.iter().any(|(m, _)| *m == modality) {
            return Err(r.error_at(tag_at, format!("duplicate {modality} track")));
        }
        let dim_at = r.offset();
        let dim = r.u32()? as usize;
        let len = r.u32()? as usize;
        if dim == 0 || len == 0 {
            return Err(r.error_at(dim_at, format!("{modality} track has dim {dim}, length {len}")));
        }
        let needed = dim * len * 8;
        let remaining = r.remaining();
        let last = i + 1 == count;
        if last && remaining != needed && remaining.is_multiple_of(len * 8) {
            return Err(r.error_at(
                r.offset(),
                format!(
                    "dim mismatch: header dim {dim} but payload holds {} columns of {len} rows",
                    remaining / (len * 8)
                ),
            ));
        }
        let values = r.f64s(dim * len)?;
        raw.push((modality, Matrix::new(len, dim, values)?));
    }
    if r.remaining() != 0 {
        return Err(r.error_at(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    let frame_count = raw
        .iter()
        .find(|(m, _)| *m == Modality::Rgb)
        .or_else(|| raw.iter().find(|(m, _)| *m == Modality::Flow))
        .map(|(_, d)| d.rows());
    let tracks = raw
        .into_iter()
        .map(|(modality, data)| {
            let step_rate = match (modality, frame_count) {
                (Modality::Rgb | Modality::Flow, _) | (_, None) => fps,
                (_, Some(l)) => data.rows() as f64 * fps / l as f64,
            };
            FeatureTrack {
                modality,
                step_rate,
                data,
            }
        })
        .collect();
    Ok(VideoFeatures { video_id, fps, tracks })
}

/// Loads every `*.nwsd` file in `dir`, sorted by file name.
pub fn load_feature_dir(dir: &Path) -> Result<Vec<VideoFeatures>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nwsd"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_features(p)).collect()
}

pub(crate) fn write_str(w: &mut dyn Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn write_f64s(w: &mut dyn Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Little-endian cursor that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error_at(&self, offset: usize, reason: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated: needed {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(self.error_at(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.pos;
        let found = self.u32()?;
        if found != version {
            return Err(self.error_at(at, format!("unsupported version {found}")));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, "string is not UTF-8".into()))
    }
}
