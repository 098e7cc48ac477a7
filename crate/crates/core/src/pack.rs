//! On-disk container for synchronized multi-view raster streams.
//!
//! Layout of a pack directory:
//!
//! ```text
//! <dir>/manifest.json         UTF-8 JSON, see PackManifest
//! <dir>/streams/<name>.raw    headerless little-endian raster data
//! ```
//!
//! A raw file holds `frame_count` frames back to back. Within a frame the
//! data is channel-major planar and row-major inside each channel, i.e. the
//! in-memory layout of [`Raster`]. The manifest lists each stream's shape as
//! `[channels, height, width]`, so the file length is fully determined by the
//! manifest and any difference is a format error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DType, Raster};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STREAMS_DIR: &str = "streams";

/// Default clip timing: 10 Hz clips of 30 frames.
pub const DEFAULT_FPS: f64 = 10.0;
pub const DEFAULT_FRAME_COUNT: usize = 30;

/// View id carried by latent streams that span every view of a clip.
pub const MULTIVIEW_ID: &str = "multiview";

/// Sign convention tag recorded on normal streams.
pub const NORMAL_CONVENTION: &str = "toward_camera_neg_z";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    LeftWrist,
    Head,
    RightWrist,
    Other,
}

impl ViewRole {
    /// Position in the fixed (left_wrist, head, right_wrist) order.
    pub fn rank(self) -> Option<usize> {
        match self {
            ViewRole::LeftWrist => Some(0),
            ViewRole::Head => Some(1),
            ViewRole::RightWrist => Some(2),
            ViewRole::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    pub view_id: String,
    pub intrinsics: Intrinsics,
    pub role: ViewRole,
    pub width: usize,
    pub height: usize,
}

impl ViewDescriptor {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let ok = k.fx > 0.0
            && k.fy > 0.0
            && k.cx >= 0.0
            && k.cx < self.width as f64
            && k.cy >= 0.0
            && k.cy < self.height as f64
            && [k.fx, k.fy, k.cx, k.cy].iter().all(|v| v.is_finite());
        if !ok || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput(format!(
                "view {}: invalid intrinsics {:?} for {}x{}",
                self.view_id, k, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Rgb,
    DepthSensorMm,
    DepthPredRel,
    DepthMetricM,
    NormalCam,
    /// Patch-encoded latent grids written by the layout stage.
    Latent,
}

impl StreamKind {
    /// Required (dtype, channels); `None` channels means any.
    fn expected(self) -> (DType, Option<usize>) {
        match self {
            StreamKind::Rgb => (DType::Uint8, Some(3)),
            StreamKind::DepthSensorMm => (DType::Uint16, Some(1)),
            StreamKind::DepthPredRel | StreamKind::DepthMetricM => (DType::Float32, Some(1)),
            StreamKind::NormalCam => (DType::Float32, Some(3)),
            StreamKind::Latent => (DType::Float32, None),
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            StreamKind::Rgb => "rgb",
            StreamKind::DepthSensorMm => "depth_sensor",
            StreamKind::DepthPredRel => "depth_rel",
            StreamKind::DepthMetricM => "depth_metric",
            StreamKind::NormalCam => "normal",
            StreamKind::Latent => "latent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub name: String,
    pub view_id: String,
    pub kind: StreamKind,
    pub dtype: DType,
    /// `[channels, height, width]` of one frame.
    pub shape: [usize; 3],
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_convention: Option<String>,
}

impl StreamDescriptor {
    pub fn frame_bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

/// Conventional stream name for a view/kind pair, e.g. `head_depth_metric`.
pub fn stream_name(view_id: &str, kind: StreamKind) -> String {
    format!("{view_id}_{}", kind.suffix())
}

pub fn stream_path(name: &str) -> String {
    format!("{STREAMS_DIR}/{name}.raw")
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!("invalid stream or view name {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub schema_version: u32,
    pub fps: f64,
    pub frame_count: usize,
    pub views: Vec<ViewDescriptor>,
    pub streams: Vec<StreamDescriptor>,
}

impl PackManifest {
    pub fn new(fps: f64, frame_count: usize, views: Vec<ViewDescriptor>) -> Self {
        Self { schema_version: SCHEMA_VERSION, fps, frame_count, views, streams: Vec::new() }
    }

    pub fn view(&self, view_id: &str) -> Option<&ViewDescriptor> {
        self.views.iter().find(|v| v.view_id == view_id)
    }

    pub fn stream(&self, name: &str) -> Option<&StreamDescriptor> {
        self.streams.iter().find(|s| s.name == name)
    }

    /// First stream of `kind` attached to `view_id`.
    pub fn find(&self, view_id: &str, kind: StreamKind) -> Option<&StreamDescriptor> {
        self.streams.iter().find(|s| s.view_id == view_id && s.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Version { found: self.schema_version, supported: SCHEMA_VERSION });
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Format(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frame_count == 0 {
            return Err(Error::Format("frame_count must be >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.views {
            check_name(&v.view_id)?;
            if !seen.insert(v.view_id.as_str()) {
                return Err(Error::Format(format!("duplicate view_id {:?}", v.view_id)));
            }
            v.validate().map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.streams {
            check_name(&s.name)?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::Format(format!("duplicate stream name {:?}", s.name)));
            }
            if s.path != stream_path(&s.name) {
                return Err(Error::Format(format!(
                    "stream {} must live at {}, manifest says {}",
                    s.name,
                    stream_path(&s.name),
                    s.path
                )));
            }
            let view = self.view(&s.view_id);
            if view.is_none() && !(s.kind == StreamKind::Latent && s.view_id == MULTIVIEW_ID) {
                return Err(Error::Format(format!("stream {} references unknown view {}", s.name, s.view_id)));
            }
            let (dtype, channels) = s.kind.expected();
            if s.dtype != dtype || channels.is_some_and(|c| c != s.shape[0]) {
                return Err(Error::Format(format!(
                    "stream {} of kind {:?} cannot be {:?} with shape {:?}",
                    s.name, s.kind, s.dtype, s.shape
                )));
            }
            if s.shape.contains(&0) {
                return Err(Error::Format(format!("stream {} has an empty shape", s.name)));
            }
            if let Some(view) = view.filter(|_| s.kind != StreamKind::Latent) {
                if (s.shape[1], s.shape[2]) != (view.height, view.width) {
                    return Err(Error::Format(format!(
                        "stream {} is {}x{} but view {} is {}x{}",
                        s.name, s.shape[1], s.shape[2], view.view_id, view.height, view.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A manifest together with the frames of every declared stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Pack {
    pub manifest: PackManifest,
    pub streams: BTreeMap<String, Vec<Raster>>,
}

impl Pack {
    pub fn new(fps: f64, frame_count: usize, views: Vec<ViewDescriptor>) -> Self {
        Self { manifest: PackManifest::new(fps, frame_count, views), streams: BTreeMap::new() }
    }

    /// Adds (or replaces) a stream, deriving its descriptor from the frames.
    pub fn put_stream(&mut self, name: &str, view_id: &str, kind: StreamKind, frames: Vec<Raster>) -> Result<()> {
        check_name(name)?;
        let first = frames.first().ok_or_else(|| Error::InvalidInput(format!("stream {name} has no frames")))?;
        if frames.len() != self.manifest.frame_count {
            return Err(Error::Format(format!(
                "stream {name} has {} frames, pack declares {}",
                frames.len(),
                self.manifest.frame_count
            )));
        }
        let desc = StreamDescriptor {
            name: name.to_string(),
            view_id: view_id.to_string(),
            kind,
            dtype: first.dtype(),
            shape: first.shape(),
            path: stream_path(name),
            normal_convention: (kind == StreamKind::NormalCam).then(|| NORMAL_CONVENTION.to_string()),
        };
        match self.manifest.streams.iter_mut().find(|s| s.name == name) {
            Some(slot) => *slot = desc,
            None => self.manifest.streams.push(desc),
        }
        self.streams.insert(name.to_string(), frames);
        Ok(())
    }

    pub fn frames(&self, name: &str) -> Option<&[Raster]> {
        self.streams.get(name).map(Vec::as_slice)
    }

    /// Frames of the first `kind` stream of `view_id`.
    pub fn find(&self, view_id: &str, kind: StreamKind) -> Result<(&StreamDescriptor, &[Raster])> {
        let desc = self
            .manifest
            .find(view_id, kind)
            .ok_or_else(|| Error::Format(format!("pack has no {kind:?} stream for view {view_id}")))?;
        let frames =
            self.frames(&desc.name).ok_or_else(|| Error::Format(format!("stream {} has no data", desc.name)))?;
        Ok((desc, frames))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        pack_write(&self.manifest, &self.streams, dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        pack_read(dir)
    }
}

fn check_frames(manifest: &PackManifest, desc: &StreamDescriptor, frames: &[Raster]) -> Result<()> {
    if frames.len() != manifest.frame_count {
        return Err(Error::Format(format!(
            "stream {}: manifest declares {} frames, {} supplied",
            desc.name,
            manifest.frame_count,
            frames.len()
        )));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != desc.shape || f.dtype() != desc.dtype {
            return Err(Error::Format(format!(
                "stream {} frame {i}: {:?} {:?} does not match manifest {:?} {:?}",
                desc.name,
                f.dtype(),
                f.shape(),
                desc.dtype,
                desc.shape
            )));
        }
    }
    Ok(())
}

/// Writes `manifest.json` and one raw file per stream. Identical inputs
/// produce byte-identical files.
pub fn pack_write(manifest: &PackManifest, streams: &BTreeMap<String, Vec<Raster>>, dir: &Path) -> Result<()> {
    manifest.validate()?;
    for desc in &manifest.streams {
        let frames = streams
            .get(&desc.name)
            .ok_or_else(|| Error::Format(format!("stream {} declared but not supplied", desc.name)))?;
        check_frames(manifest, desc, frames)?;
    }
    if let Some(extra) = streams.keys().find(|k| manifest.stream(k).is_none()) {
        return Err(Error::Format(format!("stream {extra} supplied but not declared")));
    }

    let streams_dir = dir.join(STREAMS_DIR);
    fs::create_dir_all(&streams_dir).map_err(|e| Error::io(&streams_dir, e))?;
    for desc in &manifest.streams {
        let mut bytes = Vec::with_capacity(desc.frame_bytes() * manifest.frame_count);
        for f in &streams[&desc.name] {
            bytes.extend_from_slice(&f.to_le_bytes());
        }
        let path = dir.join(&desc.path);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<PackManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("manifest lacks schema_version".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::Version { found: version.min(u32::MAX as u64) as u32, supported: SCHEMA_VERSION });
    }
    let manifest: PackManifest =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn pack_read(dir: &Path) -> Result<Pack> {
    let manifest = read_manifest(dir)?;
    let mut streams = BTreeMap::new();
    for desc in &manifest.streams {
        let path = dir.join(&desc.path);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Format(format!("missing stream file {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        let expected = desc.frame_bytes() * manifest.frame_count;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "stream file {} is {} bytes, manifest implies {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let [c, h, w] = desc.shape;
        let frames = bytes
            .chunks_exact(desc.frame_bytes())
            .map(|chunk| Raster::from_le_bytes(h, w, c, desc.dtype, chunk))
            .collect::<Result<Vec<_>>>()?;
        streams.insert(desc.name.clone(), frames);
    }
    Ok(Pack { manifest, streams })
}

/// Writes a sidecar raw file (mask, crop, embedding) relative to a pack dir.
pub fn write_sidecar(dir: &Path, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = resolve_sidecar(dir, rel)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_sidecar(dir: &Path, rel: &str) -> Result<Vec<u8>> {
    let path = resolve_sidecar(dir, rel)?;
    fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format(format!("missing file {}", path.display())),
        _ => Error::io(&path, e),
    })
}

fn resolve_sidecar(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return Err(Error::Format(format!("sidecar path {rel:?} must be relative to the pack")));
    }
    Ok(dir.join(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(id: &str, role: ViewRole) -> ViewDescriptor {
        ViewDescriptor {
            view_id: id.into(),
            intrinsics: Intrinsics { fx: 2.0, fy: 2.0, cx: 0.5, cy: 0.5 },
            role,
            width: 2,
            height: 2,
        }
    }

    fn tiny_pack(frames: usize) -> Pack {
        let mut p = Pack::new(DEFAULT_FPS, frames, vec![view("head", ViewRole::Head)]);
        let f = (0..frames).map(|i| Raster::from_f32(2, 2, 1, vec![i as f32, 1.0, 2.0, 3.5]).unwrap()).collect();
        p.put_stream("head_depth_metric", "head", StreamKind::DepthMetricM, f).unwrap();
        p
    }

    #[test]
    fn single_float_frame_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        tiny_pack(1).write(dir.path()).unwrap();
        let len = fs::metadata(dir.path().join("streams/head_depth_metric.raw")).unwrap().len();
        assert_eq!(len, 16);
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn round_trip_and_rewrite_identical() {
        let dir = tempfile::tempdir().unwrap();
        let pack = tiny_pack(3);
        pack.write(dir.path()).unwrap();
        let a = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let back = pack_read(dir.path()).unwrap();
        assert_eq!(back, pack);
        pack.write(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), a);
    }

    #[test]
    fn missing_frame_is_format_error() {
        let mut pack = tiny_pack(3);
        pack.streams.get_mut("head_depth_metric").unwrap().pop();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(pack.write(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_pack(2).write(dir.path()).unwrap();
        let path = dir.path().join("streams/head_depth_metric.raw");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(pack_read(dir.path()), Err(Error::Format(_))));
        fs::write(&path, [bytes.clone(), vec![0]].concat()).unwrap();
        assert!(matches!(pack_read(dir.path()), Err(Error::Format(_))));
        fs::remove_file(&path).unwrap();
        assert!(matches!(pack_read(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_view_is_format_error() {
        let mut pack = tiny_pack(1);
        pack.manifest.views.push(view("head", ViewRole::Other));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(pack.write(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_pack(1).write(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(pack_read(dir.path()), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn stream_on_unknown_view_rejected() {
        let mut pack = tiny_pack(1);
        pack.manifest.streams[0].view_id = "nope".into();
        assert!(pack.manifest.validate().is_err());
    }

    #[test]
    fn kind_dtype_mismatch_rejected() {
        let mut pack = Pack::new(DEFAULT_FPS, 1, vec![view("head", ViewRole::Head)]);
        let f = vec![Raster::from_u8(2, 2, 1, vec![0; 4]).unwrap()];
        pack.put_stream("x", "head", StreamKind::Rgb, f).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(pack.write(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn sidecar_paths_stay_inside_pack() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_sidecar(dir.path(), "../escape.raw", b"x").is_err());
        assert!(write_sidecar(dir.path(), "/abs.raw", b"x").is_err());
        write_sidecar(dir.path(), "streams/a_mask.raw", b"x").unwrap();
        assert_eq!(read_sidecar(dir.path(), "streams/a_mask.raw").unwrap(), b"x");
    }
}
