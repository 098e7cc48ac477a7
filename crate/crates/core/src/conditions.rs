//! Condition triplets: geometry (metric depth and normals per view),
//! appearance (an object-free background per view plus one record per
//! object) and the ground-truth RGB streams, all referenced from a pack.
//!
//! Masks, embeddings and inpainting results come from external tools and
//! are ingested from sidecar files:
//!
//! ```text
//! masks.json       [{"object_id", "description", "bbox": [x, y, w, h],
//!                    "mask": "streams/<id>_mask.raw", "source_frame",
//!                    "view_id" (optional, defaults to the head view)}]
//! embeddings.json  {"<object_id>": {"dim": D, "data": "streams/<id>_emb.raw"}}
//! ```
//!
//! Mask files are u8 rasters (0 or 1) of one view frame. Embedding files are
//! `dim` little-endian float32 values. Paths are relative to the directory
//! holding the JSON file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{read_sidecar, write_sidecar, Pack, StreamKind, ViewRole};
use crate::raster::{Mask, Raster};

pub const TRIPLET_FILE: &str = "triplet.json";
pub const TRIPLET_VERSION: u32 = 1;
/// Side length object crops are resized to.
pub const CROP_SIZE: usize = 224;
/// Mask pixels may extend this far outside their bounding box.
pub const BBOX_TOLERANCE_PX: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframePolicy {
    /// First frame for objects, last frame for the background.
    Temporal,
    /// Frame of largest object area for objects, smallest for background.
    Content,
}

/// `(object_frame, background_frame) = (0, len - 1)`.
pub fn select_keyframes_temporal(clip_len: usize) -> Result<(usize, usize)> {
    if clip_len == 0 {
        return Err(Error::InvalidInput("clip has no frames".into()));
    }
    Ok((0, clip_len - 1))
}

/// Argmax and argmin of per-frame object areas, lowest index on ties.
pub fn select_keyframes_content(areas: &[u64]) -> Result<(usize, usize)> {
    if areas.is_empty() {
        return Err(Error::InvalidInput("no object areas".into()));
    }
    let (mut hi, mut lo) = (0, 0);
    for (i, &a) in areas.iter().enumerate() {
        if a > areas[hi] {
            hi = i;
        }
        if a < areas[lo] {
            lo = i;
        }
    }
    Ok((hi, lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub object_id: String,
    #[serde(default)]
    pub description: String,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [usize; 4],
    pub mask: String,
    pub source_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRef {
    pub dim: usize,
    pub data: String,
}

/// A parsed masks file and the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct MasksFile {
    pub base: PathBuf,
    pub entries: Vec<MaskEntry>,
}

pub fn read_masks_file(path: &Path) -> Result<MasksFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(MasksFile { base: parent_dir(path), entries })
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Embedding references plus their loaded vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub refs: BTreeMap<String, EmbeddingRef>,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

/// Loads every vector of an embeddings file. Vectors must be nonempty,
/// finite and exactly `dim` long.
pub fn read_embeddings_file(path: &Path) -> Result<EmbeddingSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let refs: BTreeMap<String, EmbeddingRef> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = parent_dir(path);
    let mut vectors = BTreeMap::new();
    for (key, r) in &refs {
        let bytes = read_sidecar(&base, &r.data)?;
        if r.dim == 0 || bytes.len() != r.dim * 4 {
            return Err(Error::Format(format!("embedding {key}: {} bytes for dim {}", bytes.len(), r.dim)));
        }
        let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("embedding {key} has non-finite values")));
        }
        vectors.insert(key.clone(), v);
    }
    Ok(EmbeddingSet { refs, vectors })
}

/// Writes vectors as raw float32 files `streams/<prefix><key>_emb.raw` in
/// `dir` and the JSON index at `dir/file_name`.
pub fn write_embeddings_file(
    dir: &Path,
    file_name: &str,
    prefix: &str,
    vectors: &BTreeMap<String, Vec<f32>>,
) -> Result<PathBuf> {
    let mut refs = BTreeMap::new();
    for (key, v) in vectors {
        let rel = format!("streams/{prefix}{}_emb.raw", key.replace('@', "_at_"));
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        write_sidecar(dir, &rel, &bytes)?;
        refs.insert(key.clone(), EmbeddingRef { dim: v.len(), data: rel });
    }
    write_json(&dir.join(file_name), &refs)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Replaces `frame` with `fill` under `union`; every other byte is kept.
pub fn composite_background(frame: &Raster, union: &Mask, fill: &Raster) -> Result<Raster> {
    if frame.shape() != fill.shape()
        || frame.dtype() != fill.dtype()
        || (union.height(), union.width()) != (frame.height(), frame.width())
    {
        return Err(Error::InvalidInput("frame, mask and fill must share dimensions and type".into()));
    }
    let (f, g) = match (frame.as_u8(), fill.as_u8()) {
        (Some(f), Some(g)) => (f, g),
        _ => return Err(Error::InvalidInput("background compositing expects u8 RGB".into())),
    };
    let plane = frame.plane_len();
    let out = f.iter().zip(g).enumerate().map(|(i, (&a, &b))| if union.is_set(i % plane) { b } else { a }).collect();
    Raster::from_u8(frame.height(), frame.width(), frame.channels(), out)
}

/// Nearest-neighbor crop of `bbox` resized to `size x size`.
pub fn crop_resize(frame: &Raster, bbox: [usize; 4], size: usize) -> Result<Raster> {
    let [bx, by, bw, bh] = bbox;
    if bw == 0 || bh == 0 || bx + bw > frame.width() || by + bh > frame.height() {
        return Err(Error::InvalidInput(format!("bbox {bbox:?} outside the frame")));
    }
    let src = frame.as_u8().ok_or_else(|| Error::InvalidInput("crops expect u8 RGB".into()))?;
    let (h, w) = (frame.height(), frame.width());
    let mut out = Vec::with_capacity(frame.channels() * size * size);
    for c in 0..frame.channels() {
        for y in 0..size {
            let sy = by + y * bh / size;
            for x in 0..size {
                let sx = bx + x * bw / size;
                out.push(src[c * h * w + sy * w + sx]);
            }
        }
    }
    Raster::from_u8(size, size, frame.channels(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRef {
    pub view_id: String,
    pub depth_metric_m: String,
    pub normal_cam: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRef {
    pub view_id: String,
    pub rgb: String,
}

/// The background reference of one view, stored as a u8 RGB sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRecord {
    pub view_id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub source_frame: usize,
    pub inpainted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: String,
    pub description: String,
    pub view_id: String,
    pub bbox: [usize; 4],
    pub mask_path: String,
    pub source_frame: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<EmbeddingRef>,
    /// Nearest-neighbor `CROP_SIZE` square crop of the bbox, u8 RGB.
    pub crop_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub backgrounds: Vec<BackgroundRecord>,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTriplet {
    pub schema_version: u32,
    pub policy: KeyframePolicy,
    pub frame_count: usize,
    pub object_frame: usize,
    pub background_frame: usize,
    pub geometry: Vec<GeometryRef>,
    pub appearance: Appearance,
    pub ground_truth: Vec<GroundTruthRef>,
}

/// Everything `build_triplet` reads besides the pack.
#[derive(Debug, Clone, Default)]
pub struct ConditionInputs {
    pub masks: Option<MasksFile>,
    /// Vectors are copied into the pack next to the triplet.
    pub embeddings: Option<EmbeddingSet>,
    /// Per-frame object areas for the content policy.
    pub areas: Option<Vec<u64>>,
    /// Inpainted frame per view, used under the union of object masks.
    pub fills: BTreeMap<String, Raster>,
}

/// A triplet together with the sidecar files it references.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBuild {
    pub triplet: ConditionTriplet,
    pub sidecars: Vec<(String, Vec<u8>)>,
}

impl TripletBuild {
    /// Writes sidecars and `triplet.json` into the pack directory.
    pub fn write(&self, pack_dir: &Path) -> Result<PathBuf> {
        for (rel, bytes) in &self.sidecars {
            write_sidecar(pack_dir, rel, bytes)?;
        }
        write_json(&pack_dir.join(TRIPLET_FILE), &self.triplet)
    }
}

fn head_view(pack: &Pack) -> Result<&str> {
    let views = &pack.manifest.views;
    views
        .iter()
        .find(|v| v.role == ViewRole::Head)
        .or_else(|| views.first())
        .map(|v| v.view_id.as_str())
        .ok_or_else(|| Error::Format("pack has no views".into()))
}

fn load_mask(masks: &MasksFile, entry: &MaskEntry, h: usize, w: usize) -> Result<Mask> {
    let bytes = read_sidecar(&masks.base, &entry.mask)?;
    if bytes.len() != h * w {
        return Err(Error::Format(format!("mask {} is {} bytes, view is {h}x{w}", entry.mask, bytes.len())));
    }
    Mask::new(h, w, bytes).map_err(|e| Error::Format(format!("mask {}: {e}", entry.mask)))
}

/// Tight `[x, y, w, h]` box of the set pixels, or `None` for an empty mask.
pub fn mask_bbox(mask: &Mask) -> Option<[usize; 4]> {
    let w = mask.width();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for i in (0..mask.data().len()).filter(|&i| mask.is_set(i)) {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x0 != usize::MAX).then(|| [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
}

/// True when every set pixel lies within the bbox grown by the tolerance and
/// the bbox lies inside the frame.
pub fn mask_fits_bbox(mask: &Mask, bbox: [usize; 4]) -> bool {
    let [bx, by, bw, bh] = bbox;
    if bw == 0 || bh == 0 || bx + bw > mask.width() || by + bh > mask.height() {
        return false;
    }
    let t = BBOX_TOLERANCE_PX;
    let (x0, y0) = (bx.saturating_sub(t), by.saturating_sub(t));
    let (x1, y1) = (bx + bw + t, by + bh + t);
    (0..mask.data().len()).filter(|&i| mask.is_set(i)).all(|i| {
        let (y, x) = (i / mask.width(), i % mask.width());
        (x0..x1).contains(&x) && (y0..y1).contains(&y)
    })
}

/// Assembles and validates a triplet. The pack must hold depth_metric_m,
/// normal_cam and rgb streams for every view.
pub fn build_triplet(pack: &Pack, policy: KeyframePolicy, inputs: &ConditionInputs) -> Result<TripletBuild> {
    let m = &pack.manifest;
    let (object_frame, background_frame) = match policy {
        KeyframePolicy::Temporal => select_keyframes_temporal(m.frame_count)?,
        KeyframePolicy::Content => {
            let areas = inputs
                .areas
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("content policy needs per-frame object areas".into()))?;
            if areas.len() != m.frame_count {
                return Err(Error::InvalidInput(format!("{} areas for a {}-frame clip", areas.len(), m.frame_count)));
            }
            select_keyframes_content(areas)?
        }
    };

    let mut geometry = Vec::new();
    let mut ground_truth = Vec::new();
    for v in &m.views {
        let id = &v.view_id;
        let (d, _) = pack.find(id, StreamKind::DepthMetricM)?;
        let (n, _) = pack.find(id, StreamKind::NormalCam)?;
        let (c, _) = pack.find(id, StreamKind::Rgb)?;
        geometry.push(GeometryRef { view_id: id.clone(), depth_metric_m: d.name.clone(), normal_cam: n.name.clone() });
        ground_truth.push(GroundTruthRef { view_id: id.clone(), rgb: c.name.clone() });
    }

    let head = head_view(pack)?.to_string();
    let entries: &[MaskEntry] = inputs.masks.as_ref().map_or(&[], |f| &f.entries);
    let view_of = |e: &MaskEntry| e.view_id.clone().unwrap_or_else(|| head.clone());

    // validate every mask against its bbox and collect them
    let mut loaded = Vec::with_capacity(entries.len());
    let mut bad = Vec::new();
    for e in entries {
        let vid = view_of(e);
        let view = m
            .view(&vid)
            .ok_or_else(|| Error::Format(format!("mask entry {} names unknown view {vid}", e.object_id)))?;
        if e.source_frame >= m.frame_count {
            bad.push(e.object_id.clone());
            loaded.push(None);
            continue;
        }
        let mask = load_mask(inputs.masks.as_ref().expect("entries imply a file"), e, view.height, view.width)?;
        if !mask_fits_bbox(&mask, e.bbox) {
            bad.push(e.object_id.clone());
        }
        loaded.push(Some(mask));
    }
    if !bad.is_empty() {
        bad.dedup();
        return Err(Error::Validation {
            message: "object masks are inconsistent with their bounding boxes".into(),
            object_ids: bad,
        });
    }

    let mut sidecars = Vec::new();
    let mut backgrounds = Vec::new();
    for v in &m.views {
        let (_, rgb) = pack.find(&v.view_id, StreamKind::Rgb)?;
        let frame = &rgb[background_frame];
        let mut union = Mask::empty(v.height, v.width);
        for (e, mask) in entries.iter().zip(&loaded) {
            if view_of(e) == v.view_id && e.source_frame == background_frame {
                union = union.or(mask.as_ref().expect("validated"))?;
            }
        }
        let (image, inpainted) = match inputs.fills.get(&v.view_id) {
            Some(fill) => (composite_background(frame, &union, fill)?, union.count() > 0),
            None => (frame.clone(), false),
        };
        let rel = format!("streams/{}_background.raw", v.view_id);
        sidecars.push((rel.clone(), image.to_le_bytes()));
        backgrounds.push(BackgroundRecord {
            view_id: v.view_id.clone(),
            image: rel,
            width: v.width,
            height: v.height,
            source_frame: background_frame,
            inpainted,
        });
    }

    // one record per object: the entry at the object frame, head view first
    let mut ids: Vec<&str> = Vec::new();
    for e in entries {
        if !ids.contains(&e.object_id.as_str()) {
            ids.push(&e.object_id);
        }
    }
    let mut objects = Vec::new();
    let mut missing = Vec::new();
    for id in ids {
        let candidates: Vec<&MaskEntry> = entries.iter().filter(|e| e.object_id == id).collect();
        let e = *candidates
            .iter()
            .min_by_key(|e| (e.source_frame != object_frame, view_of(e) != head, e.source_frame))
            .expect("nonempty");
        let vid = view_of(e);
        let (_, rgb) = pack.find(&vid, StreamKind::Rgb)?;
        let crop = crop_resize(&rgb[e.source_frame], e.bbox, CROP_SIZE)?;
        let crop_path = format!("streams/{id}_crop.raw");
        sidecars.push((crop_path.clone(), crop.to_le_bytes()));
        let embedding = match &inputs.embeddings {
            Some(set) => match set.vectors.get(id) {
                Some(v) if !v.is_empty() => {
                    let data = format!("streams/{id}_emb.raw");
                    sidecars.push((data.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()));
                    Some(EmbeddingRef { dim: v.len(), data })
                }
                _ => {
                    missing.push(id.to_string());
                    None
                }
            },
            None => None,
        };
        objects.push(ObjectRecord {
            object_id: id.to_string(),
            description: e.description.clone(),
            view_id: vid,
            bbox: e.bbox,
            mask_path: e.mask.clone(),
            source_frame: e.source_frame,
            embedding,
            crop_path,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Validation { message: "objects lack embeddings".into(), object_ids: missing });
    }

    let triplet = ConditionTriplet {
        schema_version: TRIPLET_VERSION,
        policy,
        frame_count: m.frame_count,
        object_frame,
        background_frame,
        geometry,
        appearance: Appearance { backgrounds, objects },
        ground_truth,
    };
    validate_triplet_refs(&triplet, pack)?;
    Ok(TripletBuild { triplet, sidecars })
}

/// Checks the triplet against the pack in memory: stream references,
/// frame counts, view coverage and record bounds.
pub fn validate_triplet_refs(t: &ConditionTriplet, pack: &Pack) -> Result<()> {
    let m = &pack.manifest;
    let fail = |msg: String| Err(Error::validation(msg));
    if t.schema_version != TRIPLET_VERSION {
        return Err(Error::Version { found: t.schema_version, supported: TRIPLET_VERSION });
    }
    if t.frame_count != m.frame_count {
        return fail(format!("triplet has {} frames, pack has {}", t.frame_count, m.frame_count));
    }
    if t.object_frame >= t.frame_count || t.background_frame >= t.frame_count {
        return fail("keyframe index out of range".into());
    }
    let check = |name: &str, kind: StreamKind, view: &str| -> Result<()> {
        match m.stream(name) {
            Some(s) if s.kind == kind && s.view_id == view => Ok(()),
            _ => Err(Error::validation(format!("{name} is not a {kind:?} stream of view {view}"))),
        }
    };
    for g in &t.geometry {
        check(&g.depth_metric_m, StreamKind::DepthMetricM, &g.view_id)?;
        check(&g.normal_cam, StreamKind::NormalCam, &g.view_id)?;
    }
    for g in &t.ground_truth {
        check(&g.rgb, StreamKind::Rgb, &g.view_id)?;
        if !t.geometry.iter().any(|x| x.view_id == g.view_id) {
            return fail(format!("view {} has ground truth but no geometry", g.view_id));
        }
    }
    for b in &t.appearance.backgrounds {
        let v =
            m.view(&b.view_id).ok_or_else(|| Error::validation(format!("background of unknown view {}", b.view_id)))?;
        if (v.width, v.height) != (b.width, b.height) || b.source_frame >= t.frame_count {
            return fail(format!("background of view {} has wrong size or frame", b.view_id));
        }
    }
    let mut bad = Vec::new();
    for o in &t.appearance.objects {
        let ok = m.view(&o.view_id).is_some_and(|v| {
            let [x, y, w, h] = o.bbox;
            w > 0 && h > 0 && x + w <= v.width && y + h <= v.height
        }) && o.source_frame < t.frame_count
            && o.embedding.as_ref().is_none_or(|e| e.dim > 0);
        if !ok {
            bad.push(o.object_id.clone());
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation { message: "object records out of bounds".into(), object_ids: bad });
    }
    Ok(())
}

/// Full validation of a written triplet: in-memory references plus the
/// existence and size of every sidecar file. Repeated calls give the same
/// answer.
pub fn validate_triplet(t: &ConditionTriplet, pack: &Pack, pack_dir: &Path) -> Result<()> {
    validate_triplet_refs(t, pack)?;
    for b in &t.appearance.backgrounds {
        let bytes = read_sidecar(pack_dir, &b.image)?;
        if bytes.len() != 3 * b.width * b.height {
            return Err(Error::validation(format!("background {} has the wrong size", b.image)));
        }
    }
    let mut bad = Vec::new();
    for o in &t.appearance.objects {
        let crop_ok = read_sidecar(pack_dir, &o.crop_path).is_ok_and(|b| b.len() == 3 * CROP_SIZE * CROP_SIZE);
        let emb_ok =
            o.embedding.as_ref().is_none_or(|e| read_sidecar(pack_dir, &e.data).is_ok_and(|b| b.len() == 4 * e.dim));
        if !(crop_ok && emb_ok) {
            bad.push(o.object_id.clone());
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation {
            message: "object sidecar files are missing or malformed".into(),
            object_ids: bad,
        });
    }
    Ok(())
}

pub fn read_triplet(pack_dir: &Path) -> Result<ConditionTriplet> {
    let path = pack_dir.join(TRIPLET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NormalFrame;
    use crate::pack::{Intrinsics, ViewDescriptor};
    use crate::raster::DepthFrame;

    #[test]
    fn temporal_keyframes() {
        assert_eq!(select_keyframes_temporal(30).unwrap(), (0, 29));
        assert_eq!(select_keyframes_temporal(1).unwrap(), (0, 0));
        assert!(matches!(select_keyframes_temporal(0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn content_keyframes() {
        assert_eq!(select_keyframes_content(&[10, 50, 5]).unwrap(), (1, 2));
        assert_eq!(select_keyframes_content(&[7, 7, 7]).unwrap(), (0, 0));
        assert!(select_keyframes_content(&[]).is_err());
    }

    #[test]
    fn content_tie_break_matches_scan_oracle() {
        let areas = [9u64, 9, 1, 1, 4];
        let max = *areas.iter().max().unwrap();
        let min = *areas.iter().min().unwrap();
        let oracle = (areas.iter().position(|&a| a == max).unwrap(), areas.iter().position(|&a| a == min).unwrap());
        assert_eq!(select_keyframes_content(&areas).unwrap(), oracle);
        assert_eq!(oracle, (0, 2));
    }

    fn rgb(h: usize, w: usize, v: u8) -> Raster {
        Raster::from_u8(h, w, 3, vec![v; 3 * h * w]).unwrap()
    }

    #[test]
    fn composite_cases() {
        let f = Raster::from_u8(2, 2, 3, (0..12).collect()).unwrap();
        let fill = rgb(2, 2, 200);
        assert_eq!(composite_background(&f, &Mask::empty(2, 2), &fill).unwrap(), f);
        assert_eq!(composite_background(&f, &Mask::full(2, 2), &fill).unwrap(), fill);
        let half = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let out = composite_background(&f, &half, &fill).unwrap();
        assert_eq!(out.as_u8().unwrap(), &[200, 1, 2, 3, 200, 5, 6, 7, 200, 9, 10, 11]);
        assert!(composite_background(&f, &Mask::full(3, 2), &fill).is_err());
    }

    #[test]
    fn crop_is_nearest_neighbor() {
        let f = Raster::from_u8(2, 2, 1, vec![1, 2, 3, 4]).unwrap();
        let c = crop_resize(&f, [0, 0, 2, 2], 4).unwrap();
        assert_eq!(c.as_u8().unwrap(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert!(crop_resize(&f, [1, 1, 2, 1], 4).is_err());
    }

    #[test]
    fn tight_bbox() {
        assert_eq!(mask_bbox(&Mask::empty(4, 4)), None);
        let m = Mask::from_fn(6, 5, |y, x| (y == 1 && x == 3) || (y == 4 && x == 0));
        assert_eq!(mask_bbox(&m), Some([0, 1, 4, 4]));
        assert!(mask_fits_bbox(&m, mask_bbox(&m).unwrap()));
    }

    #[test]
    fn bbox_tolerance() {
        let m = Mask::from_fn(10, 10, |y, x| (3..5).contains(&y) && (3..5).contains(&x));
        assert!(mask_fits_bbox(&m, [3, 3, 2, 2]));
        assert!(mask_fits_bbox(&m, [5, 5, 2, 2]));
        assert!(!mask_fits_bbox(&m, [6, 6, 2, 2]));
        assert!(!mask_fits_bbox(&m, [9, 9, 2, 2]));
    }

    fn tiny_pack(frames: usize) -> Pack {
        let view = |id: &str, role| ViewDescriptor {
            view_id: id.into(),
            intrinsics: Intrinsics { fx: 10.0, fy: 10.0, cx: 3.5, cy: 3.5 },
            role,
            width: 8,
            height: 8,
        };
        let mut p = Pack::new(10.0, frames, vec![view("head", ViewRole::Head), view("left", ViewRole::LeftWrist)]);
        for id in ["head", "left"] {
            let d = (0..frames).map(|_| DepthFrame::from_fn(8, 8, |_, _| 1.0).to_f32_raster()).collect();
            let n = (0..frames).map(|_| NormalFrame::from_fn(8, 8, |_, _| [0.0, 0.0, -1.0]).to_raster()).collect();
            let c = (0..frames).map(|t| rgb(8, 8, t as u8)).collect();
            p.put_stream(&format!("{id}_depth_metric"), id, StreamKind::DepthMetricM, d).unwrap();
            p.put_stream(&format!("{id}_normal"), id, StreamKind::NormalCam, n).unwrap();
            p.put_stream(&format!("{id}_rgb"), id, StreamKind::Rgb, c).unwrap();
        }
        p
    }

    fn masks_dir(entries: &[(MaskEntry, Mask)]) -> (tempfile::TempDir, MasksFile) {
        let dir = tempfile::tempdir().unwrap();
        for (e, m) in entries {
            write_sidecar(dir.path(), &e.mask, m.data()).unwrap();
        }
        let file =
            MasksFile { base: dir.path().to_path_buf(), entries: entries.iter().map(|(e, _)| e.clone()).collect() };
        (dir, file)
    }

    fn entry(id: &str, bbox: [usize; 4], frame: usize) -> MaskEntry {
        MaskEntry {
            object_id: id.into(),
            description: format!("a {id}"),
            bbox,
            mask: format!("streams/{id}_{frame}_mask.raw"),
            source_frame: frame,
            view_id: None,
        }
    }

    #[test]
    fn triplet_with_two_objects() {
        let pack = tiny_pack(5);
        let sq = |x0: usize| Mask::from_fn(8, 8, move |y, x| (1..3).contains(&y) && (x0..x0 + 2).contains(&x));
        let (_dir, masks) = masks_dir(&[
            (entry("cup", [1, 1, 2, 2], 0), sq(1)),
            (entry("box", [5, 1, 2, 2], 0), sq(5)),
            (entry("cup", [1, 1, 2, 2], 4), sq(1)),
        ]);
        let mut fills = BTreeMap::new();
        fills.insert("head".to_string(), rgb(8, 8, 99));
        let inputs = ConditionInputs { masks: Some(masks), fills, ..Default::default() };
        let b = build_triplet(&pack, KeyframePolicy::Temporal, &inputs).unwrap();
        let t = &b.triplet;
        assert_eq!(t.appearance.objects.len(), 2);
        assert_eq!(t.appearance.objects[0].source_frame, 0);
        assert_eq!(t.appearance.backgrounds.len(), 2);
        assert_eq!(t.appearance.backgrounds[0].source_frame, 4);
        assert!(t.appearance.backgrounds.iter().any(|b| b.view_id == "head" && b.inpainted));
        assert!(t.appearance.backgrounds.iter().any(|b| b.view_id == "left" && !b.inpainted));
        let head_bg = &b.sidecars.iter().find(|(p, _)| p == "streams/head_background.raw").unwrap().1;
        assert_eq!(head_bg[8 + 1], 99);
        assert_eq!(head_bg[0], 4);
        validate_triplet_refs(t, &pack).unwrap();
        validate_triplet_refs(t, &pack).unwrap();

        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let back = read_triplet(dir.path()).unwrap();
        assert_eq!(&back, t);
        validate_triplet(&back, &pack, dir.path()).unwrap();
    }

    #[test]
    fn embeddings_are_copied_and_required_per_object() {
        let pack = tiny_pack(2);
        let sq = |x0: usize| Mask::from_fn(8, 8, move |y, x| y == 1 && x == x0);
        let (_dir, masks) =
            masks_dir(&[(entry("cup", [1, 1, 1, 1], 0), sq(1)), (entry("box", [5, 1, 1, 1], 0), sq(5))]);
        let mut vectors = BTreeMap::new();
        vectors.insert("cup".to_string(), vec![1.0f32, 2.0]);
        let set = EmbeddingSet { refs: BTreeMap::new(), vectors };
        let mut inputs = ConditionInputs { masks: Some(masks), embeddings: Some(set), ..Default::default() };
        match build_triplet(&pack, KeyframePolicy::Temporal, &inputs) {
            Err(Error::Validation { object_ids, .. }) => assert_eq!(object_ids, vec!["box".to_string()]),
            other => panic!("{other:?}"),
        }
        inputs.embeddings.as_mut().unwrap().vectors.insert("box".into(), vec![0.5]);
        let b = build_triplet(&pack, KeyframePolicy::Temporal, &inputs).unwrap();
        let cup = b.triplet.appearance.objects.iter().find(|o| o.object_id == "cup").unwrap();
        assert_eq!(cup.embedding, Some(EmbeddingRef { dim: 2, data: "streams/cup_emb.raw".into() }));
        let bytes = &b.sidecars.iter().find(|(p, _)| p == "streams/cup_emb.raw").unwrap().1;
        assert_eq!(bytes, &[1.0f32.to_le_bytes(), 2.0f32.to_le_bytes()].concat());
    }

    #[test]
    fn mask_outside_bbox_names_object() {
        let pack = tiny_pack(3);
        let m = Mask::from_fn(8, 8, |y, x| y == 7 && x == 7);
        let ok = Mask::from_fn(8, 8, |y, x| y == 0 && x == 0);
        let (_dir, masks) = masks_dir(&[(entry("cup", [0, 0, 2, 2], 0), m), (entry("plate", [0, 0, 2, 2], 0), ok)]);
        let inputs = ConditionInputs { masks: Some(masks), ..Default::default() };
        match build_triplet(&pack, KeyframePolicy::Temporal, &inputs) {
            Err(Error::Validation { object_ids, .. }) => assert_eq!(object_ids, vec!["cup".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_geometry_is_format_error() {
        let mut pack = tiny_pack(2);
        pack.manifest.streams.retain(|s| s.name != "left_normal");
        pack.streams.remove("left_normal");
        let r = build_triplet(&pack, KeyframePolicy::Temporal, &ConditionInputs::default());
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn content_policy_uses_areas() {
        let pack = tiny_pack(4);
        let inputs = ConditionInputs { areas: Some(vec![3, 9, 9, 0]), ..Default::default() };
        let b = build_triplet(&pack, KeyframePolicy::Content, &inputs).unwrap();
        assert_eq!((b.triplet.object_frame, b.triplet.background_frame), (1, 3));
        assert!(build_triplet(&pack, KeyframePolicy::Content, &ConditionInputs::default()).is_err());
    }

    #[test]
    fn embeddings_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = BTreeMap::new();
        v.insert("cup".to_string(), vec![0.5f32, -1.0, 2.0]);
        let path = write_embeddings_file(dir.path(), "embeddings.json", "", &v).unwrap();
        let set = read_embeddings_file(&path).unwrap();
        assert_eq!(set.vectors, v);
        assert_eq!(set.refs["cup"].dim, 3);
        std::fs::write(dir.path().join("streams/cup_emb.raw"), [0u8; 8]).unwrap();
        assert!(matches!(read_embeddings_file(&path), Err(Error::Format(_))));
    }
}
