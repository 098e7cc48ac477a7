//! Multi-view and condition layouts.
//!
//! Synchronized views are joined side by side along the width axis, then
//! rearranged by a lossless [`PatchEncoder`] into latent grids whose channel
//! axis is partitioned into tagged blocks (noise, depth, normal, ...). The
//! patch encoder has the shape contract of a learned VAE encoder: spatial
//! size divided by the patch size, channels multiplied by its square.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{Pack, PackManifest, StreamKind, ViewRole, MULTIVIEW_ID};
use crate::raster::{DType, Raster, RasterData};

pub const DEFAULT_PATCH_SIZE: usize = 8;
pub const SIDECAR_FILE: &str = "channels.json";

/// One view's frames inside a [`MultiViewClip`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClipView {
    pub view_id: String,
    pub role: ViewRole,
    pub frames: Vec<Raster>,
}

/// Synchronized views sharing height, frame count, channel count and dtype.
/// Views with a left_wrist/head/right_wrist role must appear in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewClip {
    views: Vec<ClipView>,
}

impl MultiViewClip {
    pub fn new(views: Vec<ClipView>) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::InvalidInput("a clip needs at least one view".into()))?;
        let head =
            first.frames.first().ok_or_else(|| Error::InvalidInput(format!("view {} has no frames", first.view_id)))?;
        let (h, c, dtype, n) = (head.height(), head.channels(), head.dtype(), first.frames.len());
        for v in &views {
            if v.frames.len() != n {
                return Err(Error::InvalidInput(format!(
                    "view {} has {} frames, expected {n}",
                    v.view_id,
                    v.frames.len()
                )));
            }
            let w = v.frames[0].width();
            for f in &v.frames {
                if f.height() != h {
                    return Err(Error::InvalidInput(format!(
                        "view {} has height {}, expected {h}",
                        v.view_id,
                        f.height()
                    )));
                }
                if f.width() != w || f.channels() != c || f.dtype() != dtype {
                    return Err(Error::InvalidInput(format!("view {} mixes frame shapes or types", v.view_id)));
                }
            }
        }
        let ranks: Vec<usize> = views.iter().filter_map(|v| v.role.rank()).collect();
        if ranks.windows(2).any(|w| w[0] >= w[1]) {
            let order: Vec<_> = views.iter().map(|v| format!("{:?}", v.role)).collect();
            return Err(Error::InvalidInput(format!(
                "views must be ordered left_wrist, head, right_wrist; got {}",
                order.join(", ")
            )));
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[ClipView] {
        &self.views
    }

    pub fn frame_count(&self) -> usize {
        self.views[0].frames.len()
    }

    pub fn height(&self) -> usize {
        self.views[0].frames[0].height()
    }

    /// The `kind` stream of every view in the pack, in role order (views
    /// without a fixed role keep their manifest order, after ranked ones).
    pub fn from_pack(pack: &Pack, kind: StreamKind) -> Result<Self> {
        let mut views: Vec<_> = pack.manifest.views.iter().collect();
        views.sort_by_key(|v| v.role.rank().unwrap_or(usize::MAX));
        let views = views
            .into_iter()
            .map(|v| {
                let (_, frames) = pack.find(&v.view_id, kind)?;
                Ok(ClipView { view_id: v.view_id.clone(), role: v.role, frames: frames.to_vec() })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(views)
    }
}

/// Where one view sits inside concatenated frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpan {
    pub view_id: String,
    pub role: ViewRole,
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatClip {
    pub frames: Vec<Raster>,
    pub spans: Vec<ViewSpan>,
}

impl ConcatClip {
    pub fn offsets(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.offset).collect()
    }

    /// Inverse of [`concat_views`], restoring view ids and roles.
    pub fn split(&self) -> Result<MultiViewClip> {
        let per_view = split_views(&self.frames, &self.offsets())?;
        MultiViewClip::new(
            self.spans
                .iter()
                .zip(per_view)
                .map(|(s, frames)| ClipView { view_id: s.view_id.clone(), role: s.role, frames })
                .collect(),
        )
    }
}

/// Copies columns `[x0, x0 + w)` of every row of `src` into `dst` at column
/// `dx`. Both buffers are planar with `rows = channels * height`.
fn copy_columns<T: Copy>(src: &[T], src_w: usize, x0: usize, dst: &mut [T], dst_w: usize, dx: usize, w: usize) {
    for (s, d) in src.chunks_exact(src_w).zip(dst.chunks_exact_mut(dst_w)) {
        d[dx..dx + w].copy_from_slice(&s[x0..x0 + w]);
    }
}

fn with_columns(src: &Raster, x0: usize, dst: &mut RasterData, dst_w: usize, dx: usize, w: usize) {
    let sw = src.width();
    match (src.data(), dst) {
        (RasterData::F32(s), RasterData::F32(d)) => copy_columns(s, sw, x0, d, dst_w, dx, w),
        (RasterData::U16(s), RasterData::U16(d)) => copy_columns(s, sw, x0, d, dst_w, dx, w),
        (RasterData::U8(s), RasterData::U8(d)) => copy_columns(s, sw, x0, d, dst_w, dx, w),
        _ => unreachable!("callers allocate dst with the source dtype"),
    }
}

fn zeros(dtype: DType, len: usize) -> RasterData {
    match dtype {
        DType::Float32 => RasterData::F32(vec![0.0; len]),
        DType::Uint16 => RasterData::U16(vec![0; len]),
        DType::Uint8 => RasterData::U8(vec![0; len]),
    }
}

/// Joins every frame's views left to right in clip order.
pub fn concat_views(clip: &MultiViewClip) -> Result<ConcatClip> {
    let mut spans = Vec::with_capacity(clip.views.len());
    let mut total = 0;
    for v in &clip.views {
        let w = v.frames[0].width();
        spans.push(ViewSpan { view_id: v.view_id.clone(), role: v.role, offset: total, width: w });
        total += w;
    }
    let first = &clip.views[0].frames[0];
    let (h, c, dtype) = (first.height(), first.channels(), first.dtype());
    let frames = (0..clip.frame_count())
        .into_par_iter()
        .map(|t| {
            let mut data = zeros(dtype, c * h * total);
            for (v, span) in clip.views.iter().zip(&spans) {
                with_columns(&v.frames[t], 0, &mut data, total, span.offset, span.width);
            }
            Raster::new(h, total, c, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConcatClip { frames, spans })
}

/// Cuts concatenated frames at `offsets` (first 0, strictly increasing, all
/// inside the frame). Returns frames per view.
pub fn split_views(frames: &[Raster], offsets: &[usize]) -> Result<Vec<Vec<Raster>>> {
    let first = frames.first().ok_or_else(|| Error::InvalidInput("no frames to split".into()))?;
    let width = first.width();
    let ok = offsets.first() == Some(&0)
        && offsets.windows(2).all(|w| w[0] < w[1])
        && offsets.last().is_some_and(|&o| o < width);
    if !ok {
        return Err(Error::InvalidInput(format!("offsets {offsets:?} are not a valid split of width {width}")));
    }
    if frames.iter().any(|f| f.shape() != first.shape() || f.dtype() != first.dtype()) {
        return Err(Error::InvalidInput("frames differ in shape or type".into()));
    }
    let bounds: Vec<(usize, usize)> =
        offsets.iter().enumerate().map(|(i, &o)| (o, offsets.get(i + 1).copied().unwrap_or(width) - o)).collect();
    let (h, c) = (first.height(), first.channels());
    let cut = |f: &Raster, (x0, w): (usize, usize)| {
        let mut data = zeros(f.dtype(), c * h * w);
        with_columns(f, x0, &mut data, w, 0, w);
        Raster::new(h, w, c, data)
    };
    bounds.iter().map(|&b| frames.par_iter().map(|f| cut(f, b)).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    Noise,
    RgbLatent,
    DepthLatent,
    NormalLatent,
    BackgroundLatent,
}

/// Channels `[start, start + len)` of a latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub tag: BlockTag,
    pub start: usize,
    pub len: usize,
}

/// `frames x channels x height x width` float32 latents, frame-major then
/// channel-major. `blocks` partition the channel axis, one block per tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    blocks: Vec<ChannelBlock>,
}

impl LatentGrid {
    pub fn new(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        blocks: Vec<ChannelBlock>,
    ) -> Result<Self> {
        if frames == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput("latent grid dimensions must be positive".into()));
        }
        if data.len() != frames * channels * height * width {
            return Err(Error::InvalidInput(format!(
                "latent buffer has {} values, expected {}",
                data.len(),
                frames * channels * height * width
            )));
        }
        let mut next = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.start != next || b.len == 0 {
                return Err(Error::InvalidInput(format!(
                    "channel blocks must tile the channel axis in order; block {i} is {b:?}"
                )));
            }
            if blocks[..i].iter().any(|p| p.tag == b.tag) {
                return Err(Error::InvalidInput(format!("tag {:?} appears twice", b.tag)));
            }
            next += b.len;
        }
        if next != channels {
            return Err(Error::InvalidInput(format!("channel blocks cover {next} of {channels} channels")));
        }
        Ok(Self { frames, channels, height, width, data, blocks })
    }

    /// A grid consisting of a single block.
    pub fn tagged(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        tag: BlockTag,
    ) -> Result<Self> {
        let block = ChannelBlock { tag, start: 0, len: channels };
        Self::new(frames, channels, height, width, data, vec![block])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn blocks(&self) -> &[ChannelBlock] {
        &self.blocks
    }

    fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// The block carrying `tag`, as its own single-block grid.
    pub fn block(&self, tag: BlockTag) -> Result<LatentGrid> {
        let b = self
            .blocks
            .iter()
            .find(|b| b.tag == tag)
            .ok_or_else(|| Error::InvalidInput(format!("no {tag:?} block in latent grid")))?;
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.frames * b.len * plane);
        for t in 0..self.frames {
            let f = self.frame(t);
            data.extend_from_slice(&f[b.start * plane..(b.start + b.len) * plane]);
        }
        Self::tagged(self.frames, b.len, self.height, self.width, data, tag)
    }

    /// One frame as a `[channels, height, width]` float32 raster.
    pub fn frame_raster(&self, t: usize) -> Result<Raster> {
        Raster::from_f32(self.height, self.width, self.channels, self.frame(t).to_vec())
    }

    /// Rebuilds a grid from per-frame rasters and a block layout.
    pub fn from_rasters(frames: &[Raster], blocks: Vec<ChannelBlock>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::InvalidInput("no latent frames".into()))?;
        let mut data = Vec::with_capacity(frames.len() * first.plane_len() * first.channels());
        for f in frames {
            if f.shape() != first.shape() {
                return Err(Error::InvalidInput("latent frames differ in shape".into()));
            }
            let v = f.as_f32().ok_or_else(|| Error::InvalidInput("latent frames must be float32".into()))?;
            data.extend_from_slice(v);
        }
        let [c, h, w] = first.shape();
        Self::new(frames.len(), c, h, w, data, blocks)
    }
}

fn to_f32(r: &Raster) -> Vec<f32> {
    match r.data() {
        RasterData::F32(v) => v.clone(),
        RasterData::U16(v) => v.iter().map(|&x| x as f32).collect(),
        RasterData::U8(v) => v.iter().map(|&x| x as f32).collect(),
    }
}

/// Converts back to an integer dtype; every value must be an in-range integer.
fn from_f32(h: usize, w: usize, c: usize, values: Vec<f32>, dtype: DType) -> Result<Raster> {
    fn cast<T: TryFrom<u32>>(values: &[f32], max: f32) -> Result<Vec<T>> {
        values
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=max).contains(&v) {
                    T::try_from(v as u32).map_err(|_| unreachable!())
                } else {
                    Err(Error::InvalidInput(format!("{v} is not representable in the target type")))
                }
            })
            .collect()
    }
    match dtype {
        DType::Float32 => Raster::from_f32(h, w, c, values),
        DType::Uint16 => Raster::from_u16(h, w, c, cast(&values, u16::MAX as f32)?),
        DType::Uint8 => Raster::from_u8(h, w, c, cast(&values, u8::MAX as f32)?),
    }
}

/// Lossless space-to-channel rearrangement. Latent channel
/// `c * p^2 + dy * p + dx` at `(ly, lx)` holds pixel channel `c` at
/// `(ly * p + dy, lx * p + dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEncoder {
    pub patch_size: usize,
}

impl Default for PatchEncoder {
    fn default() -> Self {
        Self { patch_size: DEFAULT_PATCH_SIZE }
    }
}

impl PatchEncoder {
    pub fn new(patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidInput("patch size must be positive".into()));
        }
        Ok(Self { patch_size })
    }

    fn encode_frame(&self, f: &Raster) -> Vec<f32> {
        let p = self.patch_size;
        let (h, w, c) = (f.height(), f.width(), f.channels());
        let (lh, lw) = (h / p, w / p);
        let src = to_f32(f);
        let mut out = vec![0.0f32; c * p * p * lh * lw];
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let lc = ch * p * p + dy * p + dx;
                    let dst = &mut out[lc * lh * lw..(lc + 1) * lh * lw];
                    for ly in 0..lh {
                        let row = &src[ch * h * w + (ly * p + dy) * w..];
                        for lx in 0..lw {
                            dst[ly * lw + lx] = row[lx * p + dx];
                        }
                    }
                }
            }
        }
        out
    }

    /// Height and width must be multiples of the patch size. Integer rasters
    /// are widened to float32, which is exact for u8 and u16.
    pub fn encode(&self, frames: &[Raster], tag: BlockTag) -> Result<LatentGrid> {
        let first = frames.first().ok_or_else(|| Error::InvalidInput("no frames to encode".into()))?;
        let p = self.patch_size;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        if h % p != 0 || w % p != 0 {
            return Err(Error::InvalidInput(format!("{h}x{w} frames are not divisible by patch size {p}")));
        }
        if frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::InvalidInput("frames differ in shape".into()));
        }
        let per_frame: Vec<Vec<f32>> = frames.par_iter().map(|f| self.encode_frame(f)).collect();
        LatentGrid::tagged(frames.len(), c * p * p, h / p, w / p, per_frame.concat(), tag)
    }

    /// Inverse of [`PatchEncoder::encode`], producing rasters of `dtype`.
    pub fn decode(&self, grid: &LatentGrid, dtype: DType) -> Result<Vec<Raster>> {
        let p = self.patch_size;
        if !grid.channels.is_multiple_of(p * p) {
            return Err(Error::InvalidInput(format!(
                "{} latent channels are not a multiple of {}",
                grid.channels,
                p * p
            )));
        }
        let c = grid.channels / (p * p);
        let (lh, lw) = (grid.height, grid.width);
        let (h, w) = (lh * p, lw * p);
        (0..grid.frames)
            .into_par_iter()
            .map(|t| {
                let src = grid.frame(t);
                let mut out = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let lc = ch * p * p + dy * p + dx;
                            let plane = &src[lc * lh * lw..(lc + 1) * lh * lw];
                            for ly in 0..lh {
                                let row = &mut out[ch * h * w + (ly * p + dy) * w..];
                                for lx in 0..lw {
                                    row[lx * p + dx] = plane[ly * lw + lx];
                                }
                            }
                        }
                    }
                }
                from_f32(h, w, c, out, dtype)
            })
            .collect()
    }
}

/// Channel concatenation `[noise, depth, normal, background]`. Each input
/// must be a single block with the matching tag. A one-frame background is
/// repeated across all frames.
pub fn assemble_condition_latent(
    noise: &LatentGrid,
    depth: &LatentGrid,
    normal: &LatentGrid,
    background: &LatentGrid,
) -> Result<LatentGrid> {
    let parts = [
        (noise, BlockTag::Noise),
        (depth, BlockTag::DepthLatent),
        (normal, BlockTag::NormalLatent),
        (background, BlockTag::BackgroundLatent),
    ];
    for (g, tag) in parts {
        if g.blocks.len() != 1 || g.blocks[0].tag != tag {
            return Err(Error::InvalidInput(format!("expected a single {tag:?} block")));
        }
        if (g.height, g.width) != (noise.height, noise.width) {
            return Err(Error::InvalidInput(format!(
                "{tag:?} latent is {}x{}, noise latent is {}x{}",
                g.height, g.width, noise.height, noise.width
            )));
        }
    }
    let frames = noise.frames;
    if depth.frames != frames || normal.frames != frames {
        return Err(Error::InvalidInput("geometry latents must match the noise frame count".into()));
    }
    if background.frames != 1 && background.frames != frames {
        return Err(Error::InvalidInput(format!(
            "background latent has {} frames, expected 1 or {frames}",
            background.frames
        )));
    }
    let channels: usize = parts.iter().map(|(g, _)| g.channels).sum();
    let mut data = Vec::with_capacity(frames * channels * noise.height * noise.width);
    let mut blocks = Vec::new();
    for t in 0..frames {
        for (g, _) in parts {
            data.extend_from_slice(g.frame(if g.frames == 1 { 0 } else { t }));
        }
    }
    let mut start = 0;
    for (g, tag) in parts {
        blocks.push(ChannelBlock { tag, start, len: g.channels });
        start += g.channels;
    }
    LatentGrid::new(frames, channels, noise.height, noise.width, data, blocks)
}

/// Per latent stream bookkeeping needed to undo [`pack_latents`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStreamInfo {
    pub name: String,
    pub source_kind: StreamKind,
    pub source_dtype: DType,
    pub source_channels: usize,
    pub blocks: Vec<ChannelBlock>,
}

/// Contents of `channels.json` next to a latent pack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSidecar {
    pub patch_size: usize,
    pub views: Vec<ViewSpan>,
    pub streams: Vec<LatentStreamInfo>,
    pub source_manifest: PackManifest,
}

fn tag_for(kind: StreamKind) -> BlockTag {
    match kind {
        StreamKind::Rgb => BlockTag::RgbLatent,
        StreamKind::NormalCam => BlockTag::NormalLatent,
        _ => BlockTag::DepthLatent,
    }
}

const PACKABLE: [StreamKind; 5] = [
    StreamKind::Rgb,
    StreamKind::DepthSensorMm,
    StreamKind::DepthPredRel,
    StreamKind::DepthMetricM,
    StreamKind::NormalCam,
];

/// Concatenates and encodes every stream kind of a pack into one latent
/// stream per kind. Each kind must be present exactly once for every view.
pub fn pack_latents(pack: &Pack, enc: PatchEncoder) -> Result<(Pack, LayoutSidecar)> {
    let m = &pack.manifest;
    if m.streams.iter().any(|s| s.kind == StreamKind::Latent) {
        return Err(Error::InvalidInput("pack already holds latent streams".into()));
    }
    let mut out = Pack::new(m.fps, m.frame_count, m.views.clone());
    let mut infos = Vec::new();
    let mut spans = None;
    for kind in PACKABLE {
        let count = m.streams.iter().filter(|s| s.kind == kind).count();
        if count == 0 {
            continue;
        }
        if count != m.views.len() || m.views.iter().any(|v| m.find(&v.view_id, kind).is_none()) {
            return Err(Error::InvalidInput(format!("{kind:?} streams must appear exactly once per view")));
        }
        let clip = MultiViewClip::from_pack(pack, kind)?;
        let joined = concat_views(&clip)?;
        let grid = enc.encode(&joined.frames, tag_for(kind))?;
        let name = format!("latent_{}", kind.suffix());
        let frames = (0..grid.frames()).map(|t| grid.frame_raster(t)).collect::<Result<Vec<_>>>()?;
        out.put_stream(&name, MULTIVIEW_ID, StreamKind::Latent, frames)?;
        let first = &clip.views()[0].frames[0];
        infos.push(LatentStreamInfo {
            name,
            source_kind: kind,
            source_dtype: first.dtype(),
            source_channels: first.channels(),
            blocks: grid.blocks().to_vec(),
        });
        spans.get_or_insert(joined.spans);
    }
    let views = spans.ok_or_else(|| Error::InvalidInput("pack has no streams to encode".into()))?;
    let sidecar = LayoutSidecar { patch_size: enc.patch_size, views, streams: infos, source_manifest: m.clone() };
    Ok((out, sidecar))
}

/// Restores the original pack from a latent pack and its sidecar.
pub fn unpack_latents(latent: &Pack, sidecar: &LayoutSidecar) -> Result<Pack> {
    let enc = PatchEncoder::new(sidecar.patch_size)?;
    let src = &sidecar.source_manifest;
    let mut decoded = std::collections::BTreeMap::new();
    for info in &sidecar.streams {
        let frames = latent
            .frames(&info.name)
            .ok_or_else(|| Error::Format(format!("latent pack lacks stream {}", info.name)))?;
        let grid = LatentGrid::from_rasters(frames, info.blocks.clone())?;
        let joined = ConcatClip { frames: enc.decode(&grid, info.source_dtype)?, spans: sidecar.views.clone() };
        for view in joined.split()?.views() {
            decoded.insert((view.view_id.clone(), info.source_kind), view.frames.clone());
        }
    }
    let mut out = Pack::new(src.fps, src.frame_count, src.views.clone());
    for desc in &src.streams {
        let frames = decoded
            .remove(&(desc.view_id.clone(), desc.kind))
            .ok_or_else(|| Error::Format(format!("no latent data for stream {}", desc.name)))?;
        out.put_stream(&desc.name, &desc.view_id, desc.kind, frames)?;
    }
    if out.manifest != *src {
        return Err(Error::Format("restored manifest differs from the recorded one".into()));
    }
    Ok(out)
}
