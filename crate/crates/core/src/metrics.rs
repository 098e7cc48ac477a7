//! Evaluation metrics: scale-invariant depth errors, normal angular errors,
//! matched-pixel counts between views, and embedding cosine similarity.
//! Every metric is computed per frame and averaged arithmetically.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_align::{apply_affine, percentile, scale_fit};
use crate::error::{Error, Result};
use crate::geometry::NormalFrame;
use crate::pack::{Pack, StreamKind};
use crate::raster::{DepthFrame, Mask, Raster};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
/// Allowed deviation from unit length before a normal is rejected.
pub const NORMAL_LENGTH_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthAlignment {
    /// Least-squares scale and shift from prediction to ground truth.
    #[default]
    ScaleShift,
    /// Prediction is compared as given.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthErrors {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
}

/// RMSE, mean |e|/gt and mean e^2/gt of `pred - gt`.
pub fn depth_errors(pred: &[f64], gt: &[f64]) -> Result<DepthErrors> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidInput("depth errors need equal nonempty inputs".into()));
    }
    if gt.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidInput("ground-truth depth must be positive".into()));
    }
    let n = pred.len() as f64;
    let (mut sq, mut abs_rel, mut sq_rel) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let e = p - g;
        sq += e * e;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
    }
    Ok(DepthErrors { rmse: (sq / n).sqrt(), abs_rel: abs_rel / n, sq_rel: sq_rel / n })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthFrameMetrics {
    pub frame: usize,
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    /// `(s, b)` applied to the prediction.
    pub alignment: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedFrame {
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthMetricReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub per_frame: Vec<DepthFrameMetrics>,
    pub excluded: Vec<ExcludedFrame>,
}

/// Pixels where the depth is positive.
pub fn positive_mask(d: &DepthFrame) -> Mask {
    Mask::from_fn(d.height(), d.width(), |y, x| d.get(y, x) > 0.0)
}

fn depth_frame(
    pred: &DepthFrame,
    gt: &DepthFrame,
    mask: &Mask,
    how: DepthAlignment,
) -> Result<(DepthErrors, (f64, f64))> {
    let (s, b) = match how {
        DepthAlignment::ScaleShift => scale_fit(pred, gt, mask)?,
        DepthAlignment::None => (1.0, 0.0),
    };
    let aligned = apply_affine(pred, s, b);
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for i in (0..mask.data().len()).filter(|&i| mask.is_set(i)) {
        p.push(aligned.values()[i]);
        g.push(gt.values()[i]);
    }
    if g.is_empty() {
        return Err(Error::insufficient("empty mask"));
    }
    Ok((depth_errors(&p, &g)?, (s, b)))
}

/// Per-frame depth errors over `masks`, after optional per-frame alignment.
/// Frames whose fit is degenerate or whose mask is empty are excluded and
/// listed; the averages cover the remaining frames.
pub fn depth_metrics(
    pred: &[DepthFrame],
    gt: &[DepthFrame],
    masks: &[Mask],
    alignment: DepthAlignment,
) -> Result<DepthMetricReport> {
    if pred.len() != gt.len() || gt.len() != masks.len() || gt.is_empty() {
        return Err(Error::InvalidInput("pred, gt and masks must have equal nonzero frame counts".into()));
    }
    for (t, ((p, g), m)) in pred.iter().zip(gt).zip(masks).enumerate() {
        if !p.same_dims(g) || (m.height(), m.width()) != (g.height(), g.width()) {
            return Err(Error::InvalidInput(format!("frame {t}: dimension mismatch")));
        }
        if (0..m.data().len()).any(|i| m.is_set(i) && !(g.values()[i] > 0.0)) {
            return Err(Error::InvalidInput(format!("frame {t}: ground truth not positive on mask")));
        }
    }
    let results: Vec<_> =
        (0..gt.len()).into_par_iter().map(|t| depth_frame(&pred[t], &gt[t], &masks[t], alignment)).collect();
    let mut per_frame = Vec::new();
    let mut excluded = Vec::new();
    for (frame, r) in results.into_iter().enumerate() {
        match r {
            Ok((e, alignment)) => per_frame.push(DepthFrameMetrics {
                frame,
                rmse: e.rmse,
                abs_rel: e.abs_rel,
                sq_rel: e.sq_rel,
                alignment,
            }),
            Err(e @ (Error::DegenerateInput(_) | Error::InsufficientData { .. })) => {
                excluded.push(ExcludedFrame { frame, reason: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    if per_frame.is_empty() {
        return Err(Error::insufficient("every frame was excluded from depth metrics"));
    }
    let n = per_frame.len() as f64;
    Ok(DepthMetricReport {
        rmse: per_frame.iter().map(|f| f.rmse).sum::<f64>() / n,
        abs_rel: per_frame.iter().map(|f| f.abs_rel).sum::<f64>() / n,
        sq_rel: per_frame.iter().map(|f| f.sq_rel).sum::<f64>() / n,
        per_frame,
        excluded,
    })
}

/// Angle between two vectors in degrees. Uses `atan2(|p x g|, p . g)`,
/// which equals `acos` of the normalized dot product but stays accurate
/// near 0 and 180 degrees.
pub fn angle_deg(p: [f64; 3], g: [f64; 3]) -> f64 {
    let c = [p[1] * g[2] - p[2] * g[1], p[2] * g[0] - p[0] * g[2], p[0] * g[1] - p[1] * g[0]];
    let s = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    let d = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
    s.atan2(d).to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalFrameMetrics {
    pub frame: usize,
    pub mean_err_deg: f64,
    pub median_err_deg: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalMetricReport {
    pub mean_err_deg: f64,
    pub median_err_deg: f64,
    pub per_frame: Vec<NormalFrameMetrics>,
}

fn unit(n: [f32; 3], what: &str, t: usize) -> Result<[f64; 3]> {
    let v = n.map(f64::from);
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if (len - 1.0).abs() > NORMAL_LENGTH_TOLERANCE {
        return Err(Error::InvalidInput(format!("frame {t}: {what} normal {n:?} has length {len}")));
    }
    Ok(v.map(|c| c / len))
}

/// Mean and nearest-rank median angular error over each frame's mask,
/// averaged over frames. With `flip` the ground truth is negated first.
pub fn normal_metrics(
    pred: &[NormalFrame],
    gt: &[NormalFrame],
    masks: &[Mask],
    flip: bool,
) -> Result<NormalMetricReport> {
    if pred.len() != gt.len() || gt.len() != masks.len() || gt.is_empty() {
        return Err(Error::InvalidInput("pred, gt and masks must have equal nonzero frame counts".into()));
    }
    let per_frame = (0..gt.len())
        .into_par_iter()
        .map(|t| {
            let (p, g, m) = (&pred[t], &gt[t], &masks[t]);
            if (p.height(), p.width()) != (g.height(), g.width()) || (m.height(), m.width()) != (g.height(), g.width())
            {
                return Err(Error::InvalidInput(format!("frame {t}: dimension mismatch")));
            }
            let mut angles = Vec::with_capacity(m.count());
            for i in (0..m.data().len()).filter(|&i| m.is_set(i)) {
                let pv = unit(p.data()[i], "predicted", t)?;
                let mut gv = unit(g.data()[i], "ground-truth", t)?;
                if flip {
                    gv = gv.map(|c| -c);
                }
                angles.push(angle_deg(pv, gv));
            }
            if angles.is_empty() {
                return Err(Error::insufficient(format!("frame {t}: empty normal mask")));
            }
            let mean = angles.iter().sum::<f64>() / angles.len() as f64;
            let pixels = angles.len();
            Ok(NormalFrameMetrics { frame: t, mean_err_deg: mean, median_err_deg: percentile(&angles, 0.5)?, pixels })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    Ok(NormalMetricReport {
        mean_err_deg: per_frame.iter().map(|f| f.mean_err_deg).sum::<f64>() / n,
        median_err_deg: per_frame.iter().map(|f| f.median_err_deg).sum::<f64>() / n,
        per_frame,
    })
}

/// One correspondence between two images of a frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Match {
    pub frame: usize,
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
    pub score: f64,
}

/// Parses `frame_idx u1 v1 u2 v2 score` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_matches(text: &str) -> Result<Vec<Match>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Format(format!("matches line {}: expected `frame u1 v1 u2 v2 score`", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let frame = f[0].parse().map_err(|_| bad())?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        out.push(Match { frame, u1: v[0], v1: v[1], u2: v[2], v2: v[3], score: v[4] });
    }
    Ok(out)
}

pub fn format_matches(matches: &[Match]) -> String {
    let mut s = String::from("# frame_idx u1 v1 u2 v2 score\n");
    for m in matches {
        s.push_str(&format!("{} {} {} {} {} {}\n", m.frame, m.u1, m.v1, m.u2, m.v2, m.score));
    }
    s
}

pub fn read_matches(path: &Path) -> Result<Vec<Match>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matches(&text)
}

/// Known mapping from image 1 to image 2, used to reject wrong matches.
pub trait Correspondence {
    fn map(&self, frame: usize, u: f64, v: f64) -> Option<[f64; 2]>;
}

/// Planar homography in pixel coordinates, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Correspondence for Homography {
    fn map(&self, _: usize, u: f64, v: f64) -> Option<[f64; 2]> {
        let h = &self.0;
        let w = h[2][0] * u + h[2][1] * v + h[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some([(h[0][0] * u + h[0][1] * v + h[0][2]) / w, (h[1][0] * u + h[1][1] * v + h[1][2]) / w])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameCount {
    pub frame: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub matched_pixels: Vec<FrameCount>,
    pub mean_matched: f64,
}

/// Counts matches scoring at least `score_threshold` and, when a reference
/// mapping is given, landing within `reproj_px` of where it predicts.
/// Averages over the frame indices present in `matches`.
pub fn count_matches(
    matches: &[Match],
    score_threshold: f64,
    reference: Option<(&dyn Correspondence, f64)>,
) -> MatchReport {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for m in matches {
        let entry = counts.entry(m.frame).or_insert(0);
        if m.score < score_threshold {
            continue;
        }
        let ok = match reference {
            None => true,
            Some((map, tol)) => map.map(m.frame, m.u1, m.v1).is_some_and(|[u, v]| (u - m.u2).hypot(v - m.v2) <= tol),
        };
        if ok {
            *entry += 1;
        }
    }
    let matched_pixels: Vec<FrameCount> =
        counts.into_iter().map(|(frame, count)| FrameCount { frame, count }).collect();
    let mean_matched = if matched_pixels.is_empty() {
        0.0
    } else {
        matched_pixels.iter().map(|c| c.count as f64).sum::<f64>() / matched_pixels.len() as f64
    };
    MatchReport { matched_pixels, mean_matched }
}

/// Single-channel f64 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Gray {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidInput("gray image size mismatch".into()));
        }
        Ok(Self { height, width, values })
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Rec. 601 luma of an RGB raster; a one-channel raster is taken as is.
pub fn luma(r: &Raster) -> Result<Gray> {
    let (h, w) = (r.height(), r.width());
    let values = match r.channels() {
        1 => (0..h * w).map(|i| r.get_f64(0, i / w, i % w)).collect(),
        3 => (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.299 * r.get_f64(0, y, x) + 0.587 * r.get_f64(1, y, x) + 0.114 * r.get_f64(2, y, x)
            })
            .collect(),
        c => return Err(Error::InvalidInput(format!("cannot take luma of {c} channels"))),
    };
    Gray::new(h, w, values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatchConfig {
    pub block: usize,
    pub search: usize,
    pub zncc_min: f64,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self { block: 16, search: 4, zncc_min: 0.9 }
    }
}

/// Zero-mean normalized cross-correlation of two `n x n` blocks, or None
/// when either block is flat.
fn zncc(a: &Gray, (ay, ax): (usize, usize), b: &Gray, (by, bx): (usize, usize), n: usize) -> Option<f64> {
    let count = (n * n) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for dy in 0..n {
        for dx in 0..n {
            sa += a.at(ay + dy, ax + dx);
            sb += b.at(by + dy, bx + dx);
        }
    }
    let (ma, mb) = (sa / count, sb / count);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for dy in 0..n {
        for dx in 0..n {
            let p = a.at(ay + dy, ax + dx) - ma;
            let q = b.at(by + dy, bx + dx) - mb;
            cov += p * q;
            va += p * p;
            vb += q * q;
        }
    }
    let denom = (va * vb).sqrt();
    (denom > 1e-12 * count).then(|| cov / denom)
}

/// For each non-overlapping `block x block` tile of `a`, the best-ZNCC tile
/// of `b` within `search` pixels. The zero offset is tried first and only a
/// strictly higher score replaces it. Tiles that are flat in `a` are
/// skipped. Matches are reported at tile centers with the ZNCC as score.
pub fn naive_block_match(a: &Gray, b: &Gray, cfg: &BlockMatchConfig, frame: usize) -> Result<Vec<Match>> {
    let n = cfg.block;
    if n == 0 || n > a.height || n > a.width || (a.height, a.width) != (b.height, b.width) {
        return Err(Error::InvalidInput(format!(
            "block {n} does not fit {}x{} frames (or the frames differ in size)",
            a.height, a.width
        )));
    }
    let s = cfg.search as isize;
    let mut offsets = vec![(0isize, 0isize)];
    for dy in -s..=s {
        for dx in -s..=s {
            if (dy, dx) != (0, 0) {
                offsets.push((dy, dx));
            }
        }
    }
    let tiles: Vec<(usize, usize)> =
        (0..a.height / n).flat_map(|ty| (0..a.width / n).map(move |tx| (ty * n, tx * n))).collect();
    let half = (n as f64 - 1.0) / 2.0;
    let found: Vec<Option<Match>> = tiles
        .par_iter()
        .map(|&(y, x)| {
            let mut best: Option<(f64, isize, isize)> = None;
            for &(dy, dx) in &offsets {
                let (by, bx) = (y as isize + dy, x as isize + dx);
                if by < 0 || bx < 0 || by as usize + n > b.height || bx as usize + n > b.width {
                    continue;
                }
                let Some(score) = zncc(a, (y, x), b, (by as usize, bx as usize), n) else {
                    if (dy, dx) == (0, 0) && zncc(a, (y, x), a, (y, x), n).is_none() {
                        return None;
                    }
                    continue;
                };
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, dy, dx));
                }
            }
            let (score, dy, dx) = best?;
            (score >= cfg.zncc_min).then_some(Match {
                frame,
                u1: x as f64 + half,
                v1: y as f64 + half,
                u2: x as f64 + dx as f64 + half,
                v2: y as f64 + dy as f64 + half,
                score,
            })
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

/// `<a, b> / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "embeddings must have equal nonzero length, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.into(), y.into());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::InvalidInput("zero-norm embedding".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub bg_sim: Option<f64>,
    pub obj_sim: Option<f64>,
    /// Per frame background similarity.
    pub bg_per_frame: Vec<f64>,
    /// Per frame similarity averaged over objects.
    pub obj_per_frame: Vec<f64>,
}

/// Key of the reference background embedding in an evaluation set.
pub const BACKGROUND_KEY: &str = "background";

/// Similarities from an embedding set where `name` holds a reference and
/// `name@t` the embedding of generated frame `t`. `background` feeds bg_sim,
/// every other name feeds obj_sim.
pub fn similarity_report(set: &BTreeMap<String, Vec<f32>>) -> Result<SimilarityReport> {
    let mut per: BTreeMap<&str, BTreeMap<usize, &[f32]>> = BTreeMap::new();
    for (k, v) in set {
        if let Some((name, t)) = k.rsplit_once('@') {
            let t: usize =
                t.parse().map_err(|_| Error::Format(format!("embedding key {k:?} has a bad frame index")))?;
            per.entry(name).or_default().insert(t, v);
        }
    }
    let frames: BTreeSet<usize> = per.values().flat_map(|m| m.keys().copied()).collect();
    let mut bg_per_frame = Vec::new();
    let mut obj_per_frame = Vec::new();
    for &t in &frames {
        let mut obj = Vec::new();
        for (&name, by_frame) in &per {
            let Some(gen) = by_frame.get(&t) else { continue };
            let reference =
                set.get(name).ok_or_else(|| Error::Format(format!("no reference embedding for {name:?}")))?;
            let sim = cosine_similarity(reference, gen)?;
            if name == BACKGROUND_KEY {
                bg_per_frame.push(sim);
            } else {
                obj.push(sim);
            }
        }
        if !obj.is_empty() {
            obj_per_frame.push(obj.iter().sum::<f64>() / obj.len() as f64);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(SimilarityReport { bg_sim: mean(&bg_per_frame), obj_sim: mean(&obj_per_frame), bg_per_frame, obj_per_frame })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ViewEval {
    pub rmse: Option<f64>,
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub mean_err_deg: Option<f64>,
    pub median_err_deg: Option<f64>,
    pub excluded_depth_frames: Vec<ExcludedFrame>,
}

/// The `report.json` written by `geocond eval`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rmse: Option<f64>,
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub mean_err_deg: Option<f64>,
    pub median_err_deg: Option<f64>,
    pub pix_mat: Option<f64>,
    pub bg_sim: Option<f64>,
    pub obj_sim: Option<f64>,
    pub fvd: Option<f64>,
    pub notes: Vec<String>,
    pub per_view: BTreeMap<String, ViewEval>,
    pub matches: Option<MatchReport>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub matches: Option<Vec<Match>>,
    pub score_threshold: f64,
    /// Block-match adjacent views of the prediction when no matches are given.
    pub block_match: Option<BlockMatchConfig>,
    pub embeddings: Option<BTreeMap<String, Vec<f32>>>,
    pub flip_normals: bool,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Compares a predicted pack against ground truth. Depth uses each view's
/// depth_metric_m stream where both packs have one, over pixels positive in
/// both; normals use normal_cam over pixels valid in both. Aggregates are
/// means over every evaluated frame of every view.
pub fn evaluate(pred: &Pack, gt: &Pack, opts: &EvalOptions) -> Result<EvalReport> {
    let mut per_view = BTreeMap::new();
    let mut depth_frames: Vec<&DepthFrameMetrics> = Vec::new();
    let mut depth_reports = Vec::new();
    let mut normal_reports = Vec::new();
    let mut notes = vec!["fvd requires a learned video feature extractor and is not computed".to_string()];
    for view in &gt.manifest.views {
        let id = &view.view_id;
        let mut entry = ViewEval::default();
        if let (Ok((_, pd)), Ok((_, gd))) =
            (pred.find(id, StreamKind::DepthMetricM), gt.find(id, StreamKind::DepthMetricM))
        {
            let pd = pd.iter().map(DepthFrame::from_f32_raster).collect::<Result<Vec<_>>>()?;
            let gd = gd.iter().map(DepthFrame::from_f32_raster).collect::<Result<Vec<_>>>()?;
            let masks =
                pd.iter().zip(&gd).map(|(p, g)| positive_mask(p).and(&positive_mask(g))).collect::<Result<Vec<_>>>()?;
            let r = depth_metrics(&pd, &gd, &masks, DepthAlignment::ScaleShift)?;
            entry.rmse = Some(r.rmse);
            entry.abs_rel = Some(r.abs_rel);
            entry.sq_rel = Some(r.sq_rel);
            entry.excluded_depth_frames = r.excluded.clone();
            depth_reports.push(r);
        } else {
            notes.push(format!("view {id}: no depth pair to compare"));
        }
        if let (Ok((_, pn)), Ok((_, gn))) = (pred.find(id, StreamKind::NormalCam), gt.find(id, StreamKind::NormalCam)) {
            let pn = pn.iter().map(NormalFrame::from_raster).collect::<Result<Vec<_>>>()?;
            let gn = gn.iter().map(NormalFrame::from_raster).collect::<Result<Vec<_>>>()?;
            let masks =
                pn.iter().zip(&gn).map(|(p, g)| p.valid_mask().and(&g.valid_mask())).collect::<Result<Vec<_>>>()?;
            let r = normal_metrics(&pn, &gn, &masks, opts.flip_normals)?;
            entry.mean_err_deg = Some(r.mean_err_deg);
            entry.median_err_deg = Some(r.median_err_deg);
            normal_reports.push(r);
        } else {
            notes.push(format!("view {id}: no normal pair to compare"));
        }
        per_view.insert(id.clone(), entry);
    }
    for r in &depth_reports {
        depth_frames.extend(&r.per_frame);
    }
    let normal_frames: Vec<&NormalFrameMetrics> = normal_reports.iter().flat_map(|r| &r.per_frame).collect();

    let matches = match (&opts.matches, &opts.block_match) {
        (Some(m), _) => Some(count_matches(m, opts.score_threshold, None)),
        (None, Some(cfg)) => Some(block_match_views(pred, cfg, opts.score_threshold)?),
        (None, None) => {
            notes.push("pix_mat needs a matches file or block matching".into());
            None
        }
    };
    let sims = opts.embeddings.as_ref().map(similarity_report).transpose()?;
    if sims.is_none() {
        notes.push("bg_sim and obj_sim need an embeddings file".into());
    }
    Ok(EvalReport {
        rmse: mean_of(&depth_frames.iter().map(|f| f.rmse).collect::<Vec<_>>()),
        abs_rel: mean_of(&depth_frames.iter().map(|f| f.abs_rel).collect::<Vec<_>>()),
        sq_rel: mean_of(&depth_frames.iter().map(|f| f.sq_rel).collect::<Vec<_>>()),
        mean_err_deg: mean_of(&normal_frames.iter().map(|f| f.mean_err_deg).collect::<Vec<_>>()),
        median_err_deg: mean_of(&normal_frames.iter().map(|f| f.median_err_deg).collect::<Vec<_>>()),
        pix_mat: matches.as_ref().map(|m| m.mean_matched),
        bg_sim: sims.as_ref().and_then(|s| s.bg_sim),
        obj_sim: sims.as_ref().and_then(|s| s.obj_sim),
        fvd: None,
        notes,
        per_view,
        matches,
    })
}

/// Block matches between each pair of adjacent views (in role order) of the
/// RGB streams, one entry per frame and pair.
fn block_match_views(pack: &Pack, cfg: &BlockMatchConfig, score_threshold: f64) -> Result<MatchReport> {
    let clip = crate::layout::MultiViewClip::from_pack(pack, StreamKind::Rgb)?;
    let views = clip.views();
    let mut all = Vec::new();
    let pairs = views.len().saturating_sub(1);
    for t in 0..clip.frame_count() {
        for (p, w) in views.windows(2).enumerate() {
            let a = luma(&w[0].frames[t])?;
            let b = luma(&w[1].frames[t])?;
            let idx = t * pairs + p;
            if (a.height, a.width) != (b.height, b.width) {
                return Err(Error::InvalidInput("block matching needs equal view sizes".into()));
            }
            let found = naive_block_match(&a, &b, cfg, idx)?;
            if found.is_empty() {
                // keep the pair in the average with a zero count
                all.push(Match { frame: idx, u1: 0.0, v1: 0.0, u2: 0.0, v2: 0.0, score: f64::NEG_INFINITY });
            }
            all.extend(found);
        }
    }
    Ok(count_matches(&all, score_threshold, None))
}
