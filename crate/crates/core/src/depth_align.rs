//! Metric alignment of relative depth against sparse sensor depth.
//!
//! [`scale_fit`] is the closed-form least-squares fit of `s * pred + b` to
//! the sensor over a mask. [`dynamic_mask_align`] wraps it in the iterative
//! trimming loop: fit, measure the per-pixel error of the scaled prediction
//! against the sensor, keep only pixels whose error is strictly below the
//! nearest-rank percentile of the current inliers, repeat.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthFrame, Mask};

/// Relative tolerance on the closed-form determinant, scaled by `N * sum(p^2)`.
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub iterations: usize,
    pub inlier_percentile: f64,
    /// Depths at or below this value (meters / relative units) are invalid.
    pub validity_epsilon: f64,
    pub min_inliers: usize,
    /// Fit one (scale, shift) over every frame of a clip instead of per frame.
    pub joint: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { iterations: 2, inlier_percentile: 0.80, validity_epsilon: 1e-4, min_inliers: 100, joint: false }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be >= 1".into()));
        }
        if !(self.inlier_percentile > 0.0 && self.inlier_percentile <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "inlier_percentile must be in (0, 1], got {}",
                self.inlier_percentile
            )));
        }
        if !(self.validity_epsilon > 0.0 && self.validity_epsilon.is_finite()) {
            return Err(Error::InvalidInput("validity_epsilon must be > 0".into()));
        }
        if self.min_inliers < 2 {
            return Err(Error::InvalidInput("min_inliers must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub scale: f64,
    pub shift: f64,
    /// Pixels the fit of this round used.
    pub fit_count: usize,
    /// Pixels left after this round's mask update.
    pub inlier_count: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub shift: f64,
    /// One mask per aligned frame (a single entry for per-frame alignment).
    pub final_masks: Vec<Mask>,
    pub inlier_count: usize,
    pub per_iteration: Vec<IterationStats>,
    pub residual_rmse_m: f64,
}

impl AlignmentResult {
    pub fn final_mask(&self) -> &Mask {
        &self.final_masks[0]
    }

    pub fn apply(&self, pred: &DepthFrame) -> DepthFrame {
        apply_affine(pred, self.scale, self.shift)
    }
}

/// `scale * pred + shift` for every pixel, valid or not.
pub fn apply_affine(pred: &DepthFrame, scale: f64, shift: f64) -> DepthFrame {
    pred.map(|p| scale * p + shift)
}

/// Running sums for the 2x2 normal equations.
#[derive(Debug, Default, Clone, Copy)]
struct Sums {
    n: usize,
    p: f64,
    s: f64,
    pp: f64,
    ps: f64,
}

impl Sums {
    fn add(&mut self, p: f64, s: f64) {
        self.n += 1;
        self.p += p;
        self.s += s;
        self.pp += p * p;
        self.ps += p * s;
    }

    fn merge(mut self, o: Sums) -> Sums {
        self.n += o.n;
        self.p += o.p;
        self.s += o.s;
        self.pp += o.pp;
        self.ps += o.ps;
        self
    }

    fn solve(&self) -> Result<(f64, f64)> {
        if self.n < 2 {
            return Err(Error::insufficient(format!("scale fit needs at least 2 valid pixels, got {}", self.n)));
        }
        let n = self.n as f64;
        let det = n * self.pp - self.p * self.p;
        if det.abs() <= DEGENERATE_TOLERANCE * n * self.pp {
            return Err(Error::DegenerateInput("predicted depth is constant over the mask".into()));
        }
        let scale = (n * self.ps - self.p * self.s) / det;
        let shift = (self.pp * self.s - self.ps * self.p) / det;
        if !(scale.is_finite() && shift.is_finite()) {
            return Err(Error::Numerical("scale fit produced a non-finite result".into()));
        }
        Ok((scale, shift))
    }
}

fn masked_sums(pred: &[f64], sensor: &[f64], mask: &[u8]) -> Sums {
    let mut sums = Sums::default();
    for ((&p, &s), &m) in pred.iter().zip(sensor).zip(mask) {
        if m != 0 {
            sums.add(p, s);
        }
    }
    sums
}

fn check_dims(pred: &DepthFrame, sensor: &DepthFrame) -> Result<()> {
    if !pred.same_dims(sensor) {
        return Err(Error::InvalidInput(format!(
            "prediction is {}x{}, sensor is {}x{}",
            pred.height(),
            pred.width(),
            sensor.height(),
            sensor.width()
        )));
    }
    Ok(())
}

/// Least-squares `(scale, shift)` minimizing `|scale * pred + shift - sensor|^2`
/// over the masked pixels, via the closed-form 2x2 solution.
pub fn scale_fit(pred: &DepthFrame, sensor: &DepthFrame, mask: &Mask) -> Result<(f64, f64)> {
    check_dims(pred, sensor)?;
    if (mask.height(), mask.width()) != (pred.height(), pred.width()) {
        return Err(Error::InvalidInput("mask dims differ from depth dims".into()));
    }
    masked_sums(pred.values(), sensor.values(), mask.data()).solve()
}

/// Nearest-rank percentile: the `ceil(q * n)`-th smallest value.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    percentile_in_place(&mut values.to_vec(), q)
}

fn percentile_in_place(values: &mut [f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidInput(format!("percentile q must be in (0, 1], got {q}")));
    }
    if values.is_empty() {
        return Err(Error::insufficient("percentile of an empty sequence"));
    }
    let n = values.len();
    // Absorb rounding in q * n so that e.g. 0.8 * 5 ranks as 4, not 5.
    let rank = ((q * n as f64) - 1e-12 * n as f64).ceil().clamp(1.0, n as f64) as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*v)
}

/// Aligns one frame. Returns metric depth for every pixel plus diagnostics.
pub fn dynamic_mask_align(
    pred: &DepthFrame,
    sensor: &DepthFrame,
    cfg: &AlignmentConfig,
) -> Result<(DepthFrame, AlignmentResult)> {
    let result = align_frames(&[pred], &[sensor], cfg)?;
    Ok((result.apply(pred), result))
}

/// Aligns a clip either jointly (one result) or frame by frame (one result
/// per frame), according to `cfg.joint`.
pub fn align_clip(
    preds: &[DepthFrame],
    sensors: &[DepthFrame],
    cfg: &AlignmentConfig,
) -> Result<(Vec<DepthFrame>, Vec<AlignmentResult>)> {
    if preds.len() != sensors.len() || preds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "clip has {} predicted and {} sensor frames",
            preds.len(),
            sensors.len()
        )));
    }
    if cfg.joint {
        let p: Vec<&DepthFrame> = preds.iter().collect();
        let s: Vec<&DepthFrame> = sensors.iter().collect();
        let result = align_frames(&p, &s, cfg)?;
        let metric = preds.iter().map(|f| result.apply(f)).collect();
        Ok((metric, vec![result]))
    } else {
        let per_frame =
            preds.par_iter().zip(sensors).map(|(p, s)| dynamic_mask_align(p, s, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(per_frame.into_iter().unzip())
    }
}

fn align_frames(preds: &[&DepthFrame], sensors: &[&DepthFrame], cfg: &AlignmentConfig) -> Result<AlignmentResult> {
    cfg.validate()?;
    for (p, s) in preds.iter().zip(sensors) {
        check_dims(p, s)?;
    }
    let eps = cfg.validity_epsilon;
    let mut masks: Vec<Vec<u8>> = preds
        .iter()
        .zip(sensors)
        .map(|(p, s)| p.values().iter().zip(s.values()).map(|(&pv, &sv)| (sv > eps && pv > eps) as u8).collect())
        .collect();
    let mut count: usize = masks.iter().flatten().map(|&m| m as usize).sum();
    if count < cfg.min_inliers {
        return Err(Error::insufficient(format!("{count} valid pixels, need {}", cfg.min_inliers)));
    }

    let mut per_iteration = Vec::with_capacity(cfg.iterations);
    let mut errors = Vec::with_capacity(count);
    let (mut scale, mut shift) = (f64::NAN, f64::NAN);
    for _ in 0..cfg.iterations {
        let sums = preds
            .iter()
            .zip(sensors)
            .zip(&masks)
            .map(|((p, s), m)| masked_sums(p.values(), s.values(), m))
            .fold(Sums::default(), Sums::merge);
        (scale, shift) = sums.solve()?;

        errors.clear();
        for ((p, s), m) in preds.iter().zip(sensors).zip(&masks) {
            for ((&pv, &sv), &mv) in p.values().iter().zip(s.values()).zip(m) {
                if mv != 0 {
                    errors.push((scale * pv + shift - sv).abs());
                }
            }
        }
        let threshold = percentile_in_place(&mut errors, cfg.inlier_percentile)?;
        // Strict comparison; when the threshold itself is zero (exact fit on
        // most pixels) keep the exact pixels instead of emptying the mask.
        let keep = |e: f64| if threshold > 0.0 { e < threshold } else { e <= threshold };

        let mut new_masks = masks.clone();
        let mut new_count = 0;
        for (((p, s), m), nm) in preds.iter().zip(sensors).zip(&masks).zip(&mut new_masks) {
            for (i, &mv) in m.iter().enumerate() {
                if mv != 0 {
                    let e = (scale * p.values()[i] + shift - s.values()[i]).abs();
                    let k = keep(e);
                    nm[i] = k as u8;
                    new_count += k as usize;
                }
            }
        }
        per_iteration.push(IterationStats { scale, shift, fit_count: count, inlier_count: new_count, threshold });
        if new_count < cfg.min_inliers {
            let last_good = finish(preds, sensors, &masks, scale, shift, per_iteration);
            return Err(Error::InsufficientData {
                message: format!(
                    "iteration {} left {new_count} inliers, need {}",
                    last_good.per_iteration.len(),
                    cfg.min_inliers
                ),
                last_good: Some(Box::new(last_good)),
            });
        }
        masks = new_masks;
        count = new_count;
    }
    Ok(finish(preds, sensors, &masks, scale, shift, per_iteration))
}

fn finish(
    preds: &[&DepthFrame],
    sensors: &[&DepthFrame],
    masks: &[Vec<u8>],
    scale: f64,
    shift: f64,
    per_iteration: Vec<IterationStats>,
) -> AlignmentResult {
    let mut sq = 0.0;
    let mut n = 0usize;
    for ((p, s), m) in preds.iter().zip(sensors).zip(masks) {
        for ((&pv, &sv), &mv) in p.values().iter().zip(s.values()).zip(m) {
            if mv != 0 {
                let r = scale * pv + shift - sv;
                sq += r * r;
                n += 1;
            }
        }
    }
    let final_masks = preds
        .iter()
        .zip(masks)
        .map(|(p, m)| Mask::new(p.height(), p.width(), m.clone()).expect("mask built from frame"))
        .collect();
    AlignmentResult {
        scale,
        shift,
        final_masks,
        inlier_count: n,
        per_iteration,
        residual_rmse_m: if n > 0 { (sq / n as f64).sqrt() } else { 0.0 },
    }
}
