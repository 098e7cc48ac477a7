//! Camera-space surface normals from metric depth.
//!
//! Camera frame: +x right, +y down, +z into the scene. Normals are unit
//! vectors oriented toward the camera, so a surface facing the camera has
//! `nz < 0`. Invalid pixels hold exactly `(0, 0, 0)`.

use crate::error::{Error, Result};
use crate::pack::{Intrinsics, ViewDescriptor};
use crate::raster::{DepthFrame, Mask, Raster};

/// Allowed deviation of a valid normal's length from 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalFrame {
    height: usize,
    width: usize,
    data: Vec<[f32; 3]>,
}

impl NormalFrame {
    pub fn new(height: usize, width: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "normal buffer has {} pixels, expected {}",
                data.len(),
                height * width
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("normals contain non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.data[i] != [0.0; 3]
    }

    pub fn valid_mask(&self) -> Mask {
        Mask::new(self.height, self.width, self.data.iter().map(|n| (*n != [0.0; 3]) as u8).collect())
            .expect("dims match")
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        let v = match (r.channels(), r.as_f32()) {
            (3, Some(v)) => v,
            _ => {
                return Err(Error::Format(format!(
                    "expected 3-channel float32 normals, got {}-channel {:?}",
                    r.channels(),
                    r.dtype()
                )))
            }
        };
        let plane = r.plane_len();
        let data = (0..plane).map(|i| [v[i], v[plane + i], v[2 * plane + i]]).collect();
        Ok(Self { height: r.height(), width: r.width(), data })
    }

    pub fn to_raster(&self) -> Raster {
        let plane = self.data.len();
        let mut out = vec![0.0f32; 3 * plane];
        for (i, n) in self.data.iter().enumerate() {
            out[i] = n[0];
            out[plane + i] = n[1];
            out[2 * plane + i] = n[2];
        }
        Raster::from_f32(self.height, self.width, 3, out).expect("dims match")
    }
}

pub(crate) type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Back-projects pixel `(x, y)` at camera-space depth `z`.
pub fn back_project(k: &Intrinsics, x: f64, y: f64, z: f64) -> [f64; 3] {
    [z * (x - k.cx) / k.fx, z * (y - k.cy) / k.fy, z]
}

/// Normals by central differences of back-projected points (one-sided at the
/// image border). A pixel is invalid when any pixel of its stencil is
/// outside `mask`.
pub fn normals_from_depth(depth: &DepthFrame, view: &ViewDescriptor, mask: &Mask) -> Result<NormalFrame> {
    view.validate()?;
    let (h, w) = (depth.height(), depth.width());
    if (view.height, view.width) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::InvalidInput(format!(
            "depth {h}x{w}, mask {}x{}, view {}x{} must agree",
            mask.height(),
            mask.width(),
            view.height,
            view.width
        )));
    }
    if let Some(i) = (0..h * w).find(|&i| mask.is_set(i) && depth.values()[i] <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "non-positive depth {} under the mask at pixel {i}",
            depth.values()[i]
        )));
    }
    let k = view.intrinsics;
    let point = |y: usize, x: usize| back_project(&k, x as f64, y as f64, depth.get(y, x));
    let ok = |y: usize, x: usize| mask.get(y, x);

    // Derivative along one axis at index `i` of `len`, or None if the stencil
    // is incomplete. `at(j)` yields the point and validity at index j.
    fn diff(i: usize, len: usize, at: impl Fn(usize) -> Option<Vec3>) -> Option<Vec3> {
        if len < 2 {
            return None;
        }
        let c = at(i)?;
        if i == 0 {
            Some(sub(at(1)?, c))
        } else if i == len - 1 {
            Some(sub(c, at(i - 1)?))
        } else {
            let d = sub(at(i + 1)?, at(i - 1)?);
            Some([d[0] / 2.0, d[1] / 2.0, d[2] / 2.0])
        }
    }

    let frame = NormalFrame::from_fn(h, w, |y, x| {
        let du = diff(x, w, |j| ok(y, j).then(|| point(y, j)));
        let dv = diff(y, h, |j| ok(j, x).then(|| point(j, x)));
        let n = match (du, dv) {
            (Some(du), Some(dv)) => normalize(cross(du, dv)),
            _ => None,
        };
        match n {
            Some(mut n) => {
                if dot(n, point(y, x)) > 0.0 {
                    n = [-n[0], -n[1], -n[2]];
                }
                [n[0] as f32, n[1] as f32, n[2] as f32]
            }
            None => [0.0; 3],
        }
    });
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct NormalValidation {
    pub valid: usize,
    pub invalid: usize,
    /// Nonzero pixels whose length differs from 1 by more than the tolerance.
    pub violations: usize,
}

pub fn validate_normals(frame: &NormalFrame) -> NormalValidation {
    let mut report = NormalValidation { valid: 0, invalid: 0, violations: 0 };
    for n in frame.data() {
        if *n == [0.0; 3] {
            report.invalid += 1;
            continue;
        }
        let len = norm([n[0] as f64, n[1] as f64, n[2] as f64]);
        if (len - 1.0).abs() > UNIT_TOLERANCE {
            report.violations += 1;
        } else {
            report.valid += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pack::ViewRole;
    use crate::rng::Rng;

    const H: usize = 48;
    const W: usize = 64;

    fn view() -> ViewDescriptor {
        ViewDescriptor {
            view_id: "head".into(),
            intrinsics: Intrinsics { fx: 60.0, fy: 60.0, cx: (W as f64 - 1.0) / 2.0, cy: (H as f64 - 1.0) / 2.0 },
            role: ViewRole::Head,
            width: W,
            height: H,
        }
    }

    /// Depth of the plane `n . P = d` along each pixel ray.
    fn plane_depth(n: Vec3, d: f64) -> DepthFrame {
        let k = view().intrinsics;
        DepthFrame::from_fn(H, W, |y, x| {
            let r = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            d / dot(n, r)
        })
    }

    fn interior(y: usize, x: usize) -> bool {
        y > 0 && x > 0 && y < H - 1 && x < W - 1
    }

    fn angle_deg(a: [f32; 3], b: Vec3) -> f64 {
        let a = [a[0] as f64, a[1] as f64, a[2] as f64];
        norm(cross(a, b)).atan2(dot(a, b)).to_degrees()
    }

    #[test]
    fn fronto_parallel_plane() {
        let depth = DepthFrame::from_fn(H, W, |_, _| 1.0);
        let n = normals_from_depth(&depth, &view(), &Mask::full(H, W)).unwrap();
        for y in 0..H {
            for x in 0..W {
                let v = n.get(y, x);
                assert!(v[0].abs() < 1e-6 && v[1].abs() < 1e-6 && (v[2] + 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(validate_normals(&n).violations, 0);
    }

    #[test]
    fn tilted_plane_matches_analytic_normal() {
        // z = 1 + 0.5 x  <=>  (-0.5, 0, 1) . P = 1; toward the camera that is (0.5, 0, -1).
        let depth = plane_depth([-0.5, 0.0, 1.0], 1.0);
        let n = normals_from_depth(&depth, &view(), &Mask::full(H, W)).unwrap();
        let want = normalize([0.5, 0.0, -1.0]).unwrap();
        for y in 0..H {
            for x in 0..W {
                if interior(y, x) {
                    let v = n.get(y, x);
                    for c in 0..3 {
                        assert!((v[c] as f64 - want[c]).abs() < 1e-3, "{v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_normals_within_one_degree() {
        let k = view().intrinsics;
        let (c, r) = ([0.0, 0.0, 1.0], 0.3);
        // Ray-sphere hits, with a far plane behind.
        let mut hit = vec![false; H * W];
        let depth = DepthFrame::from_fn(H, W, |y, x| {
            let d = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            let a = dot(d, d);
            let b = -2.0 * dot(d, c);
            let cc = dot(c, c) - r * r;
            let disc = b * b - 4.0 * a * cc;
            if disc >= 0.0 {
                hit[y * W + x] = true;
                (-b - disc.sqrt()) / (2.0 * a)
            } else {
                3.0
            }
        });
        let mask = Mask::new(H, W, hit.iter().map(|&b| b as u8).collect()).unwrap();
        let n = normals_from_depth(&depth, &view(), &mask).unwrap();
        let margin = 3i64;
        let mut checked = 0;
        for y in 0..H {
            for x in 0..W {
                let far = (-margin..=margin).all(|dy| {
                    (-margin..=margin).all(|dx| {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        yy >= 0 && xx >= 0 && yy < H as i64 && xx < W as i64 && hit[yy as usize * W + xx as usize]
                    })
                });
                if !far {
                    continue;
                }
                let p = back_project(&k, x as f64, y as f64, depth.get(y, x));
                let want = normalize(sub(p, c)).unwrap();
                assert!(angle_deg(n.get(y, x), want) < 1.0, "({y},{x})");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn rotated_plane_rotates_normals() {
        let base = [0.1, -0.2, 1.0];
        let theta: f64 = 0.3;
        let rot = |v: Vec3| [theta.cos() * v[0] + theta.sin() * v[2], v[1], -theta.sin() * v[0] + theta.cos() * v[2]];
        let a = normals_from_depth(&plane_depth(base, 1.0), &view(), &Mask::full(H, W)).unwrap();
        let b = normals_from_depth(&plane_depth(rot(base), 1.0), &view(), &Mask::full(H, W)).unwrap();
        for y in 1..H - 1 {
            for x in 1..W - 1 {
                let na = a.get(y, x);
                let ra = rot([na[0] as f64, na[1] as f64, na[2] as f64]);
                let nb = b.get(y, x);
                for c in 0..3 {
                    assert!((ra[c] - nb[c] as f64).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn uniform_depth_scaling_keeps_fronto_normals() {
        let mask = Mask::full(H, W);
        let a = normals_from_depth(&DepthFrame::from_fn(H, W, |_, _| 0.7), &view(), &mask).unwrap();
        let b = normals_from_depth(&DepthFrame::from_fn(H, W, |_, _| 2.1), &view(), &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stencil_touching_invalid_is_invalid() {
        let depth = DepthFrame::from_fn(H, W, |_, _| 1.0);
        let mask = Mask::from_fn(H, W, |y, x| !(y == 10 && x == 10));
        let n = normals_from_depth(&depth, &view(), &mask).unwrap();
        for (y, x) in [(10, 10), (10, 9), (10, 11), (9, 10), (11, 10)] {
            assert_eq!(n.get(y, x), [0.0; 3]);
        }
        assert_ne!(n.get(9, 9), [0.0; 3]);
    }

    #[test]
    fn rejects_bad_input() {
        let depth = DepthFrame::from_fn(H, W, |_, _| 0.0);
        assert!(matches!(normals_from_depth(&depth, &view(), &Mask::full(H, W)), Err(Error::InvalidInput(_))));
        let mut v = view();
        v.intrinsics.fx = -1.0;
        let depth = DepthFrame::from_fn(H, W, |_, _| 1.0);
        assert!(normals_from_depth(&depth, &v, &Mask::full(H, W)).is_err());
    }

    #[test]
    fn validation_counts() {
        let ones = NormalFrame::from_fn(4, 4, |_, _| [1.0, 1.0, 1.0]);
        assert_eq!(validate_normals(&ones).violations, 16);

        let depth = DepthFrame::from_fn(H, W, |_, _| 1.0);
        let mut n = normals_from_depth(&depth, &view(), &Mask::full(H, W)).unwrap();
        let mut rng = Rng::new(9);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < 5 {
            picked.insert(rng.index(H * W));
        }
        for &i in &picked {
            n.data[i][0] += 0.01;
        }
        let report = validate_normals(&n);
        assert_eq!(report.violations, 5);
        assert_eq!(report.valid, H * W - 5);
    }

    #[test]
    fn raster_round_trip() {
        let n = NormalFrame::from_fn(3, 5, |y, x| [y as f32, x as f32, -1.0]);
        assert_eq!(NormalFrame::from_raster(&n.to_raster()).unwrap(), n);
    }
}
