//! Synthetic tabletop scenes with exact ground truth.
//!
//! A ground plane and a handful of boxes and spheres are ray cast from
//! pinhole cameras. Per view and frame the renderer produces metric depth
//! (camera z), analytic normals, Lambertian RGB and an object label map.
//! [`corrupt_sensor`] and [`make_relative`] then derive the imperfect inputs
//! the alignment stage expects.
//!
//! World coordinates are z-up meters. The scene file format is documented
//! in `docs/scene.md` at the repository root.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::conditions::{mask_bbox, select_keyframes_content, write_embeddings_file, write_json, MaskEntry};
use crate::error::{Error, Result};
use crate::geometry::{cross, dot, normalize, sub, NormalFrame, Vec3};
use crate::metrics::BACKGROUND_KEY;
use crate::pack::{stream_name, write_sidecar, Intrinsics, Pack, StreamKind, ViewDescriptor, ViewRole};
use crate::raster::{DepthFrame, Mask, Raster};
use crate::rng::Rng;

pub const DEFAULT_WIDTH: usize = 640;
pub const DEFAULT_HEIGHT: usize = 384;

/// Label value of pixels that hit the plane or nothing.
pub const LABEL_BACKGROUND: u16 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    /// World z of the table top.
    pub height: f64,
    /// The plane is the square |x|, |y| <= half_extent.
    pub half_extent: f64,
    pub albedo: [f64; 3],
    /// Checker cell size in meters; the checker modulates albedo by ±15%.
    #[serde(default)]
    pub checker: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Full edge lengths along the box's local axes.
    Box {
        size: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    /// Rotation about world z, degrees. Boxes only.
    #[serde(default)]
    pub yaw_deg: f64,
    pub albedo: [f64; 3],
    #[serde(default)]
    pub description: String,
    /// Constant velocity in m/s; position at frame t is center + v * t / fps.
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub view_id: String,
    pub role: ViewRole,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_x_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    /// Direction the light travels.
    pub direction: [f64; 3],
    pub ambient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub plane: PlaneSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    pub cameras: Vec<CameraSpec>,
    pub light: LightSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    /// Table with a box and a sliding sphere, seen by two wrist cameras and
    /// a head camera. The plane covers every pixel of every view.
    pub fn default_tabletop() -> Self {
        let cam = |id: &str, role, position, look_at| CameraSpec {
            view_id: id.into(),
            role,
            position,
            look_at,
            up: [0.0, 0.0, 1.0],
            fov_x_deg: 60.0,
        };
        Self {
            plane: PlaneSpec { height: 0.0, half_extent: 3.0, albedo: [0.62, 0.55, 0.45], checker: Some(0.05) },
            objects: vec![
                ObjectSpec {
                    id: "red_box".into(),
                    shape: Shape::Box { size: [0.12, 0.08, 0.1] },
                    center: [-0.1, 0.12, 0.05],
                    yaw_deg: 25.0,
                    albedo: [0.8, 0.15, 0.1],
                    description: "a red box, cuboid, located left-center".into(),
                    velocity: [0.0; 3],
                },
                ObjectSpec {
                    id: "blue_ball".into(),
                    shape: Shape::Sphere { radius: 0.05 },
                    center: [0.12, 0.0, 0.05],
                    yaw_deg: 0.0,
                    albedo: [0.1, 0.25, 0.85],
                    description: "a blue ball, sphere, located right-front".into(),
                    velocity: [0.0, 0.04, 0.0],
                },
            ],
            cameras: vec![
                cam("left_wrist", ViewRole::LeftWrist, [-0.35, -0.35, 0.45], [-0.05, 0.1, 0.0]),
                cam("head", ViewRole::Head, [0.0, -0.6, 0.9], [0.0, 0.1, 0.0]),
                cam("right_wrist", ViewRole::RightWrist, [0.35, -0.35, 0.45], [0.05, 0.1, 0.0]),
            ],
            light: LightSpec { direction: [0.3, 0.5, -1.0], ambient: 0.25 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.plane;
        if !(p.half_extent > 0.0) || !p.height.is_finite() {
            return Err(Error::Scene("plane needs a finite height and positive extent".into()));
        }
        if p.checker.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Scene("checker size must be positive".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::Scene("scene has no cameras".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if o.id.is_empty() || !ids.insert(o.id.as_str()) {
                return Err(Error::Scene(format!("object id {:?} is empty or repeated", o.id)));
            }
            let bottom = match o.shape {
                Shape::Box { size } => {
                    if size.iter().any(|&s| !(s > 0.0)) {
                        return Err(Error::Scene(format!("object {}: box size must be positive", o.id)));
                    }
                    o.center[2] - size[2] / 2.0
                }
                Shape::Sphere { radius } => {
                    if !(radius > 0.0) {
                        return Err(Error::Scene(format!("object {}: radius must be positive", o.id)));
                    }
                    o.center[2] - radius
                }
            };
            if bottom < p.height - 1e-9 {
                return Err(Error::Scene(format!("object {} reaches below the plane", o.id)));
            }
            if o.velocity[2] < 0.0 {
                return Err(Error::Scene(format!("object {} moves down into the plane", o.id)));
            }
        }
        if normalize(self.light.direction).is_none() || !(0.0..=1.0).contains(&self.light.ambient) {
            return Err(Error::Scene("light needs a nonzero direction and ambient in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub fps: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            frame_count: crate::pack::DEFAULT_FRAME_COUNT,
            fps: crate::pack::DEFAULT_FPS,
        }
    }
}

/// A posed pinhole camera. Camera axes: +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub view_id: String,
    pub role: ViewRole,
    pub position: Vec3,
    /// Rows are the camera axes expressed in world coordinates.
    pub rotation: [Vec3; 3],
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn from_spec(spec: &CameraSpec, width: usize, height: usize) -> Result<Self> {
        let bad = |m: &str| Error::Scene(format!("camera {}: {m}", spec.view_id));
        if !(spec.fov_x_deg > 0.0 && spec.fov_x_deg < 180.0) {
            return Err(bad("fov_x_deg must be in (0, 180)"));
        }
        let forward = normalize(sub(spec.look_at, spec.position)).ok_or_else(|| bad("look_at equals position"))?;
        let right = normalize(cross(forward, spec.up)).ok_or_else(|| bad("up is parallel to the view direction"))?;
        let down = cross(forward, right);
        let fx = (width as f64 / 2.0) / (spec.fov_x_deg.to_radians() / 2.0).tan();
        let cam = Self {
            view_id: spec.view_id.clone(),
            role: spec.role,
            position: spec.position,
            rotation: [right, down, forward],
            intrinsics: Intrinsics { fx, fy: fx, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 },
            width,
            height,
        };
        cam.descriptor().validate()?;
        Ok(cam)
    }

    pub fn descriptor(&self) -> ViewDescriptor {
        ViewDescriptor {
            view_id: self.view_id.clone(),
            intrinsics: self.intrinsics,
            role: self.role,
            width: self.width,
            height: self.height,
        }
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        self.rotation.map(|axis| dot(axis, d))
    }

    pub fn camera_to_world_dir(&self, d: Vec3) -> Vec3 {
        let [r, dn, f] = self.rotation;
        [0, 1, 2].map(|i| r[i] * d[0] + dn[i] * d[1] + f[i] * d[2])
    }

    /// `(u, v, z)` of a world point, or None behind the camera.
    pub fn project(&self, p: Vec3) -> Option<Vec3> {
        let c = self.world_to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]])
    }

    /// World point at pixel `(u, v)` and camera depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let c = crate::geometry::back_project(&self.intrinsics, u, v, z);
        let d = self.camera_to_world_dir(c);
        [0, 1, 2].map(|i| self.position[i] + d[i])
    }

    /// World-space ray through pixel `(u, v)`, scaled so that the ray
    /// parameter equals camera depth.
    fn ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        self.camera_to_world_dir([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Nearest ray hit: depth, outward world normal, albedo, label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub normal: Vec3,
    pub albedo: [f64; 3],
    pub label: u16,
}

/// The scene geometry at one instant.
#[derive(Debug, Clone)]
pub struct SceneState<'a> {
    spec: &'a SceneSpec,
    centers: Vec<Vec3>,
}

impl<'a> SceneState<'a> {
    pub fn at_time(spec: &'a SceneSpec, seconds: f64) -> Self {
        let centers = spec.objects.iter().map(|o| [0, 1, 2].map(|i| o.center[i] + o.velocity[i] * seconds)).collect();
        Self { spec, centers }
    }

    /// True when `p` lies strictly inside some object.
    pub fn inside_object(&self, p: Vec3) -> Option<&'a str> {
        self.spec.objects.iter().zip(&self.centers).find_map(|(o, &c)| {
            let inside = match o.shape {
                Shape::Sphere { radius } => dot(sub(p, c), sub(p, c)) < radius * radius,
                Shape::Box { size } => {
                    let l = to_box_local(sub(p, c), o.yaw_deg);
                    (0..3).all(|i| l[i].abs() < size[i] / 2.0)
                }
            };
            inside.then_some(o.id.as_str())
        })
    }

    /// Nearest hit along `origin + t * dir` with `t > 0`. `dir` must have
    /// camera-forward component 1 so that `t` is camera depth.
    pub fn cast(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut keep = |h: Hit| {
            if best.is_none_or(|b| h.depth < b.depth) {
                best = Some(h);
            }
        };
        let p = &self.spec.plane;
        if dir[2] != 0.0 {
            let t = (p.height - origin[2]) / dir[2];
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            if t > 0.0 && x.abs() <= p.half_extent && y.abs() <= p.half_extent {
                let albedo = match p.checker {
                    Some(cell) => {
                        let parity = ((x / cell).floor() + (y / cell).floor()).rem_euclid(2.0);
                        let k = if parity == 0.0 { 1.15 } else { 0.85 };
                        p.albedo.map(|a| a * k)
                    }
                    None => p.albedo,
                };
                let up = if origin[2] >= p.height { 1.0 } else { -1.0 };
                keep(Hit { depth: t, normal: [0.0, 0.0, up], albedo, label: LABEL_BACKGROUND });
            }
        }
        for (i, (o, &c)) in self.spec.objects.iter().zip(&self.centers).enumerate() {
            let hit = match o.shape {
                Shape::Sphere { radius } => ray_sphere(origin, dir, c, radius),
                Shape::Box { size } => ray_box(origin, dir, c, size, o.yaw_deg),
            };
            if let Some((t, normal)) = hit {
                keep(Hit { depth: t, normal, albedo: o.albedo, label: (i + 1) as u16 });
            }
        }
        best
    }
}

fn to_box_local(d: Vec3, yaw_deg: f64) -> Vec3 {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
}

fn from_box_local(d: Vec3, yaw_deg: f64) -> Vec3 {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]]
}

fn ray_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let oc = sub(o, c);
    let a = dot(d, d);
    let b = dot(oc, d);
    let disc = b * b - a * (dot(oc, oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    if t <= 0.0 {
        return None;
    }
    let p = [0, 1, 2].map(|i| o[i] + t * d[i]);
    Some((t, normalize(sub(p, c))?))
}

/// Slab test in the box frame.
fn ray_box(o: Vec3, d: Vec3, c: Vec3, size: [f64; 3], yaw_deg: f64) -> Option<(f64, Vec3)> {
    let lo = to_box_local(sub(o, c), yaw_deg);
    let ld = to_box_local(d, yaw_deg);
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 0.0;
    for i in 0..3 {
        let h = size[i] / 2.0;
        if ld[i] == 0.0 {
            if lo[i].abs() > h {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((-h - lo[i]) / ld[i], (h - lo[i]) / ld[i]);
        let mut s = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            axis = i;
            sign = s;
        }
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t_near, from_box_local(n, yaw_deg)))
}

/// Ground truth for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub camera: Camera,
    /// Camera-z depth in meters; 0 where the ray hits nothing.
    pub depth: Vec<DepthFrame>,
    pub normals: Vec<NormalFrame>,
    pub rgb: Vec<Raster>,
    /// Per pixel object index + 1, or [`LABEL_BACKGROUND`].
    pub labels: Vec<Vec<u16>>,
}

impl ViewRender {
    pub fn object_mask(&self, frame: usize, object_index: usize) -> Mask {
        let label = (object_index + 1) as u16;
        let (h, w) = (self.camera.height, self.camera.width);
        let l = &self.labels[frame];
        Mask::from_fn(h, w, |y, x| l[y * w + x] == label)
    }

    /// Pixels covered by any object.
    pub fn objects_mask(&self, frame: usize) -> Mask {
        let (h, w) = (self.camera.height, self.camera.width);
        let l = &self.labels[frame];
        Mask::from_fn(h, w, |y, x| l[y * w + x] != LABEL_BACKGROUND)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    pub config: RenderConfig,
    pub views: Vec<ViewRender>,
}

impl SceneRender {
    pub fn view(&self, view_id: &str) -> Option<&ViewRender> {
        self.views.iter().find(|v| v.camera.view_id == view_id)
    }

    /// rgb, depth_metric_m and normal_cam streams for every view.
    pub fn to_pack(&self) -> Result<Pack> {
        let descs = self.views.iter().map(|v| v.camera.descriptor()).collect();
        let mut pack = Pack::new(self.config.fps, self.config.frame_count, descs);
        for v in &self.views {
            let id = &v.camera.view_id;
            pack.put_stream(&stream_name(id, StreamKind::Rgb), id, StreamKind::Rgb, v.rgb.clone())?;
            let depth = v.depth.iter().map(DepthFrame::to_f32_raster).collect();
            pack.put_stream(&stream_name(id, StreamKind::DepthMetricM), id, StreamKind::DepthMetricM, depth)?;
            let normals = v.normals.iter().map(NormalFrame::to_raster).collect();
            pack.put_stream(&stream_name(id, StreamKind::NormalCam), id, StreamKind::NormalCam, normals)?;
        }
        Ok(pack)
    }
}

fn shade(hit: &Hit, light: &LightSpec) -> [u8; 3] {
    let l = normalize(light.direction.map(|v| -v)).expect("validated light");
    let diffuse = dot(hit.normal, l).max(0.0);
    let k = light.ambient + (1.0 - light.ambient) * diffuse;
    hit.albedo.map(|a| ((a * k).clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn check_visibility(spec: &SceneSpec, state: &SceneState, cam: &Camera) -> Result<()> {
    if let Some(id) = state.inside_object(cam.position) {
        return Err(Error::Scene(format!("camera {} is inside object {id}", cam.view_id)));
    }
    let center = [0.0, 0.0, spec.plane.height];
    match cam.project(center) {
        Some([u, v, _]) if cam.in_image(u, v) => Ok(()),
        _ => Err(Error::Scene(format!("camera {} does not see the plane center", cam.view_id))),
    }
}

fn render_frame(state: &SceneState, cam: &Camera, light: &LightSpec) -> (DepthFrame, NormalFrame, Raster, Vec<u16>) {
    let (h, w) = (cam.height, cam.width);
    let hits: Vec<Option<Hit>> =
        (0..h * w).into_par_iter().map(|i| state.cast(cam.position, cam.ray((i % w) as f64, (i / w) as f64))).collect();
    let depth = DepthFrame::from_fn(h, w, |y, x| hits[y * w + x].map_or(0.0, |h| h.depth));
    let normals = NormalFrame::from_fn(h, w, |y, x| {
        hits[y * w + x].map_or([0.0; 3], |hit| cam.rotation.map(|axis| dot(axis, hit.normal) as f32))
    });
    let mut rgb = vec![0u8; 3 * h * w];
    for (i, hit) in hits.iter().enumerate() {
        if let Some(hit) = hit {
            for (c, v) in shade(hit, light).into_iter().enumerate() {
                rgb[c * h * w + i] = v;
            }
        }
    }
    let labels = hits.iter().map(|h| h.map_or(LABEL_BACKGROUND, |h| h.label)).collect();
    let rgb = Raster::from_u8(h, w, 3, rgb).expect("sized buffer");
    (depth, normals, rgb, labels)
}

/// Ray casts every view at every frame. Deterministic and independent of
/// thread count.
pub fn render(spec: &SceneSpec, cfg: &RenderConfig) -> Result<SceneRender> {
    render_views(spec, cfg)
}

fn render_views(spec: &SceneSpec, cfg: &RenderConfig) -> Result<SceneRender> {
    spec.validate()?;
    if cfg.frame_count == 0 || !(cfg.fps > 0.0) {
        return Err(Error::InvalidInput("render needs frame_count >= 1 and fps > 0".into()));
    }
    let cameras =
        spec.cameras.iter().map(|c| Camera::from_spec(c, cfg.width, cfg.height)).collect::<Result<Vec<_>>>()?;
    let states: Vec<SceneState> = (0..cfg.frame_count).map(|t| SceneState::at_time(spec, t as f64 / cfg.fps)).collect();
    for cam in &cameras {
        for s in &states {
            check_visibility(spec, s, cam)?;
        }
    }
    let views = cameras
        .into_iter()
        .map(|cam| {
            let mut v =
                ViewRender { depth: Vec::new(), normals: Vec::new(), rgb: Vec::new(), labels: Vec::new(), camera: cam };
            for s in &states {
                let (d, n, c, l) = render_frame(s, &v.camera, &spec.light);
                v.depth.push(d);
                v.normals.push(n);
                v.rgb.push(c);
                v.labels.push(l);
            }
            v
        })
        .collect();
    Ok(SceneRender { config: *cfg, views })
}

/// The same scene with every object removed.
pub fn empty_scene(spec: &SceneSpec) -> SceneSpec {
    SceneSpec { objects: Vec::new(), ..spec.clone() }
}

/// Missing fields in JSON take their default values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub hole_fraction: f64,
    pub outlier_fraction: f64,
    /// Outlier depths are uniform in this range, meters.
    pub outlier_range: [f64; 2],
    pub noise_sigma_mm: f64,
    /// `(s, b)` with `gt = s * relative + b`.
    pub affine_true: [f64; 2],
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            hole_fraction: 0.2,
            outlier_fraction: 0.1,
            outlier_range: [0.1, 3.0],
            noise_sigma_mm: 2.0,
            affine_true: [1.8, -0.2],
        }
    }
}

impl CorruptionSpec {
    /// No holes, outliers or noise.
    pub fn clean(affine_true: [f64; 2]) -> Self {
        Self { hole_fraction: 0.0, outlier_fraction: 0.0, outlier_range: [0.1, 3.0], noise_sigma_mm: 0.0, affine_true }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, o) = (self.hole_fraction, self.outlier_fraction);
        if !((0.0..1.0).contains(&h) && (0.0..1.0).contains(&o) && h + o < 1.0) {
            return Err(Error::InvalidInput(format!(
                "hole and outlier fractions must be in [0, 1) with sum < 1, got {h} and {o}"
            )));
        }
        let [lo, hi] = self.outlier_range;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidInput(format!("bad outlier range {:?}", self.outlier_range)));
        }
        if !(self.noise_sigma_mm >= 0.0 && self.noise_sigma_mm.is_finite()) {
            return Err(Error::InvalidInput("noise_sigma_mm must be >= 0".into()));
        }
        if self.affine_true[0] == 0.0 || self.affine_true.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("affine_true scale must be finite and nonzero".into()));
        }
        Ok(())
    }
}

/// Simulated uint16 millimeter sensor depth. One uniform draw per pixel
/// picks hole (below `hole_fraction`), outlier (next `outlier_fraction`) or
/// noisy reading. Outliers are redrawn until they differ from the truth by
/// more than five noise sigmas. Pixels without ground truth stay 0.
pub fn corrupt_sensor(gt: &DepthFrame, spec: &CorruptionSpec, rng: &mut Rng) -> Result<Raster> {
    spec.validate()?;
    let floor_m = (5.0 * spec.noise_sigma_mm / 1000.0).max(0.002);
    let mut out = Vec::with_capacity(gt.values().len());
    for &z in gt.values() {
        let u = rng.uniform();
        if z <= 0.0 {
            out.push(0);
            continue;
        }
        let mm = if u < spec.hole_fraction {
            0.0
        } else if u < spec.hole_fraction + spec.outlier_fraction {
            let v = draw_outlier(z, floor_m, spec.outlier_range, rng);
            (v * 1000.0).round().max(1.0)
        } else {
            let noise = if spec.noise_sigma_mm > 0.0 { spec.noise_sigma_mm * rng.standard_normal() } else { 0.0 };
            (z * 1000.0 + noise).round().max(1.0)
        };
        out.push(mm.min(u16::MAX as f64) as u16);
    }
    Raster::from_u16(gt.height(), gt.width(), 1, out)
}

/// Uniform in `range`, redrawn while within `floor` of `z`. Falls back to a
/// fixed offset when the range leaves no room.
fn draw_outlier(z: f64, floor: f64, [lo, hi]: [f64; 2], rng: &mut Rng) -> f64 {
    for _ in 0..64 {
        let v = rng.uniform_range(lo, hi);
        if (v - z).abs() > floor {
            return v;
        }
    }
    if z + 2.0 * floor <= hi {
        z + 2.0 * floor
    } else {
        z - 2.0 * floor
    }
}

/// `(gt - b) / s`, stored as float32, so that `s * rel + b` reproduces `gt`
/// up to float32 rounding.
pub fn make_relative(gt: &DepthFrame, scale: f64, shift: f64) -> Result<Raster> {
    if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
        return Err(Error::InvalidInput(format!("invalid affine ({scale}, {shift})")));
    }
    Ok(gt.map(|z| (z - shift) / scale).to_f32_raster())
}

/// Adds depth_sensor_mm and depth_pred_rel streams derived from the ground
/// truth of `render`. Every (view, frame) uses its own substream of `seed`.
pub fn observation_pack(render: &SceneRender, spec: &CorruptionSpec, seed: u64) -> Result<Pack> {
    spec.validate()?;
    let frames = render.config.frame_count;
    let descs = render.views.iter().map(|v| v.camera.descriptor()).collect();
    let mut pack = Pack::new(render.config.fps, frames, descs);
    let [s, b] = spec.affine_true;
    for (vi, v) in render.views.iter().enumerate() {
        let id = &v.camera.view_id;
        let sensor = v
            .depth
            .par_iter()
            .enumerate()
            .map(|(t, d)| corrupt_sensor(d, spec, &mut Rng::with_stream(seed, (vi * frames + t) as u64)))
            .collect::<Result<Vec<_>>>()?;
        let rel = v.depth.iter().map(|d| make_relative(d, s, b)).collect::<Result<Vec<_>>>()?;
        pack.put_stream(&stream_name(id, StreamKind::Rgb), id, StreamKind::Rgb, v.rgb.clone())?;
        pack.put_stream(&stream_name(id, StreamKind::DepthSensorMm), id, StreamKind::DepthSensorMm, sensor)?;
        pack.put_stream(&stream_name(id, StreamKind::DepthPredRel), id, StreamKind::DepthPredRel, rel)?;
    }
    Ok(pack)
}

/// File names of the perception stand-ins written by [`write_perception_sidecars`].
pub const MASKS_FILE: &str = "masks.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const AREAS_FILE: &str = "areas.json";
pub const INPAINT_FILE: &str = "inpaint.json";
pub const EVAL_EMBEDDINGS_FILE: &str = "eval_embeddings.json";

/// Grid cells per side of [`color_grid_descriptor`].
pub const DESCRIPTOR_GRID: usize = 4;

/// Mean RGB (scaled to [0, 1]) of each cell of a 4x4 grid over `bbox`,
/// flattened cell-major. A deterministic stand-in for a learned image
/// embedding.
pub fn color_grid_descriptor(frame: &Raster, bbox: [usize; 4]) -> Result<Vec<f32>> {
    let [bx, by, bw, bh] = bbox;
    let px = frame
        .as_u8()
        .filter(|_| frame.channels() == 3)
        .ok_or_else(|| Error::InvalidInput("descriptor expects u8 RGB".into()))?;
    if bw == 0 || bh == 0 || bx + bw > frame.width() || by + bh > frame.height() {
        return Err(Error::InvalidInput(format!("bbox {bbox:?} outside the frame")));
    }
    let (h, w) = (frame.height(), frame.width());
    let g = DESCRIPTOR_GRID;
    let mut out = Vec::with_capacity(g * g * 3);
    for cy in 0..g {
        for cx in 0..g {
            let (y0, y1) = (by + cy * bh / g, (by + (cy + 1) * bh / g).max(by + cy * bh / g + 1));
            let (x0, x1) = (bx + cx * bw / g, (bx + (cx + 1) * bw / g).max(bx + cx * bw / g + 1));
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let sum: f64 = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                    .map(|(y, x)| px[c * h * w + y * w + x] as f64)
                    .sum();
                out.push((sum / n / 255.0) as f32);
            }
        }
    }
    Ok(out)
}

/// Writes stand-ins for the external perception stages next to a pack:
/// object masks and boxes, object embeddings, per-frame object areas of the
/// head view, inpainted (object-free) frames and the embeddings `eval`
/// compares. Masks are written for the first and last frame and for the
/// frames of largest and smallest head-view object area. Returns the files
/// written.
pub fn write_perception_sidecars(render: &SceneRender, spec: &SceneSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    let head = render
        .views
        .iter()
        .find(|v| v.camera.role == ViewRole::Head)
        .or_else(|| render.views.first())
        .ok_or_else(|| Error::InvalidInput("render has no views".into()))?;
    let frames = render.config.frame_count;
    let areas: Vec<u64> = (0..frames).map(|t| head.objects_mask(t).count() as u64).collect();
    let (hi, lo) = select_keyframes_content(&areas)?;
    let mut keyframes = vec![0, frames - 1, hi, lo];
    keyframes.sort_unstable();
    keyframes.dedup();

    let mut written = Vec::new();
    let mut entries = Vec::new();
    for v in &render.views {
        let id = &v.camera.view_id;
        for &t in &keyframes {
            for (oi, obj) in spec.objects.iter().enumerate() {
                let mask = v.object_mask(t, oi);
                let Some(bbox) = mask_bbox(&mask) else { continue };
                let rel = format!("streams/{id}_{}_f{t}_mask.raw", obj.id);
                write_sidecar(dir, &rel, mask.data())?;
                entries.push(MaskEntry {
                    object_id: obj.id.clone(),
                    description: obj.description.clone(),
                    bbox,
                    mask: rel,
                    source_frame: t,
                    view_id: Some(id.clone()),
                });
            }
        }
    }
    written.push(write_json(&dir.join(MASKS_FILE), &entries)?);
    written.push(write_json(&dir.join(AREAS_FILE), &areas)?);

    let empty_cfg = RenderConfig { frame_count: 1, ..render.config };
    let empty = render_views(&empty_scene(spec), &empty_cfg)?;
    let mut inpaint = BTreeMap::new();
    for v in &empty.views {
        let rel = format!("streams/{}_inpaint.raw", v.camera.view_id);
        write_sidecar(dir, &rel, &v.rgb[0].to_le_bytes())?;
        inpaint.insert(v.camera.view_id.clone(), rel);
    }
    written.push(write_json(&dir.join(INPAINT_FILE), &inpaint)?);

    let full = [0, 0, head.camera.width, head.camera.height];
    let mut objects = BTreeMap::new();
    let mut eval = BTreeMap::new();
    let head_bg = &empty.views.iter().find(|v| v.camera.view_id == head.camera.view_id).expect("same cameras").rgb[0];
    eval.insert(BACKGROUND_KEY.to_string(), color_grid_descriptor(head_bg, full)?);
    for t in 0..frames {
        eval.insert(format!("{BACKGROUND_KEY}@{t}"), color_grid_descriptor(&head.rgb[t], full)?);
    }
    for (oi, obj) in spec.objects.iter().enumerate() {
        let boxes: Vec<Option<[usize; 4]>> = (0..frames).map(|t| mask_bbox(&head.object_mask(t, oi))).collect();
        let Some(first) = boxes.iter().position(Option::is_some) else {
            log::warn!("object {} is never visible in view {}", obj.id, head.camera.view_id);
            continue;
        };
        let reference = color_grid_descriptor(&head.rgb[first], boxes[first].expect("visible"))?;
        objects.insert(obj.id.clone(), reference.clone());
        eval.insert(obj.id.clone(), reference);
        for (t, b) in boxes.iter().enumerate() {
            if let Some(b) = b {
                eval.insert(format!("{}@{t}", obj.id), color_grid_descriptor(&head.rgb[t], *b)?);
            }
        }
    }
    written.push(write_embeddings_file(dir, EMBEDDINGS_FILE, "", &objects)?);
    written.push(write_embeddings_file(dir, EVAL_EMBEDDINGS_FILE, "eval_", &eval)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn top_down(objects: Vec<ObjectSpec>, height: f64) -> SceneSpec {
        SceneSpec {
            plane: PlaneSpec { height: 0.0, half_extent: 10.0, albedo: [0.5; 3], checker: None },
            objects,
            cameras: vec![CameraSpec {
                view_id: "head".into(),
                role: ViewRole::Head,
                position: [0.0, 0.0, height],
                look_at: [0.0, 0.0, 0.0],
                up: [0.0, 1.0, 0.0],
                fov_x_deg: 60.0,
            }],
            light: LightSpec { direction: [0.0, 0.0, -1.0], ambient: 0.2 },
            seed: 0,
        }
    }

    fn one_frame(w: usize, h: usize) -> RenderConfig {
        RenderConfig { width: w, height: h, frame_count: 1, fps: 10.0 }
    }

    #[test]
    fn empty_scene_fronto_parallel() {
        let r = render(&top_down(vec![], 1.0), &one_frame(64, 48)).unwrap();
        let v = &r.views[0];
        assert!(v.depth[0].values().iter().all(|&z| z == 1.0));
        assert!(v.normals[0].data().iter().all(|&n| n == [0.0, 0.0, -1.0]));
    }

    #[test]
    fn sphere_silhouette_radius() {
        let (d, r) = (1.0, 0.3);
        let ball = ObjectSpec {
            id: "ball".into(),
            shape: Shape::Sphere { radius: r },
            center: [0.0, 0.0, 0.5],
            yaw_deg: 0.0,
            albedo: [1.0; 3],
            description: String::new(),
            velocity: [0.0; 3],
        };
        // camera d above the sphere center, sphere on the optical axis
        let spec = top_down(vec![ball], 0.5 + d);
        let (w, h) = (401, 401);
        let out = render(&spec, &one_frame(w, h)).unwrap();
        let v = &out.views[0];
        let fx = v.camera.intrinsics.fx;
        let expected = fx * r / (d * d - r * r).sqrt();
        let row = h / 2;
        let covered = (0..w).filter(|&x| v.labels[0][row * w + x] == 1).count();
        assert!((covered as f64 / 2.0 - expected).abs() <= 1.0, "{covered} vs {expected}");
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SceneSpec::default_tabletop();
        let cfg = RenderConfig { frame_count: 2, width: 96, height: 64, fps: 10.0 };
        assert_eq!(render(&spec, &cfg).unwrap(), render(&spec, &cfg).unwrap());
    }

    #[test]
    fn default_scene_plane_fills_every_view() {
        let spec = SceneSpec::default_tabletop();
        let cfg = RenderConfig { frame_count: 1, ..Default::default() };
        let r = render(&spec, &cfg).unwrap();
        for v in &r.views {
            assert!(v.depth[0].values().iter().all(|&z| z > 0.0), "{}", v.camera.view_id);
            for i in 0..spec.objects.len() {
                assert!(v.object_mask(0, i).count() > 50, "{} object {i}", v.camera.view_id);
            }
        }
    }

    #[test]
    fn camera_inside_object_is_scene_error() {
        let mut spec = SceneSpec::default_tabletop();
        spec.cameras[1].position = spec.objects[0].center;
        spec.cameras[1].look_at = [0.0, 0.0, 0.0];
        let r = render(&spec, &RenderConfig { frame_count: 1, width: 32, height: 32, fps: 10.0 });
        assert!(matches!(r, Err(Error::Scene(_))));
    }

    #[test]
    fn camera_missing_plane_center_is_scene_error() {
        let mut spec = SceneSpec::default_tabletop();
        spec.cameras[0].look_at = [5.0, 5.0, 0.9];
        let r = render(&spec, &RenderConfig { frame_count: 1, width: 32, height: 32, fps: 10.0 });
        assert!(matches!(r, Err(Error::Scene(_))));
    }

    #[test]
    fn camera_project_unproject() {
        let spec = SceneSpec::default_tabletop();
        let cam = Camera::from_spec(&spec.cameras[1], 640, 384).unwrap();
        let p = [0.05, 0.1, 0.02];
        let [u, v, z] = cam.project(p).unwrap();
        let q = cam.unproject(u, v, z);
        assert!((0..3).all(|i| (p[i] - q[i]).abs() < 1e-12));
        let c = cam.intrinsics;
        assert_eq!((c.cx, c.cy), (319.5, 191.5));
        assert!((c.fx - 320.0 / (30f64).to_radians().tan()).abs() < 1e-9);
    }

    #[test]
    fn box_faces() {
        let (t, n) = ray_box([0.0, 0.0, 2.0], [0.0, 0.0, -1.0], [0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!((t, n), (1.5, [0.0, 0.0, 1.0]));
        let (t, n) = ray_box([-3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3], [1.0, 2.0, 1.0], 90.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!((n[0] + 1.0).abs() < 1e-12 && n[1].abs() < 1e-12);
        assert!(ray_box([-3.0, 5.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3], [1.0; 3], 0.0).is_none());
    }

    #[test]
    fn objects_below_plane_rejected() {
        let mut spec = SceneSpec::default_tabletop();
        spec.objects[1].center[2] = 0.01;
        assert!(matches!(spec.validate(), Err(Error::Scene(_))));
    }

    #[test]
    fn scene_json_round_trip() {
        let spec = SceneSpec::default_tabletop();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        assert!(text.contains("\"shape\": \"sphere\""));
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    fn flat(n: usize, z: f64) -> DepthFrame {
        DepthFrame::from_fn(n, n, |_, _| z)
    }

    #[test]
    fn zero_corruption_is_rounded_truth() {
        let gt = DepthFrame::from_fn(16, 16, |y, x| 0.5 + 0.00123 * (y * 16 + x) as f64);
        let s = corrupt_sensor(&gt, &CorruptionSpec::clean([1.0, 0.0]), &mut Rng::new(0)).unwrap();
        for (mm, z) in s.as_u16().unwrap().iter().zip(gt.values()) {
            assert_eq!(*mm as f64, (z * 1000.0).round());
        }
    }

    #[test]
    fn hole_fraction_count() {
        let spec =
            CorruptionSpec { hole_fraction: 0.2, outlier_fraction: 0.0, noise_sigma_mm: 1.0, ..Default::default() };
        let s = corrupt_sensor(&flat(100, 1.0), &spec, &mut Rng::new(11)).unwrap();
        let zeros = s.as_u16().unwrap().iter().filter(|&&v| v == 0).count();
        assert!((1900..=2100).contains(&zeros), "{zeros}");
    }

    #[test]
    fn outliers_are_separated() {
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let v = draw_outlier(1.0, 0.015, [0.9, 1.1], &mut rng);
            assert!((v - 1.0).abs() > 0.015);
        }
        assert_eq!(draw_outlier(1.0, 0.015, [0.99, 1.01], &mut rng), 0.97);
        let spec = CorruptionSpec {
            hole_fraction: 0.0,
            outlier_fraction: 0.5,
            outlier_range: [0.5, 1.5],
            noise_sigma_mm: 3.0,
            affine_true: [1.0, 0.0],
        };
        let s = corrupt_sensor(&flat(50, 1.0), &spec, &mut Rng::new(5)).unwrap();
        let far = s.as_u16().unwrap().iter().filter(|&&v| (v as f64 - 1000.0).abs() >= 15.0).count();
        assert!((1150..=1350).contains(&far), "{far}");
    }

    #[test]
    fn relative_depth_cases() {
        let gt = DepthFrame::from_fn(4, 4, |y, x| 0.6 + 0.1 * (y + x) as f64);
        let same = make_relative(&gt, 1.0, 0.0).unwrap();
        assert_eq!(same, gt.to_f32_raster());
        let rel = make_relative(&gt, 2.0, -0.5).unwrap();
        assert!(rel.as_f32().unwrap().iter().all(|&v| v > 0.0));
        for (r, z) in rel.as_f32().unwrap().iter().zip(gt.values()) {
            assert!((2.0 * *r as f64 - 0.5 - z).abs() < 1e-6);
        }
        assert!(matches!(make_relative(&gt, 0.0, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_corruption_spec() {
        let bad = CorruptionSpec { hole_fraction: 0.6, outlier_fraction: 0.5, ..Default::default() };
        assert!(corrupt_sensor(&flat(2, 1.0), &bad, &mut Rng::new(0)).is_err());
    }
}
