//! Ray-cast synthetic scenes.
//!
//! A scene is an axis-aligned room with textured inner faces plus a handful
//! of spheres and oriented boxes. Rendering shoots one ray per pixel center
//! of both fisheye lenses and shades the nearest hit with its flat texture
//! color. Because the renderer is exact for any camera pose, it serves as
//! ground truth for the rotation warp and as a pose-conditioned predictor
//! for the servo loop.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::VcrPlan;
use crate::image::{FisheyeFrame, FrameMask, Lens};
use crate::par::Exec;
use crate::projection::{ImageCoord, ProjectionModel};
use crate::se3::{default_lens_transform, rpy_matrix, ActionTuple, RigidTransform};
use crate::{Error, Result};

pub const SCENE_SCHEMA_VERSION: u32 = 1;
const HIT_EPS: f64 = 1e-9;

/// Surface color as a function of 2D surface coordinates (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid {
        color: [f32; 3],
    },
    /// Hard-edged squares of side `size`.
    Checker {
        a: [f32; 3],
        b: [f32; 3],
        #[serde(default = "default_checker_size")]
        size: f64,
    },
    /// Smooth product of sines with the given period: blends `a` and `b`.
    Wave {
        a: [f32; 3],
        b: [f32; 3],
        period: f64,
    },
}

fn default_checker_size() -> f64 {
    0.25
}

impl Texture {
    #[inline]
    pub fn shade(&self, s: f64, t: f64) -> [f32; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, size } => {
                let parity = ((s / size).floor() as i64 + (t / size).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Wave { a, b, period } => {
                let k = std::f64::consts::TAU / period;
                let m = (0.5 + 0.5 * (k * s).sin() * (k * t).sin()) as f32;
                [
                    a[0] + (b[0] - a[0]) * m,
                    a[1] + (b[1] - a[1]) * m,
                    a[2] + (b[2] - a[2]) * m,
                ]
            }
        }
    }
}

/// Six inner faces of the room, ordered `-x, +x, -y, +y, -z, +z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub faces: [Texture; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum SceneObject {
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
    /// Box with full edge lengths `size`, placed by `pose` (world from box).
    Box {
        pose: RigidTransform,
        size: [f64; 3],
        texture: Texture,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub room: Room,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub background: [f32; 3],
}

fn schema_version() -> u32 {
    SCENE_SCHEMA_VERSION
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENE_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "scene schema_version {} (expected {SCENE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for k in 0..3 {
            if !(self.room.max[k] > self.room.min[k]) {
                return Err(Error::InvalidConfig("room max must exceed min".into()));
            }
        }
        for o in &self.objects {
            let ok = match o {
                SceneObject::Sphere { radius, .. } => *radius > 0.0,
                SceneObject::Box { size, .. } => size.iter().all(|&s| s > 0.0),
            };
            if !ok {
                return Err(Error::InvalidConfig("object sizes must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: SceneSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Room of one solid color and no objects.
    pub fn uniform_room(half_extent: f64, color: [f32; 3]) -> Self {
        let t = Texture::Solid { color };
        Self {
            schema_version: SCENE_SCHEMA_VERSION,
            room: Room {
                min: [-half_extent; 3],
                max: [half_extent; 3],
                faces: std::array::from_fn(|_| t.clone()),
            },
            objects: Vec::new(),
            background: [0.0; 3],
        }
    }

    /// Room with a distinct smooth pattern on every face and a few objects.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let color = |rng: &mut R| -> [f32; 3] {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ]
        };
        let faces = std::array::from_fn(|_| Texture::Wave {
            a: color(rng),
            b: color(rng),
            period: rng.random_range(1.6..3.0),
        });
        let half = [
            rng.random_range(2.0..3.0),
            rng.random_range(1.5..2.5),
            rng.random_range(2.0..3.0),
        ];
        let mut objects = Vec::new();
        for k in 0..rng.random_range(2..5) {
            let center = [
                rng.random_range(-0.6..0.6) * half[0],
                rng.random_range(-0.6..0.6) * half[1],
                rng.random_range(-0.6..0.6) * half[2],
            ];
            let texture = Texture::Wave {
                a: color(rng),
                b: color(rng),
                period: rng.random_range(0.6..1.2),
            };
            if k % 2 == 0 {
                objects.push(SceneObject::Sphere {
                    center,
                    radius: rng.random_range(0.3..0.6),
                    texture,
                });
            } else {
                let rot = rpy_matrix(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-3.0..3.0),
                );
                objects.push(SceneObject::Box {
                    pose: RigidTransform::new(rot, Vector3::from(center)),
                    size: [
                        rng.random_range(0.4..1.0),
                        rng.random_range(0.4..1.0),
                        rng.random_range(0.4..1.0),
                    ],
                    texture,
                });
            }
        }
        Self {
            schema_version: SCENE_SCHEMA_VERSION,
            room: Room {
                min: half.map(|h| -h),
                max: half,
                faces,
            },
            objects,
            background: [0.0; 3],
        }
    }

    /// Whether `p` is strictly inside the room and outside every object.
    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        self.contains(p)
            && self.objects.iter().all(|o| match o {
                SceneObject::Sphere { center, radius, .. } => {
                    (p - Vector3::from(*center)).norm() > *radius
                }
                SceneObject::Box { pose, size, .. } => {
                    let q = pose.inverse().transform_point(p);
                    (0..3).any(|k| q[k].abs() > 0.5 * size[k])
                }
            })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] > self.room.min[k] && p[k] < self.room.max[k])
    }

    /// Random free camera position at least `margin` from the walls and
    /// objects, with uniformly random orientation.
    pub fn random_pose<R: Rng + ?Sized>(&self, rng: &mut R, margin: f64) -> RigidTransform {
        loop {
            let p = Vector3::from_fn(|k, _| {
                rng.random_range(self.room.min[k] + margin..self.room.max[k] - margin)
            });
            let clear = self.objects.iter().all(|o| match o {
                SceneObject::Sphere { center, radius, .. } => {
                    (p - Vector3::from(*center)).norm() > radius + margin
                }
                SceneObject::Box { pose, size, .. } => {
                    let half = Vector3::from(*size).norm() * 0.5;
                    (p - pose.translation).norm() > half + margin
                }
            });
            if clear {
                let r = crate::se3::sample_rotation_with(
                    &crate::se3::RotationMode::UniformSo3,
                    rng,
                );
                return RigidTransform::new(r.rotation, p);
            }
        }
    }
}

enum Prim {
    Sphere {
        center: Vector3<f64>,
        radius2: f64,
    },
    Box {
        inv_rot: Matrix3<f64>,
        origin: Vector3<f64>,
        half: Vector3<f64>,
    },
}

/// Lens model, front-to-back transform and resolution of a dual-fisheye rig.
///
/// Each pixel averages an `n`x`n` grid of rays over its footprint
/// (`n = 2` by default), as a sensor integrates light over its area. Point
/// sampling (`n = 1`) is four times cheaper but aliases hard edges.
#[derive(Clone, Debug)]
pub struct Rig {
    pub model: ProjectionModel,
    pub lens: RigidTransform,
    pub width: usize,
    supersampling: usize,
    /// Pixel index and its range in `dirs`, for pixels whose center is in
    /// the image circle.
    pixels: Vec<(usize, std::ops::Range<usize>)>,
    dirs: Vec<Vector3<f64>>,
}

pub const DEFAULT_SUPERSAMPLING: usize = 2;

impl Rig {
    pub fn new(model: ProjectionModel, lens: RigidTransform, width: usize) -> Self {
        Self::with_supersampling(model, lens, width, DEFAULT_SUPERSAMPLING)
    }

    pub fn with_supersampling(model: ProjectionModel, lens: RigidTransform, width: usize, n: usize) -> Self {
        assert!(n >= 1, "supersampling must be at least 1");
        let (mut pixels, mut dirs) = (Vec::new(), Vec::new());
        let w = width as f64;
        for (k, center) in model.ray_grid(width).into_iter().enumerate() {
            let Some(center) = center else { continue };
            let start = dirs.len();
            if n == 1 {
                dirs.push(center);
            } else {
                let (row, col) = ((k / width) as f64, (k % width) as f64);
                for i in 0..n {
                    for j in 0..n {
                        let r = row + (i as f64 + 0.5) / n as f64;
                        let c = col + (j as f64 + 0.5) / n as f64;
                        let coord = ImageCoord::new(2.0 * c / w - 1.0, 2.0 * r / w - 1.0);
                        dirs.extend(model.try_back_project(coord));
                    }
                }
                if dirs.len() == start {
                    dirs.push(center);
                }
            }
            pixels.push((k, start..dirs.len()));
        }
        Self {
            model,
            lens,
            width,
            supersampling: n,
            pixels,
            dirs,
        }
    }

    pub fn equidistant(width: usize) -> Self {
        Self::new(ProjectionModel::equidistant(), default_lens_transform(), width)
    }

    /// Same rig with `n`x`n` rays per pixel.
    pub fn resampled(&self, n: usize) -> Self {
        Self::with_supersampling(self.model.clone(), self.lens, self.width, n)
    }

    pub fn supersampling(&self) -> usize {
        self.supersampling
    }
}

/// Scene prepared for repeated rendering.
pub struct Renderer {
    scene: SceneSpec,
    prims: Vec<Prim>,
}

impl Renderer {
    pub fn new(scene: SceneSpec) -> Result<Self> {
        scene.validate()?;
        let prims = scene
            .objects
            .iter()
            .map(|o| match o {
                SceneObject::Sphere { center, radius, .. } => Prim::Sphere {
                    center: Vector3::from(*center),
                    radius2: radius * radius,
                },
                SceneObject::Box { pose, size, .. } => Prim::Box {
                    inv_rot: pose.rotation.transpose(),
                    origin: pose.translation,
                    half: Vector3::from(*size) * 0.5,
                },
            })
            .collect();
        Ok(Self { scene, prims })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    /// Color seen along a ray from inside the room.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> [f32; 3] {
        let room = &self.scene.room;
        let mut best_t = f64::INFINITY;
        let mut best_face = 0usize;
        for k in 0..3 {
            if d[k] > 0.0 {
                let t = (room.max[k] - o[k]) / d[k];
                if t < best_t {
                    best_t = t;
                    best_face = 2 * k + 1;
                }
            } else if d[k] < 0.0 {
                let t = (room.min[k] - o[k]) / d[k];
                if t < best_t {
                    best_t = t;
                    best_face = 2 * k;
                }
            }
        }
        let mut hit_obj: Option<(usize, f64)> = None;
        for (i, p) in self.prims.iter().enumerate() {
            let t = match p {
                Prim::Sphere { center, radius2 } => {
                    let oc = o - center;
                    let b = oc.dot(d);
                    let c = oc.norm_squared() - radius2;
                    let disc = b * b - c;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let t0 = -b - sq;
                    if t0 > HIT_EPS {
                        t0
                    } else {
                        let t1 = -b + sq;
                        if t1 > HIT_EPS {
                            t1
                        } else {
                            continue;
                        }
                    }
                }
                Prim::Box {
                    inv_rot,
                    origin,
                    half,
                } => {
                    let lo = inv_rot * (o - origin);
                    let ld = inv_rot * d;
                    match slab(&lo, &ld, half) {
                        Some(t) => t,
                        None => continue,
                    }
                }
            };
            if t < best_t && hit_obj.is_none_or(|(_, bt)| t < bt) {
                hit_obj = Some((i, t));
            }
        }
        if let Some((i, t)) = hit_obj {
            if t < best_t {
                return self.shade_object(i, &(o + d * t));
            }
        }
        let h = o + d * best_t;
        let (s, t) = match best_face / 2 {
            0 => (h.y, h.z),
            1 => (h.x, h.z),
            _ => (h.x, h.y),
        };
        room.faces[best_face].shade(s, t)
    }

    fn shade_object(&self, i: usize, h: &Vector3<f64>) -> [f32; 3] {
        match (&self.scene.objects[i], &self.prims[i]) {
            (SceneObject::Sphere { texture, radius, .. }, Prim::Sphere { center, .. }) => {
                let q = (h - center) / *radius;
                let lon = q.y.atan2(q.x) * radius;
                let lat = q.z.clamp(-1.0, 1.0).asin() * radius;
                texture.shade(lon, lat)
            }
            (
                SceneObject::Box { texture, .. },
                Prim::Box {
                    inv_rot,
                    origin,
                    half,
                },
            ) => {
                let q = inv_rot * (h - origin);
                // face = axis where the hit point is closest to the surface
                let axis = (0..3)
                    .min_by(|&a, &b| {
                        (half[a] - q[a].abs())
                            .abs()
                            .total_cmp(&(half[b] - q[b].abs()).abs())
                    })
                    .unwrap();
                let (s, t) = match axis {
                    0 => (q.y, q.z),
                    1 => (q.x, q.z),
                    _ => (q.x, q.y),
                };
                texture.shade(s, t)
            }
            _ => unreachable!("prims mirror objects"),
        }
    }

    /// Renders both lenses at `pose` (world from front camera). Fails when
    /// the camera is outside the room.
    pub fn render(&self, pose: &RigidTransform, rig: &Rig, exec: Exec) -> Result<FisheyeFrame> {
        if !self.scene.contains(&pose.translation) {
            return Err(Error::CameraOutsideRoom);
        }
        Ok(self.render_masked(pose, rig, None, exec))
    }

    /// Render without the room check; a camera outside the room yields
    /// frames filled with the background color. Pixels dropped by `mask`
    /// are left black.
    pub fn render_masked(
        &self,
        pose: &RigidTransform,
        rig: &Rig,
        mask: Option<&FrameMask>,
        exec: Exec,
    ) -> FisheyeFrame {
        let w = rig.width;
        let inside = self.scene.contains(&pose.translation);
        let back_pose = pose.compose(&rig.lens);
        let mut frame = FisheyeFrame::blank(w);
        for (lens, cam, img) in [
            (Lens::Front, pose, &mut frame.front),
            (Lens::Back, &back_pose, &mut frame.back),
        ] {
            let keep = mask.map(|m| m.lens(lens));
            let pixels: Vec<&(usize, std::ops::Range<usize>)> = rig
                .pixels
                .iter()
                .filter(|(k, _)| keep.is_none_or(|m| m[*k]))
                .collect();
            let chunk = 256;
            let n_chunks = pixels.len().div_ceil(chunk);
            let colors = exec.map(n_chunks, |ci| {
                pixels[ci * chunk..((ci + 1) * chunk).min(pixels.len())]
                    .iter()
                    .map(|(_, range)| {
                        if !inside {
                            return self.scene.background;
                        }
                        let mut acc = [0.0f32; 3];
                        for d in &rig.dirs[range.clone()] {
                            let c = self.trace(&cam.translation, &(cam.rotation * d));
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                        let n = range.len() as f32;
                        acc.map(|v| v / n)
                    })
                    .collect::<Vec<_>>()
            });
            for ((k, _), c) in pixels.iter().zip(colors.into_iter().flatten()) {
                img.set_flat(*k, c);
            }
        }
        frame
    }
}

fn slab(o: &Vector3<f64>, d: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut t0, mut t1) = ((-half[k] - o[k]) * inv, (half[k] - o[k]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin > HIT_EPS {
        Some(tmin)
    } else if tmax > HIT_EPS {
        Some(tmax)
    } else {
        None
    }
}

/// Renders one frame with the default lens transform.
pub fn render(
    scene: &SceneSpec,
    pose: &RigidTransform,
    model: &ProjectionModel,
    width: usize,
) -> Result<FisheyeFrame> {
    let rig = Rig::new(model.clone(), default_lens_transform(), width);
    Renderer::new(scene.clone())?.render(pose, &rig, Exec::Parallel)
}

/// Predicted frames for a horizon of actions.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub frames: Vec<FisheyeFrame>,
    /// Some predicted pose left the room; those frames are background only.
    pub left_room: bool,
}

/// Predicts the frames seen at each pose of an action horizon. Action `i`
/// is the camera pose at step `i` relative to the current camera frame.
pub trait PredictiveModel: Sync {
    fn resolution(&self) -> usize;

    /// Pixels outside `mask` may be left unrendered (zero).
    fn predict_masked(&self, actions: &[ActionTuple], mask: Option<&FrameMask>) -> Result<Forecast>;

    fn predict(&self, actions: &[ActionTuple]) -> Result<Forecast> {
        self.predict_masked(actions, None)
    }
}

/// World poses of a horizon: `pose * T(a_i)` for every action.
pub fn horizon_poses(pose: &RigidTransform, actions: &[ActionTuple]) -> Vec<RigidTransform> {
    actions
        .iter()
        .map(|a| pose.compose(&a.to_transform()))
        .collect()
}

/// Exact geometric predictor: renders the scene at every predicted pose.
pub struct OraclePredictor<'a> {
    renderer: &'a Renderer,
    rig: &'a Rig,
    pose: RigidTransform,
    exec: Exec,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(renderer: &'a Renderer, rig: &'a Rig, pose: RigidTransform, exec: Exec) -> Self {
        Self {
            renderer,
            rig,
            pose,
            exec,
        }
    }
}

impl PredictiveModel for OraclePredictor<'_> {
    fn resolution(&self) -> usize {
        self.rig.width
    }

    fn predict_masked(&self, actions: &[ActionTuple], mask: Option<&FrameMask>) -> Result<Forecast> {
        let poses = horizon_poses(&self.pose, actions);
        let left_room = poses
            .iter()
            .any(|p| !self.renderer.scene().contains(&p.translation));
        let frames = poses
            .iter()
            .map(|p| self.renderer.render_masked(p, self.rig, mask, self.exec))
            .collect();
        Ok(Forecast { frames, left_room })
    }
}

/// Model-free predictor that warps the current frame by the rotation part
/// of each action; translations are ignored.
pub struct RotationFlowPredictor<'a> {
    frame: FisheyeFrame,
    rig: &'a Rig,
    exec: Exec,
}

impl<'a> RotationFlowPredictor<'a> {
    pub fn new(frame: FisheyeFrame, rig: &'a Rig, exec: Exec) -> Self {
        Self { frame, rig, exec }
    }
}

impl PredictiveModel for RotationFlowPredictor<'_> {
    fn resolution(&self) -> usize {
        self.rig.width
    }

    fn predict_masked(&self, actions: &[ActionTuple], mask: Option<&FrameMask>) -> Result<Forecast> {
        let frames = actions
            .iter()
            .map(|a| {
                let plan = VcrPlan::new(
                    &a.to_transform().rotation_only(),
                    &self.rig.lens,
                    &self.rig.model,
                    self.rig.width,
                    self.exec,
                )?;
                let mut f = plan.apply(&self.frame, self.exec)?;
                if let Some(m) = mask {
                    f.front.apply_mask(&m.front);
                    f.back.apply_mask(&m.back);
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Forecast {
            frames,
            left_room: false,
        })
    }
}
