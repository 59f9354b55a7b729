//! Rotation appearance flow and dual-fisheye virtual camera rotation.
//!
//! Warping is backward: every destination pixel is back-projected to a ray,
//! the ray is carried into the source camera frame by the pattern transform,
//! and the source image is sampled where that ray projects. A ray is usable
//! only if it lies in the source lens's forward hemisphere (`z >= 0`).
//!
//! With `t` the rotation of the camera (camera-frame, applied on the right
//! of the pose), `virtual_camera_rotation(render(P), t)` approximates
//! `render(P * t)`: the world appears rotated by `t^-1`.

use nalgebra::{Matrix3, Vector3};

use crate::image::{FisheyeFrame, Image};
use crate::par::Exec;
use crate::projection::{coordinate_grid, ImageCoord, ProjectionModel};
use crate::se3::{frame_patterns, RigidTransform};
use crate::{Error, Result};

const ROTATION_ONLY_TOL: f64 = 1e-12;

/// Per-destination-pixel source coordinates with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub source: Vec<ImageCoord>,
    /// Rotated ray has `z >= 0` and projects inside the source circle.
    pub valid: Vec<bool>,
    max_radius: f64,
}

impl FlowField {
    pub fn identity(width: usize, model: &ProjectionModel) -> Self {
        let source = coordinate_grid(width);
        let valid = source
            .iter()
            .map(|c| {
                model
                    .try_back_project(*c)
                    .is_some_and(|p| p.z >= 0.0)
            })
            .collect();
        Self {
            width,
            source,
            valid,
            max_radius: model.max_radius(),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Flow that rotates every destination ray by `t_mu_nu` into the source
/// frame. Fails on transforms with a translation.
pub fn rotation_flow(
    t_mu_nu: &RigidTransform,
    model: &ProjectionModel,
    width: usize,
    exec: Exec,
) -> Result<FlowField> {
    let tn = t_mu_nu.translation.norm();
    if tn >= ROTATION_ONLY_TOL {
        return Err(Error::NonRotationalTransform(tn));
    }
    let rot = t_mu_nu.rotation;
    let max_radius = model.max_radius();
    let rows = exec.map(width, |row| {
        let mut src = Vec::with_capacity(width);
        let mut ok = Vec::with_capacity(width);
        for col in 0..width {
            let c = ImageCoord::from_pixel(row, col, width);
            let entry = model.try_back_project(c).and_then(|p| {
                let q: Vector3<f64> = rot * p;
                model.try_project(&q).map(|s| (s, q.z >= 0.0))
            });
            match entry {
                Some((s, front_facing)) => {
                    src.push(s);
                    ok.push(front_facing && s.radius() <= max_radius + 1e-12);
                }
                None => {
                    src.push(c);
                    ok.push(false);
                }
            }
        }
        (src, ok)
    });
    let mut source = Vec::with_capacity(width * width);
    let mut valid = Vec::with_capacity(width * width);
    for (s, v) in rows {
        source.extend(s);
        valid.extend(v);
    }
    Ok(FlowField {
        width,
        source,
        valid,
        max_radius,
    })
}

/// Samples `src` at the flow's source coordinates. Invalid or uncovered
/// pixels are zero; the second return value marks covered pixels.
///
/// Neighbours outside the image circle are dropped and the remaining
/// bilinear weights renormalized, so the black surround never bleeds in.
pub fn sample_bilinear(flow: &FlowField, src: &Image, exec: Exec) -> Result<(Image, Vec<bool>)> {
    let w = flow.width;
    if src.width() != w || src.height() != w {
        return Err(Error::ResolutionMismatch(w, src.width()));
    }
    let in_circle: Vec<bool> = coordinate_grid(w)
        .iter()
        .map(|c| c.radius() <= flow.max_radius + 1e-12)
        .collect();
    let rows = exec.map(w, |row| {
        let mut vals = Vec::with_capacity(w);
        let mut cov = Vec::with_capacity(w);
        for col in 0..w {
            let k = row * w + col;
            let s = flow.source[k];
            let sampled = if flow.valid[k] && s.radius() <= flow.max_radius + 1e-12 {
                bilinear(src, &in_circle, s, w)
            } else {
                None
            };
            cov.push(sampled.is_some());
            vals.push(sampled.unwrap_or([0.0; 3]));
        }
        (vals, cov)
    });
    let mut out = Image::square(w);
    let mut coverage = Vec::with_capacity(w * w);
    for (row, (vals, cov)) in rows.into_iter().enumerate() {
        for (col, v) in vals.into_iter().enumerate() {
            out.set(row, col, v);
        }
        coverage.extend(cov);
    }
    Ok((out, coverage))
}

#[inline]
fn bilinear(src: &Image, in_circle: &[bool], s: ImageCoord, w: usize) -> Option<[f32; 3]> {
    let (py, px) = s.to_pixel(w);
    let last = (w - 1) as f64;
    let (py, px) = (py.clamp(0.0, last), px.clamp(0.0, last));
    let (r0, c0) = (py.floor() as usize, px.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(w - 1), (c0 + 1).min(w - 1));
    let (fy, fx) = (py - r0 as f64, px - c0 as f64);
    let taps = [
        (r0, c0, (1.0 - fy) * (1.0 - fx)),
        (r0, c1, (1.0 - fy) * fx),
        (r1, c0, fy * (1.0 - fx)),
        (r1, c1, fy * fx),
    ];
    let mut acc = [0.0f64; 3];
    let mut wsum = 0.0;
    for (r, c, wt) in taps {
        if wt == 0.0 || !in_circle[r * w + c] {
            continue;
        }
        let p = src.get(r, c);
        for ch in 0..3 {
            acc[ch] += wt * p[ch] as f64;
        }
        wsum += wt;
    }
    if wsum <= 0.0 {
        return None;
    }
    Some([
        (acc[0] / wsum) as f32,
        (acc[1] / wsum) as f32,
        (acc[2] / wsum) as f32,
    ])
}

/// A sampled prediction with its coverage mask.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub image: Image,
    pub mask: Vec<bool>,
}

/// Combines the four pattern predictions into a frame. On pixels both
/// candidates cover, the same-lens prediction wins.
pub fn blend(ff: &Prediction, fb: &Prediction, bf: &Prediction, bb: &Prediction) -> Result<FisheyeFrame> {
    let w = ff.image.width();
    for p in [fb, bf, bb] {
        if p.image.width() != w {
            return Err(Error::ResolutionMismatch(w, p.image.width()));
        }
    }
    let pick = |same: &Prediction, other: &Prediction| {
        let mut out = Image::square(w);
        for k in 0..w * w {
            if same.mask[k] {
                out.set_flat(k, same.image.get_flat(k));
            } else if other.mask[k] {
                out.set_flat(k, other.image.get_flat(k));
            }
        }
        out.clamp01();
        out
    };
    Ok(FisheyeFrame {
        front: pick(ff, fb),
        back: pick(bb, bf),
    })
}

/// The four flows for one camera rotation, reusable across frames.
#[derive(Clone, Debug)]
pub struct VcrPlan {
    pub ff: FlowField,
    pub fb: FlowField,
    pub bf: FlowField,
    pub bb: FlowField,
    /// Exactly no rotation: the frame passes through unresampled instead of
    /// having each lens's rear ring refilled from the other lens.
    identity: bool,
}

impl VcrPlan {
    pub fn new(
        t: &RigidTransform,
        lens: &RigidTransform,
        model: &ProjectionModel,
        width: usize,
        exec: Exec,
    ) -> Result<Self> {
        let p = frame_patterns(t, lens);
        Ok(Self {
            ff: rotation_flow(&p.ff, model, width, exec)?,
            fb: rotation_flow(&p.fb, model, width, exec)?,
            bf: rotation_flow(&p.bf, model, width, exec)?,
            bb: rotation_flow(&p.bb, model, width, exec)?,
            identity: t.rotation == Matrix3::identity(),
        })
    }

    pub fn width(&self) -> usize {
        self.ff.width
    }

    pub fn apply(&self, frame: &FisheyeFrame, exec: Exec) -> Result<FisheyeFrame> {
        if frame.resolution() != self.width() {
            return Err(Error::ResolutionMismatch(self.width(), frame.resolution()));
        }
        if self.identity {
            return Ok(frame.clone());
        }
        let predict = |flow: &FlowField, src: &Image| -> Result<Prediction> {
            let (image, mask) = sample_bilinear(flow, src, exec)?;
            Ok(Prediction { image, mask })
        };
        let ff = predict(&self.ff, &frame.front)?;
        let fb = predict(&self.fb, &frame.back)?;
        let bf = predict(&self.bf, &frame.front)?;
        let bb = predict(&self.bb, &frame.back)?;
        blend(&ff, &fb, &bf, &bb)
    }
}

/// The frame the rig would capture after rotating by `t`.
pub fn virtual_camera_rotation(
    frame: &FisheyeFrame,
    t: &RigidTransform,
    lens: &RigidTransform,
    model: &ProjectionModel,
    exec: Exec,
) -> Result<FisheyeFrame> {
    VcrPlan::new(t, lens, model, frame.resolution(), exec)?.apply(frame, exec)
}
