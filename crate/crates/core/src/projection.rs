//! Fisheye projection models.
//!
//! A model is a strictly increasing radial function `r(theta)` from the angle
//! off the optical axis to the normalized image radius, with `r(0) = 0`.
//! Image coordinates are standardized: `u` grows rightward along columns,
//! `v` downward along rows, both in `[-1, 1]`, and the azimuth `phi` is
//! measured from `+u` toward `+v`.
//!
//! The default model is equidistant with `r(theta) = theta / pi`, so the
//! image rim is the backward axis and the forward hemisphere fills the disk
//! of radius 0.5.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const RADIUS_SLACK: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCoord {
    pub u: f64,
    pub v: f64,
}

impl ImageCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn radius(&self) -> f64 {
        self.u.hypot(self.v)
    }

    /// Center of pixel `(row, col)` in a `width`-pixel square image.
    pub fn from_pixel(row: usize, col: usize, width: usize) -> Self {
        let w = width as f64;
        Self {
            u: (2 * col + 1) as f64 / w - 1.0,
            v: (2 * row + 1) as f64 / w - 1.0,
        }
    }

    /// Continuous `(row, col)` position; pixel centers are at integers.
    pub fn to_pixel(&self, width: usize) -> (f64, f64) {
        let w = width as f64;
        ((self.v + 1.0) * 0.5 * w - 0.5, (self.u + 1.0) * 0.5 * w - 0.5)
    }
}

/// Pixel-center coordinates of a `width`x`width` image, row-major.
pub fn coordinate_grid(width: usize) -> Vec<ImageCoord> {
    assert!(width >= 1, "resolution must be at least 1");
    (0..width * width)
        .map(|k| ImageCoord::from_pixel(k / width, k % width, width))
        .collect()
}

/// Radial function sampled at strictly increasing angles, interpolated with
/// a monotone (Fritsch-Carlson) cubic Hermite spline.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedProjection {
    theta: Vec<f64>,
    r: Vec<f64>,
    slope: Vec<f64>,
}

impl TabulatedProjection {
    pub fn new(theta: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        if theta.len() != r.len() || theta.len() < 2 {
            return Err(Error::InvalidProjection(
                "need at least two (theta, r) rows".into(),
            ));
        }
        if theta[0] != 0.0 || r[0] != 0.0 {
            return Err(Error::InvalidProjection("first row must be \"0 0\"".into()));
        }
        for k in 1..theta.len() {
            if !(theta[k] > theta[k - 1] && r[k] > r[k - 1]) {
                return Err(Error::InvalidProjection(format!(
                    "row {k} is not strictly increasing"
                )));
            }
        }
        if *theta.last().unwrap() > PI + 1e-12 {
            return Err(Error::InvalidProjection("theta exceeds pi".into()));
        }
        let slope = monotone_slopes(&theta, &r);
        Ok(Self { theta, r, slope })
    }

    /// Reads whitespace-separated `theta r` rows; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut theta = Vec::new();
        let mut r = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidProjection(format!("line {}: {e}", lineno + 1)))?;
            if cols.len() != 2 {
                return Err(Error::InvalidProjection(format!(
                    "line {}: expected two columns",
                    lineno + 1
                )));
            }
            theta.push(cols[0]);
            r.push(cols[1]);
        }
        Self::new(theta, r)
    }

    pub fn max_theta(&self) -> f64 {
        *self.theta.last().unwrap()
    }

    pub fn max_radius(&self) -> f64 {
        *self.r.last().unwrap()
    }

    fn segment(xs: &[f64], x: f64) -> usize {
        match xs.partition_point(|&t| t <= x) {
            0 => 0,
            k => (k - 1).min(xs.len() - 2),
        }
    }

    fn hermite(&self, k: usize, theta: f64) -> f64 {
        let h = self.theta[k + 1] - self.theta[k];
        let t = (theta - self.theta[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.r[k]
            + (t3 - 2.0 * t2 + t) * h * self.slope[k]
            + (-2.0 * t3 + 3.0 * t2) * self.r[k + 1]
            + (t3 - t2) * h * self.slope[k + 1]
    }

    pub fn radius(&self, theta: f64) -> f64 {
        let k = Self::segment(&self.theta, theta);
        self.hermite(k, theta)
    }

    /// Inverse radial function by bisection on the monotone spline.
    pub fn angle(&self, radius: f64) -> f64 {
        let k = Self::segment(&self.r, radius);
        let (mut lo, mut hi) = (self.theta[k], self.theta[k + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.hermite(k, mid) < radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi.max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

fn monotone_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let d: Vec<f64> = (0..n - 1)
        .map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k]))
        .collect();
    let mut m = vec![0.0; n];
    m[0] = d[0];
    m[n - 1] = d[n - 2];
    for k in 1..n - 1 {
        m[k] = if d[k - 1] * d[k] <= 0.0 {
            0.0
        } else {
            // weighted harmonic mean keeps the interpolant monotone
            let (h0, h1) = (x[k] - x[k - 1], x[k + 1] - x[k]);
            let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
            (w1 + w2) / (w1 / d[k - 1] + w2 / d[k])
        };
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProjectionModel {
    /// `r(theta) = theta / fov`; the rim sits at `theta = fov`.
    Equidistant { fov: f64 },
    Tabulated(TabulatedProjection),
}

impl Default for ProjectionModel {
    fn default() -> Self {
        Self::equidistant()
    }
}

impl ProjectionModel {
    pub fn equidistant() -> Self {
        Self::Equidistant { fov: PI }
    }

    /// `"equidistant"` or a path to a two-column table.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if spec == "equidistant" {
            Ok(Self::equidistant())
        } else {
            Ok(Self::Tabulated(TabulatedProjection::load(Path::new(spec))?))
        }
    }

    /// Largest valid standardized radius.
    pub fn max_radius(&self) -> f64 {
        match self {
            Self::Equidistant { .. } => 1.0,
            Self::Tabulated(t) => t.max_radius(),
        }
    }

    pub fn max_theta(&self) -> f64 {
        match self {
            Self::Equidistant { fov } => *fov,
            Self::Tabulated(t) => t.max_theta(),
        }
    }

    pub fn radius(&self, theta: f64) -> f64 {
        match self {
            Self::Equidistant { fov } => theta / fov,
            Self::Tabulated(t) => t.radius(theta),
        }
    }

    pub fn angle(&self, radius: f64) -> f64 {
        match self {
            Self::Equidistant { fov } => fov * radius,
            Self::Tabulated(t) => t.angle(radius),
        }
    }

    /// Unit ray for a standardized image point.
    pub fn back_project(&self, c: ImageCoord) -> Result<Vector3<f64>> {
        self.try_back_project(c)
            .ok_or(Error::OutOfImageCircle { u: c.u, v: c.v })
    }

    /// Like [`Self::back_project`] but `None` outside the image circle.
    pub fn try_back_project(&self, c: ImageCoord) -> Option<Vector3<f64>> {
        let rho = c.radius();
        let max = self.max_radius();
        if rho > max + RADIUS_SLACK {
            return None;
        }
        let theta = self.angle(rho.min(max));
        if theta >= PI {
            // rim of a full-sphere model: the backward axis, for any phi
            return Some(Vector3::new(0.0, 0.0, -1.0));
        }
        let (s, z) = theta.sin_cos();
        if rho == 0.0 {
            return Some(Vector3::new(0.0, 0.0, 1.0));
        }
        Some(Vector3::new(s * c.u / rho, s * c.v / rho, z))
    }

    /// Image point of a unit ray.
    pub fn project(&self, p: &Vector3<f64>) -> Result<ImageCoord> {
        let n = p.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitVector(n));
        }
        self.try_project(p)
            .ok_or(Error::OutOfImageCircle { u: f64::NAN, v: f64::NAN })
    }

    /// Projection without the unit-norm check; `None` when the ray lies
    /// beyond the model's angular range.
    pub fn try_project(&self, p: &Vector3<f64>) -> Option<ImageCoord> {
        let s = p.x.hypot(p.y);
        // atan2 keeps full precision near the optical axis, unlike acos(z)
        let theta = s.atan2(p.z);
        if theta > self.max_theta() + 1e-12 {
            return None;
        }
        let r = self.radius(theta.min(self.max_theta()));
        if s == 0.0 {
            return Some(ImageCoord::new(r, 0.0));
        }
        Some(ImageCoord::new(r * p.x / s, r * p.y / s))
    }

    /// Rays for every pixel center of a `width`x`width` image, row-major;
    /// `None` outside the image circle.
    pub fn ray_grid(&self, width: usize) -> Vec<Option<Vector3<f64>>> {
        coordinate_grid(width)
            .into_iter()
            .map(|c| self.try_back_project(c))
            .collect()
    }
}

/// Pixels whose centers lie inside the image circle of `model`.
pub fn circle_mask(width: usize, model: &ProjectionModel) -> Vec<bool> {
    let max = model.max_radius();
    coordinate_grid(width)
        .into_iter()
        .map(|c| c.radius() <= max + RADIUS_SLACK)
        .collect()
}
