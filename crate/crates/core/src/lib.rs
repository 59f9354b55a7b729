//! Dual-fisheye virtual camera rotation (VCR) toolkit.
//!
//! The crate turns a dual-fisheye frame into the frame the same rig would see
//! after an arbitrary 3D rotation, using only the lens projection model: a
//! rotation induces depth-independent image motion, so no depth is needed.
//! Around that core sit the pieces needed to use it for robot learning and
//! control:
//!
//! * [`se3`]: rigid transforms, roll-pitch-yaw actions, the four front/back
//!   frame patterns and the conjugation that lifts planar robot actions to
//!   6-DoF camera actions.
//! * [`projection`]: invertible fisheye models (equidistant, tabulated).
//! * [`flow`]: rotation flow fields, bilinear sampling, front/back blending
//!   and the end-to-end [`flow::virtual_camera_rotation`].
//! * [`augment`]: dataset ingestion, slicing and randomized augmentation.
//! * [`render`]: a ray-cast synthetic scene used as ground truth and as a
//!   pose-conditioned predictive model.
//! * [`servo`]: image-space MPC costs, CEM, the env/obj selector, horizon
//!   fallback and closed-loop trials.
//!
//! Data-parallel loops go through [`par::Exec`]; building without the
//! default `parallel` feature makes every loop sequential.

pub mod augment;
pub mod error;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod par;
pub mod projection;
pub mod render;
pub mod rng;
pub mod se3;
pub mod servo;

pub use error::{Error, Result};
