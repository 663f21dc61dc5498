//! Dense 3D scene flow from pairs of 4D light fields.
//!
//! A light field camera samples the radiance function L(x, y, u, v): each ray
//! is indexed by the camera position (x, y) on the aperture plane and the
//! pixel (u, v) on a parallel plane at distance gamma. Small 3D scene motion
//! V = (V_X, V_Y, V_Z) shifts rays across camera positions only, which ties
//! motion to the light field gradients through one linear constraint per ray:
//!
//! ```text
//! L_X V_X + L_Y V_Y + L_Z V_Z + L_t = 0
//! ```
//!
//! The equation is under-constrained (three unknowns per ray), so this crate
//! provides the three regularized solvers built on top of it:
//!
//! * [`local`] — least-squares over local 4D windows, with a coarse-to-fine
//!   pyramidal variant for large motions,
//! * [`global`] — variational smoothing over the full 4D domain (quadratic or
//!   Charbonnier penalties, SOR solver),
//! * [`sag`] — structure-aware global method that aggregates the constraint
//!   over each scene point's disparity plane and solves on the central view.
//!
//! [`tensor`] analyzes which motions are recoverable from a window via the
//! 3x3 light field structure tensor, and [`synth`] renders synthetic light
//! field pairs with exact ground-truth motion for verification. [`sweep`]
//! scripts parameter studies over camera and scene configurations.

pub mod error;
pub mod filter;
pub mod flowfield;
pub mod geometry;
pub mod global;
pub mod gradients;
pub mod lightfield;
pub mod local;
pub mod metrics;
pub mod pyramid;
pub mod sag;
pub mod sweep;
pub mod synth;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod viz;
pub mod warp;

pub use error::{Error, Result};
pub use flowfield::{FlowField, FlowLayout};
pub use geometry::{Calibration, MotionVector, RayCoord, SceneRay};
pub use gradients::RayGradients;
pub use lightfield::LightField;
