//! Ray-space warping induced by 3D scene motion.
//!
//! A point moving by V = (V_X, V_Y, V_Z) displaces the ray observed at
//! (x, y, u, v) to
//!
//! ```text
//! w(x, V) = (x + V_X - (u/G) V_Z,  y + V_Y - (v/G) V_Z,  u, v)
//! ```
//!
//! with G the plane separation. Only the camera-plane coordinates move; the
//! relative pixel coordinates are preserved, so warping resamples across the
//! camera grid at a fixed pixel. Registration estimates V such that the second
//! frame warped by V reproduces the first frame.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::flowfield::{FlowField, FlowLayout};
use crate::geometry::MotionVector;
use crate::lightfield::LightField;

/// A warped light field plus the mask of rays whose source stayed inside the
/// camera aperture. Invalid rays hold 0.0 and must be excluded downstream.
pub struct Warped {
    pub lf: LightField,
    pub valid: Array4<bool>,
}

impl Warped {
    pub fn valid_fraction(&self) -> f64 {
        let n = self.valid.len();
        if n == 0 {
            return 0.0;
        }
        self.valid.iter().filter(|v| **v).count() as f64 / n as f64
    }
}

/// Source camera-plane position for the ray at (x, y, u, v) under motion v.
#[inline]
pub fn warp_xy(x: f64, y: f64, u: f64, v: f64, gamma: f64, m: &MotionVector) -> (f64, f64) {
    (x + m.x - u / gamma * m.z, y + m.y - v / gamma * m.z)
}

/// Warp an entire light field by a single motion vector.
pub fn warp_constant(lf: &LightField, m: &MotionVector) -> Result<Warped> {
    if !m.is_finite() {
        return Err(Error::invalid("warp motion must be finite"));
    }
    let c = &lf.calib;
    let [nx, ny, nu, nv] = c.dims();
    let mut data = Array4::zeros((nx, ny, nu, nv));
    let mut valid = Array4::from_elem((nx, ny, nu, nv), false);
    for ix in 0..nx {
        let x = c.x_of(ix as f64);
        for iy in 0..ny {
            let y = c.y_of(iy as f64);
            for iu in 0..nu {
                let u = c.u_of(iu as f64);
                for iv in 0..nv {
                    let v = c.v_of(iv as f64);
                    let (sx, sy) = warp_xy(x, y, u, v, c.gamma, m);
                    if let Some(val) = lf.sample_camera(c.ix_of(sx), c.iy_of(sy), iu, iv) {
                        data[[ix, iy, iu, iv]] = val;
                        valid[[ix, iy, iu, iv]] = true;
                    }
                }
            }
        }
    }
    Ok(Warped {
        lf: LightField::new(c.clone(), data, format!("{}+warp", lf.label))?,
        valid,
    })
}

/// Warp with a per-entry flow field. A full-ray flow addresses each ray
/// individually; a central-view flow is broadcast across the camera grid at
/// matching pixel coordinates. Invalid flow entries yield invalid rays.
pub fn warp_flow(lf: &LightField, flow: &FlowField) -> Result<Warped> {
    let c = &lf.calib;
    let [nx, ny, nu, nv] = c.dims();
    match flow.layout {
        FlowLayout::FullRay(d) if d == [nx, ny, nu, nv] => {}
        FlowLayout::CentralView(d) if d == [nu, nv] => {}
        _ => {
            return Err(Error::DimensionMismatch(format!(
                "flow layout {:?} does not match light field {}x{}x{}x{}",
                flow.layout, nx, ny, nu, nv
            )))
        }
    }
    let mut data = Array4::zeros((nx, ny, nu, nv));
    let mut valid = Array4::from_elem((nx, ny, nu, nv), false);
    for ix in 0..nx {
        let x = c.x_of(ix as f64);
        for iy in 0..ny {
            let y = c.y_of(iy as f64);
            for iu in 0..nu {
                let u = c.u_of(iu as f64);
                for iv in 0..nv {
                    let i = match flow.layout {
                        FlowLayout::FullRay(_) => flow.index4(ix, iy, iu, iv),
                        FlowLayout::CentralView(_) => flow.index2(iu, iv),
                    };
                    if !flow.is_valid(i) {
                        continue;
                    }
                    let m = flow.get(i);
                    let v = c.v_of(iv as f64);
                    let (sx, sy) = warp_xy(x, y, u, v, c.gamma, &m);
                    if let Some(val) = lf.sample_camera(c.ix_of(sx), c.iy_of(sy), iu, iv) {
                        data[[ix, iy, iu, iv]] = val;
                        valid[[ix, iy, iu, iv]] = true;
                    }
                }
            }
        }
    }
    Ok(Warped {
        lf: LightField::new(c.clone(), data, format!("{}+warp", lf.label))?,
        valid,
    })
}
