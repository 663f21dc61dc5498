//! Light field gradients, the coefficients of the per-ray motion constraint
//! L_X V_X + L_Y V_Y + L_Z V_Z + L_t = 0.
//!
//! L_X and L_Y are derivatives across camera position, computed on the
//! temporal average of the two frames (central differences, one-sided at the
//! grid edges). L_t is the plain frame difference. L_Z is assembled pointwise
//! as -(u/gamma) L_X - (v/gamma) L_Y using the continuous (u, v) coordinates.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::geometry::Calibration;
use crate::lightfield::LightField;

/// Per-ray gradient fields, same dimensions as the source light field.
/// L_X, L_Y, L_Z are radiance per mm; L_t is radiance per frame interval.
#[derive(Debug, Clone)]
pub struct RayGradients {
    pub calib: Calibration,
    pub lx: Array4<f64>,
    pub ly: Array4<f64>,
    pub lz: Array4<f64>,
    pub lt: Array4<f64>,
}

impl RayGradients {
    pub fn dims(&self) -> [usize; 4] {
        self.calib.dims()
    }

    /// Gradient triple (L_X, L_Y, L_Z) at one ray.
    pub fn g(&self, ix: usize, iy: usize, iu: usize, iv: usize) -> [f64; 3] {
        let i = [ix, iy, iu, iv];
        [self.lx[i], self.ly[i], self.lz[i]]
    }

    /// All four gradients bilinearly interpolated at fractional pixel
    /// coordinates within view (ix, iy): returns [L_X, L_Y, L_Z, L_t].
    pub fn sample_uv(&self, ix: usize, iy: usize, fu: f64, fv: f64) -> Option<[f64; 4]> {
        let nu = self.calib.n_u;
        let nv = self.calib.n_v;
        if !(0.0..=(nu - 1) as f64).contains(&fu) || !(0.0..=(nv - 1) as f64).contains(&fv) {
            return None;
        }
        let u0 = (fu.floor() as usize).min(nu - 1);
        let v0 = (fv.floor() as usize).min(nv - 1);
        let u1 = (u0 + 1).min(nu - 1);
        let v1 = (v0 + 1).min(nv - 1);
        let tu = fu - u0 as f64;
        let tv = fv - v0 as f64;
        let w = [
            (1.0 - tu) * (1.0 - tv),
            tu * (1.0 - tv),
            (1.0 - tu) * tv,
            tu * tv,
        ];
        let idx = [
            [ix, iy, u0, v0],
            [ix, iy, u1, v0],
            [ix, iy, u0, v1],
            [ix, iy, u1, v1],
        ];
        let mut out = [0.0; 4];
        for (wk, ik) in w.iter().zip(idx.iter()) {
            out[0] += wk * self.lx[*ik];
            out[1] += wk * self.ly[*ik];
            out[2] += wk * self.lz[*ik];
            out[3] += wk * self.lt[*ik];
        }
        Some(out)
    }
}

/// Central difference along one angular axis of `data`, one-sided at the
/// edges, divided by the metric step.
fn camera_derivative(data: &Array4<f64>, axis: usize, step: f64) -> Array4<f64> {
    let dims = data.dim();
    let n = data.shape()[axis];
    let mut out = Array4::zeros(dims);
    let get = |i: [usize; 4]| data[i];
    let (n0, n1, n2, n3) = dims;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    let idx = [i0, i1, i2, i3];
                    let pos = idx[axis];
                    let mut lo = idx;
                    let mut hi = idx;
                    let denom = if pos == 0 {
                        hi[axis] = 1;
                        step
                    } else if pos == n - 1 {
                        lo[axis] = n - 2;
                        step
                    } else {
                        lo[axis] = pos - 1;
                        hi[axis] = pos + 1;
                        2.0 * step
                    };
                    out[idx] = (get(hi) - get(lo)) / denom;
                }
            }
        }
    }
    out
}

/// Gradients of a light field pair taken at the midpoint in time.
pub fn compute_gradients(lf0: &LightField, lf1: &LightField) -> Result<RayGradients> {
    if !lf0.same_grid(lf1) {
        return Err(Error::DimensionMismatch(
            "light field pair must share calibration and dimensions".into(),
        ));
    }
    let calib = lf0.calib.clone();
    let avg = (&lf0.data + &lf1.data) * 0.5;
    let lx = camera_derivative(&avg, 0, calib.cam_spacing_x);
    let ly = camera_derivative(&avg, 1, calib.cam_spacing_y);
    let lt = &lf1.data - &lf0.data;

    let mut lz = Array4::zeros(avg.dim());
    for ix in 0..calib.n_x {
        for iy in 0..calib.n_y {
            for iu in 0..calib.n_u {
                let u = calib.u_of(iu as f64);
                for iv in 0..calib.n_v {
                    let v = calib.v_of(iv as f64);
                    let i = [ix, iy, iu, iv];
                    lz[i] = -(u / calib.gamma) * lx[i] - (v / calib.gamma) * ly[i];
                }
            }
        }
    }
    Ok(RayGradients {
        calib,
        lx,
        ly,
        lz,
        lt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib(n_u: usize, n_v: usize) -> Calibration {
        Calibration {
            gamma: 100.0,
            cam_spacing_x: 0.45,
            cam_spacing_y: 0.45,
            pixel_scale_u: 0.25,
            pixel_scale_v: 0.25,
            n_x: 5,
            n_y: 5,
            n_u,
            n_v,
        }
    }

    #[test]
    fn constant_pair_has_zero_gradients() {
        let lf = LightField::constant(calib(8, 8), 0.5, "t").unwrap();
        let g = compute_gradients(&lf, &lf).unwrap();
        for field in [&g.lx, &g.ly, &g.lz, &g.lt] {
            assert!(field.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linear_camera_ramp_recovers_exact_slope() {
        let c = calib(9, 9);
        let slope = 0.1; // radiance per mm of camera coordinate
        let mut lf = LightField::constant(c.clone(), 0.0, "t").unwrap();
        for ix in 0..c.n_x {
            let x = c.x_of(ix as f64);
            for iy in 0..c.n_y {
                for iu in 0..c.n_u {
                    for iv in 0..c.n_v {
                        lf.data[[ix, iy, iu, iv]] = 0.5 + slope * x;
                    }
                }
            }
        }
        let g = compute_gradients(&lf, &lf).unwrap();
        for ix in 0..c.n_x {
            for iu in 0..c.n_u {
                let u = c.u_of(iu as f64);
                for iv in 0..c.n_v {
                    let i = [ix, 2, iu, iv];
                    assert!((g.lx[i] - slope).abs() < 1e-12);
                    assert!(g.ly[i].abs() < 1e-12);
                    assert!((g.lz[i] + u / c.gamma * slope).abs() < 1e-12);
                    assert!(g.lt[i].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lz_identity_and_central_ray() {
        let c = calib(9, 9); // odd: u = v = 0 exists at index 4
        let mut lf0 = LightField::constant(c.clone(), 0.0, "t0").unwrap();
        let mut lf1 = LightField::constant(c.clone(), 0.0, "t1").unwrap();
        for (i, v) in lf0.data.iter_mut().enumerate() {
            *v = ((i * 37 + 11) % 113) as f64 / 113.0;
        }
        for (i, v) in lf1.data.iter_mut().enumerate() {
            *v = ((i * 53 + 29) % 127) as f64 / 127.0;
        }
        let g = compute_gradients(&lf0, &lf1).unwrap();
        for ix in 0..c.n_x {
            for iy in 0..c.n_y {
                for iu in 0..c.n_u {
                    let u = c.u_of(iu as f64);
                    for iv in 0..c.n_v {
                        let v = c.v_of(iv as f64);
                        let i = [ix, iy, iu, iv];
                        let residual = g.lz[i] + u / c.gamma * g.lx[i] + v / c.gamma * g.ly[i];
                        assert!(residual.abs() <= f64::EPSILON * 4.0);
                    }
                }
                assert_eq!(g.lz[[ix, iy, 4, 4]], 0.0);
            }
        }
    }

    #[test]
    fn mismatched_pair_rejected() {
        let a = LightField::constant(calib(8, 8), 0.1, "a").unwrap();
        let b = LightField::constant(calib(8, 6), 0.1, "b").unwrap();
        assert!(compute_gradients(&a, &b).is_err());
    }
}
