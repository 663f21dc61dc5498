//! Coarse-to-fine pyramid over the pixel axes.
//!
//! Only (u, v) are decimated; the camera grid is already small and carries
//! the motion parallax, so it is kept at full resolution on every level.
//! Decimation rescales `pixel_scale` so coordinates stay metric, which means
//! flow values estimated on any level are in mm and need no rescaling when
//! moved across levels.

use crate::error::{Error, Result};
use crate::filter::gaussian_filter4;
use crate::lightfield::LightField;
use ndarray::Array4;

pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_FACTOR: f64 = 0.5;
/// Levels whose pixel grid would drop below this size are not built.
pub const MIN_PIXELS: usize = 8;

pub struct Pyramid {
    /// levels[0] is the input resolution; later entries are coarser.
    pub levels: Vec<LightField>,
    /// True when the requested depth was cut short by [`MIN_PIXELS`].
    pub truncated: bool,
}

impl Pyramid {
    pub fn coarsest(&self) -> &LightField {
        self.levels.last().expect("pyramid has at least one level")
    }
}

pub fn build_pyramid(lf: &LightField, n_levels: usize, factor: f64) -> Result<Pyramid> {
    if n_levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::invalid("pyramid factor must lie in (0, 1)"));
    }
    let mut levels = vec![lf.clone()];
    let mut truncated = false;
    while levels.len() < n_levels {
        let prev = levels.last().unwrap();
        let nu = prev.calib.n_u;
        let nv = prev.calib.n_v;
        let new_nu = (nu as f64 * factor).round() as usize;
        let new_nv = (nv as f64 * factor).round() as usize;
        if new_nu < MIN_PIXELS || new_nv < MIN_PIXELS {
            truncated = true;
            break;
        }
        levels.push(decimate_uv(prev, new_nu, new_nv)?);
    }
    Ok(Pyramid { levels, truncated })
}

/// Blur and resample the pixel axes of one level. The blur width matches the
/// resampling rate s via sigma = 0.5 sqrt(s^2 - 1), which leaves an s = 1
/// axis untouched.
fn decimate_uv(lf: &LightField, new_nu: usize, new_nv: usize) -> Result<LightField> {
    let c = &lf.calib;
    let su = c.n_u as f64 / new_nu as f64;
    let sv = c.n_v as f64 / new_nv as f64;
    let sigma_u = 0.5 * (su * su - 1.0).max(0.0).sqrt();
    let sigma_v = 0.5 * (sv * sv - 1.0).max(0.0).sqrt();
    let blurred = gaussian_filter4(&lf.data, [0.0, 0.0, sigma_u, sigma_v]);
    let smooth = LightField::new(c.clone(), blurred, lf.label.clone())?;

    let mut calib = c.clone();
    calib.n_u = new_nu;
    calib.n_v = new_nv;
    calib.pixel_scale_u = c.pixel_scale_u * su;
    calib.pixel_scale_v = c.pixel_scale_v * sv;

    let cu_old = c.center_iu();
    let cv_old = c.center_iv();
    let cu_new = calib.center_iu();
    let cv_new = calib.center_iv();
    let mut data = Array4::zeros((c.n_x, c.n_y, new_nu, new_nv));
    for ix in 0..c.n_x {
        for iy in 0..c.n_y {
            for ju in 0..new_nu {
                let fu = ((ju as f64 - cu_new) * su + cu_old).clamp(0.0, (c.n_u - 1) as f64);
                for jv in 0..new_nv {
                    let fv =
                        ((jv as f64 - cv_new) * sv + cv_old).clamp(0.0, (c.n_v - 1) as f64);
                    data[[ix, iy, ju, jv]] =
                        smooth.sample_pixel(ix, iy, fu, fv).unwrap_or(0.0);
                }
            }
        }
    }
    LightField::new(calib, data, format!("{}/2", lf.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Calibration;

    fn calib(n_u: usize, n_v: usize) -> Calibration {
        Calibration {
            gamma: 100.0,
            cam_spacing_x: 0.45,
            cam_spacing_y: 0.45,
            pixel_scale_u: 0.25,
            pixel_scale_v: 0.25,
            n_x: 3,
            n_y: 3,
            n_u,
            n_v,
        }
    }

    #[test]
    fn halving_dims_and_doubling_scale() {
        let lf = LightField::constant(calib(96, 96), 0.5, "t").unwrap();
        let pyr = build_pyramid(&lf, 3, 0.5).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert!(!pyr.truncated);
        let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.calib.n_u).collect();
        assert_eq!(sizes, vec![96, 48, 24]);
        assert!((pyr.levels[1].calib.pixel_scale_u - 0.5).abs() < 1e-12);
        assert!((pyr.levels[2].calib.pixel_scale_u - 1.0).abs() < 1e-12);
        // camera axes untouched
        for level in &pyr.levels {
            assert_eq!(level.calib.n_x, 3);
            assert!((level.calib.cam_spacing_x - 0.45).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_survives_decimation_exactly() {
        let lf = LightField::constant(calib(32, 32), 0.37, "t").unwrap();
        let pyr = build_pyramid(&lf, 2, 0.5).unwrap();
        for value in pyr.levels[1].data.iter() {
            assert!((value - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_pixel_positions_are_preserved() {
        // The u coordinate of the grid center must be 0 on every level, and
        // a coarse pixel's metric span must cover s fine pixels.
        let lf = LightField::constant(calib(96, 64), 0.0, "t").unwrap();
        let pyr = build_pyramid(&lf, 3, 0.5).unwrap();
        for level in &pyr.levels {
            let c = &level.calib;
            assert_eq!(c.u_of(c.center_iu()), 0.0);
            let span = c.pixel_scale_u * c.n_u as f64;
            assert!((span - 0.25 * 96.0).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_below_minimum_size() {
        let lf = LightField::constant(calib(16, 16), 0.0, "t").unwrap();
        let pyr = build_pyramid(&lf, 4, 0.5).unwrap();
        // 16 -> 8 is allowed, 8 -> 4 is not
        assert_eq!(pyr.levels.len(), 2);
        assert!(pyr.truncated);
        assert_eq!(pyr.coarsest().calib.n_u, 8);
    }

    #[test]
    fn bad_parameters_rejected() {
        let lf = LightField::constant(calib(16, 16), 0.0, "t").unwrap();
        assert!(build_pyramid(&lf, 0, 0.5).is_err());
        assert!(build_pyramid(&lf, 2, 1.0).is_err());
        assert!(build_pyramid(&lf, 2, 0.0).is_err());
    }
}
