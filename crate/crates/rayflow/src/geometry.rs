//! Two-plane ray parameterization and the calibration that maps grid indices
//! to metric coordinates.
//!
//! A ray is identified by its intersections (x, y, 0) and (x+u, y+v, gamma)
//! with the planes Z=0 and Z=gamma. All lengths are millimeters. Continuous
//! coordinates are zero at the grid center, so the central sub-aperture camera
//! sits at x = y = 0 and the central pixel of each view at u = v = 0.

use crate::error::{Error, Result};

/// Metric description of the sampled light field grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Separation between the two parameterization planes, mm.
    pub gamma: f64,
    /// Camera spacing along x, mm per angular index step.
    pub cam_spacing_x: f64,
    /// Camera spacing along y, mm per angular index step.
    pub cam_spacing_y: f64,
    /// mm on the Z=gamma plane per pixel index step along u.
    pub pixel_scale_u: f64,
    /// mm on the Z=gamma plane per pixel index step along v.
    pub pixel_scale_v: f64,
    /// Angular grid dimensions (number of cameras).
    pub n_x: usize,
    pub n_y: usize,
    /// Spatial dimensions of each sub-aperture view.
    pub n_u: usize,
    pub n_v: usize,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("gamma_mm", self.gamma),
            ("cam_spacing_x_mm", self.cam_spacing_x),
            ("cam_spacing_y_mm", self.cam_spacing_y),
            ("pixel_scale_u_mm", self.pixel_scale_u),
            ("pixel_scale_v_mm", self.pixel_scale_v),
        ];
        for (name, value) in pos {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and > 0")));
            }
        }
        if self.n_x < 3 || self.n_y < 3 {
            return Err(Error::invalid(
                "n_x and n_y must be >= 3 for central differences across cameras",
            ));
        }
        if self.n_u == 0 || self.n_v == 0 {
            return Err(Error::invalid("n_u and n_v must be >= 1"));
        }
        Ok(())
    }

    pub fn center_ix(&self) -> f64 {
        (self.n_x as f64 - 1.0) / 2.0
    }
    pub fn center_iy(&self) -> f64 {
        (self.n_y as f64 - 1.0) / 2.0
    }
    pub fn center_iu(&self) -> f64 {
        (self.n_u as f64 - 1.0) / 2.0
    }
    pub fn center_iv(&self) -> f64 {
        (self.n_v as f64 - 1.0) / 2.0
    }

    /// Continuous camera coordinate of angular index `ix`.
    pub fn x_of(&self, ix: f64) -> f64 {
        (ix - self.center_ix()) * self.cam_spacing_x
    }
    pub fn y_of(&self, iy: f64) -> f64 {
        (iy - self.center_iy()) * self.cam_spacing_y
    }
    /// Continuous pixel coordinate of spatial index `iu`.
    pub fn u_of(&self, iu: f64) -> f64 {
        (iu - self.center_iu()) * self.pixel_scale_u
    }
    pub fn v_of(&self, iv: f64) -> f64 {
        (iv - self.center_iv()) * self.pixel_scale_v
    }

    /// Fractional angular index of camera coordinate `x`.
    pub fn ix_of(&self, x: f64) -> f64 {
        x / self.cam_spacing_x + self.center_ix()
    }
    pub fn iy_of(&self, y: f64) -> f64 {
        y / self.cam_spacing_y + self.center_iy()
    }
    pub fn iu_of(&self, u: f64) -> f64 {
        u / self.pixel_scale_u + self.center_iu()
    }
    pub fn iv_of(&self, v: f64) -> f64 {
        v / self.pixel_scale_v + self.center_iv()
    }

    /// Full aperture span along x: distance between the outermost cameras.
    pub fn aperture_x(&self) -> f64 {
        (self.n_x - 1) as f64 * self.cam_spacing_x
    }
    pub fn aperture_y(&self) -> f64 {
        (self.n_y - 1) as f64 * self.cam_spacing_y
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n_x, self.n_y, self.n_u, self.n_v]
    }
}

/// A ray in camera-centric coordinates, optionally carrying the grid indices
/// it was sampled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayCoord {
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub indices: Option<[usize; 4]>,
}

impl RayCoord {
    pub fn new(x: f64, y: f64, u: f64, v: f64) -> Self {
        RayCoord {
            x,
            y,
            u,
            v,
            indices: None,
        }
    }

    /// Ray at grid indices (ix, iy, iu, iv) under `calib`.
    pub fn from_indices(calib: &Calibration, ix: usize, iy: usize, iu: usize, iv: usize) -> Self {
        RayCoord {
            x: calib.x_of(ix as f64),
            y: calib.y_of(iy as f64),
            u: calib.u_of(iu as f64),
            v: calib.v_of(iv as f64),
            indices: Some([ix, iy, iu, iv]),
        }
    }
}

/// A ray in scene-centric coordinates: the emitting point and the direction
/// angles (polar from the Z axis, azimuth in the XY plane).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneRay {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
    pub phi: f64,
}

/// 3D scene motion in mm per frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotionVector {
    pub const ZERO: MotionVector = MotionVector {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        MotionVector { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn scaled(&self, s: f64) -> Self {
        MotionVector::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(&self, o: &MotionVector) -> Self {
        MotionVector::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &MotionVector) -> Self {
        MotionVector::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Camera-centric coordinates of a scene ray:
/// x = X - Z tan(theta) cos(phi), u = gamma tan(theta) cos(phi), and the
/// y/v analogues with sin(phi).
pub fn scene_to_ray(s: &SceneRay, calib: &Calibration) -> Result<RayCoord> {
    for value in [s.x, s.y, s.z, s.theta, s.phi] {
        if !value.is_finite() {
            return Err(Error::invalid("scene ray has non-finite component"));
        }
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&s.theta) {
        return Err(Error::invalid("theta must lie in [0, pi/2)"));
    }
    let tc = s.theta.tan() * s.phi.cos();
    let ts = s.theta.tan() * s.phi.sin();
    Ok(RayCoord::new(
        s.x - s.z * tc,
        s.y - s.z * ts,
        calib.gamma * tc,
        calib.gamma * ts,
    ))
}

/// Inverse of [`scene_to_ray`] once a depth Z is assumed for the emitting
/// point: X = x + Z u / gamma, Y = y + Z v / gamma. A central ray (u = v = 0)
/// has unconstrained azimuth; phi = 0 is returned.
pub fn ray_to_scene(r: &RayCoord, z: f64, calib: &Calibration) -> Result<SceneRay> {
    for value in [r.x, r.y, r.u, r.v, z] {
        if !value.is_finite() {
            return Err(Error::invalid("ray has non-finite component"));
        }
    }
    let tan_theta = (r.u * r.u + r.v * r.v).sqrt() / calib.gamma;
    let phi = if r.u == 0.0 && r.v == 0.0 {
        0.0
    } else {
        r.v.atan2(r.u)
    };
    Ok(SceneRay {
        x: r.x + z * r.u / calib.gamma,
        y: r.y + z * r.v / calib.gamma,
        z,
        theta: tan_theta.atan(),
        phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> Calibration {
        Calibration {
            gamma: 100.0,
            cam_spacing_x: 0.45,
            cam_spacing_y: 0.45,
            pixel_scale_u: 0.25,
            pixel_scale_v: 0.25,
            n_x: 9,
            n_y: 9,
            n_u: 96,
            n_v: 96,
        }
    }

    #[test]
    fn axial_scene_ray_projects_to_camera_position() {
        let s = SceneRay {
            x: 5.0,
            y: 2.0,
            z: 100.0,
            theta: 0.0,
            phi: 0.0,
        };
        let r = scene_to_ray(&s, &calib()).unwrap();
        assert_eq!((r.x, r.y, r.u, r.v), (5.0, 2.0, 0.0, 0.0));
    }

    #[test]
    fn oblique_ray_matches_direct_substitution() {
        let s = SceneRay {
            x: 10.0,
            y: 0.0,
            z: 100.0,
            theta: std::f64::consts::FRAC_PI_4,
            phi: 0.0,
        };
        let r = scene_to_ray(&s, &calib()).unwrap();
        assert!((r.x + 90.0).abs() < 1e-9);
        assert!(r.y.abs() < 1e-9);
        assert!((r.u - 100.0).abs() < 1e-9);
        assert!(r.v.abs() < 1e-9);
    }

    #[test]
    fn central_ray_back_projects() {
        let r = RayCoord::new(0.0, 0.0, 0.0, 0.0);
        let s = ray_to_scene(&r, 300.0, &calib()).unwrap();
        assert_eq!((s.x, s.y, s.z), (0.0, 0.0, 300.0));
        assert_eq!(s.theta, 0.0);
        assert_eq!(s.phi, 0.0);
    }

    #[test]
    fn back_projection_examples() {
        let c = calib();
        let s = ray_to_scene(&RayCoord::new(-90.0, 0.0, 100.0, 0.0), 100.0, &c).unwrap();
        assert!((s.x - 10.0).abs() < 1e-9 && s.y.abs() < 1e-9);

        let s = ray_to_scene(&RayCoord::new(1.0, 1.0, 50.0, 50.0), 200.0, &c).unwrap();
        assert!((s.x - 101.0).abs() < 1e-9 && (s.y - 101.0).abs() < 1e-9);
    }

    #[test]
    fn round_trip_is_identity() {
        let c = calib();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            // xorshift, enough for coverage of the coordinate range
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let r = RayCoord::new(
                (next() - 0.5) * 4.0,
                (next() - 0.5) * 4.0,
                (next() - 0.5) * 40.0,
                (next() - 0.5) * 40.0,
            );
            let z = 50.0 + next() * 500.0;
            let s = ray_to_scene(&r, z, &c).unwrap();
            let r2 = scene_to_ray(&s, &c).unwrap();
            assert!((r.x - r2.x).abs() < 1e-9, "x {} vs {}", r.x, r2.x);
            assert!((r.y - r2.y).abs() < 1e-9);
            assert!((r.u - r2.u).abs() < 1e-9);
            assert!((r.v - r2.v).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let s = SceneRay {
            x: f64::NAN,
            y: 0.0,
            z: 100.0,
            theta: 0.0,
            phi: 0.0,
        };
        assert!(scene_to_ray(&s, &calib()).is_err());
        let s = SceneRay {
            x: 0.0,
            y: 0.0,
            z: 100.0,
            theta: std::f64::consts::FRAC_PI_2,
            phi: 0.0,
        };
        assert!(scene_to_ray(&s, &calib()).is_err());
    }

    #[test]
    fn index_coordinate_mapping_is_centered() {
        let c = calib();
        assert_eq!(c.x_of(4.0), 0.0);
        assert_eq!(c.u_of(c.center_iu()), 0.0);
        assert!((c.x_of(5.0) - 0.45).abs() < 1e-12);
        assert!((c.ix_of(c.x_of(7.0)) - 7.0).abs() < 1e-12);
        assert!((c.iu_of(c.u_of(13.0)) - 13.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_validation() {
        let mut c = calib();
        assert!(c.validate().is_ok());
        c.n_x = 2;
        assert!(c.validate().is_err());
        let mut c = calib();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
    }
}
