//! Shared fixtures for unit tests: deterministic pseudo-random streams,
//! camera rigs, and simple synthetic scenes.

use ndarray::Array4;

use crate::geometry::{Calibration, MotionVector};
use crate::gradients::RayGradients;
use crate::synth::{NoiseTexture, Plane, SceneSpec, Texture};

/// xorshift64* style stream in [-0.5, 0.5).
pub(crate) fn rand_stream(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed.max(1);
    move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }
}

/// Narrow-aperture desk rig: 9x9 cameras 0.45 mm apart, 0.25 mm pixels.
pub(crate) fn test_calib(n_uv: usize) -> Calibration {
    Calibration {
        gamma: 100.0,
        cam_spacing_x: 0.45,
        cam_spacing_y: 0.45,
        pixel_scale_u: 0.25,
        pixel_scale_v: 0.25,
        n_x: 9,
        n_y: 9,
        n_u: n_uv,
        n_v: n_uv,
    }
}

/// Wide-pixel rig: large (u, v) extent gives windows enough angular
/// diversity to pin all three motion components, while the 1 mm camera
/// spacing keeps finite-difference gradients accurate on smooth textures.
pub(crate) fn wide_pixel_rig(n_uv: usize, pixel: f64) -> Calibration {
    Calibration {
        gamma: 100.0,
        cam_spacing_x: 1.0,
        cam_spacing_y: 1.0,
        pixel_scale_u: pixel,
        pixel_scale_v: pixel,
        n_x: 9,
        n_y: 9,
        n_u: n_uv,
        n_v: n_uv,
    }
}

pub(crate) fn accuracy_rig() -> Calibration {
    wide_pixel_rig(96, 0.8)
}

/// Single unbounded noise plane with chosen texture band and motion.
pub(crate) fn noise_plane(
    z: f64,
    scale: f64,
    blur: f64,
    motion: MotionVector,
    seed: u64,
) -> SceneSpec {
    let tex = Texture::Noise(NoiseTexture::new(seed, scale, blur, 0.15));
    SceneSpec::new(vec![Plane::infinite(z, tex).with_motion(motion)], seed).unwrap()
}

/// Random gradient grid; `project` optionally restricts every gradient
/// triple to a fixed 2D subspace.
pub(crate) fn random_gradients(
    calib: Calibration,
    seed: u64,
    project: Option<[[f64; 3]; 2]>,
) -> RayGradients {
    let mut next = rand_stream(seed);
    let [nx, ny, nu, nv] = calib.dims();
    let shape = (nx, ny, nu, nv);
    let mut lx = Array4::zeros(shape);
    let mut ly = Array4::zeros(shape);
    let mut lz = Array4::zeros(shape);
    let mut lt = Array4::zeros(shape);
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                for iv in 0..nv {
                    let i = [ix, iy, iu, iv];
                    let g = match &project {
                        None => [next(), next(), next()],
                        Some([e1, e2]) => {
                            let (a, b) = (next(), next());
                            [
                                a * e1[0] + b * e2[0],
                                a * e1[1] + b * e2[1],
                                a * e1[2] + b * e2[2],
                            ]
                        }
                    };
                    lx[i] = g[0];
                    ly[i] = g[1];
                    lz[i] = g[2];
                    lt[i] = next();
                }
            }
        }
    }
    RayGradients {
        calib,
        lx,
        ly,
        lz,
        lt,
    }
}
