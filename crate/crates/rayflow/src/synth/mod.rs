//! Analytic light-field renderer with exact ground-truth motion.
//!
//! Scenes are stacks of textured planes, each optionally translating and/or
//! rotating rigidly between frames. A ray (x, y, u, v) is intersected with
//! every plane at the requested time; the nearest hit supplies the radiance
//! by evaluating the plane's texture at the hit point pulled back to the
//! plane's rest frame. Because both the geometry and the textures are
//! analytic, rendered pairs obey ray brightness constancy to interpolation
//! precision and every solver can be checked against exact motion.

mod parse;
mod texture;

pub use parse::{load_scene, parse_scene};
pub(crate) use parse::parse_camera as parse_camera_section;
pub use texture::{NoiseTexture, Texture};

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowfield::FlowField;
use crate::geometry::{Calibration, MotionVector};
use crate::lightfield::LightField;

/// Rigid rotation applied progressively over frames: at time t the plane is
/// rotated by `angle * t` radians about `axis` through `pivot`.
#[derive(Debug, Clone)]
pub struct Rotation {
    pub axis: [f64; 3],
    pub angle: f64,
    pub pivot: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Plane {
    /// Rest depth of the plane, mm; must be > 0.
    pub z: f64,
    pub texture: Texture,
    pub albedo: f64,
    /// Translation per frame interval, mm.
    pub motion: MotionVector,
    pub rotation: Option<Rotation>,
    /// Lateral extent in the plane's rest frame; infinite bounds allowed.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Plane {
    pub fn infinite(z: f64, texture: Texture) -> Self {
        Plane {
            z,
            texture,
            albedo: 1.0,
            motion: MotionVector::ZERO,
            rotation: None,
            x_range: (f64::NEG_INFINITY, f64::INFINITY),
            y_range: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn with_motion(mut self, m: MotionVector) -> Self {
        self.motion = m;
        self
    }

    pub fn with_x_range(mut self, lo: f64, hi: f64) -> Self {
        self.x_range = (lo, hi);
        self
    }

    fn is_unbounded(&self) -> bool {
        self.x_range == (f64::NEG_INFINITY, f64::INFINITY)
            && self.y_range == (f64::NEG_INFINITY, f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub planes: Vec<Plane>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(mut planes: Vec<Plane>, seed: u64) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::invalid("scene needs at least one plane"));
        }
        for p in &planes {
            if !(p.z.is_finite() && p.z > 0.0) {
                return Err(Error::invalid("plane depth must be finite and > 0"));
            }
            if !p.motion.is_finite() {
                return Err(Error::invalid("plane motion must be finite"));
            }
        }
        planes.sort_by(|a, b| a.z.total_cmp(&b.z));
        if !planes.last().unwrap().is_unbounded() {
            return Err(Error::invalid(
                "the farthest plane must be unbounded (scene background)",
            ));
        }
        Ok(SceneSpec { planes, seed })
    }

    /// Single unbounded noise-textured plane — the default test scene.
    pub fn single_plane(z: f64, motion: MotionVector, seed: u64) -> SceneSpec {
        let tex = Texture::Noise(NoiseTexture::new(seed, 1.0, 2.0, 0.15));
        SceneSpec::new(vec![Plane::infinite(z, tex).with_motion(motion)], seed).unwrap()
    }

    /// Near half-plane moving +X, far background moving -X: the standard
    /// motion-discontinuity scene. `m` is the lateral speed in mm per frame.
    pub fn two_plane(m: f64, seed: u64) -> SceneSpec {
        let near = Plane::infinite(250.0, Texture::Noise(NoiseTexture::new(seed, 1.0, 2.0, 0.15)))
            .with_motion(MotionVector::new(m, 0.0, 0.0))
            .with_x_range(f64::NEG_INFINITY, 0.0);
        let far = Plane::infinite(
            350.0,
            Texture::Noise(NoiseTexture::new(seed ^ 0x5eed, 1.0, 2.0, 0.15)),
        )
        .with_motion(MotionVector::new(-m, 0.0, 0.0));
        SceneSpec::new(vec![near, far], seed).unwrap()
    }
}

/// Default desk-scale camera: 9x9 views of 96x96 pixels, 3.6 mm aperture,
/// 100 mm plane separation, field of view covering the test planes at 300 mm.
pub fn default_calibration() -> Calibration {
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

struct Hit {
    plane: usize,
    /// Depth of the hit along the ray (world Z of the intersection).
    z: f64,
    world: [f64; 3],
    tex: (f64, f64),
}

fn rodrigues(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (kx, ky, kz) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let c = angle.cos();
    let s = angle.sin();
    let t = 1.0 - c;
    [
        [c + kx * kx * t, kx * ky * t - kz * s, kx * kz * t + ky * s],
        [ky * kx * t + kz * s, c + ky * ky * t, ky * kz * t - kx * s],
        [kz * kx * t - ky * s, kz * ky * t + kx * s, c + kz * kz * t],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_vec_t(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Intersect the ray from (x, y, 0) with direction (du, dv, 1) against one
/// plane at time t. Returns the hit depth, world point and rest-frame texture
/// coordinates.
fn intersect_plane(p: &Plane, t: f64, x: f64, y: f64, du: f64, dv: f64) -> Option<Hit> {
    let tz = t * p.motion.z;
    match &p.rotation {
        None => {
            let z_t = p.z + tz;
            if z_t <= 1e-9 {
                return None;
            }
            let wx = x + z_t * du;
            let wy = y + z_t * dv;
            let s = wx - t * p.motion.x;
            let tt = wy - t * p.motion.y;
            if !in_range(s, p.x_range) || !in_range(tt, p.y_range) {
                return None;
            }
            Some(Hit {
                plane: usize::MAX,
                z: z_t,
                world: [wx, wy, z_t],
                tex: (s, tt),
            })
        }
        Some(rot) => {
            let r = rodrigues(rot.axis, rot.angle * t);
            let shift = [t * p.motion.x, t * p.motion.y, tz];
            let n = mat_vec(&r, [0.0, 0.0, 1.0]);
            // a rest-frame plane point, transformed to time t
            let q0 = [rot.pivot[0], rot.pivot[1], p.z];
            let q0d = [q0[0] - rot.pivot[0], q0[1] - rot.pivot[1], q0[2] - rot.pivot[2]];
            let p_ref = mat_vec(&r, q0d);
            let p_ref = [
                p_ref[0] + rot.pivot[0] + shift[0],
                p_ref[1] + rot.pivot[1] + shift[1],
                p_ref[2] + rot.pivot[2] + shift[2],
            ];
            let denom = n[0] * du + n[1] * dv + n[2];
            if denom.abs() < 1e-12 {
                return None;
            }
            let z = (n[0] * (p_ref[0] - x) + n[1] * (p_ref[1] - y) + n[2] * p_ref[2]) / denom;
            if z <= 1e-9 {
                return None;
            }
            let world = [x + z * du, y + z * dv, z];
            let rel = [
                world[0] - rot.pivot[0] - shift[0],
                world[1] - rot.pivot[1] - shift[1],
                world[2] - rot.pivot[2] - shift[2],
            ];
            let back = mat_vec_t(&r, rel);
            let s = back[0] + rot.pivot[0];
            let tt = back[1] + rot.pivot[1];
            if !in_range(s, p.x_range) || !in_range(tt, p.y_range) {
                return None;
            }
            Some(Hit {
                plane: usize::MAX,
                z,
                world,
                tex: (s, tt),
            })
        }
    }
}

fn in_range(v: f64, r: (f64, f64)) -> bool {
    v >= r.0 && v <= r.1
}

fn nearest_hit(scene: &SceneSpec, t: f64, x: f64, y: f64, du: f64, dv: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (k, p) in scene.planes.iter().enumerate() {
        if let Some(mut hit) = intersect_plane(p, t, x, y, du, dv) {
            hit.plane = k;
            if best.as_ref().is_none_or(|b| hit.z < b.z) {
                best = Some(hit);
            }
        }
    }
    best
}

/// Single-sample radiance of the ray through (x, y, 0) and (x+u, y+v, gamma)
/// at time t. Lambertian planes: albedo times texture, no view dependence.
pub fn radiance(scene: &SceneSpec, gamma: f64, t: f64, x: f64, y: f64, u: f64, v: f64) -> f64 {
    match nearest_hit(scene, t, x, y, u / gamma, v / gamma) {
        Some(hit) => {
            let p = &scene.planes[hit.plane];
            (p.albedo * p.texture.eval(hit.tex.0, hit.tex.1)).clamp(0.0, 1.0)
        }
        None => 0.0,
    }
}

/// 2x2 supersampled radiance at pixel scale (psu, psv).
fn radiance_aa(
    scene: &SceneSpec,
    gamma: f64,
    t: f64,
    x: f64,
    y: f64,
    u: f64,
    v: f64,
    psu: f64,
    psv: f64,
) -> f64 {
    let mut acc = 0.0;
    for su in [-0.25, 0.25] {
        for sv in [-0.25, 0.25] {
            acc += radiance(scene, gamma, t, x, y, u + su * psu, v + sv * psv);
        }
    }
    acc * 0.25
}

/// Render one view at an arbitrary continuous camera position. Used by the
/// renderer itself and by finite-difference oracles probing off-grid cameras.
pub fn render_view(scene: &SceneSpec, calib: &Calibration, t: f64, x: f64, y: f64) -> Array2<f64> {
    let mut view = Array2::zeros((calib.n_u, calib.n_v));
    for iu in 0..calib.n_u {
        let u = calib.u_of(iu as f64);
        for iv in 0..calib.n_v {
            let v = calib.v_of(iv as f64);
            view[[iu, iv]] = radiance_aa(
                scene,
                calib.gamma,
                t,
                x,
                y,
                u,
                v,
                calib.pixel_scale_u,
                calib.pixel_scale_v,
            );
        }
    }
    view
}

pub fn render(scene: &SceneSpec, calib: &Calibration, t: f64) -> Result<LightField> {
    calib.validate()?;
    let mut data = Array4::zeros((calib.n_x, calib.n_y, calib.n_u, calib.n_v));
    for ix in 0..calib.n_x {
        let x = calib.x_of(ix as f64);
        for iy in 0..calib.n_y {
            let y = calib.y_of(iy as f64);
            let view = render_view(scene, calib, t, x, y);
            data.slice_mut(ndarray::s![ix, iy, .., ..]).assign(&view);
        }
    }
    LightField::new(calib.clone(), data, format!("t{t}"))
}

/// Exact ground truth rasterized on the central view, plus the per-ray mask
/// of rays that observe the same surface in both frames.
pub struct GroundTruth {
    /// Per central-view pixel motion of the visible surface point, mm.
    pub flow: FlowField,
    /// Per central-view pixel disparity alpha = gamma / depth.
    pub alpha: Array2<f64>,
    /// Index of the visible plane per central-view pixel; -1 where none.
    pub plane_id: Array2<i32>,
    /// Rays that see the same plane in both frames within the aperture.
    pub valid: Array4<bool>,
}

/// Displacement over one frame of the surface point `w` on plane `p`.
fn point_motion(p: &Plane, w: [f64; 3]) -> MotionVector {
    match &p.rotation {
        None => p.motion,
        Some(rot) => {
            let r = rodrigues(rot.axis, rot.angle);
            let rel = [w[0] - rot.pivot[0], w[1] - rot.pivot[1], w[2] - rot.pivot[2]];
            let moved = mat_vec(&r, rel);
            MotionVector::new(
                moved[0] + rot.pivot[0] + p.motion.x - w[0],
                moved[1] + rot.pivot[1] + p.motion.y - w[1],
                moved[2] + rot.pivot[2] + p.motion.z - w[2],
            )
        }
    }
}

pub fn render_pair(
    scene: &SceneSpec,
    calib: &Calibration,
) -> Result<(LightField, LightField, GroundTruth)> {
    let lf0 = render(scene, calib, 0.0)?;
    let lf1 = render(scene, calib, 1.0)?;

    let cx = calib.x_of(((calib.n_x - 1) / 2) as f64);
    let cy = calib.y_of(((calib.n_y - 1) / 2) as f64);
    let mut flow = FlowField::central_view([calib.n_u, calib.n_v]);
    let mut alpha = Array2::zeros((calib.n_u, calib.n_v));
    let mut plane_id = Array2::from_elem((calib.n_u, calib.n_v), -1i32);
    for iu in 0..calib.n_u {
        let u = calib.u_of(iu as f64);
        for iv in 0..calib.n_v {
            let v = calib.v_of(iv as f64);
            if let Some(hit) =
                nearest_hit(scene, 0.0, cx, cy, u / calib.gamma, v / calib.gamma)
            {
                let m = point_motion(&scene.planes[hit.plane], hit.world);
                let i = flow.index2(iu, iv);
                flow.set(i, m, true, 1.0);
                alpha[[iu, iv]] = calib.gamma / hit.z;
                plane_id[[iu, iv]] = hit.plane as i32;
            }
        }
    }

    let mut valid = Array4::from_elem((calib.n_x, calib.n_y, calib.n_u, calib.n_v), false);
    let x_lo = calib.x_of(0.0);
    let x_hi = calib.x_of((calib.n_x - 1) as f64);
    let y_lo = calib.y_of(0.0);
    let y_hi = calib.y_of((calib.n_y - 1) as f64);
    for ix in 0..calib.n_x {
        let x = calib.x_of(ix as f64);
        for iy in 0..calib.n_y {
            let y = calib.y_of(iy as f64);
            for iu in 0..calib.n_u {
                let u = calib.u_of(iu as f64);
                for iv in 0..calib.n_v {
                    let v = calib.v_of(iv as f64);
                    let Some(hit) =
                        nearest_hit(scene, 0.0, x, y, u / calib.gamma, v / calib.gamma)
                    else {
                        continue;
                    };
                    let m = point_motion(&scene.planes[hit.plane], hit.world);
                    // the ray observing this point one frame later
                    let x1 = x + m.x - u / calib.gamma * m.z;
                    let y1 = y + m.y - v / calib.gamma * m.z;
                    if !(x_lo..=x_hi).contains(&x1) || !(y_lo..=y_hi).contains(&y1) {
                        continue;
                    }
                    let still_visible =
                        nearest_hit(scene, 1.0, x1, y1, u / calib.gamma, v / calib.gamma)
                            .is_some_and(|h| h.plane == hit.plane);
                    valid[[ix, iy, iu, iv]] = still_visible;
                }
            }
        }
    }

    Ok((
        lf0,
        lf1,
        GroundTruth {
            flow,
            alpha,
            plane_id,
            valid,
        },
    ))
}

/// Affine sensor noise: variance linear in the signal (photon term) plus a
/// constant read-noise floor.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub photon_gain: f64,
    pub read_sigma: f64,
    pub seed: u64,
}

pub fn add_noise(lf: &LightField, nm: &NoiseModel) -> Result<LightField> {
    if nm.photon_gain < 0.0 || nm.read_sigma < 0.0 {
        return Err(Error::invalid("noise parameters must be non-negative"));
    }
    if nm.photon_gain == 0.0 && nm.read_sigma == 0.0 {
        return Ok(lf.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let mut data = lf.data.clone();
    for value in data.iter_mut() {
        let sigma = (nm.photon_gain * value.max(0.0) + nm.read_sigma * nm.read_sigma).sqrt();
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *value = (*value + sigma * z).clamp(0.0, 1.0);
    }
    LightField::new(lf.calib.clone(), data, format!("{}+noise", lf.label))
}
