//! Structure-aware global flow.
//!
//! A scene point at depth Z appears in every camera view, shifted by the
//! disparity alpha = gamma / Z per mm of camera offset; the rays seeing it
//! form a 2D plane in the 4D grid. Gathering those rays gives a data term
//! anchored on the central view that is exact for correct alpha — every ray
//! constrains the same moving point — so the solve runs on the 2D central
//! grid. Gathered rays are weighted by camera distance and by agreement of
//! per-view disparity (occlusion), and the smoothness coupling is relaxed
//! where the first-pass flow or the disparity has strong edges.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::flowfield::{FlowField, FlowLayout};
use crate::geometry::{Calibration, MotionVector};
use crate::global::{GlobalParams, Penalty, SolveStats};
use crate::gradients::RayGradients;
use crate::lightfield::LightField;
use crate::local::{masked_gradients, mean_abs_lt};
use crate::pyramid::build_pyramid;
use crate::tensor::eigh3;
use crate::warp::warp_flow;

const ALPHA_MAGIC: [u8; 4] = *b"RALF";
const ALPHA_VERSION: u16 = 1;

/// Per-central-view-pixel disparity (mm of (u, v) shift per mm of camera
/// offset), its reciprocal, and a confidence score in [0, 1].
#[derive(Debug, Clone)]
pub struct DisparityMap {
    alpha: Array2<f64>,
    d_alpha: Array2<f64>,
    confidence: Array2<f64>,
    bounds: (f64, f64),
}

impl DisparityMap {
    /// Wraps an alpha grid, clamping values into `bounds` so the reciprocal
    /// stays finite.
    pub fn new(alpha: Array2<f64>, confidence: Array2<f64>, bounds: (f64, f64)) -> Result<Self> {
        let (lo, hi) = bounds;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("alpha bounds must satisfy 0 < min <= max"));
        }
        if alpha.dim() != confidence.dim() {
            return Err(Error::DimensionMismatch(
                "alpha and confidence grids must have equal shape".into(),
            ));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("alpha values must be finite"));
        }
        let alpha = alpha.mapv(|a| a.clamp(lo, hi));
        let d_alpha = alpha.mapv(|a| 1.0 / a);
        let confidence = confidence.mapv(|c| c.clamp(0.0, 1.0));
        Ok(DisparityMap {
            alpha,
            d_alpha,
            confidence,
            bounds,
        })
    }

    pub fn constant(dims: [usize; 2], alpha: f64, bounds: (f64, f64)) -> Result<Self> {
        Self::new(
            Array2::from_elem((dims[0], dims[1]), alpha),
            Array2::from_elem((dims[0], dims[1]), 1.0),
            bounds,
        )
    }

    pub fn dims(&self) -> [usize; 2] {
        let (nu, nv) = self.alpha.dim();
        [nu, nv]
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn alpha(&self, iu: usize, iv: usize) -> f64 {
        self.alpha[[iu, iv]]
    }

    pub fn d_alpha(&self, iu: usize, iv: usize) -> f64 {
        self.d_alpha[[iu, iv]]
    }

    pub fn confidence(&self, iu: usize, iv: usize) -> f64 {
        self.confidence[[iu, iv]]
    }

    pub fn mean_d_alpha(&self) -> f64 {
        self.d_alpha.iter().sum::<f64>() / self.d_alpha.len() as f64
    }

    /// Bilinear alpha at fractional pixel coordinates, clamped to the grid.
    fn sample_alpha(&self, fu: f64, fv: f64) -> f64 {
        let [nu, nv] = self.dims();
        let fu = fu.clamp(0.0, (nu - 1) as f64);
        let fv = fv.clamp(0.0, (nv - 1) as f64);
        let u0 = (fu.floor() as usize).min(nu - 1);
        let v0 = (fv.floor() as usize).min(nv - 1);
        let u1 = (u0 + 1).min(nu - 1);
        let v1 = (v0 + 1).min(nv - 1);
        let tu = fu - u0 as f64;
        let tv = fv - v0 as f64;
        self.alpha[[u0, v0]] * (1.0 - tu) * (1.0 - tv)
            + self.alpha[[u1, v0]] * tu * (1.0 - tv)
            + self.alpha[[u0, v1]] * (1.0 - tu) * tv
            + self.alpha[[u1, v1]] * tu * tv
    }

    /// Resamples onto a new grid (center-aligned bilinear). Disparity is a
    /// metric ratio, so values carry over unchanged when the pixel pitch
    /// changes.
    pub fn resample(&self, nu: usize, nv: usize) -> DisparityMap {
        let [onu, onv] = self.dims();
        if [onu, onv] == [nu, nv] {
            return self.clone();
        }
        let su = onu as f64 / nu as f64;
        let sv = onv as f64 / nv as f64;
        let (cu_o, cv_o) = ((onu as f64 - 1.0) / 2.0, (onv as f64 - 1.0) / 2.0);
        let (cu_n, cv_n) = ((nu as f64 - 1.0) / 2.0, (nv as f64 - 1.0) / 2.0);
        let mut alpha = Array2::zeros((nu, nv));
        let mut conf = Array2::zeros((nu, nv));
        for ju in 0..nu {
            let fu = ((ju as f64 - cu_n) * su + cu_o).clamp(0.0, (onu - 1) as f64);
            for jv in 0..nv {
                let fv = ((jv as f64 - cv_n) * sv + cv_o).clamp(0.0, (onv - 1) as f64);
                alpha[[ju, jv]] = self.sample_alpha(fu, fv);
                let u0 = (fu.floor() as usize).min(onu - 1);
                let v0 = (fv.floor() as usize).min(onv - 1);
                conf[[ju, jv]] = self.confidence[[u0, v0]];
            }
        }
        DisparityMap::new(alpha, conf, self.bounds).expect("resample preserves validity")
    }

    /// Binary container: magic "RALF", version, dims, bounds, then f32 alpha
    /// and confidence grids.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let [nu, nv] = self.dims();
        let mut buf: Vec<u8> = Vec::with_capacity(32 + nu * nv * 8);
        buf.extend_from_slice(&ALPHA_MAGIC);
        buf.extend_from_slice(&ALPHA_VERSION.to_le_bytes());
        buf.extend_from_slice(&(nu as u32).to_le_bytes());
        buf.extend_from_slice(&(nv as u32).to_le_bytes());
        buf.extend_from_slice(&self.bounds.0.to_le_bytes());
        buf.extend_from_slice(&self.bounds.1.to_le_bytes());
        for a in self.alpha.iter() {
            buf.extend_from_slice(&(*a as f32).to_le_bytes());
        }
        for c in self.confidence.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<DisparityMap> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::FlowFormat("truncated disparity file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != ALPHA_MAGIC {
            return Err(Error::FlowFormat("bad magic, expected RALF".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != ALPHA_VERSION {
            return Err(Error::FlowFormat(format!(
                "unsupported disparity file version {version}"
            )));
        }
        let nu = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let nv = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let lo = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let hi = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut grid = |_: &str| -> Result<Array2<f64>> {
            let mut g = Array2::zeros((nu, nv));
            for x in g.iter_mut() {
                *x = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
            }
            Ok(g)
        };
        let alpha = grid("alpha")?;
        let conf = grid("confidence")?;
        DisparityMap::new(alpha, conf, (lo, hi))
    }
}

/// Bandwidths of the gathering and smoothness weights, plus the smoothness
/// strengths used by [`sag_solve`].
#[derive(Debug, Clone)]
pub struct SAGWeights {
    /// Gaussian radius of the camera-distance window weight, in (u, v) pixel
    /// units.
    pub sigma_g: f64,
    /// Occlusion weight bandwidth, in d_alpha = 1/alpha units.
    pub sigma_o: f64,
    /// Flow-gradient bandwidth of the smoothness map, mm per pixel step.
    pub sigma_c: f64,
    /// Depth-gradient bandwidth of the smoothness map, d_alpha per pixel
    /// step.
    pub sigma_d: f64,
    /// Smoothness weight for V_X and V_Y.
    pub lambda: f64,
    /// Smoothness weight for V_Z.
    pub lambda_z: f64,
}

impl SAGWeights {
    /// Defaults scaled to a disparity map: the occlusion and depth-edge
    /// bandwidths track the mean inverse disparity of the scene.
    pub fn defaults_for(dmap: &DisparityMap) -> SAGWeights {
        let md = dmap.mean_d_alpha();
        SAGWeights {
            sigma_g: 1.5,
            sigma_o: 0.1 * md,
            sigma_c: 0.05,
            sigma_d: 0.1 * md,
            lambda: 8.0,
            lambda_z: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("sigma_g", self.sigma_g),
            ("sigma_o", self.sigma_o),
            ("sigma_c", self.sigma_c),
            ("sigma_d", self.sigma_d),
            ("lambda", self.lambda),
            ("lambda_z", self.lambda_z),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// One gathered ray of a disparity plane.
#[derive(Debug, Clone, Copy)]
pub struct PlaneRay {
    /// Camera indices (ix, iy).
    pub cam: [usize; 2],
    /// Fractional (u, v) pixel position inside that camera's view.
    pub fuv: [f64; 2],
    /// Interpolated gradients [L_X, L_Y, L_Z, L_t].
    pub grad: [f64; 4],
    /// Window weight h = h_g * h_o, in (0, 1].
    pub weight: f64,
}

/// All rays of the disparity plane anchored at one central-view pixel.
#[derive(Debug, Clone)]
pub struct PlaneSample {
    pub center: [usize; 2],
    pub alpha: f64,
    pub rays: Vec<PlaneRay>,
}

/// Plane-sweep disparity estimation. Candidate alphas are scored by the
/// radiance variance of the gathered plane (one scene point has one radiance
/// under Lambertian reflection); the winning candidate is refined with a
/// parabolic sub-step and scored by the curvature of the variance curve.
/// Pixels with a flat score curve get low confidence and inherit the median
/// alpha of their confident neighbours.
pub fn estimate_disparity(
    lf: &LightField,
    alpha_range: (f64, f64),
    steps: usize,
) -> Result<DisparityMap> {
    let (lo, hi) = alpha_range;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
        return Err(Error::invalid("alpha range must satisfy 0 < min < max"));
    }
    if steps < 3 {
        return Err(Error::invalid("plane sweep needs at least 3 candidates"));
    }
    let c = &lf.calib;
    let [nx, ny, nu, nv] = c.dims();
    let da = (hi - lo) / (steps - 1) as f64;
    let min_count = (nx * ny / 2).max(4);

    let mut alpha = Array2::from_elem((nu, nv), 0.5 * (lo + hi));
    let mut curv = Array2::zeros((nu, nv));
    let mut floor = Array2::zeros((nu, nv));
    let mut vol = Array3::from_elem((nu, nv, steps), f64::NAN);
    let mut cams: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(nx * ny);
    for iu in 0..nu {
        let u = c.u_of(iu as f64);
        for iv in 0..nv {
            let v = c.v_of(iv as f64);
            // Every candidate must be scored over the same camera subset:
            // variances over changing subsets are not comparable and bias the
            // minimum near the image border. The projected position is affine
            // in alpha, so a camera that stays in-frame at both range ends
            // stays in-frame for every candidate in between.
            cams.clear();
            for ix in 0..nx {
                let dx = c.x_of(ix as f64);
                for iy in 0..ny {
                    let dy = c.y_of(iy as f64);
                    let inside = |a: f64| {
                        let fu = c.iu_of(u - a * dx);
                        let fv = c.iv_of(v - a * dy);
                        (0.0..=(nu - 1) as f64).contains(&fu)
                            && (0.0..=(nv - 1) as f64).contains(&fv)
                    };
                    if inside(lo) && inside(hi) {
                        cams.push((dx, dy, ix, iy));
                    }
                }
            }
            if cams.len() < min_count {
                continue; // stays NaN: midpoint alpha, zero confidence
            }
            let n = cams.len() as f64;
            for k in 0..steps {
                let a = lo + k as f64 * da;
                let mut sum = 0.0;
                let mut sum2 = 0.0;
                for &(dx, dy, ix, iy) in &cams {
                    let fu = c.iu_of(u - a * dx);
                    let fv = c.iv_of(v - a * dy);
                    let s = lf.sample_pixel(ix, iy, fu, fv).unwrap_or(0.0);
                    sum += s;
                    sum2 += s * s;
                }
                let mean = sum / n;
                vol[[iu, iv, k]] = (sum2 / n - mean * mean).max(0.0);
            }
        }
    }

    // Aggregate each candidate's score over a 3x3 spatial window before the
    // argmin. A weakly textured pixel has a shallow true basin that a chance
    // re-alignment of the sample lattice with the texture can undercut; the
    // neighbours do not share the coincidence and wash the false dip out.
    let mut scores = vec![f64::NAN; steps];
    for iu in 0..nu {
        for iv in 0..nv {
            if !vol[[iu, iv, 0]].is_finite() {
                continue; // keep midpoint alpha, zero confidence
            }
            scores.iter_mut().for_each(|s| *s = 0.0);
            let mut n_nb = 0.0;
            for ju in iu.saturating_sub(1)..(iu + 2).min(nu) {
                for jv in iv.saturating_sub(1)..(iv + 2).min(nv) {
                    if !vol[[ju, jv, 0]].is_finite() {
                        continue;
                    }
                    n_nb += 1.0;
                    for (k, s) in scores.iter_mut().enumerate() {
                        *s += vol[[ju, jv, k]];
                    }
                }
            }
            scores.iter_mut().for_each(|s| *s /= n_nb);
            let mut k = 0;
            for (j, s) in scores.iter().enumerate() {
                if *s < scores[k] {
                    k = j;
                }
            }
            let s0 = scores[k];
            let (mut shift, mut curvature) = (0.0, 0.0);
            if k > 0 && k + 1 < steps {
                let denom = scores[k - 1] - 2.0 * s0 + scores[k + 1];
                if denom > 0.0 {
                    shift = (0.5 * (scores[k - 1] - scores[k + 1]) / denom).clamp(-1.0, 1.0);
                    curvature = denom;
                }
            }
            alpha[[iu, iv]] = (lo + (k as f64 + shift) * da).clamp(lo, hi);
            curv[[iu, iv]] = curvature;
            floor[[iu, iv]] = s0;
        }
    }

    // Confidence compares curvature against the image-wide score scale, not
    // just the local minimum: a locally flat patch has a shallow curve AND a
    // tiny minimum, and their ratio alone would look decisive.
    let mut sorted: Vec<f64> = curv.iter().cloned().collect();
    sorted.sort_by(f64::total_cmp);
    let scale = sorted[sorted.len() / 2];
    let conf = Array2::from_shape_fn((nu, nv), |(iu, iv)| {
        let c = curv[[iu, iv]];
        c / (c + floor[[iu, iv]] + 0.05 * scale + 1e-9)
    });

    median_fill(&mut alpha, &conf, CONFIDENT_MIN);
    DisparityMap::new(alpha, conf, alpha_range)
}

/// Confidence below which a pixel's alpha is replaced by its neighbourhood
/// median during estimation.
const CONFIDENT_MIN: f64 = 0.05;

fn median_fill(alpha: &mut Array2<f64>, conf: &Array2<f64>, thresh: f64) {
    let (nu, nv) = alpha.dim();
    if !conf.iter().any(|&c| c >= thresh) {
        return; // nothing trustworthy to borrow from
    }
    let src = alpha.clone();
    for iu in 0..nu {
        for iv in 0..nv {
            if conf[[iu, iv]] >= thresh {
                continue;
            }
            let mut r = 1usize;
            loop {
                let mut vals: Vec<f64> = Vec::new();
                for ju in iu.saturating_sub(r)..(iu + r + 1).min(nu) {
                    for jv in iv.saturating_sub(r)..(iv + r + 1).min(nv) {
                        if conf[[ju, jv]] >= thresh {
                            vals.push(src[[ju, jv]]);
                        }
                    }
                }
                if !vals.is_empty() {
                    vals.sort_by(f64::total_cmp);
                    alpha[[iu, iv]] = vals[vals.len() / 2];
                    break;
                }
                r *= 2;
            }
        }
    }
}

/// Per-camera inverse-disparity grids, built by forward-splatting the central
/// map along its own planes with a largest-alpha-wins depth test. A view
/// pixel covered by a nearer surface reads that surface's d_alpha, which is
/// exactly what the occlusion weight needs to compare against.
fn view_disparity(dmap: &DisparityMap, c: &Calibration) -> Vec<Vec<f64>> {
    let [nu, nv] = dmap.dims();
    let n = nu * nv;
    let mut out = Vec::with_capacity(c.n_x * c.n_y);
    for ix in 0..c.n_x {
        let dx = c.x_of(ix as f64);
        for iy in 0..c.n_y {
            let dy = c.y_of(iy as f64);
            if dx == 0.0 && dy == 0.0 {
                out.push(dmap.d_alpha.iter().cloned().collect());
                continue;
            }
            let mut a_view = vec![f64::NEG_INFINITY; n];
            for iu in 0..nu {
                let u = c.u_of(iu as f64);
                for iv in 0..nv {
                    let v = c.v_of(iv as f64);
                    let a = dmap.alpha[[iu, iv]];
                    let pu = c.iu_of(u - a * dx).round();
                    let pv = c.iv_of(v - a * dy).round();
                    if pu >= 0.0 && pv >= 0.0 && pu < nu as f64 && pv < nv as f64 {
                        let j = pu as usize * nv + pv as usize;
                        a_view[j] = a_view[j].max(a);
                    }
                }
            }
            // holes (disoccluded view pixels): continue the central surface
            for (j, a) in a_view.iter_mut().enumerate() {
                if !a.is_finite() {
                    *a = dmap.alpha[[j / nv, j % nv]];
                }
            }
            out.push(a_view.into_iter().map(|a| 1.0 / a).collect());
        }
    }
    out
}

fn bilerp2(buf: &[f64], nu: usize, nv: usize, fu: f64, fv: f64) -> f64 {
    let fu = fu.clamp(0.0, (nu - 1) as f64);
    let fv = fv.clamp(0.0, (nv - 1) as f64);
    let u0 = (fu.floor() as usize).min(nu - 1);
    let v0 = (fv.floor() as usize).min(nv - 1);
    let u1 = (u0 + 1).min(nu - 1);
    let v1 = (v0 + 1).min(nv - 1);
    let tu = fu - u0 as f64;
    let tv = fv - v0 as f64;
    buf[u0 * nv + v0] * (1.0 - tu) * (1.0 - tv)
        + buf[u1 * nv + v0] * tu * (1.0 - tv)
        + buf[u0 * nv + v1] * (1.0 - tu) * tv
        + buf[u1 * nv + v1] * tu * tv
}

/// Visits every in-grid ray of the plane anchored at central pixel
/// (iu, iv): camera, fractional position, interpolated gradients, weight.
fn gather_pixel(
    grads: &RayGradients,
    dmap: &DisparityMap,
    views: &[Vec<f64>],
    w: &SAGWeights,
    iu: usize,
    iv: usize,
    mut visit: impl FnMut([usize; 2], [f64; 2], [f64; 4], f64),
) {
    let c = &grads.calib;
    let [nu, nv] = dmap.dims();
    let a = dmap.alpha[[iu, iv]];
    let dc = dmap.d_alpha[[iu, iv]];
    let u = c.u_of(iu as f64);
    let v = c.v_of(iv as f64);
    let sg2 = w.sigma_g * w.sigma_g;
    let so2 = w.sigma_o * w.sigma_o;
    for ix in 0..c.n_x {
        let dx = c.x_of(ix as f64);
        for iy in 0..c.n_y {
            let dy = c.y_of(iy as f64);
            let fu = c.iu_of(u - a * dx);
            let fv = c.iv_of(v - a * dy);
            let Some(g4) = grads.sample_uv(ix, iy, fu, fv) else {
                continue;
            };
            // Sampling at the exact plane position zeroes the sheared (u, v)
            // distance terms of the window weight; what remains is the
            // camera offset, expressed in (u, v) pixel units.
            let tx = dx / c.pixel_scale_u;
            let ty = dy / c.pixel_scale_v;
            let hg = (-(tx * tx + ty * ty) / sg2).exp();
            let di = bilerp2(&views[ix * c.n_y + iy], nu, nv, fu, fv);
            let dd = di - dc;
            let ho = (-(dd * dd) / so2).exp();
            visit([ix, iy], [fu, fv], g4, hg * ho);
        }
    }
}

/// Gathers the disparity plane through one central-view pixel: gradients
/// bilinearly interpolated at the fractional plane positions, weighted by
/// camera distance and per-view disparity agreement. Rays leaving the pixel
/// grid are dropped.
pub fn gather_plane(
    grads: &RayGradients,
    dmap: &DisparityMap,
    center: [usize; 2],
    w: &SAGWeights,
) -> Result<PlaneSample> {
    w.validate()?;
    let c = &grads.calib;
    if dmap.dims() != [c.n_u, c.n_v] {
        return Err(Error::DimensionMismatch(
            "disparity map must cover the central view".into(),
        ));
    }
    if center[0] >= c.n_u || center[1] >= c.n_v {
        return Err(Error::invalid("plane center outside the central view"));
    }
    let views = view_disparity(dmap, c);
    let mut rays = Vec::new();
    gather_pixel(grads, dmap, &views, w, center[0], center[1], |cam, fuv, grad, weight| {
        rays.push(PlaneRay {
            cam,
            fuv,
            grad,
            weight,
        });
    });
    Ok(PlaneSample {
        center,
        alpha: dmap.alpha[[center[0], center[1]]],
        rays,
    })
}

/// Per-pixel smoothness attenuation from first-pass flow edges and disparity
/// edges: the harmonic mean of the two factors, in (0, 1/2].
pub fn sag_weight_maps(
    u_flow: &FlowField,
    dmap: &DisparityMap,
    w: &SAGWeights,
) -> Result<Array2<f64>> {
    w.validate()?;
    let FlowLayout::CentralView([nu, nv]) = u_flow.layout else {
        return Err(Error::DimensionMismatch(
            "weight maps need a central-view flow field".into(),
        ));
    };
    if dmap.dims() != [nu, nv] {
        return Err(Error::DimensionMismatch(
            "flow field and disparity map must share a grid".into(),
        ));
    }
    let sc2 = w.sigma_c * w.sigma_c;
    let sd2 = w.sigma_d * w.sigma_d;
    let mut out = Array2::zeros((nu, nv));
    for iu in 0..nu {
        for iv in 0..nv {
            let here = u_flow.get(u_flow.index2(iu, iv));
            let dh = dmap.d_alpha[[iu, iv]];
            let mut qc = 0.0;
            let mut qd = 0.0;
            if iu + 1 < nu {
                let m = u_flow.get(u_flow.index2(iu + 1, iv));
                qc += (m.x - here.x).powi(2) + (m.y - here.y).powi(2);
                qd += (dmap.d_alpha[[iu + 1, iv]] - dh).powi(2);
            }
            if iv + 1 < nv {
                let m = u_flow.get(u_flow.index2(iu, iv + 1));
                qc += (m.x - here.x).powi(2) + (m.y - here.y).powi(2);
                qd += (dmap.d_alpha[[iu, iv + 1]] - dh).powi(2);
            }
            let gc = 1.0 / (1.0 + qc / sc2);
            let gd = 1.0 / (1.0 + qd / sd2);
            out[[iu, iv]] = gc * gd / (gc + gd);
        }
    }
    Ok(out)
}

/// Flattened plane gathers for every central pixel: prefix offsets into
/// parallel per-ray arrays.
struct PlaneData {
    offs: Vec<usize>,
    h: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    gz: Vec<f64>,
    lt: Vec<f64>,
}

fn gather_all(
    grads: &RayGradients,
    dmap: &DisparityMap,
    views: &[Vec<f64>],
    w: &SAGWeights,
) -> PlaneData {
    let [nu, nv] = dmap.dims();
    let mut pd = PlaneData {
        offs: Vec::with_capacity(nu * nv + 1),
        h: Vec::new(),
        gx: Vec::new(),
        gy: Vec::new(),
        gz: Vec::new(),
        lt: Vec::new(),
    };
    pd.offs.push(0);
    for iu in 0..nu {
        for iv in 0..nv {
            gather_pixel(grads, dmap, views, w, iu, iv, |_, _, g4, h| {
                pd.h.push(h);
                pd.gx.push(g4[0]);
                pd.gy.push(g4[1]);
                pd.gz.push(g4[2]);
                pd.lt.push(g4[3]);
            });
            pd.offs.push(pd.h.len());
        }
    }
    pd
}

fn central_components(flow: &FlowField, n: usize) -> [Vec<f64>; 3] {
    let mut v = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n.min(flow.len()) {
        if flow.is_valid(i) {
            let m = flow.get(i);
            v[0][i] = m.x;
            v[1][i] = m.y;
            v[2][i] = m.z;
        }
    }
    v
}

fn assemble_central(dims: [usize; 2], v: &[Vec<f64>; 3]) -> FlowField {
    let mut flow = FlowField::central_view(dims);
    for i in 0..v[0].len() {
        flow.set(i, MotionVector::new(v[0][i], v[1][i], v[2][i]), true, 1.0);
    }
    flow
}

/// Squared forward differences of one component along u and v at each pixel,
/// kept separate per axis.
fn diffs2(dims: [usize; 2], x: &[f64]) -> [Vec<f64>; 2] {
    let [nu, nv] = dims;
    let mut d = [vec![0.0; nu * nv], vec![0.0; nu * nv]];
    for iu in 0..nu {
        for iv in 0..nv {
            let j = iu * nv + iv;
            if iu + 1 < nu {
                d[0][j] = (x[j + nv] - x[j]).powi(2);
            }
            if iv + 1 < nv {
                d[1][j] = (x[j + 1] - x[j]).powi(2);
            }
        }
    }
    d
}

/// True (re-linearizable) energy of the structure-aware objective.
fn sag_energy(
    pd: &PlaneData,
    dims: [usize; 2],
    gm: &[f64],
    v: &[Vec<f64>; 3],
    w: &SAGWeights,
    p: &GlobalParams,
) -> f64 {
    let n = dims[0] * dims[1];
    let lam = [w.lambda, w.lambda, w.lambda_z];
    let mut e = 0.0;
    for j in 0..n {
        for r in pd.offs[j]..pd.offs[j + 1] {
            let resid =
                pd.gx[r] * v[0][j] + pd.gy[r] * v[1][j] + pd.gz[r] * v[2][j] + pd.lt[r];
            e += pd.h[r] * p.penalty.rho(resid * resid).0;
        }
    }
    for c in 0..3 {
        let d2 = diffs2(dims, &v[c]);
        for j in 0..n {
            e += gm[j] * lam[c] * (p.penalty.rho(d2[0][j]).0 + p.penalty.rho(d2[1][j]).0);
        }
    }
    e
}

/// Quadratic energy of one linearization: fixed data weights `wd` and
/// per-axis, per-component smoothness weights `ws`.
fn sag_linearized_energy(
    pd: &PlaneData,
    dims: [usize; 2],
    gm: &[f64],
    v: &[Vec<f64>; 3],
    wd: &[f64],
    ws: &[[Vec<f64>; 2]; 3],
    lam: [f64; 3],
) -> f64 {
    let n = dims[0] * dims[1];
    let mut e = 0.0;
    for j in 0..n {
        for r in pd.offs[j]..pd.offs[j + 1] {
            let resid =
                pd.gx[r] * v[0][j] + pd.gy[r] * v[1][j] + pd.gz[r] * v[2][j] + pd.lt[r];
            e += pd.h[r] * wd[r] * resid * resid;
        }
    }
    for c in 0..3 {
        let d2 = diffs2(dims, &v[c]);
        for a in 0..2 {
            for j in 0..n {
                e += gm[j] * lam[c] * ws[c][a][j] * d2[a][j];
            }
        }
    }
    e
}

/// Norm of the energy gradient over the solved components.
fn sag_el_norm(
    pd: &PlaneData,
    dims: [usize; 2],
    gm: &[f64],
    v: &[Vec<f64>; 3],
    w: &SAGWeights,
    p: &GlobalParams,
    ncomp: usize,
) -> f64 {
    let [nu, nv] = dims;
    let lam = [w.lambda, w.lambda, w.lambda_z];
    let mut sum2 = 0.0;
    let strides = [nv, 1usize];
    for c in 0..ncomp {
        let d2 = diffs2(dims, &v[c]);
        for iu in 0..nu {
            for iv in 0..nv {
                let j = iu * nv + iv;
                let mut g = 0.0;
                for r in pd.offs[j]..pd.offs[j + 1] {
                    let gc = [pd.gx[r], pd.gy[r], pd.gz[r]];
                    let resid =
                        pd.gx[r] * v[0][j] + pd.gy[r] * v[1][j] + pd.gz[r] * v[2][j] + pd.lt[r];
                    g += 2.0 * pd.h[r] * p.penalty.rho(resid * resid).1 * resid * gc[c];
                }
                let pos = [iu, iv];
                let dim = [nu, nv];
                for a in 0..2 {
                    let s = strides[a];
                    if pos[a] + 1 < dim[a] {
                        let diff = v[c][j + s] - v[c][j];
                        g -= 2.0 * lam[c] * gm[j] * p.penalty.rho(d2[a][j]).1 * diff;
                    }
                    if pos[a] > 0 {
                        let diff = v[c][j] - v[c][j - s];
                        g += 2.0 * lam[c] * gm[j - s] * p.penalty.rho(d2[a][j - s]).1 * diff;
                    }
                }
                sum2 += g * g;
            }
        }
    }
    sum2.sqrt()
}

/// Exact minimization over a constant shift of the solved components; the
/// smoothness term is shift-invariant, so only the summed data system
/// matters. Returns the squared shift norm times the pixel count.
fn sag_constant_mode(
    pd: &PlaneData,
    n: usize,
    v: &mut [Vec<f64>; 3],
    wd: &[f64],
    ncomp: usize,
) -> f64 {
    let mut h3 = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for j in 0..n {
        for r in pd.offs[j]..pd.offs[j + 1] {
            let g = [pd.gx[r], pd.gy[r], pd.gz[r]];
            let resid = g[0] * v[0][j] + g[1] * v[1][j] + g[2] * v[2][j] + pd.lt[r];
            let hw = pd.h[r] * wd[r];
            for a in 0..ncomp {
                for b in a..ncomp {
                    h3[a][b] += hw * g[a] * g[b];
                }
                rhs[a] -= hw * resid * g[a];
            }
        }
    }
    let mut delta = [0.0f64; 3];
    if ncomp == 2 {
        let det = h3[0][0] * h3[1][1] - h3[0][1] * h3[0][1];
        if det <= 0.0 {
            return 0.0;
        }
        delta[0] = (h3[1][1] * rhs[0] - h3[0][1] * rhs[1]) / det;
        delta[1] = (h3[0][0] * rhs[1] - h3[0][1] * rhs[0]) / det;
    } else {
        h3[1][0] = h3[0][1];
        h3[2][0] = h3[0][2];
        h3[2][1] = h3[1][2];
        let (vals, vecs) = eigh3(h3);
        if vals[0] <= 0.0 {
            return 0.0;
        }
        for k in 0..3 {
            if vals[k] > 1e-12 * vals[0] {
                let coef =
                    (vecs[k][0] * rhs[0] + vecs[k][1] * rhs[1] + vecs[k][2] * rhs[2]) / vals[k];
                for a in 0..3 {
                    delta[a] += coef * vecs[k][a];
                }
            }
        }
    }
    let d2: f64 = delta.iter().map(|d| d * d).sum();
    if d2 == 0.0 {
        return 0.0;
    }
    for c in 0..ncomp {
        for x in v[c].iter_mut() {
            *x += delta[c];
        }
    }
    d2 * n as f64
}

/// One outer linearization ladder on fixed gathered data: lagged penalty
/// weights around block-SOR sweeps on the 2D central grid. With `freeze_z`
/// only V_X and V_Y move (2x2 blocks); V_Z keeps its initial values.
fn sag_linear(
    pd: &PlaneData,
    dims: [usize; 2],
    gm: &[f64],
    w: &SAGWeights,
    p: &GlobalParams,
    freeze_z: bool,
    init: &FlowField,
) -> (FlowField, SolveStats) {
    let [nu, nv] = dims;
    let n = nu * nv;
    let lam = [w.lambda, w.lambda, w.lambda_z];
    let ncomp = if freeze_z { 2 } else { 3 };
    let strides = [nv, 1usize];

    let mut v = central_components(init, n);
    let el_initial = sag_el_norm(pd, dims, gm, &v, w, p, ncomp);

    let n_lag = match p.penalty {
        Penalty::Quadratic => 1,
        _ => p.lagged_iters + 1,
    };

    let mut best = v.clone();
    let mut best_energy = sag_energy(pd, dims, gm, &v, w, p);
    let mut sweeps = 0usize;
    let mut converged = false;
    let mut energies = Vec::new();

    for lag in 0..n_lag {
        // freeze penalty weights for this linearization; the first
        // non-quadratic pass bootstraps with uniform (quadratic) weights
        let bootstrap = lag == 0 && p.penalty != Penalty::Quadratic;
        let mut wd = vec![1.0; pd.h.len()];
        if !bootstrap {
            for j in 0..n {
                for r in pd.offs[j]..pd.offs[j + 1] {
                    let resid =
                        pd.gx[r] * v[0][j] + pd.gy[r] * v[1][j] + pd.gz[r] * v[2][j] + pd.lt[r];
                    wd[r] = p.penalty.rho(resid * resid).1;
                }
            }
        }
        let ws: [[Vec<f64>; 2]; 3] = [0, 1, 2].map(|c| {
            if bootstrap {
                [vec![1.0; n], vec![1.0; n]]
            } else {
                diffs2(dims, &v[c]).map(|d| d.into_iter().map(|q| p.penalty.rho(q).1).collect())
            }
        });

        // per-pixel data normal blocks under the frozen weights
        let mut a6 = vec![[0.0f64; 6]; n];
        let mut b3 = vec![[0.0f64; 3]; n];
        for j in 0..n {
            for r in pd.offs[j]..pd.offs[j + 1] {
                let hw = pd.h[r] * wd[r];
                let g = [pd.gx[r], pd.gy[r], pd.gz[r]];
                a6[j][0] += hw * g[0] * g[0];
                a6[j][1] += hw * g[0] * g[1];
                a6[j][2] += hw * g[0] * g[2];
                a6[j][3] += hw * g[1] * g[1];
                a6[j][4] += hw * g[1] * g[2];
                a6[j][5] += hw * g[2] * g[2];
                for c in 0..3 {
                    b3[j][c] -= hw * g[c] * pd.lt[r];
                }
            }
        }

        energies.clear();
        energies.push(sag_linearized_energy(pd, dims, gm, &v, &wd, &ws, lam));
        sweeps = 0;
        converged = false;

        for _ in 0..p.sor.max_iters {
            let mut upd2 = 0.0f64;
            for iu in 0..nu {
                for iv in 0..nv {
                    let j = iu * nv + iv;
                    let mut m = [
                        [a6[j][0], a6[j][1], a6[j][2]],
                        [a6[j][1], a6[j][3], a6[j][4]],
                        [a6[j][2], a6[j][4], a6[j][5]],
                    ];
                    let mut rhs = b3[j];
                    let pos = [iu, iv];
                    let dim = [nu, nv];
                    for c in 0..ncomp {
                        let mut wcap = 0.0;
                        let mut nbr = 0.0;
                        for a in 0..2 {
                            let s = strides[a];
                            if pos[a] > 0 {
                                let wm = gm[j - s] * ws[c][a][j - s];
                                wcap += wm;
                                nbr += wm * v[c][j - s];
                            }
                            if pos[a] + 1 < dim[a] {
                                let wp = gm[j] * ws[c][a][j];
                                wcap += wp;
                                nbr += wp * v[c][j + s];
                            }
                        }
                        m[c][c] += lam[c] * wcap;
                        rhs[c] += lam[c] * nbr;
                    }
                    if freeze_z {
                        let det = m[0][0] * m[1][1] - m[0][1] * m[0][1];
                        if det > 0.0 {
                            let vn = [
                                (m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det,
                                (m[0][0] * rhs[1] - m[0][1] * rhs[0]) / det,
                            ];
                            for c in 0..2 {
                                let dv = p.sor.omega * (vn[c] - v[c][j]);
                                v[c][j] += dv;
                                upd2 += dv * dv;
                            }
                        }
                    } else {
                        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[1][2])
                            - m[0][1] * (m[0][1] * m[2][2] - m[1][2] * m[0][2])
                            + m[0][2] * (m[0][1] * m[1][2] - m[1][1] * m[0][2]);
                        if det > 0.0 {
                            let i00 = (m[1][1] * m[2][2] - m[1][2] * m[1][2]) / det;
                            let i01 = (m[0][2] * m[1][2] - m[0][1] * m[2][2]) / det;
                            let i02 = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
                            let i11 = (m[0][0] * m[2][2] - m[0][2] * m[0][2]) / det;
                            let i12 = (m[0][1] * m[0][2] - m[0][0] * m[1][2]) / det;
                            let i22 = (m[0][0] * m[1][1] - m[0][1] * m[0][1]) / det;
                            let vn = [
                                i00 * rhs[0] + i01 * rhs[1] + i02 * rhs[2],
                                i01 * rhs[0] + i11 * rhs[1] + i12 * rhs[2],
                                i02 * rhs[0] + i12 * rhs[1] + i22 * rhs[2],
                            ];
                            for c in 0..3 {
                                let dv = p.sor.omega * (vn[c] - v[c][j]);
                                v[c][j] += dv;
                                upd2 += dv * dv;
                            }
                        }
                    }
                }
            }
            upd2 += sag_constant_mode(pd, n, &mut v, &wd, ncomp);
            sweeps += 1;
            energies.push(sag_linearized_energy(pd, dims, gm, &v, &wd, &ws, lam));

            let val2: f64 = v[..ncomp].iter().flat_map(|c| c.iter()).map(|x| x * x).sum();
            if upd2.sqrt() <= p.sor.tol * val2.sqrt().max(1e-30) {
                converged = true;
                break;
            }
        }

        let e = sag_energy(pd, dims, gm, &v, w, p);
        if e < best_energy {
            best_energy = e;
            best = v.clone();
        }
    }

    let final_energy = sag_energy(pd, dims, gm, &v, w, p);
    let (v, warning) = if final_energy <= best_energy {
        (v, None)
    } else {
        (
            best,
            Some("energy increased across relinearizations; kept best iterate".to_string()),
        )
    };
    let warning = if converged {
        warning
    } else {
        warning.or_else(|| Some("SOR stopped at max iterations before reaching tol".to_string()))
    };

    let el_final = sag_el_norm(pd, dims, gm, &v, w, p, ncomp);
    let stats = SolveStats {
        sweeps,
        converged,
        energies,
        el_initial,
        el_final,
        warning,
    };
    (assemble_central(dims, &v), stats)
}

/// Broadcasts a central-view flow to the full ray grid through the disparity
/// planes: each ray reads the central pixel its scene point projects to.
fn broadcast_flow(central: &FlowField, dmap: &DisparityMap, c: &Calibration) -> FlowField {
    let [nx, ny, nu, nv] = c.dims();
    let mut out = FlowField::full_ray([nx, ny, nu, nv]);
    for ix in 0..nx {
        let dx = c.x_of(ix as f64);
        for iy in 0..ny {
            let dy = c.y_of(iy as f64);
            for iu in 0..nu {
                let u = c.u_of(iu as f64);
                for iv in 0..nv {
                    let v = c.v_of(iv as f64);
                    // central pixel of this ray's point: one fixed-point
                    // refinement of alpha through the shifted lookup
                    let a0 = dmap.alpha[[iu, iv]];
                    let fu0 = c.iu_of(u + a0 * dx);
                    let fv0 = c.iv_of(v + a0 * dy);
                    let a1 = dmap.sample_alpha(fu0, fv0);
                    let fu = c.iu_of(u + a1 * dx).clamp(0.0, (nu - 1) as f64);
                    let fv = c.iv_of(v + a1 * dy).clamp(0.0, (nv - 1) as f64);
                    let u0 = (fu.floor() as usize).min(nu - 1);
                    let v0 = (fv.floor() as usize).min(nv - 1);
                    let u1 = (u0 + 1).min(nu - 1);
                    let v1 = (v0 + 1).min(nv - 1);
                    let tu = fu - u0 as f64;
                    let tv = fv - v0 as f64;
                    let mut m = MotionVector::new(0.0, 0.0, 0.0);
                    for (ju, jv, wt) in [
                        (u0, v0, (1.0 - tu) * (1.0 - tv)),
                        (u1, v0, tu * (1.0 - tv)),
                        (u0, v1, (1.0 - tu) * tv),
                        (u1, v1, tu * tv),
                    ] {
                        m = m.add(&central.get(central.index2(ju, jv)).scaled(wt));
                    }
                    out.set(out.index4(ix, iy, iu, iv), m, true, 1.0);
                }
            }
        }
    }
    out
}

/// One coarse-to-fine pass: per level, the disparity map is resampled, the
/// central estimate is broadcast to the ray grid for warping, the data term
/// is linearized about the warp, and the central-view system is re-solved for
/// the total flow.
#[allow(clippy::too_many_arguments)]
fn run_pass(
    pyr0: &[LightField],
    pyr1: &[LightField],
    dmap: &DisparityMap,
    w: &SAGWeights,
    p: &GlobalParams,
    freeze_z: bool,
    weight_flow: Option<&FlowField>,
    init: Option<&FlowField>,
) -> Result<(FlowField, SolveStats)> {
    let mut est: Option<FlowField> = None;
    let mut last_stats = None;
    for li in (0..pyr0.len()).rev() {
        let l0 = &pyr0[li];
        let l1 = &pyr1[li];
        let [nx, ny, nu, nv] = l0.calib.dims();
        let dml = dmap.resample(nu, nv);
        let views = view_disparity(&dml, &l0.calib);
        let gm: Vec<f64> = match weight_flow {
            // pass 1 runs with the uniform weight 1/2, the harmonic mean of
            // two unit factors, so lambda means the same thing in both passes
            None => vec![0.5; nu * nv],
            Some(uf) => {
                let ufl = uf.resample_uv(nu, nv);
                sag_weight_maps(&ufl, &dml, w)?.into_iter().collect()
            }
        };
        let mut cur = match est.take() {
            Some(f) => f.resample_uv(nu, nv),
            None => match init {
                Some(f) => f.resample_uv(nu, nv),
                None => FlowField::constant(
                    FlowLayout::CentralView([nu, nv]),
                    MotionVector::new(0.0, 0.0, 0.0),
                ),
            },
        };

        let mut best = cur.clone();
        let mut best_res = f64::INFINITY;
        let mut prev_res = f64::INFINITY;
        let mut rises = 0u32;
        for it in 0..=p.outer.warp_iters {
            let wfull = broadcast_flow(&cur, &dml, &l0.calib);
            let warped = warp_flow(l1, &wfull)?;
            let (mut grads, kept) = masked_gradients(l0, &warped)?;
            let res = mean_abs_lt(&grads, kept);
            if res < best_res {
                best_res = res;
                best = cur.clone();
            }
            if res > prev_res {
                rises += 1;
            } else {
                rises = 0;
            }
            prev_res = res;
            if it == p.outer.warp_iters || rises >= 2 {
                break;
            }
            // linearize about the warp so the solve is for the total flow
            for ix in 0..nx {
                for iy in 0..ny {
                    for iu in 0..nu {
                        for iv in 0..nv {
                            let j = [ix, iy, iu, iv];
                            let m = wfull.get(wfull.index4(ix, iy, iu, iv));
                            grads.lt[j] -=
                                grads.lx[j] * m.x + grads.ly[j] * m.y + grads.lz[j] * m.z;
                        }
                    }
                }
            }
            let pd = gather_all(&grads, &dml, &views, w);
            let (solved, stats) = sag_linear(&pd, [nu, nv], &gm, w, p, freeze_z, &cur);
            cur = solved;
            last_stats = Some(stats);
        }
        est = Some(best);
    }
    let stats = last_stats.unwrap_or(SolveStats {
        sweeps: 0,
        converged: true,
        energies: Vec::new(),
        el_initial: 0.0,
        el_final: 0.0,
        warning: None,
    });
    Ok((est.unwrap(), stats))
}

/// Structure-aware global solve on the central view.
///
/// Two passes: the first solves for XY motion only (V_Z frozen at zero,
/// uniform smoothness weight map) to expose motion edges; the second builds
/// the edge-aware weight map from that estimate and the disparity map, then
/// solves the full three-component system initialized from the first pass.
/// Both passes run coarse-to-fine with the data term re-linearized about the
/// current warp. Smoothness strengths come from `w`; `p` supplies the
/// penalty, solver, and pyramid settings (its `lambda` fields are unused
/// here).
pub fn sag_solve(
    lf0: &LightField,
    lf1: &LightField,
    dmap: &DisparityMap,
    w: &SAGWeights,
    p: &GlobalParams,
) -> Result<(FlowField, SolveStats)> {
    w.validate()?;
    p.validate()?;
    if !lf0.same_grid(lf1) {
        return Err(Error::DimensionMismatch(
            "light field pair must share calibration and dimensions".into(),
        ));
    }
    let c = &lf0.calib;
    if dmap.dims() != [c.n_u, c.n_v] {
        return Err(Error::DimensionMismatch(
            "disparity map must cover the central view".into(),
        ));
    }
    if p.outer.levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let pyr0 = build_pyramid(lf0, p.outer.levels, p.outer.factor)?;
    let pyr1 = build_pyramid(lf1, p.outer.levels, p.outer.factor)?;

    let (u_xy, _) = run_pass(
        &pyr0.levels,
        &pyr1.levels,
        dmap,
        w,
        p,
        true,
        None,
        None,
    )?;
    run_pass(
        &pyr0.levels,
        &pyr1.levels,
        dmap,
        w,
        p,
        false,
        Some(&u_xy),
        Some(&u_xy),
    )
}
