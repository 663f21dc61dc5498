//! Local least-squares ray flow.
//!
//! A motion vector is assumed constant over a 4D window; every ray in the
//! window contributes one linear equation g·V + L_t = 0 and the stacked
//! system is solved through the 3x3 normal equations S V = -sum g L_t,
//! i.e. through the window's structure tensor. Dense estimation slides the
//! window over every ray; the pyramidal variant wraps the dense solve in
//! coarse-to-fine warping so motions beyond the differential regime still
//! register.

use ndarray::{Array4, Axis};

use crate::error::{Error, Result};
use crate::filter::{convolve_axis, gaussian_kernel};
use crate::flowfield::FlowField;
use crate::geometry::MotionVector;
use crate::gradients::{compute_gradients, RayGradients};
use crate::lightfield::LightField;
use crate::pyramid::build_pyramid;
use crate::tensor::{
    classify_eigenvalues, eigh3, window_sums, RankClass, RankThresholds, StructureTensor,
    Window4,
};
use crate::warp::{warp_flow, Warped};

#[derive(Debug, Clone)]
pub struct LKParams {
    /// Window half-extents per axis (ix, iy, iu, iv); windows are clamped at
    /// grid borders during dense estimation.
    pub half: [usize; 4],
    /// Relative eigenvalue threshold for rank classification.
    pub tau: f64,
    /// Optional Gaussian weighting along (u, v), sigma in pixels; replaces
    /// the box window on those axes. Off by default.
    pub gauss_sigma: Option<[f64; 2]>,
    /// Pyramid levels for `lk_pyramidal`.
    pub levels: usize,
    /// Warp iterations per pyramid level.
    pub warp_iters: usize,
    /// Pyramid decimation factor.
    pub factor: f64,
}

impl Default for LKParams {
    fn default() -> Self {
        LKParams {
            half: [4, 4, 6, 6],
            tau: RankThresholds::DEFAULT_TAU,
            gauss_sigma: None,
            levels: 3,
            warp_iters: 3,
            factor: 0.5,
        }
    }
}

/// Result of one windowed solve. `motion` is `None` for windows with no
/// usable gradient signal; rank-deficient windows carry the minimum-norm
/// solution restricted to the recoverable subspace.
#[derive(Debug, Clone)]
pub struct LKSolution {
    pub motion: Option<MotionVector>,
    pub tensor: StructureTensor,
    pub class: RankClass,
    /// lambda3 / lambda1: near 1 for isotropic texture, below tau for edges,
    /// 0 for smooth windows.
    pub confidence: f64,
}

/// Minimum-norm solve of S V = rhs restricted to eigenvalues passing the
/// thresholds.
fn spectral_solve(
    vals: [f64; 3],
    vecs: [[f64; 3]; 3],
    rhs: [f64; 3],
    th: &RankThresholds,
) -> (Option<MotionVector>, RankClass, f64) {
    let class = classify_eigenvalues(vals, th);
    if class == RankClass::Smooth {
        return (None, class, 0.0);
    }
    let mut v = [0.0f64; 3];
    for k in 0..3 {
        if vals[k] >= th.tau * vals[0] {
            let coef =
                (vecs[k][0] * rhs[0] + vecs[k][1] * rhs[1] + vecs[k][2] * rhs[2]) / vals[k];
            v[0] += coef * vecs[k][0];
            v[1] += coef * vecs[k][1];
            v[2] += coef * vecs[k][2];
        }
    }
    let confidence = (vals[2] / vals[0]).max(0.0);
    (Some(MotionVector::new(v[0], v[1], v[2])), class, confidence)
}

pub fn lk_window(grads: &RayGradients, w: Window4, tau: f64) -> Result<LKSolution> {
    let sums = window_sums(grads, &w)?;
    let (vals, vecs) = eigh3(sums.s);
    let th = RankThresholds {
        tau,
        tau_abs: 1e-6 * sums.count as f64,
    };
    let (motion, class, confidence) = spectral_solve(vals, vecs, sums.rhs, &th);
    Ok(LKSolution {
        motion,
        tensor: StructureTensor {
            s: sums.s,
            eigenvalues: vals,
            eigenvectors: vecs,
            window: w,
        },
        class,
        confidence,
    })
}

/// In-place sliding box sum along one axis, window clamped at the borders.
fn box_sum_axis(a: &mut Array4<f64>, axis: usize, half: usize) {
    if half == 0 {
        return;
    }
    let n = a.shape()[axis];
    let mut prefix = vec![0.0f64; n + 1];
    for mut lane in a.lanes_mut(Axis(axis)) {
        for i in 0..n {
            prefix[i + 1] = prefix[i] + lane[i];
        }
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            lane[i] = prefix[hi + 1] - prefix[lo];
        }
    }
}

/// Window lengths per position along an axis of size `n` with clamping.
fn clamped_lengths(n: usize, half: usize) -> Vec<usize> {
    (0..n)
        .map(|i| (i + half).min(n - 1) - i.saturating_sub(half) + 1)
        .collect()
}

/// `lk_window` applied at every ray via separable sliding sums.
pub fn lk_dense(grads: &RayGradients, p: &LKParams) -> FlowField {
    let [nx, ny, nu, nv] = grads.dims();
    let shape = (nx, ny, nu, nv);

    // nine accumulated fields: six tensor products and the three rhs terms
    let mut fields: Vec<Array4<f64>> = (0..9).map(|_| Array4::zeros(shape)).collect();
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                for iv in 0..nv {
                    let i = [ix, iy, iu, iv];
                    let g = grads.g(ix, iy, iu, iv);
                    let lt = grads.lt[i];
                    fields[0][i] = g[0] * g[0];
                    fields[1][i] = g[0] * g[1];
                    fields[2][i] = g[0] * g[2];
                    fields[3][i] = g[1] * g[1];
                    fields[4][i] = g[1] * g[2];
                    fields[5][i] = g[2] * g[2];
                    fields[6][i] = -g[0] * lt;
                    fields[7][i] = -g[1] * lt;
                    fields[8][i] = -g[2] * lt;
                }
            }
        }
    }

    // angular axes always use box sums; (u, v) optionally use a Gaussian
    // scaled to the equivalent box mass so eigenvalue floors stay comparable
    let uv_kernel = p.gauss_sigma.map(|sig| {
        let make = |s: f64| {
            let mut k = gaussian_kernel(s);
            let len = k.len() as f64;
            for w in &mut k {
                *w *= len;
            }
            k
        };
        (make(sig[0]), make(sig[1]))
    });
    let (half_u, half_v) = match &uv_kernel {
        Some((ku, kv)) => (ku.len() / 2, kv.len() / 2),
        None => (p.half[2], p.half[3]),
    };
    for f in fields.iter_mut() {
        box_sum_axis(f, 0, p.half[0]);
        box_sum_axis(f, 1, p.half[1]);
        match &uv_kernel {
            Some((ku, kv)) => {
                convolve_axis(f, 2, ku);
                convolve_axis(f, 3, kv);
            }
            None => {
                box_sum_axis(f, 2, p.half[2]);
                box_sum_axis(f, 3, p.half[3]);
            }
        }
    }

    let len_x = clamped_lengths(nx, p.half[0]);
    let len_y = clamped_lengths(ny, p.half[1]);
    let len_u = clamped_lengths(nu, half_u);
    let len_v = clamped_lengths(nv, half_v);

    let flat: Vec<&[f64]> = fields.iter().map(|f| f.as_slice().unwrap()).collect();
    let mut flow = FlowField::full_ray([nx, ny, nu, nv]);
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                let base = ((ix * ny + iy) * nu + iu) * nv;
                let count_xyu = len_x[ix] * len_y[iy] * len_u[iu];
                for iv in 0..nv {
                    let i = base + iv;
                    let s = [
                        [flat[0][i], flat[1][i], flat[2][i]],
                        [flat[1][i], flat[3][i], flat[4][i]],
                        [flat[2][i], flat[4][i], flat[5][i]],
                    ];
                    let rhs = [flat[6][i], flat[7][i], flat[8][i]];
                    let (vals, vecs) = eigh3(s);
                    let th = RankThresholds {
                        tau: p.tau,
                        tau_abs: 1e-6 * (count_xyu * len_v[iv]) as f64,
                    };
                    let (motion, _, confidence) = spectral_solve(vals, vecs, rhs, &th);
                    match motion {
                        Some(m) => flow.set(i, m, true, confidence),
                        None => flow.invalidate(i),
                    }
                }
            }
        }
    }
    flow
}

/// Gradients of (l0, warped l1) with every ray zeroed whose time difference
/// or camera-difference stencil touches an invalid warped sample. Returns the
/// gradients and the number of rays kept.
pub(crate) fn masked_gradients(
    l0: &LightField,
    warped: &Warped,
) -> Result<(RayGradients, usize)> {
    let mut g = compute_gradients(l0, &warped.lf)?;
    let [nx, ny, nu, nv] = g.dims();
    let ok_span = |valid: &dyn Fn(usize) -> bool, pos: usize, n: usize| -> bool {
        if pos == 0 {
            valid(0) && valid(1)
        } else if pos == n - 1 {
            valid(n - 2) && valid(n - 1)
        } else {
            valid(pos - 1) && valid(pos) && valid(pos + 1)
        }
    };
    let mut kept = 0usize;
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                for iv in 0..nv {
                    let vx = |j: usize| warped.valid[[j, iy, iu, iv]];
                    let vy = |j: usize| warped.valid[[ix, j, iu, iv]];
                    let keep = ok_span(&vx, ix, nx) && ok_span(&vy, iy, ny);
                    if keep {
                        kept += 1;
                    } else {
                        let i = [ix, iy, iu, iv];
                        g.lx[i] = 0.0;
                        g.ly[i] = 0.0;
                        g.lz[i] = 0.0;
                        g.lt[i] = 0.0;
                    }
                }
            }
        }
    }
    Ok((g, kept))
}

pub(crate) fn mean_abs_lt(g: &RayGradients, kept: usize) -> f64 {
    if kept == 0 {
        return f64::INFINITY;
    }
    g.lt.iter().map(|v| v.abs()).sum::<f64>() / kept as f64
}

/// All-valid copy of `flow` with zero vectors where no estimate exists, for
/// use as a warp field.
pub(crate) fn warpable(flow: &FlowField) -> FlowField {
    let mut out = FlowField::constant(flow.layout.clone(), MotionVector::ZERO);
    for i in 0..flow.len() {
        if flow.is_valid(i) {
            out.set_vector(i, flow.get(i));
        }
    }
    out
}

/// Coarse-to-fine local registration: per level, warp `lf1` by the current
/// flow, re-derive gradients, and accumulate dense increments. Flow values
/// are metric, so moving between levels only changes grid resolution.
pub fn lk_pyramidal(lf0: &LightField, lf1: &LightField, p: &LKParams) -> Result<FlowField> {
    if !lf0.same_grid(lf1) {
        return Err(Error::DimensionMismatch(
            "light field pair must share calibration and dimensions".into(),
        ));
    }
    if p.levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let pyr0 = build_pyramid(lf0, p.levels, p.factor)?;
    let pyr1 = build_pyramid(lf1, p.levels, p.factor)?;
    let n_levels = pyr0.levels.len();

    let mut est: Option<FlowField> = None;
    for li in (0..n_levels).rev() {
        let l0 = &pyr0.levels[li];
        let l1 = &pyr1.levels[li];
        let [nx, ny, nu, nv] = l0.calib.dims();
        let mut cur = match est.take() {
            None => FlowField::full_ray([nx, ny, nu, nv]),
            Some(f) => f.resample_uv(nu, nv),
        };

        let mut best = cur.clone();
        let mut best_res = f64::INFINITY;
        let mut prev_res = f64::INFINITY;
        let mut rises = 0u32;
        for it in 0..=p.warp_iters {
            let warp_field = warpable(&cur);
            let warped = warp_flow(l1, &warp_field)?;
            let (grads, kept) = masked_gradients(l0, &warped)?;
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
            if it == p.warp_iters || rises >= 2 {
                break;
            }
            let delta = lk_dense(&grads, p);
            for i in 0..cur.len() {
                if delta.is_valid(i) {
                    let total = warp_field.get(i).add(&delta.get(i));
                    cur.set(i, total, true, delta.confidence(i));
                }
            }
        }
        est = Some(best);
    }

    // rays whose final warp leaves the aperture have no observed explanation
    let mut flow = est.unwrap();
    let final_warp = warp_flow(lf1, &warpable(&flow))?;
    let [nx, ny, nu, nv] = lf0.calib.dims();
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                for iv in 0..nv {
                    if !final_warp.valid[[ix, iy, iu, iv]] {
                        let i = flow.index4(ix, iy, iu, iv);
                        flow.invalidate(i);
                    }
                }
            }
        }
    }
    Ok(flow)
}
