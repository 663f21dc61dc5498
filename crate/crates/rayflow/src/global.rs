//! Global variational ray flow.
//!
//! The flow minimizes a data term summing the penalized ray flow residual
//! (g·V + L_t)² over all rays plus a smoothness term on the 4D
//! forward-difference gradient of each flow component, with separate weights
//! for lateral flow and Z flow. Minimization solves the Euler-Lagrange
//! system pointwise with coupled 3x3 block SOR sweeps; non-quadratic
//! penalties are handled by lagged relinearization of the penalty weights.
//!
//! The smoothness operator with natural (Neumann) boundaries is blind to a
//! constant shift of the field, so that mode converges at the rate of the
//! data term alone — for large smoothness weights effectively never. After
//! every sweep the solver therefore applies an exact minimization over
//! constant shifts (a 3x3 solve on ray-summed quantities), which keeps the
//! energy monotone and makes smoothness-dominated solves land on the global
//! least-squares motion immediately.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::flowfield::{FlowField, FlowLayout};
use crate::gradients::RayGradients;
use crate::lightfield::LightField;
use crate::local::{masked_gradients, mean_abs_lt, warpable};
use crate::pyramid::build_pyramid;
use crate::tensor::eigh3;
use crate::warp::warp_flow;

/// Penalty ρ applied to squared quantities; `rho` returns (ρ(x²), dρ/dx²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Quadratic,
    Charbonnier { a: f64, eps: f64 },
}

impl Penalty {
    pub fn rho(&self, x2: f64) -> (f64, f64) {
        match *self {
            Penalty::Quadratic => (x2, 1.0),
            Penalty::Charbonnier { a, eps } => charbonnier(x2, a, eps),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Penalty::Charbonnier { a, eps } = *self {
            if !(a > 0.0 && a <= 0.5) {
                return Err(Error::invalid("charbonnier exponent must be in (0, 0.5]"));
            }
            if !(eps > 0.0) {
                return Err(Error::invalid("charbonnier eps must be positive"));
            }
        }
        Ok(())
    }
}

/// Generalized Charbonnier ρ(x²) = (x² + ε²)^a and its derivative in x².
pub fn charbonnier(x2: f64, a: f64, eps: f64) -> (f64, f64) {
    let base = x2 + eps * eps;
    (base.powf(a), a * base.powf(a - 1.0))
}

#[derive(Debug, Clone)]
pub struct SorParams {
    pub omega: f64,
    pub max_iters: usize,
    /// Relative update norm below which a sweep loop stops.
    pub tol: f64,
}

impl Default for SorParams {
    fn default() -> Self {
        SorParams {
            omega: 1.9,
            max_iters: 200,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuterParams {
    pub warp_iters: usize,
    pub levels: usize,
    pub factor: f64,
}

impl Default for OuterParams {
    fn default() -> Self {
        OuterParams {
            warp_iters: 3,
            levels: 3,
            factor: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalParams {
    /// Smoothness weight for the X and Y flow components.
    pub lambda: f64,
    /// Smoothness weight for the Z flow component.
    pub lambda_z: f64,
    pub penalty: Penalty,
    pub sor: SorParams,
    pub outer: OuterParams,
    /// Relinearization passes for non-quadratic penalties.
    pub lagged_iters: usize,
}

impl Default for GlobalParams {
    fn default() -> Self {
        GlobalParams {
            lambda: 8.0,
            lambda_z: 1.0,
            penalty: Penalty::Quadratic,
            sor: SorParams::default(),
            outer: OuterParams::default(),
            lagged_iters: 3,
        }
    }
}

impl GlobalParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda_z > 0.0) {
            return Err(Error::invalid("smoothness weights must be positive"));
        }
        if !(self.sor.omega > 0.0 && self.sor.omega < 2.0) {
            return Err(Error::invalid("sor omega must lie in (0, 2)"));
        }
        if self.sor.max_iters == 0 || self.lagged_iters == 0 {
            return Err(Error::invalid("iteration counts must be at least 1"));
        }
        if !(self.sor.tol > 0.0) {
            return Err(Error::invalid("sor tolerance must be positive"));
        }
        self.penalty.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SolveStats {
    /// Sweeps executed in the final linearization.
    pub sweeps: usize,
    pub converged: bool,
    /// Linearized energy after each sweep of the final linearization,
    /// preceded by the starting value.
    pub energies: Vec<f64>,
    /// Euler-Lagrange residual norms (energy gradient) at entry and exit.
    pub el_initial: f64,
    pub el_final: f64,
    pub warning: Option<String>,
}

fn check_layout(grads: &RayGradients, flow: &FlowField) -> Result<()> {
    if flow.layout != FlowLayout::FullRay(grads.dims()) {
        return Err(Error::DimensionMismatch(
            "flow field must cover the full ray grid of the gradients".into(),
        ));
    }
    Ok(())
}

fn components(flow: &FlowField) -> [Vec<f64>; 3] {
    let n = flow.len();
    let mut vx = vec![0.0; n];
    let mut vy = vec![0.0; n];
    let mut vz = vec![0.0; n];
    for i in 0..n {
        if flow.is_valid(i) {
            let m = flow.get(i);
            vx[i] = m.x;
            vy[i] = m.y;
            vz[i] = m.z;
        }
    }
    [vx, vy, vz]
}

fn assemble(dims: [usize; 4], v: &[Vec<f64>; 3]) -> FlowField {
    let mut flow = FlowField::full_ray(dims);
    for i in 0..v[0].len() {
        flow.set(
            i,
            crate::geometry::MotionVector::new(v[0][i], v[1][i], v[2][i]),
            true,
            1.0,
        );
    }
    flow
}

struct Grid {
    dims: [usize; 4],
    strides: [usize; 4],
    n: usize,
}

impl Grid {
    fn of(dims: [usize; 4]) -> Grid {
        let [nx, ny, nu, nv] = dims;
        Grid {
            dims,
            strides: [ny * nu * nv, nu * nv, nv, 1],
            n: nx * ny * nu * nv,
        }
    }
}

/// Squared 4D forward-difference gradient of one component at every cell.
fn grad_sq(grid: &Grid, v: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; grid.n];
    let [nx, ny, nu, nv] = grid.dims;
    let mut i = 0usize;
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                for iv in 0..nv {
                    let here = v[i];
                    let mut s = 0.0;
                    if ix + 1 < nx {
                        let d = v[i + grid.strides[0]] - here;
                        s += d * d;
                    }
                    if iy + 1 < ny {
                        let d = v[i + grid.strides[1]] - here;
                        s += d * d;
                    }
                    if iu + 1 < nu {
                        let d = v[i + grid.strides[2]] - here;
                        s += d * d;
                    }
                    if iv + 1 < nv {
                        let d = v[i + grid.strides[3]] - here;
                        s += d * d;
                    }
                    q[i] = s;
                    i += 1;
                }
            }
        }
    }
    q
}

/// Total energy: Σ ρ_D(r²) + Σ_c λ_c Σ ρ_S(|∇V_c|²).
pub fn hs_energy(grads: &RayGradients, flow: &FlowField, p: &GlobalParams) -> Result<f64> {
    p.validate()?;
    check_layout(grads, flow)?;
    let grid = Grid::of(grads.dims());
    let v = components(flow);
    Ok(energy_raw(&grid, grads, &v, p))
}

fn energy_raw(grid: &Grid, grads: &RayGradients, v: &[Vec<f64>; 3], p: &GlobalParams) -> f64 {
    let lx = grads.lx.as_slice().unwrap();
    let ly = grads.ly.as_slice().unwrap();
    let lz = grads.lz.as_slice().unwrap();
    let lt = grads.lt.as_slice().unwrap();
    let mut e = 0.0;
    for i in 0..grid.n {
        let r = lx[i] * v[0][i] + ly[i] * v[1][i] + lz[i] * v[2][i] + lt[i];
        e += p.penalty.rho(r * r).0;
    }
    let lam = [p.lambda, p.lambda, p.lambda_z];
    for c in 0..3 {
        for q in grad_sq(grid, &v[c]) {
            e += lam[c] * p.penalty.rho(q).0;
        }
    }
    e
}

/// Gradient of the energy with respect to each flow component, assembled
/// from the discrete Euler-Lagrange expression.
pub fn el_residual(
    grads: &RayGradients,
    flow: &FlowField,
    p: &GlobalParams,
) -> Result<[Array4<f64>; 3]> {
    p.validate()?;
    check_layout(grads, flow)?;
    let grid = Grid::of(grads.dims());
    let v = components(flow);
    let r = el_raw(&grid, grads, &v, p);
    let [nx, ny, nu, nv] = grid.dims;
    let shape = (nx, ny, nu, nv);
    Ok(r.map(|c| Array4::from_shape_vec(shape, c).unwrap()))
}

fn el_raw(grid: &Grid, grads: &RayGradients, v: &[Vec<f64>; 3], p: &GlobalParams) -> [Vec<f64>; 3] {
    let lx = grads.lx.as_slice().unwrap();
    let ly = grads.ly.as_slice().unwrap();
    let lz = grads.lz.as_slice().unwrap();
    let lt = grads.lt.as_slice().unwrap();
    let lam = [p.lambda, p.lambda, p.lambda_z];
    let mut out = [vec![0.0; grid.n], vec![0.0; grid.n], vec![0.0; grid.n]];

    for i in 0..grid.n {
        let g = [lx[i], ly[i], lz[i]];
        let r = g[0] * v[0][i] + g[1] * v[1][i] + g[2] * v[2][i] + lt[i];
        let wd = p.penalty.rho(r * r).1;
        for c in 0..3 {
            out[c][i] = 2.0 * wd * r * g[c];
        }
    }
    for c in 0..3 {
        let w: Vec<f64> = grad_sq(grid, &v[c])
            .into_iter()
            .map(|q| p.penalty.rho(q).1)
            .collect();
        let [nx, ny, nu, nv] = grid.dims;
        let mut i = 0usize;
        for ix in 0..nx {
            for iy in 0..ny {
                for iu in 0..nu {
                    for iv in 0..nv {
                        let pos = [ix, iy, iu, iv];
                        let mut acc = 0.0;
                        for a in 0..4 {
                            let s = grid.strides[a];
                            if pos[a] > 0 {
                                acc += w[i - s] * (v[c][i] - v[c][i - s]);
                            }
                            if pos[a] + 1 < grid.dims[a] {
                                acc -= w[i] * (v[c][i + s] - v[c][i]);
                            }
                        }
                        out[c][i] += 2.0 * lam[c] * acc;
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

fn el_norm(grid: &Grid, grads: &RayGradients, v: &[Vec<f64>; 3], p: &GlobalParams) -> f64 {
    let r = el_raw(grid, grads, v, p);
    r.iter()
        .flat_map(|c| c.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One linearization: quadratic energy in V with fixed data weights `wd` and
/// per-component smoothness weights `ws`.
fn linearized_energy(
    grid: &Grid,
    grads: &RayGradients,
    v: &[Vec<f64>; 3],
    wd: &[f64],
    ws: &[Vec<f64>; 3],
    lam: [f64; 3],
) -> f64 {
    let lx = grads.lx.as_slice().unwrap();
    let ly = grads.ly.as_slice().unwrap();
    let lz = grads.lz.as_slice().unwrap();
    let lt = grads.lt.as_slice().unwrap();
    let mut e = 0.0;
    for i in 0..grid.n {
        let r = lx[i] * v[0][i] + ly[i] * v[1][i] + lz[i] * v[2][i] + lt[i];
        e += wd[i] * r * r;
    }
    for c in 0..3 {
        for (q, w) in grad_sq(grid, &v[c]).into_iter().zip(&ws[c]) {
            e += lam[c] * w * q;
        }
    }
    e
}

/// Exact energy minimization over a constant shift of the field: the
/// smoothness term is invariant, so this solves the ray-summed 3x3 data
/// system. Returns the squared norm of the applied shift times the ray count.
fn constant_mode_correction(
    grid: &Grid,
    grads: &RayGradients,
    v: &mut [Vec<f64>; 3],
    wd: &[f64],
) -> f64 {
    let lx = grads.lx.as_slice().unwrap();
    let ly = grads.ly.as_slice().unwrap();
    let lz = grads.lz.as_slice().unwrap();
    let lt = grads.lt.as_slice().unwrap();
    let mut h = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for i in 0..grid.n {
        let g = [lx[i], ly[i], lz[i]];
        let r = g[0] * v[0][i] + g[1] * v[1][i] + g[2] * v[2][i] + lt[i];
        let w = wd[i];
        for a in 0..3 {
            for b in a..3 {
                h[a][b] += w * g[a] * g[b];
            }
            rhs[a] -= w * r * g[a];
        }
    }
    h[1][0] = h[0][1];
    h[2][0] = h[0][2];
    h[2][1] = h[1][2];

    let (vals, vecs) = eigh3(h);
    if vals[0] <= 0.0 {
        return 0.0;
    }
    let mut delta = [0.0f64; 3];
    for k in 0..3 {
        if vals[k] > 1e-12 * vals[0] {
            let coef = (vecs[k][0] * rhs[0] + vecs[k][1] * rhs[1] + vecs[k][2] * rhs[2]) / vals[k];
            for a in 0..3 {
                delta[a] += coef * vecs[k][a];
            }
        }
    }
    let d2 = delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2];
    if d2 == 0.0 {
        return 0.0;
    }
    for c in 0..3 {
        for x in v[c].iter_mut() {
            *x += delta[c];
        }
    }
    d2 * grid.n as f64
}

/// Solves the Euler-Lagrange system on fixed gradients: lagged
/// relinearization of the penalty weights around block-SOR sweeps. `init`
/// seeds the field (invalid entries read as zero).
///
/// Non-quadratic penalties start from a quadratic bootstrap pass: the
/// concave penalty has near-singular weights around zero, so relinearizing
/// at a zero init locks the field into an over-smoothed fixed point; the
/// quadratic pass provides a sensible starting basin.
pub fn hs_solve(
    grads: &RayGradients,
    p: &GlobalParams,
    init: &FlowField,
) -> Result<(FlowField, SolveStats)> {
    p.validate()?;
    check_layout(grads, init)?;
    let grid = Grid::of(grads.dims());
    let lx = grads.lx.as_slice().unwrap();
    let ly = grads.ly.as_slice().unwrap();
    let lz = grads.lz.as_slice().unwrap();
    let lt = grads.lt.as_slice().unwrap();
    let lam = [p.lambda, p.lambda, p.lambda_z];

    let mut v = components(init);
    let el_initial = el_norm(&grid, grads, &v, p);

    let n_lag = match p.penalty {
        Penalty::Quadratic => 1,
        _ => p.lagged_iters + 1,
    };

    let mut best = v.clone();
    let mut best_energy = energy_raw(&grid, grads, &v, p);
    let mut sweeps = 0usize;
    let mut converged = false;
    let mut energies = Vec::new();

    for lag in 0..n_lag {
        // freeze penalty weights for this linearization; the first
        // non-quadratic pass bootstraps with uniform (quadratic) weights
        let bootstrap = lag == 0 && p.penalty != Penalty::Quadratic;
        let wd: Vec<f64> = if bootstrap {
            vec![1.0; grid.n]
        } else {
            (0..grid.n)
                .map(|i| {
                    let r = lx[i] * v[0][i] + ly[i] * v[1][i] + lz[i] * v[2][i] + lt[i];
                    p.penalty.rho(r * r).1
                })
                .collect()
        };
        let ws: [Vec<f64>; 3] = [0, 1, 2].map(|c| {
            if bootstrap {
                vec![1.0; grid.n]
            } else {
                grad_sq(&grid, &v[c])
                    .into_iter()
                    .map(|q| p.penalty.rho(q).1)
                    .collect()
            }
        });

        energies.clear();
        energies.push(linearized_energy(&grid, grads, &v, &wd, &ws, lam));
        sweeps = 0;
        converged = false;

        for _ in 0..p.sor.max_iters {
            let mut upd2 = 0.0f64;
            let [nx, ny, nu, nv] = grid.dims;
            let mut i = 0usize;
            for ix in 0..nx {
                for iy in 0..ny {
                    for iu in 0..nu {
                        for iv in 0..nv {
                            let pos = [ix, iy, iu, iv];
                            let g = [lx[i], ly[i], lz[i]];
                            let w = wd[i];
                            let mut m = [
                                [w * g[0] * g[0], w * g[0] * g[1], w * g[0] * g[2]],
                                [0.0, w * g[1] * g[1], w * g[1] * g[2]],
                                [0.0, 0.0, w * g[2] * g[2]],
                            ];
                            let mut rhs = [
                                -w * g[0] * lt[i],
                                -w * g[1] * lt[i],
                                -w * g[2] * lt[i],
                            ];
                            for c in 0..3 {
                                let mut wcap = 0.0;
                                let mut nbr = 0.0;
                                for a in 0..4 {
                                    let s = grid.strides[a];
                                    if pos[a] > 0 {
                                        let wm = ws[c][i - s];
                                        wcap += wm;
                                        nbr += wm * v[c][i - s];
                                    }
                                    if pos[a] + 1 < grid.dims[a] {
                                        let wp = ws[c][i];
                                        wcap += wp;
                                        nbr += wp * v[c][i + s];
                                    }
                                }
                                m[c][c] += lam[c] * wcap;
                                rhs[c] += lam[c] * nbr;
                            }
                            m[1][0] = m[0][1];
                            m[2][0] = m[0][2];
                            m[2][1] = m[1][2];

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
                                    let dv = p.sor.omega * (vn[c] - v[c][i]);
                                    v[c][i] += dv;
                                    upd2 += dv * dv;
                                }
                            }
                            i += 1;
                        }
                    }
                }
            }
            upd2 += constant_mode_correction(&grid, grads, &mut v, &wd);
            sweeps += 1;
            energies.push(linearized_energy(&grid, grads, &v, &wd, &ws, lam));

            let val2: f64 = v.iter().flat_map(|c| c.iter()).map(|x| x * x).sum();
            if upd2.sqrt() <= p.sor.tol * val2.sqrt().max(1e-30) {
                converged = true;
                break;
            }
        }

        let e = energy_raw(&grid, grads, &v, p);
        if e < best_energy {
            best_energy = e;
            best = v.clone();
        }
    }

    let final_energy = energy_raw(&grid, grads, &v, p);
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

    let el_final = el_norm(&grid, grads, &v, p);
    let stats = SolveStats {
        sweeps,
        converged,
        energies,
        el_initial,
        el_final,
        warning,
    };
    Ok((assemble(grid.dims, &v), stats))
}

/// Coarse-to-fine wrapper: per pyramid level, warp lf1 by the current flow,
/// linearize the data term about it, and re-solve for the total flow.
pub fn hs_pyramidal(
    lf0: &LightField,
    lf1: &LightField,
    p: &GlobalParams,
) -> Result<(FlowField, SolveStats)> {
    p.validate()?;
    if !lf0.same_grid(lf1) {
        return Err(Error::DimensionMismatch(
            "light field pair must share calibration and dimensions".into(),
        ));
    }
    if p.outer.levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let pyr0 = build_pyramid(lf0, p.outer.levels, p.outer.factor)?;
    let pyr1 = build_pyramid(lf1, p.outer.levels, p.outer.factor)?;
    let n_levels = pyr0.levels.len();

    let mut est: Option<FlowField> = None;
    let mut last_stats = None;
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
        for it in 0..=p.outer.warp_iters {
            let warp_field = warpable(&cur);
            let warped = warp_flow(l1, &warp_field)?;
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
            // solve for total flow: data linearized about the warp field
            for ix in 0..nx {
                for iy in 0..ny {
                    for iu in 0..nu {
                        for iv in 0..nv {
                            let j = [ix, iy, iu, iv];
                            let w = warp_field.get(warp_field.index4(ix, iy, iu, iv));
                            grads.lt[j] -= grads.lx[j] * w.x
                                + grads.ly[j] * w.y
                                + grads.lz[j] * w.z;
                        }
                    }
                }
            }
            let (solved, stats) = hs_solve(&grads, p, &cur)?;
            cur = solved;
            last_stats = Some(stats);
        }
        est = Some(best);
    }

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
    let stats = last_stats.unwrap_or(SolveStats {
        sweeps: 0,
        converged: true,
        energies: Vec::new(),
        el_initial: 0.0,
        el_final: 0.0,
        warning: None,
    });
    Ok((flow, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MotionVector;
    use crate::gradients::compute_gradients;
    use crate::local::lk_window;
    use crate::synth::{render_pair, NoiseTexture, Plane, SceneSpec, Texture};
    use crate::tensor::Window4;
    use crate::testutil::{
        noise_plane, rand_stream, random_gradients, test_calib, wide_pixel_rig,
    };

    fn field_from(dims: [usize; 4], v: &[Vec<f64>; 3]) -> FlowField {
        assemble(dims, v)
    }

    #[test]
    fn charbonnier_values_and_derivative() {
        let (v, _) = charbonnier(0.0, 0.45, 1e-3);
        assert!((v - 1e-6f64.powf(0.45)).abs() < 1e-15);

        for &x2 in &[1e-6, 1e-2, 1.0] {
            let (_, d) = charbonnier(x2, 0.45, 1e-3);
            let h = x2 * 1e-5;
            let fd = (charbonnier(x2 + h, 0.45, 1e-3).0 - charbonnier(x2 - h, 0.45, 1e-3).0)
                / (2.0 * h);
            assert!(
                (d - fd).abs() <= 1e-6 * fd.abs(),
                "x2 {x2}: analytic {d} vs fd {fd}"
            );
        }

        // a = 1, eps = 0 degenerates to the quadratic penalty
        let (v, d) = charbonnier(0.37, 1.0, 0.0);
        assert!((v - 0.37).abs() < 1e-15 && (d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn energy_trivial_cases() {
        let c = test_calib(8);
        let g = random_gradients(c.clone(), 5, None);
        let mut g0 = g.clone();
        g0.lt.fill(0.0);
        let dims = g.dims();
        let zero = FlowField::constant(FlowLayout::FullRay(dims), MotionVector::ZERO);
        let p = GlobalParams::default();

        assert_eq!(hs_energy(&g0, &zero, &p).unwrap(), 0.0);

        let e = hs_energy(&g, &zero, &p).unwrap();
        let lt2: f64 = g.lt.iter().map(|x| x * x).sum();
        assert!((e - lt2).abs() <= 1e-12 * lt2);
    }

    #[test]
    fn energy_gradient_matches_el_residual() {
        let c = Calibration4x4();
        let g = random_gradients(c, 11, None);
        let dims = g.dims();
        let n: usize = dims.iter().product();
        let mut next = rand_stream(77);
        let v: [Vec<f64>; 3] =
            [0, 1, 2].map(|_| (0..n).map(|_| 0.2 * next()).collect::<Vec<f64>>());
        let d: [Vec<f64>; 3] = [0, 1, 2].map(|_| (0..n).map(|_| next()).collect::<Vec<f64>>());

        for penalty in [
            Penalty::Quadratic,
            Penalty::Charbonnier { a: 0.45, eps: 1e-3 },
        ] {
            let p = GlobalParams {
                penalty,
                ..GlobalParams::default()
            };
            let res = el_residual(&g, &field_from(dims, &v), &p).unwrap();
            let dot: f64 = (0..3)
                .map(|c| {
                    res[c]
                        .as_slice()
                        .unwrap()
                        .iter()
                        .zip(&d[c])
                        .map(|(r, x)| r * x)
                        .sum::<f64>()
                })
                .sum();

            let h = 1e-6;
            let shift = |sign: f64| {
                let mut w = v.clone();
                for c in 0..3 {
                    for i in 0..n {
                        w[c][i] += sign * h * d[c][i];
                    }
                }
                hs_energy(&g, &field_from(dims, &w), &p).unwrap()
            };
            let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            assert!(
                (fd - dot).abs() <= 1e-4 * fd.abs().max(dot.abs()),
                "{penalty:?}: fd {fd} vs residual dot {dot}"
            );
        }
    }

    #[allow(non_snake_case)]
    fn Calibration4x4() -> crate::geometry::Calibration {
        crate::geometry::Calibration {
            n_x: 3,
            n_y: 3,
            n_u: 6,
            n_v: 6,
            ..test_calib(6)
        }
    }

    #[test]
    fn zero_lt_converges_in_one_sweep() {
        let c = test_calib(10);
        let mut g = random_gradients(c, 21, None);
        g.lt.fill(0.0);
        let init = FlowField::full_ray(g.dims());
        let (flow, stats) = hs_solve(&g, &GlobalParams::default(), &init).unwrap();
        assert!(stats.converged);
        assert_eq!(stats.sweeps, 1);
        for (v, valid) in flow.iter() {
            assert!(valid);
            assert_eq!((v.x, v.y, v.z), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn single_plane_mae_below_tolerance() {
        let c = test_calib(32);
        let v_gt = MotionVector::new(0.4, 0.3, 0.0);
        let scene = noise_plane(300.0, 1.5, 1.0, v_gt, 29);
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let g = compute_gradients(&lf0, &lf1).unwrap();
        let p = GlobalParams::default();
        let init = FlowField::full_ray(g.dims());
        let (flow, stats) = hs_solve(&g, &p, &init).unwrap();
        assert!(stats.el_final < stats.el_initial);

        let mut mae = [0.0f64; 3];
        for (v, valid) in flow.iter() {
            assert!(valid);
            mae[0] += (v.x - v_gt.x).abs();
            mae[1] += (v.y - v_gt.y).abs();
            mae[2] += (v.z - v_gt.z).abs();
        }
        for m in mae.iter_mut() {
            *m /= flow.len() as f64;
        }
        assert!(
            mae.iter().all(|m| *m < 0.05),
            "per-component MAE {mae:?} mm"
        );
    }

    #[test]
    fn huge_lambda_matches_global_lk() {
        let c = wide_pixel_rig(49, 1.6);
        let scene = noise_plane(300.0, 8.0, 2.0, MotionVector::new(0.3, -0.2, 0.25), 31);
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let g = compute_gradients(&lf0, &lf1).unwrap();

        let w = Window4 {
            center: [4, 4, 24, 24],
            half: [4, 4, 24, 24],
        };
        let oracle = lk_window(&g, w, 0.02).unwrap();
        let v_lk = oracle.motion.expect("whole-field window must solve");

        let p = GlobalParams {
            lambda: 1e6,
            lambda_z: 1e6,
            ..GlobalParams::default()
        };
        let init = FlowField::full_ray(g.dims());
        let (flow, _) = hs_solve(&g, &p, &init).unwrap();
        let mut worst = 0.0f64;
        for (v, _) in flow.iter() {
            worst = worst.max(v.sub(&v_lk).norm());
        }
        assert!(worst < 1e-3, "max deviation from global LK: {worst} mm");
    }

    #[test]
    fn sor_energy_monotone_quadratic() {
        let c = test_calib(24);
        let scene = noise_plane(300.0, 1.5, 1.0, MotionVector::new(0.3, 0.1, 0.0), 37);
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let g = compute_gradients(&lf0, &lf1).unwrap();
        let p = GlobalParams {
            sor: SorParams {
                tol: 1e-14,
                max_iters: 60,
                ..SorParams::default()
            },
            ..GlobalParams::default()
        };
        let init = FlowField::full_ray(g.dims());
        let (_, stats) = hs_solve(&g, &p, &init).unwrap();
        assert!(stats.energies.len() >= 10);
        for pair in stats.energies.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-12),
                "energy rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn el_residual_drops_at_convergence() {
        let c = test_calib(24);
        let scene = noise_plane(300.0, 1.5, 1.0, MotionVector::new(0.2, -0.1, 0.0), 43);
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let g = compute_gradients(&lf0, &lf1).unwrap();
        let p = GlobalParams {
            sor: SorParams {
                tol: 1e-7,
                max_iters: 600,
                ..SorParams::default()
            },
            ..GlobalParams::default()
        };
        let init = FlowField::full_ray(g.dims());
        let (_, stats) = hs_solve(&g, &p, &init).unwrap();
        assert!(stats.converged, "solver should converge: {:?}", stats.warning);
        assert!(
            stats.el_final < 1e-4 * stats.el_initial,
            "residual {} vs initial {}",
            stats.el_final,
            stats.el_initial
        );
    }

    /// Two planes with equal-and-opposite lateral and Z motion.
    fn xz_two_plane(m: f64, seed: u64) -> SceneSpec {
        let near = Plane::infinite(280.0, Texture::Noise(NoiseTexture::new(seed, 8.0, 2.0, 0.15)))
            .with_motion(MotionVector::new(m, 0.0, m))
            .with_x_range(f64::NEG_INFINITY, 0.0);
        let far = Plane::infinite(
            320.0,
            Texture::Noise(NoiseTexture::new(seed ^ 0x77, 8.0, 2.0, 0.15)),
        )
        .with_motion(MotionVector::new(-m, 0.0, -m));
        SceneSpec::new(vec![near, far], seed).unwrap()
    }

    #[test]
    fn weak_z_smoothing_leaves_more_z_variation() {
        let c = wide_pixel_rig(48, 1.6);
        let scene = xz_two_plane(0.25, 47);
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let g = compute_gradients(&lf0, &lf1).unwrap();
        let p = GlobalParams {
            lambda: 40.0,
            lambda_z: 0.5,
            ..GlobalParams::default()
        };
        let init = FlowField::full_ray(g.dims());
        let (flow, _) = hs_solve(&g, &p, &init).unwrap();

        // ground-truth X and Z variation are identical; the weaker Z
        // smoothing must leave more of it in the output
        let [_, _, nu, nv] = c.dims();
        let mut vals = [Vec::new(), Vec::new()];
        for iu in 0..nu {
            for iv in 0..nv {
                let v = flow.get(flow.index4(4, 4, iu, iv));
                vals[0].push(v.x);
                vals[1].push(v.z);
            }
        }
        let var = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let (var_x, var_z) = (var(&vals[0]), var(&vals[1]));
        assert!(
            var_z > var_x,
            "Var(V_Z) = {var_z} should exceed Var(V_X) = {var_x}"
        );
    }

    /// 10%-90% rise distance of the mean V_X profile along u, in pixels.
    fn rise_width(flow: &FlowField, nu: usize, nv: usize) -> f64 {
        let mut profile = vec![0.0f64; nu];
        for iu in 0..nu {
            for iv in 0..nv {
                profile[iu] += flow.get(flow.index4(4, 4, iu, iv)).x;
            }
            profile[iu] /= nv as f64;
        }
        let hi = profile.iter().cloned().fold(f64::MIN, f64::max);
        let lo = profile.iter().cloned().fold(f64::MAX, f64::min);
        let (l90, l10) = (lo + 0.9 * (hi - lo), lo + 0.1 * (hi - lo));
        // profile decreases with u: find interpolated crossings
        let cross = |level: f64| {
            for i in 0..nu - 1 {
                if profile[i] >= level && profile[i + 1] < level {
                    return i as f64 + (profile[i] - level) / (profile[i] - profile[i + 1]);
                }
            }
            f64::NAN
        };
        cross(l10) - cross(l90)
    }

    #[test]
    fn charbonnier_keeps_motion_boundary_sharper() {
        let c = test_calib(48);
        let near = Plane::infinite(250.0, Texture::Noise(NoiseTexture::new(53, 1.0, 1.0, 0.15)))
            .with_motion(MotionVector::new(0.25, 0.0, 0.0))
            .with_x_range(f64::NEG_INFINITY, 0.0);
        let far = Plane::infinite(350.0, Texture::Noise(NoiseTexture::new(53 ^ 0x5eed, 1.0, 1.0, 0.15)))
            .with_motion(MotionVector::new(-0.25, 0.0, 0.0));
        let scene = SceneSpec::new(vec![near, far], 53).unwrap();
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let g = compute_gradients(&lf0, &lf1).unwrap();
        let init = FlowField::full_ray(g.dims());

        let quad = GlobalParams { lambda: 0.5, lambda_z: 0.5, ..GlobalParams::default() };
        let char_p = GlobalParams {
            lambda: 0.5,
            lambda_z: 0.5,
            penalty: Penalty::Charbonnier { a: 0.45, eps: 1e-3 },
            lagged_iters: 4,
            ..GlobalParams::default()
        };
        let (fq, _) = hs_solve(&g, &quad, &init).unwrap();
        let (fc, _) = hs_solve(&g, &char_p, &init).unwrap();

        let wq = rise_width(&fq, 48, 48);
        let wc = rise_width(&fc, 48, 48);
        assert!(
            wc < wq,
            "charbonnier rise width {wc} px should be below quadratic {wq} px"
        );
    }

    #[test]
    fn pyramidal_smoke_recovers_single_plane() {
        let c = test_calib(32);
        let v_gt = MotionVector::new(0.4, 0.3, 0.0);
        let scene = noise_plane(300.0, 1.5, 1.0, v_gt, 59);
        let (lf0, lf1, _) = render_pair(&scene, &c).unwrap();
        let (flow, _) = hs_pyramidal(&lf0, &lf1, &GlobalParams::default()).unwrap();
        let mut mae = 0.0;
        let mut n = 0usize;
        for (v, valid) in flow.iter() {
            if valid {
                mae += v.sub(&v_gt).norm();
                n += 1;
            }
        }
        assert!(n > flow.len() / 2);
        let mae = mae / n as f64;
        assert!(mae < 0.05, "pyramidal MAE {mae} mm");
    }


    #[test]
    fn invalid_params_rejected() {
        let c = test_calib(6);
        let g = random_gradients(c, 3, None);
        let init = FlowField::full_ray(g.dims());

        let mut p = GlobalParams::default();
        p.sor.omega = 2.0;
        assert!(hs_solve(&g, &p, &init).is_err());

        let mut p = GlobalParams::default();
        p.lambda = 0.0;
        assert!(hs_solve(&g, &p, &init).is_err());

        let p = GlobalParams {
            penalty: Penalty::Charbonnier { a: 0.6, eps: 1e-3 },
            ..GlobalParams::default()
        };
        assert!(hs_solve(&g, &p, &init).is_err());

        // central-view layout cannot seed a full-ray solve
        let bad = FlowField::central_view([6, 6]);
        assert!(hs_solve(&g, &GlobalParams::default(), &bad).is_err());
    }
}
