//! Light-field structure tensor and motion recoverability analysis.
//!
//! Over a 4D window the gradient triples g = (L_X, L_Y, L_Z) accumulate into
//! S = sum g g^T, a 3x3 PSD matrix whose spectrum decides which motion
//! components the window constrains. Physically realizable windows have rank
//! 0 (no texture), 2 (a single edge orientation), or 3 (2D texture) — never
//! rank 1, because L_Z is a (u, v)-weighted mix of L_X and L_Y and any window
//! with angular and pixel extent spreads that mix over at least two
//! directions.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::MotionVector;
use crate::gradients::RayGradients;

/// Closed-form eigen-decomposition of a symmetric 3x3 matrix.
/// Returns eigenvalues in descending order with matching orthonormal
/// eigenvectors (rows of the returned matrix).
pub fn eigh3(a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return ([0.0; 3], identity3());
    }
    let mut b = a;
    for row in b.iter_mut() {
        for v in row.iter_mut() {
            *v /= scale;
        }
    }

    let off = b[0][1] * b[0][1] + b[0][2] * b[0][2] + b[1][2] * b[1][2];
    let (l0, l1, l2) = if off < 1e-30 {
        (b[0][0], b[1][1], b[2][2])
    } else {
        // trigonometric solution of the characteristic polynomial
        let q = (b[0][0] + b[1][1] + b[2][2]) / 3.0;
        let p2 = (b[0][0] - q).powi(2) + (b[1][1] - q).powi(2) + (b[2][2] - q).powi(2)
            + 2.0 * off;
        let p = (p2 / 6.0).sqrt();
        let mut c = b;
        for (i, row) in c.iter_mut().enumerate() {
            row[i] -= q;
            for v in row.iter_mut() {
                *v /= p;
            }
        }
        let r = (det3(&c) / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e0 = q + 2.0 * p * phi.cos();
        let e2 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
        (e0, 3.0 * q - e0 - e2, e2)
    };
    let mut vals = [l0, l1, l2];
    vals.sort_by(|x, y| y.total_cmp(x));

    // eigenvector of the most isolated eigenvalue first, then diagonalize the
    // orthogonal complement — robust against near-degenerate pairs
    let first = if vals[0] - vals[1] >= vals[1] - vals[2] { 0 } else { 2 };
    let v_first = null_direction(&b, vals[first]);
    let (u, w) = complement_basis(v_first);
    let bu = mat_vec3(&b, u);
    let bw = mat_vec3(&b, w);
    let muu = dot3(u, bu);
    let muw = dot3(u, bw);
    let mww = dot3(w, bw);
    let theta = 0.5 * (2.0 * muw).atan2(muu - mww);
    let (s, c) = theta.sin_cos();
    let p1 = [
        c * u[0] + s * w[0],
        c * u[1] + s * w[1],
        c * u[2] + s * w[2],
    ];
    let p2v = [
        -s * u[0] + c * w[0],
        -s * u[1] + c * w[1],
        -s * u[2] + c * w[2],
    ];
    let e_p1 = dot3(p1, mat_vec3(&b, p1));
    let e_p2 = dot3(p2v, mat_vec3(&b, p2v));

    // assemble (value, vector) triples and sort descending
    let mut pairs = [
        (vals[first], v_first),
        (e_p1, p1),
        (e_p2, p2v),
    ];
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    (
        [
            pairs[0].0 * scale,
            pairs[1].0 * scale,
            pairs[2].0 * scale,
        ],
        [pairs[0].1, pairs[1].1, pairs[2].1],
    )
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn mat_vec3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// Unit vector spanning the null space of (A - lambda I), via the largest
/// cross product of its rows; falls back to a coordinate axis when the
/// eigenvalue is (near-)degenerate and any direction in a plane works.
fn null_direction(a: &[[f64; 3]; 3], lambda: f64) -> [f64; 3] {
    let m = [
        [a[0][0] - lambda, a[0][1], a[0][2]],
        [a[1][0], a[1][1] - lambda, a[1][2]],
        [a[2][0], a[2][1], a[2][2] - lambda],
    ];
    let candidates = [
        cross3(m[0], m[1]),
        cross3(m[0], m[2]),
        cross3(m[1], m[2]),
    ];
    let mut best = candidates[0];
    let mut best_n = norm3(best);
    for c in &candidates[1..] {
        let n = norm3(*c);
        if n > best_n {
            best = *c;
            best_n = n;
        }
    }
    if best_n < 1e-12 {
        // (near) multiplicity >= 2: pick the row of m with the largest norm
        // and return any unit vector orthogonal to it
        let mut row = m[0];
        for r in &m[1..] {
            if norm3(*r) > norm3(row) {
                row = *r;
            }
        }
        if norm3(row) < 1e-12 {
            return [1.0, 0.0, 0.0];
        }
        let (u, _) = complement_basis(normalize3(row));
        return u;
    }
    normalize3(best)
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Any orthonormal pair spanning the plane orthogonal to unit vector v.
fn complement_basis(v: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if v[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize3(cross3(v, pick));
    let w = cross3(v, u);
    (u, w)
}

/// 4D window given by a center ray index and half-extents per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window4 {
    pub center: [usize; 4],
    pub half: [usize; 4],
}

impl Window4 {
    pub fn ray_count(&self) -> usize {
        self.half.iter().map(|h| 2 * h + 1).product()
    }
}

#[derive(Debug, Clone)]
pub struct StructureTensor {
    pub s: [[f64; 3]; 3],
    /// Descending: lambda1 >= lambda2 >= lambda3.
    pub eigenvalues: [f64; 3],
    /// Row i is the unit eigenvector of eigenvalues[i].
    pub eigenvectors: [[f64; 3]; 3],
    pub window: Window4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankClass {
    Smooth,
    Edge,
    FullTexture,
}

impl RankClass {
    pub fn rank(&self) -> usize {
        match self {
            RankClass::Smooth => 0,
            RankClass::Edge => 2,
            RankClass::FullTexture => 3,
        }
    }
}

/// Eigenvalue thresholds for rank classification: `tau` relative to the
/// leading eigenvalue, `tau_abs` an absolute floor below which a window
/// counts as textureless (scaled with window size so noise sums don't
/// promote smooth windows).
#[derive(Debug, Clone, Copy)]
pub struct RankThresholds {
    pub tau: f64,
    pub tau_abs: f64,
}

impl RankThresholds {
    pub const DEFAULT_TAU: f64 = 0.02;

    pub fn for_window(ray_count: usize) -> Self {
        RankThresholds {
            tau: Self::DEFAULT_TAU,
            tau_abs: 1e-6 * ray_count as f64,
        }
    }
}

/// Accumulated normal-equation sums over a window: S = sum g g^T and
/// rhs = -sum g L_t. Shared between the tensor analysis and the local solver.
pub(crate) struct WindowSums {
    pub s: [[f64; 3]; 3],
    pub rhs: [f64; 3],
    pub count: usize,
}

pub(crate) fn window_sums(grads: &RayGradients, w: &Window4) -> Result<WindowSums> {
    let [nx, ny, nu, nv] = grads.dims();
    let dims = [nx, ny, nu, nv];
    for a in 0..4 {
        if w.center[a] >= dims[a]
            || w.center[a] < w.half[a]
            || w.center[a] + w.half[a] >= dims[a]
        {
            return Err(Error::invalid(format!(
                "window exceeds grid bounds on axis {a}"
            )));
        }
    }
    let mut s = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    let mut count = 0usize;
    for ix in w.center[0] - w.half[0]..=w.center[0] + w.half[0] {
        for iy in w.center[1] - w.half[1]..=w.center[1] + w.half[1] {
            for iu in w.center[2] - w.half[2]..=w.center[2] + w.half[2] {
                for iv in w.center[3] - w.half[3]..=w.center[3] + w.half[3] {
                    let g = grads.g(ix, iy, iu, iv);
                    let lt = grads.lt[[ix, iy, iu, iv]];
                    for r in 0..3 {
                        for c in r..3 {
                            s[r][c] += g[r] * g[c];
                        }
                        rhs[r] -= g[r] * lt;
                    }
                    count += 1;
                }
            }
        }
    }
    for r in 0..3 {
        for c in 0..r {
            s[r][c] = s[c][r];
        }
    }
    Ok(WindowSums { s, rhs, count })
}

pub fn structure_tensor(grads: &RayGradients, w: Window4) -> Result<StructureTensor> {
    let sums = window_sums(grads, &w)?;
    let (eigenvalues, eigenvectors) = eigh3(sums.s);
    Ok(StructureTensor {
        s: sums.s,
        eigenvalues,
        eigenvectors,
        window: w,
    })
}

pub fn classify(st: &StructureTensor, th: &RankThresholds) -> RankClass {
    classify_eigenvalues(st.eigenvalues, th)
}

pub fn classify_eigenvalues(ev: [f64; 3], th: &RankThresholds) -> RankClass {
    let [l1, _, l3] = ev;
    if l1 < th.tau_abs {
        RankClass::Smooth
    } else if l3 >= th.tau * l1 {
        RankClass::FullTexture
    } else {
        RankClass::Edge
    }
}

/// The motion directions a window constrains: eigenvectors whose eigenvalues
/// pass the thresholds. A one-dimensional result cannot arise from a real
/// edge or texture patch, so it is flagged as a non-physical spectrum.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub dirs: Vec<[f64; 3]>,
    pub non_physical: bool,
}

impl Subspace {
    pub fn dim(&self) -> usize {
        self.dirs.len()
    }

    /// Norm of the projection of `d` onto the subspace.
    pub fn projection_norm(&self, d: [f64; 3]) -> f64 {
        let n = norm3(d);
        if n == 0.0 {
            return 0.0;
        }
        let unit = normalize3(d);
        self.dirs
            .iter()
            .map(|e| dot3(*e, unit).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn recoverable_subspace(st: &StructureTensor, th: &RankThresholds) -> Subspace {
    let l1 = st.eigenvalues[0];
    if l1 < th.tau_abs {
        return Subspace {
            dirs: Vec::new(),
            non_physical: false,
        };
    }
    let dirs: Vec<[f64; 3]> = st
        .eigenvalues
        .iter()
        .zip(st.eigenvectors.iter())
        .filter(|(l, _)| **l >= th.tau * l1)
        .map(|(_, v)| *v)
        .collect();
    Subspace {
        non_physical: dirs.len() == 1,
        dirs,
    }
}

/// Minimum-norm solution of a single ray's flow equation: the motion
/// component along the gradient direction.
pub fn normal_flow(g: [f64; 3], lt: f64) -> Result<MotionVector> {
    let n2 = dot3(g, g);
    if n2 == 0.0 {
        return Err(Error::invalid("zero gradient has no normal flow"));
    }
    let s = -lt / n2;
    Ok(MotionVector::new(g[0] * s, g[1] * s, g[2] * s))
}

/// Per-central-view-pixel eigenvalue and class maps over windows of full
/// angular extent and the given pixel half-extent. Windows are clipped at the
/// image border.
pub struct EigenMaps {
    /// (3, n_u, n_v): lambda1..3 per pixel.
    pub lambda: Array3<f64>,
    /// Rank per pixel: 0, 2 or 3.
    pub class: Array2<u8>,
}

pub fn eigen_maps(grads: &RayGradients, half_u: usize, half_v: usize, tau: f64) -> EigenMaps {
    let [nx, ny, nu, nv] = grads.dims();

    // gradient products summed over all cameras, per (u, v)
    let mut prod: [Array2<f64>; 6] = std::array::from_fn(|_| Array2::zeros((nu, nv)));
    for ix in 0..nx {
        for iy in 0..ny {
            for iu in 0..nu {
                for iv in 0..nv {
                    let g = grads.g(ix, iy, iu, iv);
                    let p = [
                        g[0] * g[0],
                        g[0] * g[1],
                        g[0] * g[2],
                        g[1] * g[1],
                        g[1] * g[2],
                        g[2] * g[2],
                    ];
                    for (k, val) in p.iter().enumerate() {
                        prod[k][[iu, iv]] += val;
                    }
                }
            }
        }
    }

    // summed-area tables (one zero-padded row and column) make every window
    // sum O(1), so the per-pixel maps cost the same as one pass over the rays
    let mut sat: [Array2<f64>; 6] = std::array::from_fn(|_| Array2::zeros((nu + 1, nv + 1)));
    for k in 0..6 {
        for iu in 0..nu {
            for iv in 0..nv {
                sat[k][[iu + 1, iv + 1]] = prod[k][[iu, iv]] + sat[k][[iu, iv + 1]]
                    + sat[k][[iu + 1, iv]]
                    - sat[k][[iu, iv]];
            }
        }
    }
    let rect = |k: usize, u0: usize, u1: usize, v0: usize, v1: usize| {
        sat[k][[u1 + 1, v1 + 1]] - sat[k][[u0, v1 + 1]] - sat[k][[u1 + 1, v0]]
            + sat[k][[u0, v0]]
    };

    let mut lambda = Array3::zeros((3, nu, nv));
    let mut class = Array2::zeros((nu, nv));
    for cu in 0..nu {
        let u0 = cu.saturating_sub(half_u);
        let u1 = (cu + half_u).min(nu - 1);
        for cv in 0..nv {
            let v0 = cv.saturating_sub(half_v);
            let v1 = (cv + half_v).min(nv - 1);
            let e: Vec<f64> = (0..6).map(|k| rect(k, u0, u1, v0, v1)).collect();
            let s = [[e[0], e[1], e[2]], [e[1], e[3], e[4]], [e[2], e[4], e[5]]];
            let (vals, _) = eigh3(s);
            for k in 0..3 {
                lambda[[k, cu, cv]] = vals[k];
            }
            let count = nx * ny * (u1 - u0 + 1) * (v1 - v0 + 1);
            let th = RankThresholds {
                tau,
                tau_abs: 1e-6 * count as f64,
            };
            class[[cu, cv]] = classify_eigenvalues(vals, &th).rank() as u8;
        }
    }
    EigenMaps { lambda, class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Calibration, MotionVector};
    use crate::gradients::compute_gradients;
    use crate::synth::{render, NoiseTexture, Plane, SceneSpec, Texture};
    use nalgebra::{Matrix3, SymmetricEigen};

    fn rand_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }
    }

    fn check_against_nalgebra(a: [[f64; 3]; 3], tol: f64) {
        let (vals, vecs) = eigh3(a);
        let m = Matrix3::new(
            a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
        );
        let oracle = SymmetricEigen::new(m);
        let mut ovals: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
        ovals.sort_by(|x, y| y.total_cmp(x));
        let scale = vals[0].abs().max(vals[2].abs()).max(1e-300);
        for k in 0..3 {
            assert!(
                (vals[k] - ovals[k]).abs() <= tol * scale,
                "eigenvalue {k}: {} vs {}",
                vals[k],
                ovals[k]
            );
        }
        // orthonormality and the eigen relation (vector signs are free)
        for i in 0..3 {
            for j in 0..3 {
                let d = dot3(vecs[i], vecs[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9, "orthonormality {i}{j}: {d}");
            }
            let av = mat_vec3(&a, vecs[i]);
            let res = [
                av[0] - vals[i] * vecs[i][0],
                av[1] - vals[i] * vecs[i][1],
                av[2] - vals[i] * vecs[i][2],
            ];
            assert!(
                norm3(res) <= 20.0 * tol * scale,
                "eigen residual {i}: {}",
                norm3(res)
            );
        }
    }

    #[test]
    fn eigh3_matches_oracle_on_random_symmetric() {
        let mut next = rand_stream(0xabcdef12345);
        for _ in 0..300 {
            let mut a = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in r..3 {
                    let v = next() * 4.0;
                    a[r][c] = v;
                    a[c][r] = v;
                }
            }
            check_against_nalgebra(a, 1e-9);
        }
    }

    #[test]
    fn eigh3_matches_oracle_on_gram_matrices() {
        let mut next = rand_stream(777);
        for _ in 0..300 {
            let mut a = [[0.0f64; 3]; 3];
            // S = sum of outer products: always PSD like real tensors
            for _ in 0..5 {
                let g = [next(), next(), next()];
                for r in 0..3 {
                    for c in 0..3 {
                        a[r][c] += g[r] * g[c];
                    }
                }
            }
            check_against_nalgebra(a, 1e-9);
            let (vals, _) = eigh3(a);
            assert!(vals[2] >= -1e-12 * vals[0].max(1e-300));
        }
    }

    #[test]
    fn eigh3_degenerate_spectra() {
        check_against_nalgebra([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]], 1e-12);
        check_against_nalgebra([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]], 1e-12);
        check_against_nalgebra([[5.0, 0.0, 0.0], [0.0, 1e-14, 0.0], [0.0, 0.0, 0.0]], 1e-12);
        let (vals, vecs) = eigh3([[0.0; 3]; 3]);
        assert_eq!(vals, [0.0; 3]);
        assert_eq!(vecs, identity3());
    }

    fn static_gradients(scene: &SceneSpec, calib: &Calibration) -> RayGradients {
        let lf = render(scene, calib, 0.0).unwrap();
        compute_gradients(&lf, &lf).unwrap()
    }

    fn test_calib() -> Calibration {
        Calibration {
            gamma: 100.0,
            cam_spacing_x: 0.45,
            cam_spacing_y: 0.45,
            pixel_scale_u: 0.25,
            pixel_scale_v: 0.25,
            n_x: 9,
            n_y: 9,
            n_u: 32,
            n_v: 32,
        }
    }

    /// Wide camera baseline and field of view. Depth-related eigenvalues
    /// scale with the angular diversity of the active rays (roughly the
    /// variance of u/gamma over the window), so separating them from zero
    /// with margin needs ray bundles spanning substantial angle.
    fn wide_rig() -> Calibration {
        Calibration {
            gamma: 100.0,
            cam_spacing_x: 20.0,
            cam_spacing_y: 20.0,
            pixel_scale_u: 0.8,
            pixel_scale_v: 0.8,
            n_x: 9,
            n_y: 9,
            n_u: 96,
            n_v: 96,
        }
    }

    /// Noise with features well above the inter-camera texture shift
    /// (~6.7 mm on the wide rig at Z = 300) so camera differences resolve
    /// the gradients.
    fn wide_noise(seed: u64) -> Texture {
        Texture::Noise(NoiseTexture::new(seed, 8.0, 2.0, 0.15))
    }

    fn uv_window(c: &Calibration, center_uv: [usize; 2], half_uv: [usize; 2]) -> Window4 {
        Window4 {
            center: [(c.n_x - 1) / 2, (c.n_y - 1) / 2, center_uv[0], center_uv[1]],
            half: [(c.n_x - 1) / 2, (c.n_y - 1) / 2, half_uv[0], half_uv[1]],
        }
    }

    fn full_window(c: &Calibration) -> Window4 {
        let cu = (c.n_u - 1) / 2;
        let cv = (c.n_v - 1) / 2;
        uv_window(
            c,
            [cu, cv],
            [cu.min(c.n_u - 1 - cu), cv.min(c.n_v - 1 - cv)],
        )
    }

    #[test]
    fn canonical_patches_classify_correctly() {
        let c = wide_rig();
        let w = full_window(&c);
        let th = RankThresholds::for_window(w.ray_count());

        let smooth = SceneSpec::new(
            vec![Plane::infinite(300.0, Texture::Constant { value: 0.5 })],
            0,
        )
        .unwrap();
        let g = static_gradients(&smooth, &c);
        let st = structure_tensor(&g, w).unwrap();
        assert_eq!(classify(&st, &th), RankClass::Smooth);
        assert_eq!(recoverable_subspace(&st, &th).dim(), 0);

        let edge = SceneSpec::new(
            vec![Plane::infinite(
                300.0,
                Texture::Edge {
                    width: 12.0,
                    lo: 0.25,
                    hi: 0.75,
                },
            )],
            0,
        )
        .unwrap();
        let g = static_gradients(&edge, &c);
        let st = structure_tensor(&g, w).unwrap();
        let [l1, l2, l3] = st.eigenvalues;
        assert!(l2 / l1 > 0.01, "edge lambda2/lambda1 = {}", l2 / l1);
        assert!(l3 / l1 < 1e-6, "edge lambda3/lambda1 = {}", l3 / l1);
        assert_eq!(classify(&st, &th), RankClass::Edge);
        let sub = recoverable_subspace(&st, &th);
        assert_eq!(sub.dim(), 2, "lambda2/lambda1 = {}", l2 / l1);
        assert!(!sub.non_physical);
        // a vertical edge leaves Y-motion unrecoverable
        assert!(
            sub.projection_norm([0.0, 1.0, 0.0]) < 0.1,
            "Y projection {}",
            sub.projection_norm([0.0, 1.0, 0.0])
        );

        let texture =
            SceneSpec::new(vec![Plane::infinite(300.0, wide_noise(5))], 0).unwrap();
        let g = static_gradients(&texture, &c);
        let st = structure_tensor(&g, w).unwrap();
        assert_eq!(classify(&st, &th), RankClass::FullTexture);
        assert_eq!(recoverable_subspace(&st, &th).dim(), 3);
    }

    #[test]
    fn single_ray_outer_product() {
        // degenerate synthetic input: gradients nonzero at exactly one ray
        let c = Calibration {
            n_x: 3,
            n_y: 3,
            n_u: 3,
            n_v: 3,
            ..test_calib()
        };
        let shape = (3, 3, 3, 3);
        let mut lx = ndarray::Array4::zeros(shape);
        lx[[1, 1, 1, 1]] = 1.0;
        let g = RayGradients {
            calib: c,
            lx,
            ly: ndarray::Array4::zeros(shape),
            lz: ndarray::Array4::zeros(shape),
            lt: ndarray::Array4::zeros(shape),
        };
        let st = structure_tensor(
            &g,
            Window4 {
                center: [1, 1, 1, 1],
                half: [1, 1, 1, 1],
            },
        )
        .unwrap();
        assert_eq!(st.s[0][0], 1.0);
        assert_eq!(st.eigenvalues[0], 1.0);
        assert_eq!(st.eigenvalues[1], 0.0);
        // the spectrum is rank 1 — flagged as non-physical
        let th = RankThresholds { tau: 0.02, tau_abs: 1e-6 };
        let sub = recoverable_subspace(&st, &th);
        assert_eq!(sub.dim(), 1);
        assert!(sub.non_physical);
    }

    #[test]
    fn rank_one_never_occurs_in_rendered_windows() {
        let c = wide_rig();
        // (scene, edge angle; None marks 2D noise)
        let mut scenes = vec![
            (
                SceneSpec::new(vec![Plane::infinite(260.0, wide_noise(21))], 0).unwrap(),
                None,
            ),
            (
                SceneSpec::new(vec![Plane::infinite(340.0, wide_noise(22))], 0).unwrap(),
                None,
            ),
        ];
        for (i, angle_deg) in [0.0f64, 40.0, 90.0, 130.0].iter().enumerate() {
            for z in [260.0, 340.0] {
                scenes.push((
                    SceneSpec::new(
                        vec![Plane::infinite(
                            z,
                            Texture::OrientedEdge {
                                angle: angle_deg.to_radians(),
                                offset: 7.0 * i as f64 - 10.0,
                                width: 12.0,
                                lo: 0.2,
                                hi: 0.8,
                            },
                        )],
                        0,
                    )
                    .unwrap(),
                    Some(*angle_deg),
                ));
            }
        }

        let mut significant = 0usize;
        for (si, (scene, angle)) in scenes.iter().enumerate() {
            let g = static_gradients(scene, &c);
            // noise scenes get sub-windows of assorted sizes. Edge scenes get
            // near-full windows — the edge's angular sweep across cameras is
            // what carries the second eigenvalue, so a window may only be
            // shrunk along the edge tangent, not across the sweep.
            let windows: Vec<Window4> = match angle {
                None => {
                    let mut ws = Vec::new();
                    for &(h, step) in &[(6usize, 16usize), (12, 24), (20, 27)] {
                        let mut centers = Vec::new();
                        let mut p = h;
                        while p <= c.n_u - 1 - h {
                            centers.push(p);
                            p += step;
                        }
                        for &cu in &centers {
                            for &cv in &centers {
                                ws.push(uv_window(&c, [cu, cv], [h, h]));
                            }
                        }
                    }
                    ws
                }
                Some(0.0) => vec![
                    full_window(&c),
                    uv_window(&c, [47, 30], [47, 30]),
                    uv_window(&c, [47, 65], [47, 30]),
                ],
                Some(90.0) => vec![
                    full_window(&c),
                    uv_window(&c, [30, 47], [30, 47]),
                    uv_window(&c, [65, 47], [30, 47]),
                ],
                Some(_) => vec![full_window(&c)],
            };
            for w in windows {
                let st = structure_tensor(&g, w).unwrap();
                let th = RankThresholds::for_window(w.ray_count());
                if st.eigenvalues[0] > th.tau_abs {
                    let ratio = st.eigenvalues[1] / st.eigenvalues[0];
                    assert!(
                        ratio >= 0.01,
                        "rank-1-like spectrum (scene {si}, center {:?}): ratio {ratio}",
                        w.center
                    );
                    significant += 1;
                }
            }
        }
        assert!(significant > 100, "too few significant windows: {significant}");
    }

    #[test]
    fn edge_z_eigenvalue_grows_with_pixel_extent() {
        // wider (u, v) windows admit the edge as seen from more cameras,
        // widening the angular sweep and strengthening the second eigenvalue
        let c = wide_rig();
        let edge = SceneSpec::new(
            vec![Plane::infinite(
                300.0,
                Texture::Edge {
                    width: 12.0,
                    lo: 0.25,
                    hi: 0.75,
                },
            )],
            0,
        )
        .unwrap();
        let g = static_gradients(&edge, &c);
        let mut prev_ratio = f64::INFINITY;
        for half in [6usize, 15, 25] {
            let st = structure_tensor(&g, uv_window(&c, [47, 47], [half, 47])).unwrap();
            let ratio = st.eigenvalues[0] / st.eigenvalues[1];
            assert!(
                ratio < prev_ratio,
                "ratio {ratio} did not decrease at half {half}"
            );
            prev_ratio = ratio;
        }
    }

    #[test]
    fn normal_flow_formula_and_property() {
        let v = normal_flow([1.0, 0.0, 0.0], -2.0).unwrap();
        assert_eq!((v.x, v.y, v.z), (2.0, 0.0, 0.0));
        let v = normal_flow([0.3, -0.7, 0.9], 0.0).unwrap();
        assert_eq!((v.x, v.y, v.z), (0.0, 0.0, 0.0));
        assert!(normal_flow([0.0, 0.0, 0.0], 1.0).is_err());

        let mut next = rand_stream(42);
        for _ in 0..10_000 {
            let g = [next() * 3.0, next() * 3.0, next() * 3.0];
            let lt = next() * 2.0;
            if dot3(g, g) < 1e-6 {
                continue;
            }
            let v = normal_flow(g, lt).unwrap();
            let res = g[0] * v.x + g[1] * v.y + g[2] * v.z + lt;
            assert!(res.abs() < 1e-12 * (1.0 + lt.abs()), "residual {res}");
        }
    }

    #[test]
    fn classification_matches_subspace_dimension() {
        let mut next = rand_stream(7);
        for _ in 0..200 {
            let mut s = [[0.0f64; 3]; 3];
            let n_rays = (next().abs() * 20.0) as usize + 1;
            for _ in 0..n_rays {
                let g = [next(), next(), next()];
                for r in 0..3 {
                    for c in 0..3 {
                        s[r][c] += g[r] * g[c];
                    }
                }
            }
            let (eigenvalues, eigenvectors) = eigh3(s);
            let st = StructureTensor {
                s,
                eigenvalues,
                eigenvectors,
                window: Window4 {
                    center: [0; 4],
                    half: [0; 4],
                },
            };
            let th = RankThresholds::for_window(n_rays);
            let class = classify(&st, &th);
            let sub = recoverable_subspace(&st, &th);
            match class {
                RankClass::Smooth => assert_eq!(sub.dim(), 0),
                RankClass::FullTexture => assert_eq!(sub.dim(), 3),
                // Edge admits dim 1 or 2 spectra; dim 1 is flagged
                RankClass::Edge => assert!(sub.dim() == 2 || sub.non_physical),
            }
        }
    }

    #[test]
    fn eigen_maps_match_direct_windows() {
        let c = wide_rig();
        let scene = SceneSpec::new(vec![Plane::infinite(300.0, wide_noise(3))], 0).unwrap();
        let g = static_gradients(&scene, &c);
        let maps = eigen_maps(&g, 46, 46, RankThresholds::DEFAULT_TAU);
        assert_eq!(maps.lambda.dim(), (3, 96, 96));
        for cu in 0..96 {
            for cv in 0..96 {
                assert!(maps.lambda[[0, cu, cv]] >= maps.lambda[[1, cu, cv]]);
                assert!(maps.lambda[[1, cu, cv]] >= maps.lambda[[2, cu, cv]]);
                assert!(
                    maps.lambda[[2, cu, cv]]
                        >= -1e-9 * maps.lambda[[0, cu, cv]].max(1e-300)
                );
                assert!(matches!(maps.class[[cu, cv]], 0 | 2 | 3));
            }
        }
        // a near-full window over 2D texture is rank 3
        assert_eq!(maps.class[[48, 48]], 3);

        // the summed-area path agrees with direct window accumulation, both
        // in the interior and where the border clamps the window
        let direct = structure_tensor(&g, uv_window(&c, [48, 48], [46, 46])).unwrap();
        let corner = structure_tensor(&g, uv_window(&c, [23, 23], [23, 23])).unwrap();
        for k in 0..3 {
            let tol = 1e-9 * direct.eigenvalues[0].max(1.0);
            assert!(
                (maps.lambda[[k, 48, 48]] - direct.eigenvalues[k]).abs() <= tol,
                "interior eigenvalue {k} mismatch"
            );
            let tol = 1e-9 * corner.eigenvalues[0].max(1.0);
            assert!(
                (maps.lambda[[k, 0, 0]] - corner.eigenvalues[k]).abs() <= tol,
                "corner eigenvalue {k} mismatch"
            );
        }
    }

    #[test]
    fn eigen_maps_on_smooth_scene_are_all_smooth() {
        let c = Calibration {
            n_u: 16,
            n_v: 16,
            ..wide_rig()
        };
        let scene = SceneSpec::new(
            vec![Plane::infinite(300.0, Texture::Constant { value: 0.5 })],
            0,
        )
        .unwrap();
        let g = static_gradients(&scene, &c);
        let maps = eigen_maps(&g, 4, 4, RankThresholds::DEFAULT_TAU);
        for cu in 0..16 {
            for cv in 0..16 {
                assert_eq!(maps.class[[cu, cv]], 0);
                assert_eq!(maps.lambda[[0, cu, cv]], 0.0);
            }
        }
    }

    #[test]
    fn out_of_bounds_window_rejected() {
        let c = test_calib();
        let scene = SceneSpec::single_plane(300.0, MotionVector::ZERO, 3);
        let g = static_gradients(&scene, &c);
        let w = Window4 {
            center: [0, 4, 16, 16],
            half: [1, 1, 2, 2],
        };
        assert!(structure_tensor(&g, w).is_err());
    }
}
