//! Procedural plane textures.
//!
//! Textures are scalar albedo functions of the plane-local (s, t) coordinates
//! in mm. The band-limited noise texture is a wrapped grid of Gaussian white
//! noise blurred in place, then sampled with Catmull-Rom interpolation so its
//! spatial derivatives are continuous — essential for clean light-field
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Texel grid side of the wrapped noise tile.
const NOISE_GRID: usize = 512;

#[derive(Debug, Clone)]
pub enum Texture {
    Constant { value: f64 },
    /// Squares of `size` mm alternating between lo and hi, aligned to s=t=0.
    Checker { size: f64, lo: f64, hi: f64 },
    /// Step along s at s=0, smoothed over `width` mm.
    Edge { width: f64, lo: f64, hi: f64 },
    /// Step along the direction `angle` radians from the s axis, crossing
    /// zero at signed distance `offset` mm, smoothed over `width` mm.
    OrientedEdge {
        angle: f64,
        offset: f64,
        width: f64,
        lo: f64,
        hi: f64,
    },
    Noise(NoiseTexture),
}

impl Texture {
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match self {
            Texture::Constant { value } => *value,
            Texture::Checker { size, lo, hi } => {
                let parity =
                    ((s / size).floor() as i64 + (t / size).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *lo
                } else {
                    *hi
                }
            }
            Texture::Edge { width, lo, hi } => smoothstep_edge(s, *width, *lo, *hi),
            Texture::OrientedEdge {
                angle,
                offset,
                width,
                lo,
                hi,
            } => {
                let d = s * angle.cos() + t * angle.sin() - offset;
                smoothstep_edge(d, *width, *lo, *hi)
            }
            Texture::Noise(n) => n.sample(s, t),
        }
    }
}

fn smoothstep_edge(d: f64, width: f64, lo: f64, hi: f64) -> f64 {
    let x = (d / width + 0.5).clamp(0.0, 1.0);
    let w = x * x * (3.0 - 2.0 * x);
    lo + (hi - lo) * w
}

/// Band-limited random texture: white noise on a wrapped texel grid, blurred
/// by a wrapped Gaussian, rescaled to a chosen mean and contrast.
#[derive(Debug, Clone)]
pub struct NoiseTexture {
    grid: Vec<f64>,
    /// mm per texel.
    pub scale: f64,
    pub seed: u64,
    pub blur: f64,
    pub contrast: f64,
}

impl NoiseTexture {
    pub fn new(seed: u64, scale: f64, blur: f64, contrast: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = NOISE_GRID;
        let mut grid = vec![0.0f64; n * n];
        // Box-Muller pairs fill the grid with unit normals.
        for i in 0..(n * n + 1) / 2 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let a = 2.0 * std::f64::consts::PI * u2;
            grid[2 * i] = r * a.cos();
            if 2 * i + 1 < n * n {
                grid[2 * i + 1] = r * a.sin();
            }
        }
        if blur > 0.0 {
            let kernel = crate::filter::gaussian_kernel(blur);
            grid = wrap_convolve_rows(&grid, n, &kernel);
            grid = wrap_convolve_cols(&grid, n, &kernel);
        }
        // rescale to mean 0.5, std = contrast, clamped into valid radiance
        let mean = grid.iter().sum::<f64>() / grid.len() as f64;
        let var =
            grid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / grid.len() as f64;
        let std = var.sqrt().max(1e-12);
        for v in grid.iter_mut() {
            *v = (0.5 + (*v - mean) / std * contrast).clamp(0.02, 0.98);
        }
        NoiseTexture {
            grid,
            scale,
            seed,
            blur,
            contrast,
        }
    }

    /// Catmull-Rom sample at (s, t) mm; the tile wraps every NOISE_GRID*scale.
    pub fn sample(&self, s: f64, t: f64) -> f64 {
        let n = NOISE_GRID as i64;
        let fu = s / self.scale;
        let fv = t / self.scale;
        let iu = fu.floor();
        let iv = fv.floor();
        let du = fu - iu;
        let dv = fv - iv;
        let wu = catmull_rom_weights(du);
        let wv = catmull_rom_weights(dv);
        let mut acc = 0.0;
        for (j, wvj) in wv.iter().enumerate() {
            let row = (iv as i64 + j as i64 - 1).rem_euclid(n) as usize;
            let mut line = 0.0;
            for (i, wui) in wu.iter().enumerate() {
                let col = (iu as i64 + i as i64 - 1).rem_euclid(n) as usize;
                line += wui * self.grid[row * NOISE_GRID + col];
            }
            acc += wvj * line;
        }
        acc
    }
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn wrap_convolve_rows(grid: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut out = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let c = (col as i64 + k as i64 - r as i64).rem_euclid(n as i64) as usize;
                acc += w * grid[row * n + c];
            }
            out[row * n + col] = acc;
        }
    }
    out
}

fn wrap_convolve_cols(grid: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut out = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let rr = (row as i64 + k as i64 - r as i64).rem_euclid(n as i64) as usize;
                acc += w * grid[rr * n + col];
            }
            out[row * n + col] = acc;
        }
    }
    out
}
