//! Separable Gaussian filtering of 4D grids.
//!
//! Used to band-limit light fields before gradient computation and inside the
//! pyramid. Boundaries are handled by symmetric reflection (index -1 maps back
//! to 0), which preserves constant fields exactly.

use ndarray::{Array4, Axis};

use crate::error::Result;
use crate::lightfield::LightField;

/// Sampled Gaussian kernel with unit sum, truncated at 3 sigma.
/// `sigma = 0` yields the identity kernel `[1.0]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        let t = i as f64 / sigma;
        kernel.push((-0.5 * t * t).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}

/// Reflect an out-of-range index into [0, n): ... 2 1 0 | 0 1 2 ... n-1 | n-1 ...
fn reflect(i: i64, n: i64) -> i64 {
    debug_assert!(n > 0);
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i
}

/// Convolve one axis of a 4D grid with `kernel`, reflective boundary.
pub fn convolve_axis(data: &mut Array4<f64>, axis: usize, kernel: &[f64]) {
    if kernel.len() == 1 {
        // identity up to scale
        if (kernel[0] - 1.0).abs() > 0.0 {
            data.mapv_inplace(|v| v * kernel[0]);
        }
        return;
    }
    let n = data.shape()[axis] as i64;
    let radius = (kernel.len() / 2) as i64;
    let mut scratch = vec![0.0f64; n as usize];
    for mut lane in data.lanes_mut(Axis(axis)) {
        for (i, s) in scratch.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = reflect(i as i64 + k as i64 - radius, n);
                acc += w * lane[j as usize];
            }
            *s = acc;
        }
        for (value, s) in lane.iter_mut().zip(&scratch) {
            *value = *s;
        }
    }
}

/// Separable Gaussian over all four axes; a zero sigma disables that axis.
pub fn gaussian_filter4(data: &Array4<f64>, sigma: [f64; 4]) -> Array4<f64> {
    let mut out = data.clone();
    for (axis, s) in sigma.iter().enumerate() {
        if *s > 0.0 {
            let kernel = gaussian_kernel(*s);
            convolve_axis(&mut out, axis, &kernel);
        }
    }
    out
}

/// Gaussian pre-filter of a light field; sigma per axis in index units
/// (ix, iy, iu, iv order).
pub fn prefilter(lf: &LightField, sigma: [f64; 4]) -> Result<LightField> {
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(crate::error::Error::invalid("sigma must be finite and >= 0"));
    }
    let data = gaussian_filter4(&lf.data, sigma);
    LightField::new(lf.calib.clone(), data, lf.label.clone())
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
    fn constant_field_is_unchanged() {
        let lf = LightField::constant(calib(16, 16), 0.37, "t").unwrap();
        let out = prefilter(&lf, [0.8, 0.8, 1.5, 1.5]).unwrap();
        for v in out.data.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_is_bit_identical() {
        let mut lf = LightField::constant(calib(16, 16), 0.0, "t").unwrap();
        for (i, v) in lf.data.iter_mut().enumerate() {
            *v = ((i * 31 + 7) % 101) as f64 / 101.0;
        }
        let out = prefilter(&lf, [0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.data, lf.data);
    }

    /// Direct dense 4D convolution over the separable product kernel, the
    /// oracle for the separable implementation.
    fn dense_conv4(data: &Array4<f64>, sigma: [f64; 4]) -> Array4<f64> {
        let kernels: Vec<Vec<f64>> = sigma.iter().map(|s| gaussian_kernel(*s)).collect();
        let radii: Vec<i64> = kernels.iter().map(|k| (k.len() / 2) as i64).collect();
        let (n0, n1, n2, n3) = data.dim();
        let dims = [n0 as i64, n1 as i64, n2 as i64, n3 as i64];
        let mut out = Array4::zeros(data.dim());
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    for i3 in 0..n3 {
                        let mut acc = 0.0;
                        for (k0, w0) in kernels[0].iter().enumerate() {
                            let j0 = reflect(i0 as i64 + k0 as i64 - radii[0], dims[0]);
                            for (k1, w1) in kernels[1].iter().enumerate() {
                                let j1 = reflect(i1 as i64 + k1 as i64 - radii[1], dims[1]);
                                for (k2, w2) in kernels[2].iter().enumerate() {
                                    let j2 = reflect(i2 as i64 + k2 as i64 - radii[2], dims[2]);
                                    for (k3, w3) in kernels[3].iter().enumerate() {
                                        let j3 =
                                            reflect(i3 as i64 + k3 as i64 - radii[3], dims[3]);
                                        acc += w0
                                            * w1
                                            * w2
                                            * w3
                                            * data[[j0 as usize, j1 as usize, j2 as usize,
                                                j3 as usize]];
                                    }
                                }
                            }
                        }
                        out[[i0, i1, i2, i3]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn impulse_matches_dense_convolution_and_sums_to_one() {
        let c = calib(15, 15);
        let mut lf = LightField::constant(c, 0.0, "t").unwrap();
        lf.data[[1, 1, 7, 7]] = 1.0;
        let sigma = [0.0, 0.0, 1.0, 1.0];
        let out = prefilter(&lf, sigma).unwrap();
        let oracle = dense_conv4(&lf.data, sigma);
        for (a, b) in out.data.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = out.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "kernel mass {sum}");
        // the response is the sampled 2D Gaussian around the impulse
        let peak = out.data[[1, 1, 7, 7]];
        let side = out.data[[1, 1, 8, 7]];
        assert!(peak > side && side > 0.0);
        let expected_ratio = (-0.5f64).exp();
        assert!((side / peak - expected_ratio).abs() < 1e-9);
    }

    #[test]
    fn separable_matches_dense_on_random_field() {
        let c = calib(9, 8);
        let mut lf = LightField::constant(c, 0.0, "t").unwrap();
        for (i, v) in lf.data.iter_mut().enumerate() {
            *v = ((i * 131 + 17) % 251) as f64 / 251.0;
        }
        let sigma = [0.6, 0.0, 1.2, 0.9];
        let out = prefilter(&lf, sigma).unwrap();
        let oracle = dense_conv4(&lf.data, sigma);
        for (a, b) in out.data.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
