//! Light field container and the on-disk directory format.
//!
//! A light field on disk is a directory of 16-bit grayscale view images named
//! `view_{ix:02}_{iy:02}.png` (PGM accepted on read) plus a metadata file
//! `lf.meta` with `key = value` lines. Radiance is normalized to [0, 1] on
//! load. RGB inputs are collapsed to luminance with Rec. 601 weights.

use std::fmt::Write as _;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array4;

use crate::error::{Error, Result};
use crate::geometry::Calibration;

pub const META_FILE: &str = "lf.meta";

const META_KEYS: [&str; 9] = [
    "gamma_mm",
    "cam_spacing_x_mm",
    "cam_spacing_y_mm",
    "pixel_scale_u_mm",
    "pixel_scale_v_mm",
    "n_x",
    "n_y",
    "n_u",
    "n_v",
];

/// Calibrated 4D radiance grid at one time instant, indexed (ix, iy, iu, iv).
#[derive(Debug, Clone)]
pub struct LightField {
    pub calib: Calibration,
    pub data: Array4<f64>,
    pub label: String,
}

impl LightField {
    pub fn new(calib: Calibration, data: Array4<f64>, label: impl Into<String>) -> Result<Self> {
        calib.validate()?;
        if data.dim() != (calib.n_x, calib.n_y, calib.n_u, calib.n_v) {
            return Err(Error::DimensionMismatch(format!(
                "data shape {:?} does not match calibration {:?}",
                data.dim(),
                calib.dims()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("light field contains non-finite radiance"));
        }
        Ok(LightField {
            calib,
            data,
            label: label.into(),
        })
    }

    pub fn constant(calib: Calibration, value: f64, label: impl Into<String>) -> Result<Self> {
        let shape = (calib.n_x, calib.n_y, calib.n_u, calib.n_v);
        LightField::new(calib, Array4::from_elem(shape, value), label)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.calib.dims()
    }

    pub fn same_grid(&self, other: &LightField) -> bool {
        self.calib == other.calib
    }

    /// Bilinear sample at fractional camera indices (fx, fy) and integer pixel
    /// (iu, iv). Returns None when the sample window leaves the camera grid.
    pub fn sample_camera(&self, fx: f64, fy: f64, iu: usize, iv: usize) -> Option<f64> {
        let nx = self.calib.n_x;
        let ny = self.calib.n_y;
        if !(0.0..=(nx - 1) as f64).contains(&fx) || !(0.0..=(ny - 1) as f64).contains(&fy) {
            return None;
        }
        let x0 = (fx.floor() as usize).min(nx - 1);
        let y0 = (fy.floor() as usize).min(ny - 1);
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let d = &self.data;
        let v00 = d[[x0, y0, iu, iv]];
        let v10 = d[[x1, y0, iu, iv]];
        let v01 = d[[x0, y1, iu, iv]];
        let v11 = d[[x1, y1, iu, iv]];
        Some(v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty)
    }

    /// Bilinear sample at fractional pixel indices within one view; indices
    /// outside the view return None.
    pub fn sample_pixel(&self, ix: usize, iy: usize, fu: f64, fv: f64) -> Option<f64> {
        let nu = self.calib.n_u;
        let nv = self.calib.n_v;
        if !(0.0..=(nu - 1) as f64).contains(&fu) || !(0.0..=(nv - 1) as f64).contains(&fv) {
            return None;
        }
        let u0 = (fu.floor() as usize).min(nu - 1);
        let v0 = (fv.floor() as usize).min(nv - 1);
        let u1 = (u0 + 1).min(nu - 1);
        let v1 = (v0 + 1).min(nv - 1);
        let tu = fu - u0 as f64;
        let tv = fv - v0 as f64;
        let d = &self.data;
        let v00 = d[[ix, iy, u0, v0]];
        let v10 = d[[ix, iy, u1, v0]];
        let v01 = d[[ix, iy, u0, v1]];
        let v11 = d[[ix, iy, u1, v1]];
        Some(v00 * (1.0 - tu) * (1.0 - tv) + v10 * tu * (1.0 - tv) + v01 * (1.0 - tu) * tv + v11 * tu * tv)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let c = &self.calib;
        let mut meta = String::new();
        let _ = writeln!(meta, "gamma_mm = {}", c.gamma);
        let _ = writeln!(meta, "cam_spacing_x_mm = {}", c.cam_spacing_x);
        let _ = writeln!(meta, "cam_spacing_y_mm = {}", c.cam_spacing_y);
        let _ = writeln!(meta, "pixel_scale_u_mm = {}", c.pixel_scale_u);
        let _ = writeln!(meta, "pixel_scale_v_mm = {}", c.pixel_scale_v);
        let _ = writeln!(meta, "n_x = {}", c.n_x);
        let _ = writeln!(meta, "n_y = {}", c.n_y);
        let _ = writeln!(meta, "n_u = {}", c.n_u);
        let _ = writeln!(meta, "n_v = {}", c.n_v);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

        for ix in 0..c.n_x {
            for iy in 0..c.n_y {
                let mut img: ImageBuffer<Luma<u16>, Vec<u16>> =
                    ImageBuffer::new(c.n_u as u32, c.n_v as u32);
                for iu in 0..c.n_u {
                    for iv in 0..c.n_v {
                        let value = self.data[[ix, iy, iu, iv]].clamp(0.0, 1.0);
                        img.put_pixel(iu as u32, iv as u32, Luma([(value * 65535.0).round() as u16]));
                    }
                }
                let path = dir.join(format!("view_{ix:02}_{iy:02}.png"));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
            }
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let calib = read_meta(&dir.join(META_FILE))?;
        let mut data = Array4::zeros((calib.n_x, calib.n_y, calib.n_u, calib.n_v));
        for ix in 0..calib.n_x {
            for iy in 0..calib.n_y {
                let png = dir.join(format!("view_{ix:02}_{iy:02}.png"));
                let pgm = dir.join(format!("view_{ix:02}_{iy:02}.pgm"));
                let path = if png.exists() { png } else { pgm };
                let img = image::open(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                if (img.width(), img.height()) != (calib.n_u as u32, calib.n_v as u32) {
                    return Err(Error::DimensionMismatch(format!(
                        "{}: view is {}x{}, expected {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        calib.n_u,
                        calib.n_v
                    )));
                }
                load_view(&img, &mut data, ix, iy);
            }
        }
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        LightField::new(calib, data, label)
    }
}

fn load_view(img: &DynamicImage, data: &mut Array4<f64>, ix: usize, iy: usize) {
    match img {
        DynamicImage::ImageLuma16(buf) => {
            for (iu, iv, p) in buf.enumerate_pixels() {
                data[[ix, iy, iu as usize, iv as usize]] = p.0[0] as f64 / 65535.0;
            }
        }
        DynamicImage::ImageLuma8(buf) => {
            for (iu, iv, p) in buf.enumerate_pixels() {
                data[[ix, iy, iu as usize, iv as usize]] = p.0[0] as f64 / 255.0;
            }
        }
        other => {
            // Rec. 601 luminance for color inputs.
            let buf = other.to_rgb32f();
            for (iu, iv, p) in buf.enumerate_pixels() {
                let [r, g, b] = p.0;
                let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                data[[ix, iy, iu as usize, iv as usize]] = y.clamp(0.0, 1.0);
            }
        }
    }
}

fn read_meta(path: &Path) -> Result<Calibration> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values: [Option<f64>; 9] = [None; 9];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.into(),
                msg: format!("line {}: expected `key = value`", lineno + 1),
            });
        };
        let key = key.trim();
        let value = value.trim();
        match META_KEYS.iter().position(|k| *k == key) {
            Some(pos) => {
                let parsed: f64 = value.parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    msg: format!("line {}: bad value for {key}: {value}", lineno + 1),
                })?;
                values[pos] = Some(parsed);
            }
            None => eprintln!("warning: {}: unknown key `{key}` ignored", path.display()),
        }
    }
    for (pos, key) in META_KEYS.iter().enumerate() {
        if values[pos].is_none() {
            return Err(Error::MissingKey {
                key: key.to_string(),
                path: path.into(),
            });
        }
    }
    let calib = Calibration {
        gamma: values[0].unwrap(),
        cam_spacing_x: values[1].unwrap(),
        cam_spacing_y: values[2].unwrap(),
        pixel_scale_u: values[3].unwrap(),
        pixel_scale_v: values[4].unwrap(),
        n_x: values[5].unwrap() as usize,
        n_y: values[6].unwrap() as usize,
        n_u: values[7].unwrap() as usize,
        n_v: values[8].unwrap() as usize,
    };
    calib.validate()?;
    Ok(calib)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_calib() -> Calibration {
        Calibration {
            gamma: 100.0,
            cam_spacing_x: 0.45,
            cam_spacing_y: 0.45,
            pixel_scale_u: 0.25,
            pixel_scale_v: 0.25,
            n_x: 3,
            n_y: 3,
            n_u: 8,
            n_v: 6,
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let calib = small_calib();
        let data = Array4::zeros((3, 3, 8, 7));
        assert!(LightField::new(calib, data, "t").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let calib = small_calib();
        let mut data = Array4::zeros((3, 3, 8, 6));
        for (i, value) in data.iter_mut().enumerate() {
            *value = (i % 97) as f64 / 97.0;
        }
        let lf = LightField::new(calib, data, "t0").unwrap();
        let dir = tempfile::tempdir().unwrap();
        lf.save_dir(dir.path()).unwrap();
        let back = LightField::load_dir(dir.path()).unwrap();
        assert_eq!(back.calib, lf.calib);
        // 16-bit quantization bounds the round-trip error.
        for (a, b) in lf.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn missing_meta_key_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(META_FILE), "gamma_mm = 100\nn_x = 3\n").unwrap();
        let err = LightField::load_dir(dir.path()).unwrap_err();
        match err {
            Error::MissingKey { key, .. } => assert_eq!(key, "cam_spacing_x_mm"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bilinear_sampling_at_grid_points_is_exact() {
        let calib = small_calib();
        let mut data = Array4::zeros((3, 3, 8, 6));
        data[[1, 2, 4, 3]] = 0.75;
        let lf = LightField::new(calib, data, "t").unwrap();
        assert_eq!(lf.sample_camera(1.0, 2.0, 4, 3), Some(0.75));
        assert_eq!(lf.sample_camera(-0.01, 0.0, 0, 0), None);
        assert_eq!(lf.sample_pixel(1, 2, 4.0, 3.0), Some(0.75));
        assert_eq!(lf.sample_pixel(1, 2, 7.5, 3.0), None);
    }
}
