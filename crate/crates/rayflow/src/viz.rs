//! Flow-field rendering for quick visual inspection.
//!
//! Two 8-bit PNGs per field: the XY components on the usual optical-flow
//! color wheel (hue = direction, saturation = magnitude, white at zero) and
//! the Z component on a signed diverging map (blue = toward the camera array,
//! red = away, mid-gray at zero). Both are normalized by the maximum valid
//! magnitude, which is printed in a small annotation strip appended below the
//! flow area. Invalid entries render black. Full-ray fields are reduced to
//! the central camera's view first.

use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::flowfield::{FlowField, FlowLayout};

/// Height in pixels of the annotation strip under the flow area.
pub const LEGEND_H: u32 = 9;

/// Render the XY wheel image and the Z diverging image.
pub fn flow_images(flow: &FlowField) -> Result<(RgbImage, RgbImage)> {
    let central;
    let flow = match flow.layout {
        FlowLayout::CentralView(_) => flow,
        FlowLayout::FullRay(_) => {
            central = flow.central_slice();
            &central
        }
    };
    let FlowLayout::CentralView([nu, nv]) = flow.layout else {
        unreachable!()
    };
    if nu == 0 || nv == 0 {
        return Err(Error::invalid("cannot render an empty flow field"));
    }

    let mut max_xy = 0.0f64;
    let mut max_z = 0.0f64;
    for (v, ok) in flow.iter() {
        if ok {
            max_xy = max_xy.max(v.x.hypot(v.y));
            max_z = max_z.max(v.z.abs());
        }
    }
    let norm_xy = max_xy.max(1e-12);
    let norm_z = max_z.max(1e-12);

    let w = nu as u32;
    let h = nv as u32 + LEGEND_H;
    let mut img_xy = RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let mut img_z = RgbImage::from_pixel(w, h, image::Rgb([128, 128, 128]));
    for iu in 0..nu {
        for iv in 0..nv {
            let i = flow.index2(iu, iv);
            let (x, y) = (iu as u32, iv as u32);
            if !flow.is_valid(i) {
                img_xy.put_pixel(x, y, image::Rgb([0, 0, 0]));
                img_z.put_pixel(x, y, image::Rgb([0, 0, 0]));
                continue;
            }
            let v = flow.get(i);
            let hue = v.y.atan2(v.x).to_degrees().rem_euclid(360.0);
            let sat = (v.x.hypot(v.y) / norm_xy).clamp(0.0, 1.0);
            img_xy.put_pixel(x, y, image::Rgb(hsv_to_rgb(hue, sat, 1.0)));
            img_z.put_pixel(x, y, image::Rgb(diverging(v.z / norm_z)));
        }
    }
    let text_y = nv as u32 + 2;
    draw_text(&mut img_xy, 2, text_y, &format!("MAX {max_xy:.4} MM"), [0, 0, 0]);
    draw_text(&mut img_z, 2, text_y, &format!("MAXZ {max_z:.4} MM"), [0, 0, 0]);
    Ok((img_xy, img_z))
}

/// Write `<prefix>_xy.png` and `<prefix>_z.png`; returns both paths.
pub fn write_flow_images(flow: &FlowField, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let (img_xy, img_z) = flow_images(flow)?;
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    if name.is_empty() {
        name = "flow".into();
    }
    let parent = prefix.parent().unwrap_or_else(|| Path::new(""));
    let path_of = |suffix: &str| {
        let mut n = name.clone();
        n.push(suffix);
        parent.join(n)
    };
    let p_xy = path_of("_xy.png");
    let p_z = path_of("_z.png");
    img_xy.save(&p_xy).map_err(|e| Error::Image {
        path: p_xy.clone(),
        msg: e.to_string(),
    })?;
    img_z.save(&p_z).map_err(|e| Error::Image {
        path: p_z.clone(),
        msg: e.to_string(),
    })?;
    Ok((p_xy, p_z))
}

/// h in degrees, s and v in [0, 1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to8(r + m), to8(g + m), to8(b + m)]
}

/// t in [-1, 1]: blue below zero, mid-gray at zero, red above.
fn diverging(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let a = t.abs();
    let mid = 128.0;
    if t >= 0.0 {
        [to8f(mid + a * 127.0), to8f(mid * (1.0 - a)), to8f(mid * (1.0 - a))]
    } else {
        [to8f(mid * (1.0 - a)), to8f(mid * (1.0 - a)), to8f(mid + a * 127.0)]
    }
}

fn to8(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

fn to8f(x: f64) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

/// 3x5 glyphs, one bit per pixel, top row first.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: [u8; 3]) {
    let mut x = x0;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3u32 {
                if row >> (2 - dx) & 1 == 1 {
                    let (px, py) = (x + dx, y0 + dy as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, image::Rgb(color));
                    }
                }
            }
        }
        x += 4;
    }
}
