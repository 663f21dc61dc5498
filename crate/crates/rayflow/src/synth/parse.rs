//! Text scene descriptions.
//!
//! A scene file is line based: `[section]` headers followed by `key = value`
//! lines. Sections: optional `[camera]` (same keys as lf.meta), optional
//! `[scene]` (seed), and one `[plane]` per plane. Unknown keys warn, missing
//! required keys error, matching the lf.meta conventions.
//!
//! ```text
//! [scene]
//! seed = 7
//!
//! [plane]
//! z_mm = 300
//! texture = noise
//! motion_mm = 0.4 0.2 0.3
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Calibration, MotionVector};

use super::texture::{NoiseTexture, Texture};
use super::{Plane, Rotation, SceneSpec};

pub fn load_scene(path: &Path) -> Result<(SceneSpec, Option<Calibration>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Parse {
            path: path.into(),
            msg,
        },
        other => other,
    })
}

pub fn parse_scene(text: &str) -> Result<(SceneSpec, Option<Calibration>)> {
    let mut sections: Vec<(String, Vec<(String, String, usize)>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            sections.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(lineno, "expected `key = value` or `[section]`"));
        };
        let Some(section) = sections.last_mut() else {
            return Err(parse_err(lineno, "key before any [section] header"));
        };
        section
            .1
            .push((key.trim().to_string(), value.trim().to_string(), lineno));
    }

    let mut calib: Option<Calibration> = None;
    let mut seed = 0u64;
    let mut planes = Vec::new();
    for (name, entries) in &sections {
        match name.as_str() {
            "camera" => calib = Some(parse_camera(entries)?),
            "scene" => {
                for (key, value, lineno) in entries {
                    match key.as_str() {
                        "seed" => {
                            seed = value
                                .parse()
                                .map_err(|_| parse_err(*lineno, "bad seed value"))?
                        }
                        other => eprintln!("warning: unknown scene key `{other}` ignored"),
                    }
                }
            }
            "plane" => planes.push(entries),
            other => eprintln!("warning: unknown section `[{other}]` ignored"),
        }
    }
    if planes.is_empty() {
        return Err(Error::invalid("scene file defines no [plane] section"));
    }
    let planes = planes
        .iter()
        .enumerate()
        .map(|(i, entries)| parse_plane(entries, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((SceneSpec::new(planes, seed)?, calib))
}

fn parse_err(lineno: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: "<scene>".into(),
        msg: format!("line {}: {msg}", lineno + 1),
    }
}

pub(crate) fn parse_camera(entries: &[(String, String, usize)]) -> Result<Calibration> {
    let mut c = super::default_calibration();
    for (key, value, lineno) in entries {
        let bad = |what: &str| parse_err(*lineno, format!("bad value for {what}"));
        match key.as_str() {
            "gamma_mm" => c.gamma = value.parse().map_err(|_| bad(key))?,
            "cam_spacing_x_mm" => c.cam_spacing_x = value.parse().map_err(|_| bad(key))?,
            "cam_spacing_y_mm" => c.cam_spacing_y = value.parse().map_err(|_| bad(key))?,
            "pixel_scale_u_mm" => c.pixel_scale_u = value.parse().map_err(|_| bad(key))?,
            "pixel_scale_v_mm" => c.pixel_scale_v = value.parse().map_err(|_| bad(key))?,
            "n_x" => c.n_x = value.parse().map_err(|_| bad(key))?,
            "n_y" => c.n_y = value.parse().map_err(|_| bad(key))?,
            "n_u" => c.n_u = value.parse().map_err(|_| bad(key))?,
            "n_v" => c.n_v = value.parse().map_err(|_| bad(key))?,
            other => eprintln!("warning: unknown camera key `{other}` ignored"),
        }
    }
    c.validate()?;
    Ok(c)
}

fn parse_plane(entries: &[(String, String, usize)], default_seed: u64) -> Result<Plane> {
    let mut z: Option<f64> = None;
    let mut texture_kind: Option<String> = None;
    let mut value = 0.5;
    let mut size = 4.0;
    let mut width = 2.0;
    let mut lo = f64::NAN;
    let mut hi = f64::NAN;
    let mut edge_angle = 0.0f64;
    let mut edge_offset = 0.0f64;
    let mut tex_seed = default_seed;
    let mut tex_scale = 1.0;
    let mut tex_blur = 2.0;
    let mut tex_contrast = 0.15;
    let mut albedo = 1.0;
    let mut motion = MotionVector::ZERO;
    let mut rot_axis: Option<[f64; 3]> = None;
    let mut rot_angle = 0.0f64;
    let mut rot_pivot: Option<[f64; 3]> = None;
    let mut x_range = (f64::NEG_INFINITY, f64::INFINITY);
    let mut y_range = (f64::NEG_INFINITY, f64::INFINITY);

    for (key, val, lineno) in entries {
        let bad = |what: &str| parse_err(*lineno, format!("bad value for {what}"));
        match key.as_str() {
            "z_mm" => z = Some(val.parse().map_err(|_| bad(key))?),
            "texture" => texture_kind = Some(val.to_string()),
            "value" => value = val.parse().map_err(|_| bad(key))?,
            "size_mm" => size = val.parse().map_err(|_| bad(key))?,
            "width_mm" => width = val.parse().map_err(|_| bad(key))?,
            "lo" => lo = val.parse().map_err(|_| bad(key))?,
            "hi" => hi = val.parse().map_err(|_| bad(key))?,
            "edge_angle_deg" => {
                edge_angle = val.parse::<f64>().map_err(|_| bad(key))?.to_radians()
            }
            "edge_offset_mm" => edge_offset = val.parse().map_err(|_| bad(key))?,
            "texture_seed" => tex_seed = val.parse().map_err(|_| bad(key))?,
            "texture_scale_mm" => tex_scale = val.parse().map_err(|_| bad(key))?,
            "texture_blur" => tex_blur = val.parse().map_err(|_| bad(key))?,
            "texture_contrast" => tex_contrast = val.parse().map_err(|_| bad(key))?,
            "albedo" => albedo = val.parse().map_err(|_| bad(key))?,
            "motion_mm" => {
                let t = parse_triple(val).ok_or_else(|| bad(key))?;
                motion = MotionVector::new(t[0], t[1], t[2]);
            }
            "rot_axis" => rot_axis = Some(parse_triple(val).ok_or_else(|| bad(key))?),
            "rot_angle_deg" => {
                rot_angle = val.parse::<f64>().map_err(|_| bad(key))?.to_radians()
            }
            "rot_pivot_mm" => rot_pivot = Some(parse_triple(val).ok_or_else(|| bad(key))?),
            "x_range_mm" => x_range = parse_range(val).ok_or_else(|| bad(key))?,
            "y_range_mm" => y_range = parse_range(val).ok_or_else(|| bad(key))?,
            other => eprintln!("warning: unknown plane key `{other}` ignored"),
        }
    }

    let z = z.ok_or_else(|| Error::invalid("plane is missing z_mm"))?;
    let kind = texture_kind.ok_or_else(|| Error::invalid("plane is missing texture"))?;
    let texture = match kind.as_str() {
        "constant" => Texture::Constant { value },
        "checker" => Texture::Checker {
            size,
            lo: if lo.is_nan() { 0.2 } else { lo },
            hi: if hi.is_nan() { 0.8 } else { hi },
        },
        "edge" if edge_angle == 0.0 && edge_offset == 0.0 => Texture::Edge {
            width,
            lo: if lo.is_nan() { 0.25 } else { lo },
            hi: if hi.is_nan() { 0.75 } else { hi },
        },
        "edge" => Texture::OrientedEdge {
            angle: edge_angle,
            offset: edge_offset,
            width,
            lo: if lo.is_nan() { 0.25 } else { lo },
            hi: if hi.is_nan() { 0.75 } else { hi },
        },
        "noise" => Texture::Noise(NoiseTexture::new(tex_seed, tex_scale, tex_blur, tex_contrast)),
        other => return Err(Error::invalid(format!("unknown texture kind `{other}`"))),
    };
    let rotation = match (rot_axis, rot_angle) {
        (None, a) if a == 0.0 => None,
        (None, _) => {
            return Err(Error::invalid("rot_angle_deg given without rot_axis"));
        }
        (Some(axis), angle) => Some(Rotation {
            axis,
            angle,
            pivot: rot_pivot.unwrap_or([0.0, 0.0, z]),
        }),
    };
    Ok(Plane {
        z,
        texture,
        albedo,
        motion,
        rotation,
        x_range,
        y_range,
    })
}

fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = s
        .split_whitespace()
        .map(parse_inf)
        .collect::<Option<Vec<_>>>()?;
    (parts.len() == 3).then(|| [parts[0], parts[1], parts[2]])
}

fn parse_range(s: &str) -> Option<(f64, f64)> {
    let parts: Vec<f64> = s
        .split_whitespace()
        .map(parse_inf)
        .collect::<Option<Vec<_>>>()?;
    (parts.len() == 2 && parts[0] <= parts[1]).then(|| (parts[0], parts[1]))
}

fn parse_inf(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        other => other.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = "\
# two-plane test scene
[scene]
seed = 9

[camera]
n_u = 48
n_v = 48

[plane]
z_mm = 250
texture = noise
motion_mm = 0.5 0 0
x_range_mm = -inf 0

[plane]
z_mm = 350
texture = checker
size_mm = 3
motion_mm = -0.5 0 0
";

    #[test]
    fn parses_sections_and_defaults() {
        let (scene, calib) = parse_scene(SCENE).unwrap();
        assert_eq!(scene.planes.len(), 2);
        assert_eq!(scene.seed, 9);
        let calib = calib.unwrap();
        assert_eq!(calib.n_u, 48);
        assert_eq!(calib.n_x, 9); // default kept
        assert_eq!(scene.planes[0].z, 250.0);
        assert_eq!(scene.planes[0].motion.x, 0.5);
        assert_eq!(scene.planes[0].x_range, (f64::NEG_INFINITY, 0.0));
        assert!(matches!(scene.planes[1].texture, Texture::Checker { .. }));
    }

    #[test]
    fn missing_required_keys_error() {
        assert!(parse_scene("[plane]\ntexture = noise\n").is_err());
        assert!(parse_scene("[plane]\nz_mm = 300\n").is_err());
        assert!(parse_scene("").is_err());
    }

    #[test]
    fn malformed_lines_error_with_line_number() {
        let err = parse_scene("[plane]\nz_mm 300\n").unwrap_err();
        match err {
            Error::Parse { msg, .. } => assert!(msg.contains("line 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rotation_requires_axis() {
        let text = "[plane]\nz_mm = 300\ntexture = constant\nrot_angle_deg = 5\n";
        assert!(parse_scene(text).is_err());
        let text =
            "[plane]\nz_mm = 300\ntexture = constant\nrot_axis = 0 1 0\nrot_angle_deg = 5\n";
        let (scene, _) = parse_scene(text).unwrap();
        let rot = scene.planes[0].rotation.as_ref().unwrap();
        assert!((rot.angle - 5.0f64.to_radians()).abs() < 1e-12);
        assert_eq!(rot.pivot, [0.0, 0.0, 300.0]);
    }

    #[test]
    fn round_trip_through_file(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.spec");
        std::fs::write(&path, SCENE).unwrap();
        let (scene, _) = load_scene(&path).unwrap();
        assert_eq!(scene.planes.len(), 2);
    }
}
