//! Scripted parameter studies: render a fresh synthetic pair per cell of a
//! cartesian sweep, run a flow method on it, and tabulate the metrics.
//!
//! A sweep file uses the same line-based `[section]` / `key = value` format
//! as scene files:
//!
//! ```text
//! [sweep]
//! seed = 7
//! method = lk
//! z_mm = 300
//! motion_mm = 0.4 0 0
//!
//! [camera]          # optional, same keys as lf.meta
//! n_u = 48
//! n_v = 48
//!
//! [axis]
//! name = aperture_mm
//! values = 1.8 3.6 7.2
//!
//! [axis]
//! name = motion_mag_mm
//! values = 0.5 1 2 4
//! ```
//!
//! Cells enumerate the declared axes in row-major order (last axis fastest).
//! Each cell derives its own scene seed from the sweep seed and cell index,
//! so results are deterministic regardless of worker count; the environment
//! variable `RAYFLOW_THREADS` caps the worker pool.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Calibration, MotionVector};
use crate::global::{hs_pyramidal, GlobalParams};
use crate::local::{lk_pyramidal, LKParams};
use crate::metrics::{mae_rmse, Metrics};
use crate::sag::{estimate_disparity, sag_solve, SAGWeights};
use crate::synth::{
    add_noise, default_calibration, render_pair, NoiseModel, NoiseTexture, Plane, Rotation,
    SceneSpec, Texture,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lk,
    Hs,
    Sag,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "lk" => Ok(Method::Lk),
            "hs" => Ok(Method::Hs),
            "sag" => Ok(Method::Sag),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected lk, hs, or sag)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lk => "lk",
            Method::Hs => "hs",
            Method::Sag => "sag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    /// Motion magnitude in mm along the base motion's direction.
    MotionMag,
    /// Motion direction; keeps the base motion's magnitude.
    MotionDir,
    /// Full camera-array width in mm: spacing = aperture / (n_x - 1).
    Aperture,
    /// Cameras per side (n_x = n_y); must be odd.
    AngularRes,
    /// Plane depth in mm.
    Depth,
    /// Read-noise sigma added to both rendered fields (radiance units).
    Noise,
    /// Plane rotation about the Y axis through the plane center, degrees.
    RotDeg,
    Method,
}

impl AxisKind {
    pub fn parse(s: &str) -> Result<AxisKind> {
        Ok(match s {
            "motion_mag_mm" => AxisKind::MotionMag,
            "motion_dir" => AxisKind::MotionDir,
            "aperture_mm" => AxisKind::Aperture,
            "angular_res" => AxisKind::AngularRes,
            "z_mm" => AxisKind::Depth,
            "noise" => AxisKind::Noise,
            "rot_deg" => AxisKind::RotDeg,
            "method" => AxisKind::Method,
            other => return Err(Error::invalid(format!("unknown axis `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AxisKind::MotionMag => "motion_mag_mm",
            AxisKind::MotionDir => "motion_dir",
            AxisKind::Aperture => "aperture_mm",
            AxisKind::AngularRes => "angular_res",
            AxisKind::Depth => "z_mm",
            AxisKind::Noise => "noise",
            AxisKind::RotDeg => "rot_deg",
            AxisKind::Method => "method",
        }
    }
}

#[derive(Debug, Clone)]
pub enum AxisValues {
    Numbers(Vec<f64>),
    Dirs(Vec<[f64; 3]>),
    Methods(Vec<Method>),
}

impl AxisValues {
    pub fn len(&self) -> usize {
        match self {
            AxisValues::Numbers(v) => v.len(),
            AxisValues::Dirs(v) => v.len(),
            AxisValues::Methods(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            AxisValues::Numbers(v) => format!("{}", v[i]),
            AxisValues::Dirs(v) => format!("{} {} {}", v[i][0], v[i][1], v[i][2]),
            AxisValues::Methods(v) => v[i].name().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Axis {
    pub kind: AxisKind,
    pub values: AxisValues,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub seed: u64,
    /// Base camera; axis overrides derive cell cameras from it.
    pub calib: Calibration,
    pub z: f64,
    pub motion: MotionVector,
    pub noise: f64,
    pub rot_deg: f64,
    pub method: Method,
    pub texture_scale: f64,
    pub texture_blur: f64,
    pub texture_contrast: f64,
    pub axes: Vec<Axis>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            seed: 1,
            calib: default_calibration(),
            z: 300.0,
            motion: MotionVector::new(0.4, 0.0, 0.0),
            noise: 0.0,
            rot_deg: 0.0,
            method: Method::Lk,
            texture_scale: 8.0,
            texture_blur: 2.0,
            texture_contrast: 0.15,
            axes: Vec::new(),
        }
    }
}

/// Everything needed to run one cell.
#[derive(Debug, Clone)]
pub struct CellConfig {
    pub index: usize,
    /// One label per axis, in axis order.
    pub labels: Vec<String>,
    pub calib: Calibration,
    pub scene: SceneSpec,
    pub z: f64,
    pub method: Method,
    pub noise: f64,
    pub seed: u64,
}

impl SweepSpec {
    pub fn n_cells(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn load(path: &Path) -> Result<SweepSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepSpec::parse(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                path: path.into(),
                msg,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<SweepSpec> {
        let mut spec = SweepSpec::default();
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

        for (name, entries) in &sections {
            match name.as_str() {
                "sweep" => spec.parse_sweep_section(entries)?,
                "camera" => spec.calib = crate::synth::parse_camera_section(entries)?,
                "axis" => spec.axes.push(parse_axis(entries)?),
                other => eprintln!("warning: unknown section `[{other}]` ignored"),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn parse_sweep_section(&mut self, entries: &[(String, String, usize)]) -> Result<()> {
        for (key, value, lineno) in entries {
            let bad = || parse_err(*lineno, format!("bad value for {key}"));
            match key.as_str() {
                "seed" => self.seed = value.parse().map_err(|_| bad())?,
                "z_mm" => self.z = value.parse().map_err(|_| bad())?,
                "motion_mm" => {
                    let t = parse_triple(value).ok_or_else(bad)?;
                    self.motion = MotionVector::new(t[0], t[1], t[2]);
                }
                "noise" => self.noise = value.parse().map_err(|_| bad())?,
                "rot_deg" => self.rot_deg = value.parse().map_err(|_| bad())?,
                "method" => self.method = Method::parse(value)?,
                "texture_scale_mm" => self.texture_scale = value.parse().map_err(|_| bad())?,
                "texture_blur" => self.texture_blur = value.parse().map_err(|_| bad())?,
                "texture_contrast" => self.texture_contrast = value.parse().map_err(|_| bad())?,
                other => eprintln!("warning: unknown sweep key `{other}` ignored"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z > 0.0) {
            return Err(Error::invalid("sweep depth must be positive"));
        }
        if self.noise < 0.0 {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if !(self.texture_scale > 0.0 && self.texture_blur >= 0.0) {
            return Err(Error::invalid("texture parameters out of range"));
        }
        for axis in &self.axes {
            if axis.values.is_empty() {
                return Err(Error::invalid(format!("axis {} has no values", axis.kind.name())));
            }
            match (&axis.kind, &axis.values) {
                (AxisKind::AngularRes, AxisValues::Numbers(v)) => {
                    for n in v {
                        if n.fract() != 0.0 || *n < 3.0 || (*n as usize) % 2 == 0 {
                            return Err(Error::invalid(
                                "angular_res values must be odd integers >= 3",
                            ));
                        }
                    }
                }
                (AxisKind::Aperture | AxisKind::Depth, AxisValues::Numbers(v)) => {
                    if v.iter().any(|x| *x <= 0.0) {
                        return Err(Error::invalid(format!(
                            "{} values must be positive",
                            axis.kind.name()
                        )));
                    }
                }
                (AxisKind::Noise, AxisValues::Numbers(v)) => {
                    if v.iter().any(|x| *x < 0.0) {
                        return Err(Error::invalid("noise values must be non-negative"));
                    }
                }
                (AxisKind::MotionDir, AxisValues::Dirs(v)) => {
                    if v.iter().any(|d| (d[0].powi(2) + d[1].powi(2) + d[2].powi(2)) == 0.0) {
                        return Err(Error::invalid("motion_dir values must be non-zero"));
                    }
                }
                _ => {}
            }
        }
        self.calib.validate()
    }

    /// Axis indices of a cell, last axis fastest.
    fn digits(&self, index: usize) -> Vec<usize> {
        let mut digits = vec![0usize; self.axes.len()];
        let mut rem = index;
        for (k, axis) in self.axes.iter().enumerate().rev() {
            let len = axis.values.len();
            digits[k] = rem % len;
            rem /= len;
        }
        digits
    }

    /// Labels of a cell without building its scene.
    pub fn labels(&self, index: usize) -> Vec<String> {
        self.digits(index)
            .iter()
            .zip(&self.axes)
            .map(|(d, axis)| axis.values.label(*d))
            .collect()
    }

    /// Resolve one cell: base config plus the axis overrides.
    pub fn cell(&self, index: usize) -> Result<CellConfig> {
        if index >= self.n_cells() {
            return Err(Error::invalid(format!("cell {index} out of range")));
        }
        let digits = self.digits(index);
        let mut calib = self.calib.clone();
        let mut z = self.z;
        let mut motion = self.motion;
        let mut noise = self.noise;
        let mut rot_deg = self.rot_deg;
        let mut method = self.method;

        // angular_res before aperture: aperture fixes the full array width
        let mut ordered: Vec<(usize, &Axis)> = digits.iter().copied().zip(&self.axes).collect();
        ordered.sort_by_key(|(_, axis)| match axis.kind {
            AxisKind::AngularRes => 0,
            _ => 1,
        });
        for (d, axis) in ordered {
            match (&axis.kind, &axis.values) {
                (AxisKind::MotionMag, AxisValues::Numbers(v)) => {
                    let mag = motion.norm();
                    if mag == 0.0 {
                        return Err(Error::invalid(
                            "motion_mag_mm axis needs a non-zero base motion direction",
                        ));
                    }
                    motion = motion.scaled(v[d] / mag);
                }
                (AxisKind::MotionDir, AxisValues::Dirs(v)) => {
                    let dir = v[d];
                    let n = (dir[0].powi(2) + dir[1].powi(2) + dir[2].powi(2)).sqrt();
                    motion = MotionVector::new(dir[0] / n, dir[1] / n, dir[2] / n)
                        .scaled(motion.norm());
                }
                (AxisKind::Aperture, AxisValues::Numbers(v)) => {
                    calib.cam_spacing_x = v[d] / (calib.n_x - 1) as f64;
                    calib.cam_spacing_y = v[d] / (calib.n_y - 1) as f64;
                }
                (AxisKind::AngularRes, AxisValues::Numbers(v)) => {
                    calib.n_x = v[d] as usize;
                    calib.n_y = v[d] as usize;
                }
                (AxisKind::Depth, AxisValues::Numbers(v)) => z = v[d],
                (AxisKind::Noise, AxisValues::Numbers(v)) => noise = v[d],
                (AxisKind::RotDeg, AxisValues::Numbers(v)) => rot_deg = v[d],
                (AxisKind::Method, AxisValues::Methods(v)) => method = v[d],
                (kind, _) => {
                    return Err(Error::invalid(format!(
                        "axis {} carries the wrong value type",
                        kind.name()
                    )));
                }
            }
        }

        let seed = self
            .seed
            .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut plane = Plane::infinite(
            z,
            Texture::Noise(NoiseTexture::new(
                seed,
                self.texture_scale,
                self.texture_blur,
                self.texture_contrast,
            )),
        )
        .with_motion(motion);
        if rot_deg != 0.0 {
            plane.rotation = Some(Rotation {
                axis: [0.0, 1.0, 0.0],
                angle: rot_deg.to_radians(),
                pivot: [0.0, 0.0, z],
            });
        }
        let scene = SceneSpec::new(vec![plane], seed)?;
        Ok(CellConfig {
            index,
            labels: self.labels(index),
            calib,
            scene,
            z,
            method,
            noise,
            seed,
        })
    }
}

fn parse_axis(entries: &[(String, String, usize)]) -> Result<Axis> {
    let mut kind: Option<AxisKind> = None;
    let mut raw: Option<(String, usize)> = None;
    for (key, value, lineno) in entries {
        match key.as_str() {
            "name" => kind = Some(AxisKind::parse(value)?),
            "values" => raw = Some((value.clone(), *lineno)),
            other => eprintln!("warning: unknown axis key `{other}` ignored"),
        }
    }
    let kind = kind.ok_or_else(|| Error::invalid("axis is missing `name`"))?;
    let (raw, lineno) = raw.ok_or_else(|| Error::invalid("axis is missing `values`"))?;
    let values = match kind {
        AxisKind::Method => AxisValues::Methods(
            raw.split_whitespace()
                .map(Method::parse)
                .collect::<Result<Vec<_>>>()?,
        ),
        AxisKind::MotionDir => AxisValues::Dirs(
            raw.split(';')
                .map(|t| {
                    parse_triple(t)
                        .ok_or_else(|| parse_err(lineno, "motion_dir wants `x y z; x y z; ...`"))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => AxisValues::Numbers(
            raw.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| parse_err(lineno, format!("bad number `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(Axis { kind, values })
}

fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse().ok())
        .collect::<Option<Vec<_>>>()?;
    (parts.len() == 3).then(|| [parts[0], parts[1], parts[2]])
}

fn parse_err(lineno: usize, msg: impl fmt::Display) -> Error {
    Error::Parse {
        path: "<sweep>".into(),
        msg: format!("line {}: {msg}", lineno + 1),
    }
}

/// Render the cell's pair, run its method, and score against the renderer's
/// ground truth on the central view.
pub fn run_cell(cfg: &CellConfig) -> Result<Metrics> {
    let (lf0, lf1, gt) = render_pair(&cfg.scene, &cfg.calib)?;
    let (lf0, lf1) = if cfg.noise != 0.0 {
        let nm = |seed| NoiseModel {
            photon_gain: 0.0,
            read_sigma: cfg.noise,
            seed,
        };
        (
            add_noise(&lf0, &nm(cfg.seed ^ 0xA5A5_A5A5))?,
            add_noise(&lf1, &nm(cfg.seed ^ 0x5A5A_5A5A))?,
        )
    } else {
        (lf0, lf1)
    };
    let est = match cfg.method {
        Method::Lk => {
            // Window spans the whole camera grid so cells with different
            // angular resolutions integrate the same aperture.
            let mut p = LKParams::default();
            p.half[0] = (cfg.calib.n_x - 1) / 2;
            p.half[1] = (cfg.calib.n_y - 1) / 2;
            lk_pyramidal(&lf0, &lf1, &p)?.central_slice()
        }
        Method::Hs => hs_pyramidal(&lf0, &lf1, &GlobalParams::default())?.0.central_slice(),
        Method::Sag => {
            let a0 = cfg.calib.gamma / cfg.z;
            let dmap = estimate_disparity(&lf0, (a0 / 1.5, a0 * 1.5), 21)?;
            let w = SAGWeights::defaults_for(&dmap);
            sag_solve(&lf0, &lf1, &dmap, &w, &GlobalParams::default())?.0
        }
    };
    mae_rmse(&est, &gt.flow)
}

#[derive(Debug, Clone)]
pub struct CellRow {
    pub index: usize,
    pub labels: Vec<String>,
    pub outcome: std::result::Result<Metrics, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResults {
    pub axis_names: Vec<String>,
    pub rows: Vec<CellRow>,
}

/// Run every cell on a worker pool (capped by `RAYFLOW_THREADS`); rows come
/// back in cell order regardless of completion order. Per-cell failures are
/// recorded in the row, not propagated.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResults> {
    spec.validate()?;
    let n = spec.n_cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Solver(format!("worker pool: {e}")))?;
    let rows: Vec<CellRow> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let outcome = spec
                    .cell(i)
                    .and_then(|cfg| run_cell(&cfg))
                    .map_err(|e| e.to_string());
                CellRow {
                    index: i,
                    labels: spec.labels(i),
                    outcome,
                }
            })
            .collect()
    });
    Ok(SweepResults {
        axis_names: spec.axes.iter().map(|a| a.kind.name().to_string()).collect(),
        rows,
    })
}

fn worker_count() -> usize {
    std::env::var("RAYFLOW_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

impl SweepResults {
    /// CSV with a `#` comment header carrying the timestamp; everything after
    /// it is deterministic for a given spec and seed.
    pub fn to_csv(&self) -> String {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut out = format!("# rayflow sweep, unix time {stamp}\n");
        out.push_str("cell");
        for name in &self.axis_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(
            ",mae_x_mm,mae_y_mm,mae_z_mm,rmse_x_mm,rmse_y_mm,rmse_z_mm,rel_err_pct,epe_mm,compared,status\n",
        );
        for row in &self.rows {
            out.push_str(&format!("{}", row.index));
            for label in &row.labels {
                out.push(',');
                out.push_str(label);
            }
            match &row.outcome {
                Ok(m) => {
                    for v in m.mae.iter().chain(m.rmse.iter()) {
                        out.push_str(&format!(",{v}"));
                    }
                    out.push_str(&format!(
                        ",{},{},{},ok",
                        m.mean_rel_err, m.endpoint_err, m.compared
                    ));
                }
                Err(e) => {
                    out.push_str(",nan,nan,nan,nan,nan,nan,nan,nan,0,");
                    out.push_str(&e.replace(',', ";"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for SweepResults {
    /// Human-readable table: one line per cell.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>5}", "cell")?;
        for name in &self.axis_names {
            write!(f, "  {name:>14}")?;
        }
        writeln!(
            f,
            "  {:>10}  {:>10}  {:>10}  {:>9}  {:>10}",
            "mae_x", "mae_y", "mae_z", "rel_%", "epe_mm"
        )?;
        for row in &self.rows {
            write!(f, "{:>5}", row.index)?;
            for label in &row.labels {
                write!(f, "  {label:>14}")?;
            }
            match &row.outcome {
                Ok(m) => writeln!(
                    f,
                    "  {:>10.6}  {:>10.6}  {:>10.6}  {:>9.3}  {:>10.6}",
                    m.mae[0], m.mae[1], m.mae[2], m.mean_rel_err, m.endpoint_err
                )?,
                Err(e) => writeln!(f, "  failed: {e}")?,
            }
        }
        Ok(())
    }
}
