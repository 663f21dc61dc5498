//! Motion vector fields and their binary on-disk container.
//!
//! A flow field is defined either on the full 4D ray grid or on the 2D
//! central view. Every entry carries a validity flag (invalid entries are
//! never silently zero) and an in-memory confidence that is not serialized.
//!
//! File layout (little-endian): magic `RFLW`, version u16, layout tag u8
//! (0 = full ray grid with 4 dims, 1 = central view with 2 dims), the u32
//! dims, then per entry three f32 components in mm and one validity byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::MotionVector;

pub const FLOW_MAGIC: [u8; 4] = *b"RFLW";
pub const FLOW_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowLayout {
    /// One motion vector per ray (ix, iy, iu, iv).
    FullRay([usize; 4]),
    /// One motion vector per central-view pixel (iu, iv).
    CentralView([usize; 2]),
}

impl FlowLayout {
    pub fn len(&self) -> usize {
        match self {
            FlowLayout::FullRay(d) => d.iter().product(),
            FlowLayout::CentralView(d) => d.iter().product(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct FlowField {
    pub layout: FlowLayout,
    vectors: Vec<MotionVector>,
    valid: Vec<bool>,
    confidence: Vec<f64>,
}

impl FlowField {
    pub fn new(layout: FlowLayout) -> Self {
        let n = layout.len();
        FlowField {
            layout,
            vectors: vec![MotionVector::ZERO; n],
            valid: vec![false; n],
            confidence: vec![0.0; n],
        }
    }

    pub fn full_ray(dims: [usize; 4]) -> Self {
        FlowField::new(FlowLayout::FullRay(dims))
    }

    pub fn central_view(dims: [usize; 2]) -> Self {
        FlowField::new(FlowLayout::CentralView(dims))
    }

    /// Constant valid field, mostly for tests and warping fixtures.
    pub fn constant(layout: FlowLayout, v: MotionVector) -> Self {
        let n = layout.len();
        FlowField {
            layout,
            vectors: vec![v; n],
            valid: vec![true; n],
            confidence: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn index4(&self, ix: usize, iy: usize, iu: usize, iv: usize) -> usize {
        match &self.layout {
            FlowLayout::FullRay([_, ny, nu, nv]) => ((ix * ny + iy) * nu + iu) * nv + iv,
            FlowLayout::CentralView(_) => panic!("index4 on central-view flow"),
        }
    }

    pub fn index2(&self, iu: usize, iv: usize) -> usize {
        match &self.layout {
            FlowLayout::CentralView([_, nv]) => iu * nv + iv,
            FlowLayout::FullRay(_) => panic!("index2 on full-ray flow"),
        }
    }

    pub fn get(&self, i: usize) -> MotionVector {
        self.vectors[i]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.confidence[i]
    }

    pub fn set(&mut self, i: usize, v: MotionVector, valid: bool, confidence: f64) {
        self.vectors[i] = v;
        self.valid[i] = valid;
        self.confidence[i] = confidence;
    }

    pub fn set_vector(&mut self, i: usize, v: MotionVector) {
        self.vectors[i] = v;
    }

    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = false;
        self.confidence[i] = 0.0;
    }

    pub fn iter(&self) -> impl Iterator<Item = (MotionVector, bool)> + '_ {
        self.vectors.iter().copied().zip(self.valid.iter().copied())
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Mean vector over valid entries, if any.
    pub fn mean_valid(&self) -> Option<MotionVector> {
        let mut acc = MotionVector::ZERO;
        let mut n = 0usize;
        for (v, ok) in self.iter() {
            if ok {
                acc = acc.add(&v);
                n += 1;
            }
        }
        (n > 0).then(|| acc.scaled(1.0 / n as f64))
    }

    /// Extract the central camera's view of a full-ray field.
    pub fn central_slice(&self) -> FlowField {
        let FlowLayout::FullRay([nx, ny, nu, nv]) = self.layout else {
            return self.clone();
        };
        let cx = (nx - 1) / 2;
        let cy = (ny - 1) / 2;
        let mut out = FlowField::central_view([nu, nv]);
        for iu in 0..nu {
            for iv in 0..nv {
                let src = self.index4(cx, cy, iu, iv);
                let dst = out.index2(iu, iv);
                out.set(dst, self.vectors[src], self.valid[src], self.confidence[src]);
            }
        }
        out
    }

    /// Resample the (u, v) axes to a new resolution. Motion values are metric
    /// and unchanged in magnitude; only the grid changes. Entries are blended
    /// from valid contributors; a resampled entry is valid when valid
    /// contributors dominate the interpolation weight.
    pub fn resample_uv(&self, new_nu: usize, new_nv: usize) -> FlowField {
        let (old_nu, old_nv) = match self.layout {
            FlowLayout::FullRay([_, _, nu, nv]) => (nu, nv),
            FlowLayout::CentralView([nu, nv]) => (nu, nv),
        };
        let su = old_nu as f64 / new_nu as f64;
        let sv = old_nv as f64 / new_nv as f64;
        let cu_old = (old_nu as f64 - 1.0) / 2.0;
        let cv_old = (old_nv as f64 - 1.0) / 2.0;
        let cu_new = (new_nu as f64 - 1.0) / 2.0;
        let cv_new = (new_nv as f64 - 1.0) / 2.0;

        let (layout, views): (FlowLayout, Vec<(usize, usize)>) = match self.layout {
            FlowLayout::FullRay([nx, ny, _, _]) => (
                FlowLayout::FullRay([nx, ny, new_nu, new_nv]),
                (0..nx).flat_map(|ix| (0..ny).map(move |iy| (ix, iy))).collect(),
            ),
            FlowLayout::CentralView(_) => {
                (FlowLayout::CentralView([new_nu, new_nv]), vec![(0, 0)])
            }
        };
        let mut out = FlowField::new(layout);

        for (ix, iy) in views {
            for ju in 0..new_nu {
                let fu = ((ju as f64 - cu_new) * su + cu_old).clamp(0.0, (old_nu - 1) as f64);
                for jv in 0..new_nv {
                    let fv = ((jv as f64 - cv_new) * sv + cv_old).clamp(0.0, (old_nv - 1) as f64);
                    let u0 = (fu.floor() as usize).min(old_nu - 1);
                    let v0 = (fv.floor() as usize).min(old_nv - 1);
                    let u1 = (u0 + 1).min(old_nu - 1);
                    let v1 = (v0 + 1).min(old_nv - 1);
                    let tu = fu - u0 as f64;
                    let tv = fv - v0 as f64;
                    let corners = [
                        (u0, v0, (1.0 - tu) * (1.0 - tv)),
                        (u1, v0, tu * (1.0 - tv)),
                        (u0, v1, (1.0 - tu) * tv),
                        (u1, v1, tu * tv),
                    ];
                    let mut acc = MotionVector::ZERO;
                    let mut conf = 0.0;
                    let mut w_valid = 0.0;
                    for (cu, cv, w) in corners {
                        let src = match self.layout {
                            FlowLayout::FullRay(_) => self.index4(ix, iy, cu, cv),
                            FlowLayout::CentralView(_) => self.index2(cu, cv),
                        };
                        if self.valid[src] && w > 0.0 {
                            acc = acc.add(&self.vectors[src].scaled(w));
                            conf += w * self.confidence[src];
                            w_valid += w;
                        }
                    }
                    let dst = match out.layout {
                        FlowLayout::FullRay(_) => out.index4(ix, iy, ju, jv),
                        FlowLayout::CentralView(_) => out.index2(ju, jv),
                    };
                    if w_valid > 0.5 {
                        out.set(dst, acc.scaled(1.0 / w_valid), true, conf / w_valid);
                    }
                }
            }
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.len() * 13);
        buf.extend_from_slice(&FLOW_MAGIC);
        buf.extend_from_slice(&FLOW_VERSION.to_le_bytes());
        match &self.layout {
            FlowLayout::FullRay(d) => {
                buf.push(0);
                for n in d {
                    buf.extend_from_slice(&(*n as u32).to_le_bytes());
                }
            }
            FlowLayout::CentralView(d) => {
                buf.push(1);
                for n in d {
                    buf.extend_from_slice(&(*n as u32).to_le_bytes());
                }
            }
        }
        for (v, ok) in self.iter() {
            buf.extend_from_slice(&(v.x as f32).to_le_bytes());
            buf.extend_from_slice(&(v.y as f32).to_le_bytes());
            buf.extend_from_slice(&(v.z as f32).to_le_bytes());
            buf.push(u8::from(ok));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<FlowField> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::FlowFormat("truncated flow file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != FLOW_MAGIC {
            return Err(Error::FlowFormat("bad magic, expected RFLW".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != FLOW_VERSION {
            return Err(Error::FlowFormat(format!(
                "unsupported version {version}, expected {FLOW_VERSION}"
            )));
        }
        let tag = take(&mut pos, 1)?[0];
        let layout = match tag {
            0 => {
                let mut d = [0usize; 4];
                for slot in &mut d {
                    *slot =
                        u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                }
                FlowLayout::FullRay(d)
            }
            1 => {
                let mut d = [0usize; 2];
                for slot in &mut d {
                    *slot =
                        u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                }
                FlowLayout::CentralView(d)
            }
            other => return Err(Error::FlowFormat(format!("unknown layout tag {other}"))),
        };
        let n = layout.len();
        if bytes.len() - pos != n * 13 {
            return Err(Error::FlowFormat(format!(
                "payload is {} bytes, expected {}",
                bytes.len() - pos,
                n * 13
            )));
        }
        let mut flow = FlowField::new(layout);
        for i in 0..n {
            let x = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
            let y = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
            let z = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
            let ok = take(&mut pos, 1)?[0] != 0;
            flow.set(i, MotionVector::new(x, y, z), ok, f64::from(ok as u8));
        }
        Ok(flow)
    }
}
