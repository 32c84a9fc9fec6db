//! Scalar volumes, the UVOL file format, raw import, and MIP/PGM export.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor5};

pub const UVOL_MAGIC: &[u8; 4] = b"UVOL";
pub const UVOL_VERSION: u16 = 1;
const UVOL_HEADER: usize = 4 + 2 + 12 + 12;

/// A D×H×W grid of f32 samples, W fastest, with voxel size in millimetres
/// ordered (dz, dy, dx).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_size: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_size: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(
                "volume",
                format!("{} samples for dims {dims:?}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume sample {i}")));
        }
        Ok(Volume {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], v: f32) -> Self {
        Volume {
            dims,
            voxel_size: [1.0; 3],
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Volume {
            dims,
            voxel_size: [1.0; 3],
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn with_voxel_size(mut self, voxel_size: [f32; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        let i = self.index(d, h, w);
        self.data[i] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// The `size` block starting at `offset`.
    pub fn crop(&self, offset: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if offset[a] + size[a] > self.dims[a] {
                return Err(Error::invalid(format!(
                    "crop {size:?} at {offset:?} exceeds volume {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for d in 0..size[0] {
            for h in 0..size[1] {
                let start = self.index(offset[0] + d, offset[1] + h, offset[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Volume {
            dims: size,
            voxel_size: self.voxel_size,
            data,
        })
    }

    /// As a `1×1×D×H×W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor5<T> {
        let [d, h, w] = self.dims;
        Tensor5::from_vec(
            Shape::new(1, 1, d, h, w),
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("sized to dims")
    }

    pub fn same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "volume",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }
}

fn uvol_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(UVOL_HEADER + 4 * v.data.len());
    out.extend_from_slice(UVOL_MAGIC);
    out.extend_from_slice(&UVOL_VERSION.to_le_bytes());
    for &d in &v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &v.voxel_size {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn save_uvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&uvol_bytes(v))?;
    Ok(())
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn load_uvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let shown = path.display().to_string();
    if bytes.len() < 4 || &bytes[..4] != UVOL_MAGIC {
        return Err(Error::BadMagic { path: shown });
    }
    if bytes.len() < UVOL_HEADER {
        return Err(Error::Truncated {
            path: shown,
            expected: UVOL_HEADER,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != UVOL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: UVOL_VERSION,
        });
    }
    let dims = [0, 1, 2].map(|i| le_u32(&bytes[6 + 4 * i..10 + 4 * i]) as usize);
    let voxel_size = [0, 1, 2].map(|i| le_f32(&bytes[18 + 4 * i..22 + 4 * i]));
    let n: usize = dims.iter().product();
    let expected = UVOL_HEADER + 4 * n;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: shown,
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[UVOL_HEADER..].chunks_exact(4).map(le_f32).collect();
    Volume::new(dims, voxel_size, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawDtype {
    F32,
    U16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Reads headerless samples; u16 values are scaled by 1/65535.
pub fn import_raw(
    path: impl AsRef<Path>,
    dims: [usize; 3],
    dtype: RawDtype,
    endian: Endian,
) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let width = match dtype {
        RawDtype::F32 => 4,
        RawDtype::U16 => 2,
    };
    let expected = dims.iter().product::<usize>() * width;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(width)
        .map(|c| match (dtype, endian) {
            (RawDtype::F32, Endian::Little) => f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            (RawDtype::F32, Endian::Big) => f32::from_be_bytes([c[0], c[1], c[2], c[3]]),
            (RawDtype::U16, Endian::Little) => u16::from_le_bytes([c[0], c[1]]) as f32 / 65535.0,
            (RawDtype::U16, Endian::Big) => u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0,
        })
        .collect();
    Volume::new(dims, [1.0; 3], data)
}

/// Projection axis: axial collapses depth, coronal height, sagittal width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "projection axis",
                name: s.to_string(),
            })
    }
}

/// Row-major grey image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

pub fn mip_project(v: &Volume, axis: Axis) -> Image {
    let [dd, hh, ww] = v.dims;
    let (rows, cols) = match axis {
        Axis::Axial => (hh, ww),
        Axis::Coronal => (dd, ww),
        Axis::Sagittal => (dd, hh),
    };
    let mut data = vec![f32::NEG_INFINITY; rows * cols];
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let px = match axis {
                    Axis::Axial => h * cols + w,
                    Axis::Coronal => d * cols + w,
                    Axis::Sagittal => d * cols + h,
                };
                data[px] = data[px].max(v.at(d, h, w));
            }
        }
    }
    Image { rows, cols, data }
}

/// Binary P5 bytes with maxval 255; each sample maps to `floor(255·x + 0.5)`.
pub fn pgm_bytes(img: &Image) -> Result<Vec<u8>> {
    if let Some(bad) = img.data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("pgm sample {bad} outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&x| (255.0 * x as f64 + 0.5).floor() as u8),
    );
    Ok(out)
}

pub fn export_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes = pgm_bytes(img)?;
    fs::write(path, bytes)?;
    Ok(())
}
