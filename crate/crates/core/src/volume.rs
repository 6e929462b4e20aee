//! Volumes, label masks and their on-disk formats.
//!
//! Voxel `(x, y, z)` of a grid with extents `[H, W, D]` lives at linear index
//! `x + H·(y + W·z)`: x varies fastest. Every grid-shaped array in the crate
//! (intensities, labels, feature rows, token rows) follows this order.
//!
//! Volume file: `"TISVOL1"`, u32 H, W, D, u8 dtype tag (0 = f32 LE), then
//! H·W·D intensities. Label file: `"TISLBL1"`, u32 H, W, D, u32 class
//! count, then H·W·D u8 labels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

pub const VOLUME_MAGIC: &[u8; 7] = b"TISVOL1";
pub const LABEL_MAGIC: &[u8; 7] = b"TISLBL1";
pub const DTYPE_F32_LE: u8 = 0;

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_index(dims: Dims, p: [usize; 3]) -> usize {
    p[0] + dims[0] * (p[1] + dims[1] * p[2])
}

#[inline]
pub fn voxel_coords(dims: Dims, i: usize) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

pub fn in_bounds(dims: Dims, p: [usize; 3]) -> bool {
    p.iter().zip(dims).all(|(&c, e)| c < e)
}

fn check_dims(kind: &'static str, dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::format(kind, format!("zero extent in {dims:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "x" | "X" => Some(Axis::X),
            "y" | "Y" => Some(Axis::Y),
            "z" | "Z" => Some(Axis::Z),
            _ => None,
        }
    }
}

/// A 2-D plane cut out of a grid. The two remaining axes keep their order;
/// the lower one varies fastest (`cols` entries per row).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

pub fn extract_plane<T: Copy>(data: &[T], dims: Dims, axis: Axis, index: usize) -> Result<Plane<T>> {
    let a = axis.index();
    if index >= dims[a] {
        return Err(Error::Index {
            context: "slice index",
            index,
            bound: dims[a],
        });
    }
    let (fast, slow) = match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    };
    let mut out = Vec::with_capacity(dims[fast] * dims[slow]);
    for s in 0..dims[slow] {
        for f in 0..dims[fast] {
            let mut p = [0; 3];
            p[a] = index;
            p[fast] = f;
            p[slow] = s;
            out.push(data[voxel_index(dims, p)]);
        }
    }
    Ok(Plane {
        rows: dims[slow],
        cols: dims[fast],
        data: out,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_dims("volume", dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape("volume", &dims, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume intensity".into()));
        }
        Ok(Self { dims, data })
    }

    /// Builds a volume normalized to zero mean and unit variance.
    pub fn normalized(dims: Dims, raw: &[f64]) -> Result<Self> {
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        Self::new(dims, raw.iter().map(|v| ((v - mean) * inv) as f32).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, p: [usize; 3]) -> f32 {
        self.data[voxel_index(self.dims, p)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(VOLUME_MAGIC);
        for e in self.dims {
            w.u32(e as u32);
        }
        w.u8(DTYPE_F32_LE);
        for &v in &self.data {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("volume", bytes, VOLUME_MAGIC)?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        check_dims("volume", dims)?;
        let tag = r.u8()?;
        if tag != DTYPE_F32_LE {
            return Err(Error::format("volume", format!("unsupported dtype tag {tag}")));
        }
        let n = voxel_count(dims);
        if r.remaining() != n * 4 {
            return Err(Error::format(
                "volume",
                format!("expected {} payload bytes, found {}", n * 4, r.remaining()),
            ));
        }
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        Self::new(dims, data).map_err(|e| Error::format("volume", e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, classes: usize, labels: Vec<u8>) -> Result<Self> {
        check_dims("label mask", dims)?;
        if !(1..=256).contains(&classes) {
            return Err(Error::Contract(format!("class count {classes} out of range")));
        }
        if labels.len() != voxel_count(dims) {
            return Err(Error::shape("label mask", &dims, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Index {
                context: "label value",
                index: bad as usize,
                bound: classes,
            });
        }
        Ok(Self { dims, classes, labels })
    }

    pub fn filled(dims: Dims, classes: usize, label: u8) -> Result<Self> {
        Self::new(dims, classes, vec![label; voxel_count(dims)])
    }

    pub fn from_indices(dims: Dims, classes: usize, labels: &[usize]) -> Result<Self> {
        Self::new(dims, classes, labels.iter().map(|&l| l as u8).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, p: [usize; 3]) -> u8 {
        self.labels[voxel_index(self.dims, p)]
    }

    pub fn set(&mut self, p: [usize; 3], label: u8) {
        debug_assert!((label as usize) < self.classes);
        let i = voxel_index(self.dims, p);
        self.labels[i] = label;
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Voxel set of one class as a boolean map.
    pub fn region(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Samples every second voxel (the even corner of each 2×2×2 cell).
    pub fn downsample2(&self) -> Result<LabelMask> {
        if self.dims.iter().any(|e| e % 2 != 0) {
            return Err(Error::shape("downsample2", &self.dims, &[2, 2, 2]));
        }
        let half = self.dims.map(|e| e / 2);
        let mut labels = Vec::with_capacity(voxel_count(half));
        for z in 0..half[2] {
            for y in 0..half[1] {
                for x in 0..half[0] {
                    labels.push(self.get([2 * x, 2 * y, 2 * z]));
                }
            }
        }
        LabelMask::new(half, self.classes, labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(LABEL_MAGIC);
        for e in self.dims {
            w.u32(e as u32);
        }
        w.u32(self.classes as u32);
        w.bytes(&self.labels);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("label mask", bytes, LABEL_MAGIC)?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        check_dims("label mask", dims)?;
        let classes = r.u32()? as usize;
        let n = voxel_count(dims);
        if r.remaining() != n {
            return Err(Error::format(
                "label mask",
                format!("expected {n} payload bytes, found {}", r.remaining()),
            ));
        }
        let labels = r.take(n)?.to_vec();
        Self::new(dims, classes, labels).map_err(|e| Error::format("label mask", e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
