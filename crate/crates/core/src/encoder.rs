//! Convolutional encoder producing automatic segmentation logits and the
//! half-resolution dense features consumed by the refiner.
//!
//! Layout: two 3×3×3 conv+ReLU blocks at full resolution, a stride-2
//! 3×3×3 conv+ReLU down to half resolution, two more conv+ReLU blocks whose
//! output is the feature grid, and a 1×1×1 head whose class logits are
//! duplicated back to full resolution.

use crate::error::{Error, Result};
use crate::refiner::ClickSet;
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Graph, ParamStore, Tensor, Var};
use crate::volume::{voxel_coords, voxel_count, voxel_index, Dims, LabelMask, Volume};

pub const MIN_EXTENT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channels of the full-resolution blocks.
    pub width: usize,
    /// Feature width `m` of the half-resolution grid.
    pub features: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub dims: Dims,
    pub classes: usize,
    /// `[H·W·D × C]`, voxel rows in x-fastest order.
    pub mask_logits: Tensor,
    /// `[(H/2)(W/2)(D/2) × m]`.
    pub features: Tensor,
}

impl EncoderOutput {
    pub fn feature_dims(&self) -> Dims {
        self.dims.map(|e| e / 2)
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }
}

pub(crate) struct EncoderVars {
    pub logits: Var,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
}

const CONVS: [&str; 5] = ["conv1", "conv2", "down", "conv3", "conv4"];

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, (cin, cout)) in CONVS.iter().zip(Self::channel_plan(&config)) {
            let fan_in = 27 * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_fn(&[fan_in, cout], |_| rng.uniform_in(-bound, bound));
            params.add(format!("{name}.w"), w)?;
            params.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        }
        params.add_glorot("head.w", &[config.features, config.classes], config.features, config.classes, rng)?;
        params.add("head.b", Tensor::zeros(&[config.classes]))?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(config: EncoderConfig, loaded: &ParamStore) -> Result<Self> {
        let mut enc = Self::new(config, &mut Rng::new(0))?;
        enc.params.load_from(loaded)?;
        Ok(enc)
    }

    fn channel_plan(c: &EncoderConfig) -> [(usize, usize); 5] {
        [
            (1, c.width),
            (c.width, c.width),
            (c.width, c.features),
            (c.features, c.features),
            (c.features, c.features),
        ]
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn forward(&self, g: &mut Graph, vol: &Volume) -> Result<EncoderVars> {
        let dims = vol.dims();
        if dims.iter().any(|&e| e % 2 != 0 || e < MIN_EXTENT) {
            return Err(Error::shape("encode (extents must be even and >= 8)", &dims, &[MIN_EXTENT; 3]));
        }
        let half = dims.map(|e| e / 2);
        let n = voxel_count(dims);
        let input = Tensor::new(vec![n, 1], vol.data().iter().map(|&v| v as f64).collect())?;
        let mut h = g.input(input);
        for (i, (name, (cin, cout))) in CONVS.iter().zip(Self::channel_plan(&self.config)).enumerate() {
            let (grid, stride) = match i {
                0 | 1 => (dims, 1),
                2 => (dims, 2),
                _ => (half, 1),
            };
            let geom = ConvGeometry::new(grid, stride, cin, cout);
            let w = g.param(&self.params, self.params.id(&format!("{name}.w"))?);
            let b = g.param(&self.params, self.params.id(&format!("{name}.b"))?);
            let c = g.conv3d(h, w, b, geom)?;
            h = g.relu(c);
        }
        let features = h;
        let hw = g.param(&self.params, self.params.id("head.w")?);
        let hb = g.param(&self.params, self.params.id("head.b")?);
        let head = g.matmul(features, hw)?;
        let head = g.add_row(head, hb)?;
        let logits = g.upsample2(head, half)?;
        Ok(EncoderVars { logits, features })
    }

    /// Mean pixelwise cross-entropy against `gt`; parameter gradients are
    /// added to those already held in the store.
    pub fn accumulate_gradients(&mut self, vol: &Volume, gt: &LabelMask) -> Result<f64> {
        if gt.dims() != vol.dims() {
            return Err(Error::shape("encoder loss", &vol.dims(), &gt.dims()));
        }
        let mut g = Graph::new();
        let vars = self.forward(&mut g, vol)?;
        let targets: Vec<usize> = gt.labels().iter().map(|&l| l as usize).collect();
        let loss = g.cross_entropy(vars.logits, &targets)?;
        let value = g.value(loss).item();
        g.backward(loss, &mut self.params)?;
        Ok(value)
    }

    pub fn encode(&self, vol: &Volume) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, vol)?;
        Ok(EncoderOutput {
            dims: vol.dims(),
            classes: self.config.classes,
            mask_logits: g.value(vars.logits).clone(),
            features: g.value(vars.features).clone(),
        })
    }
}

/// Per-voxel argmax of the logits; ties go to the smaller class index.
pub fn automatic_mask(out: &EncoderOutput) -> LabelMask {
    let labels = out.mask_logits.argmax_rows();
    LabelMask::from_indices(out.dims, out.classes, &labels).expect("argmax within class range")
}

/// Axis-aligned box `[lo, hi)` in full-resolution voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Roi {
    pub fn full(dims: Dims) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn size(&self) -> Dims {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    pub fn is_full(&self, dims: Dims) -> bool {
        *self == Self::full(dims)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }

    /// A window of fixed `size` (per axis, clamped to `dims`) centred on this
    /// box and shifted to lie inside the volume. Corners stay even.
    pub fn fit(&self, size: Dims, dims: Dims) -> Roi {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let s = size[a].min(dims[a]) & !1;
            let centre = (self.lo[a] + self.hi[a]) / 2;
            let start = centre.saturating_sub(s / 2).min(dims[a] - s) & !1;
            lo[a] = start;
            hi[a] = start + s;
        }
        Roi { lo, hi }
    }
}

/// Copies the rows of a grid-shaped tensor that fall inside `[lo, hi)`.
pub(crate) fn crop_rows(t: &Tensor, dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::new();
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let start = voxel_index(dims, [lo[0], y, z]);
            let end = voxel_index(dims, [hi[0] - 1, y, z]) + 1;
            data.extend_from_slice(&t.data()[start * c..end * c]);
        }
    }
    let rows = data.len() / c;
    Tensor::new(vec![rows, c], data).expect("non-empty crop")
}

impl EncoderOutput {
    pub fn crop(&self, roi: &Roi) -> EncoderOutput {
        let half_lo = roi.lo.map(|e| e / 2);
        let half_hi = roi.hi.map(|e| e / 2);
        EncoderOutput {
            dims: roi.size(),
            classes: self.classes,
            mask_logits: crop_rows(&self.mask_logits, self.dims, roi.lo, roi.hi),
            features: crop_rows(&self.features, self.feature_dims(), half_lo, half_hi),
        }
    }
}

/// Bounding box of predicted foreground and click positions, dilated by
/// `margin`, clipped to the volume and rounded outward to even corners.
/// With neither foreground nor clicks the whole volume is returned.
pub fn bounding_roi(auto: &LabelMask, clicks: &ClickSet, margin: usize) -> Roi {
    let dims = auto.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    let mut include = |p: [usize; 3]| {
        any = true;
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    };
    for (i, &l) in auto.labels().iter().enumerate() {
        if l != 0 {
            include(voxel_coords(dims, i));
        }
    }
    for c in clicks.iter() {
        include(c.position);
    }
    if !any {
        return Roi::full(dims);
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin) & !1;
        hi[a] = (hi[a] + margin).min(dims[a]);
        hi[a] = (hi[a] + 1) & !1;
        hi[a] = hi[a].min(dims[a]);
    }
    Roi { lo, hi }
}

pub fn crop_roi(out: &EncoderOutput, auto: &LabelMask, clicks: &ClickSet, margin: usize) -> (Roi, EncoderOutput) {
    let roi = bounding_roi(auto, clicks, margin);
    let cropped = out.crop(&roi);
    (roi, cropped)
}
