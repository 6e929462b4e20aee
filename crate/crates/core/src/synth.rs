//! Synthetic benchmark volumes.
//!
//! Each case holds one large "organ" (class 1, a sphere or a cuboid) with a
//! small low-contrast "tumor" sphere (class 2) inside it. The tumor is
//! darker than the organ; an optional distractor blob, equally far above
//! the organ intensity, is rendered inside the organ but labelled as organ. Intensities get additive Gaussian noise and
//! each volume is normalized to zero mean and unit variance.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{voxel_coords, voxel_count, Dims, LabelMask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: Dims,
    /// 2 (organ only) or 3 (organ and tumor).
    pub classes: usize,
    /// Radius range of spherical organs.
    pub organ_radius: [f64; 2],
    /// Side-length range of cuboid organs.
    pub organ_side: [usize; 2],
    pub tumor_radius: [f64; 2],
    pub distractor_radius: [f64; 2],
    /// Absolute intensity offset of tumor and distractor from the organ.
    pub contrast: f64,
    pub noise: f64,
    pub distractor_probability: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            classes: 3,
            organ_radius: [8.0, 11.0],
            organ_side: [14, 20],
            tumor_radius: [3.0, 5.0],
            distractor_radius: [2.5, 4.0],
            contrast: 0.6,
            noise: 0.3,
            distractor_probability: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OrganShape {
    Sphere { centre: [f64; 3], radius: f64 },
    Cuboid { lo: [usize; 3], side: [usize; 3] },
}

impl OrganShape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Self::Sphere { centre, radius } => dist2(p, centre) <= radius * radius,
            Self::Cuboid { lo, side } => (0..3).all(|a| p[a] >= lo[a] as f64 && p[a] < (lo[a] + side[a]) as f64),
        }
    }

    fn nominal_volume(&self) -> f64 {
        match *self {
            Self::Sphere { radius, .. } => ball(radius),
            Self::Cuboid { side, .. } => side.iter().product::<usize>() as f64,
        }
    }
}

/// The shapes drawn for one case, before rasterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layout {
    pub organ: OrganShape,
    pub tumor: Option<([f64; 3], f64)>,
    pub distractor: Option<([f64; 3], f64)>,
}

impl Layout {
    /// Analytic volume of each class: background, organ minus tumor, tumor.
    pub fn nominal_volumes(&self, dims: Dims, classes: usize) -> Vec<f64> {
        let organ = self.organ.nominal_volume();
        let tumor = self.tumor.map_or(0.0, |(_, r)| ball(r));
        let mut v = vec![voxel_count(dims) as f64 - organ, organ - tumor];
        if classes > 2 {
            v.push(tumor);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub gt: LabelMask,
}

fn ball(r: f64) -> f64 {
    4.0 / 3.0 * PI * r * r * r
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if !(2..=3).contains(&self.classes) {
            return fail(format!("classes must be 2 or 3, got {}", self.classes));
        }
        let min_extent = *self.dims.iter().min().expect("three axes");
        if self.dims.iter().any(|&e| e < 8 || e % 2 != 0) {
            return fail(format!("extents {:?} must be even and at least 8", self.dims));
        }
        let ranges = [self.organ_radius, self.tumor_radius, self.distractor_radius];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) || self.organ_side[0] == 0 || self.organ_side[0] > self.organ_side[1] {
            return fail("shape ranges must be positive and ordered".into());
        }
        if 2.0 * self.organ_radius[1] + 2.0 > min_extent as f64 {
            return fail(format!(
                "organ radius {} does not fit in extents {:?}",
                self.organ_radius[1], self.dims
            ));
        }
        if self.organ_side[1] + 2 > min_extent {
            return fail(format!("organ side {} does not fit in extents {:?}", self.organ_side[1], self.dims));
        }
        let organ_inner = self.organ_radius[0].min(self.organ_side[0] as f64 / 2.0);
        if self.classes > 2 && self.tumor_radius[1] + 1.0 > organ_inner {
            return fail(format!(
                "tumor radius {} does not fit inside the smallest organ",
                self.tumor_radius[1]
            ));
        }
        if !(self.noise >= 0.0 && (0.0..1.0).contains(&self.contrast) && (0.0..=1.0).contains(&self.distractor_probability)) {
            return fail("noise must be non-negative, contrast in [0, 1), probability in [0, 1]".into());
        }
        Ok(())
    }

    /// Draws the shapes of one case.
    pub fn layout(&self, rng: &mut Rng) -> Layout {
        let d = self.dims;
        let organ = if rng.uniform() < 0.5 {
            let radius = rng.uniform_in(self.organ_radius[0], self.organ_radius[1]);
            let centre = [0, 1, 2].map(|a| rng.uniform_in(radius + 1.0, d[a] as f64 - radius - 1.0));
            OrganShape::Sphere { centre, radius }
        } else {
            let side = [0; 3].map(|_| rng.range_inclusive(self.organ_side[0] as i64, self.organ_side[1] as i64) as usize);
            let lo = [0, 1, 2].map(|a| 1 + rng.below((d[a] - side[a] - 1) as u64) as usize);
            OrganShape::Cuboid { lo, side }
        };
        // placement region for blobs fully inside the organ
        let inner = |rng: &mut Rng, r: f64| -> [f64; 3] {
            match organ {
                OrganShape::Sphere { centre, radius } => loop {
                    let slack = radius - r - 1.0;
                    let off = [0; 3].map(|_| rng.uniform_in(-slack, slack));
                    if off.iter().map(|o| o * o).sum::<f64>() <= slack * slack {
                        break [0, 1, 2].map(|a| centre[a] + off[a]);
                    }
                },
                OrganShape::Cuboid { lo, side } => {
                    [0, 1, 2].map(|a| rng.uniform_in(lo[a] as f64 + r + 0.5, (lo[a] + side[a]) as f64 - r - 1.5))
                }
            }
        };
        let tumor = (self.classes > 2).then(|| {
            let r = rng.uniform_in(self.tumor_radius[0], self.tumor_radius[1]);
            (inner(rng, r), r)
        });
        let mut distractor = None;
        if rng.uniform() < self.distractor_probability {
            let r = rng.uniform_in(self.distractor_radius[0], self.distractor_radius[1]);
            let fits = match organ {
                OrganShape::Sphere { radius, .. } => radius - r - 1.0 > 0.0,
                OrganShape::Cuboid { side, .. } => side.iter().all(|&s| s as f64 > 2.0 * r + 2.0),
            };
            if fits {
                for _ in 0..20 {
                    let c = inner(rng, r);
                    let clear = tumor.is_none_or(|(tc, tr)| dist2(c, tc).sqrt() >= tr + r + 2.0);
                    if clear {
                        distractor = Some((c, r));
                        break;
                    }
                }
            }
        }
        Layout { organ, tumor, distractor }
    }

    /// Rasterizes a layout into labels and noisy intensities.
    pub fn render(&self, layout: &Layout, rng: &mut Rng) -> Result<Sample> {
        let n = voxel_count(self.dims);
        let mut labels = vec![0u8; n];
        let mut raw = vec![0.0f64; n];
        for i in 0..n {
            let c = voxel_coords(self.dims, i);
            let p = c.map(|v| v as f64);
            if !layout.organ.contains(p) {
                continue;
            }
            labels[i] = 1;
            raw[i] = 1.0;
            if let Some((centre, r)) = layout.tumor {
                if dist2(p, centre) <= r * r {
                    labels[i] = 2;
                    raw[i] = 1.0 - self.contrast;
                }
            }
            if let Some((centre, r)) = layout.distractor {
                if dist2(p, centre) <= r * r {
                    raw[i] = 1.0 + self.contrast;
                }
            }
        }
        for v in &mut raw {
            *v += self.noise * rng.normal();
        }
        let gt = LabelMask::new(self.dims, self.classes, labels)?;
        for c in 0..self.classes as u8 {
            if gt.count(c) == 0 {
                return Err(Error::Spec(format!("class {c} is empty in a generated case")));
            }
        }
        Ok(Sample {
            volume: Volume::normalized(self.dims, &raw)?,
            gt,
        })
    }
}

/// `n` cases; case `i` draws from an independent stream of `seed`.
pub fn generate(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Spec("dataset must contain at least one case".into()));
    }
    let root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let layout = spec.layout(&mut rng);
            spec.render(&layout, &mut rng)
        })
        .collect()
}

fn case_paths(dir: &Path, i: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("case_{i:03}.tisvol")), dir.join(format!("case_{i:03}.tislbl")))
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let (v, l) = case_paths(dir, i);
        s.volume.write(&v)?;
        s.gt.write(&l)?;
    }
    Ok(())
}

/// Reads `case_000..` pairs until the first missing index.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    loop {
        let (v, l) = case_paths(dir, out.len());
        if !v.exists() {
            break;
        }
        let volume = Volume::read(&v)?;
        let gt = LabelMask::read(&l)?;
        if gt.dims() != volume.dims() {
            return Err(Error::shape("dataset case", &volume.dims(), &gt.dims()));
        }
        out.push(Sample { volume, gt });
    }
    if out.is_empty() {
        return Err(Error::io(
            dir.join("case_000.tisvol"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no cases in dataset directory"),
        ));
    }
    Ok(out)
}
