//! Simulated user and the multi-round refinement protocol.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoder::{automatic_mask, EncoderOutput};
use crate::error::{Error, Result};
use crate::metrics::dice_per_class;
use crate::refiner::{Click, ClickSet, Refiner};
use crate::rng::Rng;
use crate::volume::{in_bounds, voxel_coords, voxel_index, Dims, LabelMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn parse(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }

    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Self::Six => manhattan == 1,
                        Self::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    /// Maximum per-axis disturbance of the click position, in voxels.
    pub epsilon: usize,
    pub connectivity: Connectivity,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            epsilon: 10,
            connectivity: Connectivity::Six,
            seed: 0,
        }
    }
}

/// Voxels where the prediction disagrees with ground truth.
pub fn error_map(pred: &LabelMask, gt: &LabelMask) -> Result<Vec<bool>> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("error map", &pred.dims(), &gt.dims()));
    }
    Ok(pred.labels().iter().zip(gt.labels()).map(|(a, b)| a != b).collect())
}

/// Connected regions of a boolean map. Ids start at 1 and follow the scan
/// order of each region's first voxel; 0 marks voxels outside every region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub ids: Vec<u32>,
    /// `sizes[id - 1]` is the voxel count of component `id`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Id of the biggest component; the smallest id wins ties.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i as u32 + 1));
            }
        }
        best.map(|(_, id)| id)
    }
}

fn neighbour(dims: Dims, p: [usize; 3], d: [i64; 3]) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as i64 + d[a];
        if v < 0 || v >= dims[a] as i64 {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

pub fn components(err: &[bool], dims: Dims, connectivity: Connectivity) -> Result<Components> {
    if err.len() != dims.iter().product::<usize>() {
        return Err(Error::shape("components", &[err.len()], &dims));
    }
    let offsets = connectivity.offsets();
    let mut ids = vec![0u32; err.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..err.len() {
        if !err[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = voxel_coords(dims, i);
            for &d in &offsets {
                if let Some(q) = neighbour(dims, p, d) {
                    let j = voxel_index(dims, q);
                    if err[j] && ids[j] == 0 {
                        ids[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    Ok(Components { ids, sizes })
}

/// Places one corrective click on the largest mis-segmented region.
/// Returns `None` when the prediction already matches ground truth.
pub fn simulate_click(pred: &LabelMask, gt: &LabelMask, cfg: &SimulatorConfig, rng: &mut Rng) -> Result<Option<Click>> {
    let err = error_map(pred, gt)?;
    let dims = gt.dims();
    let comps = components(&err, dims, cfg.connectivity)?;
    let Some(id) = comps.largest() else {
        return Ok(None);
    };
    let members: Vec<usize> = (0..err.len()).filter(|&i| comps.ids[i] == id).collect();
    let inside = |p: [usize; 3]| comps.ids[voxel_index(dims, p)] == id;

    let mut sum = [0f64; 3];
    for &i in &members {
        let p = voxel_coords(dims, i);
        for a in 0..3 {
            sum[a] += p[a] as f64;
        }
    }
    let n = members.len() as f64;
    let eps = cfg.epsilon as i64;
    let mut target = [0usize; 3];
    for a in 0..3 {
        let centre = (sum[a] / n).round() as i64;
        let offset = rng.range_inclusive(-eps, eps);
        target[a] = (centre + offset).clamp(0, dims[a] as i64 - 1) as usize;
    }

    let position = if inside(target) {
        target
    } else {
        let interior: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| {
                let p = voxel_coords(dims, i);
                Connectivity::Six
                    .offsets()
                    .iter()
                    .all(|&d| neighbour(dims, p, d).is_some_and(inside))
            })
            .collect();
        let pool = if interior.is_empty() { &members } else { &interior };
        voxel_coords(dims, pool[rng.below(pool.len() as u64) as usize])
    };
    debug_assert!(in_bounds(dims, position));
    Ok(Some(Click::new(position, gt.get(position))))
}

/// One state of an interaction sequence. Step 0 is the automatic mask with
/// no clicks.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub clicks: ClickSet,
    pub mask: LabelMask,
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionTrace {
    pub steps: Vec<Step>,
    /// The prediction matched ground truth before the click budget ran out.
    pub converged: bool,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    position: Option<[usize; 3]>,
    category: Option<u8>,
    dice: &'a [f64],
}

impl SessionTrace {
    /// Per-class Dice after `clicks` clicks; a converged sequence keeps its
    /// final value.
    pub fn dice_at(&self, clicks: usize) -> &[f64] {
        &self.steps[clicks.min(self.steps.len() - 1)].dice
    }

    /// One JSON object per step: click position, category and per-class Dice.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for (t, s) in self.steps.iter().enumerate() {
            let last = s.clicks.as_slice().last().filter(|_| t > 0);
            let line = LogLine {
                step: t,
                position: last.map(|c| c.position),
                category: last.map(|c| c.category),
                dice: &s.dice,
            };
            out.push_str(&serde_json::to_string(&line).expect("log line serializes"));
            out.push('\n');
        }
        out
    }
}

/// Iterates simulate-click → refine from the automatic mask for up to
/// `n_clicks` rounds.
pub fn session_run(
    enc: &EncoderOutput,
    gt: &LabelMask,
    refiner: &Refiner,
    n_clicks: usize,
    cfg: &SimulatorConfig,
) -> Result<SessionTrace> {
    if n_clicks == 0 {
        return Err(Error::Contract("session needs at least one click".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let auto = automatic_mask(enc);
    let mut steps = vec![Step {
        clicks: ClickSet::default(),
        dice: dice_per_class(&auto, gt)?,
        mask: auto,
    }];
    let mut converged = false;
    for _ in 0..n_clicks {
        let prev = steps.last().expect("step 0 exists");
        let Some(click) = simulate_click(&prev.mask, gt, cfg, &mut rng)? else {
            converged = true;
            break;
        };
        let mut clicks = prev.clicks.clone();
        clicks.push(click);
        let mask = refiner.refine(enc, &clicks)?;
        steps.push(Step {
            dice: dice_per_class(&mask, gt)?,
            clicks,
            mask,
        });
    }
    if !converged && error_map(&steps.last().expect("non-empty").mask, gt)?.iter().all(|e| !e) {
        converged = true;
    }
    Ok(SessionTrace { steps, converged })
}
