//! Encoder and refiner training loops.

use serde::{Deserialize, Serialize};

use crate::encoder::{automatic_mask, Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::interaction::{error_map, simulate_click, SimulatorConfig};
use crate::refiner::{ClickSet, Refiner, RefinerConfig};
use crate::rng::Rng;
use crate::synth::Sample;
use crate::tensor::{AdamW, ParamStore};
use crate::volume::{voxel_coords, LabelMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    /// Samples whose gradients are summed (then averaged) per update.
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Upper bound of the uniform 1..=k clicks drawn per refiner sample.
    pub max_clicks: usize,
    /// Chebyshev radius around each simulated training click that is
    /// treated as corrected before the next click is placed.
    pub correction_radius: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            decay: 0.9,
            decay_every: 10,
            batch_size: 1,
            weight_decay: 1e-4,
            max_clicks: 10,
            correction_radius: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 || self.max_clicks == 0 {
            return Err(Error::Config("epochs, batch size, decay period and click count must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.decay > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative, decay positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

fn scale_grads(store: &mut ParamStore, s: f64) {
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= s;
        }
    }
}

/// Runs epochs over `n` items in a seeded shuffled order. `step` adds the
/// gradients of one item to the model's store and returns its loss.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    rng: Rng,
    n: usize,
}

impl Loop<'_> {
    fn run<M>(
        self,
        model: &mut M,
        params: fn(&mut M) -> &mut ParamStore,
        mut step: impl FnMut(&mut M, usize, &mut Rng) -> Result<f64>,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<TrainReport> {
        let mut opt = AdamW::new(self.cfg.lr, (0.9, 0.999), 1e-8, self.cfg.weight_decay);
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..self.n).collect();
        for epoch in 0..self.cfg.epochs {
            opt.lr = self.cfg.lr_at(epoch);
            let mut epoch_rng = self.rng.fork(epoch as u64);
            epoch_rng.shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                params(model).zero_grad();
                for &i in batch {
                    let mut item_rng = epoch_rng.fork(1 + i as u64);
                    let loss = step(model, i, &mut item_rng)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged(format!("loss {loss} at epoch {epoch}, sample {i}")));
                    }
                    total += loss;
                }
                scale_grads(params(model), 1.0 / batch.len() as f64);
                opt.step(params(model)).map_err(|e| match e {
                    Error::NonFinite(what) => Error::Diverged(format!("{what} at epoch {epoch}")),
                    other => other,
                })?;
            }
            let mean = total / self.n as f64;
            report.losses.push(mean);
            on_epoch(epoch, mean);
        }
        Ok(report)
    }
}

pub fn train_encoder(
    data: &[Sample],
    config: EncoderConfig,
    train: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(Encoder, TrainReport)> {
    train.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let root = Rng::new(seed);
    let mut encoder = Encoder::new(config, &mut root.fork(0))?;
    let report = Loop {
        cfg: train,
        rng: root.fork(1),
        n: data.len(),
    }
    .run(
        &mut encoder,
        |e| e.params_mut(),
        |e, i, _| e.accumulate_gradients(&data[i].volume, &data[i].gt),
        on_epoch,
    )?;
    Ok((encoder, report))
}

/// Places `n` clicks the way the simulated user would, without running the
/// refiner in between: after each click the error voxels within
/// `radius` (Chebyshev) of it count as corrected.
pub fn training_clicks(
    auto: &LabelMask,
    gt: &LabelMask,
    n: usize,
    sim: &SimulatorConfig,
    radius: usize,
    rng: &mut Rng,
) -> Result<ClickSet> {
    let mut pred = auto.clone();
    let mut clicks = ClickSet::default();
    let dims = gt.dims();
    for _ in 0..n {
        let Some(click) = simulate_click(&pred, gt, sim, rng)? else {
            break;
        };
        let err = error_map(&pred, gt)?;
        for (i, &wrong) in err.iter().enumerate() {
            if !wrong {
                continue;
            }
            let p = voxel_coords(dims, i);
            if (0..3).all(|a| p[a].abs_diff(click.position[a]) <= radius) {
                pred.set(p, gt.get(p));
            }
        }
        clicks.push(click);
    }
    Ok(clicks)
}

/// Trains a refiner on frozen encoder outputs. Samples whose automatic mask
/// is already perfect contribute a click on a random correctly labelled
/// voxel so that every step has at least one click.
pub fn train_refiner(
    data: &[Sample],
    encoder: &Encoder,
    config: RefinerConfig,
    train: &TrainConfig,
    sim: &SimulatorConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(Refiner, TrainReport)> {
    train.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let cached: Vec<(EncoderOutput, LabelMask)> = data
        .iter()
        .map(|s| {
            let out = encoder.encode(&s.volume)?;
            let auto = automatic_mask(&out);
            Ok((out, auto))
        })
        .collect::<Result<_>>()?;
    let root = Rng::new(seed);
    let mut refiner = Refiner::new(config, &mut root.fork(0))?;
    let report = Loop {
        cfg: train,
        rng: root.fork(1),
        n: data.len(),
    }
    .run(
        &mut refiner,
        |r| r.params_mut(),
        |r, i, rng| {
            let (out, auto) = &cached[i];
            let gt = &data[i].gt;
            let k = 1 + rng.below(train.max_clicks as u64) as usize;
            let mut clicks = training_clicks(auto, gt, k, sim, train.correction_radius, rng)?;
            if clicks.is_empty() {
                let dims = gt.dims();
                let p = voxel_coords(dims, rng.below(gt.labels().len() as u64) as usize);
                clicks.push(crate::refiner::Click::new(p, gt.get(p)));
            }
            r.accumulate_gradients(out, &clicks, gt)
        },
        on_epoch,
    )?;
    Ok((refiner, report))
}
