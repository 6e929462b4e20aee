use crate::encoder::Encoder;
use crate::error::Result;
use crate::interaction::{session_run, SessionTrace, SimulatorConfig};
use crate::metrics::MetricsReport;
use crate::refiner::Refiner;
use crate::rng::Rng;
use crate::synth::Sample;

/// Simulator settings for case `index`: the same knobs with a per-case seed.
pub fn case_simulator(sim: &SimulatorConfig, index: usize) -> SimulatorConfig {
    SimulatorConfig {
        seed: Rng::new(sim.seed).fork(index as u64).seed(),
        ..*sim
    }
}

/// Runs one interaction sequence per case.
pub fn run_sessions(
    data: &[Sample],
    encoder: &Encoder,
    refiner: &Refiner,
    clicks: usize,
    sim: &SimulatorConfig,
) -> Result<Vec<SessionTrace>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let out = encoder.encode(&s.volume)?;
            session_run(&out, &s.gt, refiner, clicks, &case_simulator(sim, i))
        })
        .collect()
}

pub fn report_from_traces(traces: &[SessionTrace], classes: usize, clicks: usize) -> Result<MetricsReport> {
    let per_case = traces
        .iter()
        .map(|t| (0..=clicks).map(|k| t.dice_at(k).to_vec()).collect())
        .collect();
    MetricsReport::from_cases(classes, clicks, per_case)
}

/// Per-class Dice at 0..=`clicks` clicks over the dataset.
pub fn eval_curve(
    data: &[Sample],
    encoder: &Encoder,
    refiner: &Refiner,
    clicks: usize,
    sim: &SimulatorConfig,
) -> Result<MetricsReport> {
    let traces = run_sessions(data, encoder, refiner, clicks, sim)?;
    report_from_traces(&traces, encoder.config().classes, clicks)
}
