use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use tis_core::config::Config;
use tis_core::eval::{case_simulator, report_from_traces, run_sessions};
use tis_core::interaction::session_run;
use tis_core::model::{self, Model};
use tis_core::refiner::{Ablation, Click, ClickSet};
use tis_core::service::{serve, AppState};
use tis_core::session::{HistoryEntry, SessionStore};
use tis_core::synth::{generate, load_dataset, save_dataset};
use tis_core::train::{train_encoder, train_refiner};
use tis_core::volume::{LabelMask, Volume};
use tis_core::Error;

#[derive(Parser)]
#[command(name = "tis", version, about = "Interactive volumetric segmentation: data, training, evaluation and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/eval datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the encoder on <data>/train.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a refiner on <data>/train with the encoder from --checkpoint.
    TrainRefiner {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding encoder.ckpt.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none")]
        ablation: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dice-vs-clicks curve on <data>/eval with the simulated user.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none")]
        ablation: String,
        /// Defaults to the config's eval.clicks.
        #[arg(long)]
        clicks: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// One interaction sequence on a single volume, either with the
    /// simulated user (needs --gt) or replaying a recorded click log.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none")]
        ablation: String,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// JSON-lines click log (as written by a session) to replay.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        clicks: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve the session HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none")]
        ablation: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Root directory for session data.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code_and_kind(&self) -> (u8, &'static str) {
        match self {
            Failure::Usage(_) => (2, "usage"),
            Failure::Core(e) => match e {
                Error::MissingCheckpoint(_) => (3, "missing_checkpoint"),
                Error::Io { .. } => (3, "io"),
                Error::Format { .. } => (3, "format"),
                Error::Diverged(_) | Error::NonFinite(_) => (4, "divergence"),
                Error::Config(_) | Error::Spec(_) => (2, "config"),
                _ => (1, "internal"),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn ablation(name: &str) -> Result<Ablation, Failure> {
    Ablation::parse(name).map_err(|e| Failure::Usage(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Records the resolved config and seed next to a run's artifacts.
fn record_run(dir: &Path, command: &str, cfg: &Config, seed: u64) -> Result<(), Error> {
    create_dir(dir)?;
    write(&dir.join(format!("{command}.config.toml")), &cfg.to_toml())?;
    write(&dir.join(format!("{command}.seed")), &format!("{seed}\n"))
}

fn progress(what: &'static str) -> impl FnMut(usize, f64) {
    move |epoch, loss| eprintln!("{what} epoch {epoch}: loss {loss:.6}")
}

/// One line of a session click log or an eval trace; trace lines without
/// a click (step 0) are skipped.
#[derive(Deserialize)]
struct LogEntry {
    position: Option<[usize; 3]>,
    category: Option<u8>,
}

fn read_click_log(path: &Path) -> Result<ClickSet, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut clicks = ClickSet::default();
    for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = |reason: String| Failure::Core(Error::Format { kind: "click log", reason: format!("line {}: {reason}", n + 1) });
        let entry: LogEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        match (entry.position, entry.category) {
            (Some(p), Some(c)) => clicks.push(Click::new(p, c)),
            (None, None) => {}
            _ => return Err(bad("position and category must both be present".into())),
        }
    }
    Ok(clicks)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { common, out_dir } => {
            let cfg = Config::load(&common.config)?;
            let spec = &cfg.data.spec;
            save_dataset(&out_dir.join("train"), &generate(spec, cfg.data.train_cases, common.seed)?)?;
            let eval_seed = common.seed.wrapping_add(0x5EED);
            save_dataset(&out_dir.join("eval"), &generate(spec, cfg.data.eval_cases, eval_seed)?)?;
            record_run(&out_dir, "gen-data", &cfg, common.seed)?;
        }
        Command::TrainEncoder { common, data, out_dir } => {
            let cfg = Config::load(&common.config)?;
            let train = load_dataset(&data.join("train"))?;
            let (encoder, report) =
                train_encoder(&train, cfg.encoder_config(), &cfg.train.encoder, common.seed, progress("encoder"))?;
            record_run(&out_dir, "train-encoder", &cfg, common.seed)?;
            model::save_encoder(&out_dir, &encoder)?;
            write(&out_dir.join("encoder.loss.json"), &serde_json::to_string_pretty(&report).expect("serializes"))?;
        }
        Command::TrainRefiner { common, data, checkpoint, ablation: name, out_dir } => {
            let cfg = Config::load(&common.config)?;
            let ablation = ablation(&name)?;
            let encoder = model::load_encoder(&checkpoint, &cfg)?;
            let train = load_dataset(&data.join("train"))?;
            let (refiner, report) = train_refiner(
                &train,
                &encoder,
                cfg.refiner_config(ablation),
                &cfg.train.refiner,
                &cfg.simulator(common.seed),
                common.seed,
                progress("refiner"),
            )?;
            record_run(&out_dir, "train-refiner", &cfg, common.seed)?;
            model::save_refiner(&out_dir, &refiner)?;
            let loss_file = format!("{}.loss.json", model::refiner_file(ablation).trim_end_matches(".ckpt"));
            write(&out_dir.join(loss_file), &serde_json::to_string_pretty(&report).expect("serializes"))?;
        }
        Command::Eval { common, data, checkpoint, ablation: name, clicks, out_dir } => {
            let cfg = Config::load(&common.config)?;
            let model = Model::load(&checkpoint, &cfg, ablation(&name)?)?;
            let clicks = clicks.unwrap_or(cfg.eval.clicks);
            if clicks == 0 {
                return Err(Failure::Usage("--clicks must be at least 1".into()));
            }
            let cases = load_dataset(&data.join("eval"))?;
            let traces = run_sessions(&cases, &model.encoder, &model.refiner, clicks, &cfg.simulator(common.seed))?;
            let report = report_from_traces(&traces, model.classes(), clicks)?;
            record_run(&out_dir, "eval", &cfg, common.seed)?;
            write(&out_dir.join("report.json"), &report.to_json())?;
            write(&out_dir.join("report.tsv"), &report.table())?;
            let trace_dir = out_dir.join("traces");
            create_dir(&trace_dir)?;
            for (i, t) in traces.iter().enumerate() {
                write(&trace_dir.join(format!("case_{i:03}.log")), &t.to_log())?;
                t.steps.last().expect("step 0").mask.write(&trace_dir.join(format!("case_{i:03}.final.tislbl")))?;
            }
            print!("{}", report.table());
        }
        Command::Simulate { common, checkpoint, ablation: name, volume, gt, replay, clicks, out_dir } => {
            let cfg = Config::load(&common.config)?;
            let model = Model::load(&checkpoint, &cfg, ablation(&name)?)?;
            let vol = Volume::read(&volume)?;
            let gt = gt.map(|p| LabelMask::read(&p)).transpose()?;
            record_run(&out_dir, "simulate", &cfg, common.seed)?;
            let masks = match (replay, &gt) {
                (Some(log), _) => {
                    let clicks = read_click_log(&log)?;
                    let masks = model.replay(&vol, &clicks)?;
                    let mut text = String::new();
                    for (t, c) in clicks.iter().enumerate() {
                        let dice = gt.as_ref().map(|g| tis_core::metrics::dice_per_class(&masks[t + 1], g)).transpose()?;
                        let entry = HistoryEntry { step: t + 1, position: c.position, category: c.category, dice };
                        text.push_str(&serde_json::to_string(&entry).expect("serializes"));
                        text.push('\n');
                    }
                    write(&out_dir.join("clicks.log"), &text)?;
                    masks
                }
                (None, Some(gt)) => {
                    let n = clicks.unwrap_or(cfg.eval.clicks);
                    if n == 0 {
                        return Err(Failure::Usage("--clicks must be at least 1".into()));
                    }
                    let (out, _) = model.encode(&vol)?;
                    let trace = session_run(&out, gt, &model.refiner, n, &case_simulator(&cfg.simulator(common.seed), 0))?;
                    write(&out_dir.join("trace.log"), &trace.to_log())?;
                    trace.steps.into_iter().map(|s| s.mask).collect()
                }
                (None, None) => return Err(Failure::Usage("simulate needs --gt or --replay".into())),
            };
            for (t, m) in masks.iter().enumerate() {
                m.write(&out_dir.join(format!("mask_{t:03}.tislbl")))?;
            }
        }
        Command::Serve { common, checkpoint, ablation: name, port, out_dir } => {
            let cfg = Config::load(&common.config)?;
            let ablation = ablation(&name)?;
            let model = match Model::load(&checkpoint, &cfg, ablation) {
                Ok(m) => Some(m),
                Err(Error::MissingCheckpoint(p)) => {
                    eprintln!("warning: {} missing; sessions will answer 503", p.display());
                    None
                }
                Err(e) => return Err(e.into()),
            };
            create_dir(&out_dir)?;
            let state = AppState::new(SessionStore::new(&out_dir), model);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
            rt.block_on(serve(state, port)).map_err(|e| Error::Io { path: out_dir, source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind) = f.code_and_kind();
            eprintln!("{}", json!({ "error": kind, "message": f.message() }));
            ExitCode::from(code)
        }
    }
}
