//! Interactive refinement sessions, independent of any transport.
//!
//! Each session lives in its own directory:
//!
//! ```text
//! <root>/<id>/volume.tisvol
//! <root>/<id>/gt.tislbl          (when ground truth was supplied)
//! <root>/<id>/clicks.log         one JSON object per click
//! <root>/<id>/mask_000.tislbl    automatic mask
//! <root>/<id>/mask_<t>.tislbl    mask after t clicks
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderOutput;
use crate::error::Error;
use crate::interaction::error_map;
use crate::metrics::dice_per_class;
use crate::model::Model;
use crate::refiner::{Click, ClickSet};
use crate::volume::{extract_plane, in_bounds, Axis, Dims, LabelMask, Plane, Volume};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{0}")]
    Validation(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error(transparent)]
    Internal(Error),
}

impl From<Error> for SessionError {
    fn from(e: Error) -> Self {
        match e {
            Error::Format { .. } | Error::Position { .. } | Error::Index { .. } | Error::Shape { .. } | Error::NonFinite(_) => {
                SessionError::Validation(e.to_string())
            }
            Error::MissingCheckpoint(_) => SessionError::Unavailable(e.to_string()),
            other => SessionError::Internal(other),
        }
    }
}

pub type SessionResult<T> = std::result::Result<T, SessionError>;

/// Which voxel array a slice is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Image,
    Auto,
    Refined,
    Error,
}

impl Layer {
    pub fn parse(s: &str) -> Option<Layer> {
        match s {
            "image" => Some(Self::Image),
            "auto" => Some(Self::Auto),
            "refined" => Some(Self::Refined),
            "error" => Some(Self::Error),
            _ => None,
        }
    }
}

pub enum Slice {
    Image(Plane<f32>),
    Labels(Plane<u8>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub position: [usize; 3],
    pub category: u8,
    pub dice: Option<Vec<f64>>,
}

/// Result of a click or undo: the current step and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub step: usize,
    pub mask: LabelMask,
    pub dice: Option<Vec<f64>>,
}

pub struct Session {
    id: String,
    dir: PathBuf,
    created: u64,
    volume: Volume,
    gt: Option<LabelMask>,
    encoded: EncoderOutput,
    clicks: ClickSet,
    /// `masks[t]` is the mask after `t` clicks.
    masks: Vec<LabelMask>,
    dice: Vec<Option<Vec<f64>>>,
}

fn mask_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("mask_{step:03}.tislbl"))
}

impl Session {
    /// Encodes `volume`, stores the automatic mask as step 0 and persists
    /// everything under `dir`.
    pub fn create(id: String, dir: PathBuf, model: &Model, volume: Volume, gt: Option<LabelMask>) -> SessionResult<Self> {
        if let Some(g) = &gt {
            if g.dims() != volume.dims() || g.classes() != model.classes() {
                return Err(SessionError::Validation(format!(
                    "ground truth {:?} with {} classes does not match volume {:?} with {} classes",
                    g.dims(),
                    g.classes(),
                    volume.dims(),
                    model.classes()
                )));
            }
        }
        let (encoded, auto) = model.encode(&volume)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        volume.write(&dir.join("volume.tisvol"))?;
        if let Some(g) = &gt {
            g.write(&dir.join("gt.tislbl"))?;
        }
        auto.write(&mask_path(&dir, 0))?;
        fs::write(dir.join("clicks.log"), b"").map_err(|e| Error::io(dir.join("clicks.log"), e))?;
        let dice = gt.as_ref().map(|g| dice_per_class(&auto, g)).transpose()?;
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Self {
            id,
            dir,
            created,
            volume,
            gt,
            encoded,
            clicks: ClickSet::default(),
            masks: vec![auto],
            dice: vec![dice],
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn created(&self) -> u64 {
        self.created
    }

    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }

    pub fn classes(&self) -> usize {
        self.encoded.classes
    }

    pub fn has_gt(&self) -> bool {
        self.gt.is_some()
    }

    pub fn clicks(&self) -> &ClickSet {
        &self.clicks
    }

    pub fn step(&self) -> usize {
        self.clicks.len()
    }

    pub fn current(&self) -> StepResult {
        self.at(self.step())
    }

    pub fn mask_at(&self, step: usize) -> Option<&LabelMask> {
        self.masks.get(step)
    }

    /// Per-class Dice after `step` clicks, when ground truth is known.
    pub fn dice_at(&self, step: usize) -> Option<Vec<f64>> {
        self.dice.get(step).cloned().flatten()
    }

    fn at(&self, step: usize) -> StepResult {
        StepResult {
            step,
            mask: self.masks[step].clone(),
            dice: self.dice[step].clone(),
        }
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.clicks
            .iter()
            .enumerate()
            .map(|(i, c)| HistoryEntry {
                step: i + 1,
                position: c.position,
                category: c.category,
                dice: self.dice[i + 1].clone(),
            })
            .collect()
    }

    fn write_log(&self) -> SessionResult<()> {
        let mut text = String::new();
        for h in self.history() {
            text.push_str(&serde_json::to_string(&h).expect("history serializes"));
            text.push('\n');
        }
        let path = self.dir.join("clicks.log");
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Appends a click as step `step` (1-based). Retrying a step that was
    /// already applied with the same click returns the stored result.
    pub fn add_click(&mut self, model: &Model, click: Click, step: usize) -> SessionResult<StepResult> {
        if !in_bounds(self.dims(), click.position) {
            return Err(SessionError::Validation(format!(
                "position {:?} outside extents {:?}",
                click.position,
                self.dims()
            )));
        }
        if click.category as usize >= self.classes() {
            return Err(SessionError::Validation(format!(
                "category {} not below class count {}",
                click.category,
                self.classes()
            )));
        }
        let current = self.step();
        if step >= 1 && step <= current && self.clicks.as_slice()[step - 1] == click {
            return Ok(self.at(step));
        }
        if step != current + 1 {
            return Err(SessionError::Conflict(format!(
                "stale step {step}: session is at step {current}, next step is {}",
                current + 1
            )));
        }
        let mut clicks = self.clicks.clone();
        clicks.push(click);
        let mask = model.refiner.refine(&self.encoded, &clicks)?;
        let dice = self.gt.as_ref().map(|g| dice_per_class(&mask, g)).transpose()?;
        mask.write(&mask_path(&self.dir, step))?;
        self.clicks = clicks;
        self.masks.push(mask);
        self.dice.push(dice);
        self.write_log()?;
        Ok(self.at(step))
    }

    pub fn undo(&mut self) -> SessionResult<StepResult> {
        if self.clicks.is_empty() {
            return Err(SessionError::Conflict("nothing to undo".into()));
        }
        let removed = self.step();
        self.clicks.pop();
        self.masks.pop();
        self.dice.pop();
        let _ = fs::remove_file(mask_path(&self.dir, removed));
        self.write_log()?;
        Ok(self.current())
    }

    pub fn slice(&self, axis: Axis, index: usize, layer: Layer) -> SessionResult<Slice> {
        let dims = self.dims();
        let labels = |m: &LabelMask| extract_plane(m.labels(), dims, axis, index);
        Ok(match layer {
            Layer::Image => Slice::Image(extract_plane(self.volume.data(), dims, axis, index)?),
            Layer::Auto => Slice::Labels(labels(&self.masks[0])?),
            Layer::Refined => Slice::Labels(labels(&self.masks[self.step()])?),
            Layer::Error => {
                let gt = self
                    .gt
                    .as_ref()
                    .ok_or_else(|| SessionError::Validation("error layer needs ground truth".into()))?;
                let err: Vec<u8> = error_map(&self.masks[self.step()], gt)?.into_iter().map(u8::from).collect();
                Slice::Labels(extract_plane(&err, dims, axis, index)?)
            }
        })
    }
}

/// All live sessions under one root directory. Each session has its own
/// lock; the map lock is only held to look sessions up.
pub struct SessionStore {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self, model: &Model, volume: Volume, gt: Option<LabelMask>) -> SessionResult<Arc<Mutex<Session>>> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::create(id.clone(), self.root.join(&id), model, volume, gt)?;
        let handle = Arc::new(Mutex::new(session));
        self.sessions.lock().expect("session map poisoned").insert(id, handle.clone());
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> SessionResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::encoder::Encoder;
    use crate::refiner::{Ablation, Refiner};
    use crate::rng::Rng;
    use crate::volume::voxel_coords;

    fn model() -> Model {
        let cfg = Config::parse(
            "[data]\ndims = [8, 8, 8]\norgan_radius = [2.0, 2.5]\norgan_side = [4, 5]\ntumor_radius = [0.5, 0.9]\n[encoder]\nfeatures = 8\n[refiner]\nlayers = 1\ncrop = [8, 8, 8]\n",
        )
        .unwrap();
        Model {
            encoder: Encoder::new(cfg.encoder_config(), &mut Rng::new(1)).unwrap(),
            refiner: Refiner::new(cfg.refiner_config(Ablation::NONE), &mut Rng::new(2)).unwrap(),
        }
    }

    fn volume() -> Volume {
        Volume::normalized([8, 8, 8], &(0..512).map(|i| ((i * 37) % 11) as f64).collect::<Vec<_>>()).unwrap()
    }

    fn gt() -> LabelMask {
        let labels = (0..512)
            .map(|i| {
                let p = voxel_coords([8, 8, 8], i);
                if p.iter().all(|&v| (2..6).contains(&v)) { 1 } else { 0 }
            })
            .collect();
        LabelMask::new([8, 8, 8], 3, labels).unwrap()
    }

    #[test]
    fn click_undo_and_idempotency() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path());
        let handle = store.create(&m, volume(), Some(gt())).unwrap();
        let mut s = handle.lock().unwrap();
        let auto = s.current();
        assert_eq!(auto.step, 0);
        assert_eq!(auto.dice.as_ref().unwrap(), &dice_per_class(&auto.mask, &gt()).unwrap());

        let c1 = Click::new([3, 3, 3], 1);
        let r1 = s.add_click(&m, c1, 1).unwrap();
        assert_eq!(s.add_click(&m, c1, 1).unwrap(), r1);
        assert_eq!(s.history().len(), 1);
        assert!(matches!(s.add_click(&m, Click::new([0, 0, 0], 2), 1), Err(SessionError::Conflict(_))));
        assert!(matches!(s.add_click(&m, c1, 5), Err(SessionError::Conflict(_))));
        assert!(matches!(s.add_click(&m, Click::new([8, 0, 0], 1), 2), Err(SessionError::Validation(_))));
        assert!(matches!(s.add_click(&m, Click::new([0, 0, 0], 3), 2), Err(SessionError::Validation(_))));

        let r2 = s.add_click(&m, Click::new([6, 6, 6], 2), 2).unwrap();
        assert_eq!(r2.step, 2);
        assert!(s.dir().join("mask_002.tislbl").exists());
        assert_eq!(LabelMask::read(&s.dir().join("mask_001.tislbl")).unwrap(), r1.mask);
        let back = s.undo().unwrap();
        assert_eq!(back, r1);
        assert!(!s.dir().join("mask_002.tislbl").exists());
        let log = fs::read_to_string(s.dir().join("clicks.log")).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert_eq!(s.undo().unwrap().mask, auto.mask);
        assert!(matches!(s.undo(), Err(SessionError::Conflict(_))));
    }

    #[test]
    fn slices() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path());
        let handle = store.create(&m, volume(), Some(gt())).unwrap();
        let mut s = handle.lock().unwrap();
        s.add_click(&m, Click::new([4, 4, 4], 2), 1).unwrap();
        let Slice::Labels(refined) = s.slice(Axis::Z, 4, Layer::Refined).unwrap() else { panic!() };
        let Slice::Labels(err) = s.slice(Axis::Z, 4, Layer::Error).unwrap() else { panic!() };
        let mask = s.mask_at(1).unwrap().clone();
        for y in 0..8 {
            for x in 0..8 {
                let p = [x, y, 4];
                assert_eq!(refined.data[x + 8 * y], mask.get(p));
                assert_eq!(err.data[x + 8 * y], (mask.get(p) != gt().get(p)) as u8);
            }
        }
        assert!(matches!(s.slice(Axis::X, 8, Layer::Image), Err(SessionError::Validation(_))));
    }

    #[test]
    fn missing_session_and_bad_gt() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path());
        assert!(matches!(store.get("nope"), Err(SessionError::NotFound(_))));
        let bad = LabelMask::filled([8, 8, 8], 2, 0).unwrap();
        assert!(matches!(store.create(&m, volume(), Some(bad)), Err(SessionError::Validation(_))));
        assert!(store.is_empty());
    }
}
