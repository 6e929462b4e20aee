//! C interface to trained models and in-memory refinement sessions.
//!
//! Every fallible function returns a [`TisStatus`]; on failure a
//! description is available from [`tis_last_error`] on the same thread.
//! Handles are opaque and must be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use tis_core::config::Config;
use tis_core::encoder::EncoderOutput;
use tis_core::metrics::dice_per_class;
use tis_core::model::Model;
use tis_core::refiner::{Ablation, Click, ClickSet};
use tis_core::volume::{LabelMask, Volume};
use tis_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TisStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    MissingCheckpoint = 5,
    Conflict = 6,
    BufferSize = 7,
    NoGroundTruth = 8,
    Internal = 9,
}

/// A loaded encoder/refiner pair. Safe to share between sessions.
pub struct TisModel {
    model: Arc<Model>,
}

/// One volume with its click history. Not thread-safe.
pub struct TisSession {
    model: Arc<Model>,
    encoded: EncoderOutput,
    gt: Option<LabelMask>,
    clicks: ClickSet,
    masks: Vec<LabelMask>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: TisStatus, msg: impl Into<String>) -> TisStatus {
    set_error(msg.into());
    status
}

fn from_core(e: Error) -> TisStatus {
    let status = match &e {
        Error::Io { .. } => TisStatus::Io,
        Error::Format { .. } => TisStatus::Format,
        Error::MissingCheckpoint(_) => TisStatus::MissingCheckpoint,
        Error::Position { .. } | Error::Index { .. } | Error::Shape { .. } | Error::Config(_) | Error::NonFinite(_) => {
            TisStatus::InvalidArgument
        }
        _ => TisStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> TisStatus) -> TisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TisStatus::Internal, "panic inside tis"),
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, TisStatus> {
    if p.is_null() {
        return Err(fail(TisStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(TisStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads `encoder.ckpt` and the refiner for `ablation` from
/// `checkpoint_dir`. `config_path` may be null for the default
/// configuration; `ablation` may be null for the full model.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tis_model_load(
    checkpoint_dir: *const c_char,
    config_path: *const c_char,
    ablation: *const c_char,
    out: *mut *mut TisModel,
) -> TisStatus {
    guard(|| {
        if out.is_null() {
            return fail(TisStatus::NullArgument, "out is null");
        }
        let dir = tri!(path_arg(checkpoint_dir, "checkpoint_dir"));
        let cfg = if config_path.is_null() {
            Config::default()
        } else {
            tri!(Config::load(&tri!(path_arg(config_path, "config_path"))).map_err(from_core))
        };
        let ablation = if ablation.is_null() {
            Ablation::NONE
        } else {
            let name = tri!(path_arg(ablation, "ablation"));
            tri!(Ablation::parse(&name.to_string_lossy()).map_err(from_core))
        };
        let model = tri!(Model::load(&dir, &cfg, ablation).map_err(from_core));
        *out = Box::into_raw(Box::new(TisModel { model: Arc::new(model) }));
        TisStatus::Ok
    })
}

/// # Safety
/// `model` must come from [`tis_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tis_model_free(model: *mut TisModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tis_model_classes(model: *const TisModel, out: *mut u32) -> TisStatus {
    if model.is_null() || out.is_null() {
        return fail(TisStatus::NullArgument, "null argument");
    }
    *out = (*model).model.classes() as u32;
    TisStatus::Ok
}

fn new_session(model: &TisModel, volume: Volume, gt: Option<LabelMask>) -> Result<TisSession, TisStatus> {
    let m = model.model.clone();
    if let Some(g) = &gt {
        if g.dims() != volume.dims() || g.classes() != m.classes() {
            return Err(fail(TisStatus::InvalidArgument, "ground truth does not match the volume or model"));
        }
    }
    let (encoded, auto) = m.encode(&volume).map_err(from_core)?;
    Ok(TisSession {
        model: m,
        encoded,
        gt,
        clicks: ClickSet::default(),
        masks: vec![auto],
    })
}

/// Starts a session from a volume file and an optional label file
/// (`gt_path` may be null).
///
/// # Safety
/// `model` must be live, paths null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tis_session_new(
    model: *const TisModel,
    volume_path: *const c_char,
    gt_path: *const c_char,
    out: *mut *mut TisSession,
) -> TisStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(TisStatus::NullArgument, "null argument");
        }
        let volume = tri!(Volume::read(&tri!(path_arg(volume_path, "volume_path"))).map_err(from_core));
        let gt = if gt_path.is_null() {
            None
        } else {
            Some(tri!(LabelMask::read(&tri!(path_arg(gt_path, "gt_path"))).map_err(from_core)))
        };
        let s = tri!(new_session(&*model, volume, gt));
        *out = Box::into_raw(Box::new(s));
        TisStatus::Ok
    })
}

/// Starts a session from `h*w*d` intensities laid out x fastest.
///
/// # Safety
/// `data` must point to `h*w*d` floats; `model` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tis_session_new_from_data(
    model: *const TisModel,
    data: *const f32,
    h: u32,
    w: u32,
    d: u32,
    out: *mut *mut TisSession,
) -> TisStatus {
    guard(|| {
        if model.is_null() || data.is_null() || out.is_null() {
            return fail(TisStatus::NullArgument, "null argument");
        }
        let dims = [h as usize, w as usize, d as usize];
        let n = dims.iter().product::<usize>();
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let volume = tri!(Volume::new(dims, values).map_err(from_core));
        let s = tri!(new_session(&*model, volume, None));
        *out = Box::into_raw(Box::new(s));
        TisStatus::Ok
    })
}

/// # Safety
/// `session` must come from a `tis_session_new*` call and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn tis_session_free(session: *mut TisSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Appends a click and refines from the whole click list.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tis_session_add_click(session: *mut TisSession, x: u32, y: u32, z: u32, category: u8) -> TisStatus {
    guard(|| {
        let Some(s) = session.as_mut() else {
            return fail(TisStatus::NullArgument, "session is null");
        };
        let mut clicks = s.clicks.clone();
        clicks.push(Click::new([x as usize, y as usize, z as usize], category));
        let mask = tri!(s.model.refiner.refine(&s.encoded, &clicks).map_err(from_core));
        s.clicks = clicks;
        s.masks.push(mask);
        TisStatus::Ok
    })
}

/// Drops the last click; fails with `Conflict` when there is none.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tis_session_undo(session: *mut TisSession) -> TisStatus {
    let Some(s) = session.as_mut() else {
        return fail(TisStatus::NullArgument, "session is null");
    };
    if s.clicks.pop().is_none() {
        return fail(TisStatus::Conflict, "nothing to undo");
    }
    s.masks.pop();
    TisStatus::Ok
}

/// Number of clicks applied so far.
///
/// # Safety
/// `session` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tis_session_steps(session: *const TisSession, out: *mut u32) -> TisStatus {
    let (Some(s), false) = (session.as_ref(), out.is_null()) else {
        return fail(TisStatus::NullArgument, "null argument");
    };
    *out = s.clicks.len() as u32;
    TisStatus::Ok
}

/// Writes the volume extents `[h, w, d]` into `out`.
///
/// # Safety
/// `session` must be live and `out` must hold three values.
#[no_mangle]
pub unsafe extern "C" fn tis_session_dims(session: *const TisSession, out: *mut u32) -> TisStatus {
    let (Some(s), false) = (session.as_ref(), out.is_null()) else {
        return fail(TisStatus::NullArgument, "null argument");
    };
    for (i, e) in s.encoded.dims.iter().enumerate() {
        *out.add(i) = *e as u32;
    }
    TisStatus::Ok
}

/// Copies the current mask (one class byte per voxel, x fastest) into
/// `buf`, which must hold exactly `h*w*d` bytes.
///
/// # Safety
/// `session` must be live and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tis_session_mask(session: *const TisSession, buf: *mut u8, len: usize) -> TisStatus {
    let (Some(s), false) = (session.as_ref(), buf.is_null()) else {
        return fail(TisStatus::NullArgument, "null argument");
    };
    let labels = s.masks.last().expect("automatic mask").labels();
    if len != labels.len() {
        return fail(TisStatus::BufferSize, format!("mask needs {} bytes, got {len}", labels.len()));
    }
    ptr::copy_nonoverlapping(labels.as_ptr(), buf, len);
    TisStatus::Ok
}

/// Per-class Dice of the current mask against the session's ground truth;
/// `buf` must hold exactly one value per class.
///
/// # Safety
/// `session` must be live and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tis_session_dice(session: *const TisSession, buf: *mut f64, len: usize) -> TisStatus {
    let (Some(s), false) = (session.as_ref(), buf.is_null()) else {
        return fail(TisStatus::NullArgument, "null argument");
    };
    let Some(gt) = &s.gt else {
        return fail(TisStatus::NoGroundTruth, "session has no ground truth");
    };
    let dice = tri!(dice_per_class(s.masks.last().expect("automatic mask"), gt).map_err(from_core));
    if len != dice.len() {
        return fail(TisStatus::BufferSize, format!("dice needs {} values, got {len}", dice.len()));
    }
    ptr::copy_nonoverlapping(dice.as_ptr(), buf, len);
    TisStatus::Ok
}
