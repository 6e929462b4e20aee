use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use tis_core::config::Config;
use tis_core::encoder::Encoder;
use tis_core::metrics::dice_per_class;
use tis_core::model::Model;
use tis_core::refiner::{Ablation, Click, ClickSet, Refiner};
use tis_core::rng::Rng;
use tis_core::synth::generate;
use tis_ffi::*;

const CONFIG: &str = "[data]\ndims = [8, 8, 8]\norgan_radius = [2.5, 2.5]\norgan_side = [5, 5]\ntumor_radius = [1.0, 1.4]\n\
                      [encoder]\nfeatures = 8\n[refiner]\nlayers = 1\ncrop = [8, 8, 8]\n";

struct Fixture {
    dir: tempfile::TempDir,
    model: Model,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::parse(CONFIG).unwrap();
    let model = Model {
        encoder: Encoder::new(cfg.encoder_config(), &mut Rng::new(1)).unwrap(),
        refiner: Refiner::new(cfg.refiner_config(Ablation::NONE), &mut Rng::new(2)).unwrap(),
    };
    model.save(dir.path()).unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let case = generate(&cfg.data.spec, 1, 3).unwrap().remove(0);
    case.volume.write(&dir.path().join("v.tisvol")).unwrap();
    case.gt.write(&dir.path().join("g.tislbl")).unwrap();
    Fixture { dir, model }
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = tis_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn load(f: &Fixture) -> *mut TisModel {
    let mut model = ptr::null_mut();
    let status = tis_model_load(c(f.dir.path()).as_ptr(), c(&f.dir.path().join("run.toml")).as_ptr(), ptr::null(), &mut model);
    assert_eq!(status, TisStatus::Ok);
    model
}

#[test]
fn session_round_trip_matches_core() {
    let f = fixture();
    unsafe {
        let model = load(&f);
        let mut classes = 0;
        assert_eq!(tis_model_classes(model, &mut classes), TisStatus::Ok);
        assert_eq!(classes, 3);

        let mut session = ptr::null_mut();
        let status = tis_session_new(
            model,
            c(&f.dir.path().join("v.tisvol")).as_ptr(),
            c(&f.dir.path().join("g.tislbl")).as_ptr(),
            &mut session,
        );
        assert_eq!(status, TisStatus::Ok);
        let mut dims = [0u32; 3];
        assert_eq!(tis_session_dims(session, dims.as_mut_ptr()), TisStatus::Ok);
        assert_eq!(dims, [8, 8, 8]);

        let volume = tis_core::volume::Volume::read(&f.dir.path().join("v.tisvol")).unwrap();
        let gt = tis_core::volume::LabelMask::read(&f.dir.path().join("g.tislbl")).unwrap();
        let clicks: ClickSet = [Click::new([4, 4, 4], 2), Click::new([1, 2, 3], 1)].into_iter().collect();
        let expected = f.model.replay(&volume, &clicks).unwrap();

        let mut mask = vec![0u8; 512];
        assert_eq!(tis_session_mask(session, mask.as_mut_ptr(), mask.len()), TisStatus::Ok);
        assert_eq!(mask, expected[0].labels());
        for (i, click) in clicks.iter().enumerate() {
            let [x, y, z] = click.position.map(|v| v as u32);
            assert_eq!(tis_session_add_click(session, x, y, z, click.category), TisStatus::Ok);
            assert_eq!(tis_session_mask(session, mask.as_mut_ptr(), mask.len()), TisStatus::Ok);
            assert_eq!(mask, expected[i + 1].labels());
        }
        let mut steps = 0;
        assert_eq!(tis_session_steps(session, &mut steps), TisStatus::Ok);
        assert_eq!(steps, 2);

        let mut dice = [0f64; 3];
        assert_eq!(tis_session_dice(session, dice.as_mut_ptr(), 3), TisStatus::Ok);
        assert_eq!(dice.to_vec(), dice_per_class(&expected[2], &gt).unwrap());

        assert_eq!(tis_session_undo(session), TisStatus::Ok);
        assert_eq!(tis_session_mask(session, mask.as_mut_ptr(), mask.len()), TisStatus::Ok);
        assert_eq!(mask, expected[1].labels());
        assert_eq!(tis_session_undo(session), TisStatus::Ok);
        assert_eq!(tis_session_undo(session), TisStatus::Conflict);
        assert!(last_error().contains("undo"));

        tis_session_free(session);
        tis_model_free(model);
    }
}

#[test]
fn error_codes() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        let missing = f.dir.path().join("absent");
        assert_eq!(tis_model_load(c(&missing).as_ptr(), ptr::null(), ptr::null(), &mut model), TisStatus::MissingCheckpoint);
        assert!(model.is_null());
        assert_eq!(tis_model_load(ptr::null(), ptr::null(), ptr::null(), &mut model), TisStatus::NullArgument);
        let bad = CString::new("no-such").unwrap();
        let cfg = c(&f.dir.path().join("run.toml"));
        assert_eq!(tis_model_load(c(f.dir.path()).as_ptr(), cfg.as_ptr(), bad.as_ptr(), &mut model), TisStatus::InvalidArgument);

        let model = load(&f);
        let mut session = ptr::null_mut();
        assert_eq!(tis_session_new(model, c(&missing).as_ptr(), ptr::null(), &mut session), TisStatus::Io);
        let gt = c(&f.dir.path().join("g.tislbl"));
        assert_eq!(tis_session_new(model, gt.as_ptr(), ptr::null(), &mut session), TisStatus::Format);

        let data = vec![0.5f32; 512];
        assert_eq!(tis_session_new_from_data(model, data.as_ptr(), 8, 8, 8, &mut session), TisStatus::Ok);
        assert_eq!(tis_session_add_click(session, 8, 0, 0, 1), TisStatus::InvalidArgument);
        assert_eq!(tis_session_add_click(session, 0, 0, 0, 3), TisStatus::InvalidArgument);
        let mut steps = 9;
        tis_session_steps(session, &mut steps);
        assert_eq!(steps, 0);
        let mut small = [0u8; 10];
        assert_eq!(tis_session_mask(session, small.as_mut_ptr(), small.len()), TisStatus::BufferSize);
        let mut dice = [0f64; 3];
        assert_eq!(tis_session_dice(session, dice.as_mut_ptr(), 3), TisStatus::NoGroundTruth);
        assert_eq!(tis_session_undo(ptr::null_mut()), TisStatus::NullArgument);

        tis_session_free(session);
        tis_model_free(model);
    }
}

#[test]
fn header_declares_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tis.h")).unwrap();
    for name in [
        "tis_last_error", "tis_model_load", "tis_model_free", "tis_model_classes", "tis_session_new",
        "tis_session_new_from_data", "tis_session_add_click", "tis_session_undo", "tis_session_steps",
        "tis_session_dims", "tis_session_mask", "tis_session_dice", "tis_session_free", "TIS_STATUS_OK",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
