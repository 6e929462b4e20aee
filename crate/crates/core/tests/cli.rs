use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = "\
[data]
train_cases = 3
eval_cases = 2
dims = [16, 16, 16]
organ_radius = [4.0, 5.0]
organ_side = [8, 10]
tumor_radius = [2.0, 2.5]

[encoder]
features = 8

[refiner]
layers = 1
crop = [16, 16, 16]

[train.encoder]
epochs = 1

[train.refiner]
epochs = 1

[eval]
clicks = 3
";

fn tis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tis")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = tis(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run_ok(&["gen-data", "--config", s(&cfg), "--seed", "7", "--out-dir", s(dir)]);
    }
    assert_eq!(files(&a.join("train")).len(), 6);
    assert_eq!(files(&a.join("eval")).len(), 4);
    assert_eq!(files(&a.join("train")), files(&b.join("train")));
    assert_eq!(files(&a.join("eval")), files(&b.join("eval")));
    assert_ne!(files(&a.join("train"))[0].1, files(&a.join("eval"))[0].1);
    assert_eq!(fs::read_to_string(a.join("gen-data.seed")).unwrap().trim(), "7");
}

#[test]
fn usage_errors_exit_2() {
    let out = tis(&["gen-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[encoder]\nwidth = \"wide\"\n").unwrap();
    let out = tis(&["gen-data", "--config", s(&cfg), "--seed", "1", "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");

    fs::write(&cfg, CONFIG).unwrap();
    let out = tis(&[
        "train-refiner", "--config", s(&cfg), "--seed", "1", "--data", s(tmp.path()),
        "--checkpoint", s(tmp.path()), "--ablation", "no-such", "--out-dir", s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let data = tmp.path().join("data");
    run_ok(&["gen-data", "--config", s(&cfg), "--seed", "1", "--out-dir", s(&data)]);
    let out = tis(&[
        "train-refiner", "--config", s(&cfg), "--seed", "1", "--data", s(&data),
        "--checkpoint", s(&tmp.path().join("none")), "--out-dir", s(&tmp.path().join("ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "missing_checkpoint");

    let out = tis(&[
        "train-encoder", "--config", s(&cfg), "--seed", "1", "--data", s(&tmp.path().join("nodata")),
        "--out-dir", s(&tmp.path().join("ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let eval = tmp.path().join("eval");
    run_ok(&["gen-data", "--config", s(&cfg), "--seed", "1", "--out-dir", s(&data)]);
    run_ok(&["train-encoder", "--config", s(&cfg), "--seed", "2", "--data", s(&data), "--out-dir", s(&ckpt)]);
    run_ok(&[
        "train-refiner", "--config", s(&cfg), "--seed", "3", "--data", s(&data),
        "--checkpoint", s(&ckpt), "--out-dir", s(&ckpt),
    ]);
    assert!(ckpt.join("encoder.ckpt").exists() && ckpt.join("refiner.ckpt").exists());

    let out = run_ok(&[
        "eval", "--config", s(&cfg), "--seed", "4", "--data", s(&data), "--checkpoint", s(&ckpt),
        "--out-dir", s(&eval),
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("click_count\tclass\tmean\tstd"));
    assert_eq!(table.lines().count(), 1 + 4 * 3);
    let report: Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cases"], 2);

    let sim = tmp.path().join("sim");
    run_ok(&[
        "simulate", "--config", s(&cfg), "--seed", "5", "--checkpoint", s(&ckpt),
        "--volume", s(&data.join("eval/case_000.tisvol")),
        "--replay", s(&eval.join("traces/case_000.log")),
        "--out-dir", s(&sim),
    ]);
    let steps = fs::read_to_string(eval.join("traces/case_000.log")).unwrap().lines().count();
    let last = fs::read(sim.join(format!("mask_{:03}.tislbl", steps - 1))).unwrap();
    assert_eq!(last, fs::read(eval.join("traces/case_000.final.tislbl")).unwrap());
    assert!(sim.join("clicks.log").exists());
}
