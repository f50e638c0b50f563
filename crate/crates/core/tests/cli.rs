use std::fs;
use std::path::Path;

use fda::cli::{dispatch, RunManifest, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use fda::metrics::MetricsReport;
use fda::volcore::{load_volume, read_header, VolumeKind};

macro_rules! argv {
    ($($a:expr),* $(,)?) => { vec![$(String::from($a)),*] };
}

fn run(args: &[String]) -> i32 {
    dispatch(std::iter::once("fda".to_string()).chain(args.iter().cloned()))
}

fn p(path: impl AsRef<Path>) -> String {
    path.as_ref().to_str().unwrap().to_string()
}

#[test]
fn usage_errors() {
    assert_eq!(run(&argv![]), EXIT_USAGE);
    assert_eq!(run(&argv!["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&argv!["phantom"]), EXIT_USAGE);
    assert_eq!(run(&argv!["--help"]), EXIT_OK);
    assert_eq!(run(&argv!["--threads", "0", "gradcheck", "--list"]), EXIT_USAGE);
}

#[test]
fn gradcheck_subset_and_unknown_name() {
    assert_eq!(run(&argv!["gradcheck", "--check", "relu", "--check", "cse_block"]), EXIT_OK);
    assert_eq!(run(&argv!["gradcheck", "--check", "no_such_op"]), EXIT_VALIDATION);
}

#[test]
fn phantom_sdm_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    assert_eq!(run(&argv!["phantom", "gen", "--seed", "4", "--out", p(&case)]), EXIT_OK);
    let m: RunManifest = serde_json::from_slice(&fs::read(case.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "phantom gen");
    assert_eq!(m.seeds, vec![4]);
    assert_eq!(m.config_hash.len(), 64);

    let sdm = dir.path().join("sdm");
    assert_eq!(run(&argv!["sdm", "compute", "--mask", p(case.join("mask")), "--out", p(&sdm)]), EXIT_OK);
    let h = read_header(&sdm).unwrap();
    assert_eq!(h.kind, VolumeKind::Sdm);
    assert!(h.aux.unwrap()["max_in"].as_f64().unwrap() > 0.0);

    let report = dir.path().join("report.json");
    let args = argv![
        "eval", "--pred", p(case.join("mask")), "--gt", p(case.join("mask")),
        "--centerline", p(case.join("centerline.json")), "--out", p(&report),
    ];
    assert_eq!(run(&args), EXIT_OK);
    let r: MetricsReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!((r.length_rate, r.branch_rate, r.dsc), (100.0, 100.0, 100.0));
    assert_eq!(r.gt_branch_count, 7);

    // an image is not a mask
    assert_eq!(run(&argv!["sdm", "compute", "--mask", p(case.join("image")), "--out", p(&sdm)]), EXIT_VALIDATION);
    assert_eq!(run(&argv!["eval", "--pred", "missing", "--gt", "missing", "--out", p(&report)]), EXIT_VALIDATION);
}

#[test]
fn phantom_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(run(&argv!["phantom", "gen", "--seed", "9", "--out", p(d)]), EXIT_OK);
    }
    for f in ["image.volraw", "mask.volraw", "centerline.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&argv!["phantom", "gen", "--spec", p(&bad), "--out", p(dir.path().join("x"))]), EXIT_VALIDATION);
    let wrong = dir.path().join("wrong.json");
    fs::write(&wrong, r#"{"epochs": 1, "lr": -1.0}"#).unwrap();
    let args = argv!["train", "--config", p(&wrong), "--clean", "x", "--noisy", "x", "--out", p(dir.path().join("t"))];
    assert_eq!(run(&args), EXIT_VALIDATION);
}

#[test]
fn train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let noisy = dir.path().join("noisy");
    assert_eq!(run(&argv!["phantom", "gen", "--seed", "1", "--out", p(clean.join("c0"))]), EXIT_OK);
    let noise = dir.path().join("noise.json");
    fs::write(&noise, serde_json::to_vec(&fda::phantom::NoiseSpec::toy(0)).unwrap()).unwrap();
    let args = argv!["phantom", "gen", "--seed", "2", "--noise", p(&noise), "--out", p(noisy.join("n0"))];
    assert_eq!(run(&args), EXIT_OK);

    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"epochs": 2, "steps_per_epoch": 1, "checkpoint_every": 1}"#).unwrap();
    let out = dir.path().join("run");
    let args = argv!["train", "--config", p(&cfg), "--clean", p(&clean), "--noisy", p(&noisy), "--out", p(&out)];
    assert_eq!(run(&args), EXIT_OK);
    for f in ["ckpt_0.fda", "ckpt_1.fda", "ckpt_2.fda", "train_log.jsonl", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let pred = dir.path().join("pred");
    let prob = dir.path().join("prob");
    let args = argv![
        "infer", "--ckpt", p(out.join("ckpt_2.fda")), "--image", p(noisy.join("n0").join("image")),
        "--out", p(&pred), "--prob-out", p(&prob),
    ];
    assert_eq!(run(&args), EXIT_OK);
    assert_eq!(load_volume(&pred).unwrap().kind(), VolumeKind::Mask);
    let pv = load_volume(&prob).unwrap();
    assert!(pv.as_f32().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
}
