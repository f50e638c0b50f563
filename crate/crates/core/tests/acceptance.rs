//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when a hard criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 5`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fda::autodiff::{cse_block, GradCheckConfig, Tape, Tensor5};
use fda::data::Case;
use fda::gradsuite;
use fda::infer::{postprocess, InferConfig};
use fda::loss::{l_reg, l_seg, LossConfig, Reduction};
use fda::metrics::{centerline_from_mask, dsc, evaluate, MetricsConfig};
use fda::phantom::{corrupt_to_noisy, generate_phantom, rasterize_polyline, NoiseSpec, PhantomSpec};
use fda::pipeline::{predict_case, run_pipeline, PipelineConfig, PipelineReport};
use fda::sdm::signed_squared_distances;
use fda::train::{fit, TrainConfig};
use fda::volcore::Volume;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn random_mask(rng: &mut ChaCha8Rng, full: bool) -> ([usize; 3], Vec<u8>) {
    let shape = if full { [24; 3] } else { [rng.gen_range(1..=24), rng.gen_range(1..=24), rng.gen_range(1..=24)] };
    let n: usize = shape.iter().product();
    let mut m = vec![0u8; n];
    if rng.gen_bool(0.5) {
        let p = rng.gen_range(0.05..0.7);
        for v in m.iter_mut() {
            *v = u8::from(rng.gen_bool(p));
        }
    } else {
        for _ in 0..rng.gen_range(1..5) {
            let c: Vec<f64> = shape.iter().map(|&s| rng.gen_range(0.0..s as f64)).collect();
            let r = rng.gen_range(1.0..8.0f64);
            for (i, v) in m.iter_mut().enumerate() {
                let p = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
                let d2: f64 = (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum();
                if d2 <= r * r {
                    *v = 1;
                }
            }
        }
    }
    if !m.iter().any(|&v| v != 0) {
        m[rng.gen_range(0..n)] = 1;
    }
    (shape, m)
}

/// All-pairs reference: squared distance to the nearest foreground voxel
/// that touches the background (or the grid border) through a face.
fn brute_force(shape: [usize; 3], m: &[u8]) -> Vec<i64> {
    let [d, h, w] = shape;
    let at = |z: i64, y: i64, x: i64| -> u8 {
        if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
            0
        } else {
            m[((z as usize) * h + y as usize) * w + x as usize]
        }
    };
    let coords: Vec<[i64; 3]> = (0..m.len()).map(|i| [(i / (h * w)) as i64, ((i / w) % h) as i64, (i % w) as i64]).collect();
    let surface: Vec<[i64; 3]> = coords
        .iter()
        .copied()
        .filter(|&[z, y, x]| {
            at(z, y, x) != 0
                && [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    .iter()
                    .any(|(a, b, c)| at(z + a, y + b, x + c) == 0)
        })
        .collect();
    coords
        .iter()
        .zip(m)
        .map(|(p, &v)| {
            let best = surface.iter().map(|s| (0..3).map(|k| (p[k] - s[k]).pow(2)).sum::<i64>()).min().unwrap();
            if v != 0 {
                -best
            } else {
                best
            }
        })
        .collect()
}

fn sdm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut largest = 0;
    for k in 0..50 {
        let (shape, m) = random_mask(&mut rng, k % 5 == 0);
        largest = largest.max(shape.iter().product::<usize>());
        let fast = signed_squared_distances(&m, shape).expect("non-empty mask");
        let oracle = brute_force(shape, &m);
        if fast != oracle {
            return outcome(false, format!("mask {k} of shape {shape:?} differs from the all-pairs oracle"));
        }
        for (i, &s) in fast.iter().enumerate() {
            let ok = if m[i] == 0 { s > 0 } else { s <= 0 };
            if !ok {
                return outcome(false, format!("mask {k}: voxel {i} has the wrong sign"));
            }
        }
    }
    outcome(true, format!("50 masks exact, largest {largest} voxels"))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    let reports = match gradsuite::run_all(&GradCheckConfig::f64_mode()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass || r.checked < 64)
        .map(|r| format!("{} ({} coords, rel {:.2e})", r.name, r.checked, r.max_rel_err))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if failing.is_empty() {
        outcome(true, format!("{} checks, worst rel err {worst:.2e}", reports.len()))
    } else {
        outcome(false, format!("failing: {}", failing.join(", ")))
    }
}

// ---------------------------------------------------------------- 3

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4096;
    let shape = [1, 1, 16, 16, 16];
    let g: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
    let gt = Tensor5::new(shape, g.clone()).unwrap();
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let p = t.leaf(gt.clone(), true);
    let seg = l_seg(&mut t, p, &gt, &cfg).unwrap();
    let mut notes = vec![format!("dice {:.6} focal {:.2e}", seg.first, seg.second)];
    let mut pass = (seg.first + 1.0).abs() <= 1e-3 && seg.second <= 1e-4;

    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let yt = Tensor5::new(shape, y.clone()).unwrap();
    let mut t = Tape::new();
    let f = t.leaf(yt.clone(), true);
    let reg = l_reg(&mut t, f, &yt, &cfg).unwrap();
    notes.push(format!("l1 {:.1e} ratio/voxel {:.9}", reg.first, reg.second));
    pass &= reg.first == 0.0 && (reg.second + 1.0 / 3.0).abs() <= 1e-6;

    let n_wrong = 1000;
    let half: Vec<f64> = (0..n_wrong).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
    let yt = Tensor5::new([1, 1, 10, 10, 10], half.clone()).unwrap();
    let flipped = Tensor5::new([1, 1, 10, 10, 10], half.iter().map(|v| -v).collect()).unwrap();
    let sum_cfg = LossConfig { reduction: Reduction::Sum, ..LossConfig::default() };
    let mut t = Tape::new();
    let f = t.leaf(flipped, true);
    let wrong = l_reg(&mut t, f, &yt, &sum_cfg).unwrap();
    let total = t.value(wrong.value).item();
    notes.push(format!("wrong-sign total {total:.6} for N={n_wrong}"));
    pass &= (total - 2.0 * n_wrong as f64).abs() <= 1e-4;
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- 4

fn cse_zero_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [2, 8, 4, 4, 4];
    let u: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut t: Tape<f32> = Tape::new();
    let uv = t.leaf(Tensor5::new(shape, u.clone()).unwrap(), false);
    let w1 = t.leaf(Tensor5::zeros([4, 8, 1, 1, 1]), false);
    let w2 = t.leaf(Tensor5::zeros([8, 4, 1, 1, 1]), false);
    let out = cse_block(&mut t, uv, w1, w2).unwrap().out;
    let worst = t
        .value(out)
        .data()
        .iter()
        .zip(&u)
        .map(|(o, u)| {
            let e = 0.5 * u;
            ((o - e).abs() / e.abs().max(f32::MIN_POSITIVE)) as f64
        })
        .fold(0.0, f64::max);
    outcome(worst <= 1e-6, format!("max rel deviation from 0.5*U: {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

/// Removes the mask territory of one generation-1 subtree: every voxel whose
/// nearest rasterised centreline voxel belongs to the subtree (ties go to the
/// lower branch index). Returns the reduced mask and the expected Length.
fn remove_subtree(sample: &fda::phantom::PhantomSample, root_child: usize) -> (Volume, f64, usize) {
    let shape = sample.mask.shape();
    let cl = &sample.centerline;
    let mut excluded = vec![false; cl.len()];
    excluded[root_child] = true;
    for _ in 0..cl.len() {
        for (i, b) in cl.iter().enumerate() {
            if let Some(p) = b.parent {
                if excluded[p] {
                    excluded[i] = true;
                }
            }
        }
    }
    let paths: Vec<Vec<[usize; 3]>> = cl.iter().map(|b| rasterize_polyline(&b.points, shape)).collect();
    let len = |p: &[[usize; 3]]| -> f64 {
        p.windows(2)
            .map(|w| (0..3).map(|k| (w[0][k] as f64 - w[1][k] as f64).powi(2)).sum::<f64>().sqrt())
            .sum()
    };
    let total: f64 = paths.iter().map(|p| len(p)).sum();
    let gone: f64 = paths.iter().zip(&excluded).filter(|(_, e)| **e).map(|(p, _)| len(p)).sum();
    let mut mask = sample.mask.as_mask().unwrap().to_vec();
    for (i, m) in mask.iter_mut().enumerate() {
        if *m == 0 {
            continue;
        }
        let v = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
        let mut best = (i64::MAX, usize::MAX);
        for (bi, p) in paths.iter().enumerate() {
            for q in p {
                let d: i64 = (0..3).map(|k| (v[k] as i64 - q[k] as i64).pow(2)).sum();
                if d < best.0 {
                    best = (d, bi);
                }
            }
        }
        if excluded[best.1] {
            *m = 0;
        }
    }
    let count = excluded.iter().filter(|e| **e).count();
    (Volume::mask(shape, sample.mask.spacing(), mask).unwrap(), 100.0 * (1.0 - gone / total), count)
}

fn metrics_oracles() -> Outcome {
    let cfg = MetricsConfig::default();
    let mut notes = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let s = generate_phantom(&PhantomSpec::toy(seed)).unwrap();
        let r = evaluate(&s.mask, &s.mask, Some(&s.centerline), &cfg).unwrap();
        let self_ok = r.length_rate == 100.0 && r.branch_rate == 100.0 && r.dsc >= 99.9;
        pass &= self_ok;
        let parsed = centerline_from_mask(s.mask.as_mask().unwrap(), s.mask.shape(), s.mask.spacing(), cfg.min_spur_length).unwrap();
        pass &= parsed.len() == 7;
        if seed == 0 {
            notes.push(format!("self-eval ({:.1}, {:.1}, {:.1}); parsed {} branches", r.length_rate, r.branch_rate, r.dsc, parsed.len()));
        } else if parsed.len() != 7 || !self_ok {
            notes.push(format!(
                "seed {seed}: self-eval ({:.1}, {:.1}, {:.1}), parsed {} branches",
                r.length_rate,
                r.branch_rate,
                r.dsc,
                parsed.len()
            ));
        }
        for child in s.centerline.iter().enumerate().filter(|(_, b)| b.generation == 1).map(|(i, _)| i) {
            let (pred, expected, removed) = remove_subtree(&s, child);
            let got = evaluate(&pred, &s.mask, Some(&s.centerline), &cfg).unwrap();
            let ok = (got.length_rate - expected).abs() <= 0.5 && removed == 3;
            pass &= ok;
            if !ok || seed == 0 {
                notes.push(format!(
                    "seed {seed} subtree {child}: Length {:.3} expected {expected:.3}, {removed} branches removed",
                    got.length_rate
                ));
            }
        }
    }
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- 6

fn overfit() -> Outcome {
    let s = generate_phantom(&PhantomSpec::toy(0)).unwrap();
    let n = corrupt_to_noisy(&s, &NoiseSpec::toy(100)).unwrap();
    let clean = Case::from_sample("clean", &s).unwrap();
    let noisy = Case::from_sample("noisy", &n).unwrap();
    let cfg = TrainConfig::toy();
    let steps = cfg.epochs * cfg.steps_per_epoch;
    let fitted = fit(&cfg, &[clean.clone()], &[noisy.clone()], None).unwrap();
    let mut scores = Vec::new();
    for case in [&noisy, &clean] {
        let prob = predict_case(&fitted.model, case, &InferConfig::default()).unwrap();
        let pred = postprocess(&prob, 0.5).unwrap();
        scores.push(dsc(pred.as_mask().unwrap(), &case.mask));
    }
    outcome(
        steps <= 300 && scores[0] >= 85.0,
        format!("{steps} steps; DSC noisy {:.2}%, clean {:.2}%", scores[0], scores[1]),
    )
}

// ---------------------------------------------------------------- 7, 8

fn cli_pipeline(dir: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fda"))
        .args(["pipeline", "--preset", "toy", "--seed", "1", "--threads", "1", "--out"])
        .arg(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("pipeline exited with {status}"))
    }
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    for d in [first, second] {
        if let Err(e) = cli_pipeline(d) {
            return outcome(false, e);
        }
    }
    let read = |p: &Path| fs::read(p).unwrap_or_default();
    let ck = |d: &Path| read(&d.join("train").join("ckpt_20.fda"));
    let (a, b) = (ck(first), ck(second));
    let (ma, mb) = (read(&first.join("metrics.json")), read(&second.join("metrics.json")));
    outcome(
        !a.is_empty() && a == b && !ma.is_empty() && ma == mb,
        format!("checkpoint {} bytes identical: {}; metrics identical: {}", a.len(), a == b, ma == mb),
    )
}

fn pipeline_trend(seed1_full: Option<PipelineReport>) -> Outcome {
    let mut full = Vec::new();
    let mut single = Vec::new();
    for seed in 1..=3u64 {
        let report = match (&seed1_full, seed) {
            (Some(r), 1) => r.clone(),
            _ => run_pipeline(&PipelineConfig::toy(seed), None, |_| {}).unwrap().report,
        };
        full.push(report.mean);
        let mut cfg = PipelineConfig::toy(seed);
        cfg.train.model.use_noisy_stream = false;
        single.push(run_pipeline(&cfg, None, |_| {}).unwrap().report.mean);
    }
    let avg = |v: &[fda::metrics::MeanMetrics], f: fn(&fda::metrics::MeanMetrics) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (fl, fb, fd) = (avg(&full, |m| m.length_rate), avg(&full, |m| m.branch_rate), avg(&full, |m| m.dsc));
    let (sl, sb, sd) = (avg(&single, |m| m.length_rate), avg(&single, |m| m.branch_rate), avg(&single, |m| m.dsc));
    let ordered = fl >= sl && fb >= sb;
    outcome(
        ordered,
        format!(
            "dual-stream (Length {fl:.2}, Branch {fb:.2}, DSC {fd:.2}) vs single-stream (Length {sl:.2}, Branch {sb:.2}, DSC {sd:.2})"
        ),
    )
}

// ----------------------------------------------------------------

fn report(id: u32, name: &str, limit: Duration, start: Instant, o: Outcome, fatal: bool) -> bool {
    let took = start.elapsed();
    let in_time = took <= limit;
    let pass = o.pass && in_time;
    let verdict = match (pass, fatal) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (flagged, non-fatal)",
    };
    let time_note = if in_time { String::new() } else { format!(" exceeded limit of {limit:?};") };
    println!("{verdict} [{id}] {name}: {}.{time_note} ({:.1}s)", o.detail, took.as_secs_f64());
    pass || !fatal
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: u32| wanted.is_empty() || wanted.contains(&i);
    let mut ok = true;
    let mins = |m: u64| Duration::from_secs(60 * m);

    if want(1) {
        let t = Instant::now();
        ok &= report(1, "sdm oracle equivalence", Duration::from_secs(30), t, sdm_oracle(), true);
    }
    if want(2) {
        let t = Instant::now();
        ok &= report(2, "gradient suite", mins(2), t, gradient_suite(), true);
    }
    if want(3) {
        let t = Instant::now();
        ok &= report(3, "loss identities", mins(1), t, loss_identities(), true);
    }
    if want(4) {
        let t = Instant::now();
        ok &= report(4, "cse zero-weight identity", mins(1), t, cse_zero_weights(), true);
    }
    if want(5) {
        let t = Instant::now();
        ok &= report(5, "metrics oracles", mins(5), t, metrics_oracles(), true);
    }
    if want(6) {
        let t = Instant::now();
        ok &= report(6, "overfit one pair", mins(10), t, overfit(), true);
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let (first, second) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    if want(8) {
        let t = Instant::now();
        ok &= report(8, "pipeline determinism", mins(30), t, determinism(&first, &second), true);
    }
    if want(7) {
        let t = Instant::now();
        let seed1 = fs::read(first.join("metrics.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<PipelineReport>(&b).ok());
        report(7, "pipeline trend over 3 seeds", mins(60), t, pipeline_trend(seed1), false);
    }
    if !ok {
        std::process::exit(1);
    }
}
