//! Command-line front end. [`dispatch`] parses arguments, runs one command
//! inside a thread pool of the requested size and writes a run manifest next
//! to the command's outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{write_atomic, Checkpoint, GradCheckConfig};
use crate::data::{load_centerline, load_dataset, save_sample};
use crate::error::{FdaError, Result};
use crate::gradsuite;
use crate::infer::{postprocess, sliding_window_predict, InferConfig};
use crate::metrics::{evaluate, MetricsConfig};
use crate::phantom::{corrupt_to_noisy, generate_phantom, NoiseSpec, PhantomSpec};
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::sdm::{sdm_compute, Normalization, SdmOptions};
use crate::train::{fit_with, model_from_checkpoint, TrainConfig};
use crate::volcore::{clamp_normalize, load_volume, save_volume, save_volume_with_aux, VolumeKind, HU_HI, HU_LO};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fda", version, about = "Dual-stream airway segmentation on synthetic phantoms")]
pub struct Cli {
    /// Worker threads (also read from FDA_THREADS). One thread gives
    /// bit-reproducible runs.
    #[arg(long, global = true, env = "FDA_THREADS", default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic airway phantoms.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Signed distance maps.
    #[command(subcommand)]
    Sdm(SdmCmd),
    /// Train the network on clean and noisy case directories.
    Train(TrainArgs),
    /// Predict an airway mask for one image volume.
    Infer(InferArgs),
    /// Score a predicted mask against a reference.
    Eval(EvalArgs),
    /// Finite-difference checks of every gradient.
    Gradcheck(GradcheckArgs),
    /// Phantoms, training, inference and scoring in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Write `image`, `mask` and `centerline.json` into a directory.
    Gen(PhantomGenArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// PhantomSpec JSON; the toy spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// NoiseSpec JSON; corrupts the phantom when given.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Overrides the seed of the spec (and of the noise).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SdmCmd {
    /// Normalised signed distance map of a mask volume.
    Compute(SdmArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    TwoSided,
    SingleScale,
}

#[derive(Debug, Args)]
pub struct SdmArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Measure distances in millimetres using the voxel spacing.
    #[arg(long)]
    pub spacing_aware: bool,
    #[arg(long, value_enum, default_value = "two-sided")]
    pub normalization: NormArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TrainConfig JSON; the preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub noisy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image volume in Hounsfield units.
    #[arg(long)]
    pub image: PathBuf,
    /// Binary mask after thresholding and largest-component filtering.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
    /// InferConfig JSON (patch, stride, threshold).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub centerline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Centreline fraction a branch needs inside the prediction.
    #[arg(long, default_value_t = 0.8)]
    pub branch_frac: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run every check (the default when no --check is given).
    #[arg(long)]
    pub all: bool,
    /// Run only the named check; repeatable.
    #[arg(long = "check")]
    pub checks: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// List the available checks and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PipelineConfig JSON; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; `runs/<preset>_seed<seed>` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train the single-stream ablation without the noisy encoder.
    #[arg(long)]
    pub no_noisy_stream: bool,
    /// Print every training step.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration as JSON.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub wall_time_s: f64,
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let json = serde_json::to_vec(cfg).map_err(|e| FdaError::json("config", e))?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value).map_err(|e| FdaError::json(path.display().to_string(), e))?;
    json.push(b'\n');
    write_atomic(path, &json)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| FdaError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| FdaError::json(path.display().to_string(), e))
}

/// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json`
/// otherwise.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

struct Finished {
    manifest: Option<(PathBuf, RunManifest)>,
    code: i32,
}

impl Finished {
    fn ok(path: PathBuf, manifest: RunManifest) -> Self {
        Finished { manifest: Some((path, manifest)), code: EXIT_OK }
    }
}

fn manifest<T: Serialize>(command: &str, cfg: &T, seeds: Vec<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.into(),
        config_hash: config_hash(cfg)?,
        seeds,
        inputs,
        outputs,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: 0.0,
    })
}

fn phantom_gen(a: &PhantomGenArgs) -> Result<Finished> {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => PhantomSpec::toy(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let mut sample = generate_phantom(&spec)?;
    let mut noise_cfg = None;
    if let Some(p) = &a.noise {
        let mut n: NoiseSpec = read_json(p)?;
        if let Some(s) = a.seed {
            n.seed = s;
        }
        sample = corrupt_to_noisy(&sample, &n)?;
        noise_cfg = Some(n);
    }
    save_sample(&a.out, &sample)?;
    let inputs = a.spec.iter().chain(&a.noise).cloned().collect();
    let mut seeds = vec![spec.seed];
    seeds.extend(noise_cfg.as_ref().map(|n| n.seed));
    let m = manifest("phantom gen", &(&spec, &noise_cfg), seeds, inputs, vec![a.out.clone()])?;
    println!("wrote phantom with {} branches to {}", sample.centerline.len(), a.out.display());
    Ok(Finished::ok(manifest_path(&a.out, true), m))
}

fn sdm(a: &SdmArgs) -> Result<Finished> {
    let mask = load_volume(&a.mask)?;
    if mask.kind() != VolumeKind::Mask {
        return Err(FdaError::InvalidVolume(format!("{} is not a mask volume", a.mask.display())));
    }
    let opts = SdmOptions {
        spacing_aware: a.spacing_aware,
        normalization: match a.normalization {
            NormArg::TwoSided => Normalization::TwoSided,
            NormArg::SingleScale => Normalization::SingleScale,
        },
    };
    let out = sdm_compute(&mask, opts)?;
    save_volume_with_aux(&out.volume, &a.out, Some(out.aux_json()))?;
    println!("max_in {:.4} max_out {:.4}", out.max_in, out.max_out);
    let m = manifest("sdm compute", &opts, vec![], vec![a.mask.clone()], vec![a.out.clone()])?;
    Ok(Finished::ok(manifest_path(&a.out, false), m))
}

fn train(a: &TrainArgs) -> Result<Finished> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => match a.preset.as_str() {
            "toy" => TrainConfig::toy(),
            "full" => TrainConfig::full(),
            other => return Err(FdaError::Config(format!("unknown preset `{other}`"))),
        },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let clean = load_dataset(&a.clean)?;
    let noisy = load_dataset(&a.noisy)?;
    let total = cfg.epochs * cfg.steps_per_epoch;
    let out = fit_with(&cfg, &clean, &noisy, Some(&a.out), |l| {
        if l.step as usize == total || l.step % 10 == 0 {
            println!("step {:>5} epoch {:>3} l_seg {:.4} l_reg {:.4} lr {:.1e}", l.step, l.epoch, l.l_seg, l.l_reg, l.lr);
        }
    })?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    let m = manifest("train", &cfg, vec![cfg.seed], vec![a.clean.clone(), a.noisy.clone()], out.checkpoints)?;
    Ok(Finished::ok(manifest_path(&a.out, true), m))
}

fn infer(a: &InferArgs) -> Result<Finished> {
    let cfg: InferConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => InferConfig::default(),
    };
    cfg.validate()?;
    let (model, _) = model_from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let image = load_volume(&a.image)?;
    let scaled = clamp_normalize(&image, HU_LO, HU_HI)?;
    let prob = sliding_window_predict(&model, &scaled, &cfg)?;
    let mask = postprocess(&prob, cfg.threshold)?;
    save_volume(&mask, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.prob_out {
        save_volume(&prob, p)?;
        outputs.push(p.clone());
    }
    println!("{} foreground voxels", mask.foreground_count());
    let m = manifest("infer", &cfg, vec![], vec![a.ckpt.clone(), a.image.clone()], outputs)?;
    Ok(Finished::ok(manifest_path(&a.out, false), m))
}

fn eval(a: &EvalArgs) -> Result<Finished> {
    let cfg = MetricsConfig { branch_frac: a.branch_frac, ..MetricsConfig::default() };
    if !(0.0..=1.0).contains(&cfg.branch_frac) {
        return Err(FdaError::Config(format!("branch fraction {} outside [0, 1]", cfg.branch_frac)));
    }
    let pred = load_volume(&a.pred)?;
    let gt = load_volume(&a.gt)?;
    let centerline = a.centerline.as_deref().map(load_centerline).transpose()?;
    let report = evaluate(&pred, &gt, centerline.as_deref(), &cfg)?;
    write_json(&a.out, &report)?;
    println!("Length {:.2}  Branch {:.2}  DSC {:.2}", report.length_rate, report.branch_rate, report.dsc);
    let mut inputs = vec![a.pred.clone(), a.gt.clone()];
    inputs.extend(a.centerline.clone());
    let m = manifest("eval", &cfg, vec![], inputs, vec![a.out.clone()])?;
    Ok(Finished::ok(manifest_path(&a.out, false), m))
}

fn gradcheck(a: &GradcheckArgs) -> Result<Finished> {
    if a.list {
        for n in gradsuite::check_names() {
            println!("{n}");
        }
        return Ok(Finished { manifest: None, code: EXIT_OK });
    }
    let cfg = GradCheckConfig { samples: a.samples, tol: a.tol, seed: a.seed, ..GradCheckConfig::f64_mode() };
    let reports = if a.checks.is_empty() || a.all {
        gradsuite::run_all(&cfg)?
    } else {
        a.checks.iter().map(|n| gradsuite::run_check(n, &cfg)).collect::<Result<Vec<_>>>()?
    };
    print!("{}", gradsuite::format_table(&reports));
    let pass = reports.iter().all(|r| r.pass);
    println!("{}", if pass { "all checks passed" } else { "some checks FAILED" });
    let code = if pass { EXIT_OK } else { EXIT_RUNTIME };
    let manifest = match &a.out {
        Some(out) => {
            write_json(out, &reports)?;
            Some((manifest_path(out, false), manifest("gradcheck", &cfg, vec![a.seed], vec![], vec![out.clone()])?))
        }
        None => None,
    };
    Ok(Finished { manifest, code })
}

fn pipeline(a: &PipelineArgs) -> Result<Finished> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::preset(&a.preset, a.seed)?,
    };
    if a.no_noisy_stream {
        cfg.train.model.use_noisy_stream = false;
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_seed{}", cfg.preset, cfg.seed)));
    write_json(&out.join("pipeline_config.json"), &cfg)?;
    let verbose = a.verbose;
    let result = run_pipeline(&cfg, Some(&out), |l| {
        if verbose {
            println!("step {:>5} epoch {:>3} l_seg {:.4} l_reg {:.4}", l.step, l.epoch, l.l_seg, l.l_reg);
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&result.report).map_err(|e| FdaError::json("metrics report", e))?);
    let mut outputs = vec![out.join("metrics.json")];
    outputs.extend(result.final_checkpoint_path);
    let m = manifest("pipeline", &cfg, vec![cfg.seed], vec![], outputs)?;
    Ok(Finished::ok(manifest_path(&out, true), m))
}

fn run(cmd: &Command) -> Result<Finished> {
    match cmd {
        Command::Phantom(PhantomCmd::Gen(a)) => phantom_gen(a),
        Command::Sdm(SdmCmd::Compute(a)) => sdm(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    let start = Instant::now();
    let outcome = pool.install(|| run(&cli.command)).and_then(|mut f| {
        if let Some((path, m)) = f.manifest.as_mut() {
            m.wall_time_s = start.elapsed().as_secs_f64();
            write_json(path, m)?;
        }
        Ok(f.code)
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
