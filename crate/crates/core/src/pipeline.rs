//! The whole experiment at toy scale: synthesize clean and noisy phantoms,
//! train, predict held-out noisy volumes and score them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{write_atomic, Checkpoint};
use crate::data::{save_sample, Case};
use crate::error::{FdaError, Result};
use crate::infer::{postprocess, predict_tiled, InferConfig};
use crate::metrics::{evaluate, mean_report, MeanMetrics, MetricsConfig, MetricsReport};
use crate::model::FdaModel;
use crate::phantom::{corrupt_to_noisy, generate_phantom, NoiseSpec, PhantomSample, PhantomSpec};
use crate::train::{checkpoint_of, fit_with, LogLine, TrainConfig};
use crate::volcore::{save_volume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    pub n_clean_train: usize,
    pub n_noisy_train: usize,
    pub n_test: usize,
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy(0)
    }
}

impl PipelineConfig {
    pub fn toy(seed: u64) -> Self {
        PipelineConfig {
            preset: "toy".into(),
            seed,
            n_clean_train: 4,
            n_noisy_train: 2,
            n_test: 4,
            phantom: PhantomSpec::toy(0),
            noise: NoiseSpec::toy(0),
            train: TrainConfig { seed, ..TrainConfig::toy() },
            infer: InferConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(seed)),
            "full" => Ok(PipelineConfig {
                preset: "full".into(),
                train: TrainConfig { seed, ..TrainConfig::full() },
                infer: InferConfig { patch: [96; 3], stride: [48; 3], ..InferConfig::default() },
                phantom: PhantomSpec { shape: [128; 3], depth: 5, ..PhantomSpec::toy(0) },
                ..Self::toy(seed)
            }),
            other => Err(FdaError::Config(format!("unknown preset `{other}` (expected toy or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clean_train == 0 || self.n_noisy_train == 0 || self.n_test == 0 {
            return Err(FdaError::Config("pipeline needs clean, noisy and test cases".into()));
        }
        self.phantom.validate()?;
        self.noise.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if (0..3).any(|k| self.train.patch[k] > self.phantom.shape[k]) {
            return Err(FdaError::Config("training patch is larger than the phantom volume".into()));
        }
        Ok(())
    }
}

/// Phantom seeds for each split, derived from the run seed so that the
/// splits never share a tree.
fn split_seed(seed: u64, split: u64, i: usize) -> u64 {
    seed.wrapping_mul(10_007).wrapping_add(split * 1_000 + i as u64)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub clean_train: Vec<PhantomSample>,
    pub noisy_train: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
}

pub fn make_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let tree = |split: u64, i: usize| generate_phantom(&PhantomSpec { seed: split_seed(cfg.seed, split, i), ..cfg.phantom.clone() });
    let noisy = |split: u64, i: usize| -> Result<PhantomSample> {
        let s = tree(split, i)?;
        corrupt_to_noisy(&s, &NoiseSpec { seed: split_seed(cfg.seed, split + 10, i), ..cfg.noise.clone() })
    };
    Ok(Splits {
        clean_train: (0..cfg.n_clean_train).map(|i| tree(0, i)).collect::<Result<_>>()?,
        noisy_train: (0..cfg.n_noisy_train).map(|i| noisy(1, i)).collect::<Result<_>>()?,
        test: (0..cfg.n_test).map(|i| noisy(2, i)).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub preset: String,
    pub seed: u64,
    pub use_noisy_stream: bool,
    pub cases: Vec<CaseReport>,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub model: FdaModel,
    pub final_checkpoint: Checkpoint,
    pub final_checkpoint_path: Option<PathBuf>,
}

/// Noisy-path probability map of a case.
pub fn predict_case(model: &FdaModel, case: &Case, cfg: &InferConfig) -> Result<Volume> {
    let prob = predict_tiled(&case.image, case.shape, cfg, |t| model.predict_noisy(t))?;
    Volume::image(case.shape, case.spacing, prob)
}

/// Runs the experiment. With `out`, phantoms go to `out/data`, checkpoints
/// and the training log to `out/train`, predictions to `out/pred` and the
/// scores to `out/metrics.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>, on_step: impl FnMut(&LogLine)) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    let name = |prefix: &str, i: usize| format!("{prefix}_{i:02}");
    if let Some(dir) = out {
        for (sub, set) in [("train_clean", &splits.clean_train), ("train_noisy", &splits.noisy_train), ("test", &splits.test)] {
            for (i, s) in set.iter().enumerate() {
                save_sample(&dir.join("data").join(sub).join(name("case", i)), s)?;
            }
        }
    }
    let to_cases = |set: &[PhantomSample]| -> Result<Vec<Case>> {
        set.iter().enumerate().map(|(i, s)| Case::from_sample(name("case", i), s)).collect()
    };
    let clean = to_cases(&splits.clean_train)?;
    let noisy = to_cases(&splits.noisy_train)?;
    let test = to_cases(&splits.test)?;

    let train_dir = out.map(|d| d.join("train"));
    let fitted = fit_with(&cfg.train, &clean, &noisy, train_dir.as_deref(), on_step)?;
    let final_checkpoint = checkpoint_of(&fitted.model, &fitted.adam, cfg.train.epochs)?;

    let mut cases = Vec::with_capacity(test.len());
    for (case, sample) in test.iter().zip(&splits.test) {
        let prob = predict_case(&fitted.model, case, &cfg.infer)?;
        let pred = postprocess(&prob, cfg.infer.threshold)?;
        if let Some(dir) = out {
            let pd = dir.join("pred").join(&case.name);
            fs::create_dir_all(&pd).map_err(|e| FdaError::io(&pd, e))?;
            save_volume(&prob, &pd.join("prob"))?;
            save_volume(&pred, &pd.join("mask"))?;
        }
        let report = evaluate(&pred, &sample.mask, Some(&sample.centerline), &cfg.metrics)?;
        cases.push(CaseReport { name: case.name.clone(), report });
    }
    let reports: Vec<MetricsReport> = cases.iter().map(|c| c.report.clone()).collect();
    let report = PipelineReport {
        preset: cfg.preset.clone(),
        seed: cfg.seed,
        use_noisy_stream: cfg.train.model.use_noisy_stream,
        mean: mean_report(&reports),
        cases,
    };
    if let Some(dir) = out {
        let path = dir.join("metrics.json");
        let json = serde_json::to_vec_pretty(&report).map_err(|e| FdaError::json("metrics report", e))?;
        write_atomic(&path, &json)?;
    }
    Ok(PipelineOutcome {
        report,
        model: fitted.model,
        final_checkpoint,
        final_checkpoint_path: fitted.checkpoints.last().cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_distinct_and_seeded() {
        let cfg = PipelineConfig { n_clean_train: 2, n_noisy_train: 1, n_test: 2, ..PipelineConfig::toy(3) };
        let a = make_splits(&cfg).unwrap();
        let b = make_splits(&cfg).unwrap();
        assert_eq!(a.test[1].image, b.test[1].image);
        assert_ne!(a.clean_train[0].mask, a.test[0].mask);
        assert_ne!(a.clean_train[0].mask, a.clean_train[1].mask);
        assert_ne!(a.noisy_train[0].mask, a.test[0].mask);
    }

    #[test]
    fn tiny_run_writes_outputs() {
        let mut cfg = PipelineConfig { n_clean_train: 1, n_noisy_train: 1, n_test: 1, ..PipelineConfig::toy(0) };
        cfg.train.epochs = 1;
        cfg.train.steps_per_epoch = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipeline(&cfg, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(out.report.cases.len(), 1);
        let r = &out.report.cases[0].report;
        assert!((0.0..=100.0).contains(&r.length_rate) && (0.0..=100.0).contains(&r.dsc));
        assert!(dir.path().join("metrics.json").is_file());
        assert!(dir.path().join("train/ckpt_1.fda").is_file());
        assert!(dir.path().join("pred/case_00/prob.volmeta").is_file());
        let on_disk = Checkpoint::load(out.final_checkpoint_path.as_ref().unwrap()).unwrap();
        assert_eq!(on_disk.to_bytes().unwrap(), out.final_checkpoint.to_bytes().unwrap());
    }
}
