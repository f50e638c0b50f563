//! Paired clean/noisy training: patch sampling, augmentation, Adam, the
//! step-wise learning-rate schedule, checkpoints and a JSON-lines log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParamStore, Tape, Tensor5};
use crate::data::Case;
use crate::error::{FdaError, Result};
use crate::loss::{l_reg, l_seg, l_total, LossConfig};
use crate::model::{FdaConfig, FdaModel};
use crate::phantom::mask_bbox;
use crate::sdm::{sdm_target, Normalization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rot_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, rot_deg: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub patch: [usize; 3],
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    /// Write `ckpt_<epoch>.fda` every this many epochs (the last epoch is
    /// always written).
    pub checkpoint_every: usize,
    /// Crop centres are drawn from the airway bounding box grown by this
    /// many voxels.
    pub crop_margin: usize,
    pub sdm_normalization: Normalization,
    pub model: FdaConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 20,
            steps_per_epoch: 15,
            lr: 0.002,
            lr_drop_epoch: 17,
            lr_drop_factor: 10.0,
            patch: [32, 32, 32],
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 5,
            crop_margin: 4,
            sdm_normalization: Normalization::TwoSided,
            model: FdaConfig::toy(),
            loss: LossConfig::default(),
        }
    }

    /// Schedule of the full-size setting: 60 epochs, drop at epoch 50.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 60,
            steps_per_epoch: 100,
            lr_drop_epoch: 50,
            patch: [96, 96, 96],
            model: FdaConfig::full(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(FdaError::Config("learning rate and drop factor must be positive".into()));
        }
        let d = self.model.divisor().max(8);
        if self.patch.iter().any(|&p| p == 0 || p % d != 0) {
            return Err(FdaError::Config(format!("patch {:?} must be divisible by {d}", self.patch)));
        }
        if self.checkpoint_every == 0 {
            return Err(FdaError::Config("checkpoint_every must be at least 1".into()));
        }
        if self.augment.rot_deg < 0.0 {
            return Err(FdaError::Config("rotation range must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.lr
    } else {
        cfg.lr / cfg.lr_drop_factor
    }
}

/// A crop of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub case: usize,
    pub origin: [usize; 3],
    pub shape: [usize; 3],
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Patch {
    pub fn image_tensor(&self) -> Tensor5<f32> {
        let [d, h, w] = self.shape;
        Tensor5::new([1, 1, d, h, w], self.image.clone()).expect("patch length matches shape")
    }

    pub fn mask_tensor(&self) -> Tensor5<f32> {
        let [d, h, w] = self.shape;
        Tensor5::new([1, 1, d, h, w], self.mask.iter().map(|&m| m as f32).collect()).expect("patch length matches shape")
    }
}

/// Crops `patch` voxels from `case` with origin `origin`.
pub fn crop(case: &Case, case_index: usize, origin: [usize; 3], patch: [usize; 3]) -> Result<Patch> {
    let [_, h, w] = case.shape;
    if (0..3).any(|k| origin[k] + patch[k] > case.shape[k]) {
        return Err(FdaError::Shape(format!("crop {origin:?}+{patch:?} exceeds volume {:?}", case.shape)));
    }
    let n: usize = patch.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for z in origin[0]..origin[0] + patch[0] {
        for y in origin[1]..origin[1] + patch[1] {
            let row = (z * h + y) * w;
            image.extend_from_slice(&case.image[row + origin[2]..row + origin[2] + patch[2]]);
            mask.extend_from_slice(&case.mask[row + origin[2]..row + origin[2] + patch[2]]);
        }
    }
    Ok(Patch { case: case_index, origin, shape: patch, image, mask })
}

/// Draws a case uniformly and a crop whose centre lies in the airway
/// bounding box grown by `margin`, clamped so the crop stays in bounds.
pub fn sample_patch<R: Rng>(cases: &[Case], patch: [usize; 3], margin: usize, rng: &mut R) -> Result<Patch> {
    if cases.is_empty() {
        return Err(FdaError::Empty("cannot sample from an empty dataset".into()));
    }
    let ci = rng.gen_range(0..cases.len());
    let case = &cases[ci];
    if (0..3).any(|k| case.shape[k] < patch[k]) {
        return Err(FdaError::Shape(format!("case {} {:?} is smaller than the patch {patch:?}", case.name, case.shape)));
    }
    let (lo, hi) = mask_bbox(&case.mask, case.shape).unwrap_or(([0; 3], [case.shape[0] - 1, case.shape[1] - 1, case.shape[2] - 1]));
    let mut origin = [0usize; 3];
    for k in 0..3 {
        let a = lo[k].saturating_sub(margin);
        let b = (hi[k] + margin).min(case.shape[k] - 1);
        let centre = rng.gen_range(a..=b);
        origin[k] = centre.saturating_sub(patch[k] / 2).min(case.shape[k] - patch[k]);
    }
    crop(case, ci, origin, patch)
}

/// One clean and one noisy patch.
pub fn sample_pair<R: Rng>(clean: &[Case], noisy: &[Case], cfg: &TrainConfig, rng: &mut R) -> Result<(Patch, Patch)> {
    let c = sample_patch(clean, cfg.patch, cfg.crop_margin, rng)?;
    let n = sample_patch(noisy, cfg.patch, cfg.crop_margin, rng)?;
    Ok((c, n))
}

fn median(values: &[f32]) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f32::total_cmp).1
}

/// Flips along W and rotates about the z axis by `theta_deg` around the patch
/// centre. The image is resampled bilinearly within each slice, the mask by
/// nearest neighbour. Samples falling outside the patch take `fill` (image)
/// or 0 (mask).
pub fn apply_augment(
    image: &[f32],
    mask: &[u8],
    shape: [usize; 3],
    flip: bool,
    theta_deg: f64,
    fill: f32,
) -> (Vec<f32>, Vec<u8>) {
    let [d, h, w] = shape;
    let (mut img, mut msk) = (image.to_vec(), mask.to_vec());
    if flip {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
        for row in msk.chunks_mut(w) {
            row.reverse();
        }
    }
    if theta_deg == 0.0 {
        return (img, msk);
    }
    let (s, c) = theta_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out_img = vec![fill; img.len()];
    let mut out_msk = vec![0u8; msk.len()];
    for y in 0..h {
        for x in 0..w {
            // inverse rotation: where does output (y, x) come from
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + c * dy - s * dx;
            let sx = cx + s * dy + c * dx;
            let (ny, nx) = (sy.round(), sx.round());
            let nearest = (ny >= 0.0 && ny <= (h - 1) as f64 && nx >= 0.0 && nx <= (w - 1) as f64)
                .then(|| ny as usize * w + nx as usize);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let inside = y0 >= 0.0 && x0 >= 0.0 && y0 + 1.0 <= (h - 1) as f64 && x0 + 1.0 <= (w - 1) as f64;
            for z in 0..d {
                let plane = z * h * w;
                let o = plane + y * w + x;
                if let Some(n) = nearest {
                    out_msk[o] = msk[plane + n];
                }
                if inside {
                    let i00 = plane + y0 as usize * w + x0 as usize;
                    let v = (1.0 - fy) * ((1.0 - fx) * img[i00] as f64 + fx * img[i00 + 1] as f64)
                        + fy * ((1.0 - fx) * img[i00 + w] as f64 + fx * img[i00 + w + 1] as f64);
                    out_img[o] = v as f32;
                } else if let Some(n) = nearest {
                    // on the last row/column: no neighbour to blend with
                    out_img[o] = img[plane + n];
                }
            }
        }
    }
    (out_img, out_msk)
}

/// Random flip (probability 0.5) and rotation in `±rot_deg`. Both draws are
/// always made so the random stream does not depend on the settings.
pub fn augment<R: Rng>(p: &Patch, cfg: &AugmentConfig, rng: &mut R) -> Patch {
    let flip_draw = rng.gen_bool(0.5);
    let theta_draw = rng.gen_range(-1.0..=1.0f64);
    let flip = cfg.flip && flip_draw;
    let theta = theta_draw * cfg.rot_deg;
    let fill = median(&p.image);
    let (image, mask) = apply_augment(&p.image, &p.mask, p.shape, flip, theta, fill);
    Patch { image, mask, ..p.clone() }
}

/// Normalised signed-distance target of a patch mask. A patch without
/// airway is "outside everywhere" (+1).
pub fn sdm_patch_target(mask: &[u8], shape: [usize; 3], mode: Normalization) -> Result<Vec<f32>> {
    if mask.iter().all(|&m| m == 0) {
        return Ok(vec![1.0; mask.len()]);
    }
    sdm_target(mask, shape, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>], lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = cfg.eps as f32;
        for ((((_, p), (_, m)), (_, v)), g) in
            params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(grads)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub l_seg: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub dice: f64,
    pub focal: f64,
}

/// Loss of one pair and the gradient of every parameter, without updating.
pub fn losses_and_grads(
    model: &FdaModel,
    clean: &Patch,
    clean_target: &[f32],
    noisy: &Patch,
    cfg: &TrainConfig,
) -> Result<(StepLosses, Vec<Option<Vec<f32>>>)> {
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape, true);
    let xc = tape.constant(clean.image_tensor());
    let xn = tape.constant(noisy.image_tensor());
    let [d, h, w] = clean.shape;
    let target = Tensor5::new([1, 1, d, h, w], clean_target.to_vec())?;
    let sdm_pred = model.config.forward_clean(&mut tape, &p, xc)?;
    let reg = if model.config.use_sdm {
        l_reg(&mut tape, sdm_pred, &target, &cfg.loss)?
    } else {
        l_seg(&mut tape, sdm_pred, &target, &cfg.loss)?
    };
    let prob = model.config.forward_noisy(&mut tape, &p, xn)?;
    let seg = l_seg(&mut tape, prob, &noisy.mask_tensor(), &cfg.loss)?;
    let total = l_total(&mut tape, seg.value, reg.value)?;
    let losses = StepLosses {
        l_seg: tape.value(seg.value).item() as f64,
        l_reg: tape.value(reg.value).item() as f64,
        l_total: tape.value(total).item() as f64,
        dice: seg.first,
        focal: seg.second,
    };
    if !losses.l_total.is_finite() {
        return Err(FdaError::NonFinite { step: 0, l_seg: losses.l_seg, l_reg: losses.l_reg });
    }
    tape.backward(total)?;
    let grads = p.iter().map(|(_, v)| tape.grad(v).map(|g| g.data().to_vec())).collect();
    Ok((losses, grads))
}

/// Forward, backward and one Adam update on a clean/noisy pair. The clean
/// target is the normalised SDM of the clean mask, or the mask itself when
/// the model has no SDM head.
pub fn train_step(
    model: &mut FdaModel,
    adam: &mut AdamState,
    clean: &Patch,
    noisy: &Patch,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let target = if model.config.use_sdm {
        sdm_patch_target(&clean.mask, clean.shape, cfg.sdm_normalization)?
    } else {
        clean.mask.iter().map(|&m| m as f32).collect()
    };
    let (losses, grads) = losses_and_grads(model, clean, &target, noisy, cfg).map_err(|e| match e {
        FdaError::NonFinite { l_seg, l_reg, .. } => FdaError::NonFinite { step: adam.step as usize + 1, l_seg, l_reg },
        e => e,
    })?;
    adam.update(&mut model.params, &grads, lr, &cfg.adam);
    Ok(losses)
}

/// Random stream for global step `step`, independent of every other step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub epoch: usize,
    pub l_seg: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: FdaModel,
    pub adam: AdamState,
    pub log: Vec<LogLine>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_of(model: &FdaModel, adam: &AdamState, epoch: usize) -> Result<Checkpoint> {
    let cfg = serde_json::to_value(&model.config).map_err(|e| FdaError::json("model config", e))?;
    Checkpoint::new(model.params.clone(), adam.m.clone(), adam.v.clone(), adam.step, epoch as u64, cfg)
}

/// Rebuilds a model (and optimizer state) from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(FdaModel, AdamState)> {
    let config: FdaConfig =
        serde_json::from_value(ck.manifest.model.clone()).map_err(|e| FdaError::json("checkpoint model config", e))?;
    let model = FdaModel::from_params(config, ck.params.clone())?;
    let adam = AdamState { m: ck.m.clone(), v: ck.v.clone(), step: ck.manifest.step };
    Ok((model, adam))
}

/// Runs `epochs × steps_per_epoch` steps. With an output directory it writes
/// `ckpt_0.fda` before the first step, `ckpt_<epoch>.fda` at the configured
/// cadence and `train_log.jsonl`.
pub fn fit(cfg: &TrainConfig, clean: &[Case], noisy: &[Case], out: Option<&Path>) -> Result<FitOutcome> {
    fit_with(cfg, clean, noisy, out, |_| {})
}

/// [`fit`] with a callback per logged step.
pub fn fit_with(
    cfg: &TrainConfig,
    clean: &[Case],
    noisy: &[Case],
    out: Option<&Path>,
    mut on_step: impl FnMut(&LogLine),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if clean.is_empty() || noisy.is_empty() {
        return Err(FdaError::Empty("training needs at least one clean and one noisy case".into()));
    }
    let mut model = FdaModel::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut checkpoints = Vec::new();
    let mut log_file = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| FdaError::io(dir, e))?;
        let path = dir.join("ckpt_0.fda");
        checkpoint_of(&model, &adam, 0)?.save(&path)?;
        checkpoints.push(path);
        let log_path = dir.join("train_log.jsonl");
        log_file = Some((fs::File::create(&log_path).map_err(|e| FdaError::io(&log_path, e))?, log_path));
    }
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for _ in 0..cfg.steps_per_epoch {
            let step = adam.step;
            let mut rng = step_rng(cfg.seed, step);
            let (c, n) = sample_pair(clean, noisy, cfg, &mut rng)?;
            let c = augment(&c, &cfg.augment, &mut rng);
            let n = augment(&n, &cfg.augment, &mut rng);
            let l = train_step(&mut model, &mut adam, &c, &n, lr, cfg)?;
            let line = LogLine {
                step: adam.step,
                epoch,
                l_seg: l.l_seg,
                l_reg: l.l_reg,
                l_total: l.l_total,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some((f, path)) = log_file.as_mut() {
                let json = serde_json::to_string(&line).map_err(|e| FdaError::json("log line", e))?;
                writeln!(f, "{json}").map_err(|e| FdaError::io(path.as_path(), e))?;
            }
            on_step(&line);
            log.push(line);
        }
        let done = epoch + 1;
        if let Some(dir) = out {
            if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
                let path = dir.join(format!("ckpt_{done}.fda"));
                checkpoint_of(&model, &adam, done)?.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(FitOutcome { model, adam, log, checkpoints })
}
