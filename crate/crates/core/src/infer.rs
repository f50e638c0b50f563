//! Whole-volume prediction by overlapping tiles, and binarisation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor5;
use crate::error::{FdaError, Result};
use crate::model::FdaModel;
use crate::volcore::{largest_component, Connectivity, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { patch: [32; 3], stride: [16; 3], threshold: 0.5 }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| self.stride[k] == 0 || self.stride[k] > self.patch[k]) {
            return Err(FdaError::Config(format!(
                "stride {:?} must be positive and at most the patch {:?}",
                self.stride, self.patch
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(FdaError::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Tile origins along one axis: multiples of `stride`, with the last tile
/// flush against the far edge.
pub fn tile_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let last = dim - patch;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Averages per-tile predictions of `data` (shape `shape`, already scaled for
/// the network) into a full volume. Volumes smaller than the patch along an
/// axis are reflect-padded and cropped back. Tiles are evaluated in parallel
/// but summed in a fixed order, so the result does not depend on scheduling.
pub fn predict_tiled<F>(data: &[f32], shape: [usize; 3], cfg: &InferConfig, predict: F) -> Result<Vec<f32>>
where
    F: Fn(&Tensor5<f32>) -> Result<Tensor5<f32>> + Sync,
{
    cfg.validate()?;
    if data.len() != shape.iter().product::<usize>() || data.is_empty() {
        return Err(FdaError::Shape(format!("volume data does not match shape {shape:?}")));
    }
    // working grid: at least one patch along every axis
    let grid: [usize; 3] = std::array::from_fn(|k| shape[k].max(cfg.patch[k]));
    let padded: Vec<f32> = if grid == shape {
        data.to_vec()
    } else {
        let mut v = Vec::with_capacity(grid.iter().product());
        for z in 0..grid[0] {
            for y in 0..grid[1] {
                for x in 0..grid[2] {
                    let (sz, sy, sx) = (reflect(z, shape[0]), reflect(y, shape[1]), reflect(x, shape[2]));
                    v.push(data[(sz * shape[1] + sy) * shape[2] + sx]);
                }
            }
        }
        v
    };
    let axes: Vec<Vec<usize>> = (0..3).map(|k| tile_origins(grid[k], cfg.patch[k], cfg.stride[k])).collect();
    let mut tiles = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                tiles.push([z, y, x]);
            }
        }
    }
    let [pd, ph, pw] = cfg.patch;
    let gn: usize = grid.iter().product();
    let mut sum = vec![0.0f64; gn];
    let mut count = vec![0u32; gn];
    let batch = rayon::current_num_threads().max(1) * 2;
    for chunk in tiles.chunks(batch) {
        let outs: Vec<Result<Tensor5<f32>>> = chunk
            .par_iter()
            .map(|o| {
                let mut t = Vec::with_capacity(pd * ph * pw);
                for z in o[0]..o[0] + pd {
                    for y in o[1]..o[1] + ph {
                        let row = (z * grid[1] + y) * grid[2];
                        t.extend_from_slice(&padded[row + o[2]..row + o[2] + pw]);
                    }
                }
                predict(&Tensor5::new([1, 1, pd, ph, pw], t)?)
            })
            .collect();
        for (o, out) in chunk.iter().zip(outs) {
            let out = out?;
            if out.shape() != [1, 1, pd, ph, pw] {
                return Err(FdaError::Shape(format!("tile prediction has shape {:?}", out.shape())));
            }
            let mut i = 0;
            for z in o[0]..o[0] + pd {
                for y in o[1]..o[1] + ph {
                    let row = (z * grid[1] + y) * grid[2];
                    for x in o[2]..o[2] + pw {
                        sum[row + x] += out.data()[i] as f64;
                        count[row + x] += 1;
                        i += 1;
                    }
                }
            }
        }
    }
    let mut result = Vec::with_capacity(data.len());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let j = (z * grid[1] + y) * grid[2] + x;
                result.push((sum[j] / count[j] as f64) as f32);
            }
        }
    }
    Ok(result)
}

/// Probability map of the noisy path over a clamp-normalised image volume
/// (values in `[0, 255]`).
pub fn sliding_window_predict(model: &FdaModel, image: &Volume, cfg: &InferConfig) -> Result<Volume> {
    if image.kind() != VolumeKind::Image {
        return Err(FdaError::InvalidVolume("sliding_window_predict expects an image volume".into()));
    }
    let d = model.config.divisor();
    if cfg.patch.iter().any(|p| p % d != 0) {
        return Err(FdaError::Config(format!("patch {:?} must be divisible by {d}", cfg.patch)));
    }
    let data: Vec<f32> = image.as_f32()?.iter().map(|v| v / 255.0).collect();
    let prob = predict_tiled(&data, image.shape(), cfg, |t| model.predict_noisy(t))?;
    Volume::image(image.shape(), image.spacing(), prob)
}

/// Thresholds a probability map and keeps the largest 26-connected
/// component.
pub fn postprocess(prob: &Volume, threshold: f64) -> Result<Volume> {
    let p = prob.as_f32()?;
    let bin: Vec<u8> = p.iter().map(|&v| u8::from(v as f64 >= threshold)).collect();
    let m = Volume::mask(prob.shape(), prob.spacing(), bin)?;
    largest_component(&m, Connectivity::TwentySix)
}
