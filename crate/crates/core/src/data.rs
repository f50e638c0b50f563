//! Case directories: an `image` and `mask` volume pair plus an optional
//! `centerline.json`, and datasets made of such cases.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{FdaError, Result};
use crate::phantom::{CenterlineBranch, PhantomSample};
use crate::volcore::{clamp_normalize_slice, load_volume, save_volume, VolumeKind, HU_HI, HU_LO};

/// One training or evaluation volume, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Clamped, normalised intensities scaled to `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub centerline: Option<Vec<CenterlineBranch>>,
}

/// Network input for raw HU values: the clamp window mapped onto `[0, 255]`
/// and divided by 255.
pub fn network_input(hu: &[f32]) -> Vec<f32> {
    clamp_normalize_slice(hu, HU_LO, HU_HI).into_iter().map(|v| v / 255.0).collect()
}

impl Case {
    pub fn from_sample(name: impl Into<String>, s: &PhantomSample) -> Result<Self> {
        Ok(Case {
            name: name.into(),
            shape: s.image.shape(),
            spacing: s.image.spacing(),
            image: network_input(s.image.as_f32()?),
            mask: s.mask.as_mask()?.to_vec(),
            centerline: Some(s.centerline.clone()),
        })
    }

    /// Reads `<dir>/image`, `<dir>/mask` and, when present,
    /// `<dir>/centerline.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let image = load_volume(&dir.join("image"))?;
        let mask = load_volume(&dir.join("mask"))?;
        if image.kind() != VolumeKind::Image || mask.kind() != VolumeKind::Mask {
            return Err(FdaError::InvalidVolume(format!("{}: expected an image and a mask volume", dir.display())));
        }
        if image.shape() != mask.shape() {
            return Err(FdaError::InvalidVolume(format!(
                "{}: image {:?} and mask {:?} shapes differ",
                dir.display(),
                image.shape(),
                mask.shape()
            )));
        }
        let cl_path = dir.join("centerline.json");
        let centerline = if cl_path.exists() { Some(load_centerline(&cl_path)?) } else { None };
        Ok(Case {
            name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            shape: image.shape(),
            spacing: image.spacing(),
            image: network_input(image.as_f32()?),
            mask: mask.as_mask()?.to_vec(),
            centerline,
        })
    }
}

/// Writes a phantom as a case directory.
pub fn save_sample(dir: &Path, s: &PhantomSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FdaError::io(dir, e))?;
    save_volume(&s.image, &dir.join("image"))?;
    save_volume(&s.mask, &dir.join("mask"))?;
    save_centerline(&dir.join("centerline.json"), &s.centerline)
}

pub fn save_centerline(path: &Path, branches: &[CenterlineBranch]) -> Result<()> {
    let json = serde_json::to_vec_pretty(branches).map_err(|e| FdaError::json("centerline", e))?;
    fs::write(path, json).map_err(|e| FdaError::io(path, e))
}

pub fn load_centerline(path: &Path) -> Result<Vec<CenterlineBranch>> {
    let bytes = fs::read(path).map_err(|e| FdaError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| FdaError::json(path.display().to_string(), e))
}

fn is_case_dir(dir: &Path) -> bool {
    dir.join("image.volmeta").is_file() && dir.join("mask.volmeta").is_file()
}

/// A case directory, or a directory whose sub-directories are cases (read in
/// name order).
pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    if is_case_dir(dir) {
        return Ok(vec![Case::load(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| FdaError::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_case_dir(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(FdaError::Empty(format!("no cases found under {}", dir.display())));
    }
    dirs.iter().map(|d| Case::load(d)).collect()
}
