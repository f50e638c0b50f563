//! Volume containers, the `.volmeta`/`.volraw` file pair, intensity
//! preprocessing and connected-component utilities.
//!
//! Voxels are stored z-major: `D` is the outermost axis and `W` the innermost,
//! so the flat index of `(z, y, x)` is `(z * H + y) * W + x`.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Default clamp window in Hounsfield units.
pub const HU_LO: f32 = -1200.0;
pub const HU_HI: f32 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
    Sdm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Image(Vec<f32>),
    Mask(Vec<u8>),
    Sdm(Vec<f32>),
}

impl VolumeData {
    pub fn kind(&self) -> VolumeKind {
        match self {
            VolumeData::Image(_) => VolumeKind::Image,
            VolumeData::Mask(_) => VolumeKind::Mask,
            VolumeData::Sdm(_) => VolumeKind::Sdm,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::Image(v) | VolumeData::Sdm(v) => v.len(),
            VolumeData::Mask(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A 3D scalar grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: VolumeData,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: VolumeData) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(FdaError::InvalidVolume(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                n
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(FdaError::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        match &data {
            VolumeData::Mask(m) => {
                if let Some(v) = m.iter().find(|v| **v > 1) {
                    return Err(FdaError::InvalidVolume(format!("mask value {v} not in {{0,1}}")));
                }
            }
            VolumeData::Sdm(s) => {
                if let Some(v) = s.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                    return Err(FdaError::InvalidVolume(format!("sdm value {v} outside [-1,1]")));
                }
            }
            VolumeData::Image(_) => {}
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn image(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, spacing, VolumeData::Image(data))
    }

    pub fn mask(shape: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(shape, spacing, VolumeData::Mask(data))
    }

    pub fn sdm(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, spacing, VolumeData::Sdm(data))
    }

    pub fn zeros_mask(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        let n = shape.iter().product();
        Volume { shape, spacing, data: VolumeData::Mask(vec![0; n]) }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.data.kind()
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Float view of image or SDM data.
    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::Image(v) | VolumeData::Sdm(v) => Ok(v),
            VolumeData::Mask(_) => Err(FdaError::InvalidVolume("expected a float volume, got a mask".into())),
        }
    }

    pub fn as_mask(&self) -> Result<&[u8]> {
        match &self.data {
            VolumeData::Mask(v) => Ok(v),
            other => Err(FdaError::InvalidVolume(format!("expected a mask, got {:?}", other.kind()))),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            VolumeData::Image(v) | VolumeData::Sdm(v) => Ok(v),
            VolumeData::Mask(_) => Err(FdaError::InvalidVolume("expected a float volume, got a mask".into())),
        }
    }

    pub fn into_mask(self) -> Result<Vec<u8>> {
        match self.data {
            VolumeData::Mask(v) => Ok(v),
            other => Err(FdaError::InvalidVolume(format!("expected a mask, got {:?}", other.kind()))),
        }
    }

    pub fn foreground_count(&self) -> usize {
        match &self.data {
            VolumeData::Mask(m) => m.iter().filter(|v| **v != 0).count(),
            _ => 0,
        }
    }
}

/// Contents of the `.volmeta` JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub version: u32,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<serde_json::Value>,
}

/// Resolves `name`, `name.volmeta` or `name.volraw` to the file pair.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".volmeta")
        .or_else(|| s.strip_suffix(".volraw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{base}.volmeta")), PathBuf::from(format!("{base}.volraw")))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    save_volume_with_aux(v, path, None)
}

pub fn save_volume_with_aux(v: &Volume, path: &Path, aux: Option<serde_json::Value>) -> Result<()> {
    let (meta_path, raw_path) = volume_paths(path);
    let header = VolumeHeader {
        version: FORMAT_VERSION,
        shape: v.shape,
        spacing: v.spacing,
        kind: v.kind(),
        aux,
    };
    let meta = serde_json::to_vec_pretty(&header).map_err(|e| FdaError::json("volume header", e))?;
    let raw: Vec<u8> = match &v.data {
        VolumeData::Image(d) | VolumeData::Sdm(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::Mask(d) => d.clone(),
    };
    if let Some(parent) = meta_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| FdaError::io(parent, e))?;
        }
    }
    fs::write(&meta_path, meta).map_err(|e| FdaError::io(&meta_path, e))?;
    fs::write(&raw_path, raw).map_err(|e| FdaError::io(&raw_path, e))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (meta_path, _) = volume_paths(path);
    let bytes = fs::read(&meta_path).map_err(|e| FdaError::io(&meta_path, e))?;
    let header: VolumeHeader = serde_json::from_slice(&bytes)
        .map_err(|e| FdaError::json(meta_path.display().to_string(), e))?;
    if header.version != FORMAT_VERSION {
        return Err(FdaError::InvalidVolume(format!(
            "unsupported volume format version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    Ok(header)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    load_volume_with_header(path).map(|(v, _)| v)
}

pub fn load_volume_with_header(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let header = read_header(path)?;
    let (_, raw_path) = volume_paths(path);
    let raw = fs::read(&raw_path).map_err(|e| FdaError::io(&raw_path, e))?;
    let n: usize = header.shape.iter().product();
    let elem = match header.kind {
        VolumeKind::Mask => 1,
        VolumeKind::Image | VolumeKind::Sdm => 4,
    };
    if raw.len() != n * elem {
        return Err(FdaError::InvalidVolume(format!(
            "raw file holds {} values but header shape {:?} needs {n}",
            raw.len() as f64 / elem as f64,
            header.shape
        )));
    }
    let data = match header.kind {
        VolumeKind::Mask => VolumeData::Mask(raw),
        kind => {
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if kind == VolumeKind::Image {
                VolumeData::Image(vals)
            } else {
                VolumeData::Sdm(vals)
            }
        }
    };
    let v = Volume::new(header.shape, header.spacing, data)?;
    Ok((v, header))
}

/// Clips to `[lo, hi]` and maps linearly onto `[0, 255]`.
pub fn clamp_normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if lo >= hi {
        return Err(FdaError::Config(format!("clamp window lo={lo} must be below hi={hi}")));
    }
    let data = match &v.data {
        VolumeData::Image(d) => d,
        _ => return Err(FdaError::InvalidVolume("clamp_normalize expects an image volume".into())),
    };
    let out = clamp_normalize_slice(data, lo, hi);
    Volume::image(v.shape, v.spacing, out)
}

pub fn clamp_normalize_slice(data: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    let range = hi - lo;
    data.iter().map(|x| (x.clamp(lo, hi) - lo) / range * 255.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nz = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => nz == 1,
                        Connectivity::Eighteen => nz == 1 || nz == 2,
                        Connectivity::TwentySix => nz >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Flat index of the neighbour at `offset`, or `None` when it leaves the grid.
#[inline]
pub fn neighbor(shape: [usize; 3], z: usize, y: usize, x: usize, offset: [isize; 3]) -> Option<usize> {
    let nz = z as isize + offset[0];
    let ny = y as isize + offset[1];
    let nx = x as isize + offset[2];
    if nz < 0 || ny < 0 || nx < 0 || nz >= shape[0] as isize || ny >= shape[1] as isize || nx >= shape[2] as isize {
        return None;
    }
    Some((nz as usize * shape[1] + ny as usize) * shape[2] + nx as usize)
}

#[inline]
pub fn unravel(shape: [usize; 3], i: usize) -> (usize, usize, usize) {
    let x = i % shape[2];
    let y = (i / shape[2]) % shape[1];
    let z = i / (shape[1] * shape[2]);
    (z, y, x)
}

/// Labels foreground components; returns per-voxel labels (0 = background,
/// components numbered from 1 in order of their smallest voxel index) and
/// the size of each component.
pub fn label_components(mask: &[u8], shape: [usize; 3], conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let offsets = conn.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = unravel(shape, i);
            for off in &offsets {
                if let Some(j) = neighbor(shape, z, y, x, *off) {
                    if mask[j] != 0 && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest connected foreground component. Ties go to the
/// component holding the smallest voxel index.
pub fn largest_component(m: &Volume, conn: Connectivity) -> Result<Volume> {
    let mask = m.as_mask()?;
    let (labels, sizes) = label_components(mask, m.shape, conn);
    let mut best: Option<(usize, u32)> = None;
    for (i, &s) in sizes.iter().enumerate() {
        if best.map_or(true, |(bs, _)| s > bs) {
            best = Some((s, i as u32 + 1));
        }
    }
    let out = match best {
        Some((_, keep)) => labels.iter().map(|&l| u8::from(l == keep)).collect(),
        None => vec![0; mask.len()],
    };
    Volume::mask(m.shape, m.spacing, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> [f64; 3] {
        [1.0, 1.0, 1.0]
    }

    #[test]
    fn round_trip_three_shapes() {
        let dir = tempfile::tempdir().unwrap();
        for (k, shape) in [[1, 1, 1], [4, 4, 4], [5, 7, 3]].into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let vols = [
                Volume::image(shape, [0.5, 0.7, 0.82], (0..n).map(|i| i as f32 * -1.25).collect()).unwrap(),
                Volume::mask(shape, unit(), (0..n).map(|i| (i % 3 == 0) as u8).collect()).unwrap(),
                Volume::sdm(shape, unit(), (0..n).map(|i| (i as f32 / n as f32) * 2.0 - 1.0).collect()).unwrap(),
            ];
            for (j, v) in vols.iter().enumerate() {
                let p = dir.path().join(format!("v{k}_{j}"));
                save_volume(v, &p).unwrap();
                let back = load_volume(&p).unwrap();
                assert_eq!(&back, v);
                let raw1 = fs::read(p.with_extension("volraw")).unwrap();
                save_volume(&back, &dir.path().join("again")).unwrap();
                let raw2 = fs::read(dir.path().join("again.volraw")).unwrap();
                assert_eq!(raw1, raw2);
            }
        }
    }

    #[test]
    fn zero_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros_mask([4, 4, 4], unit());
        let p = dir.path().join("zero.volmeta");
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(
            dir.path().join("bad.volmeta"),
            r#"{"version":1,"shape":[2,2,2],"spacing":[1,1,1],"kind":"image"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("bad.volraw"), vec![0u8; 9 * 4]).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(matches!(err, FdaError::InvalidVolume(_)), "{err}");
    }

    #[test]
    fn unknown_kind_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.volmeta"), r#"{"version":1,"shape":[1,1,1],"spacing":[1,1,1],"kind":"label"}"#)
            .unwrap();
        fs::write(dir.path().join("a.volraw"), [0u8]).unwrap();
        assert!(matches!(load_volume(&dir.path().join("a")), Err(FdaError::Json { .. })));

        fs::write(dir.path().join("b.volmeta"), r#"{"version":2,"shape":[1,1,1],"spacing":[1,1,1],"kind":"mask"}"#)
            .unwrap();
        fs::write(dir.path().join("b.volraw"), [0u8]).unwrap();
        assert!(matches!(load_volume(&dir.path().join("b")), Err(FdaError::InvalidVolume(_))));

        assert!(matches!(load_volume(&dir.path().join("missing")), Err(FdaError::Io { .. })));
    }

    #[test]
    fn invariants_enforced_on_construction() {
        assert!(Volume::mask([1, 1, 2], unit(), vec![0, 2]).is_err());
        assert!(Volume::sdm([1, 1, 1], unit(), vec![1.5]).is_err());
        assert!(Volume::image([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::image([2, 1, 1], unit(), vec![0.0]).is_err());
    }

    #[test]
    fn clamp_normalize_values() {
        let v = Volume::image([1, 1, 5], unit(), vec![-1200.0, 600.0, -2000.0, -300.0, 900.0]).unwrap();
        let out = clamp_normalize(&v, HU_LO, HU_HI).unwrap();
        let d = out.as_f32().unwrap();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 255.0);
        assert_eq!(d[2], 0.0);
        assert!((d[3] - 127.5).abs() < 1e-4);
        assert_eq!(d[4], 255.0);
        assert!(clamp_normalize(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn clamp_normalize_idempotent_on_unit_window() {
        let v = Volume::image([1, 1, 4], unit(), vec![-1500.0, -1000.0, 0.0, 800.0]).unwrap();
        let once = clamp_normalize(&v, HU_LO, HU_HI).unwrap();
        let twice = clamp_normalize(&once, 0.0, 255.0).unwrap();
        let thrice = clamp_normalize(&twice, 0.0, 255.0).unwrap();
        for (a, b) in once.as_f32().unwrap().iter().zip(twice.as_f32().unwrap()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(twice, thrice);
    }

    #[test]
    fn largest_component_cases() {
        let shape = [6, 6, 6];
        let mut m = vec![0u8; 216];
        let idx = |z: usize, y: usize, x: usize| (z * 6 + y) * 6 + x;
        // 10-voxel blob
        for i in 0..10 {
            m[idx(i / 5, 0, i % 5)] = 1;
        }
        // 3-voxel blob
        for i in 0..3 {
            m[idx(5, 5, i)] = 1;
        }
        let v = Volume::mask(shape, unit(), m.clone()).unwrap();
        let out = largest_component(&v, Connectivity::TwentySix).unwrap();
        let o = out.as_mask().unwrap();
        assert_eq!(o.iter().filter(|v| **v == 1).count(), 10);
        assert_eq!(o[idx(5, 5, 0)], 0);

        let single = Volume::mask(shape, unit(), {
            let mut s = vec![0u8; 216];
            s[idx(2, 2, 2)] = 1;
            s[idx(3, 3, 3)] = 1;
            s
        })
        .unwrap();
        assert_eq!(largest_component(&single, Connectivity::TwentySix).unwrap(), single);

        let empty = Volume::zeros_mask(shape, unit());
        assert_eq!(largest_component(&empty, Connectivity::TwentySix).unwrap(), empty);
    }

    #[test]
    fn tie_breaks_on_smallest_index() {
        let mut m = vec![0u8; 27];
        m[0] = 1;
        m[26] = 1;
        let v = Volume::mask([3, 3, 3], unit(), m).unwrap();
        let out = largest_component(&v, Connectivity::Six).unwrap();
        assert_eq!(out.as_mask().unwrap()[0], 1);
        assert_eq!(out.as_mask().unwrap()[26], 0);
    }

    #[test]
    fn connectivity_offset_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }
}
