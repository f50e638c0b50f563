//! Signed Euclidean distance maps of airway masks.
//!
//! The surface `C` is the set of foreground voxels with at least one
//! background 6-neighbour (faces of the grid count as background). Surface
//! voxels map to 0, interior voxels to minus their distance to `C`, and
//! background voxels to plus their distance to `C`.
//!
//! Distances come from a separable lower-envelope transform run once per
//! axis. In voxel units every quantity is an integer and the transform is
//! exact; the spacing-aware variant works in millimetres with `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::volcore::{Volume, VolumeKind};

/// Sentinel for "no site on this line yet".
const INF: i64 = i64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Interior divided by `max_in`, exterior by `max_out`.
    #[default]
    TwoSided,
    /// Everything divided by `max(max_in, max_out)`.
    SingleScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SdmOptions {
    #[serde(default)]
    pub spacing_aware: bool,
    #[serde(default)]
    pub normalization: Normalization,
}

/// A normalised SDM together with the scales that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SdmVolume {
    pub volume: Volume,
    /// Largest unsigned interior distance before normalisation.
    pub max_in: f64,
    /// Largest exterior distance before normalisation.
    pub max_out: f64,
    /// Signed distances before normalisation.
    pub raw: Vec<f64>,
}

impl SdmVolume {
    pub fn values(&self) -> &[f32] {
        self.volume.as_f32().expect("sdm volume holds floats")
    }

    pub fn aux_json(&self) -> serde_json::Value {
        serde_json::json!({ "max_in": self.max_in, "max_out": self.max_out })
    }
}

/// Surface indicator: foreground voxels with a background 6-neighbour.
pub fn surface_indicator(mask: &[u8], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if mask[i] == 0 {
                    continue;
                }
                let bg = |cond: bool, j: usize| cond || mask[j] == 0;
                out[i] = bg(z == 0, i.wrapping_sub(h * w))
                    || bg(z + 1 == d, i + h * w)
                    || bg(y == 0, i.wrapping_sub(w))
                    || bg(y + 1 == h, i + w)
                    || bg(x == 0, i.wrapping_sub(1))
                    || bg(x + 1 == w, i + 1);
            }
        }
    }
    out
}

/// Flat indices of the surface voxels, ascending.
pub fn extract_surface(m: &Volume) -> Result<Vec<usize>> {
    let mask = m.as_mask()?;
    Ok(surface_indicator(mask, m.shape())
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.then_some(i))
        .collect())
}

/// Exact 1D squared-distance envelope `out[q] = min_i f[i] + (q - i)^2` over
/// the finite entries of `f`. Integer floor division keeps it exact.
fn envelope_1d_exact(f: &[i64], out: &mut [i64], sites: &mut Vec<usize>, starts: &mut Vec<i64>) {
    let n = f.len();
    sites.clear();
    starts.clear();
    let eval = |x: i64, i: usize| -> i64 {
        let dx = x - i as i64;
        f[i] + dx * dx
    };
    for u in 0..n {
        if f[u] == INF {
            continue;
        }
        while let (Some(&s), Some(&t)) = (sites.last(), starts.last()) {
            if eval(t, s) > eval(t, u) {
                sites.pop();
                starts.pop();
            } else {
                break;
            }
        }
        match sites.last() {
            None => {
                sites.push(u);
                starts.push(0);
            }
            Some(&s) => {
                let (si, ui) = (s as i64, u as i64);
                let num = ui * ui - si * si + f[u] - f[s];
                let sep = num.div_euclid(2 * (ui - si));
                let w = sep + 1;
                if w < n as i64 {
                    sites.push(u);
                    starts.push(w);
                }
            }
        }
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = INF);
        return;
    }
    let mut k = sites.len() - 1;
    for q in (0..n).rev() {
        out[q] = eval(q as i64, sites[k]);
        if q as i64 == starts[k] && k > 0 {
            k -= 1;
        }
    }
}

/// 1D lower envelope of parabolas `f[i] + (w (q - i))^2` in floating point.
fn envelope_1d_weighted(f: &[f64], weight: f64, out: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * weight;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: Option<usize> = None;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let Some(mut kk) = k else {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = Some(0);
            continue;
        };
        let mut s;
        loop {
            let p = v[kk];
            s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            // z[0] is -inf, so this never underflows
            if s <= z[kk] {
                kk -= 1;
            } else {
                break;
            }
        }
        kk += 1;
        v[kk] = q;
        z[kk] = s;
        z[kk + 1] = f64::INFINITY;
        k = Some(kk);
    }
    if k.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while z[j + 1] < x {
            j += 1;
        }
        let dx = x - pos(v[j]);
        *o = f[v[j]] + dx * dx;
    }
}

fn for_each_line<T: Copy>(field: &mut [T], shape: [usize; 3], axis: usize, mut f: impl FnMut(&[T], &mut [T])) {
    let [d, h, w] = shape;
    let (n, stride) = match axis {
        0 => (d, h * w),
        1 => (h, w),
        _ => (w, 1),
    };
    let starts: Vec<usize> = match axis {
        0 => (0..h * w).collect(),
        1 => (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect(),
        _ => (0..d * h).map(|r| r * w).collect(),
    };
    if n == 0 {
        return;
    }
    let mut line_in = vec![field[0]; n];
    let mut line_out = vec![field[0]; n];
    for s in starts {
        for k in 0..n {
            line_in[k] = field[s + k * stride];
        }
        f(&line_in, &mut line_out);
        for k in 0..n {
            field[s + k * stride] = line_out[k];
        }
    }
}

/// Exact squared distance (voxel units) from every voxel to the nearest site.
/// Every entry is `i64::MAX` when there are no sites at all.
pub fn squared_edt_exact(sites: &[bool], shape: [usize; 3]) -> Vec<i64> {
    let mut field: Vec<i64> = sites.iter().map(|&s| if s { 0 } else { INF }).collect();
    let mut env_sites = Vec::new();
    let mut env_starts = Vec::new();
    for axis in (0..3).rev() {
        for_each_line(&mut field, shape, axis, |inp, out| {
            envelope_1d_exact(inp, out, &mut env_sites, &mut env_starts)
        });
    }
    field
}

/// Squared distance in millimetres with per-axis spacing `[sz, sy, sx]`.
pub fn squared_edt_weighted(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut field: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for axis in (0..3).rev() {
        let w = spacing[axis];
        for_each_line(&mut field, shape, axis, |inp, out| envelope_1d_weighted(inp, w, out));
    }
    field
}

/// Exact signed squared distances: `-d^2` inside, `0` on the surface, `+d^2`
/// outside, in voxel units.
pub fn signed_squared_distances(mask: &[u8], shape: [usize; 3]) -> Result<Vec<i64>> {
    if !mask.iter().any(|&v| v != 0) {
        return Err(FdaError::Empty("signed distance map needs at least one foreground voxel".into()));
    }
    let surface = surface_indicator(mask, shape);
    let sq = squared_edt_exact(&surface, shape);
    Ok(sq
        .iter()
        .zip(mask)
        .zip(&surface)
        .map(|((&d2, &m), &s)| if s { 0 } else if m != 0 { -d2 } else { d2 })
        .collect())
}

/// Signed distance map of `m`, normalised into `[-1, 1]`.
pub fn sdm_compute(m: &Volume, opts: SdmOptions) -> Result<SdmVolume> {
    let mask = m.as_mask()?;
    let shape = m.shape();
    let raw: Vec<f64> = if opts.spacing_aware {
        if !mask.iter().any(|&v| v != 0) {
            return Err(FdaError::Empty("signed distance map needs at least one foreground voxel".into()));
        }
        let surface = surface_indicator(mask, shape);
        squared_edt_weighted(&surface, shape, m.spacing())
            .iter()
            .zip(mask)
            .zip(&surface)
            .map(|((&d2, &mv), &s)| if s { 0.0 } else if mv != 0 { -d2.sqrt() } else { d2.sqrt() })
            .collect()
    } else {
        signed_squared_distances(mask, shape)?
            .iter()
            .map(|&s| (s.unsigned_abs() as f64).sqrt().copysign(s as f64))
            .collect()
    };
    let (values, max_in, max_out) = sdm_normalize(&raw, opts.normalization);
    let volume = Volume::sdm(shape, m.spacing(), values)?;
    Ok(SdmVolume { volume, max_in, max_out, raw })
}

/// Scales raw signed distances into `[-1, 1]`, leaving zeros in place.
/// Returns the normalised values and `(max_in, max_out)`.
pub fn sdm_normalize(raw: &[f64], mode: Normalization) -> (Vec<f32>, f64, f64) {
    let max_in = raw.iter().filter(|v| **v < 0.0).fold(0.0f64, |a, v| a.max(-v));
    let max_out = raw.iter().filter(|v| **v > 0.0).fold(0.0f64, |a, v| a.max(*v));
    let (neg_scale, pos_scale) = match mode {
        Normalization::TwoSided => (max_in, max_out),
        Normalization::SingleScale => {
            let s = max_in.max(max_out);
            (s, s)
        }
    };
    let values = raw
        .iter()
        .map(|&v| {
            let n = if v < 0.0 && neg_scale > 0.0 {
                v / neg_scale
            } else if v > 0.0 && pos_scale > 0.0 {
                v / pos_scale
            } else {
                v
            };
            (n as f32).clamp(-1.0, 1.0)
        })
        .collect();
    (values, max_in, max_out)
}

/// Convenience for training targets: normalised SDM values of a raw mask.
pub fn sdm_target(mask: &[u8], shape: [usize; 3], mode: Normalization) -> Result<Vec<f32>> {
    let raw: Vec<f64> = signed_squared_distances(mask, shape)?
        .iter()
        .map(|&s| (s.unsigned_abs() as f64).sqrt().copysign(s as f64))
        .collect();
    Ok(sdm_normalize(&raw, mode).0)
}

pub fn is_sdm(v: &Volume) -> bool {
    v.kind() == VolumeKind::Sdm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_sq(sites: &[bool], shape: [usize; 3]) -> Vec<i64> {
        let pts: Vec<(i64, i64, i64)> = sites
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(i, _)| {
                let (z, y, x) = crate::volcore::unravel(shape, i);
                (z as i64, y as i64, x as i64)
            })
            .collect();
        (0..sites.len())
            .map(|i| {
                let (z, y, x) = crate::volcore::unravel(shape, i);
                pts.iter()
                    .map(|&(a, b, c)| (z as i64 - a).pow(2) + (y as i64 - b).pow(2) + (x as i64 - c).pow(2))
                    .min()
                    .unwrap_or(INF)
            })
            .collect()
    }

    fn mask_vol(shape: [usize; 3], data: Vec<u8>) -> Volume {
        Volume::mask(shape, [1.0; 3], data).unwrap()
    }

    #[test]
    fn surface_of_single_voxel_and_cube() {
        let mut m = vec![0u8; 125];
        m[62] = 1;
        assert_eq!(extract_surface(&mask_vol([5, 5, 5], m)).unwrap(), vec![62]);

        // 4x4x4 solid cube inside a 6^3 grid: 64 - 8 interior = 56 surface voxels
        let mut c = vec![0u8; 216];
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    c[(z * 6 + y) * 6 + x] = 1;
                }
            }
        }
        assert_eq!(extract_surface(&mask_vol([6, 6, 6], c)).unwrap().len(), 56);

        assert!(extract_surface(&Volume::zeros_mask([3, 3, 3], [1.0; 3])).unwrap().is_empty());
    }

    #[test]
    fn grid_faces_count_as_background() {
        let full = mask_vol([3, 3, 3], vec![1; 27]);
        let s = extract_surface(&full).unwrap();
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&13));
    }

    #[test]
    fn exact_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let shape = [rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9)];
            let n = shape.iter().product();
            let density = rng.gen_range(0.01..0.5);
            let sites: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
            let fast = squared_edt_exact(&sites, shape);
            assert_eq!(fast, brute_force_sq(&sites, shape), "shape {shape:?}");
        }
    }

    #[test]
    fn weighted_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spacing = [1.5, 0.7, 0.5];
        for _ in 0..10 {
            let shape = [rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8)];
            let n = shape.iter().product();
            let sites: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.1)).collect();
            if !sites.iter().any(|s| *s) {
                continue;
            }
            let fast = squared_edt_weighted(&sites, shape, spacing);
            for i in 0..n {
                let (z, y, x) = crate::volcore::unravel(shape, i);
                let mut best = f64::INFINITY;
                for j in (0..n).filter(|j| sites[*j]) {
                    let (a, b, c) = crate::volcore::unravel(shape, j);
                    let dz = (z as f64 - a as f64) * spacing[0];
                    let dy = (y as f64 - b as f64) * spacing[1];
                    let dx = (x as f64 - c as f64) * spacing[2];
                    best = best.min(dz * dz + dy * dy + dx * dx);
                }
                assert!((fast[i] - best).abs() < 1e-9, "{} vs {}", fast[i], best);
            }
        }
    }

    #[test]
    fn single_voxel_neighbours_are_one() {
        let mut m = vec![0u8; 125];
        m[62] = 1;
        let s = sdm_compute(&mask_vol([5, 5, 5], m), SdmOptions::default()).unwrap();
        for off in [1usize, 5, 25] {
            assert_eq!(s.raw[62 + off], 1.0);
            assert_eq!(s.raw[62 - off], 1.0);
        }
        assert_eq!(s.raw[62], 0.0);
        // thin structure: no interior, so nothing negative
        assert_eq!(s.max_in, 0.0);
        assert!(s.values().iter().all(|v| *v >= 0.0));
        assert_eq!(s.values().iter().cloned().fold(f32::MIN, f32::max), 1.0);
    }

    #[test]
    fn normalize_scales_each_side() {
        let raw: Vec<f64> = (-4..=10).map(|v| v as f64).collect();
        let (v, max_in, max_out) = sdm_normalize(&raw, Normalization::TwoSided);
        assert_eq!((max_in, max_out), (4.0, 10.0));
        assert_eq!(v[0], -1.0);
        assert_eq!(*v.last().unwrap(), 1.0);
        assert_eq!(v[4], 0.0);
        let (s, _, _) = sdm_normalize(&raw, Normalization::SingleScale);
        assert_eq!(s[0], -0.4);
        assert_eq!(*s.last().unwrap(), 1.0);
    }

    #[test]
    fn all_foreground_has_no_positive_side() {
        let s = sdm_compute(&mask_vol([3, 3, 3], vec![1; 27]), SdmOptions::default()).unwrap();
        assert_eq!(s.max_out, 0.0);
        assert_eq!(s.values()[13], -1.0);
        assert!(s.values().iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let r = sdm_compute(&Volume::zeros_mask([2, 2, 2], [1.0; 3]), SdmOptions::default());
        assert!(matches!(r, Err(FdaError::Empty(_))));
    }
}
