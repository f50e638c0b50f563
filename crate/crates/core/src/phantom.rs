//! Deterministic synthetic airway trees.
//!
//! A phantom is a recursive binary tree of capsules grown downward from the
//! centre of the top face. Clean samples carry a soft lumen/wall profile on a
//! flat parenchyma background; [`corrupt_to_noisy`] overlays blurred patchy
//! opacities and pixel noise while leaving the anatomy untouched.
//!
//! Randomness is drawn from ChaCha streams keyed by `(seed, branch index)`,
//! so a branch's jitter does not depend on the order branches are visited.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::volcore::Volume;

pub const MIN_RADIUS: f64 = 0.7;

fn default_root_length() -> f64 {
    16.0
}
fn default_length_decay() -> f64 {
    0.75
}
fn default_azimuth_jitter() -> f64 {
    20.0
}
fn default_lumen_level() -> f32 {
    -1000.0
}
fn default_wall_thickness() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Number of branching generations; the tree has `2^depth - 1` branches.
    pub depth: u32,
    pub root_radius: f64,
    pub radius_decay: f64,
    pub branch_angle_deg: f64,
    pub seed: u64,
    pub wall_contrast: f32,
    pub background_level: f32,
    #[serde(default = "default_lumen_level")]
    pub lumen_level: f32,
    #[serde(default = "default_root_length")]
    pub root_length: f64,
    #[serde(default = "default_length_decay")]
    pub length_decay: f64,
    #[serde(default = "default_azimuth_jitter")]
    pub azimuth_jitter_deg: f64,
    #[serde(default = "default_wall_thickness")]
    pub wall_thickness: f64,
}

impl PhantomSpec {
    /// 48^3 depth-3 tree used by the toy experiments.
    pub fn toy(seed: u64) -> Self {
        PhantomSpec {
            shape: [48, 48, 48],
            spacing: [1.0, 1.0, 1.0],
            depth: 3,
            root_radius: 3.0,
            radius_decay: 0.7,
            branch_angle_deg: 35.0,
            seed,
            wall_contrast: 600.0,
            background_level: -850.0,
            lumen_level: default_lumen_level(),
            root_length: default_root_length(),
            length_decay: default_length_decay(),
            azimuth_jitter_deg: default_azimuth_jitter(),
            wall_thickness: default_wall_thickness(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(FdaError::Config(format!("phantom shape must be non-empty, got {:?}", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(FdaError::Config("phantom spacing must be positive".into()));
        }
        if self.depth < 1 {
            return Err(FdaError::Config("phantom depth must be at least 1".into()));
        }
        if self.root_radius < 1.0 {
            return Err(FdaError::Config(format!("root_radius {} below 1 voxel", self.root_radius)));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return Err(FdaError::Config(format!("radius_decay {} outside (0,1)", self.radius_decay)));
        }
        if !(self.length_decay > 0.0) || !(self.root_length > 0.0) {
            return Err(FdaError::Config("branch lengths must be positive".into()));
        }
        let deepest = self.root_radius * self.radius_decay.powi(self.depth as i32 - 1);
        if deepest < MIN_RADIUS {
            return Err(FdaError::Phantom(format!(
                "radius underflow: generation {} radius {deepest:.3} < {MIN_RADIUS}",
                self.depth - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub n_patches: usize,
    pub patch_radius_range: [f64; 2],
    pub patch_intensity_range: [f32; 2],
    pub blur_sigma: f64,
    pub gaussian_noise_sigma: f32,
    pub seed: u64,
}

impl NoiseSpec {
    /// Ground-glass-like opacities strong enough to hide small bronchi.
    pub fn toy(seed: u64) -> Self {
        NoiseSpec {
            n_patches: 6,
            patch_radius_range: [3.0, 7.0],
            patch_intensity_range: [250.0, 550.0],
            blur_sigma: 1.5,
            gaussian_noise_sigma: 40.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.patch_radius_range;
        let [i0, i1] = self.patch_intensity_range;
        if !(r0 >= 0.0 && r0 <= r1) || !(i0 >= 0.0 && i0 <= i1) {
            return Err(FdaError::Config("noise ranges must be non-empty and non-negative".into()));
        }
        if !(self.blur_sigma >= 0.0) || !(self.gaussian_noise_sigma >= 0.0) {
            return Err(FdaError::Config("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// One straight branch of the tree, in voxel coordinates `[z, y, x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterlineBranch {
    pub generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: Volume,
    pub mask: Volume,
    pub centerline: Vec<CenterlineBranch>,
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = add(a, scale(ab, t));
    let d = sub(p, q);
    dot(d, d).sqrt()
}

fn branch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn grow_tree(spec: &PhantomSpec) -> Result<(Vec<Capsule>, Vec<CenterlineBranch>)> {
    let [d, h, w] = spec.shape;
    let root_start = [(d - 1) as f64, (h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0];
    let root_dir = [-1.0, 0.0, 0.0];
    let half_angle = spec.branch_angle_deg.to_radians();

    // breadth-first: (start, dir, generation, parent)
    let mut frontier = vec![(root_start, root_dir, 0u32, None::<usize>)];
    let mut capsules = Vec::new();
    let mut branches = Vec::new();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for (start, dir, gen, parent) in frontier {
            let index = capsules.len();
            let radius = spec.root_radius * spec.radius_decay.powi(gen as i32);
            let length = spec.root_length * spec.length_decay.powi(gen as i32);
            let end = add(start, scale(dir, length));
            capsules.push(Capsule { a: start, b: end, radius });
            branches.push(CenterlineBranch { generation: gen, parent, points: vec![start, end] });
            if gen + 1 < spec.depth {
                let mut rng = branch_rng(spec.seed, index);
                let helper = if dir[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
                let u1 = normalize(cross(dir, helper));
                let u2 = cross(dir, u1);
                let jitter = if spec.azimuth_jitter_deg > 0.0 {
                    rng.gen_range(-spec.azimuth_jitter_deg..=spec.azimuth_jitter_deg)
                } else {
                    0.0
                };
                // successive bifurcation planes roughly orthogonal
                let phi = (90.0 * gen as f64 + jitter).to_radians();
                let u = add(scale(u1, phi.cos()), scale(u2, phi.sin()));
                for sign in [1.0, -1.0] {
                    let child = normalize(add(scale(dir, half_angle.cos()), scale(u, sign * half_angle.sin())));
                    next.push((end, child, gen + 1, Some(index)));
                }
            }
        }
        frontier = next;
    }

    for (i, c) in capsules.iter().enumerate() {
        for (k, p) in [c.a, c.b].iter().enumerate() {
            if i == 0 && k == 0 {
                continue;
            }
            for axis in 0..3 {
                let lo = p[axis] - c.radius;
                let hi = p[axis] + c.radius;
                if lo < 0.0 || hi > (spec.shape[axis] - 1) as f64 {
                    return Err(FdaError::Phantom(format!(
                        "branch {i} leaves the volume along axis {axis} ({lo:.2}..{hi:.2} vs 0..{})",
                        spec.shape[axis] - 1
                    )));
                }
            }
        }
    }
    Ok((capsules, branches))
}

/// Voxel path of a polyline: dense sampling rounded to voxel centres, with
/// consecutive duplicates removed. Consecutive voxels are 26-adjacent.
pub fn rasterize_polyline(points: &[[f64; 3]], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = Vec::new();
    let clampi = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    let push = |p: [f64; 3], out: &mut Vec<[usize; 3]>| {
        let v = [clampi(p[0], shape[0]), clampi(p[1], shape[1]), clampi(p[2], shape[2])];
        if out.last() != Some(&v) {
            out.push(v);
        }
    };
    if let Some(first) = points.first() {
        push(*first, &mut out);
    }
    for seg in points.windows(2) {
        let d = sub(seg[1], seg[0]);
        let len = dot(d, d).sqrt();
        let steps = (len / 0.25).ceil().max(1.0) as usize;
        for s in 1..=steps {
            push(add(seg[0], scale(d, s as f64 / steps as f64)), &mut out);
        }
    }
    out
}

/// Builds a clean phantom: image in HU-like units, binary mask and centerline.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let (capsules, centerline) = grow_tree(spec)?;
    let [d, h, w] = spec.shape;
    let n = d * h * w;
    let mut image = vec![spec.background_level; n];
    let mut mask = vec![0u8; n];
    let reach = spec.wall_thickness + 1.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let sd = capsules
                    .iter()
                    .map(|c| point_segment_distance(p, c.a, c.b) - c.radius)
                    .fold(f64::INFINITY, f64::min);
                let i = (z * h + y) * w + x;
                if sd <= 0.0 {
                    mask[i] = 1;
                }
                if sd < reach {
                    let lumen = (0.5 - sd).clamp(0.0, 1.0);
                    let outer = (0.5 - (sd - spec.wall_thickness)).clamp(0.0, 1.0);
                    image[i] = spec.background_level
                        + (spec.lumen_level - spec.background_level) * lumen as f32
                        + spec.wall_contrast * (outer - lumen) as f32;
                }
            }
        }
    }
    for b in &centerline {
        for v in rasterize_polyline(&b.points, spec.shape) {
            mask[(v[0] * h + v[1]) * w + v[2]] = 1;
        }
    }
    Ok(PhantomSample {
        image: Volume::image(spec.shape, spec.spacing, image)?,
        mask: Volume::mask(spec.shape, spec.spacing, mask)?,
        centerline,
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(data: &mut [f64], shape: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let [d, h, w] = shape;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = shape[axis];
        let mut line = vec![0.0; n];
        let starts: Vec<usize> = (0..d * h * w)
            .filter(|&i| {
                let (z, y, x) = crate::volcore::unravel(shape, i);
                [z, y, x][axis] == 0
            })
            .collect();
        for s in starts {
            for (j, l) in line.iter_mut().enumerate() {
                *l = data[s + j * strides[axis]];
            }
            for j in 0..n {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let src = j as isize + t as isize - r;
                    if src >= 0 && (src as usize) < n {
                        acc += kv * line[src as usize];
                    }
                }
                data[s + j * strides[axis]] = acc;
            }
        }
    }
}

/// Adds blurred opacity patches and pixel noise to the image. Mask and
/// centerline are copied unchanged.
pub fn corrupt_to_noisy(s: &PhantomSample, n: &NoiseSpec) -> Result<PhantomSample> {
    n.validate()?;
    let shape = s.image.shape();
    let [d, h, w] = shape;
    let mut image = s.image.as_f32()?.to_vec();

    if n.n_patches > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
        rng.set_stream(1);
        // centres near the airway tree so the opacities actually overlap it
        let (lo, hi) = mask_bbox(s.mask.as_mask()?, shape).unwrap_or(([0; 3], [d - 1, h - 1, w - 1]));
        let mut layer = vec![0.0f64; image.len()];
        for _ in 0..n.n_patches {
            let c: Vec<f64> = (0..3).map(|k| rng.gen_range(lo[k] as f64..=hi[k] as f64)).collect();
            let radius = rng.gen_range(n.patch_radius_range[0]..=n.patch_radius_range[1]);
            let amp = rng.gen_range(n.patch_intensity_range[0]..=n.patch_intensity_range[1]) as f64;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let dz = z as f64 - c[0];
                        let dy = y as f64 - c[1];
                        let dx = x as f64 - c[2];
                        if dz * dz + dy * dy + dx * dx <= radius * radius {
                            layer[(z * h + y) * w + x] += amp;
                        }
                    }
                }
            }
        }
        gaussian_blur(&mut layer, shape, n.blur_sigma);
        for (v, l) in image.iter_mut().zip(&layer) {
            *v += *l as f32;
        }
    }

    if n.gaussian_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
        rng.set_stream(2);
        let normal = Normal::new(0.0f32, n.gaussian_noise_sigma)
            .map_err(|e| FdaError::Config(format!("noise sigma: {e}")))?;
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    Ok(PhantomSample {
        image: Volume::image(shape, s.image.spacing(), image)?,
        mask: s.mask.clone(),
        centerline: s.centerline.clone(),
    })
}

/// Inclusive bounding box of the foreground.
pub fn mask_bbox(mask: &[u8], shape: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &m) in mask.iter().enumerate() {
        if m == 0 {
            continue;
        }
        any = true;
        let (z, y, x) = crate::volcore::unravel(shape, i);
        for (k, v) in [z, y, x].into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    any.then_some((lo, hi))
}
