//! Signed-distance regression loss, Dice + focal segmentation loss, and
//! their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Real, Tape, Tensor5, Values, Var};
use crate::error::{FdaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalMode {
    /// `p` is read as the probability of the voxel's true class.
    #[default]
    TwoSided,
    /// `(1 - p)^2 log p` on every voxel regardless of its label.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub reduction: Reduction,
    pub dice_eps: f64,
    pub prob_clip: f64,
    pub focal_gamma: f64,
    pub focal_mode: FocalMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            reduction: Reduction::Mean,
            dice_eps: 1e-5,
            prob_clip: 1e-6,
            focal_gamma: 2.0,
            focal_mode: FocalMode::TwoSided,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(FdaError::Config(format!("prob_clip must lie in (0, 0.5), got {}", self.prob_clip)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(FdaError::Config(format!("dice_eps must be positive, got {}", self.dice_eps)));
        }
        if self.focal_gamma != 2.0 {
            return Err(FdaError::Config("focal_gamma is fixed at 2".into()));
        }
        Ok(())
    }
}

/// A scalar loss on the tape plus its two terms for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub value: Var,
    pub first: f64,
    pub second: f64,
}

fn check_shapes(op: &str, a: [usize; 5], b: [usize; 5]) -> Result<()> {
    if a != b {
        return Err(FdaError::Shape(format!("{op}: prediction {a:?} and target {b:?} differ")));
    }
    Ok(())
}

/// `f y / (f y + f^2 + y^2)`, 0 where the denominator vanishes.
pub fn sign_ratio(f: f64, y: f64) -> f64 {
    let den = f * y + f * f + y * y;
    if den == 0.0 {
        0.0
    } else {
        f * y / den
    }
}

fn sign_ratio_grad(f: f64, y: f64) -> f64 {
    let den = f * y + f * f + y * y;
    if den == 0.0 {
        0.0
    } else {
        y * (y * y - f * f) / (den * den)
    }
}

struct RegBackward {
    f: Var,
    target: Vec<f64>,
    scale: f64,
}

impl<T: Real> Backward<T> for RegBackward {
    fn inputs(&self) -> Vec<Var> {
        vec![self.f]
    }

    fn backward(&self, values: &Values<'_, T>, _out: &Tensor5<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = grad[0].f64() * self.scale;
        let dx = values
            .get(self.f)
            .data()
            .iter()
            .zip(&self.target)
            .map(|(f, &y)| {
                let f = f.f64();
                let l1 = if f > y {
                    1.0
                } else if f < y {
                    -1.0
                } else {
                    0.0
                };
                T::of(g * (l1 - sign_ratio_grad(f, y)))
            })
            .collect();
        vec![Some(dx)]
    }
}

/// `R(sum |f - y|) - R(sum f y / (f y + f^2 + y^2))` where `R` is the
/// configured reduction, applied to both terms.
pub fn l_reg<T: Real>(tape: &mut Tape<T>, f: Var, y: &Tensor5<T>, cfg: &LossConfig) -> Result<LossTerms> {
    check_shapes("l_reg", tape.shape(f), y.shape())?;
    let target: Vec<f64> = y.data().iter().map(|v| v.f64()).collect();
    let n = target.len().max(1) as f64;
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n,
    };
    let mut l1 = 0.0;
    let mut ratio = 0.0;
    for (fv, &yv) in tape.value(f).data().iter().zip(&target) {
        let fv = fv.f64();
        l1 += (fv - yv).abs();
        ratio += sign_ratio(fv, yv);
    }
    let (l1, ratio) = (l1 * scale, -ratio * scale);
    let value = tape.push(Tensor5::scalar(T::of(l1 + ratio)), Box::new(RegBackward { f, target, scale }));
    Ok(LossTerms { value, first: l1, second: ratio })
}

struct SegBackward {
    p: Var,
    target: Vec<f64>,
    cfg: LossConfig,
}

/// True-class probability of a voxel and `d q / d p`.
fn true_class(p: f64, g: f64, mode: FocalMode) -> (f64, f64) {
    match mode {
        FocalMode::TwoSided if g < 0.5 => (1.0 - p, -1.0),
        _ => (p, 1.0),
    }
}

fn seg_sums(p: &[f64], g: &[f64]) -> (f64, f64) {
    let mut pg = 0.0;
    let mut den = 0.0;
    for (p, g) in p.iter().zip(g) {
        pg += p * g;
        den += p + g;
    }
    (pg, den)
}

impl<T: Real> Backward<T> for SegBackward {
    fn inputs(&self) -> Vec<Var> {
        vec![self.p]
    }

    fn backward(&self, values: &Values<'_, T>, _out: &Tensor5<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let up = grad[0].f64();
        let p: Vec<f64> = values.get(self.p).data().iter().map(|v| v.f64()).collect();
        let (pg, den) = seg_sums(&p, &self.target);
        let e = self.cfg.dice_eps;
        let num = 2.0 * pg + e;
        let den = den + e;
        let n = p.len().max(1) as f64;
        let (lo, hi) = (self.cfg.prob_clip, 1.0 - self.cfg.prob_clip);
        let dx = p
            .iter()
            .zip(&self.target)
            .map(|(&p, &g)| {
                let dice = -(2.0 * g * den - num) / (den * den);
                let focal = if p > lo && p < hi {
                    let (q, dq) = true_class(p, g, self.cfg.focal_mode);
                    let dt = -2.0 * (1.0 - q) * q.ln() + (1.0 - q) * (1.0 - q) / q;
                    -dt * dq / n
                } else {
                    0.0
                };
                T::of(up * (dice + focal))
            })
            .collect();
        vec![Some(dx)]
    }
}

/// `-(2 sum p g + eps) / (sum (p + g) + eps) - (1/N) sum (1 - q)^2 log q`
/// where `q` is the clipped probability (see [`FocalMode`]).
pub fn l_seg<T: Real>(tape: &mut Tape<T>, p: Var, g: &Tensor5<T>, cfg: &LossConfig) -> Result<LossTerms> {
    check_shapes("l_seg", tape.shape(p), g.shape())?;
    let target: Vec<f64> = g.data().iter().map(|v| v.f64()).collect();
    let pv: Vec<f64> = tape.value(p).data().iter().map(|v| v.f64()).collect();
    let (dice, focal) = seg_terms(&pv, &target, cfg);
    let value = tape.push(Tensor5::scalar(T::of(dice + focal)), Box::new(SegBackward { p, target, cfg: *cfg }));
    Ok(LossTerms { value, first: dice, second: focal })
}

/// Dice and focal terms of [`l_seg`] evaluated without a tape.
pub fn seg_terms(p: &[f64], g: &[f64], cfg: &LossConfig) -> (f64, f64) {
    let (pg, den) = seg_sums(p, g);
    let dice = -(2.0 * pg + cfg.dice_eps) / (den + cfg.dice_eps);
    let n = p.len().max(1) as f64;
    let mut focal = 0.0;
    for (&p, &g) in p.iter().zip(g) {
        let pc = p.clamp(cfg.prob_clip, 1.0 - cfg.prob_clip);
        let (q, _) = true_class(pc, g, cfg.focal_mode);
        focal += (1.0 - q) * (1.0 - q) * q.ln();
    }
    (dice, -focal / n)
}

/// `L_seg + L_reg`.
pub fn l_total<T: Real>(tape: &mut Tape<T>, seg: Var, reg: Var) -> Result<Var> {
    tape.add(seg, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};

    fn vol(data: Vec<f64>) -> Tensor5<f64> {
        let n = data.len();
        Tensor5::new([1, 1, 1, 1, n], data).unwrap()
    }

    #[test]
    fn reg_perfect_and_degenerate() {
        let cfg = LossConfig { reduction: Reduction::Sum, ..Default::default() };
        let y = vol(vec![0.3, -0.7, 0.9, -0.1]);
        let mut t = Tape::new();
        let f = t.constant(y.clone());
        let l = l_reg(&mut t, f, &y, &cfg).unwrap();
        assert_eq!(l.first, 0.0);
        assert!((l.second + 4.0 / 3.0).abs() < 1e-12);

        let z = vol(vec![0.0; 5]);
        let f = t.constant(z.clone());
        let l = l_reg(&mut t, f, &z, &cfg).unwrap();
        assert_eq!(t.value(l.value).item(), 0.0);
    }

    #[test]
    fn reg_wrong_sign_is_two_n() {
        let cfg = LossConfig { reduction: Reduction::Sum, ..Default::default() };
        let y = vol(vec![0.5, -0.5, 0.5, 0.5, -0.5, 0.5]);
        let f = vol(y.data().iter().map(|v| -v).collect());
        let mut t = Tape::new();
        let fv = t.constant(f);
        let l = l_reg(&mut t, fv, &y, &cfg).unwrap();
        assert!((t.value(l.value).item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn seg_hand_cases() {
        let cfg = LossConfig::default();
        let (d, f) = seg_terms(&[0.5; 10], &[1.0; 10], &cfg);
        assert!((d + 2.0 / 3.0).abs() < 1e-5);
        assert!((f - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);

        let g = [1.0, 0.0, 1.0, 0.0];
        let (d, f) = seg_terms(&g, &g, &cfg);
        assert!((d + 1.0).abs() < 1e-9);
        assert!(f < 1e-4);

        // dice_eps / (N prob_clip + dice_eps) vanishes once N prob_clip >> dice_eps
        let (d, f) = seg_terms(&vec![1e-6; 100_000], &vec![0.0; 100_000], &cfg);
        assert!(d.abs() < 1e-3);
        assert!(f.abs() < 1e-9);
    }

    #[test]
    fn loss_gradients_match_differences() {
        let cfg = LossConfig::default();
        let y = vol((0..12).map(|i| ((i as f64) * 0.9).sin() * 0.8).collect());
        let f = vol((0..12).map(|i| ((i as f64) * 1.3 + 0.4).cos() * 0.7).collect());
        let r = grad_check(
            "l_reg",
            |t, v| Ok(l_reg(t, v[0], &y, &cfg)?.value),
            &[f],
            &[true],
            &GradCheckConfig::f64_mode(),
        )
        .unwrap();
        assert!(r.pass, "{r:?}");

        for mode in [FocalMode::TwoSided, FocalMode::Literal] {
            let cfg = LossConfig { focal_mode: mode, ..Default::default() };
            let g = vol((0..12).map(|i| (i % 3 == 0) as u8 as f64).collect());
            let p = vol((0..12).map(|i| 0.1 + 0.07 * i as f64).collect());
            let r = grad_check(
                "l_seg",
                |t, v| Ok(l_seg(t, v[0], &g, &cfg)?.value),
                &[p],
                &[true],
                &GradCheckConfig::f64_mode(),
            )
            .unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { prob_clip: 0.6, ..Default::default() }.validate().is_err());
        assert!(LossConfig { dice_eps: 0.0, ..Default::default() }.validate().is_err());
    }
}
