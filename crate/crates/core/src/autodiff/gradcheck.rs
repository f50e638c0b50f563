//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{FdaError, Result};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates checked per function, split evenly across inputs. All of
    /// them when fewer exist.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { h: 1e-3, tol: 1e-3, samples: 64, seed: 0 }
    }
}

impl GradCheckConfig {
    /// Step for double-precision checks.
    pub fn f64_mode() -> Self {
        GradCheckConfig { h: 1e-6, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub worst: Option<Worst>,
}

pub fn rel_err(a: f64, c: f64) -> f64 {
    (a - c).abs() / (a.abs() + c.abs()).max(1e-8)
}

/// Checks `d f / d inputs` where `f` builds a scalar on the tape from the
/// given input vars. Inputs marked `false` in `differentiable` are held
/// constant and not sampled.
pub fn grad_check<T, F>(
    name: &str,
    f: F,
    inputs: &[Tensor5<T>],
    differentiable: &[bool],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if differentiable.len() != inputs.len() {
        return Err(FdaError::Config("grad_check: one differentiable flag per input".into()));
    }
    let eval = |vals: &[Tensor5<T>], grad: bool| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            vals.iter().zip(differentiable).map(|(v, d)| tape.leaf(v.clone(), grad && *d)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(FdaError::Shape(format!("grad_check `{name}`: function is not scalar-valued")));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs, true)?;
    tape.backward(out)?;

    // Spread the samples evenly over the differentiable inputs so that small
    // tensors are not drowned out by large ones; whatever a small tensor
    // cannot use goes to the larger ones.
    let mut active: Vec<usize> = (0..inputs.len()).filter(|&i| differentiable[i]).collect();
    active.sort_by_key(|&i| (inputs[i].numel(), i));
    let mut quota = vec![0usize; inputs.len()];
    // every input gets at least one coordinate
    let mut left = cfg.samples.max(active.len());
    for (k, &i) in active.iter().enumerate() {
        let share = left.div_ceil(active.len() - k);
        quota[i] = share.min(inputs[i].numel());
        left -= quota[i].min(left);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked: Vec<(usize, usize)> = Vec::new();
    for i in (0..inputs.len()).filter(|&i| differentiable[i]) {
        let n = inputs[i].numel();
        if n <= quota[i] {
            picked.extend((0..n).map(|j| (i, j)));
        } else {
            let mut idx = sample(&mut rng, n, quota[i]).into_vec();
            idx.sort_unstable();
            picked.extend(idx.into_iter().map(|j| (i, j)));
        }
    }

    let mut work = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for &(i, j) in &picked {
        let analytic = tape.grad(vars[i]).map_or(0.0, |g| g.data()[j].f64());
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = T::of(orig.f64() + cfg.h);
        let plus = {
            let (t, _, o) = eval(&work, false)?;
            t.value(o).item().f64()
        };
        work[i].data_mut()[j] = T::of(orig.f64() - cfg.h);
        let minus = {
            let (t, _, o) = eval(&work, false)?;
            t.value(o).item().f64()
        };
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let r = rel_err(analytic, numeric);
        if r > max_rel || worst.is_none() {
            max_rel = max_rel.max(r);
            worst = Some(Worst { input: i, index: j, analytic, numeric });
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: picked.len(),
        max_rel_err: max_rel,
        tol: cfg.tol,
        pass: max_rel <= cfg.tol && max_rel.is_finite(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor5::new([1, 1, 1, 2, 2], vec![0.3, -1.0, 2.0, 4.0]).unwrap();
        let r = grad_check::<f64, _>("sum", |t, v| t.sum(v[0]), &[x], &[true], &GradCheckConfig::f64_mode()).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor5::zeros([1, 1, 2, 2, 2]);
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let s = t.sigmoid(v[0])?;
            t.sum(s)
        };
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let l = f(&mut tape, &[xv]).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(xv).unwrap().data().iter().all(|g| (*g - 0.25).abs() < 1e-15));
        assert!(grad_check("sigmoid", f, &[x], &[true], &GradCheckConfig::f64_mode()).unwrap().pass);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor5::new([1, 1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let r = grad_check::<f64, _>(
            "bad",
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq)?;
                // scale by a forward value without recording the dependency
                let k = t.value(s).item();
                t.scale(s, k)
            },
            &[x],
            &[true],
            &GradCheckConfig::f64_mode(),
        )
        .unwrap();
        assert!(!r.pass);
    }
}
