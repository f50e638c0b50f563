//! Finite-difference checks for every differentiable operation, the two
//! losses and the two network paths, run in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cse_block, grad_check, Bound, GradCheckConfig, GradCheckReport, Tape, Tensor5, Var};
use crate::error::{FdaError, Result};
use crate::loss::{l_reg, l_seg, FocalMode, LossConfig};
use crate::model::{group_of, FdaConfig};

type Check = fn(&GradCheckConfig) -> Result<GradCheckReport>;

fn rand_t(rng: &mut ChaCha8Rng, shape: [usize; 5], lo: f64, hi: f64) -> Tensor5<f64> {
    let n = shape.iter().product();
    Tensor5::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and length agree")
}

fn rng(cfg: &GradCheckConfig, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

/// Reduces `y` to a scalar with fixed random weights, so that no output
/// direction is favoured.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(salt);
    let w = rand_t(&mut r, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn unary(name: &str, cfg: &GradCheckConfig, shape: [usize; 5], op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(cfg, name.len() as u64);
    let x = rand_t(&mut r, shape, -2.0, 2.0);
    grad_check(name, |t, v| {
        let y = op(t, v[0])?;
        weighted_sum(t, y, 11)
    }, &[x], &[true], cfg)
}

const SMALL: [usize; 5] = [2, 3, 4, 4, 4];

fn conv3d(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 1);
    let x = rand_t(&mut r, [1, 2, 5, 5, 5], -1.0, 1.0);
    let w = rand_t(&mut r, [3, 2, 3, 3, 3], -0.5, 0.5);
    let b = rand_t(&mut r, [3, 1, 1, 1, 1], -0.5, 0.5);
    grad_check("conv3d", |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
        weighted_sum(t, y, 12)
    }, &[x, w, b], &[true; 3], cfg)
}

fn conv3d_strided(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 2);
    let x = rand_t(&mut r, [1, 2, 6, 6, 6], -1.0, 1.0);
    let w = rand_t(&mut r, [2, 2, 3, 3, 3], -0.5, 0.5);
    grad_check("conv3d_stride2", |t, v| {
        let y = t.conv3d(v[0], v[1], None, 2, 0)?;
        weighted_sum(t, y, 13)
    }, &[x, w], &[true; 2], cfg)
}

fn conv3d_pointwise(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 3);
    let x = rand_t(&mut r, [1, 4, 3, 3, 3], -1.0, 1.0);
    let w = rand_t(&mut r, [2, 4, 1, 1, 1], -0.5, 0.5);
    let b = rand_t(&mut r, [2, 1, 1, 1, 1], -0.5, 0.5);
    grad_check("conv3d_1x1x1", |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), 1, 0)?;
        weighted_sum(t, y, 14)
    }, &[x, w, b], &[true; 3], cfg)
}

fn instance_norm(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 4);
    let x = rand_t(&mut r, SMALL, -2.0, 2.0);
    let g = rand_t(&mut r, [3, 1, 1, 1, 1], 0.5, 1.5);
    let b = rand_t(&mut r, [3, 1, 1, 1, 1], -0.5, 0.5);
    grad_check("instance_norm", |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y, 15)
    }, &[x, g, b], &[true; 3], cfg)
}

fn prelu(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 5);
    let x = rand_t(&mut r, SMALL, -2.0, 2.0);
    let a = rand_t(&mut r, [3, 1, 1, 1, 1], 0.1, 0.4);
    grad_check("prelu", |t, v| {
        let y = t.prelu(v[0], v[1])?;
        weighted_sum(t, y, 16)
    }, &[x, a], &[true; 2], cfg)
}

fn relu(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("relu", cfg, SMALL, |t, x| t.relu(x))
}

fn sigmoid(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("sigmoid", cfg, SMALL, |t, x| t.sigmoid(x))
}

fn tanh(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("tanh", cfg, SMALL, |t, x| t.tanh(x))
}

fn global_avg_pool(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("global_avg_pool", cfg, SMALL, |t, x| t.global_avg_pool(x))
}

fn maxpool3d(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("maxpool3d", cfg, SMALL, |t, x| t.maxpool3d(x, 2, 2))
}

fn upsample_nearest(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("upsample_nearest", cfg, [2, 3, 2, 3, 4], |t, x| t.upsample_nearest(x, 2))
}

fn sum(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("sum", cfg, SMALL, |t, x| t.sum(x))
}

fn mean(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("mean", cfg, SMALL, |t, x| t.mean(x))
}

fn scale(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    unary("scale", cfg, SMALL, |t, x| t.scale(x, -1.75))
}

fn linear(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 6);
    let x = rand_t(&mut r, [4, 8, 1, 1, 1], -1.0, 1.0);
    let w = rand_t(&mut r, [6, 8, 1, 1, 1], -1.0, 1.0);
    let b = rand_t(&mut r, [6, 1, 1, 1, 1], -1.0, 1.0);
    grad_check("linear", |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, 17)
    }, &[x, w, b], &[true; 3], cfg)
}

fn binary(name: &str, cfg: &GradCheckConfig, a: [usize; 5], b: [usize; 5], op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 7 + name.len() as u64);
    let x = rand_t(&mut r, a, -1.5, 1.5);
    let y = rand_t(&mut r, b, -1.5, 1.5);
    grad_check(name, |t, v| {
        let z = op(t, v[0], v[1])?;
        weighted_sum(t, z, 18)
    }, &[x, y], &[true; 2], cfg)
}

fn add(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    binary("add", cfg, SMALL, SMALL, |t, a, b| t.add(a, b))
}

fn mul(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    binary("mul", cfg, SMALL, SMALL, |t, a, b| t.mul(a, b))
}

fn concat_channels(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    binary("concat_channels", cfg, SMALL, [2, 2, 4, 4, 4], |t, a, b| t.concat_channels(a, b))
}

fn scale_broadcast(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    binary("scale_broadcast", cfg, SMALL, [2, 3, 1, 1, 1], |t, a, b| t.scale_broadcast(a, b))
}

fn cse(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 8);
    let u = rand_t(&mut r, [1, 4, 3, 3, 3], -1.0, 1.0);
    let w1 = rand_t(&mut r, [2, 4, 1, 1, 1], -1.0, 1.0);
    let w2 = rand_t(&mut r, [4, 2, 1, 1, 1], -1.0, 1.0);
    grad_check("cse_block", |t, v| {
        let y = cse_block(t, v[0], v[1], v[2])?.out;
        weighted_sum(t, y, 19)
    }, &[u, w1, w2], &[true; 3], cfg)
}

fn conv_in_prelu_cse(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 9);
    let x = rand_t(&mut r, [1, 1, 4, 4, 4], -1.0, 1.0);
    let w = rand_t(&mut r, [4, 1, 3, 3, 3], -0.5, 0.5);
    let g = rand_t(&mut r, [4, 1, 1, 1, 1], 0.5, 1.5);
    let b = rand_t(&mut r, [4, 1, 1, 1, 1], -0.5, 0.5);
    let a = rand_t(&mut r, [4, 1, 1, 1, 1], 0.1, 0.4);
    let w1 = rand_t(&mut r, [2, 4, 1, 1, 1], -1.0, 1.0);
    let w2 = rand_t(&mut r, [4, 2, 1, 1, 1], -1.0, 1.0);
    grad_check("conv_in_prelu_cse", |t, v| {
        let y = t.conv3d(v[0], v[1], None, 1, 1)?;
        let y = t.instance_norm(y, v[2], v[3])?;
        let y = t.prelu(y, v[4])?;
        let y = cse_block(t, y, v[5], v[6])?.out;
        t.sum(y)
    }, &[x, w, g, b, a, w1, w2], &[true; 7], cfg)
}

fn loss_reg(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 10);
    let f = rand_t(&mut r, [1, 1, 4, 4, 4], -0.95, 0.95);
    let y = rand_t(&mut r, [1, 1, 4, 4, 4], -1.0, 1.0);
    let lc = LossConfig::default();
    grad_check("l_reg", |t, v| Ok(l_reg(t, v[0], &y, &lc)?.value), &[f], &[true], cfg)
}

fn seg_check(name: &str, mode: FocalMode, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(cfg, 11 + name.len() as u64);
    let p = rand_t(&mut r, [1, 1, 4, 4, 4], 0.05, 0.95);
    let n = p.numel();
    let g = Tensor5::new(p.shape(), (0..n).map(|_| f64::from(u8::from(r.gen_bool(0.3)))).collect())?;
    let lc = LossConfig { focal_mode: mode, ..Default::default() };
    grad_check(name, |t, v| Ok(l_seg(t, v[0], &g, &lc)?.value), &[p], &[true], cfg)
}

fn loss_seg(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    seg_check("l_seg", FocalMode::TwoSided, cfg)
}

fn loss_seg_literal(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    seg_check("l_seg_literal_focal", FocalMode::Literal, cfg)
}

/// Checks one network path of the toy model on a `1×1×8×8×8` input. The
/// image and every parameter tensor of the used groups are separate inputs,
/// so each gets its share of sampled coordinates.
fn network(name: &str, clean: bool, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let config = FdaConfig::toy();
    let store = config.init_params(cfg.seed)?.cast::<f64>();
    let groups: &[&str] = if clean {
        &["enc_clean", "cse", "dec_clean"]
    } else {
        &["enc_clean", "enc_noisy", "proj", "dec_mix"]
    };
    let mut r = rng(cfg, 20 + u64::from(clean));
    let mut names = Vec::new();
    let mut inputs = vec![rand_t(&mut r, [1, 1, 8, 8, 8], 0.0, 1.0)];
    for (n, t) in store.iter() {
        if !groups.contains(&group_of(n).unwrap_or("")) {
            continue;
        }
        let mut t = t.clone();
        // move norm and activation parameters off their symmetric defaults
        if n.ends_with(".in.g") || n.ends_with(".in.b") || n.ends_with(".prelu.a") || n.ends_with(".head.b") {
            for v in t.data_mut() {
                *v += r.gen_range(-0.2..0.2);
            }
        }
        names.push(n.to_string());
        inputs.push(t);
    }
    let diff = vec![true; inputs.len()];
    grad_check(name, |t, v| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
        let y = if clean { config.forward_clean(t, &p, v[0])? } else { config.forward_noisy(t, &p, v[0])? };
        weighted_sum(t, y, 21)
    }, &inputs, &diff, cfg)
}

fn forward_clean(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    network("forward_clean", true, cfg)
}

fn forward_noisy(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    network("forward_noisy", false, cfg)
}

const SUITE: &[(&str, Check)] = &[
    ("conv3d", conv3d),
    ("conv3d_stride2", conv3d_strided),
    ("conv3d_1x1x1", conv3d_pointwise),
    ("instance_norm", instance_norm),
    ("prelu", prelu),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("global_avg_pool", global_avg_pool),
    ("linear", linear),
    ("maxpool3d", maxpool3d),
    ("upsample_nearest", upsample_nearest),
    ("add", add),
    ("mul", mul),
    ("concat_channels", concat_channels),
    ("scale_broadcast", scale_broadcast),
    ("sum", sum),
    ("mean", mean),
    ("scale", scale),
    ("cse_block", cse),
    ("conv_in_prelu_cse", conv_in_prelu_cse),
    ("l_reg", loss_reg),
    ("l_seg", loss_seg),
    ("l_seg_literal_focal", loss_seg_literal),
    ("forward_clean", forward_clean),
    ("forward_noisy", forward_noisy),
];

pub fn check_names() -> Vec<&'static str> {
    SUITE.iter().map(|(n, _)| *n).collect()
}

pub fn run_check(name: &str, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, f) = SUITE
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| FdaError::Config(format!("unknown gradient check `{name}`; known: {}", check_names().join(", "))))?;
    f(cfg)
}

pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    SUITE.iter().map(|(_, f)| f(cfg)).collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(reports: &[GradCheckReport]) -> String {
    let mut s = format!("{:<22} {:>8} {:>12} {:>6}\n", "check", "coords", "max_rel_err", "result");
    for r in reports {
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<22} {:>8} {:>12.3e} {:>6}\n", r.name, r.checked, r.max_rel_err, verdict));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let cfg = GradCheckConfig::f64_mode();
        for name in check_names().into_iter().filter(|n| !n.starts_with("forward")) {
            let r = run_check(name, &cfg).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(r.checked >= 64, "{r:?}");
        }
        assert!(run_check("nope", &cfg).is_err());
    }
}
