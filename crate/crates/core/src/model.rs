//! Dual-stream segmentation network.
//!
//! A shared encoder (`enc_clean`) feeds two paths. The clean path recalibrates
//! every skip and the bottleneck with channel squeeze-and-excitation and
//! decodes a signed distance map (`dec_clean`, tanh head). The noisy path runs
//! the shared encoder and a second one (`enc_noisy`) on the same input,
//! projects each level of both streams with a 1×1×1 convolution, sums them and
//! decodes a probability map (`dec_mix`, sigmoid head).

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cse_block, cse_hidden, glorot_uniform, Bound, ParamStore, Real, Tape, Tensor5, Var};
use crate::error::{FdaError, Result};

pub const GROUPS: [&str; 6] = ["enc_clean", "enc_noisy", "dec_clean", "dec_mix", "proj", "cse"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipSource {
    /// Skips carry the summed projections of both streams.
    #[default]
    Aggregated,
    /// Skips carry only the projected noisy-stream features; the bottleneck
    /// is still aggregated.
    NoisyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdaConfig {
    pub channels: Vec<usize>,
    pub reduction: usize,
    pub in_channels: usize,
    pub preset: String,
    pub use_cse: bool,
    pub use_sdm: bool,
    pub use_noisy_stream: bool,
    pub skip_source: SkipSource,
}

impl Default for FdaConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl FdaConfig {
    pub fn toy() -> Self {
        FdaConfig {
            channels: vec![8, 16, 32, 64],
            reduction: 2,
            in_channels: 1,
            preset: "toy".into(),
            use_cse: true,
            use_sdm: true,
            use_noisy_stream: true,
            skip_source: SkipSource::Aggregated,
        }
    }

    pub fn full() -> Self {
        FdaConfig { channels: vec![32, 64, 128, 256], preset: "full".into(), ..Self::toy() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(FdaError::Config(format!("unknown preset `{other}` (expected toy or full)"))),
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(FdaError::Config("at least one level is required".into()));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FdaError::Config(format!("channels must be positive and strictly increasing: {:?}", self.channels)));
        }
        if self.reduction < 1 {
            return Err(FdaError::Config("cSE reduction must be at least 1".into()));
        }
        if self.in_channels != 1 {
            return Err(FdaError::Config("only single-channel input is supported".into()));
        }
        if !self.use_noisy_stream && self.skip_source == SkipSource::NoisyOnly {
            return Err(FdaError::Config("noisy-only skips need the noisy stream".into()));
        }
        Ok(())
    }

    fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        let d = self.divisor();
        if shape[1] != self.in_channels || shape[2..].iter().any(|&s| s == 0 || s % d != 0) {
            return Err(FdaError::Shape(format!(
                "input {shape:?} must have {} channel(s) and spatial sizes divisible by {d}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 5])> {
        let mut out = Vec::new();
        let ch = &self.channels;
        let block = |out: &mut Vec<(String, [usize; 5])>, prefix: String, cin: usize, cout: usize| {
            out.push((format!("{prefix}.conv.w"), [cout, cin, 3, 3, 3]));
            out.push((format!("{prefix}.in.g"), [cout, 1, 1, 1, 1]));
            out.push((format!("{prefix}.in.b"), [cout, 1, 1, 1, 1]));
            out.push((format!("{prefix}.prelu.a"), [cout, 1, 1, 1, 1]));
        };
        let mut streams = vec!["enc_clean"];
        if self.use_noisy_stream {
            streams.push("enc_noisy");
        }
        for s in &streams {
            for (l, &f) in ch.iter().enumerate() {
                let cin = if l == 0 { self.in_channels } else { ch[l - 1] };
                block(&mut out, format!("{s}.l{l}.b0"), cin, f);
                block(&mut out, format!("{s}.l{l}.b1"), f, f);
            }
        }
        for dec in ["dec_clean", "dec_mix"] {
            for l in (0..ch.len() - 1).rev() {
                block(&mut out, format!("{dec}.l{l}.up"), ch[l + 1], ch[l]);
                block(&mut out, format!("{dec}.l{l}.b0"), 2 * ch[l], ch[l]);
                block(&mut out, format!("{dec}.l{l}.b1"), ch[l], ch[l]);
            }
            out.push((format!("{dec}.head.w"), [1, ch[0], 1, 1, 1]));
            out.push((format!("{dec}.head.b"), [1, 1, 1, 1, 1]));
        }
        for s in &streams {
            let tag = s.trim_start_matches("enc_");
            for (l, &f) in ch.iter().enumerate() {
                out.push((format!("proj.{tag}.l{l}.w"), [f, f, 1, 1, 1]));
            }
        }
        if self.use_cse {
            for (l, &f) in ch.iter().enumerate() {
                let h = cse_hidden(f, self.reduction);
                out.push((format!("cse.l{l}.w1"), [h, f, 1, 1, 1]));
                out.push((format!("cse.l{l}.w2"), [f, h, 1, 1, 1]));
            }
        }
        out
    }

    /// Seeded initial parameters: Glorot-uniform kernels, zero biases, unit
    /// instance-norm scale, zero shift, PReLU slope 0.25.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".in.g") {
                Tensor5::full(shape, 1.0)
            } else if name.ends_with(".in.b") || name.ends_with(".head.b") {
                Tensor5::zeros(shape)
            } else if name.ends_with(".prelu.a") {
                Tensor5::full(shape, 0.25)
            } else {
                glorot_uniform(shape, &mut rng)
            };
            store.insert(name, t)?;
        }
        Ok(store)
    }

    fn block<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let y = tape.conv3d(x, p.var(&format!("{prefix}.conv.w"))?, None, 1, 1)?;
        let y = tape.instance_norm(y, p.var(&format!("{prefix}.in.g"))?, p.var(&format!("{prefix}.in.b"))?)?;
        tape.prelu(y, p.var(&format!("{prefix}.prelu.a"))?)
    }

    /// Per-level encoder features (before pooling); the last is the
    /// bottleneck.
    fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, stream: &str, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.levels());
        let mut cur = x;
        for l in 0..self.levels() {
            if l > 0 {
                cur = tape.maxpool3d(cur, 2, 2)?;
            }
            cur = self.block(tape, p, &format!("{stream}.l{l}.b0"), cur)?;
            cur = self.block(tape, p, &format!("{stream}.l{l}.b1"), cur)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Decodes from `bottleneck` using `skips[l]` at every shallower level and
    /// returns the head's pre-activation.
    fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, dec: &str, skips: &[Var], bottleneck: Var) -> Result<Var> {
        let mut cur = bottleneck;
        for l in (0..self.levels() - 1).rev() {
            let up = tape.upsample_nearest(cur, 2)?;
            let up = self.block(tape, p, &format!("{dec}.l{l}.up"), up)?;
            let cat = tape.concat_channels(skips[l], up)?;
            cur = self.block(tape, p, &format!("{dec}.l{l}.b0"), cat)?;
            cur = self.block(tape, p, &format!("{dec}.l{l}.b1"), cur)?;
        }
        tape.conv3d(cur, p.var(&format!("{dec}.head.w"))?, Some(p.var(&format!("{dec}.head.b"))?), 1, 0)
    }

    /// Clean path: a signed-distance map in (−1, 1), or a probability map
    /// when the SDM head is disabled.
    pub fn forward_clean<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut feats = self.encode(tape, p, "enc_clean", x)?;
        if self.use_cse {
            for (l, f) in feats.iter_mut().enumerate() {
                *f = cse_block(tape, *f, p.var(&format!("cse.l{l}.w1"))?, p.var(&format!("cse.l{l}.w2"))?)?.out;
            }
        }
        let bottleneck = feats[self.levels() - 1];
        let logits = self.decode(tape, p, "dec_clean", &feats, bottleneck)?;
        if self.use_sdm {
            tape.tanh(logits)
        } else {
            tape.sigmoid(logits)
        }
    }

    /// Noisy path: a probability map in (0, 1).
    pub fn forward_noisy<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_noisy_traced(tape, p, x)?.out)
    }

    /// [`forward_noisy`](Self::forward_noisy) exposing the per-level
    /// projections and their sums.
    pub fn forward_noisy_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<NoisyTrace> {
        self.check_input(tape.shape(x))?;
        let clean = self.encode(tape, p, "enc_clean", x)?;
        let noisy = if self.use_noisy_stream { Some(self.encode(tape, p, "enc_noisy", x)?) } else { None };
        let (mut clean_proj, mut noisy_proj, mut aggregated) = (Vec::new(), Vec::new(), Vec::new());
        for l in 0..self.levels() {
            let pc = tape.conv3d(clean[l], p.var(&format!("proj.clean.l{l}.w"))?, None, 1, 0)?;
            clean_proj.push(pc);
            let agg = match &noisy {
                Some(n) => {
                    let pn = tape.conv3d(n[l], p.var(&format!("proj.noisy.l{l}.w"))?, None, 1, 0)?;
                    noisy_proj.push(pn);
                    tape.add(pc, pn)?
                }
                None => pc,
            };
            aggregated.push(agg);
        }
        let skips = match self.skip_source {
            SkipSource::Aggregated => &aggregated,
            SkipSource::NoisyOnly => &noisy_proj,
        };
        let bottleneck = aggregated[self.levels() - 1];
        let logits = self.decode(tape, p, "dec_mix", skips, bottleneck)?;
        let out = tape.sigmoid(logits)?;
        Ok(NoisyTrace { clean_proj, noisy_proj, aggregated, out })
    }
}

#[derive(Debug, Clone)]
pub struct NoisyTrace {
    pub clean_proj: Vec<Var>,
    pub noisy_proj: Vec<Var>,
    pub aggregated: Vec<Var>,
    pub out: Var,
}

/// Group of a parameter name, from its prefix.
pub fn group_of(name: &str) -> Option<&'static str> {
    let head = name.split('.').next()?;
    GROUPS.iter().copied().find(|g| *g == head)
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FdaModel {
    pub config: FdaConfig,
    pub params: ParamStore<f32>,
}

impl FdaModel {
    pub fn new(config: FdaConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(FdaModel { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: FdaConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        let ok = expected.len() == params.len()
            && expected.iter().zip(params.iter()).all(|((en, es), (n, t))| en == n && *es == t.shape());
        if !ok {
            return Err(FdaError::Checkpoint("parameters do not match the model configuration".into()));
        }
        Ok(FdaModel { config, params })
    }

    /// Parameter names per group; every name appears in exactly one group.
    pub fn param_groups(&self) -> IndexMap<&'static str, Vec<String>> {
        let mut groups: IndexMap<&'static str, Vec<String>> = GROUPS.iter().map(|g| (*g, Vec::new())).collect();
        for name in self.params.names() {
            let g = group_of(name).expect("every parameter name starts with a group");
            groups[g].push(name.to_string());
        }
        groups
    }

    /// Inference-only clean path on an `(N, 1, D, H, W)` image.
    pub fn predict_clean(&self, x: &Tensor5<f32>) -> Result<Tensor5<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.config.forward_clean(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Inference-only noisy path on an `(N, 1, D, H, W)` image.
    pub fn predict_noisy(&self, x: &Tensor5<f32>) -> Result<Tensor5<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.config.forward_noisy(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64, s: usize) -> Tensor5<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..s * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor5::new([1, 1, s, s, s], data).unwrap()
    }

    #[test]
    fn shapes_and_ranges() {
        let m = FdaModel::new(FdaConfig::toy(), 0).unwrap();
        let x = input(1, 8);
        let c = m.predict_clean(&x).unwrap();
        let n = m.predict_noisy(&x).unwrap();
        assert_eq!(c.shape(), [1, 1, 8, 8, 8]);
        assert_eq!(n.shape(), [1, 1, 8, 8, 8]);
        assert!(c.data().iter().all(|v| *v > -1.0 && *v < 1.0));
        assert!(n.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(m.predict_clean(&input(1, 12)).is_err());
    }

    #[test]
    fn groups_partition_params() {
        let m = FdaModel::new(FdaConfig::toy(), 0).unwrap();
        let groups = m.param_groups();
        let total: usize = groups.values().map(Vec::len).sum();
        assert_eq!(total, m.params.len());
        assert!(groups.values().all(|g| !g.is_empty()));

        let plain = FdaModel::new(FdaConfig { use_cse: false, use_noisy_stream: false, ..FdaConfig::toy() }, 0).unwrap();
        let g = plain.param_groups();
        assert!(g["cse"].is_empty() && g["enc_noisy"].is_empty());
    }

    #[test]
    fn zero_noisy_stream_matches_single_stream() {
        let full = FdaModel::new(FdaConfig::toy(), 4).unwrap();
        let mut zeroed = full.clone();
        for (name, t) in zeroed.params.iter_mut() {
            if name.starts_with("enc_noisy.") || name.starts_with("proj.noisy.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let cfg = FdaConfig { use_noisy_stream: false, ..FdaConfig::toy() };
        let mut single = ParamStore::new();
        for (name, _) in cfg.param_shapes() {
            single.insert(name.clone(), zeroed.params.get(&name).unwrap().clone()).unwrap();
        }
        let single = FdaModel::from_params(cfg, single).unwrap();
        let x = input(9, 8);
        assert_eq!(zeroed.predict_noisy(&x).unwrap(), single.predict_noisy(&x).unwrap());
    }

    #[test]
    fn aggregation_is_sum_of_projections() {
        let m = FdaModel::new(FdaConfig::toy(), 2).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = m.params.bind(&mut tape, false);
        let x = tape.constant(input(3, 16));
        let tr = m.config.forward_noisy_traced(&mut tape, &p, x).unwrap();
        for l in 0..4 {
            let s: Vec<f32> = tape
                .value(tr.clean_proj[l])
                .data()
                .iter()
                .zip(tape.value(tr.noisy_proj[l]).data())
                .map(|(a, b)| a + b)
                .collect();
            assert_eq!(tape.value(tr.aggregated[l]).data(), &s[..]);
            let side = 16 >> l;
            assert_eq!(tape.shape(tr.aggregated[l]), [1, m.config.channels[l], side, side, side]);
        }
    }

    #[test]
    fn shared_encoder_affects_both_paths() {
        let m = FdaModel::new(FdaConfig::toy(), 5).unwrap();
        let x = input(6, 8);
        let (c0, n0) = (m.predict_clean(&x).unwrap(), m.predict_noisy(&x).unwrap());
        let mut m2 = m.clone();
        m2.params.get_mut("enc_clean.l0.b0.conv.w").unwrap().data_mut()[0] += 0.5;
        assert_ne!(m2.predict_clean(&x).unwrap(), c0);
        assert_ne!(m2.predict_noisy(&x).unwrap(), n0);
    }

    #[test]
    fn config_validation() {
        assert!(FdaConfig { channels: vec![8, 8], ..FdaConfig::toy() }.validate().is_err());
        assert!(FdaConfig { reduction: 0, ..FdaConfig::toy() }.validate().is_err());
        assert!(FdaConfig { use_noisy_stream: false, skip_source: SkipSource::NoisyOnly, ..FdaConfig::toy() }
            .validate()
            .is_err());
        assert!(FdaConfig::preset("huge").is_err());
    }
}
