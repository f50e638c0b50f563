//! Element-wise, normalisation, pooling and reshaping primitives.

use crate::error::{FdaError, Result};

use super::tape::{Backward, Tape, Values, Var};
use super::tensor::{Real, Tensor5};

pub const IN_EPS: f64 = 1e-5;

fn same_shape(op: &str, a: [usize; 5], b: [usize; 5]) -> Result<()> {
    if a != b {
        return Err(FdaError::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Pullback built from a closure, for ops whose saved state is small.
struct FnBackward<F> {
    inputs: Vec<Var>,
    f: F,
}

impl<T, F> Backward<T> for FnBackward<F>
where
    T: Real,
    F: Fn(&Values<'_, T>, &Tensor5<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>>,
{
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, values: &Values<'_, T>, output: &Tensor5<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        (self.f)(values, output, grad, needs)
    }
}

fn boxed<T, F>(inputs: Vec<Var>, f: F) -> Box<dyn Backward<T>>
where
    T: Real,
    F: Fn(&Values<'_, T>, &Tensor5<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
{
    Box::new(FnBackward { inputs, f })
}

struct InstanceNormBackward<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for InstanceNormBackward<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, values: &Values<'_, T>, out: &Tensor5<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, ..] = out.shape();
        let s = out.spatial_len();
        let gamma = values.get(self.gamma).data();
        let mut dx = needs[0].then(|| vec![T::zero(); grad.len()]);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let sf = T::of(s as f64);
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                let g = &grad[r.clone()];
                let xh = &self.xhat[r.clone()];
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for (gv, xv) in g.iter().zip(xh) {
                    sum_g += gv.f64();
                    sum_gx += (*gv * *xv).f64();
                }
                dbeta[ch] += T::of(sum_g);
                dgamma[ch] += T::of(sum_gx);
                if let Some(dx) = dx.as_mut() {
                    // dx = gamma * inv_std / S * (S g - sum g - xhat * sum(g xhat))
                    let k = gamma[ch] * self.inv_std[b * c + ch] / sf;
                    let (sg, sgx) = (T::of(sum_g), T::of(sum_gx));
                    for ((d, gv), xv) in dx[r].iter_mut().zip(g).zip(xh) {
                        *d = k * (sf * *gv - sg - *xv * sgx);
                    }
                }
            }
        }
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

struct MaxPoolBackward {
    x: Var,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxPoolBackward {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, values: &Values<'_, T>, _out: &Tensor5<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); values.get(self.x).numel()];
        for (g, &i) in grad.iter().zip(&self.argmax) {
            dx[i] += *g;
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Tape<T> {
    /// Per-(sample, channel) standardisation over space with a learnable
    /// per-channel affine `gamma`, `beta` (each holding `C` values).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, ..] = xv.shape();
        let s = xv.spatial_len();
        if s == 0 {
            return Err(FdaError::Shape("instance_norm: empty spatial extent".into()));
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != c || bv.len() != c {
            return Err(FdaError::Shape(format!("instance_norm: affine needs {c} values per parameter")));
        }
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                let xs = &xv.data()[r.clone()];
                let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / s as f64;
                let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / s as f64;
                let is = 1.0 / (var + IN_EPS).sqrt();
                inv_std[b * c + ch] = T::of(is);
                let (m, ist) = (T::of(mean), T::of(is));
                for ((xh, o), v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(xs) {
                    *xh = (*v - m) * ist;
                    *o = gv[ch] * *xh + bv[ch];
                }
            }
        }
        let value = Tensor5::new(xv.shape(), out)?;
        Ok(self.push(value, Box::new(InstanceNormBackward { x, gamma, beta, xhat, inv_std })))
    }

    /// Parametric ReLU with one learnable slope per channel.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, ..] = xv.shape();
        let s = xv.spatial_len();
        let av = self.value(a).data().to_vec();
        if av.len() != c {
            return Err(FdaError::Shape(format!("prelu: slope needs {c} values, got {}", av.len())));
        }
        let mut out = xv.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            if *o <= T::zero() {
                *o *= av[(i / s) % c];
            }
        }
        let value = Tensor5::new(xv.shape(), out)?;
        let bw = boxed(vec![x, a], move |vals: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], needs: &[bool]| {
            let xd = vals.get(x).data();
            let av = vals.get(a).data();
            let mut dx = needs[0].then(|| vec![T::zero(); g.len()]);
            let mut da = vec![T::zero(); c];
            for i in 0..g.len() {
                let ch = (i / s) % c;
                let pos = xd[i] > T::zero();
                if let Some(dx) = dx.as_mut() {
                    dx[i] = if pos { g[i] } else { g[i] * av[ch] };
                }
                if !pos {
                    da[ch] += g[i] * xd[i];
                }
            }
            let _ = n;
            vec![dx, needs[1].then_some(da)]
        });
        Ok(self.push(value, bw))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor5::new(xv.shape(), out)?;
        let bw = boxed(vec![x], move |vals: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            let xd = vals.get(x).data();
            vec![Some(g.iter().zip(xd).map(|(g, x)| if *x > T::zero() { *g } else { T::zero() }).collect())]
        });
        Ok(self.push(value, bw))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor5::new(xv.shape(), out)?;
        let bw = boxed(vec![x], |_v: &Values<'_, T>, o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            vec![Some(g.iter().zip(o.data()).map(|(g, s)| *g * *s * (T::one() - *s)).collect())]
        });
        Ok(self.push(value, bw))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor5::new(xv.shape(), out)?;
        let bw = boxed(vec![x], |_v: &Values<'_, T>, o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            vec![Some(g.iter().zip(o.data()).map(|(g, t)| *g * (T::one() - *t * *t)).collect())]
        });
        Ok(self.push(value, bw))
    }

    /// Spatial mean per channel: `(N, C, D, H, W) -> (N, C, 1, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, ..] = xv.shape();
        let s = xv.spatial_len();
        let out: Vec<T> = xv
            .data()
            .chunks(s)
            .map(|ch| T::of(ch.iter().map(|v| v.f64()).sum::<f64>() / s as f64))
            .collect();
        let value = Tensor5::new([n, c, 1, 1, 1], out)?;
        let bw = boxed(vec![x], move |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            let inv = T::of(1.0 / s as f64);
            vec![Some(g.iter().flat_map(|gv| std::iter::repeat(*gv * inv).take(s)).collect())]
        });
        Ok(self.push(value, bw))
    }

    /// Affine map of `x (N, Fin, 1, 1, 1)` by `w (Fout, Fin, 1, 1, 1)` and an
    /// optional bias of `Fout` values.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.batch();
        let fin = xv.numel() / n.max(1);
        let [fout, wfin, ..] = wv.shape();
        if wfin != fin || wv.numel() != fout * fin {
            return Err(FdaError::Shape(format!("linear: input has {fin} features, weight is {:?}", wv.shape())));
        }
        if let Some(b) = b {
            if self.value(b).numel() != fout {
                return Err(FdaError::Shape(format!("linear: bias needs {fout} values")));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        for s in 0..n {
            for o in 0..fout {
                let mut acc = b.map_or(T::zero(), |b| self.value(b).data()[o]);
                for i in 0..fin {
                    acc += wv.data()[o * fin + i] * xv.data()[s * fin + i];
                }
                out[s * fout + o] = acc;
            }
        }
        let value = Tensor5::new([n, fout, 1, 1, 1], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let bw = boxed(inputs, move |vals: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], needs: &[bool]| {
            let xd = vals.get(x).data();
            let wd = vals.get(w).data();
            let mut dx = vec![T::zero(); n * fin];
            let mut dw = vec![T::zero(); fout * fin];
            let mut db = vec![T::zero(); fout];
            for s in 0..n {
                for o in 0..fout {
                    let go = g[s * fout + o];
                    db[o] += go;
                    for i in 0..fin {
                        dx[s * fin + i] += go * wd[o * fin + i];
                        dw[o * fin + i] += go * xd[s * fin + i];
                    }
                }
            }
            let mut out = vec![needs[0].then_some(dx), needs[1].then_some(dw)];
            if needs.len() > 2 {
                out.push(needs[2].then_some(db));
            }
            out
        });
        Ok(self.push(value, bw))
    }

    /// Max pooling with cubic window `k` and stride `stride`. Gradient goes to
    /// the first maximal element of each window.
    pub fn maxpool3d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.shape();
        if k == 0 || stride == 0 || d < k || h < k || w < k {
            return Err(FdaError::Shape(format!("maxpool3d: window {k} does not fit {:?}", xv.shape())));
        }
        let (od, oh, ow) = ((d - k) / stride + 1, (h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let xd = xv.data();
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut bi = 0;
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let i = base + ((z * stride + kz) * h + y * stride + ky) * w + xx * stride + kx;
                                    if xd[i] > best {
                                        best = xd[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(bi);
                    }
                }
            }
        }
        let value = Tensor5::new([n, c, od, oh, ow], out)?;
        Ok(self.push(value, Box::new(MaxPoolBackward { x, argmax })))
    }

    /// Nearest-neighbour upsampling by an integer factor on every spatial axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(FdaError::Shape("upsample_nearest: factor must be positive".into()));
        }
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.shape();
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let xd = xv.data();
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    let row = base + ((z / factor) * h + y / factor) * w;
                    for xx in 0..ow {
                        out.push(xd[row + xx / factor]);
                    }
                }
            }
        }
        let value = Tensor5::new([n, c, od, oh, ow], out)?;
        let bw = boxed(vec![x], move |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            let mut dx = vec![T::zero(); n * c * d * h * w];
            let mut i = 0;
            for plane in 0..n * c {
                let base = plane * d * h * w;
                for z in 0..od {
                    for y in 0..oh {
                        let row = base + ((z / factor) * h + y / factor) * w;
                        for xx in 0..ow {
                            dx[row + xx / factor] += g[i];
                            i += 1;
                        }
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(self.push(value, bw))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor5::new(self.shape(a), out)?;
        let bw = boxed(vec![a, b], |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], needs: &[bool]| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        });
        Ok(self.push(value, bw))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor5::new(self.shape(a), out)?;
        let bw = boxed(vec![a, b], move |vals: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], needs: &[bool]| {
            let (ad, bd) = (vals.get(a).data(), vals.get(b).data());
            vec![
                needs[0].then(|| g.iter().zip(bd).map(|(g, y)| *g * *y).collect()),
                needs[1].then(|| g.iter().zip(ad).map(|(g, x)| *g * *x).collect()),
            ]
        });
        Ok(self.push(value, bw))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, d, h, w] = self.shape(a);
        let [nb, cb, db, hb, wb] = self.shape(b);
        if na != nb || [d, h, w] != [db, hb, wb] {
            return Err(FdaError::Shape(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.shape(a),
                self.shape(b)
            )));
        }
        let s = d * h * w;
        let mut out = Vec::with_capacity(na * (ca + cb) * s);
        for n in 0..na {
            out.extend_from_slice(&self.value(a).data()[n * ca * s..(n + 1) * ca * s]);
            out.extend_from_slice(&self.value(b).data()[n * cb * s..(n + 1) * cb * s]);
        }
        let value = Tensor5::new([na, ca + cb, d, h, w], out)?;
        let bw = boxed(vec![a, b], move |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], needs: &[bool]| {
            let mut ga = Vec::with_capacity(na * ca * s);
            let mut gb = Vec::with_capacity(na * cb * s);
            for n in 0..na {
                let base = n * (ca + cb) * s;
                ga.extend_from_slice(&g[base..base + ca * s]);
                gb.extend_from_slice(&g[base + ca * s..base + (ca + cb) * s]);
            }
            vec![needs[0].then_some(ga), needs[1].then_some(gb)]
        });
        Ok(self.push(value, bw))
    }

    /// Multiplies every voxel of channel `c` in sample `n` by `s[n, c]`,
    /// where `s` has shape `(N, C, 1, 1, 1)`.
    pub fn scale_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, ..] = self.shape(x);
        if self.shape(s) != [n, c, 1, 1, 1] {
            return Err(FdaError::Shape(format!(
                "scale_broadcast: scale {:?} does not match ({n}, {c}, 1, 1, 1)",
                self.shape(s)
            )));
        }
        let sp = self.value(x).spatial_len();
        let sd = self.value(s).data();
        let out: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, v)| *v * sd[i / sp]).collect();
        let value = Tensor5::new(self.shape(x), out)?;
        let bw = boxed(vec![x, s], move |vals: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], needs: &[bool]| {
            let xd = vals.get(x).data();
            let sd = vals.get(s).data();
            let dx = needs[0].then(|| g.iter().enumerate().map(|(i, g)| *g * sd[i / sp]).collect());
            let ds = needs[1].then(|| {
                (0..n * c)
                    .map(|k| g[k * sp..(k + 1) * sp].iter().zip(&xd[k * sp..(k + 1) * sp]).map(|(g, x)| *g * *x).sum())
                    .collect()
            });
            vec![dx, ds]
        });
        Ok(self.push(value, bw))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let total = xv.data().iter().map(|v| v.f64()).sum::<f64>();
        let len = xv.numel();
        let bw = boxed(vec![x], move |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            vec![Some(vec![g[0]; len])]
        });
        Ok(self.push(Tensor5::scalar(T::of(total)), bw))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let len = xv.numel();
        let total = xv.data().iter().map(|v| v.f64()).sum::<f64>() / len as f64;
        let bw = boxed(vec![x], move |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            vec![Some(vec![g[0] * T::of(1.0 / len as f64); len])]
        });
        Ok(self.push(Tensor5::scalar(T::of(total)), bw))
    }

    /// `x * c` for a constant scalar `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        let out: Vec<T> = self.value(x).data().iter().map(|v| *v * cv).collect();
        let value = Tensor5::new(self.shape(x), out)?;
        let bw = boxed(vec![x], move |_v: &Values<'_, T>, _o: &Tensor5<T>, g: &[T], _n: &[bool]| {
            vec![Some(g.iter().map(|g| *g * cv).collect())]
        });
        Ok(self.push(value, bw))
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Output of [`cse_block`]: the recalibrated features and the channel gate.
#[derive(Debug, Clone, Copy)]
pub struct CseOutput {
    pub out: Var,
    pub gate: Var,
}

/// 3D channel squeeze-and-excitation:
/// `z = mean_{d,h,w} u`, `gate = sigmoid(w2 relu(w1 z))`, `out = u * gate`.
///
/// `w1` is `(F/r, F, 1, 1, 1)` and `w2` is `(F, F/r, 1, 1, 1)`.
pub fn cse_block<T: Real>(tape: &mut Tape<T>, u: Var, w1: Var, w2: Var) -> Result<CseOutput> {
    let z = tape.global_avg_pool(u)?;
    let h = tape.linear(z, w1, None)?;
    let h = tape.relu(h)?;
    let s = tape.linear(h, w2, None)?;
    let gate = tape.sigmoid(s)?;
    let out = tape.scale_broadcast(u, gate)?;
    Ok(CseOutput { out, gate })
}

/// Hidden width of the excitation MLP: `ceil(F / r)`, at least 1.
pub fn cse_hidden(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}
