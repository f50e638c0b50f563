//! 3D cross-correlation via im2col + GEMM.
//!
//! Columns are built a few output rows at a time so the buffer stays in
//! cache, and rebuilt in the backward pass rather than stored.

use crate::error::{FdaError, Result};

use super::tape::{Backward, Tape, Values, Var};
use super::tensor::{gemm, gemm_strided, Real, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }
}

/// Output rows `(oz, oy)` handled per GEMM call, sized so that the column
/// buffer stays cache resident.
fn chunk_rows(g: &ConvGeometry) -> usize {
    const TARGET: usize = 1 << 16;
    let row = g.rows() * g.out_dims[2];
    (TARGET / row.max(1)).clamp(1, g.out_dims[0] * g.out_dims[1])
}

/// Unfolds output rows `q0..q1` (a row being a fixed `(oz, oy)`) of one sample
/// `x (cin, D, H, W)` into `cols (cin*k^3, (q1-q0)*Wo)`.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, q0: usize, q1: usize, cols: &mut [T]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let p = (q1 - q0) * ow;
    let (k, s, pad) = (g.k, g.stride as isize, g.pad as isize);
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let out = &mut cols[row * p..(row + 1) * p];
                    // valid ox range for stride 1: 0 <= ox + kx - pad < iw
                    let lo = (pad - kx as isize).clamp(0, ow as isize) as usize;
                    let hi = (iw as isize + pad - kx as isize).clamp(0, ow as isize) as usize;
                    for q in q0..q1 {
                        let (oz, oy) = (q / oh, q % oh);
                        let iz = oz as isize * s + kz as isize - pad;
                        let iy = oy as isize * s + ky as isize - pad;
                        let dst = &mut out[(q - q0) * ow..(q - q0 + 1) * ow];
                        if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xc[(iz as usize * ih + iy as usize) * iw..(iz as usize * ih + iy as usize + 1) * iw];
                        if s == 1 {
                            dst[..lo].fill(T::zero());
                            if hi > lo {
                                let off = (lo as isize + kx as isize - pad) as usize;
                                dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                            }
                            dst[hi.max(lo)..].fill(T::zero());
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                *d = if ix < 0 || ix >= iw as isize { T::zero() } else { src[ix as usize] };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` for rows `q0..q1` into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, q0: usize, q1: usize, dx: &mut [T]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let p = (q1 - q0) * ow;
    let (k, s, pad) = (g.k, g.stride as isize, g.pad as isize);
    for ci in 0..g.cin {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src_row = &cols[row * p..(row + 1) * p];
                    let lo = (pad - kx as isize).clamp(0, ow as isize) as usize;
                    let hi = (iw as isize + pad - kx as isize).clamp(0, ow as isize) as usize;
                    for q in q0..q1 {
                        let (oz, oy) = (q / oh, q % oh);
                        let iz = oz as isize * s + kz as isize - pad;
                        let iy = oy as isize * s + ky as isize - pad;
                        if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let src = &src_row[(q - q0) * ow..(q - q0 + 1) * ow];
                        let base = (iz as usize * ih + iy as usize) * iw;
                        if s == 1 {
                            if hi > lo {
                                let off = base + (lo as isize + kx as isize - pad) as usize;
                                for (d, v) in xc[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *d += *v;
                                }
                            }
                        } else {
                            for (ox, v) in src.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < iw as isize {
                                    xc[base + ix as usize] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_geometry(x: [usize; 5], w: [usize; 5], stride: usize, pad: usize) -> Result<ConvGeometry> {
    let [_, cin, d, h, wd] = x;
    let [cout, wcin, k0, k1, k2] = w;
    if wcin != cin {
        return Err(FdaError::Shape(format!("conv3d: input has {cin} channels, kernel expects {wcin}")));
    }
    if k0 != k1 || k1 != k2 || k0 == 0 {
        return Err(FdaError::Shape(format!("conv3d: kernel must be cubic, got {:?}", &w[2..])));
    }
    if stride == 0 {
        return Err(FdaError::Shape("conv3d: stride must be positive".into()));
    }
    let k = k0;
    let mut out = [0usize; 3];
    for (o, n) in out.iter_mut().zip([d, h, wd]) {
        let padded = n + 2 * pad;
        if padded < k {
            return Err(FdaError::Shape(format!("conv3d: kernel {k} larger than padded input {padded}")));
        }
        *o = (padded - k) / stride + 1;
    }
    Ok(ConvGeometry { cin, cout, k, stride, pad, in_dims: [d, h, wd], out_dims: out })
}

struct ConvBackward {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeometry,
}

impl<T: Real> Backward<T> for ConvBackward {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, values: &Values<'_, T>, _out: &Tensor5<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let x = values.get(self.x);
        let w = values.get(self.w).data();
        let n = x.batch();
        let (kr, p, il) = (g.rows(), g.out_len(), g.in_len());
        let need_x = needs[0];
        let need_w = needs[1];
        let need_b = self.b.is_some() && needs[2];

        let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
        let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut db = need_b.then(|| vec![T::zero(); g.cout]);
        let rows = chunk_rows(g);
        let ow = g.out_dims[2];
        let nq = g.out_dims[0] * g.out_dims[1];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * rows * ow] };
        let mut dcols = if need_x && !g.is_pointwise() { vec![T::zero(); kr * rows * ow] } else { Vec::new() };

        for s in 0..n {
            let gs = &grad[s * g.cout * p..(s + 1) * g.cout * p];
            let xs = &x.data()[s * g.cin * il..(s + 1) * g.cin * il];
            if let Some(db) = db.as_mut() {
                for (c, b) in db.iter_mut().enumerate() {
                    *b += gs[c * p..(c + 1) * p].iter().copied().sum::<T>();
                }
            }
            if g.is_pointwise() {
                if let Some(dw) = dw.as_mut() {
                    // dW (cout x cin) += dOut (cout x P) * x^T
                    gemm(false, true, g.cout, kr, p, T::one(), gs, xs, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[s * g.cin * il..(s + 1) * g.cin * il];
                    gemm(true, false, kr, p, g.cout, T::one(), w, gs, T::one(), dxs);
                }
                continue;
            }
            let mut q0 = 0;
            while q0 < nq {
                let q1 = (q0 + rows).min(nq);
                let cw = (q1 - q0) * ow;
                let gchunk = &gs[q0 * ow..];
                if let Some(dw) = dw.as_mut() {
                    im2col(xs, g, q0, q1, &mut cols);
                    // dW (cout x K) += dOut[:, chunk] (cout x cw) * cols^T (cw x K)
                    gemm_strided(g.cout, kr, cw, T::one(), (gchunk, p, 1), (&cols, 1, cw), T::one(), (dw, kr, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols (K x cw) = W^T (K x cout) * dOut[:, chunk] (cout x cw)
                    gemm_strided(kr, cw, g.cout, T::one(), (w, 1, kr), (gchunk, p, 1), T::zero(), (&mut dcols, cw, 1));
                    col2im(&dcols, g, q0, q1, &mut dx[s * g.cin * il..(s + 1) * g.cin * il]);
                }
                q0 = q1;
            }
        }
        let mut out = vec![dx, dw];
        if self.b.is_some() {
            out.push(db);
        }
        out
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `x (N, Cin, D, H, W)` with `w (Cout, Cin, k, k, k)`
    /// plus an optional bias of `Cout` values.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let g = conv_geometry(xs, ws, stride, pad)?;
        if let Some(b) = b {
            let bn = self.value(b).numel();
            if bn != g.cout {
                return Err(FdaError::Shape(format!("conv3d: bias has {bn} values, expected {}", g.cout)));
            }
        }
        let n = xs[0];
        let (kr, p, il) = (g.rows(), g.out_len(), g.in_len());
        let mut out = vec![T::zero(); n * g.cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let rows = chunk_rows(&g);
            let ow = g.out_dims[2];
            let nq = g.out_dims[0] * g.out_dims[1];
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * rows * ow] };
            for s in 0..n {
                let xs_ = &xv[s * g.cin * il..(s + 1) * g.cin * il];
                let os = &mut out[s * g.cout * p..(s + 1) * g.cout * p];
                if let Some(bias) = bias {
                    for (c, bv) in bias.iter().enumerate() {
                        os[c * p..(c + 1) * p].fill(*bv);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                if g.is_pointwise() {
                    gemm(false, false, g.cout, p, kr, T::one(), wv, xs_, beta, os);
                    continue;
                }
                let mut q0 = 0;
                while q0 < nq {
                    let q1 = (q0 + rows).min(nq);
                    let cw = (q1 - q0) * ow;
                    im2col(xs_, &g, q0, q1, &mut cols);
                    gemm_strided(g.cout, cw, kr, T::one(), (wv, kr, 1), (&cols, cw, 1), beta, (&mut os[q0 * ow..], p, 1));
                    q0 = q1;
                }
            }
        }
        let [od, oh, ow] = g.out_dims;
        let value = Tensor5::new([n, g.cout, od, oh, ow], out)?;
        Ok(self.push(value, Box::new(ConvBackward { x, w, b, geom: g })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop (plus channel and kernel loops) reference convolution.
    fn naive_conv(x: &Tensor5<f64>, w: &Tensor5<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor5<f64> {
        let [n, cin, d, h, wd] = x.shape();
        let [cout, _, k, _, _] = w.shape();
        let o = |len: usize| (len + 2 * pad - k) / stride + 1;
        let (od, oh, ow) = (o(d), o(h), o(wd));
        let mut out = Tensor5::zeros([n, cout, od, oh, ow]);
        for s in 0..n {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (z * stride + kz) as isize - pad as isize;
                                            let iy = (y * stride + ky) as isize - pad as isize;
                                            let ix = (xx * stride + kx) as isize - pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((s * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = (((s * cout + co) * od + z) * oh + y) * ow + xx;
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn random(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5<f64> {
        let n = shape.iter().product();
        Tensor5::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random([1, 2, 3, 4, 5], &mut rng);
        let mut w = Tensor5::zeros([2, 2, 1, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let bv = tape.constant(Tensor5::zeros([2, 1, 1, 1, 1]));
        let y = tape.conv3d(xv, wv, Some(bv), 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn all_ones_counts_27() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor5::full([1, 1, 3, 3, 3], 1.0));
        let w = tape.constant(Tensor5::full([1, 1, 3, 3, 3], 1.0));
        let y = tape.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 27.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x = random([2, 2, 4, 4, 4], &mut rng);
            let w = random([3, 2, k, k, k], &mut rng);
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(Tensor5::new([3, 1, 1, 1, 1], b.clone()).unwrap());
            let y = tape.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
            let expected = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(tape.shape(y), expected.shape());
            for (a, e) in tape.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor5::zeros([1, 2, 3, 3, 3]));
        let w = tape.constant(Tensor5::zeros([1, 3, 3, 3, 3]));
        assert!(matches!(tape.conv3d(x, w, None, 1, 1), Err(FdaError::Shape(_))));
    }
}
