//! Normalizations and channel reductions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::{Error, Result, Tensor};

/// Standardizes each contiguous chunk of `len` values to zero mean and unit
/// variance. Returns `(xhat, inv_std per chunk)`.
fn standardize(data: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; data.len()];
    let mut inv = Vec::with_capacity(data.len() / len.max(1));
    for (src, dst) in data.chunks(len).zip(xhat.chunks_mut(len)) {
        let n = len as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / libm::sqrt(var + eps);
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

fn standardize_grad(dxhat: &[f64], xhat: &[f64], inv: &[f64], len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    let n = len as f64;
    for (((d, xh), out), &is) in dxhat.chunks(len).zip(xhat.chunks(len)).zip(dx.chunks_mut(len)).zip(inv) {
        let s1: f64 = d.iter().sum();
        let s2: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
        for ((o, dv), xv) in out.iter_mut().zip(d).zip(xh) {
            *o = is / n * (n * dv - s1 - xv * s2);
        }
    }
    dx
}

impl Graph {
    /// Per-sample, per-channel normalization over the spatial axes with a
    /// learned affine map. `x: [N, C, ...]`, `gamma`, `beta: [C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 3 || self.value(gamma).shape() != [xs[1]] || self.value(beta).shape() != [xs[1]] {
            return Err(Error::Shape(format!("instance_norm: x {:?}", xs)));
        }
        let c = xs[1];
        let s = self.value(x).trailing(2);
        self.affine_norm(x, gamma, beta, eps, s, move |i| (i / s) % c)
    }

    /// Normalization over the last axis with a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("layer_norm: x {:?}", xs)));
        }
        self.affine_norm(x, gamma, beta, eps, c, move |i| i % c)
    }

    fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        len: usize,
        channel_of: impl Fn(usize) -> usize + 'static,
    ) -> Result<Var> {
        let (xhat, inv) = standardize(self.value(x).data(), len, eps);
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &v)| gd[channel_of(i)] * v + bd[channel_of(i)]).collect();
        let out = Tensor::new(self.value(x).shape(), out)?;
        let nc = gd.len();
        Ok(self.custom(out, &[x, gamma, beta], move |inp, _, g, needs| {
            let gdat = g.data();
            let gamma = inp[1].data();
            let gx = needs[0].then(|| {
                let dxhat: Vec<f64> = gdat.iter().enumerate().map(|(i, &v)| v * gamma[channel_of(i)]).collect();
                Tensor::new(inp[0].shape(), standardize_grad(&dxhat, &xhat, &inv, len)).expect("norm grad")
            });
            let mut dgamma = vec![0.0; nc];
            let mut dbeta = vec![0.0; nc];
            for (i, &v) in gdat.iter().enumerate() {
                dgamma[channel_of(i)] += v * xhat[i];
                dbeta[channel_of(i)] += v;
            }
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[nc], dgamma).expect("norm grad")),
                needs[2].then(|| Tensor::new(&[nc], dbeta).expect("norm grad")),
            ]
        }))
    }

    /// Softmax across axis 1 of `[N, C, ...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("softmax_channels: {:?}", xs)));
        }
        let out = softmax_channels(self.value(x));
        let (n, c, s) = (xs[0], xs[1], self.value(x).trailing(2));
        Ok(self.custom(out, &[x], move |_, p, g, _| {
            let mut gx = Tensor::zeros(p.shape());
            let (pd, gd) = (p.data(), g.data());
            let od = gx.data_mut();
            for b in 0..n {
                for v in 0..s {
                    let base = b * c * s + v;
                    let dot: f64 = (0..c).map(|ch| gd[base + ch * s] * pd[base + ch * s]).sum();
                    for ch in 0..c {
                        let i = base + ch * s;
                        od[i] = pd[i] * (gd[i] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Scales every voxel's channel vector of `[N, C, ...]` to unit length.
    /// A vector with norm below `eps` maps to the constant unit vector
    /// `(1/√C, …)` and passes no gradient.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("l2_normalize_channels: {:?}", xs)));
        }
        let (n, c, s) = (xs[0], xs[1], self.value(x).trailing(2));
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut norms = vec![0.0; n * s];
        for b in 0..n {
            for v in 0..s {
                let base = b * c * s + v;
                let nrm = libm::sqrt((0..c).map(|ch| { let v = xd[base + ch * s]; v * v }).sum::<f64>());
                norms[b * s + v] = nrm;
                for ch in 0..c {
                    out[base + ch * s] = if nrm < eps {
                        1.0 / libm::sqrt(c as f64)
                    } else {
                        xd[base + ch * s] / nrm
                    };
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.custom(out, &[x], move |_, y, g, _| {
            let mut gx = Tensor::zeros(y.shape());
            let (yd, gd) = (y.data(), g.data());
            let od = gx.data_mut();
            for b in 0..n {
                for v in 0..s {
                    let nrm = norms[b * s + v];
                    if nrm < eps {
                        continue;
                    }
                    let base = b * c * s + v;
                    let dot: f64 = (0..c).map(|ch| gd[base + ch * s] * yd[base + ch * s]).sum();
                    for ch in 0..c {
                        let i = base + ch * s;
                        od[i] = (gd[i] - yd[i] * dot) / nrm;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean and max across channels: `[N, C, ...] -> [N, 2, ...]`.
    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 || xs[1] == 0 {
            return Err(Error::Shape(format!("channel_mean_max: {:?}", xs)));
        }
        let (n, c, s) = (xs[0], xs[1], self.value(x).trailing(2));
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * 2 * s];
        let mut argmax = vec![0usize; n * s];
        for b in 0..n {
            for v in 0..s {
                let base = b * c * s + v;
                let mut sum = 0.0;
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for ch in 0..c {
                    let val = xd[base + ch * s];
                    sum += val;
                    if val > best {
                        best = val;
                        arg = ch;
                    }
                }
                out[b * 2 * s + v] = sum / c as f64;
                out[b * 2 * s + s + v] = best;
                argmax[b * s + v] = arg;
            }
        }
        let mut oshape = xs.clone();
        oshape[1] = 2;
        let out = Tensor::new(&oshape, out)?;
        Ok(self.custom(out, &[x], move |inp, _, g, _| {
            let mut gx = Tensor::zeros(inp[0].shape());
            let gd = g.data();
            let od = gx.data_mut();
            for b in 0..n {
                for v in 0..s {
                    let gm = gd[b * 2 * s + v] / c as f64;
                    let base = b * c * s + v;
                    for ch in 0..c {
                        od[base + ch * s] += gm;
                    }
                    od[base + argmax[b * s + v] * s] += gd[b * 2 * s + s + v];
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Softmax across axis 1 of `[N, C, ...]`.
pub(crate) fn softmax_channels(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let (n, c, s) = (xs[0], xs[1], x.trailing(2));
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for v in 0..s {
            let base = b * c * s + v;
            let m = (0..c).map(|ch| xd[base + ch * s]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = libm::exp(xd[base + ch * s] - m);
                out[base + ch * s] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * s] /= z;
            }
        }
    }
    Tensor::new(xs, out).expect("softmax shape")
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    #[test]
    fn instance_and_layer_norm_gradients() {
        let x = ramp(&[2, 3, 2, 2, 1], 0.3);
        let gm = ramp(&[3], 1.0);
        let bt = ramp(&[3], 2.0);
        let w = ramp(&[2, 3, 2, 2, 1], 5.0);
        check_grad(&[x, gm, bt], |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv).unwrap();
            g.sum(y)
        }, 1e-6, 1e-5);
        let x = ramp(&[4, 5], 0.7);
        let gm = ramp(&[5], 1.0);
        let bt = ramp(&[5], 2.0);
        let w = ramp(&[4, 5], 3.0);
        check_grad(&[x, gm, bt], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv).unwrap();
            g.sum(y)
        }, 1e-6, 1e-5);
    }

    #[test]
    fn softmax_and_normalize_gradients() {
        let x = ramp(&[2, 3, 2, 1, 2], 0.9);
        let w = ramp(&[2, 3, 2, 1, 2], 4.0);
        check_grad(&[x], |g, v| {
            let p = g.softmax_channels(v[0]).unwrap();
            let q = g.l2_normalize_channels(v[0], 1e-12).unwrap();
            let m = g.channel_mean_max(v[0]).unwrap();
            let wv = g.constant(w.clone());
            let a = g.mul(p, wv).unwrap();
            let b = g.mul(q, wv).unwrap();
            let c = g.add(a, b).unwrap();
            let s1 = g.sum(c);
            let m2 = g.mul(m, m).unwrap();
            let s2 = g.sum(m2);
            g.add(s1, s2).unwrap()
        }, 1e-6, 1e-6);
    }

    #[test]
    fn normalize_handles_zero_vectors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 4, 2, 1, 1]));
        let y = g.l2_normalize_channels(x, 1e-12).unwrap();
        for v in 0..2 {
            let n: f64 = (0..4).map(|c| { let q = g.value(y).data()[c * 2 + v]; q * q }).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
