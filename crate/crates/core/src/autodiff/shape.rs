//! Layout changes: concatenation, slicing, token views and gathers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::{Error, Result, Tensor};

impl Graph {
    /// `[N, Ca, ...] ++ [N, Cb, ...] -> [N, Ca + Cb, ...]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat_channels: {:?} with {:?}", sa, sb)));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let s = self.value(a).trailing(2);
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&self.value(b).data()[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let out = Tensor::new(&shape, out)?;
        Ok(self.custom(out, &[a, b], move |inp, _, g, needs| {
            let gd = g.data();
            let split = |first: bool| {
                let (off, c) = if first { (0, ca) } else { (ca, cb) };
                let mut v = Vec::with_capacity(n * c * s);
                for i in 0..n {
                    let base = i * (ca + cb) * s + off * s;
                    v.extend_from_slice(&gd[base..base + c * s]);
                }
                v
            };
            vec![
                needs[0].then(|| Tensor::new(inp[0].shape(), split(true)).expect("concat grad")),
                needs[1].then(|| Tensor::new(inp[1].shape(), split(false)).expect("concat grad")),
            ]
        }))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_leading(start, len)?;
        let inner = self.value(x).trailing(1);
        Ok(self.custom(out, &[x], move |inp, _, g, _| {
            let mut gx = Tensor::zeros(inp[0].shape());
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(gx)]
        }))
    }

    /// `[N, C, X, Y, Z] -> [N, X·Y·Z, C]` (raster order, channel-last).
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 3 {
            return Err(Error::Shape(format!("to_tokens: {:?}", xs)));
        }
        let (n, c, s) = (xs[0], xs[1], self.value(x).trailing(2));
        let out = Tensor::new(&[n, s, c], transpose_inner(self.value(x).data(), n, c, s))?;
        Ok(self.custom(out, &[x], move |inp, _, g, _| {
            vec![Some(Tensor::new(inp[0].shape(), transpose_inner(g.data(), n, s, c)).expect("token grad"))]
        }))
    }

    /// Inverse of [`to_tokens`](Self::to_tokens) for the given spatial dims.
    pub fn from_tokens(&mut self, t: Var, dims: &[usize]) -> Result<Var> {
        let ts = self.value(t).shape().to_vec();
        let s: usize = dims.iter().product();
        if ts.len() != 3 || ts[1] != s {
            return Err(Error::Shape(format!("from_tokens: {:?} into dims {:?}", ts, dims)));
        }
        let (n, c) = (ts[0], ts[2]);
        let mut shape = vec![n, c];
        shape.extend_from_slice(dims);
        let out = Tensor::new(&shape, transpose_inner(self.value(t).data(), n, s, c))?;
        Ok(self.custom(out, &[t], move |inp, _, g, _| {
            vec![Some(Tensor::new(inp[0].shape(), transpose_inner(g.data(), n, c, s)).expect("token grad"))]
        }))
    }

    /// Reorders the sequence axis of `[N, L, C]`: `out[:, l] = x[:, order[l]]`.
    /// `order` must be a permutation of `0..L`.
    pub fn permute_tokens(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || order.len() != xs[1] {
            return Err(Error::Shape(format!("permute_tokens: {:?} with order of {}", xs, order.len())));
        }
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let order = order.to_vec();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for (dst, &src) in order.iter().enumerate() {
                out[(b * l + dst) * c..(b * l + dst + 1) * c].copy_from_slice(&xd[(b * l + src) * c..(b * l + src + 1) * c]);
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.custom(out, &[x], move |_, _, g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            for b in 0..n {
                for (dst, &src) in order.iter().enumerate() {
                    for k in 0..c {
                        gx[(b * l + src) * c + k] += gd[(b * l + dst) * c + k];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, l, c], gx).expect("permute grad"))]
        }))
    }

    /// Picks channel vectors at `(sample, voxel)` pairs of `[N, C, ...]`,
    /// producing `[q, C]`.
    pub fn gather_voxels(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("gather_voxels: {:?}", xs)));
        }
        let (n, c, s) = (xs[0], xs[1], self.value(x).trailing(2));
        if let Some(bad) = at.iter().find(|(b, v)| *b >= n || *v >= s) {
            return Err(Error::Range(format!("gather_voxels: index {:?} outside {:?}", bad, xs)));
        }
        let at = at.to_vec();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(at.len() * c);
        for &(b, v) in &at {
            out.extend((0..c).map(|ch| xd[(b * c + ch) * s + v]));
        }
        let out = Tensor::new(&[at.len(), c], out)?;
        Ok(self.custom(out, &[x], move |inp, _, g, _| {
            let mut gx = Tensor::zeros(inp[0].shape());
            let od = gx.data_mut();
            for (row, &(b, v)) in g.data().chunks(c).zip(&at) {
                for (ch, gv) in row.iter().enumerate() {
                    od[(b * c + ch) * s + v] += gv;
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Swaps the two inner axes of `[n, a, b]`.
fn transpose_inner(data: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let src = &data[i * a * b..(i + 1) * a * b];
        let dst = &mut out[i * a * b..(i + 1) * a * b];
        for r in 0..a {
            for c in 0..b {
                dst[c * a + r] = src[r * b + c];
            }
        }
    }
    out
}
