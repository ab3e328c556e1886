//! 3D convolutions lowered to matrix products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::linalg::gemm;
use crate::{Error, Result, Tensor};

/// How out-of-bounds taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Taps are clamped to the nearest in-bounds voxel.
    Replicate,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    out: [usize; 3],
}

impl Geometry {
    fn in_spatial(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// For each axis, kernel tap and output position: the source index.
    fn tap_maps(&self) -> [Vec<Option<usize>>; 3] {
        core::array::from_fn(|a| {
            let mut map = Vec::with_capacity(self.k * self.out[a]);
            for kk in 0..self.k {
                for o in 0..self.out[a] {
                    let pos = (o * self.stride + kk) as isize - self.pad as isize;
                    let n = self.dims[a] as isize;
                    map.push(if (0..n).contains(&pos) {
                        Some(pos as usize)
                    } else {
                        match self.mode {
                            PadMode::Zeros => None,
                            PadMode::Replicate => Some(pos.clamp(0, n - 1) as usize),
                        }
                    });
                }
            }
            map
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], geo: &Geometry, maps: &[Vec<Option<usize>>; 3], col: &mut [f64]) {
    let [dx, dy, dz] = geo.dims;
    let [ox, oy, oz] = geo.out;
    let k = geo.k;
    let os = geo.out_spatial();
    let mut row = 0;
    for ci in 0..geo.cin {
        let xc = &x[ci * dx * dy * dz..(ci + 1) * dx * dy * dz];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let dst = &mut col[row * os..(row + 1) * os];
                    let mut j = 0;
                    for px in &maps[0][kx * ox..(kx + 1) * ox] {
                        for py in &maps[1][ky * oy..(ky + 1) * oy] {
                            for pz in &maps[2][kz * oz..(kz + 1) * oz] {
                                dst[j] = match (px, py, pz) {
                                    (Some(a), Some(b), Some(c)) => xc[(a * dy + b) * dz + c],
                                    _ => 0.0,
                                };
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(col: &[f64], geo: &Geometry, maps: &[Vec<Option<usize>>; 3], x: &mut [f64]) {
    let [dx, dy, dz] = geo.dims;
    let [ox, oy, oz] = geo.out;
    let k = geo.k;
    let os = geo.out_spatial();
    let mut row = 0;
    for ci in 0..geo.cin {
        let xc = &mut x[ci * dx * dy * dz..(ci + 1) * dx * dy * dz];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let src = &col[row * os..(row + 1) * os];
                    let mut j = 0;
                    for px in &maps[0][kx * ox..(kx + 1) * ox] {
                        for py in &maps[1][ky * oy..(ky + 1) * oy] {
                            for pz in &maps[2][kz * oz..(kz + 1) * oz] {
                                if let (Some(a), Some(b), Some(c)) = (px, py, pz) {
                                    xc[(a * dy + b) * dz + c] += src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Graph {
    /// Cubic-kernel 3D convolution. `x: [N, Cin, X, Y, Z]`,
    /// `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || stride == 0 {
            return Err(Error::Shape(format!("conv3d: x {:?} with w {:?}", xs, ws)));
        }
        let (n, cout, k) = (xs[0], ws[0], ws[2]);
        let dims = [xs[2], xs[3], xs[4]];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let span = dims[a] + 2 * pad;
            if span < k {
                return Err(Error::Shape(format!("conv3d: axis {a} of length {} too small for kernel {k}", dims[a])));
            }
            out[a] = (span - k) / stride + 1;
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!("conv3d: bias {:?} for {} outputs", self.value(b).shape(), cout)));
            }
        }
        let geo = Geometry {
            cin: xs[1],
            dims,
            k,
            stride,
            pad,
            mode,
            out,
        };
        let (is, os, rows) = (geo.in_spatial(), geo.out_spatial(), geo.rows());
        let maps = geo.tap_maps();
        let mut y = vec![0.0; n * cout * os];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * os] };
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for s in 0..n {
                let xin = &xd[s * geo.cin * is..(s + 1) * geo.cin * is];
                let src: &[f64] = if geo.is_pointwise() {
                    xin
                } else {
                    im2col(xin, &geo, &maps, &mut col);
                    &col
                };
                gemm(cout, rows, os, wd, false, src, false, 0.0, &mut y[s * cout * os..(s + 1) * cout * os]);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (i, chunk) in y.chunks_mut(os).enumerate() {
                    let bias = bd[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let y = Tensor::new(&[n, cout, out[0], out[1], out[2]], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.custom(y, &parents, move |inp, _, g, needs| {
            let xd = inp[0].data();
            let wd = inp[1].data();
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
            let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * os] };
            let mut dcol = vec![0.0; rows * os];
            for s in 0..n {
                let gy = &gd[s * cout * os..(s + 1) * cout * os];
                let xin = &xd[s * geo.cin * is..(s + 1) * geo.cin * is];
                if let Some(gw) = gw.as_mut() {
                    let src: &[f64] = if geo.is_pointwise() {
                        xin
                    } else {
                        im2col(xin, &geo, &maps, &mut col);
                        &col
                    };
                    gemm(cout, os, rows, gy, false, src, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[s * geo.cin * is..(s + 1) * geo.cin * is];
                    if geo.is_pointwise() {
                        gemm(rows, cout, os, wd, true, gy, false, 0.0, dst);
                    } else {
                        gemm(rows, cout, os, wd, true, gy, false, 0.0, &mut dcol);
                        col2im(&dcol, &geo, &maps, dst);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::new(inp[0].shape(), v).expect("conv grad")),
                gw.map(|v| Tensor::new(inp[1].shape(), v).expect("conv grad")),
            ];
            if inp.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[cout]);
                    for (i, chunk) in gd.chunks(os).enumerate() {
                        gb.data_mut()[i % cout] += chunk.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Transposed convolution with a 2×2×2 kernel and stride 2 (exact 2×
    /// upsampling). `x: [N, Cin, X, Y, Z]`, `w: [Cin, Cout, 2, 2, 2]`,
    /// `b: [Cout]`.
    pub fn conv_transpose3d_k2s2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
            return Err(Error::Shape(format!("conv_transpose3d: x {:?} with w {:?}", xs, ws)));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let [dx, dy, dz] = [xs[2], xs[3], xs[4]];
        let s = dx * dy * dz;
        let os = 8 * s;
        let rows = cout * 8;
        // Scatter position of (tap row, input voxel) in the output volume.
        let scatter = move |r: usize, v: usize| -> usize {
            let (co, tap) = (r / 8, r % 8);
            let (a, bb, c) = (tap / 4, (tap / 2) % 2, tap % 2);
            let (x0, rem) = (v / (dy * dz), v % (dy * dz));
            let (y0, z0) = (rem / dz, rem % dz);
            co * os + ((2 * x0 + a) * 2 * dy + 2 * y0 + bb) * 2 * dz + 2 * z0 + c
        };
        let mut y = vec![0.0; n * cout * os];
        let mut t = vec![0.0; rows * s];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for smp in 0..n {
                gemm(rows, cin, s, wd, true, &xd[smp * cin * s..(smp + 1) * cin * s], false, 0.0, &mut t);
                let dst = &mut y[smp * cout * os..(smp + 1) * cout * os];
                for r in 0..rows {
                    for v in 0..s {
                        dst[scatter(r, v)] = t[r * s + v];
                    }
                }
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (i, chunk) in y.chunks_mut(os).enumerate() {
                    let bias = bd[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let y = Tensor::new(&[n, cout, 2 * dx, 2 * dy, 2 * dz], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.custom(y, &parents, move |inp, _, g, needs| {
            let xd = inp[0].data();
            let wd = inp[1].data();
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
            let mut gt = vec![0.0; rows * s];
            for smp in 0..n {
                let src = &gd[smp * cout * os..(smp + 1) * cout * os];
                for r in 0..rows {
                    for v in 0..s {
                        gt[r * s + v] = src[scatter(r, v)];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, rows, s, wd, false, &gt, false, 0.0, &mut gx[smp * cin * s..(smp + 1) * cin * s]);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, s, rows, &xd[smp * cin * s..(smp + 1) * cin * s], false, &gt, true, 1.0, gw);
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::new(inp[0].shape(), v).expect("deconv grad")),
                gw.map(|v| Tensor::new(inp[1].shape(), v).expect("deconv grad")),
            ];
            if inp.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[cout]);
                    for (i, chunk) in gd.chunks(os).enumerate() {
                        gb.data_mut()[i % cout] += chunk.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }
}
