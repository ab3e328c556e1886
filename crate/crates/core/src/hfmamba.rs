//! High-frequency selective-scan block.
//!
//! The block gates a feature grid with spatial attention, keeps only its
//! high spatial frequencies, then mixes the result with three selective
//! state-space scans (forward raster, reversed raster, and an axis-permuted
//! raster) and a channel MLP, each behind a pre-norm residual:
//!
//! ```text
//! h  = high_pass(sa(f))
//! m  = scan(ln(h)) + h
//! out = mlp(ln(m)) + m
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Graph, PadMode, Var};
use crate::fft::{fft3, fftshift3, ifftshift3, Complex64};
use crate::params::{kaiming, normal, Bound, ParamId, ParamStore};
use crate::{Error, Result, Rng, Tensor};

// ---- selective scan ------------------------------------------------------

/// Discretized, input-dependent parameters of one scanned sequence.
///
/// Layouts: `a_bar` and `b_bar` are `[len, channels, state_dim]`, `c_sel` is
/// `[len, state_dim]` (shared by all channels at a step).
#[derive(Clone, Debug, PartialEq)]
pub struct SSMParams {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c_sel: Vec<f64>,
}

impl SSMParams {
    pub fn new(
        len: usize,
        channels: usize,
        state_dim: usize,
        a_bar: Vec<f64>,
        b_bar: Vec<f64>,
        c_sel: Vec<f64>,
    ) -> Result<Self> {
        let p = SSMParams { len, channels, state_dim, a_bar, b_bar, c_sel };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let full = self.len * self.channels * self.state_dim;
        if self.len == 0 || self.channels == 0 || self.state_dim == 0 {
            return Err(Error::Shape(format!(
                "scan needs nonzero sizes, got len {} channels {} state {}",
                self.len, self.channels, self.state_dim
            )));
        }
        for (name, got, want) in [
            ("a_bar", self.a_bar.len(), full),
            ("b_bar", self.b_bar.len(), full),
            ("c_sel", self.c_sel.len(), self.len * self.state_dim),
        ] {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if !self.a_bar.iter().chain(&self.b_bar).chain(&self.c_sel).all(|v| v.is_finite()) {
            return Err(Error::Numeric(String::from("non-finite scan parameters")));
        }
        Ok(())
    }
}

/// Runs `h_t = a_bar_t ⊙ h_{t-1} + b_bar_t x_t`, `y_t = c_t · h_t` from
/// `h_0 = 0` over `x` laid out as `[len, channels]`.
pub fn selective_scan(x: &[f64], params: &SSMParams) -> Result<Vec<f64>> {
    params.validate()?;
    let SSMParams { len, channels, state_dim, .. } = *params;
    if x.len() != len * channels {
        return Err(Error::Shape(format!("scan input has {} entries, expected {}", x.len(), len * channels)));
    }
    let h = scan_states(x, &params.a_bar, &params.b_bar, len, channels, state_dim);
    Ok(read_out(&h, &params.c_sel, len, channels, state_dim))
}

const SCAN_BLOCK: usize = 16;

/// All hidden states, `[len, channels, state_dim]`.
///
/// Two passes: every block is scanned from a zero state while tracking the
/// running product of its transitions, then the true entry state of each
/// block is pushed through with those products. The first pass has no
/// cross-block dependency.
fn scan_states(x: &[f64], a_bar: &[f64], b_bar: &[f64], len: usize, channels: usize, state_dim: usize) -> Vec<f64> {
    let cn = channels * state_dim;
    let mut h = vec![0.0; len * cn];
    let mut decay = vec![0.0; len * cn];
    for start in (0..len).step_by(SCAN_BLOCK) {
        let end = (start + SCAN_BLOCK).min(len);
        for t in start..end {
            for j in 0..cn {
                let i = t * cn + j;
                let (prev_h, prev_d) = if t == start { (0.0, 1.0) } else { (h[i - cn], decay[i - cn]) };
                h[i] = a_bar[i] * prev_h + b_bar[i] * x[t * channels + j / state_dim];
                decay[i] = a_bar[i] * prev_d;
            }
        }
    }
    let mut carry = vec![0.0; cn];
    for start in (0..len).step_by(SCAN_BLOCK) {
        let end = (start + SCAN_BLOCK).min(len);
        for t in start..end {
            for j in 0..cn {
                h[t * cn + j] += decay[t * cn + j] * carry[j];
            }
        }
        carry.copy_from_slice(&h[(end - 1) * cn..end * cn]);
    }
    h
}

fn read_out(h: &[f64], c_sel: &[f64], len: usize, channels: usize, state_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        let c_row = &c_sel[t * state_dim..(t + 1) * state_dim];
        for c in 0..channels {
            let hs = &h[(t * channels + c) * state_dim..(t * channels + c + 1) * state_dim];
            y[t * channels + c] = hs.iter().zip(c_row).map(|(a, b)| a * b).sum();
        }
    }
    y
}

/// Discretizes `a_bar = exp(delta·A)`, `b_bar = delta·B` for one sample.
fn discretize(delta: &[f64], a: &[f64], bsel: &[f64], len: usize, channels: usize, state_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let cn = channels * state_dim;
    let mut a_bar = vec![0.0; len * cn];
    let mut b_bar = vec![0.0; len * cn];
    for t in 0..len {
        for c in 0..channels {
            let d = delta[t * channels + c];
            for n in 0..state_dim {
                let i = t * cn + c * state_dim + n;
                a_bar[i] = libm::exp(d * a[c * state_dim + n]);
                b_bar[i] = d * bsel[t * state_dim + n];
            }
        }
    }
    (a_bar, b_bar)
}

/// Differentiable selective scan over a batch of sequences.
///
/// `x`, `delta`: `[N, L, D]`; `a`: `[D, S]` (continuous transition, normally
/// negative); `bsel`, `csel`: `[N, L, S]`. Returns `[N, L, D]`.
pub fn selective_scan_var(g: &mut Graph, x: Var, delta: Var, a: Var, bsel: Var, csel: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let [n, len, ch] = xs[..] else {
        return Err(Error::Shape(format!("scan input must be [N, L, D], got {:?}", xs)));
    };
    let s = g.value(a).shape().get(1).copied().unwrap_or(0);
    for (name, v, want) in [
        ("delta", delta, vec![n, len, ch]),
        ("A", a, vec![ch, s]),
        ("B", bsel, vec![n, len, s]),
        ("C", csel, vec![n, len, s]),
    ] {
        if g.value(v).shape() != want.as_slice() {
            return Err(Error::Shape(format!("scan {name}: {:?}, expected {:?}", g.value(v).shape(), want)));
        }
    }
    if s == 0 || len == 0 {
        return Err(Error::Shape(String::from("scan needs a nonempty sequence and state")));
    }
    let mut y = Vec::with_capacity(n * len * ch);
    {
        let (xd, dd, ad, bd, cd) = (
            g.value(x).data(),
            g.value(delta).data(),
            g.value(a).data(),
            g.value(bsel).data(),
            g.value(csel).data(),
        );
        for b in 0..n {
            let seq = b * len * ch..(b + 1) * len * ch;
            let st = b * len * s..(b + 1) * len * s;
            let (a_bar, b_bar) = discretize(&dd[seq.clone()], ad, &bd[st.clone()], len, ch, s);
            let h = scan_states(&xd[seq], &a_bar, &b_bar, len, ch, s);
            y.extend(read_out(&h, &cd[st], len, ch, s));
        }
    }
    let y = Tensor::new(&[n, len, ch], y)?;
    Ok(g.custom(y, &[x, delta, a, bsel, csel], move |inp, _, gy, _| {
        let (xd, dd, ad, bd, cd) = (inp[0].data(), inp[1].data(), inp[2].data(), inp[3].data(), inp[4].data());
        let gyd = gy.data();
        let cn = ch * s;
        let mut gx = vec![0.0; n * len * ch];
        let mut gd = vec![0.0; n * len * ch];
        let mut ga = vec![0.0; ch * s];
        let mut gb = vec![0.0; n * len * s];
        let mut gc = vec![0.0; n * len * s];
        for b in 0..n {
            let so = b * len * ch;
            let po = b * len * s;
            let (a_bar, b_bar) = discretize(&dd[so..so + len * ch], ad, &bd[po..po + len * s], len, ch, s);
            let h = scan_states(&xd[so..so + len * ch], &a_bar, &b_bar, len, ch, s);
            // Adjoint state flowing backwards, already multiplied by a_bar_{t+1}.
            let mut carry = vec![0.0; cn];
            for t in (0..len).rev() {
                for c in 0..ch {
                    let gyv = gyd[so + t * ch + c];
                    let dt = dd[so + t * ch + c];
                    let xv = xd[so + t * ch + c];
                    for k in 0..s {
                        let j = c * s + k;
                        let i = t * cn + j;
                        let gh = cd[po + t * s + k] * gyv + carry[j];
                        let h_prev = if t > 0 { h[i - cn] } else { 0.0 };
                        gc[po + t * s + k] += gyv * h[i];
                        let d_abar = gh * h_prev;
                        let d_bbar = gh * xv;
                        gx[so + t * ch + c] += gh * b_bar[i];
                        gd[so + t * ch + c] += d_abar * a_bar[i] * ad[j] + d_bbar * bd[po + t * s + k];
                        ga[j] += d_abar * a_bar[i] * dt;
                        gb[po + t * s + k] += d_bbar * dt;
                        carry[j] = a_bar[i] * gh;
                    }
                }
            }
        }
        let t = |shape: &[usize], v: Vec<f64>| Some(Tensor::new(shape, v).expect("scan grad shape"));
        vec![
            t(&[n, len, ch], gx),
            t(&[n, len, ch], gd),
            t(&[ch, s], ga),
            t(&[n, len, s], gb),
            t(&[n, len, s], gc),
        ]
    }))
}

// ---- frequency filtering -------------------------------------------------

/// Binary high-pass mask over a centered (shifted) spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    pub hf_threshold: f64,
    pub dims: [usize; 3],
    /// Row-major over centered bins; `true` passes the bin.
    pub mask: Vec<bool>,
}

impl FreqMask {
    /// Passes bins whose distance from the spectrum center exceeds
    /// `hf_threshold · r_max`, with `r_max` half the smallest axis length.
    pub fn new(dims: [usize; 3], hf_threshold: f64) -> Result<Self> {
        if !(hf_threshold > 0.0 && hf_threshold <= 1.0) {
            return Err(Error::config("hf_threshold", format!("must lie in (0, 1], got {hf_threshold}")));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("empty grid {:?}", dims)));
        }
        let r_max = *dims.iter().min().unwrap() as f64 / 2.0;
        let center = dims.map(|n| (n / 2) as f64);
        let mut mask = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let d = [x, y, z].iter().zip(&center).map(|(&i, c)| (i as f64 - c) * (i as f64 - c)).sum::<f64>();
                    mask.push(libm::sqrt(d) / r_max > hf_threshold);
                }
            }
        }
        Ok(FreqMask { hf_threshold, dims, mask })
    }

    /// Fraction of bins that pass.
    pub fn pass_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Filters one real grid.
    pub fn apply(&self, grid: &[f64]) -> Vec<f64> {
        let mut spec: Vec<Complex64> = grid.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft3(&mut spec, self.dims, false);
        let mut centered = fftshift3(&spec, self.dims);
        for (v, &keep) in centered.iter_mut().zip(&self.mask) {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let mut spec = ifftshift3(&centered, self.dims);
        fft3(&mut spec, self.dims, true);
        spec.into_iter().map(|v| v.re).collect()
    }
}

/// High-pass filters a single real grid of shape `dims`.
pub fn high_pass(grid: &[f64], dims: [usize; 3], hf_threshold: f64) -> Result<Vec<f64>> {
    if grid.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!("grid of {} values for dims {:?}", grid.len(), dims)));
    }
    if !grid.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(String::from("high_pass input is not finite")));
    }
    Ok(FreqMask::new(dims, hf_threshold)?.apply(grid))
}

/// Filters every `(sample, channel)` grid of a `[N, C, X, Y, Z]` value.
///
/// The filter is a real symmetric linear map (the mask is symmetric under
/// frequency negation), so the backward pass applies the same filter.
pub fn high_pass_var(g: &mut Graph, x: Var, mask: &FreqMask) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 5 || xs[2..] != mask.dims {
        return Err(Error::Shape(format!("high_pass: {:?} with mask {:?}", xs, mask.dims)));
    }
    if !g.value(x).all_finite() {
        return Err(Error::Numeric(String::from("high_pass input is not finite")));
    }
    let s: usize = mask.dims.iter().product();
    let filter = move |t: &Tensor, m: &FreqMask| {
        let mut out = Vec::with_capacity(t.numel());
        for chunk in t.data().chunks(s) {
            out.extend(m.apply(chunk));
        }
        Tensor::new(t.shape(), out).expect("same shape")
    };
    let out = filter(g.value(x), mask);
    let mask = mask.clone();
    Ok(g.custom(out, &[x], move |_, _, gy, _| vec![Some(filter(gy, &mask))]))
}

// ---- block ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfmConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub hf_threshold: f64,
    pub attention_kernel: usize,
}

impl HfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.state_dim == 0 {
            return Err(Error::config("state_dim", "must be positive"));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(Error::config("attention_kernel", "must be odd"));
        }
        if !(self.hf_threshold > 0.0 && self.hf_threshold <= 1.0) {
            return Err(Error::config("hf_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Token orderings used by the three scan branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    Forward,
    Backward,
    /// Raster order with the last spatial axis outermost: `(z, x, y)`.
    Space,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 3] = [ScanOrder::Forward, ScanOrder::Backward, ScanOrder::Space];

    /// `order[l]` is the raster index visited at step `l`.
    pub fn order(self, dims: [usize; 3]) -> Vec<usize> {
        let [nx, ny, nz] = dims;
        let total = nx * ny * nz;
        match self {
            ScanOrder::Forward => (0..total).collect(),
            ScanOrder::Backward => (0..total).rev().collect(),
            ScanOrder::Space => {
                let mut v = Vec::with_capacity(total);
                for z in 0..nz {
                    for x in 0..nx {
                        for y in 0..ny {
                            v.push((x * ny + y) * nz + z);
                        }
                    }
                }
                v
            }
        }
    }
}

/// One scan direction with its own input-dependent parameterization.
#[derive(Clone, Debug)]
pub struct ScanBranch {
    pub order: ScanOrder,
    pub delta_w: ParamId,
    pub delta_b: ParamId,
    pub a_log: ParamId,
    pub b_w: ParamId,
    pub c_w: ParamId,
    pub skip: ParamId,
}

impl ScanBranch {
    fn new(store: &mut ParamStore, prefix: &str, order: ScanOrder, d: usize, s: usize, rng: &mut Rng) -> Self {
        let dt_init: Vec<f64> = (0..d)
            .map(|_| {
                let dt = libm::exp(rng.gen_range(libm::log(1e-3)..libm::log(1e-1)));
                // inverse softplus
                dt + libm::log(-libm::expm1(-dt))
            })
            .collect();
        let a_log: Vec<f64> = (0..d).flat_map(|_| (1..=s).map(|k| libm::log(k as f64))).collect();
        ScanBranch {
            order,
            delta_w: store.add(format!("{prefix}.delta_w"), normal(rng, &[d, d], 0.1 / libm::sqrt(d as f64))),
            delta_b: store.add(format!("{prefix}.delta_b"), Tensor::new(&[d], dt_init).expect("len d")),
            a_log: store.add(format!("{prefix}.a_log"), Tensor::new(&[d, s], a_log).expect("len d*s")),
            b_w: store.add(format!("{prefix}.b_w"), normal(rng, &[s, d], 1.0 / libm::sqrt(d as f64))),
            c_w: store.add(format!("{prefix}.c_w"), normal(rng, &[s, d], 1.0 / libm::sqrt(d as f64))),
            skip: store.add(format!("{prefix}.skip"), Tensor::full(&[d], 1.0)),
        }
    }

    /// Scans raster tokens `[N, L, D]` in this branch's order and returns
    /// the result in raster order.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, dims: [usize; 3]) -> Result<Var> {
        let order = self.order.order(dims);
        let u = if self.order == ScanOrder::Forward { tokens } else { g.permute_tokens(tokens, &order)? };
        let y = self.scan_in_order(g, p, u)?;
        if self.order == ScanOrder::Forward {
            return Ok(y);
        }
        let mut inverse = vec![0; order.len()];
        for (l, &src) in order.iter().enumerate() {
            inverse[src] = l;
        }
        g.permute_tokens(y, &inverse)
    }

    /// Scans an already ordered sequence.
    pub fn scan_in_order(&self, g: &mut Graph, p: &Bound, u: Var) -> Result<Var> {
        let pre = g.linear(u, p.get(self.delta_w), Some(p.get(self.delta_b)))?;
        let delta = g.softplus(pre);
        let a = g.exp(p.get(self.a_log));
        let a = g.neg(a);
        let bsel = g.linear(u, p.get(self.b_w), None)?;
        let csel = g.linear(u, p.get(self.c_w), None)?;
        let y = selective_scan_var(g, u, delta, a, bsel, csel)?;
        let skip = g.mul_lastdim(u, p.get(self.skip))?;
        g.add(y, skip)
    }
}

#[derive(Clone, Debug)]
pub struct HfmBlock {
    pub config: HfmConfig,
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub norm1: (ParamId, ParamId),
    pub branches: Vec<ScanBranch>,
    pub scan_out_w: ParamId,
    pub scan_out_b: ParamId,
    pub norm2: (ParamId, ParamId),
    pub mlp_in: (ParamId, ParamId),
    pub mlp_out: (ParamId, ParamId),
    /// Per-channel output scale.
    pub scale: ParamId,
}

const LN_EPS: f64 = 1e-5;
/// Initial output scale, so a fresh block only nudges the features it is
/// added to.
pub const HFM_SCALE_INIT: f64 = 0.1;

impl HfmBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, config: HfmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, s, k) = (config.channels, config.state_dim, config.attention_kernel);
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        let attn_w = store.add(format!("{prefix}.attn.w"), normal(rng, &[1, 2, k, k, k], inv(2 * k * k * k)));
        let attn_b = store.add(format!("{prefix}.attn.b"), Tensor::zeros(&[1]));
        let norm1 = (
            store.add(format!("{prefix}.norm1.gamma"), Tensor::full(&[d], 1.0)),
            store.add(format!("{prefix}.norm1.beta"), Tensor::zeros(&[d])),
        );
        let names = ["fwd", "bwd", "space"];
        let branches = ScanOrder::ALL
            .iter()
            .zip(names)
            .map(|(&o, name)| ScanBranch::new(store, &format!("{prefix}.scan.{name}"), o, d, s, rng))
            .collect();
        let scan_out_w = store.add(format!("{prefix}.scan.out_w"), normal(rng, &[d, d], inv(d)));
        let scan_out_b = store.add(format!("{prefix}.scan.out_b"), Tensor::zeros(&[d]));
        let norm2 = (
            store.add(format!("{prefix}.norm2.gamma"), Tensor::full(&[d], 1.0)),
            store.add(format!("{prefix}.norm2.beta"), Tensor::zeros(&[d])),
        );
        let mlp_in = (
            store.add(format!("{prefix}.mlp.in_w"), kaiming(rng, &[2 * d, d], d)),
            store.add(format!("{prefix}.mlp.in_b"), Tensor::zeros(&[2 * d])),
        );
        let mlp_out = (
            store.add(format!("{prefix}.mlp.out_w"), normal(rng, &[d, 2 * d], inv(2 * d))),
            store.add(format!("{prefix}.mlp.out_b"), Tensor::zeros(&[d])),
        );
        let scale = store.add(format!("{prefix}.scale"), Tensor::full(&[d], HFM_SCALE_INIT));
        Ok(HfmBlock { config, attn_w, attn_b, norm1, branches, scan_out_w, scan_out_b, norm2, mlp_in, mlp_out, scale })
    }

    /// The per-voxel attention gate `[N, 1, X, Y, Z]`.
    pub fn attention_gate(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let pooled = g.channel_mean_max(f)?;
        let pad = self.config.attention_kernel / 2;
        let logits = g.conv3d(pooled, p.get(self.attn_w), Some(p.get(self.attn_b)), 1, pad, PadMode::Replicate)?;
        Ok(g.sigmoid(logits))
    }

    pub fn spatial_attention(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let gate = self.attention_gate(g, p, f)?;
        g.mul_gate(f, gate)
    }

    /// Sum of the three directional scans on raster tokens `[N, L, D]`,
    /// followed by the output projection.
    pub fn tri_directional(&self, g: &mut Graph, p: &Bound, tokens: Var, dims: [usize; 3]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for branch in &self.branches {
            let y = branch.forward(g, p, tokens, dims)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let sum = acc.expect("three branches");
        g.linear(sum, p.get(self.scan_out_w), Some(p.get(self.scan_out_b)))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let shape = g.value(f).shape().to_vec();
        if shape.len() != 5 || shape[1] != self.config.channels {
            return Err(Error::Shape(format!(
                "hfm block expects [N, {}, X, Y, Z], got {:?}",
                self.config.channels, shape
            )));
        }
        let dims = [shape[2], shape[3], shape[4]];
        let mask = FreqMask::new(dims, self.config.hf_threshold)?;
        let gated = self.spatial_attention(g, p, f)?;
        let high = high_pass_var(g, gated, &mask)?;
        let h = g.to_tokens(high)?;
        let n1 = g.layer_norm(h, p.get(self.norm1.0), p.get(self.norm1.1), LN_EPS)?;
        let scanned = self.tri_directional(g, p, n1, dims)?;
        let m = g.add(scanned, h)?;
        let n2 = g.layer_norm(m, p.get(self.norm2.0), p.get(self.norm2.1), LN_EPS)?;
        let hid = g.linear(n2, p.get(self.mlp_in.0), Some(p.get(self.mlp_in.1)))?;
        let hid = g.gelu(hid);
        let mixed = g.linear(hid, p.get(self.mlp_out.0), Some(p.get(self.mlp_out.1)))?;
        let out = g.add(mixed, m)?;
        let out = g.mul_lastdim(out, p.get(self.scale))?;
        g.from_tokens(out, &dims)
    }
}
