//! Encoder–decoder segmenters and the projection head.
//!
//! Both networks share one V-Net-style layout: `depth` encoder stages whose
//! widths double from `base_width`, strided 2×2×2 downsampling, a bottleneck,
//! transposed-conv upsampling with additive skips, and a 1×1×1 classifier.
//! Every 3×3×3 conv is followed by instance norm and ReLU.
//!
//! The diffusion segmenter additionally reads the noisy label field as extra
//! input channels and adds a learned projection of a sinusoidal timestep
//! embedding inside the first bottleneck block.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PadMode, Var};
use crate::hfmamba::{HfmBlock, HfmConfig};
use crate::params::{kaiming, Bound, ParamId, ParamStore};
use crate::{Error, Result, Rng, Tensor};

const NORM_EPS: f64 = 1e-5;
const FEATURE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub use_hfm: bool,
    /// Encoder stage whose output passes through the HFM block.
    pub hfm_stage: usize,
    pub hfm_state_dim: usize,
    pub hf_threshold: f64,
    pub hfm_attention_kernel: usize,
    /// Width of the sinusoidal timestep embedding (diffusion network only).
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 8,
            depth: 3,
            feature_dim: 32,
            use_hfm: true,
            hfm_stage: 2,
            hfm_state_dim: 16,
            hf_threshold: 0.7,
            hfm_attention_kernel: 7,
            time_embed_dim: 32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.base_width < 4 {
            return Err(Error::config("base_width", format!("must be at least 4, got {}", self.base_width)));
        }
        if self.depth < 2 {
            return Err(Error::config("depth", format!("must be at least 2, got {}", self.depth)));
        }
        if self.feature_dim < 8 {
            return Err(Error::config("feature_dim", format!("must be at least 8, got {}", self.feature_dim)));
        }
        if self.hfm_stage >= self.depth {
            return Err(Error::config(
                "hfm_stage",
                format!("must be below depth {}, got {}", self.depth, self.hfm_stage),
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim", "must be even"));
        }
        if self.use_hfm {
            self.hfm_config().validate()?;
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn hfm_config(&self) -> HfmConfig {
        HfmConfig {
            channels: self.width(self.hfm_stage),
            state_dim: self.hfm_state_dim,
            hf_threshold: self.hf_threshold,
            attention_kernel: self.hfm_attention_kernel,
        }
    }

    /// Settings for the diffusion network that pairs with this segmenter:
    /// `C` extra input channels, no HFM block.
    pub fn diffusion_variant(&self) -> NetConfig {
        NetConfig {
            in_channels: self.in_channels + self.num_classes,
            use_hfm: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    /// Image-only segmenter.
    Conv,
    /// Segmenter conditioned on a noisy label field and timestep.
    Diffusion,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        ConvBlock {
            w: store.add(format!("{name}.w"), kaiming(rng, &[cout, cin, 3, 3, 3], cin * 27)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[cout], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[cout])),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, inject: Option<Var>) -> Result<Var> {
        let y = g.conv3d(x, p.get(self.w), Some(p.get(self.b)), 1, 1, PadMode::Zeros)?;
        let mut y = g.instance_norm(y, p.get(self.gamma), p.get(self.beta), NORM_EPS)?;
        if let Some(v) = inject {
            y = g.add_channel_vec(y, v)?;
        }
        Ok(g.relu(y))
    }
}

/// Two pointwise convs with a ReLU between, then per-voxel L2
/// normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, dim: usize, rng: &mut Rng) -> Self {
        ProjectionHead {
            w1: store.add(format!("{prefix}.w1"), kaiming(rng, &[dim, cin, 1, 1, 1], cin)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[dim])),
            w2: store.add(format!("{prefix}.w2"), kaiming(rng, &[dim, dim, 1, 1, 1], dim)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
        }
    }

    /// `[N, cin, ...] -> [N, dim, ...]`, unit norm per voxel.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.conv3d(x, p.get(self.w1), Some(p.get(self.b1)), 1, 0, PadMode::Zeros)?;
        let h = g.relu(h);
        let h = g.conv3d(h, p.get(self.w2), Some(p.get(self.b2)), 1, 0, PadMode::Zeros)?;
        g.l2_normalize_channels(h, FEATURE_EPS)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SegVars {
    pub logits: Var,
    pub probs: Var,
    pub features: Var,
    /// Full-resolution decoder output feeding the classifier and head.
    pub decoder: Var,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    pub features: Tensor,
}

#[derive(Clone, Debug)]
struct Layers {
    encoder: Vec<Vec<ConvBlock>>,
    down: Vec<(ParamId, ParamId)>,
    bottleneck: Vec<ConvBlock>,
    time_proj: Option<(ParamId, ParamId)>,
    /// Indexed by the stage the upsampling lands on.
    up: Vec<(ParamId, ParamId)>,
    decoder: Vec<Vec<ConvBlock>>,
    classifier: (ParamId, ParamId),
    head: ProjectionHead,
    hfm: Option<HfmBlock>,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: NetConfig,
    kind: NetKind,
    params: ParamStore,
    layers: Layers,
}

fn convs_at(stage: usize) -> usize {
    if stage == 0 {
        1
    } else {
        2
    }
}

/// Image-only segmenter, optionally with the HFM block.
pub fn build_cs(config: &NetConfig, rng: &mut Rng) -> Result<SegNet> {
    SegNet::new(config.clone(), NetKind::Conv, rng)
}

/// Diffusion segmenter; `config.in_channels` must already include the `C`
/// label channels.
pub fn build_ds(config: &NetConfig, rng: &mut Rng) -> Result<SegNet> {
    if config.in_channels <= config.num_classes {
        return Err(Error::config(
            "in_channels",
            format!(
                "diffusion network needs image channels plus {} label channels, got {}",
                config.num_classes, config.in_channels
            ),
        ));
    }
    if config.time_embed_dim == 0 {
        return Err(Error::config("time_embed_dim", "diffusion network needs a timestep embedding"));
    }
    SegNet::new(config.clone(), NetKind::Diffusion, rng)
}

impl SegNet {
    pub fn new(config: NetConfig, kind: NetKind, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut down = Vec::with_capacity(depth);
        let mut cin = config.in_channels;
        for stage in 0..depth {
            let w = config.width(stage);
            let blocks: Vec<ConvBlock> = (0..convs_at(stage))
                .map(|i| {
                    let b = ConvBlock::new(&mut s, &format!("enc{stage}.conv{i}"), cin, w, rng);
                    cin = w;
                    b
                })
                .collect();
            encoder.push(blocks);
            let wn = config.width(stage + 1);
            down.push((
                s.add(format!("down{stage}.w"), kaiming(rng, &[wn, w, 2, 2, 2], w * 8)),
                s.add(format!("down{stage}.b"), Tensor::zeros(&[wn])),
            ));
            cin = wn;
        }
        let wb = config.width(depth);
        let bottleneck = (0..2).map(|i| ConvBlock::new(&mut s, &format!("bottleneck.conv{i}"), wb, wb, rng)).collect();
        let time_proj = (kind == NetKind::Diffusion).then(|| {
            let td = config.time_embed_dim;
            (
                s.add("time.w", kaiming(rng, &[wb, td], td)),
                s.add("time.b", Tensor::zeros(&[wb])),
            )
        });
        let mut up = vec![None; depth];
        let mut decoder = vec![Vec::new(); depth];
        for stage in (0..depth).rev() {
            let (w, wn) = (config.width(stage), config.width(stage + 1));
            up[stage] = Some((
                s.add(format!("up{stage}.w"), kaiming(rng, &[wn, w, 2, 2, 2], wn)),
                s.add(format!("up{stage}.b"), Tensor::zeros(&[w])),
            ));
            decoder[stage] = (0..convs_at(stage))
                .map(|i| ConvBlock::new(&mut s, &format!("dec{stage}.conv{i}"), w, w, rng))
                .collect();
        }
        let w0 = config.width(0);
        let c = config.num_classes;
        let classifier = (
            s.add("classifier.w", kaiming(rng, &[c, w0, 1, 1, 1], w0)),
            s.add("classifier.b", Tensor::zeros(&[c])),
        );
        let head = ProjectionHead::new(&mut s, "head", w0, config.feature_dim, rng);
        let hfm = if kind == NetKind::Conv && config.use_hfm {
            Some(HfmBlock::new(&mut s, "hfm", config.hfm_config(), rng)?)
        } else {
            None
        };
        let layers = Layers {
            encoder,
            down,
            bottleneck,
            time_proj,
            up: up.into_iter().map(|u| u.expect("every stage")).collect(),
            decoder,
            classifier,
            head,
            hfm,
        };
        Ok(SegNet { config, kind, params: s, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.layers.head
    }

    pub fn has_hfm(&self) -> bool {
        self.layers.hfm.is_some()
    }

    /// Parameter count from the layer table, without touching the store.
    pub fn expected_param_count(config: &NetConfig, kind: NetKind) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * 27 + 3 * cout;
        let mut total = 0;
        let mut cin = config.in_channels;
        for stage in 0..config.depth {
            let w = config.width(stage);
            for _ in 0..convs_at(stage) {
                total += conv(cin, w);
                cin = w;
            }
            let wn = config.width(stage + 1);
            total += wn * w * 8 + wn;
            cin = wn;
            // upsampling into this stage and its decoder convs
            total += wn * w * 8 + w;
            total += convs_at(stage) * conv(w, w);
        }
        let wb = config.width(config.depth);
        total += 2 * conv(wb, wb);
        let (w0, c, d) = (config.width(0), config.num_classes, config.feature_dim);
        total += c * w0 + c;
        total += d * w0 + d + d * d + d;
        if kind == NetKind::Diffusion {
            total += wb * config.time_embed_dim + wb;
        }
        if kind == NetKind::Conv && config.use_hfm {
            let ch = config.width(config.hfm_stage);
            let (s, k) = (config.hfm_state_dim, config.hfm_attention_kernel);
            let attn = 2 * k * k * k + 1;
            let branch = ch * ch + ch + ch * s + 2 * s * ch + ch;
            total += attn + 4 * ch + 3 * branch + ch * ch + ch + (2 * ch * ch + 2 * ch) + (2 * ch * ch + ch) + ch;
        }
        total
    }

    fn check_input(&self, shape: &[usize], channels: usize) -> Result<()> {
        if shape.len() != 5 || shape[1] != channels {
            return Err(Error::Shape(format!("expected [N, {channels}, X, Y, Z], got {:?}", shape)));
        }
        let m = self.config.size_multiple();
        if shape[2..].iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "spatial size {:?} must be a positive multiple of {m} per axis",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// Builds the forward pass. `x` already holds every input channel
    /// (image, plus the noisy label field for the diffusion network).
    /// `timesteps` holds one step per sample and is required exactly for the
    /// diffusion network. `head` overrides the projection head (used when
    /// two networks share one).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        timesteps: Option<&[usize]>,
        head: Option<(&ProjectionHead, &Bound)>,
    ) -> Result<SegVars> {
        let shape = g.value(x).shape().to_vec();
        self.check_input(&shape, self.config.in_channels)?;
        let time = match (self.kind, timesteps) {
            (NetKind::Diffusion, Some(ts)) => {
                if ts.len() != shape[0] {
                    return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), shape[0])));
                }
                let (w, b) = self.layers.time_proj.as_ref().expect("diffusion net has a time map");
                let emb = g.constant(timestep_embedding(ts, self.config.time_embed_dim));
                Some(g.linear(emb, p.get(*w), Some(p.get(*b)))?)
            }
            (NetKind::Diffusion, None) => {
                return Err(Error::config("timesteps", "diffusion network needs one timestep per sample"))
            }
            (NetKind::Conv, Some(_)) => {
                return Err(Error::config("timesteps", "image-only network takes no timesteps"))
            }
            (NetKind::Conv, None) => None,
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (stage, blocks) in self.layers.encoder.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(g, p, h, None)?;
            }
            if let (Some(hfm), true) = (&self.layers.hfm, stage == self.config.hfm_stage) {
                let enhanced = hfm.forward(g, p, h)?;
                h = g.add(h, enhanced)?;
            }
            skips.push(h);
            let (w, b) = self.layers.down[stage];
            h = g.conv3d(h, p.get(w), Some(p.get(b)), 2, 0, PadMode::Zeros)?;
        }
        for (i, blk) in self.layers.bottleneck.iter().enumerate() {
            h = blk.forward(g, p, h, if i == 0 { time } else { None })?;
        }
        for stage in (0..self.config.depth).rev() {
            let (w, b) = self.layers.up[stage];
            h = g.conv_transpose3d_k2s2(h, p.get(w), Some(p.get(b)))?;
            h = g.add(h, skips[stage])?;
            for blk in &self.layers.decoder[stage] {
                h = blk.forward(g, p, h, None)?;
            }
        }
        let (cw, cb) = self.layers.classifier;
        let logits = g.conv3d(h, p.get(cw), Some(p.get(cb)), 1, 0, PadMode::Zeros)?;
        let probs = g.softmax_channels(logits)?;
        let features = match head {
            Some((hd, hp)) => hd.forward(g, hp, h)?,
            None => self.layers.head.forward(g, p, h)?,
        };
        Ok(SegVars { logits, probs, features, decoder: h })
    }

    /// Image-only forward in inference mode.
    pub fn cs_forward(&self, x: &Tensor) -> Result<SegOutput> {
        if self.kind != NetKind::Conv {
            return Err(Error::config("kind", "cs_forward needs the image-only network"));
        }
        self.run(x.clone(), None)
    }

    /// Diffusion forward in inference mode on image `x` and noisy labels
    /// `y_t` (`[N, C, ...]`) at per-sample steps `t`.
    pub fn ds_forward(&self, x: &Tensor, y_t: &Tensor, t: &[usize]) -> Result<SegOutput> {
        if self.kind != NetKind::Diffusion {
            return Err(Error::config("kind", "ds_forward needs the diffusion network"));
        }
        let (xs, ys) = (x.shape(), y_t.shape());
        let img = self.config.in_channels - self.config.num_classes;
        if xs.len() != 5 || xs[1] != img {
            return Err(Error::Shape(format!("image must be [N, {img}, X, Y, Z], got {:?}", xs)));
        }
        if ys.len() != 5 || ys[0] != xs[0] || ys[1] != self.config.num_classes || ys[2..] != xs[2..] {
            return Err(Error::Shape(format!(
                "label field must be [{}, {}, ...] matching the image, got {:?}",
                xs[0], self.config.num_classes, ys
            )));
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let yv = g.constant(y_t.clone());
        let input = g.concat_channels(xv, yv)?;
        let input = g.value(input).clone();
        self.run(input, Some(t))
    }

    fn run(&self, input: Tensor, t: Option<&[usize]>) -> Result<SegOutput> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.forward(&mut g, &p, x, t, None)?;
        Ok(SegOutput {
            logits: g.value(out.logits).clone(),
            probs: g.value(out.probs).clone(),
            features: g.value(out.features).clone(),
        })
    }
}

/// `[N, dim]` sinusoidal embedding: `sin(t ω_i)` then `cos(t ω_i)` with
/// `ω_i = 10000^(−i / (dim/2))`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half).map(|i| libm::exp(-libm::log(10000.0) * i as f64 / half as f64)).collect();
        out.extend(freqs.iter().map(|w| libm::sin(t * w)));
        out.extend(freqs.iter().map(|w| libm::cos(t * w)));
    }
    Tensor::new(&[ts.len(), dim], out).expect("n x dim")
}

/// Short summary used in logs.
pub fn describe(net: &SegNet) -> String {
    format!(
        "{:?} net: {} tensors, {} weights, widths {}..{}{}",
        net.kind,
        net.params.len(),
        net.params.numel(),
        net.config.width(0),
        net.config.width(net.config.depth),
        if net.has_hfm() { ", hfm" } else { "" }
    )
}
