//! Joint training of the convolutional (CS) and diffusion (DS) segmenters.
//!
//! One step builds a single graph holding both forward passes. The two
//! networks only exchange hard argmax labels, which enter the graph as
//! constants, so one backward pass on `L^c + L^d` yields exactly the
//! per-network gradients of each network's own total.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ddim::{forward_noise, onehot_encode, NoiseSchedule};
use crate::evalkit::EvalConfig;
use crate::labelprop::{
    contrastive_loss_var, mine_pairs, sample_anchors, sample_candidates, LabelPropConfig, MemoryBank, PropagationLog,
};
use crate::losses::{
    cross_pseudo_losses, pseudo_onehot, supervised_losses, total_losses, warmup_lambda, LossReport, LossVars,
    LossWeights,
};
use crate::nets::{build_cs, build_ds, NetConfig, SegNet};
use crate::optim::{Sgd, SgdConfig};
use crate::params::Bound;
use crate::voldata::{
    augment, crop_patch, onehot01, stack_images, stack_labels, CropMode, DatasetSplit, SyntheticSpec, VolumeSample,
};
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub labeled_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: SyntheticSpec::default(), labeled_count: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Draw one step per sample instead of one per batch.
    pub per_sample_t: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02, per_sample_t: false }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Which unsupervised parts of the objective are active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    pub cross_pseudo: bool,
    pub contrastive: bool,
    pub augment: bool,
    /// Project DS features for the memory bank with the CS head, so anchors
    /// and candidates live in one embedding.
    pub share_projection_head: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches { cross_pseudo: true, contrastive: true, augment: true, share_projection_head: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// CS settings; DS uses [`NetConfig::diffusion_variant`].
    pub net: NetConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossWeights,
    pub labelprop: LabelPropConfig,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub patch_size: [usize; 3],
    pub switches: Switches,
    /// Sliding-window settings for evaluation.
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data: DataConfig::default(),
            net: NetConfig::default(),
            diffusion: DiffusionConfig::default(),
            loss: LossWeights::default(),
            labelprop: LabelPropConfig::default(),
            optimizer: SgdConfig::default(),
            batch_size: 4,
            labeled_per_batch: 2,
            epochs: 300,
            iters_per_epoch: 1,
            patch_size: [16, 16, 16],
            switches: Switches::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if self.data.labeled_count == 0 || self.data.labeled_count >= self.data.synthetic.count {
            return Err(Error::config(
                "data.labeled_count",
                format!("must lie in 1..{}, got {}", self.data.synthetic.count, self.data.labeled_count),
            ));
        }
        if self.net.num_classes != self.data.synthetic.classes {
            return Err(Error::config(
                "net.num_classes",
                format!("{} classes but the data has {}", self.net.num_classes, self.data.synthetic.classes),
            ));
        }
        self.net.validate()?;
        self.diffusion.schedule()?;
        self.loss.validate()?;
        self.labelprop.validate()?;
        self.optimizer.validate()?;
        if self.labeled_per_batch == 0 || self.labeled_per_batch >= self.batch_size {
            return Err(Error::config(
                "labeled_per_batch",
                format!("must lie in 1..{}, got {}", self.batch_size, self.labeled_per_batch),
            ));
        }
        if self.epochs == 0 || self.iters_per_epoch == 0 {
            return Err(Error::config("epochs", "epochs and iters_per_epoch must be positive"));
        }
        let m = self.net.size_multiple();
        for (axis, (&p, &d)) in self.patch_size.iter().zip(&self.data.synthetic.size).enumerate() {
            if p == 0 || p % m != 0 {
                return Err(Error::config("patch_size", format!("axis {axis}: {p} is not a positive multiple of {m}")));
            }
            if p > d {
                return Err(Error::config("patch_size", format!("axis {axis}: {p} exceeds volume size {d}")));
            }
        }
        for (axis, ((&p, &s), &d)) in
            self.eval.patch_size.iter().zip(&self.eval.stride).zip(&self.data.synthetic.size).enumerate()
        {
            if p == 0 || p % m != 0 || p > d {
                return Err(Error::config(
                    "eval.patch_size",
                    format!("axis {axis}: {p} must be a positive multiple of {m} no larger than {d}"),
                ));
            }
            if s == 0 || s > p {
                return Err(Error::config("eval.stride", format!("axis {axis}: {s} must lie in 1..={p}")));
            }
        }
        if self.switches.contrastive {
            let voxels = (self.batch_size - self.labeled_per_batch) * self.patch_size.iter().product::<usize>();
            if self.labelprop.candidates > voxels {
                return Err(Error::config(
                    "labelprop.candidates",
                    format!("{} candidates from {voxels} unlabelled voxels per batch", self.labelprop.candidates),
                ));
            }
        }
        Ok(())
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.batch_size - self.labeled_per_batch
    }

    /// Warmup argument for `epoch`.
    pub fn warmup_t(&self, epoch: usize) -> f64 {
        (epoch as f64).min(self.loss.t_max)
    }
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub report: LossReport,
    pub lambda: f64,
    /// Total entries across the bank's class buffers after the step.
    pub bank_fill: usize,
    pub labeled_in_batch: usize,
}

impl HistoryRow {
    pub const HEADER: [&'static str; 13] = [
        "step",
        "epoch",
        "ds_sup",
        "cs_sup",
        "ds_pseudo",
        "cs_pseudo",
        "contrastive",
        "cs_unsup",
        "ds_total",
        "cs_total",
        "lambda",
        "bank_fill",
        "labeled_in_batch",
    ];
}

/// Everything a resumed run needs.
#[derive(Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub iteration: u64,
    pub cs: SegNet,
    pub ds: SegNet,
    pub cs_opt: Sgd,
    pub ds_opt: Sgd,
    pub bank: MemoryBank,
    pub rng: Rng,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    /// Fresh networks drawn from the config seed.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let cs = build_cs(&config.net, &mut rng)?;
        let ds = build_ds(&config.net.diffusion_variant(), &mut rng)?;
        let cs_opt = Sgd::new(config.optimizer.clone(), cs.params());
        let ds_opt = Sgd::new(config.optimizer.clone(), ds.params());
        let lp = &config.labelprop;
        let bank = MemoryBank::new(config.net.num_classes, config.net.feature_dim, lp.capacity, lp.insert_cap)?;
        Ok(TrainState { epoch: 0, iteration: 0, cs, ds, cs_opt, ds_opt, bank, rng, history: Vec::new() })
    }
}

/// `m` labelled patches followed by `n` unlabelled ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[m + n, 1, X, Y, Z]`.
    pub images: Tensor,
    /// Labels of the first `labeled` samples, concatenated.
    pub labels: Vec<u8>,
    pub labeled: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn spatial(&self) -> &[usize] {
        &self.images.shape()[2..]
    }

    pub fn from_samples(labeled: &[VolumeSample], unlabeled: &[VolumeSample]) -> Result<Self> {
        let all: Vec<&VolumeSample> = labeled.iter().chain(unlabeled).collect();
        let lab: Vec<&VolumeSample> = labeled.iter().collect();
        Ok(Batch {
            ids: all.iter().map(|s| s.id.clone()).collect(),
            images: stack_images(&all)?,
            labels: stack_labels(&lab)?,
            labeled: labeled.len(),
        })
    }
}

/// Draws volumes uniformly with replacement from each pool, crops random
/// patches and optionally augments them.
pub fn make_batch(split: &DatasetSplit, config: &TrainConfig, rng: &mut Rng) -> Result<Batch> {
    if split.labeled.is_empty() || split.unlabeled.is_empty() {
        return Err(Error::config("data", "both the labelled and the unlabelled pool must be nonempty"));
    }
    let draw = |pool: &[VolumeSample], count: usize, rng: &mut Rng| -> Result<Vec<VolumeSample>> {
        (0..count)
            .map(|_| {
                let src = &pool[rng.gen_range(0..pool.len())];
                let patch = crop_patch(src, config.patch_size, CropMode::Random, rng)?;
                Ok(if config.switches.augment { augment(&patch, rng) } else { patch })
            })
            .collect()
    };
    let labeled = draw(&split.labeled, config.labeled_per_batch, rng)?;
    let unlabeled = draw(&split.unlabeled, config.unlabeled_per_batch(), rng)?;
    Batch::from_samples(&labeled, &unlabeled)
}

/// A step's graph after the forward pass, before any update.
pub struct StepGraph {
    pub graph: Graph,
    pub cs_params: Bound,
    pub ds_params: Bound,
    pub losses: LossVars,
    pub timesteps: Vec<usize>,
    pub propagation: PropagationLog,
}

fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let (n, c, s) = (probs.shape()[0], probs.shape()[1], probs.trailing(2));
    let d = probs.data();
    let mut out = Vec::with_capacity(n * s);
    for b in 0..n {
        for j in 0..s {
            let best = (1..c).fold(0, |best, k| if d[(b * c + k) * s + j] > d[(b * c + best) * s + j] { k } else { best });
            out.push(best as u8);
        }
    }
    out
}

/// Noised `±1` one-hot fields, one per sample, at the given steps.
fn noisy_fields(
    labels: &[u8],
    count: usize,
    classes: usize,
    spatial: &[usize],
    steps: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let s: usize = spatial.iter().product();
    let mut data = Vec::with_capacity(count * classes * s);
    for (b, &t) in steps.iter().enumerate().take(count) {
        let y0 = onehot_encode(&labels[b * s..(b + 1) * s], classes)?;
        data.extend(forward_noise(&y0, t, schedule, rng)?.values);
    }
    let mut shape = alloc::vec![count, classes];
    shape.extend_from_slice(spatial);
    Tensor::new(&shape, data)
}

/// Runs both forward passes and assembles every loss term for `batch`.
///
/// Consumes randomness from `state.rng` (timesteps, noise, bank and pair
/// sampling) and inserts this batch's correctly predicted labelled DS
/// features into the bank.
pub fn build_step(state: &mut TrainState, batch: &Batch, config: &TrainConfig, schedule: &NoiseSchedule) -> Result<StepGraph> {
    let (m, total) = (batch.labeled, batch.len());
    if m == 0 || m >= total {
        return Err(Error::config("batch", format!("{m} labelled of {total} samples")));
    }
    let classes = config.net.num_classes;
    let spatial = batch.spatial().to_vec();
    let sw = &config.switches;
    let unl_cs = sw.cross_pseudo || sw.contrastive;
    let unl_ds = sw.cross_pseudo;
    let cs_n = if unl_cs { total } else { m };
    let ds_n = if unl_ds { total } else { m };

    let mut g = Graph::new();
    let cs_params = state.cs.params().bind(&mut g, true);
    let ds_params = state.ds.params().bind(&mut g, true);
    let images = g.constant(batch.images.slice_leading(0, cs_n)?);
    let cs_out = state.cs.forward(&mut g, &cs_params, images, None, None)?;

    let timesteps: Vec<usize> = if config.diffusion.per_sample_t {
        (0..ds_n).map(|_| schedule.sample_t(&mut state.rng)).collect()
    } else {
        alloc::vec![schedule.sample_t(&mut state.rng); ds_n]
    };
    let s: usize = spatial.iter().product();
    let mut clean = batch.labels.clone();
    if unl_ds {
        let cs_unl = g.value(cs_out.probs).slice_leading(m, total - m)?;
        clean.extend(argmax_labels(&cs_unl));
    }
    debug_assert_eq!(clean.len(), ds_n * s);
    let field = noisy_fields(&clean, ds_n, classes, &spatial, &timesteps, schedule, &mut state.rng)?;
    let ds_images = batch.images.slice_leading(0, ds_n)?;
    let ds_in = {
        let xv = g.constant(ds_images);
        let yv = g.constant(field);
        g.concat_channels(xv, yv)?
    };
    let shared = sw.share_projection_head.then(|| (state.cs.head(), &cs_params));
    let ds_out = state.ds.forward(&mut g, &ds_params, ds_in, Some(&timesteps), shared)?;

    // Supervised terms on the labelled slice.
    let target = g.constant(onehot01(&batch.labels, m, classes, &spatial)?);
    let cs_lab = g.slice_batch(cs_out.probs, 0, m)?;
    let ds_lab = g.slice_batch(ds_out.probs, 0, m)?;
    let t = config.warmup_t(state.epoch);
    let (ds_sup, cs_sup) = supervised_losses(&mut g, ds_lab, cs_lab, target, &config.loss, t)?;

    // Cross pseudo-supervision on the unlabelled slice.
    let (ds_pseudo, cs_pseudo) = if sw.cross_pseudo {
        let cs_unl = g.slice_batch(cs_out.probs, m, total - m)?;
        let ds_unl = g.slice_batch(ds_out.probs, m, total - m)?;
        let cs_hard = g.constant(pseudo_onehot(g.value(cs_unl)));
        let ds_hard = g.constant(pseudo_onehot(g.value(ds_unl)));
        cross_pseudo_losses(&mut g, ds_unl, cs_hard, cs_unl, ds_hard, &config.loss)?
    } else {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    };

    // Bank update from labelled DS features, then propagation to CS features.
    let mut propagation = PropagationLog::default();
    let contrastive = if sw.contrastive {
        let ds_feat = g.value(ds_out.features).slice_leading(0, m)?;
        let ds_pred = argmax_labels(&g.value(ds_out.probs).slice_leading(0, m)?);
        state.bank.update(&ds_feat, &ds_pred, &batch.labels, &mut state.rng)?;
        propagation_loss(&mut g, state, cs_out.features, m, total - m, s, config, &mut propagation)?
    } else {
        propagation.skipped = true;
        g.constant(Tensor::scalar(0.0))
    };

    let losses = total_losses(&mut g, ds_sup, cs_sup, ds_pseudo, cs_pseudo, contrastive, &config.loss)?;
    Ok(StepGraph { graph: g, cs_params, ds_params, losses, timesteps, propagation })
}

#[allow(clippy::too_many_arguments)]
fn propagation_loss(
    g: &mut Graph,
    state: &mut TrainState,
    cs_features: Var,
    offset: usize,
    n: usize,
    s: usize,
    config: &TrainConfig,
    log: &mut PropagationLog,
) -> Result<Var> {
    let lp = &config.labelprop;
    let anchors = sample_anchors(&state.bank, lp.anchors, &mut state.rng);
    log.skipped_classes = anchors.skipped.clone();
    if anchors.per_class.iter().all(Option::is_none) {
        log.skipped = true;
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let at: Vec<(usize, usize)> = sample_candidates(n, s, lp.candidates, &mut state.rng)?
        .into_iter()
        .map(|(b, v)| (b + offset, v))
        .collect();
    let candidates = g.gather_voxels(cs_features, &at)?;
    let pairs = mine_pairs(&anchors, g.value(candidates), lp.top_k)?;
    let anchor_vars: Vec<Var> = anchors.per_class.into_iter().flatten().map(|a| g.constant(a)).collect();
    contrastive_loss_var(g, &anchor_vars, candidates, &pairs, lp.temperature)
}

fn check_finite(report: &LossReport, batch: &Batch, step: u64) -> Result<()> {
    for (name, v) in LossReport::NAMES.iter().zip(report.values()) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "step {step}: loss term {name} = {v} on batch [{}]",
                batch.ids.join(", ")
            )));
        }
    }
    Ok(())
}

fn gradients<'g>(g: &'g Graph, bound: &Bound) -> Vec<Option<&'g Tensor>> {
    bound.vars().iter().map(|&v| g.grad(v)).collect()
}

/// One optimisation step of each network on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch, config: &TrainConfig, schedule: &NoiseSchedule) -> Result<LossReport> {
    let StepGraph { mut graph, cs_params, ds_params, losses, .. } = build_step(state, batch, config, schedule)?;
    let report = LossReport::read(&graph, &losses);
    check_finite(&report, batch, state.iteration)?;
    let both = graph.add(losses.cs_total, losses.ds_total)?;
    graph.backward(both)?;
    for (net, bound) in [("cs", &cs_params), ("ds", &ds_params)] {
        if let Some(i) = gradients(&graph, bound).iter().position(|g| g.is_some_and(|g| !g.all_finite())) {
            let name = if net == "cs" { &state.cs.params().names()[i] } else { &state.ds.params().names()[i] };
            return Err(Error::Numeric(format!(
                "step {}: non-finite gradient for {net} parameter {name} on batch [{}]",
                state.iteration,
                batch.ids.join(", ")
            )));
        }
    }
    state.cs_opt.step(state.cs.params_mut(), &gradients(&graph, &cs_params))?;
    state.ds_opt.step(state.ds.params_mut(), &gradients(&graph, &ds_params))?;
    state.iteration += 1;
    Ok(report)
}

/// Hooks called while [`train`] runs.
pub trait TrainObserver {
    type Error: From<Error>;

    fn on_step(&mut self, _row: &HistoryRow) -> core::result::Result<(), Self::Error> {
        Ok(())
    }

    /// Called after each completed epoch, with `state.epoch` already advanced.
    fn on_epoch(&mut self, _state: &TrainState) -> core::result::Result<(), Self::Error> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {
    type Error = Error;
}

/// Runs epochs `state.epoch..config.epochs`. Starting from a state saved
/// after an epoch reproduces the uninterrupted run exactly.
pub fn train<O: TrainObserver>(
    config: &TrainConfig,
    split: &DatasetSplit,
    state: &mut TrainState,
    observer: &mut O,
) -> core::result::Result<(), O::Error> {
    config.validate()?;
    let schedule = config.diffusion.schedule()?;
    while state.epoch < config.epochs {
        let lambda = warmup_lambda(config.warmup_t(state.epoch), config.loss.t_max)?;
        for _ in 0..config.iters_per_epoch {
            let batch = make_batch(split, config, &mut state.rng)?;
            let report = train_step(state, &batch, config, &schedule)?;
            let row = HistoryRow {
                step: state.iteration,
                epoch: state.epoch,
                report,
                lambda,
                bank_fill: state.bank.fill().iter().sum(),
                labeled_in_batch: batch.labeled,
            };
            observer.on_step(&row)?;
            state.history.push(row);
        }
        state.epoch += 1;
        observer.on_epoch(state)?;
    }
    Ok(())
}
