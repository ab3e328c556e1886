//! Contrastive propagation of label information from labelled to unlabelled
//! voxels.
//!
//! Features of labelled voxels that the diffusion branch classified
//! correctly go into per-class ring buffers. Each step, anchors drawn from
//! those buffers score a random sample of unlabelled candidate features; the
//! `k` candidates most similar to a class become its positives and the `k`
//! least similar its negatives for an InfoNCE-style loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPropConfig {
    /// Anchors per class.
    pub anchors: usize,
    /// Unlabelled candidates per step.
    pub candidates: usize,
    /// Positives and negatives per class.
    pub top_k: usize,
    pub temperature: f64,
    /// Ring capacity per class.
    pub capacity: usize,
    /// Most insertions per class per step.
    pub insert_cap: usize,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        LabelPropConfig { anchors: 16, candidates: 256, top_k: 8, temperature: 0.1, capacity: 1024, insert_cap: 64 }
    }
}

impl LabelPropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors == 0 {
            return Err(Error::config("anchors", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be positive"));
        }
        if 2 * self.top_k > self.candidates {
            return Err(Error::config(
                "top_k",
                format!("2·top_k = {} exceeds candidates = {}", 2 * self.top_k, self.candidates),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.capacity == 0 || self.insert_cap == 0 {
            return Err(Error::config("capacity", "capacity and insert_cap must be positive"));
        }
        Ok(())
    }
}

/// Per-class ring buffers of unit feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    insert_cap: usize,
    /// Per class, `capacity · dim` slots.
    slots: Vec<Vec<f64>>,
    counts: Vec<usize>,
    cursors: Vec<usize>,
    inserted: Vec<u64>,
}

/// What one [`MemoryBank::update`] did, per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BankUpdate {
    pub inserted: Vec<usize>,
    /// Correct voxels left out by the per-step cap.
    pub capped: Vec<usize>,
}

impl MemoryBank {
    pub fn new(classes: usize, dim: usize, capacity: usize, insert_cap: usize) -> Result<Self> {
        if classes == 0 || dim == 0 || capacity == 0 || insert_cap == 0 {
            return Err(Error::config("memory_bank", "classes, dim, capacity and insert_cap must be positive"));
        }
        Ok(MemoryBank {
            dim,
            capacity,
            insert_cap,
            slots: vec![vec![0.0; capacity * dim]; classes],
            counts: vec![0; classes],
            cursors: vec![0; classes],
            inserted: vec![0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored vectors per class.
    pub fn fill(&self) -> &[usize] {
        &self.counts
    }

    /// Lifetime insertions per class.
    pub fn total_inserted(&self) -> &[u64] {
        &self.inserted
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Stored vectors of `class`, oldest first.
    pub fn entries(&self, class: usize) -> Vec<&[f64]> {
        let count = self.counts[class];
        let start = if count < self.capacity { 0 } else { self.cursors[class] };
        (0..count)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                &self.slots[class][slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }

    fn push(&mut self, class: usize, v: &[f64]) {
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        let slot = self.cursors[class];
        let dst = &mut self.slots[class][slot * self.dim..(slot + 1) * self.dim];
        if norm > 0.0 {
            dst.iter_mut().zip(v).for_each(|(d, x)| *d = x / norm);
        } else {
            dst.fill(1.0 / libm::sqrt(self.dim as f64));
        }
        self.cursors[class] = (slot + 1) % self.capacity;
        self.counts[class] = (self.counts[class] + 1).min(self.capacity);
        self.inserted[class] += 1;
    }

    /// Stores features `[N, d, ...]` of every voxel whose prediction equals
    /// its label, at most `insert_cap` per class (a uniform random subset
    /// when more qualify, kept in raster order).
    pub fn update(&mut self, features: &Tensor, pred: &[u8], truth: &[u8], rng: &mut Rng) -> Result<BankUpdate> {
        let fs = features.shape();
        if fs.len() < 2 || fs[1] != self.dim {
            return Err(Error::Shape(format!("bank features {:?} for dim {}", fs, self.dim)));
        }
        let (n, s) = (fs[0], features.trailing(2));
        if pred.len() != n * s || truth.len() != n * s {
            return Err(Error::Shape(format!(
                "bank update: {} predictions and {} labels for {} voxels",
                pred.len(),
                truth.len(),
                n * s
            )));
        }
        let classes = self.classes();
        let mut picks: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if p == t {
                let c = t as usize;
                if c >= classes {
                    return Err(Error::Range(format!("label {c} with {classes} classes")));
                }
                picks[c].push(i);
            }
        }
        let mut report = BankUpdate { inserted: vec![0; classes], capped: vec![0; classes] };
        let mut v = vec![0.0; self.dim];
        for (c, voxels) in picks.into_iter().enumerate() {
            let chosen: Vec<usize> = if voxels.len() > self.insert_cap {
                let mut idx = index::sample(rng, voxels.len(), self.insert_cap).into_vec();
                idx.sort_unstable();
                report.capped[c] = voxels.len() - self.insert_cap;
                idx.into_iter().map(|i| voxels[i]).collect()
            } else {
                voxels
            };
            report.inserted[c] = chosen.len();
            for flat in chosen {
                let (b, j) = (flat / s, flat % s);
                for (k, slot) in v.iter_mut().enumerate() {
                    *slot = features.data()[(b * self.dim + k) * s + j];
                }
                self.push(c, &v);
            }
        }
        Ok(report)
    }
}

/// Anchors drawn from a bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    /// Per class, `[p, d]` or `None` when the class buffer was empty.
    pub per_class: Vec<Option<Tensor>>,
    pub skipped: Vec<usize>,
}

/// `p` anchors per nonempty class: without replacement when the buffer
/// holds at least `p`, with replacement otherwise.
pub fn sample_anchors(bank: &MemoryBank, p: usize, rng: &mut Rng) -> Anchors {
    let mut per_class = Vec::with_capacity(bank.classes());
    let mut skipped = Vec::new();
    for c in 0..bank.classes() {
        let entries = bank.entries(c);
        if entries.is_empty() {
            per_class.push(None);
            skipped.push(c);
            continue;
        }
        let idx: Vec<usize> = if entries.len() >= p {
            index::sample(rng, entries.len(), p).into_vec()
        } else {
            (0..p).map(|_| rng.gen_range(0..entries.len())).collect()
        };
        let data = idx.iter().flat_map(|&i| entries[i].iter().copied()).collect();
        per_class.push(Some(Tensor::new(&[p, bank.dim()], data).expect("p x d")));
    }
    Anchors { per_class, skipped }
}

/// `q` distinct `(sample, voxel)` positions out of `n · s`.
pub fn sample_candidates(n: usize, s: usize, q: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if q > n * s {
        return Err(Error::config("candidates", format!("{q} requested from {} voxels", n * s)));
    }
    Ok(index::sample(rng, n * s, q).into_iter().map(|i| (i / s, i % s)).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let den = libm::sqrt(aa) * libm::sqrt(bb);
    if den > 0.0 {
        ab / den
    } else {
        0.0
    }
}

/// `[p, q]` cosine similarities between rows of `a` (`[p, d]`) and `b`
/// (`[q, d]`).
pub fn cosine_scores(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (as_, bs) = (a.shape(), b.shape());
    if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
        return Err(Error::Shape(format!("cosine_scores: {:?} vs {:?}", as_, bs)));
    }
    let d = as_[1];
    let mut out = Vec::with_capacity(as_[0] * bs[0]);
    for ai in a.data().chunks(d.max(1)).take(as_[0]) {
        for bj in b.data().chunks(d.max(1)).take(bs[0]) {
            out.push(cosine(ai, bj));
        }
    }
    Tensor::new(&[as_[0], bs[0]], out)
}

/// Column indices of positives and negatives from a `[p, q]` score matrix.
///
/// Positives are the `k` columns with the largest column sum; negatives are
/// the `k` columns with the smallest sum among the rest. Ties go to the lower
/// column index.
pub fn topk_select(scores: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let [_, q] = scores.shape() else {
        return Err(Error::Shape(format!("topk_select wants [p, q], got {:?}", scores.shape())));
    };
    let q = *q;
    if k == 0 || 2 * k > q {
        return Err(Error::Range(format!("topk_select: need 1 <= k and 2k <= q, got k={k}, q={q}")));
    }
    let mut sums = vec![0.0; q];
    for row in scores.data().chunks(q) {
        sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| sums[j].total_cmp(&sums[i]).then(i.cmp(&j)));
    let positives: Vec<usize> = order[..k].to_vec();
    let mut rest: Vec<usize> = order[k..].to_vec();
    rest.sort_by(|&i, &j| sums[i].total_cmp(&sums[j]).then(i.cmp(&j)));
    Ok((positives, rest[..k].to_vec()))
}

/// Positive and negative candidate rows for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPairs {
    pub class: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Scores each class's anchors against the candidates and mines pairs.
pub fn mine_pairs(anchors: &Anchors, candidates: &Tensor, k: usize) -> Result<Vec<ClassPairs>> {
    let mut out = Vec::new();
    for (class, a) in anchors.per_class.iter().enumerate() {
        let Some(a) = a else { continue };
        let scores = cosine_scores(a, candidates)?;
        let (positives, negatives) = topk_select(&scores, k)?;
        out.push(ClassPairs { class, positives, negatives });
    }
    Ok(out)
}

/// `log(Σ exp z)` with max subtraction, plus the softmax weights.
fn log_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - m)).collect();
    let total: f64 = e.iter().sum();
    (m + libm::log(total), e.into_iter().map(|v| v / total).collect())
}

/// Mean over every (class, anchor, positive) triple of
/// `−log( e^{s_pos/τ} / (e^{s_pos/τ} + Σ_neg e^{s_neg/τ}) )`.
///
/// `anchors[i]` pairs with `pairs[i]`; candidate rows are indexed by the
/// pair lists.
pub fn contrastive_loss(anchors: &[&Tensor], candidates: &Tensor, pairs: &[ClassPairs], tau: f64) -> Result<f64> {
    Ok(contrastive_terms(anchors, candidates, pairs, tau, false)?.0)
}

type ContrastiveGrads = (Vec<Tensor>, Tensor);

fn contrastive_terms(
    anchors: &[&Tensor],
    candidates: &Tensor,
    pairs: &[ClassPairs],
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<ContrastiveGrads>)> {
    if anchors.len() != pairs.len() {
        return Err(Error::Shape(format!("{} anchor sets for {} pair sets", anchors.len(), pairs.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let [q, d] = candidates.shape() else {
        return Err(Error::Shape(format!("candidates must be [q, d], got {:?}", candidates.shape())));
    };
    let (q, d) = (*q, *d);
    let row = |t: &Tensor, i: usize| -> Vec<f64> { t.data()[i * d..(i + 1) * d].to_vec() };
    let mut total = 0.0;
    let terms: usize = anchors.iter().zip(pairs).map(|(a, pr)| a.shape().first().copied().unwrap_or(0) * pr.positives.len()).sum();
    if terms == 0 {
        return Ok((0.0, with_grad.then(|| (anchors.iter().map(|a| Tensor::zeros(a.shape())).collect(), Tensor::zeros(&[q, d])))));
    }
    let norm = 1.0 / terms as f64;
    let mut grad_a: Vec<Tensor> = anchors.iter().map(|a| Tensor::zeros(a.shape())).collect();
    let mut grad_b = Tensor::zeros(&[q, d]);
    for (ci, (a, pr)) in anchors.iter().zip(pairs).enumerate() {
        if a.shape().len() != 2 || a.shape()[1] != d {
            return Err(Error::Shape(format!("anchors {:?} for feature dim {d}", a.shape())));
        }
        if pr.positives.iter().chain(&pr.negatives).any(|&j| j >= q) {
            return Err(Error::Range(format!("pair index outside {q} candidates")));
        }
        for i in 0..a.shape()[0] {
            let ai = row(a, i);
            for &pj in &pr.positives {
                let cols: Vec<usize> = core::iter::once(pj).chain(pr.negatives.iter().copied()).collect();
                let z: Vec<f64> = cols.iter().map(|&j| cosine(&ai, &row(candidates, j)) / tau).collect();
                let (lse, soft) = log_sum_exp(&z);
                total += lse - z[0];
                if !with_grad {
                    continue;
                }
                for (slot, &j) in cols.iter().enumerate() {
                    let dz = soft[slot] - if slot == 0 { 1.0 } else { 0.0 };
                    let bj = row(candidates, j);
                    let (ga, gb) = cosine_grad(&ai, &bj);
                    let k = dz * norm / tau;
                    for t in 0..d {
                        grad_a[ci].data_mut()[i * d + t] += k * ga[t];
                        grad_b.data_mut()[j * d + t] += k * gb[t];
                    }
                }
            }
        }
    }
    Ok((total * norm, with_grad.then_some((grad_a, grad_b))))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let s = cosine(a, b);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - s * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - s * y / (nb * nb)).collect();
    (ga, gb)
}

/// Differentiable [`contrastive_loss`]; gradients flow to both the anchor
/// and candidate variables.
pub fn contrastive_loss_var(g: &mut Graph, anchors: &[Var], candidates: Var, pairs: &[ClassPairs], tau: f64) -> Result<Var> {
    let value = {
        let a: Vec<&Tensor> = anchors.iter().map(|&v| g.value(v)).collect();
        contrastive_loss(&a, g.value(candidates), pairs, tau)?
    };
    let pairs = pairs.to_vec();
    let mut parents = vec![candidates];
    parents.extend_from_slice(anchors);
    Ok(g.custom(Tensor::scalar(value), &parents, move |inp, _, gout, _| {
        let (_, grads) = contrastive_terms(&inp[1..], inp[0], &pairs, tau, true).expect("validated in forward");
        let (ga, gb) = grads.expect("requested");
        let k = gout.item();
        let mut out = vec![Some(gb.map(|v| v * k))];
        out.extend(ga.into_iter().map(|t| Some(t.map(|v| v * k))));
        out
    }))
}

/// Outcome of one propagation step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropagationLog {
    /// Classes without anchors this step.
    pub skipped_classes: Vec<usize>,
    /// True when no class had anchors and the loss was set to zero.
    pub skipped: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::check_grad;
    use rand::SeedableRng;

    fn rows(v: &[&[f64]]) -> Tensor {
        let d = v[0].len();
        Tensor::new(&[v.len(), d], v.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn ring_keeps_latest_in_order() {
        let mut bank = MemoryBank::new(2, 2, 4, 100).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        // Six class-1 voxels with distinct directions.
        let angles: Vec<f64> = (0..6).map(|i| i as f64 * 0.2).collect();
        let mut data = Vec::new();
        data.extend(angles.iter().map(|a| libm::cos(*a)));
        data.extend(angles.iter().map(|a| libm::sin(*a)));
        let f = Tensor::new(&[1, 2, 6], data).unwrap();
        bank.update(&f, &[1; 6], &[1; 6], &mut rng).unwrap();
        let e = bank.entries(1);
        assert_eq!(e.len(), 4);
        for (k, v) in e.iter().enumerate() {
            assert!((v[0] - libm::cos(angles[k + 2])).abs() < 1e-12);
        }
        assert_eq!(bank.fill(), &[0, 4]);
    }

    #[test]
    fn wrong_predictions_are_not_stored() {
        let mut bank = MemoryBank::new(2, 2, 8, 100).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let f = Tensor::full(&[1, 2, 3], 0.5);
        bank.update(&f, &[0, 0, 0], &[1, 1, 1], &mut rng).unwrap();
        assert!(bank.is_empty());
    }

    #[test]
    fn insert_cap_limits_each_class() {
        let mut bank = MemoryBank::new(2, 1, 100, 3).unwrap();
        let mut rng = Rng::seed_from_u64(5);
        let f = Tensor::full(&[1, 1, 10], 1.0);
        let up = bank.update(&f, &[0; 10], &[0; 10], &mut rng).unwrap();
        assert_eq!(bank.fill(), &[3, 0]);
        assert_eq!(up.capped, vec![7, 0]);
    }

    #[test]
    fn anchors_with_and_without_replacement() {
        let mut bank = MemoryBank::new(3, 2, 8, 100).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        bank.update(&f, &[1, 1], &[1, 1], &mut rng).unwrap();
        let a = sample_anchors(&bank, 2, &mut rng);
        assert_eq!(a.skipped, vec![0, 2]);
        let t = a.per_class[1].as_ref().unwrap();
        let mut firsts = [t.data()[0], t.data()[2]];
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, [0.0, 1.0]);
        let a = sample_anchors(&bank, 5, &mut rng);
        assert_eq!(a.per_class[1].as_ref().unwrap().shape(), &[5, 2]);
    }

    #[test]
    fn topk_examples() {
        let s = Tensor::new(&[1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(topk_select(&s, 1).unwrap(), (vec![0], vec![1]));
        let s = Tensor::full(&[2, 3], 0.3);
        assert_eq!(topk_select(&s, 1).unwrap(), (vec![0], vec![1]));
        assert!(topk_select(&s, 2).is_err());
    }

    #[test]
    fn closed_form_contrastive_case() {
        let a = rows(&[&[1.0, 0.0]]);
        let b = rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let pairs = [ClassPairs { class: 0, positives: vec![0], negatives: vec![1] }];
        let l = contrastive_loss(&[&a], &b, &pairs, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((l + libm::log(e / (e + 1.0 / e))).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradients() {
        let a = rows(&[&[0.3, -0.5, 0.8, 0.1], &[0.9, 0.2, -0.1, 0.4]]);
        let b = rows(&[&[0.1, 0.7, -0.3, 0.5], &[-0.6, 0.2, 0.4, 0.9], &[0.5, 0.5, 0.1, -0.2]]);
        let pairs = vec![ClassPairs { class: 0, positives: vec![2], negatives: vec![0, 1] }];
        check_grad(&[a, b], |g, v| contrastive_loss_var(g, &[v[0]], v[1], &pairs, 0.5).unwrap(), 1e-6, 1e-6);
    }
}
