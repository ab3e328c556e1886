//! Overlap and surface-distance metrics, sliding-window inference and
//! per-volume evaluation reports.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nets::{NetKind, SegNet};
use crate::voldata::VolumeSample;
use crate::{Error, Result, Tensor};

/// `(dice, jaccard)` as fractions. Two empty masks score `(1, 1)`.
pub fn overlap_metrics(pred: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", pred.len(), truth.len())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    Ok((2.0 * inter as f64 / (a + b) as f64, inter as f64 / union as f64))
}

fn check_mask(mask: &[bool], dims: [usize; 3]) -> Result<()> {
    if mask.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!("mask of {} voxels for grid {:?}", mask.len(), dims)));
    }
    Ok(())
}

/// Foreground voxels with at least one 6-neighbour outside the mask; the
/// region outside the grid counts as background.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Result<Vec<bool>> {
    check_mask(mask, dims)?;
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| mask[(x * ny + y) * nz + z];
    let mut out = vec![false; mask.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !at(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                out[(x * ny + y) * nz + z] = edge
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
            }
        }
    }
    Ok(out)
}

/// Exact squared distance transform along one line (lower envelope of
/// parabolas), with sample spacing `h`. `f` holds squared distances, `inf`
/// where no site is reachable yet.
fn edt_line(f: &mut [f64], h: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    out.clear();
    let pos = |i: usize| i as f64 * h;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("one boundary per site") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Euclidean distance from every voxel to the nearest `true` site, with
/// per-axis voxel `spacing`. All `inf` when there is no site.
pub fn distance_to(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<Vec<f64>> {
    check_mask(sites, dims)?;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| d[base + k * strides[axis]]));
                edt_line(&mut line, spacing[axis], &mut v, &mut z, &mut out);
                for (k, val) in line.iter().enumerate() {
                    d[base + k * strides[axis]] = *val;
                }
            }
        }
    }
    Ok(d.into_iter().map(libm::sqrt).collect())
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q / 100.0 * (n - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Directed nearest-surface distances from each boundary voxel of `a` to
/// the boundary of `b`, then from `b` to `a`, pooled.
pub fn pooled_surface_distances(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<Vec<f64>> {
    let (ba, bb) = (boundary(a, dims)?, boundary(b, dims)?);
    let (da, db) = (distance_to(&ba, dims, spacing)?, distance_to(&bb, dims, spacing)?);
    let mut out: Vec<f64> = ba.iter().zip(&db).filter(|(s, _)| **s).map(|(_, d)| *d).collect();
    out.extend(bb.iter().zip(&da).filter(|(s, _)| **s).map(|(_, d)| *d));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95: f64,
    pub asd: f64,
    /// Set when either mask was empty; the distances then hold the grid
    /// diagonal.
    pub empty_mask: bool,
}

/// 95th percentile and mean of the pooled surface distances.
pub fn surface_distance_metrics(pred: &[bool], truth: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<SurfaceMetrics> {
    check_mask(pred, dims)?;
    check_mask(truth, dims)?;
    if !pred.iter().any(|&v| v) || !truth.iter().any(|&v| v) {
        let diag = libm::sqrt(
            dims.iter().zip(&spacing).map(|(&n, &h)| (n as f64 * h) * (n as f64 * h)).sum::<f64>(),
        );
        return Ok(SurfaceMetrics { hd95: diag, asd: diag, empty_mask: true });
    }
    let mut d = pooled_surface_distances(pred, truth, dims, spacing)?;
    d.sort_by(f64::total_cmp);
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    Ok(SurfaceMetrics { hd95: percentile(&d, 95.0), asd, empty_mask: false })
}

// ---- sliding window ------------------------------------------------------

/// Anything that maps a `[1, 1, X, Y, Z]` patch to `[1, C, X, Y, Z]` scores.
pub trait VolumeModel {
    fn num_classes(&self) -> usize;
    fn predict(&self, patch: &Tensor) -> Result<Tensor>;
}

impl VolumeModel for SegNet {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    /// Logits of the image-only network.
    fn predict(&self, patch: &Tensor) -> Result<Tensor> {
        if self.kind() != NetKind::Conv {
            return Err(Error::config("kind", "inference runs the image-only network"));
        }
        Ok(self.cs_forward(patch)?.logits)
    }
}

/// Window starts along one axis: every `stride`, plus a last window flush
/// with the far edge.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || stride > patch {
        return Err(Error::config("stride", format!("need 0 < stride <= patch, got stride {stride}, patch {patch}")));
    }
    if patch > len {
        return Err(Error::config("patch_size", format!("patch {patch} exceeds volume extent {len}")));
    }
    let mut out: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *out.last().expect("start 0 always fits") != len - patch {
        out.push(len - patch);
    }
    Ok(out)
}

/// Window-averaged scores over a whole volume.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedScores {
    /// `[C, X, Y, Z]`.
    pub scores: Tensor,
    /// Number of windows covering each voxel.
    pub counts: Vec<u32>,
}

impl WindowedScores {
    /// Channel argmax per voxel.
    pub fn argmax(&self) -> Vec<u8> {
        let c = self.scores.shape()[0];
        let s = self.scores.trailing(1);
        let d = self.scores.data();
        (0..s)
            .map(|j| (1..c).fold(0, |best, k| if d[k * s + j] > d[best * s + j] { k } else { best }) as u8)
            .collect()
    }

    /// Softmax over classes of the averaged scores.
    pub fn probabilities(&self) -> Tensor {
        let c = self.scores.shape()[0];
        let s = self.scores.trailing(1);
        let mut out = self.scores.clone();
        let d = out.data_mut();
        for j in 0..s {
            let m = (0..c).map(|k| d[k * s + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                d[k * s + j] = libm::exp(d[k * s + j] - m);
                total += d[k * s + j];
            }
            for k in 0..c {
                d[k * s + j] /= total;
            }
        }
        out
    }
}

/// Tiles `image` (grid `dims`) with `patch`-sized windows every `stride`
/// voxels and averages the model's scores where windows overlap.
pub fn sliding_window_infer<M: VolumeModel + ?Sized>(
    model: &M,
    image: &[f64],
    dims: [usize; 3],
    patch: [usize; 3],
    stride: [usize; 3],
) -> Result<WindowedScores> {
    let voxels: usize = dims.iter().product();
    if image.len() != voxels {
        return Err(Error::Shape(format!("image of {} voxels for grid {:?}", image.len(), dims)));
    }
    let starts: Vec<Vec<usize>> =
        (0..3).map(|a| window_starts(dims[a], patch[a], stride[a])).collect::<Result<_>>()?;
    let c = model.num_classes();
    let mut acc = vec![0.0; c * voxels];
    let mut counts = vec![0u32; voxels];
    let pv: usize = patch.iter().product();
    let mut buf = Vec::with_capacity(pv);
    for &ox in &starts[0] {
        for &oy in &starts[1] {
            for &oz in &starts[2] {
                buf.clear();
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        let at = ((ox + x) * dims[1] + oy + y) * dims[2] + oz;
                        buf.extend_from_slice(&image[at..at + patch[2]]);
                    }
                }
                let input = Tensor::new(&[1, 1, patch[0], patch[1], patch[2]], buf.clone())?;
                let out = model.predict(&input)?;
                if out.shape() != [1, c, patch[0], patch[1], patch[2]] {
                    return Err(Error::Shape(format!("model returned {:?} for patch {:?}", out.shape(), patch)));
                }
                let od = out.data();
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            let src = (x * patch[1] + y) * patch[2] + z;
                            let dst = ((ox + x) * dims[1] + oy + y) * dims[2] + oz + z;
                            counts[dst] += 1;
                            for k in 0..c {
                                acc[k * voxels + dst] += od[k * pv + src];
                            }
                        }
                    }
                }
            }
        }
    }
    for (k, v) in acc.iter_mut().enumerate() {
        *v /= counts[k % voxels] as f64;
    }
    Ok(WindowedScores { scores: Tensor::new(&[c, dims[0], dims[1], dims[2]], acc)?, counts })
}

// ---- reports -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { patch_size: [16, 16, 16], stride: [8, 8, 8] }
    }
}

/// Metrics of one volume, averaged over foreground classes. Distances are
/// in voxel units; the `_scaled` fields apply the volume spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    /// Percent.
    pub dice: f64,
    /// Percent.
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub hd95_scaled: f64,
    pub asd_scaled: f64,
    /// Some foreground class was empty in the prediction or the reference.
    pub empty_mask: bool,
}

/// Means over volumes, in the reported column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl MetricSummary {
    pub const COLUMNS: [&'static str; 4] = ["Dice", "Jaccard", "95HD", "ASD"];

    pub fn values(&self) -> [f64; 4] {
        [self.dice, self.jaccard, self.hd95, self.asd]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by id.
    pub volumes: Vec<VolumeMetrics>,
    pub mean: MetricSummary,
    pub config_hash: String,
}

/// All four metrics of `pred` against `truth`, averaged over foreground
/// classes `1..classes`.
pub fn volume_metrics(
    id: &str,
    pred: &[u8],
    truth: &[u8],
    classes: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<VolumeMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{id}: prediction of {} voxels, label of {}", pred.len(), truth.len())));
    }
    let mut m = VolumeMetrics {
        id: id.into(),
        dice: 0.0,
        jaccard: 0.0,
        hd95: 0.0,
        asd: 0.0,
        hd95_scaled: 0.0,
        asd_scaled: 0.0,
        empty_mask: false,
    };
    let fg = (classes - 1) as f64;
    for k in 1..classes as u8 {
        let a: Vec<bool> = pred.iter().map(|&v| v == k).collect();
        let b: Vec<bool> = truth.iter().map(|&v| v == k).collect();
        let (d, j) = overlap_metrics(&a, &b)?;
        let unit = surface_distance_metrics(&a, &b, dims, [1.0; 3])?;
        let scaled = surface_distance_metrics(&a, &b, dims, spacing)?;
        m.dice += 100.0 * d / fg;
        m.jaccard += 100.0 * j / fg;
        m.hd95 += unit.hd95 / fg;
        m.asd += unit.asd / fg;
        m.hd95_scaled += scaled.hd95 / fg;
        m.asd_scaled += scaled.asd / fg;
        m.empty_mask |= unit.empty_mask;
    }
    Ok(m)
}

/// Sliding-window inference, argmax and metrics on every labelled volume.
pub fn evaluate<M: VolumeModel + ?Sized>(
    model: &M,
    volumes: &[VolumeSample],
    config: &EvalConfig,
    config_hash: &str,
) -> Result<MetricReport> {
    if volumes.is_empty() {
        return Err(Error::config("volumes", "nothing to evaluate"));
    }
    let mut rows = Vec::with_capacity(volumes.len());
    for v in volumes {
        let truth = v.label.as_ref().ok_or_else(|| Error::config("label", format!("{} has no label", v.id)))?;
        let scores = sliding_window_infer(model, &v.image, v.dims, config.patch_size, config.stride)?;
        let pred = scores.argmax();
        rows.push(volume_metrics(&v.id, &pred, truth, model.num_classes(), v.dims, v.spacing)?);
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let n = rows.len() as f64;
    let mean = MetricSummary {
        dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
        hd95: rows.iter().map(|r| r.hd95).sum::<f64>() / n,
        asd: rows.iter().map(|r| r.asd).sum::<f64>() / n,
    };
    Ok(MetricReport { volumes: rows, mean, config_hash: config_hash.into() })
}
