//! Volumes, synthetic datasets, splits, patch cropping and augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Rng, Tensor};

/// One scalar volume, row-major `[X, Y, Z]`, with an optional label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub dims: [usize; 3],
    pub image: Vec<f64>,
    pub label: Option<Vec<u8>>,
    /// Voxel size in mm per axis.
    pub spacing: [f64; 3],
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, dims: [usize; 3], image: Vec<f64>, label: Option<Vec<u8>>) -> Result<Self> {
        let s = VolumeSample { id: id.into(), dims, image, label, spacing: [1.0; 3] };
        s.validate()?;
        Ok(s)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.len() != self.voxels() {
            return Err(Error::Shape(format!("{}: {} values for dims {:?}", self.id, self.image.len(), self.dims)));
        }
        if let Some(l) = &self.label {
            if l.len() != self.voxels() {
                return Err(Error::Shape(format!("{}: label of {} for dims {:?}", self.id, l.len(), self.dims)));
            }
        }
        Ok(())
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn foreground_count(&self) -> usize {
        self.label.as_ref().map_or(0, |l| l.iter().filter(|&&v| v != 0).count())
    }
}

/// Rescales to zero mean and unit variance over the whole grid. Constant
/// grids become all zeros.
pub fn normalize(image: &mut [f64]) {
    let n = image.len().max(1) as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / libm::sqrt(var) } else { 0.0 };
    image.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

// ---- synthetic data ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: [usize; 3],
    pub count: usize,
    pub classes: usize,
    /// Standard deviation of additive Gaussian noise, relative to the
    /// foreground contrast of 1.
    pub noise: f64,
    /// Gaussian blur applied to intensity edges, in voxels.
    pub blur_sigma: f64,
    /// Semi-axis range of each ellipsoid, in voxels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Foreground contrast is drawn from `[contrast_min, 1]`; its sign is
    /// flipped with probability `invert_prob`.
    pub contrast_min: f64,
    pub invert_prob: f64,
    /// Unlabelled blobs added per volume with the same intensity law.
    pub distractors: usize,
    pub distractor_radius: f64,
    /// Amplitude of a smooth linear intensity ramp.
    pub bias_field: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: [16, 16, 16],
            count: 40,
            classes: 2,
            noise: 0.3,
            blur_sigma: 1.0,
            radius_min: 3.0,
            radius_max: 5.0,
            contrast_min: 0.6,
            invert_prob: 0.0,
            distractors: 0,
            distractor_radius: 1.5,
            bias_field: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 8) {
            return Err(Error::config("size", format!("every axis must be at least 8, got {:?}", self.size)));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "must be at least 2"));
        }
        if self.classes > 255 {
            return Err(Error::config("classes", "at most 255 supported"));
        }
        if self.count == 0 {
            return Err(Error::config("count", "must be at least 1"));
        }
        if !(self.radius_min >= 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::config("radius_min", "need 0 <= radius_min <= radius_max"));
        }
        let smallest = *self.size.iter().min().unwrap() as f64;
        if 2.0 * self.radius_max + 2.0 > smallest {
            return Err(Error::config(
                "radius_max",
                format!("radius {} does not fit a grid of side {}", self.radius_max, smallest),
            ));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("blur_sigma", self.blur_sigma),
            ("distractor_radius", self.distractor_radius),
            ("bias_field", self.bias_field),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.contrast_min) {
            return Err(Error::config("contrast_min", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.invert_prob) {
            return Err(Error::config("invert_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        if self.radii.iter().any(|&r| r <= 0.0) {
            return false;
        }
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]) / self.radii[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    fn random(rng: &mut Rng, size: [usize; 3], rmin: f64, rmax: f64) -> Self {
        let radii = [(); 3].map(|_| if rmax > rmin { rng.gen_range(rmin..=rmax) } else { rmin });
        let center = [0, 1, 2].map(|a| {
            let r = libm::ceil(radii[a]);
            let lo = r;
            let hi = size[a] as f64 - 1.0 - r;
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                (size[a] as f64 - 1.0) / 2.0
            }
        });
        Ellipsoid { center, radii }
    }
}

/// Separable Gaussian blur with edge replication, truncated at 3σ.
pub fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let coord = ((i / strides[axis]) % dims[axis]) as isize;
            let base = i as isize - coord * strides[axis] as isize;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let c = (coord + j as isize - radius).clamp(0, n - 1);
                    k * cur[(base + c * strides[axis] as isize) as usize]
                })
                .sum();
        }
        cur = next;
    }
    cur
}

fn synth_one(spec: &SyntheticSpec, index: usize) -> VolumeSample {
    // Each volume has its own stream so that volume i does not depend on
    // how many draws earlier volumes made.
    let mut rng = Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let dims = spec.size;
    let n: usize = dims.iter().product();
    let mut label = vec![0u8; n];
    let mut fg = vec![0.0; n];
    let coords = |i: usize| [(i / (dims[1] * dims[2])) as f64, ((i / dims[2]) % dims[1]) as f64, (i % dims[2]) as f64];

    let mut present: Vec<u8> = (1..spec.classes as u8).collect();
    present.shuffle(&mut rng);
    let k = rng.gen_range(1..=present.len());
    for &class in &present[..k] {
        let e = Ellipsoid::random(&mut rng, dims, spec.radius_min, spec.radius_max);
        let contrast = rng.gen_range(spec.contrast_min..=1.0) * if rng.gen_bool(spec.invert_prob) { -1.0 } else { 1.0 };
        for i in 0..n {
            if e.contains(coords(i)) {
                label[i] = class;
                fg[i] = contrast;
            }
        }
    }
    for _ in 0..spec.distractors {
        let r = spec.distractor_radius;
        let e = Ellipsoid::random(&mut rng, dims, r, r);
        let contrast = rng.gen_range(spec.contrast_min..=1.0) * if rng.gen_bool(spec.invert_prob) { -1.0 } else { 1.0 };
        for i in 0..n {
            if label[i] == 0 && e.contains(coords(i)) {
                fg[i] = contrast;
            }
        }
    }
    let mut image = gaussian_blur(&fg, dims, spec.blur_sigma);
    let dir: [f64; 3] = [(); 3].map(|_| rng.gen_range(-1.0..1.0));
    for (i, v) in image.iter_mut().enumerate() {
        let c = coords(i);
        let ramp: f64 = (0..3).map(|a| dir[a] * (c[a] / dims[a] as f64 - 0.5)).sum();
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += spec.bias_field * ramp + spec.noise * z;
    }
    normalize(&mut image);
    VolumeSample { id: format!("synth-{index:04}"), dims, image, label: Some(label), spacing: [1.0; 3] }
}

/// Volumes with ellipsoidal structures, blurred edges and noise; labels are
/// the unblurred masks. A pure function of `spec`.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| synth_one(spec, i)).collect())
}

// ---- splits --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<VolumeSample>,
    /// Training view without labels.
    pub unlabeled: Vec<VolumeSample>,
    /// Labels removed from the unlabelled volumes, by id, for evaluation.
    pub held_out: Vec<(String, Vec<u8>)>,
    pub seed: u64,
}

/// Deterministic shuffle, then the first `labeled_count` keep their labels.
pub fn split_dataset(samples: &[VolumeSample], labeled_count: usize, seed: u64) -> Result<DatasetSplit> {
    if labeled_count == 0 || labeled_count >= samples.len() {
        return Err(Error::config(
            "labeled_count",
            format!("must lie in 1..{}, got {labeled_count}", samples.len()),
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::config("samples", format!("{} has no label", s.id)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut Rng::seed_from_u64(seed));
    let labeled = order[..labeled_count].iter().map(|&i| samples[i].clone()).collect();
    let mut unlabeled = Vec::new();
    let mut held_out = Vec::new();
    for &i in &order[labeled_count..] {
        let mut s = samples[i].clone();
        held_out.push((s.id.clone(), s.label.take().expect("checked above")));
        unlabeled.push(s);
    }
    Ok(DatasetSplit { labeled, unlabeled, held_out, seed })
}

// ---- patches and augmentation --------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    Random,
    Center,
}

fn extract<T: Copy>(src: &[T], dims: [usize; 3], off: [usize; 3], patch: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(patch.iter().product());
    for x in 0..patch[0] {
        for y in 0..patch[1] {
            let start = ((off[0] + x) * dims[1] + off[1] + y) * dims[2] + off[2];
            out.extend_from_slice(&src[start..start + patch[2]]);
        }
    }
    out
}

/// Offset that [`crop_patch`] would use.
pub fn crop_offset(dims: [usize; 3], patch: [usize; 3], mode: CropMode, rng: &mut Rng) -> Result<[usize; 3]> {
    if (0..3).any(|a| patch[a] > dims[a] || patch[a] == 0) {
        return Err(Error::Shape(format!("patch {:?} does not fit volume {:?}", patch, dims)));
    }
    Ok(match mode {
        CropMode::Center => [0, 1, 2].map(|a| (dims[a] - patch[a]) / 2),
        CropMode::Random => [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - patch[a])),
    })
}

/// Crops image and label at the same offset.
pub fn crop_patch(sample: &VolumeSample, patch: [usize; 3], mode: CropMode, rng: &mut Rng) -> Result<VolumeSample> {
    let off = crop_offset(sample.dims, patch, mode, rng)?;
    Ok(VolumeSample {
        id: sample.id.clone(),
        dims: patch,
        image: extract(&sample.image, sample.dims, off, patch),
        label: sample.label.as_ref().map(|l| extract(l, sample.dims, off, patch)),
        spacing: sample.spacing,
    })
}

/// A flip/rotation: flips per axis, then `quarter_turns` rotations in the
/// plane of axes `plane` (skipped when those axes differ in length).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub flips: [bool; 3],
    pub plane: (usize, usize),
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { flips: [false; 3], plane: (0, 1), quarter_turns: 0 };

    pub fn random(rng: &mut Rng) -> Self {
        let flips = [(); 3].map(|_| rng.gen_bool(0.5));
        let plane = [(0, 1), (0, 2), (1, 2)][rng.gen_range(0..3)];
        Transform { flips, plane, quarter_turns: rng.gen_range(0..4) }
    }

    /// Destination index of every source voxel, and the output dims.
    pub fn mapping(&self, dims: [usize; 3]) -> (Vec<usize>, [usize; 3]) {
        let (a, b) = self.plane;
        let turns = if dims[a] == dims[b] { self.quarter_turns % 4 } else { 0 };
        let n: usize = dims.iter().product();
        let mut out = vec![0; n];
        for (i, dst) in out.iter_mut().enumerate() {
            let mut c = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            for ax in 0..3 {
                if self.flips[ax] {
                    c[ax] = dims[ax] - 1 - c[ax];
                }
            }
            for _ in 0..turns {
                let (u, v) = (c[a], c[b]);
                c[a] = v;
                c[b] = dims[a] - 1 - u;
            }
            *dst = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
        }
        (out, dims)
    }

    pub fn apply<T: Copy + Default>(&self, data: &[T], dims: [usize; 3]) -> Vec<T> {
        let (map, _) = self.mapping(dims);
        let mut out = vec![T::default(); data.len()];
        for (src, &dst) in map.iter().enumerate() {
            out[dst] = data[src];
        }
        out
    }
}

/// Applies one random flip/rotation to image and label together.
pub fn augment(sample: &VolumeSample, rng: &mut Rng) -> VolumeSample {
    apply_transform(sample, &Transform::random(rng))
}

pub fn apply_transform(sample: &VolumeSample, t: &Transform) -> VolumeSample {
    VolumeSample {
        id: sample.id.clone(),
        dims: sample.dims,
        image: t.apply(&sample.image, sample.dims),
        label: sample.label.as_ref().map(|l| t.apply(l, sample.dims)),
        spacing: sample.spacing,
    }
}

/// Stacks equally sized samples into `[N, 1, X, Y, Z]`.
pub fn stack_images(samples: &[&VolumeSample]) -> Result<Tensor> {
    let dims = samples.first().map(|s| s.dims).ok_or_else(|| Error::Shape(String::from("empty batch")))?;
    if samples.iter().any(|s| s.dims != dims) {
        return Err(Error::Shape(String::from("batch volumes differ in size")));
    }
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(&[samples.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// Concatenated labels of `samples`, all of which must be labelled.
pub fn stack_labels(samples: &[&VolumeSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend_from_slice(s.label.as_ref().ok_or_else(|| Error::config("label", format!("{} is unlabelled", s.id)))?);
    }
    Ok(out)
}

/// `[N, C, ...]` 0/1 one-hot of `labels` laid out as `N` grids of `s`.
pub fn onehot01(labels: &[u8], n: usize, classes: usize, spatial: &[usize]) -> Result<Tensor> {
    let s: usize = spatial.iter().product();
    if labels.len() != n * s {
        return Err(Error::Shape(format!("{} labels for {n} grids of {s}", labels.len())));
    }
    let mut data = vec![0.0; n * classes * s];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Range(format!("label {l} with {classes} classes")));
        }
        let (b, j) = (i / s, i % s);
        data[(b * classes + l) * s + j] = 1.0;
    }
    let mut shape = vec![n, classes];
    shape.extend_from_slice(spatial);
    Tensor::new(&shape, data)
}
