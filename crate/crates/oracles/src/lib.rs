//! Brute-force reference computations for checking `diffcl-core`.
//!
//! Everything here is written from the defining formulas with plain loops
//! and shares no code with the production kernels. Inputs are kept tiny:
//! functions with superlinear cost refuse grids with any axis above
//! [`MAX_AXIS`].

use std::f64::consts::PI;

/// Largest grid axis accepted by the cubic-cost oracles.
pub const MAX_AXIS: usize = 8;

/// An oracle value with the cost of producing it and the comparison
/// tolerance tests should apply.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    /// Rough count of inner-loop operations.
    pub cost: u64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OracleError {
    TooLarge { dims: [usize; 3] },
    Shape(String),
}

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleError::TooLarge { dims } => write!(f, "grid {dims:?} exceeds the oracle cap of {MAX_AXIS} per axis"),
            OracleError::Shape(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for OracleError {}

fn capped(dims: [usize; 3]) -> Result<(), OracleError> {
    if dims.iter().any(|&n| n > MAX_AXIS || n == 0) {
        return Err(OracleError::TooLarge { dims });
    }
    Ok(())
}

// ---- selective scan --------------------------------------------------------

/// One scan problem: `x` is `[len][channels]`, `a_bar` and `b_bar` are
/// `[len][channels][state]`, `c` is `[len][state]`.
#[derive(Clone, Debug)]
pub struct ScanCase {
    pub x: Vec<Vec<f64>>,
    pub a_bar: Vec<Vec<Vec<f64>>>,
    pub b_bar: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
}

/// `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t h_t`, `h_0 = 0`, exactly as
/// written, per channel.
pub fn naive_scan(case: &ScanCase) -> OracleResult<Vec<Vec<f64>>> {
    let len = case.x.len();
    let channels = case.x.first().map_or(0, Vec::len);
    let state = case.c.first().map_or(0, Vec::len);
    let mut h = vec![vec![0.0; state]; channels];
    let mut y = vec![vec![0.0; channels]; len];
    for t in 0..len {
        for d in 0..channels {
            for s in 0..state {
                h[d][s] = case.a_bar[t][d][s] * h[d][s] + case.b_bar[t][d][s] * case.x[t][d];
            }
            let mut out = 0.0;
            for s in 0..state {
                out += case.c[t][s] * h[d][s];
            }
            y[t][d] = out;
        }
    }
    OracleResult { value: y, cost: (len * channels * state) as u64, tolerance: 1e-5 }
}

// ---- Fourier transforms ----------------------------------------------------

/// Direct triple-sum DFT of a complex grid given as `(re, im)` pairs in
/// row-major order. The inverse includes the `1/N` factor.
pub fn dft3(grid: &[(f64, f64)], dims: [usize; 3], inverse: bool) -> Result<OracleResult<Vec<(f64, f64)>>, OracleError> {
    capped(dims)?;
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    if grid.len() != n {
        return Err(OracleError::Shape(format!("grid of {} values for {dims:?}", grid.len())));
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![(0.0, 0.0); n];
    for kx in 0..nx {
        for ky in 0..ny {
            for kz in 0..nz {
                let (mut re, mut im) = (0.0, 0.0);
                for x in 0..nx {
                    for y in 0..ny {
                        for z in 0..nz {
                            let phase = sign
                                * 2.0
                                * PI
                                * ((kx * x) as f64 / nx as f64 + (ky * y) as f64 / ny as f64 + (kz * z) as f64 / nz as f64);
                            let (c, s) = (phase.cos(), phase.sin());
                            let (a, b) = grid[(x * ny + y) * nz + z];
                            re += a * c - b * s;
                            im += a * s + b * c;
                        }
                    }
                }
                if inverse {
                    re /= n as f64;
                    im /= n as f64;
                }
                out[(kx * ny + ky) * nz + kz] = (re, im);
            }
        }
    }
    Ok(OracleResult { value: out, cost: (n * n) as u64, tolerance: 1e-9 })
}

/// High-pass filter through [`dft3`]: frequency bins farther than
/// `threshold · min(dims)/2` from the zero frequency (measured on the
/// centred index `(k + n/2) mod n − n/2`) survive; the rest are zeroed.
pub fn high_pass_dft(grid: &[f64], dims: [usize; 3], threshold: f64) -> Result<OracleResult<Vec<f64>>, OracleError> {
    let complex: Vec<(f64, f64)> = grid.iter().map(|&v| (v, 0.0)).collect();
    let mut spectrum = dft3(&complex, dims, false)?.value;
    let r_max = *dims.iter().min().unwrap() as f64 / 2.0;
    for kx in 0..dims[0] {
        for ky in 0..dims[1] {
            for kz in 0..dims[2] {
                let mut r2 = 0.0;
                for (k, n) in [(kx, dims[0]), (ky, dims[1]), (kz, dims[2])] {
                    let centred = ((k + n / 2) % n) as f64 - (n / 2) as f64;
                    r2 += centred * centred;
                }
                if r2.sqrt() / r_max <= threshold {
                    spectrum[(kx * dims[1] + ky) * dims[2] + kz] = (0.0, 0.0);
                }
            }
        }
    }
    let back = dft3(&spectrum, dims, true)?;
    Ok(OracleResult { value: back.value.into_iter().map(|(re, _)| re).collect(), cost: 2 * back.cost, tolerance: 1e-6 })
}

// ---- surface distances and overlap -----------------------------------------

fn voxel(i: usize, dims: [usize; 3]) -> [i64; 3] {
    [(i / (dims[1] * dims[2])) as i64, ((i / dims[2]) % dims[1]) as i64, (i % dims[2]) as i64]
}

/// Mask voxels with a face neighbour that is background or off the grid.
pub fn boundary_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let inside = |p: [i64; 3]| {
        (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64)
            && mask[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize]
    };
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| voxel(i, dims))
        .filter(|p| steps.iter().any(|s| !inside([p[0] + s[0], p[1] + s[1], p[2] + s[2]])))
        .collect()
}

/// Every boundary voxel of `a` to its nearest boundary voxel of `b`, then
/// the reverse, by all-pairs search. `None` when either mask is empty.
pub fn exhaustive_surface_distances(
    a: &[bool],
    b: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<OracleResult<Option<Vec<f64>>>, OracleError> {
    capped(dims)?;
    let n = dims.iter().product::<usize>();
    if a.len() != n || b.len() != n {
        return Err(OracleError::Shape(format!("masks of {} and {} voxels for {dims:?}", a.len(), b.len())));
    }
    let (sa, sb) = (boundary_voxels(a, dims), boundary_voxels(b, dims));
    let cost = 2 * (sa.len() * sb.len()) as u64;
    if sa.is_empty() || sb.is_empty() {
        return Ok(OracleResult { value: None, cost, tolerance: 1e-9 });
    }
    let dist = |p: &[i64; 3], q: &[i64; 3]| {
        (0..3).map(|k| ((p[k] - q[k]) as f64 * spacing[k]).powi(2)).sum::<f64>().sqrt()
    };
    let nearest = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect()
    };
    let mut all = nearest(&sa, &sb);
    all.extend(nearest(&sb, &sa));
    Ok(OracleResult { value: Some(all), cost, tolerance: 1e-9 })
}

/// Percentile by the linear rule on a copy sorted here.
pub fn linear_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let below = rank.floor();
    let frac = rank - below;
    let i = below as usize;
    if i + 1 >= v.len() {
        v[v.len() - 1]
    } else {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    }
}

/// `(hd95, asd)` from the exhaustive distances, or `None` for an empty mask.
pub fn surface_metrics(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<Option<(f64, f64)>, OracleError> {
    let d = exhaustive_surface_distances(a, b, dims, spacing)?.value;
    Ok(d.map(|d| (linear_percentile(&d, 95.0), d.iter().sum::<f64>() / d.len() as f64)))
}

/// `(dice, jaccard)` from set counts; both empty gives `(1, 1)`.
pub fn overlap(a: &[bool], b: &[bool]) -> (f64, f64) {
    let count = |f: &dyn Fn(bool, bool) -> bool| a.iter().zip(b).filter(|(x, y)| f(**x, **y)).count() as f64;
    let inter = count(&|x, y| x && y);
    let union = count(&|x, y| x || y);
    let sizes = count(&|x, _| x) + count(&|_, y| y);
    if sizes == 0.0 {
        (1.0, 1.0)
    } else {
        (2.0 * inter / sizes, inter / union)
    }
}

// ---- similarity, pair mining and contrastive loss --------------------------

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Positives: the `k` candidates with the largest summed similarity to the
/// anchors. Negatives: among the rest, the `k` with the largest summed
/// dissimilarity `Σ (1 − cos)`. Found by sorting every candidate; ties go
/// to the lower index.
pub fn exhaustive_pairs(anchors: &[Vec<f64>], candidates: &[Vec<f64>], k: usize) -> (Vec<usize>, Vec<usize>) {
    let sim: Vec<f64> = candidates.iter().map(|b| anchors.iter().map(|a| cosine(a, b)).sum()).collect();
    let dis: Vec<f64> = candidates.iter().map(|b| anchors.iter().map(|a| 1.0 - cosine(a, b)).sum()).collect();
    let mut by_sim: Vec<usize> = (0..candidates.len()).collect();
    by_sim.sort_by(|&i, &j| sim[j].partial_cmp(&sim[i]).unwrap().then(i.cmp(&j)));
    let positives: Vec<usize> = by_sim[..k].to_vec();
    let mut rest: Vec<usize> = (0..candidates.len()).filter(|i| !positives.contains(i)).collect();
    rest.sort_by(|&i, &j| dis[j].partial_cmp(&dis[i]).unwrap().then(i.cmp(&j)));
    (positives, rest[..k].to_vec())
}

/// `Σ_anchor Σ_pos −log(e^{c_pos/τ} / (e^{c_pos/τ} + Σ_neg e^{c_neg/τ}))`
/// for one class.
pub fn contrastive_class_loss(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    positives: &[usize],
    negatives: &[usize],
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for a in anchors {
        let neg: f64 = negatives.iter().map(|&j| (cosine(a, &candidates[j]) / tau).exp()).sum();
        for &p in positives {
            let pos = (cosine(a, &candidates[p]) / tau).exp();
            total += -(pos / (pos + neg)).ln();
        }
    }
    total
}

// ---- segmentation losses and warmup ----------------------------------------

/// Soft Dice loss for `[n][c][s]` probabilities and targets: one minus the
/// mean over classes of `(2 Σ p y + smooth) / (Σ p + Σ y + smooth)`.
pub fn dice_loss(p: &[Vec<Vec<f64>>], y: &[Vec<Vec<f64>>], smooth: f64) -> f64 {
    let classes = p[0].len();
    let mut score = 0.0;
    for c in 0..classes {
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for n in 0..p.len() {
            for s in 0..p[n][c].len() {
                inter += p[n][c][s] * y[n][c][s];
                sp += p[n][c][s];
                sy += y[n][c][s];
            }
        }
        score += (2.0 * inter + smooth) / (sp + sy + smooth);
    }
    1.0 - score / classes as f64
}

/// Mean over voxels of `−Σ_c y log(max(p, eps))`.
pub fn cross_entropy(p: &[Vec<Vec<f64>>], y: &[Vec<Vec<f64>>], eps: f64) -> f64 {
    let mut total = 0.0;
    let mut voxels = 0usize;
    for n in 0..p.len() {
        let s_len = p[n][0].len();
        for s in 0..s_len {
            for c in 0..p[n].len() {
                if y[n][c][s] != 0.0 {
                    total -= y[n][c][s] * p[n][c][s].max(eps).ln();
                }
            }
            voxels += 1;
        }
    }
    total / voxels as f64
}

/// `2 e^{−5 (1 − t/t_max)²}`.
pub fn gaussian_warmup(t: f64, t_max: f64) -> f64 {
    let r = 1.0 - t / t_max;
    2.0 * (-5.0 * r * r).exp()
}

// ---- noise schedule ----------------------------------------------------------

/// `ᾱ_t = Π_{s ≤ t} (1 − β_s)` for a linear `β` from `beta_start` to
/// `beta_end` over `steps` steps (`t` is 1-based; `ᾱ_0 = 1`).
pub fn alpha_bar(t: usize, steps: usize, beta_start: f64, beta_end: f64) -> f64 {
    (1..=t)
        .map(|s| {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (s - 1) as f64 / (steps - 1) as f64
            };
            1.0 - beta
        })
        .product()
}

// ---- differentiation ---------------------------------------------------------

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` at every
/// coordinate.
pub fn central_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_of_ones_is_a_running_sum() {
        let n = 6;
        let case = ScanCase {
            x: vec![vec![1.0]; n],
            a_bar: vec![vec![vec![1.0]]; n],
            b_bar: vec![vec![vec![1.0]]; n],
            c: vec![vec![1.0]; n],
        };
        let y = naive_scan(&case).value;
        for (t, row) in y.iter().enumerate() {
            assert_eq!(row[0], (t + 1) as f64);
        }
    }

    #[test]
    fn length_one_scan() {
        let case = ScanCase {
            x: vec![vec![2.0]],
            a_bar: vec![vec![vec![0.3, 0.9]]],
            b_bar: vec![vec![vec![0.5, -1.0]]],
            c: vec![vec![4.0, 0.25]],
        };
        assert_eq!(naive_scan(&case).value[0][0], 4.0 * 0.5 * 2.0 + 0.25 * -1.0 * 2.0);
    }

    #[test]
    fn delta_has_flat_spectrum_and_constant_has_only_dc() {
        let dims = [2, 3, 4];
        let mut delta = vec![(0.0, 0.0); 24];
        delta[0] = (1.0, 0.0);
        for (re, im) in dft3(&delta, dims, false).unwrap().value {
            assert!((re - 1.0).abs() < 1e-12 && im.abs() < 1e-12);
        }
        let spec = dft3(&vec![(2.0, 0.0); 24], dims, false).unwrap().value;
        assert!((spec[0].0 - 48.0).abs() < 1e-12);
        assert!(spec[1..].iter().all(|(re, im)| re.abs() < 1e-12 && im.abs() < 1e-12));
    }

    #[test]
    fn oversized_grid_is_refused() {
        assert_eq!(dft3(&[], [9, 1, 1], false).unwrap_err(), OracleError::TooLarge { dims: [9, 1, 1] });
    }

    #[test]
    fn cube_corners_are_sqrt3_apart() {
        let dims = [2, 2, 2];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[0] = true;
        b[7] = true;
        let d = exhaustive_surface_distances(&a, &b, dims, [1.0; 3]).unwrap().value.unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|v| (v - 3f64.sqrt()).abs() < 1e-15));
        assert!(exhaustive_surface_distances(&a, &[false; 8], dims, [1.0; 3]).unwrap().value.is_none());
    }

    #[test]
    fn identical_masks_are_zero_apart() {
        let m: Vec<bool> = (0..27).map(|i| i % 4 != 0).collect();
        let d = exhaustive_surface_distances(&m, &m, [3, 3, 3], [1.0; 3]).unwrap().value.unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_similarity_contrastive_is_log_one_plus_k() {
        let a = vec![vec![1.0, 0.0]];
        let cands = vec![vec![1.0, 1.0]; 6];
        let loss = contrastive_class_loss(&a, &cands, &[0], &[1, 2, 3], 0.5);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn central_gradient_of_a_quadratic() {
        let g = central_gradient(&mut |x: &[f64]| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
