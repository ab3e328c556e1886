//! Fast Fourier transforms over 1D and 3D complex grids.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length goes through Bluestein's chirp-z reformulation on a padded
//! power-of-two buffer. Forward transforms are unnormalized and inverse
//! transforms carry the `1/n` factor, matching the usual DFT pair.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

pub use num_complex::Complex64;

fn twiddle(angle: f64) -> Complex64 {
    Complex64::new(libm::cos(angle), libm::sin(angle))
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let roots: Vec<Complex64> = (0..half).map(|k| twiddle(step * k as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * roots[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // k^2 mod 2n keeps the chirp angle small for long inputs.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            twiddle(sign * PI * k2 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}

/// In-place transform of one sequence.
pub fn fft(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
    if inverse {
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// In-place separable transform of a row-major `dims[0] × dims[1] × dims[2]`
/// grid.
pub fn fft3(data: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let [nx, ny, nz] = dims;
    assert_eq!(data.len(), nx * ny * nz);
    let mut line = vec![Complex64::new(0.0, 0.0); nx.max(ny).max(nz)];
    for axis in 0..3 {
        let (len, stride) = match axis {
            0 => (nx, ny * nz),
            1 => (ny, nz),
            _ => (nz, 1),
        };
        if len <= 1 {
            continue;
        }
        for base in 0..data.len() {
            // `base` must be the first element of a line along `axis`.
            let coord = (base / stride) % len;
            if coord != 0 {
                continue;
            }
            let line = &mut line[..len];
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[base + i * stride];
            }
            fft(line, inverse);
            for (i, v) in line.iter().enumerate() {
                data[base + i * stride] = *v;
            }
        }
    }
}

fn roll3<T: Copy>(data: &[T], dims: [usize; 3], shift: [usize; 3]) -> Vec<T> {
    let [nx, ny, nz] = dims;
    let mut out = data.to_vec();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let (tx, ty, tz) = ((x + shift[0]) % nx, (y + shift[1]) % ny, (z + shift[2]) % nz);
                out[(tx * ny + ty) * nz + tz] = data[(x * ny + y) * nz + z];
            }
        }
    }
    out
}

/// Moves the zero-frequency bin of every axis to index `n / 2`.
pub fn fftshift3<T: Copy>(data: &[T], dims: [usize; 3]) -> Vec<T> {
    roll3(data, dims, dims.map(|n| n / 2))
}

/// Inverse of [`fftshift3`] (differs from it only for odd lengths).
pub fn ifftshift3<T: Copy>(data: &[T], dims: [usize; 3]) -> Vec<T> {
    roll3(data, dims, dims.map(|n| (n - n / 2) % n.max(1)))
}
