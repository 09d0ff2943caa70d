//! Discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 transform; any other length
//! falls back to the direct O(n²) sum.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::tensor::{Scalar, Tensor};
use crate::error::{dim_err, Result};

/// Forward DFT, `X_k = Σ_n x_n e^{-j2πkn/N}`.
pub fn dft(input: &[Complex64]) -> Vec<Complex64> {
    let n = input.len();
    if n.is_power_of_two() {
        let mut buf = input.to_vec();
        fft_radix2(&mut buf);
        buf
    } else {
        naive_dft(input)
    }
}

pub fn naive_dft(input: &[Complex64]) -> Vec<Complex64> {
    let n = input.len();
    (0..n)
        .map(|k| {
            input
                .iter()
                .enumerate()
                .map(|(t, &x)| {
                    let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    x * Complex64::from_polar(1.0, ang)
                })
                .sum()
        })
        .collect()
}

fn fft_radix2(buf: &mut [Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Per-column DFT magnitude along the slow-time (first) axis of a `K×L×Nr` tensor.
pub fn fft_magnitude_slow_time<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, l, nr) = x.dims3()?;
    if k == 0 {
        return dim_err("slow-time axis is empty");
    }
    let mut out = Tensor::zeros(&[k, l, nr]);
    let mut col = vec![Complex64::new(0.0, 0.0); k];
    for j in 0..l {
        for r in 0..nr {
            for (t, c) in col.iter_mut().enumerate() {
                *c = Complex64::new(x.get3(t, j, r).as_f64(), 0.0);
            }
            let spec = dft(&col);
            for (t, s) in spec.iter().enumerate() {
                out.data_mut()[(t * l + j) * nr + r] = T::of(s.norm());
            }
        }
    }
    Ok(out)
}
