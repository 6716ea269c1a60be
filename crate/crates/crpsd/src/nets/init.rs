//! Weight initialization: scaled-normal for convolutions, closed-form
//! bilinear interpolation for upsampling kernels.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Scalar, Tensor};

/// He-style conv weight: zero-mean normal with variance `2 / fan_in`.
/// Sampling happens in `f64` so every element type sees the same
/// sequence.
pub(crate) fn he_conv<S: Scalar>(
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    rng: &mut impl Rng,
) -> Tensor<S> {
    let fan_in = (in_c * kh * kw) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..out_c * in_c * kh * kw)
        .map(|_| S::from_f64(normal.sample(rng)))
        .collect();
    Tensor::from_vec([out_c, in_c, kh, kw], data).expect("init shape")
}

pub(crate) fn zero_bias<S: Scalar>(out_c: usize) -> Tensor<S> {
    Tensor::zeros([1, 1, 1, out_c])
}

/// 1-D bilinear interpolation profile of length `k`: the classic
/// upsampling kernel whose taps sum to 1 in every output phase when
/// `k = 2 * stride`.
pub fn bilinear_kernel(k: usize) -> Vec<f64> {
    let factor = k.div_ceil(2);
    let center = if k % 2 == 1 {
        (factor - 1) as f64
    } else {
        factor as f64 - 0.5
    };
    (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect()
}

/// Transposed-conv weight `(in_c, out_c, k, k)` carrying the separable
/// bilinear profile.
///
/// Each output channel reads the input channels congruent to it modulo
/// `out_c`, normalized by how many it reads, so a constant input stays
/// constant (away from the border) while different output channels see
/// different inputs and can diverge under training.
pub(crate) fn bilinear_tconv<S: Scalar>(in_c: usize, out_c: usize, k: usize) -> Tensor<S> {
    let profile = bilinear_kernel(k);
    let mut t = Tensor::zeros([in_c, out_c, k, k]);
    let mut sources = vec![0usize; out_c];
    for ic in 0..in_c {
        sources[ic % out_c] += 1;
    }
    for ic in 0..in_c {
        let oc = ic % out_c;
        if sources[oc] == 0 {
            continue;
        }
        let scale = 1.0 / sources[oc] as f64;
        for ky in 0..k {
            for kx in 0..k {
                t.set(
                    ic,
                    oc,
                    ky,
                    kx,
                    S::from_f64(profile[ky] * profile[kx] * scale),
                );
            }
        }
    }
    t
}
