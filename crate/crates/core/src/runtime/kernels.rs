// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-level numeric kernels. Values are stored as f32; every reduction
//! accumulates in f64 and rounds once at the end.

use crate::runtime::spec::{Activation, NormScheme, NORM_EPS, ROTARY_BASE};

/// `out = w · x + bias` with `w` stored `[rows, cols]`.
pub(crate) fn matvec(w: &[f32], cols: usize, bias: Option<&[f32]>, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0f64;
        for (a, b) in row.iter().zip(x) {
            acc += f64::from(*a) * f64::from(*b);
        }
        if let Some(b) = bias {
            acc += f64::from(b[r]);
        }
        *o = acc as f32;
    }
}

pub(crate) fn norm(scheme: NormScheme, x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    match scheme {
        NormScheme::PreLayernorm => {
            let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = x
                .iter()
                .map(|&v| {
                    let c = f64::from(v) - mean;
                    c * c
                })
                .sum::<f64>()
                / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            x.iter()
                .zip(weight.iter().zip(bias))
                .map(|(&v, (&w, &b))| ((f64::from(v) - mean) * inv * f64::from(w) + f64::from(b)) as f32)
                .collect()
        }
        NormScheme::PreRmsnorm => {
            let ms = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            x.iter()
                .zip(weight.iter().zip(bias))
                .map(|(&v, (&w, &b))| (f64::from(v) * inv * f64::from(w) + f64::from(b)) as f32)
                .collect()
        }
    }
}

pub(crate) fn activate(act: Activation, x: f32) -> f32 {
    let x = f64::from(x);
    let y = match act {
        Activation::Gelu => {
            const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
            0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
        }
        Activation::Silu => x / (1.0 + (-x).exp()),
    };
    y as f32
}

/// Rotates one head vector in place (half-split pairing: `i` with `i + hd/2`).
pub(crate) fn rotary(v: &mut [f32], position: usize) {
    let hd = v.len();
    let half = hd / 2;
    for i in 0..half {
        let freq = ROTARY_BASE.powf(-(2.0 * i as f64) / hd as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let a = f64::from(v[i]);
        let b = f64::from(v[i + half]);
        v[i] = (a * cos - b * sin) as f32;
        v[i + half] = (a * sin + b * cos) as f32;
    }
}

/// Softmax of f32 logits computed in f64.
pub(crate) fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (f64::from(l) - f64::from(max)).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_with_bias() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec(&w, 3, Some(&[0.5, -1.0]), &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-1.5, -3.0]);
    }

    #[test]
    fn gelu_is_odd_complement() {
        // gelu(x) - gelu(-x) == x for the tanh form as well.
        for x in [-3.0f32, -0.7, 0.0, 0.2, 5.0] {
            let d = activate(Activation::Gelu, x) - activate(Activation::Gelu, -x);
            assert!((d - x).abs() < 1e-6, "{x}: {d}");
        }
    }

    #[test]
    fn rmsnorm_unit_scale() {
        let y = norm(NormScheme::PreRmsnorm, &[3.0, 4.0], &[1.0, 1.0], &[0.0, 0.0]);
        let rms = (12.5f64 + 1e-5).sqrt();
        assert!((f64::from(y[0]) - 3.0 / rms).abs() < 1e-6);
    }

    #[test]
    fn layernorm_centres() {
        let y = norm(NormScheme::PreLayernorm, &[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3]);
        assert!(y.iter().map(|&v| f64::from(v)).sum::<f64>().abs() < 1e-6);
    }

    #[test]
    fn rotary_position_zero_is_identity() {
        let mut v = [1.0, 2.0, 3.0, 4.0];
        rotary(&mut v, 0);
        assert_eq!(v, [1.0, 2.0, 3.0, 4.0]);
        rotary(&mut v, 5);
        let norm: f32 = v.iter().map(|x| x * x).sum();
        assert!((norm - 30.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_ln2() {
        let p = softmax(&[std::f32::consts::LN_2, 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-7);
        assert!((p[1] - 0.25).abs() < 1e-7);
    }
}
