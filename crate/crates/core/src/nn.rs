//! Convolution and activation primitives with hand-written backward passes.
//!
//! Parameters live in one flat buffer; each layer records offsets into it.

use serde::{Deserialize, Serialize};

use crate::tensor::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvSpec {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight_offset..self.weight_offset + self.weight_len()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias_offset..self.bias_offset + self.out_channels]
    }
}

/// Unfolds `k×k` patches into a `(C·k·k) × (Ho·Wo)` row-major matrix.
pub fn im2col(x: &[f64], h: usize, w: usize, spec: &ConvSpec) -> Vec<f64> {
    let (ho, wo) = spec.output_size(h, w);
    let k = spec.kernel;
    let p = ho * wo;
    let mut cols = vec![0.0; spec.patch_len() * p];
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &[f64], h: usize, w: usize, spec: &ConvSpec) -> Vec<f64> {
    let (ho, wo) = spec.output_size(h, w);
    let k = spec.kernel;
    let p = ho * wo;
    let mut x = vec![0.0; spec.in_channels * h * w];
    for c in 0..spec.in_channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns `(output, unfolded input)`; the latter is kept for the backward pass.
pub fn conv_forward(params: &[f64], spec: &ConvSpec, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = spec.output_size(h, w);
    let p = ho * wo;
    let cols = im2col(x, h, w, spec);
    let mut out = vec![0.0; spec.out_channels * p];
    for (o, &b) in spec.bias(params).iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
    }
    gemm(
        spec.out_channels,
        spec.patch_len(),
        p,
        spec.weights(params),
        false,
        &cols,
        false,
        &mut out,
        true,
    );
    (out, cols)
}

/// Backward through one convolution.
///
/// Accumulates parameter gradients into `param_grads` when given and returns
/// the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    params: &[f64],
    spec: &ConvSpec,
    cols: &[f64],
    d_out: &[f64],
    h: usize,
    w: usize,
    param_grads: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let (ho, wo) = spec.output_size(h, w);
    let p = ho * wo;
    if let Some(g) = param_grads {
        let (gw, rest) = g[spec.weight_offset..].split_at_mut(spec.weight_len());
        gemm(
            spec.out_channels,
            p,
            spec.patch_len(),
            d_out,
            false,
            cols,
            true,
            gw,
            true,
        );
        let gb_start = spec.bias_offset - spec.weight_offset - spec.weight_len();
        let gb = &mut rest[gb_start..gb_start + spec.out_channels];
        for (o, b) in gb.iter_mut().enumerate() {
            *b += d_out[o * p..(o + 1) * p].iter().sum::<f64>();
        }
    }
    if !want_input {
        return None;
    }
    let mut d_cols = vec![0.0; spec.patch_len() * p];
    gemm(
        spec.patch_len(),
        spec.out_channels,
        p,
        spec.weights(params),
        true,
        d_out,
        false,
        &mut d_cols,
        false,
    );
    Some(col2im(&d_cols, h, w, spec))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// SiLU activation `z·σ(z)`; smooth everywhere, which keeps finite-difference
/// checks free of kinks.
#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Backward through softmax: `dz = p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64], d_logits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    for ((dz, &p), &g) in d_logits.iter_mut().zip(probs).zip(d_probs) {
        *dz = p * (g - dot);
    }
}
