// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric building blocks. Every reduction accumulates in index order so a
//! given build produces bit-identical results run to run.

use super::config::Activation;

/// Affine map stored input-major: `weight[i * d_out + j]` maps input `i` to output `j`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) weight: Vec<f32>,
    pub(crate) bias: Vec<f32>,
    pub(crate) d_in: usize,
    pub(crate) d_out: usize,
}

impl Linear {
    pub(crate) fn new(weight: Vec<f32>, bias: Vec<f32>, d_in: usize, d_out: usize) -> Self {
        debug_assert_eq!(weight.len(), d_in * d_out);
        debug_assert_eq!(bias.len(), d_out);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Apply to `rows` row vectors packed in `xs` (`rows * d_in`), writing `rows * d_out`.
    ///
    /// The weight matrix is streamed once for all rows; each output element is
    /// `bias[j] + x[0] w[0][j] + x[1] w[1][j] + ...` summed in that order.
    pub(crate) fn forward(&self, xs: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(xs.len(), rows * self.d_in);
        let mut out = Vec::with_capacity(rows * self.d_out);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        for i in 0..self.d_in {
            let w_row = &self.weight[i * self.d_out..(i + 1) * self.d_out];
            for r in 0..rows {
                let xi = xs[r * self.d_in + i];
                let o = &mut out[r * self.d_out..(r + 1) * self.d_out];
                for (acc, &w) in o.iter_mut().zip(w_row) {
                    *acc += xi * w;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub(crate) gamma: Vec<f32>,
    pub(crate) beta: Vec<f32>,
    pub(crate) eps: f32,
}

impl LayerNorm {
    pub(crate) fn apply(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + self.eps as f64).sqrt();
        x.iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((&v, &g), &b)| ((v as f64 - mean) * inv) as f32 * g + b)
            .collect()
    }

    /// Normalize each `width`-sized row of `xs`.
    pub(crate) fn apply_rows(&self, xs: &[f32], width: usize) -> Vec<f32> {
        xs.chunks_exact(width)
            .flat_map(|row| self.apply(row))
            .collect()
    }
}

pub(crate) fn activate(kind: Activation, xs: &mut [f32]) {
    match kind {
        Activation::GeluTanh => {
            const SQRT_2_OVER_PI: f32 = 0.797_884_6;
            for x in xs {
                let v = *x;
                *x = 0.5 * v * (1.0 + libm::tanhf(SQRT_2_OVER_PI * (v + 0.044_715 * v * v * v)));
            }
        }
        Activation::GeluErf => {
            for x in xs {
                let v = *x;
                *x = 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2));
            }
        }
    }
}

/// Precomputed cos/sin tables for rotate-half rotary embeddings.
#[derive(Debug, Clone)]
pub struct RotaryTables {
    /// Rotated dimensions per head (even).
    pub(crate) dims: usize,
    /// `[max_context * dims/2]`
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RotaryTables {
    pub(crate) fn new(dims: usize, base: f32, max_context: usize) -> Self {
        let half = dims / 2;
        let inv_freq: Vec<f32> = (0..half)
            .map(|i| 1.0 / base.powf((2 * i) as f32 / dims as f32))
            .collect();
        let mut cos = Vec::with_capacity(max_context * half);
        let mut sin = Vec::with_capacity(max_context * half);
        for pos in 0..max_context {
            for &f in &inv_freq {
                let angle = pos as f32 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { dims, cos, sin }
    }

    /// Rotate the first `dims` entries of one head vector in place.
    pub(crate) fn rotate(&self, head: &mut [f32], pos: usize) {
        let half = self.dims / 2;
        if half == 0 {
            return;
        }
        let cos = &self.cos[pos * half..(pos + 1) * half];
        let sin = &self.sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let a = head[i];
            let b = head[i + half];
            head[i] = a * cos[i] - b * sin[i];
            head[i + half] = b * cos[i] + a * sin[i];
        }
    }
}

/// In-place numerically stable softmax in f32.
pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}
