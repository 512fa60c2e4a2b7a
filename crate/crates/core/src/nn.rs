//! Vector kernels shared by the dense and the compressed paths. Both paths
//! call exactly these functions, which is what makes their outputs agree bit
//! for bit wherever they run the same computation.

use crate::flops::cost;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * (x * x * x));
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], out: &mut [T]) {
    let d = T::of(x.len() as f64);
    let mut sum = T::zero();
    for v in x {
        sum += *v;
    }
    let mean = sum / d;
    let mut var = T::zero();
    for v in x {
        let c = *v - mean;
        var += c * c;
    }
    var = var / d;
    let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    for k in 0..x.len() {
        out[k] = (x[k] - mean) * inv * gain[k] + bias[k];
    }
}

/// `out = bias + x · weight` with `weight` stored row-major `input × output`.
pub fn affine<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let output = out.len();
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = T::zero()),
    }
    for (i, xi) in x.iter().enumerate() {
        let row = &weight[i * output..(i + 1) * output];
        for (o, w) in out.iter_mut().zip(row) {
            *o += *xi * *w;
        }
    }
}

/// A vector-to-vector function applied identically at every location.
#[derive(Debug, Clone)]
pub enum PerLocationOp<'a, T> {
    Identity(usize),
    LayerNorm { gain: &'a [T], bias: &'a [T] },
    Affine { weight: &'a [T], bias: Option<&'a [T]>, input: usize, output: usize },
    Gelu(usize),
    Scale(T, usize),
    Chain(Vec<PerLocationOp<'a, T>>),
}

impl<T: Scalar> PerLocationOp<'_, T> {
    pub fn input_dim(&self) -> usize {
        match self {
            PerLocationOp::Identity(d) | PerLocationOp::Gelu(d) | PerLocationOp::Scale(_, d) => *d,
            PerLocationOp::LayerNorm { gain, .. } => gain.len(),
            PerLocationOp::Affine { input, .. } => *input,
            PerLocationOp::Chain(ops) => ops.first().map_or(0, |o| o.input_dim()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            PerLocationOp::Affine { output, .. } => *output,
            PerLocationOp::Chain(ops) => ops.last().map_or(0, |o| o.output_dim()),
            other => other.input_dim(),
        }
    }

    /// Exact operation count for one vector.
    pub fn cost(&self) -> u64 {
        match self {
            PerLocationOp::Identity(_) => 0,
            PerLocationOp::LayerNorm { gain, .. } => cost::layer_norm(gain.len()),
            PerLocationOp::Affine { input, output, .. } => cost::affine(*input, *output),
            PerLocationOp::Gelu(d) => cost::gelu(*d),
            PerLocationOp::Scale(_, d) => *d as u64,
            PerLocationOp::Chain(ops) => ops.iter().map(|o| o.cost()).sum(),
        }
    }

    pub fn apply(&self, x: &[T], out: &mut [T]) {
        match self {
            PerLocationOp::Identity(_) => out.copy_from_slice(x),
            PerLocationOp::LayerNorm { gain, bias } => layer_norm(x, gain, bias, out),
            PerLocationOp::Affine { weight, bias, .. } => affine(x, weight, *bias, out),
            PerLocationOp::Gelu(_) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = gelu(*v);
                }
            }
            PerLocationOp::Scale(s, _) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = *v * *s;
                }
            }
            PerLocationOp::Chain(ops) => {
                let mut cur = x.to_vec();
                for op in ops {
                    let mut next = vec![T::zero(); op.output_dim()];
                    op.apply(&cur, &mut next);
                    cur = next;
                }
                out.copy_from_slice(&cur);
            }
        }
    }

    pub fn apply_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_dim()];
        self.apply(x, &mut out);
        out
    }
}
