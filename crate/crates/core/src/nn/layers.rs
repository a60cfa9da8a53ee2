use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{gemm_nt, Rng};

/// What a quantizable slot is made of. Linear slots carry a weight and an
/// input-activation quantizer; attention-operand slots quantize both operands
/// of one activation-activation matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Linear,
    AttentionOperand,
}

impl SlotKind {
    /// Names of the quantizers a slot owns, in storage order.
    pub fn quantizer_names(self) -> [&'static str; 2] {
        match self {
            SlotKind::Linear => ["weight", "act"],
            SlotKind::AttentionOperand => ["lhs", "rhs"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Silu,
    TimestepEmbed,
    SelfAttention { tokens: usize, head_dim: usize },
}

/// Flat description of one layer of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(invalid("layer dims must be positive"));
        }
        if let LayerKind::SelfAttention { tokens, head_dim } = self.kind {
            if tokens == 0 || self.in_dim % tokens != 0 || self.in_dim / tokens != head_dim {
                return Err(invalid(format!(
                    "attention over {tokens} tokens of dim {head_dim} does not fit width {}",
                    self.in_dim
                )));
            }
        }
        Ok(())
    }
}

/// MACs of each quantizable slot the layer contributes. Attention contributes
/// two slots, `Q·Kᵀ` and `A·V`, each `n·n·d_h`.
pub fn slot_macs(layer: &LayerSpec) -> Vec<u64> {
    match layer.kind {
        LayerKind::Linear => vec![(layer.in_dim * layer.out_dim) as u64],
        LayerKind::Silu | LayerKind::TimestepEmbed => Vec::new(),
        LayerKind::SelfAttention { tokens, head_dim } => {
            let m = (tokens * tokens * head_dim) as u64;
            vec![m, m]
        }
    }
}

/// Total multiply-accumulates of one layer for a single input.
pub fn count_macs(layer: &LayerSpec) -> u64 {
    slot_macs(layer).iter().sum()
}

/// Fully connected layer; `weight` is `out × in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// LeCun-normal weights scaled by `gain`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.normal() * std).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec { kind: LayerKind::Linear, in_dim: self.in_dim, out_dim: self.out_dim }
    }

    /// `out = input · weightᵀ + bias` for `rows` inputs, using `weight`
    /// in place of the stored weights.
    pub(crate) fn apply(&self, weight: &[f64], input: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.out_dim];
        gemm_nt(input, weight, &mut out, rows, self.in_dim, self.out_dim);
        for row in out.chunks_exact_mut(self.out_dim) {
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of an integer timestep: `[sin(t·f_i)…, cos(t·f_i)…]`
/// with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = 0.0;
    }
}
