//! The toy ε-prediction network and its hand-written backward pass.
//!
//! The network is a list of blocks, each of which is also the unit of
//! block-wise reconstruction during calibration:
//!
//! * `Embed`: `SiLU(W_in·x + b_in + W_t·emb(t) + b_t)`
//! * `Dense`: `W·h + b`, optionally followed by SiLU
//! * `Attention`: single-head, parameter-free self-attention over `n` tokens
//!   with a residual connection, `h + softmax(H·Hᵀ/√d)·H`
//!
//! Every linear layer is a quantizable slot (weight + input activation);
//! attention contributes two slots, one per activation-activation product.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layers::{silu, silu_grad, timestep_embedding, LayerKind, LayerSpec, Linear, SlotKind};
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{dot, gemm_nn, gemm_tn, Rng, Tensor};
use crate::quant::{fake_quant_into, Grid, QuantContext, QuantTrace, SlotBits, TensorRange};

/// Reference architecture parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub hidden_layers: usize,
    /// Token count of the self-attention block; `None` disables it.
    pub attention_tokens: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { data_dim: 2, hidden: 64, emb_dim: 32, hidden_layers: 3, attention_tokens: Some(4) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum Block {
    Embed { input: Linear, temb: Linear, emb_dim: usize },
    Dense { linear: Linear, silu: bool },
    Attention { tokens: usize, head_dim: usize },
}

impl Block {
    fn slot_kinds(&self) -> Vec<SlotKind> {
        match self {
            Block::Embed { .. } => vec![SlotKind::Linear, SlotKind::Linear],
            Block::Dense { .. } => vec![SlotKind::Linear],
            Block::Attention { .. } => vec![SlotKind::AttentionOperand, SlotKind::AttentionOperand],
        }
    }

    fn slot_suffixes(&self) -> &'static [&'static str] {
        match self {
            Block::Embed { .. } => &["input", "temb"],
            Block::Dense { .. } => &["linear"],
            Block::Attention { .. } => &["qk", "av"],
        }
    }

    fn in_dim(&self) -> usize {
        match self {
            Block::Embed { input, .. } => input.in_dim,
            Block::Dense { linear, .. } => linear.in_dim,
            Block::Attention { tokens, head_dim } => tokens * head_dim,
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Block::Embed { input, .. } => input.out_dim,
            Block::Dense { linear, .. } => linear.out_dim,
            Block::Attention { tokens, head_dim } => tokens * head_dim,
        }
    }

    fn linears(&self) -> Vec<&Linear> {
        match self {
            Block::Embed { input, temb, .. } => vec![input, temb],
            Block::Dense { linear, .. } => vec![linear],
            Block::Attention { .. } => Vec::new(),
        }
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        match self {
            Block::Embed { input, temb, .. } => vec![input, temb],
            Block::Dense { linear, .. } => vec![linear],
            Block::Attention { .. } => Vec::new(),
        }
    }

    fn param_count(&self) -> usize {
        self.linears().iter().map(|l| l.param_count()).sum()
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        match self {
            Block::Embed { input, temb, emb_dim } => vec![
                input.spec(),
                LayerSpec { kind: LayerKind::TimestepEmbed, in_dim: 1, out_dim: *emb_dim },
                temb.spec(),
                LayerSpec { kind: LayerKind::Silu, in_dim: input.out_dim, out_dim: input.out_dim },
            ],
            Block::Dense { linear, silu } => {
                let mut v = vec![linear.spec()];
                if *silu {
                    v.push(LayerSpec { kind: LayerKind::Silu, in_dim: linear.out_dim, out_dim: linear.out_dim });
                }
                v
            }
            Block::Attention { tokens, head_dim } => vec![LayerSpec {
                kind: LayerKind::SelfAttention { tokens: *tokens, head_dim: *head_dim },
                in_dim: tokens * head_dim,
                out_dim: tokens * head_dim,
            }],
        }
    }
}

/// One quantizable slot of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub name: String,
    pub kind: SlotKind,
    pub macs: u64,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    blocks: Vec<Block>,
    slots: Vec<SlotInfo>,
    slot_offsets: Vec<usize>,
    param_offsets: Vec<usize>,
}

/// Key of one quantizer parameter pair in the gradient map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuantKey {
    pub slot: usize,
    /// Index into [`SlotKind::quantizer_names`].
    pub quantizer: usize,
    pub bits: u8,
}

/// Gradients of a scalar loss.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Same layout as [`DenoiserNet::params`].
    pub params: Vec<f64>,
    /// `(∂L/∂scale, ∂L/∂zero_point)` for every quantizer entry that was active.
    pub quant: BTreeMap<QuantKey, (f64, f64)>,
    /// Adjoint of the network (or block) input.
    pub input: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct LinearCache {
    /// Input actually multiplied (quantized when a context was active).
    input: Vec<f64>,
    /// Quantized weights; `None` means the stored weights were used.
    weight: Option<Vec<f64>>,
    act_trace: Option<QuantTrace>,
    weight_trace: Option<QuantTrace>,
    bits: Option<SlotBits>,
    rows: usize,
}

#[derive(Debug, Clone)]
struct OperandCache {
    trace: QuantTrace,
    bits: u8,
}

/// Intermediate values of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    rows: usize,
    kind: CacheKind,
}

#[derive(Debug, Clone)]
enum CacheKind {
    Embed { x: LinearCache, e: LinearCache, pre: Vec<f64>, broadcast: bool },
    Dense { lin: LinearCache, pre: Option<Vec<f64>> },
    Attention { q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, probs: Vec<f64>, probs_q: Vec<f64>, traces: Option<[OperandCache; 4]> },
}

/// Record of a full forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    caches: Vec<BlockCache>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

/// Timesteps for a batch: one per row, or a single value for all rows.
fn timestep_of(ts: &[usize], row: usize) -> usize {
    if ts.len() == 1 {
        ts[0]
    } else {
        ts[row]
    }
}

impl DenoiserNet {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let h = config.hidden;
        let mut blocks = vec![Block::Embed {
            input: Linear::init(config.data_dim, h, 1.0, rng),
            temb: Linear::init(config.emb_dim, h, 1.0, rng),
            emb_dim: config.emb_dim,
        }];
        for _ in 0..config.hidden_layers {
            blocks.push(Block::Dense { linear: Linear::init(h, h, 1.0, rng), silu: true });
        }
        if let Some(tokens) = config.attention_tokens {
            if tokens == 0 || h % tokens != 0 {
                return Err(invalid(format!("hidden width {h} not divisible into {tokens} tokens")));
            }
            blocks.push(Block::Attention { tokens, head_dim: h / tokens });
        }
        blocks.push(Block::Dense { linear: Linear::init(h, config.data_dim, 0.1, rng), silu: false });
        Self::from_blocks(blocks)
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid("network needs at least one block"));
        }
        for (j, b) in blocks.iter().enumerate() {
            if j > 0 && matches!(b, Block::Embed { .. }) {
                return Err(invalid("the embedding block must come first"));
            }
            for l in b.layer_specs() {
                l.validate()?;
            }
            for lin in b.linears() {
                if lin.weight.len() != lin.in_dim * lin.out_dim || lin.bias.len() != lin.out_dim {
                    return Err(shape(format!("block {j}: parameter arrays do not match dims")));
                }
            }
            if let Block::Embed { input, temb, emb_dim } = b {
                if temb.in_dim != *emb_dim || temb.out_dim != input.out_dim {
                    return Err(shape("timestep projection does not match the embedding block"));
                }
            }
            if j + 1 < blocks.len() && b.out_dim() != blocks[j + 1].in_dim() {
                return Err(shape(format!("block {j} output {} feeds input {}", b.out_dim(), blocks[j + 1].in_dim())));
            }
        }
        let mut slots = Vec::new();
        let mut slot_offsets = Vec::new();
        let mut param_offsets = Vec::new();
        let mut poff = 0;
        for (j, b) in blocks.iter().enumerate() {
            slot_offsets.push(slots.len());
            param_offsets.push(poff);
            poff += b.param_count();
            let macs: Vec<u64> =
                b.layer_specs().iter().flat_map(super::layers::slot_macs).collect();
            for ((kind, suffix), m) in b.slot_kinds().into_iter().zip(b.slot_suffixes()).zip(macs) {
                slots.push(SlotInfo { name: format!("b{j}.{suffix}"), kind, macs: m, block: j });
            }
        }
        slot_offsets.push(slots.len());
        param_offsets.push(poff);
        Ok(Self { blocks, slots, slot_offsets, param_offsets })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn slots(&self) -> &[SlotInfo] {
        &self.slots
    }

    /// Slot indices belonging to block `j`.
    pub fn block_slots(&self, j: usize) -> std::ops::Range<usize> {
        self.slot_offsets[j]..self.slot_offsets[j + 1]
    }

    /// Parameter index range of block `j` in [`Self::params`].
    pub fn block_params(&self, j: usize) -> std::ops::Range<usize> {
        self.param_offsets[j]..self.param_offsets[j + 1]
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].out_dim()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.blocks.iter().flat_map(Block::layer_specs).collect()
    }

    pub fn param_count(&self) -> usize {
        *self.param_offsets.last().unwrap_or(&0)
    }

    /// All weights and biases, block by block, weight before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            for l in b.linears() {
                out.extend_from_slice(&l.weight);
                out.extend_from_slice(&l.bias);
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            for l in b.linears_mut() {
                let nw = l.weight.len();
                l.weight.copy_from_slice(&flat[off..off + nw]);
                off += nw;
                let nb = l.bias.len();
                l.bias.copy_from_slice(&flat[off..off + nb]);
                off += nb;
            }
        }
        Ok(())
    }

    /// Weights of every linear slot (`None` for attention slots), for range
    /// statistics.
    pub fn slot_weights(&self) -> Vec<Option<&[f64]>> {
        let mut out = Vec::with_capacity(self.slots.len());
        for b in &self.blocks {
            match b {
                Block::Attention { .. } => {
                    out.push(None);
                    out.push(None);
                }
                _ => out.extend(b.linears().into_iter().map(|l| Some(l.weight.as_slice()))),
            }
        }
        out
    }

    /// Value ranges seen by each slot's two quantizers during a
    /// full-precision pass: `[weight, input]` for linear slots and
    /// `[lhs, rhs]` operands for attention slots.
    pub fn quantizer_input_ranges(&self, x: &Tensor, ts: &[usize]) -> Result<Vec<[TensorRange; 2]>> {
        let mut tape = Tape::new();
        self.forward_recorded(x, ts, None, &mut tape)?;
        let mut out = Vec::with_capacity(self.slots.len());
        for (block, cache) in self.blocks.iter().zip(&tape.caches) {
            match (block, &cache.kind) {
                (Block::Embed { input, temb, .. }, CacheKind::Embed { x, e, .. }) => {
                    out.push([TensorRange::of(&input.weight), TensorRange::of(&x.input)]);
                    out.push([TensorRange::of(&temb.weight), TensorRange::of(&e.input)]);
                }
                (Block::Dense { linear, .. }, CacheKind::Dense { lin, .. }) => {
                    out.push([TensorRange::of(&linear.weight), TensorRange::of(&lin.input)]);
                }
                (Block::Attention { .. }, CacheKind::Attention { q, probs, .. }) => {
                    let xr = TensorRange::of(q);
                    out.push([xr, xr]);
                    out.push([TensorRange::of(probs), xr]);
                }
                _ => unreachable!("cache kinds follow block kinds"),
            }
        }
        Ok(out)
    }

    /// Predicted noise for a batch `x` (`rows × data_dim`). `ts` holds one
    /// timestep per row or a single shared timestep.
    pub fn forward(&self, x: &Tensor, ts: &[usize], quant: Option<&QuantContext>) -> Result<Tensor> {
        self.run(x, ts, quant, None)
    }

    /// Like [`Self::forward`] but keeps intermediates in `tape` for
    /// [`Self::backward`].
    pub fn forward_recorded(
        &self,
        x: &Tensor,
        ts: &[usize],
        quant: Option<&QuantContext>,
        tape: &mut Tape,
    ) -> Result<Tensor> {
        tape.caches.clear();
        self.run(x, ts, quant, Some(tape))
    }

    fn run(&self, x: &Tensor, ts: &[usize], quant: Option<&QuantContext>, mut tape: Option<&mut Tape>) -> Result<Tensor> {
        if let Some(q) = quant {
            q.check(self)?;
        }
        let mut h = x.clone();
        for j in 0..self.blocks.len() {
            let (out, cache) = self.forward_block(j, &h, ts, quant, tape.is_some())?;
            if let (Some(t), Some(c)) = (tape.as_deref_mut(), cache) {
                t.caches.push(c);
            }
            h = out;
        }
        Ok(h)
    }

    /// Backpropagates `adjoint` (∂L/∂output) through a recorded pass.
    pub fn backward(&self, tape: &Tape, adjoint: &Tensor) -> Result<Gradients> {
        if tape.caches.len() != self.blocks.len() {
            return Err(Error::NoRecordedForward);
        }
        let mut grads = Gradients { params: vec![0.0; self.param_count()], ..Default::default() };
        let mut g = adjoint.clone();
        for j in (0..self.blocks.len()).rev() {
            g = self.backward_block(j, &tape.caches[j], &g, &mut grads)?;
        }
        grads.input = Some(g);
        Ok(grads)
    }

    /// Runs block `j` alone on `input`.
    pub fn forward_block(
        &self,
        j: usize,
        input: &Tensor,
        ts: &[usize],
        quant: Option<&QuantContext>,
        record: bool,
    ) -> Result<(Tensor, Option<BlockCache>)> {
        let block = self.blocks.get(j).ok_or_else(|| invalid(format!("no block {j}")))?;
        let (rows, cols) = input.dims2()?;
        if cols != block.in_dim() {
            return Err(shape(format!("block {j} expects width {}, got {cols}", block.in_dim())));
        }
        if ts.len() != 1 && ts.len() != rows {
            return Err(shape(format!("{} timesteps for {rows} rows", ts.len())));
        }
        let s0 = self.slot_offsets[j];
        let (out, kind) = match block {
            Block::Embed { input: lin_x, temb, emb_dim } => {
                let (hx, cx) = linear_forward(lin_x, s0, input.data(), rows, quant, record)?;
                let broadcast = ts.len() == 1;
                let erows = if broadcast { 1 } else { rows };
                let mut emb = vec![0.0; erows * emb_dim];
                for (r, chunk) in emb.chunks_exact_mut(*emb_dim).enumerate() {
                    timestep_embedding(timestep_of(ts, r), *emb_dim, chunk);
                }
                let (he, ce) = linear_forward(temb, s0 + 1, &emb, erows, quant, record)?;
                let width = lin_x.out_dim;
                let mut pre = hx;
                for (r, row) in pre.chunks_exact_mut(width).enumerate() {
                    let er = if broadcast { 0 } else { r };
                    for (p, e) in row.iter_mut().zip(&he[er * width..(er + 1) * width]) {
                        *p += e;
                    }
                }
                let out: Vec<f64> = pre.iter().map(|&p| silu(p)).collect();
                let cache = match (cx, ce) {
                    (Some(x), Some(e)) => Some(CacheKind::Embed { x, e, pre, broadcast }),
                    _ => None,
                };
                (Tensor::new(vec![rows, width], out)?, cache)
            }
            Block::Dense { linear, silu: act } => {
                let (pre, c) = linear_forward(linear, s0, input.data(), rows, quant, record)?;
                let out: Vec<f64> = if *act { pre.iter().map(|&p| silu(p)).collect() } else { pre.clone() };
                let cache = c.map(|lin| CacheKind::Dense { lin, pre: act.then_some(pre) });
                (Tensor::new(vec![rows, linear.out_dim], out)?, cache)
            }
            Block::Attention { tokens, head_dim } => {
                let (out, cache) = attention_forward(*tokens, *head_dim, s0, input.data(), rows, quant, record)?;
                (Tensor::new(vec![rows, tokens * head_dim], out)?, cache)
            }
        };
        Ok((out, kind.map(|kind| BlockCache { rows, kind })))
    }

    /// Backward through block `j`; accumulates parameter and quantizer
    /// gradients into `grads` and returns the adjoint of the block input.
    pub fn backward_block(&self, j: usize, cache: &BlockCache, adjoint: &Tensor, grads: &mut Gradients) -> Result<Tensor> {
        let block = &self.blocks[j];
        let rows = cache.rows;
        if adjoint.shape() != [rows, block.out_dim()] {
            return Err(shape(format!("adjoint shape {:?} for block {j}", adjoint.shape())));
        }
        if grads.params.len() != self.param_count() {
            grads.params = vec![0.0; self.param_count()];
        }
        let s0 = self.slot_offsets[j];
        let p0 = self.param_offsets[j];
        let dy = adjoint.data();
        let din = match (block, &cache.kind) {
            (Block::Embed { input: lin_x, temb, .. }, CacheKind::Embed { x, e, pre, broadcast }) => {
                let width = lin_x.out_dim;
                let dpre: Vec<f64> = dy.iter().zip(pre).map(|(g, &p)| g * silu_grad(p)).collect();
                let dhe = if *broadcast {
                    let mut s = vec![0.0; width];
                    for row in dpre.chunks_exact(width) {
                        for (a, b) in s.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    s
                } else {
                    dpre.clone()
                };
                let nx = lin_x.param_count();
                let dx = linear_backward(lin_x, s0, x, &dpre, &mut grads.params[p0..p0 + nx], &mut grads.quant);
                let nt = temb.param_count();
                linear_backward(temb, s0 + 1, e, &dhe, &mut grads.params[p0 + nx..p0 + nx + nt], &mut grads.quant);
                dx
            }
            (Block::Dense { linear, .. }, CacheKind::Dense { lin, pre }) => {
                let dpre: Vec<f64> = match pre {
                    Some(pre) => dy.iter().zip(pre).map(|(g, &p)| g * silu_grad(p)).collect(),
                    None => dy.to_vec(),
                };
                let n = linear.param_count();
                linear_backward(linear, s0, lin, &dpre, &mut grads.params[p0..p0 + n], &mut grads.quant)
            }
            (Block::Attention { tokens, head_dim }, CacheKind::Attention { .. }) => {
                attention_backward(*tokens, *head_dim, s0, &cache.kind, dy, rows, &mut grads.quant)
            }
            _ => return Err(invalid(format!("cache does not belong to block {j}"))),
        };
        Tensor::new(vec![rows, block.in_dim()], din)
    }
}

fn linear_forward(
    lin: &Linear,
    slot: usize,
    input: &[f64],
    rows: usize,
    quant: Option<&QuantContext>,
    record: bool,
) -> Result<(Vec<f64>, Option<LinearCache>)> {
    match quant {
        None => {
            let out = lin.apply(&lin.weight, input, rows);
            let cache = record.then(|| LinearCache {
                input: input.to_vec(),
                weight: None,
                act_trace: None,
                weight_trace: None,
                bits: None,
                rows,
            });
            Ok((out, cache))
        }
        Some(ctx) => {
            let bits = ctx.bits(slot)?;
            let wp = ctx.params(slot, 0)?;
            let ap = ctx.params(slot, 1)?;
            let mut wq = vec![0.0; lin.weight.len()];
            let mut aq = vec![0.0; input.len()];
            let mut wt = record.then(QuantTrace::default);
            let mut at = record.then(QuantTrace::default);
            fake_quant_into(&lin.weight, wp, Grid::Signed, ctx.rounding, &mut wq, wt.as_mut());
            fake_quant_into(input, ap, Grid::Unsigned, ctx.rounding, &mut aq, at.as_mut());
            let out = lin.apply(&wq, &aq, rows);
            let cache = record.then(|| LinearCache {
                input: aq,
                weight: Some(wq),
                act_trace: at,
                weight_trace: wt,
                bits: Some(bits),
                rows,
            });
            Ok((out, cache))
        }
    }
}

/// Returns the input adjoint; writes `[dW, db]` into `pgrad`.
fn linear_backward(
    lin: &Linear,
    slot: usize,
    cache: &LinearCache,
    dout: &[f64],
    pgrad: &mut [f64],
    qgrad: &mut BTreeMap<QuantKey, (f64, f64)>,
) -> Vec<f64> {
    let rows = cache.rows;
    let (n_in, n_out) = (lin.in_dim, lin.out_dim);
    let (gw, gb) = pgrad.split_at_mut(n_in * n_out);
    // dW_used = doutᵀ · input
    let mut dw = vec![0.0; n_in * n_out];
    gemm_tn(dout, &cache.input, &mut dw, n_out, rows, n_in);
    for row in dout.chunks_exact(n_out) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    let weight = cache.weight.as_deref().unwrap_or(&lin.weight);
    let mut din = vec![0.0; rows * n_in];
    gemm_nn(dout, weight, &mut din, rows, n_out, n_in);

    if let (Some(bits), Some(wt), Some(at)) = (cache.bits, &cache.weight_trace, &cache.act_trace) {
        let (gs, gz) = wt.pullback(&mut dw);
        add_quant(qgrad, QuantKey { slot, quantizer: 0, bits: bits.w }, (gs, gz));
        let (gs, gz) = at.pullback(&mut din);
        add_quant(qgrad, QuantKey { slot, quantizer: 1, bits: bits.a }, (gs, gz));
    }
    for (a, b) in gw.iter_mut().zip(&dw) {
        *a += b;
    }
    din
}

fn add_quant(map: &mut BTreeMap<QuantKey, (f64, f64)>, key: QuantKey, g: (f64, f64)) {
    let e = map.entry(key).or_insert((0.0, 0.0));
    e.0 += g.0;
    e.1 += g.1;
}

fn quantize_operand(
    ctx: &QuantContext,
    slot: usize,
    quantizer: usize,
    values: &[f64],
    record: bool,
) -> Result<(Vec<f64>, Option<OperandCache>)> {
    let p = ctx.params(slot, quantizer)?;
    let mut out = vec![0.0; values.len()];
    let mut tr = record.then(QuantTrace::default);
    fake_quant_into(values, p, Grid::Unsigned, ctx.rounding, &mut out, tr.as_mut());
    Ok((out, tr.map(|trace| OperandCache { trace, bits: p.bits })))
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    n: usize,
    d: usize,
    slot: usize,
    x: &[f64],
    rows: usize,
    quant: Option<&QuantContext>,
    record: bool,
) -> Result<(Vec<f64>, Option<CacheKind>)> {
    let width = n * d;
    let scale = 1.0 / (d as f64).sqrt();
    let (q, k, v, mut ops) = match quant {
        None => (x.to_vec(), x.to_vec(), x.to_vec(), None),
        Some(ctx) => {
            let (q, tq) = quantize_operand(ctx, slot, 0, x, record)?;
            let (k, tk) = quantize_operand(ctx, slot, 1, x, record)?;
            let (v, tv) = quantize_operand(ctx, slot + 1, 1, x, record)?;
            (q, k, v, Some((tq, tk, tv)))
        }
    };
    let mut probs = vec![0.0; rows * n * n];
    for r in 0..rows {
        let qs = &q[r * width..(r + 1) * width];
        let ks = &k[r * width..(r + 1) * width];
        let ps = &mut probs[r * n * n..(r + 1) * n * n];
        for i in 0..n {
            let prow = &mut ps[i * n..(i + 1) * n];
            for jx in 0..n {
                prow[jx] = dot(&qs[i * d..(i + 1) * d], &ks[jx * d..(jx + 1) * d]) * scale;
            }
            let m = prow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in prow.iter_mut() {
                *p = (*p - m).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
        }
    }
    let (probs_q, ta) = match quant {
        None => (probs.clone(), None),
        Some(ctx) => quantize_operand(ctx, slot + 1, 0, &probs, record)?,
    };
    let mut out = x.to_vec();
    for r in 0..rows {
        let a = &probs_q[r * n * n..(r + 1) * n * n];
        let vs = &v[r * width..(r + 1) * width];
        let o = &mut out[r * width..(r + 1) * width];
        for i in 0..n {
            for jx in 0..n {
                let w = a[i * n + jx];
                for c in 0..d {
                    o[i * d + c] += w * vs[jx * d + c];
                }
            }
        }
    }
    if !record {
        return Ok((out, None));
    }
    let traces = match (ops.take(), ta) {
        (Some((Some(tq), Some(tk), Some(tv))), Some(ta)) => Some([tq, tk, ta, tv]),
        _ => None,
    };
    Ok((out, Some(CacheKind::Attention { q, k, v, probs, probs_q, traces })))
}

fn attention_backward(
    n: usize,
    d: usize,
    slot: usize,
    cache: &CacheKind,
    dy: &[f64],
    rows: usize,
    qgrad: &mut BTreeMap<QuantKey, (f64, f64)>,
) -> Vec<f64> {
    let CacheKind::Attention { q, k, v, probs, probs_q, traces } = cache else {
        unreachable!("attention cache expected")
    };
    let width = n * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = dy.to_vec();
    let mut dprobs = vec![0.0; rows * n * n];
    let mut dv = vec![0.0; rows * width];
    for r in 0..rows {
        let g = &dy[r * width..(r + 1) * width];
        let a = &probs_q[r * n * n..(r + 1) * n * n];
        let vs = &v[r * width..(r + 1) * width];
        let da = &mut dprobs[r * n * n..(r + 1) * n * n];
        let dvs = &mut dv[r * width..(r + 1) * width];
        for i in 0..n {
            for jx in 0..n {
                da[i * n + jx] = dot(&g[i * d..(i + 1) * d], &vs[jx * d..(jx + 1) * d]);
                let w = a[i * n + jx];
                for c in 0..d {
                    dvs[jx * d + c] += w * g[i * d + c];
                }
            }
        }
    }
    if let Some([_, _, ta, tv]) = traces {
        let gq = ta.trace.pullback(&mut dprobs);
        add_quant(qgrad, QuantKey { slot: slot + 1, quantizer: 0, bits: ta.bits }, gq);
        let gq = tv.trace.pullback(&mut dv);
        add_quant(qgrad, QuantKey { slot: slot + 1, quantizer: 1, bits: tv.bits }, gq);
    }
    for (a, b) in dx.iter_mut().zip(&dv) {
        *a += b;
    }
    let mut dq = vec![0.0; rows * width];
    let mut dk = vec![0.0; rows * width];
    for r in 0..rows {
        let p = &probs[r * n * n..(r + 1) * n * n];
        let da = &dprobs[r * n * n..(r + 1) * n * n];
        let qs = &q[r * width..(r + 1) * width];
        let ks = &k[r * width..(r + 1) * width];
        let dqs = &mut dq[r * width..(r + 1) * width];
        let dks = &mut dk[r * width..(r + 1) * width];
        for i in 0..n {
            let inner: f64 = (0..n).map(|jx| da[i * n + jx] * p[i * n + jx]).sum();
            for jx in 0..n {
                let ds = p[i * n + jx] * (da[i * n + jx] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dqs[i * d + c] += ds * ks[jx * d + c];
                    dks[jx * d + c] += ds * qs[i * d + c];
                }
            }
        }
    }
    if let Some([tq, tk, _, _]) = traces {
        let gq = tq.trace.pullback(&mut dq);
        add_quant(qgrad, QuantKey { slot, quantizer: 0, bits: tq.bits }, gq);
        let gk = tk.trace.pullback(&mut dk);
        add_quant(qgrad, QuantKey { slot, quantizer: 1, bits: tk.bits }, gk);
    }
    for ((a, b), c) in dx.iter_mut().zip(&dq).zip(&dk) {
        *a += b + c;
    }
    dx
}
