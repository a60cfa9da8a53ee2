//! Block-wise calibration of the multi-precision quantizer bank.
//!
//! For block `j`, each iteration draws one bit-width `b` uniformly from the
//! bank's candidates, switches every slot of the block to `b`, and takes one
//! Adam step on the block's `(scale, zero_point)` entries at `b` to reduce
//! `‖F̂_b(x) − F(x)‖²`, where `x` is the output of the already calibrated
//! prefix quantized at the same `b`. Network weights are never touched.
//! Blocks are processed front to back, once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bank::{uniform_policy, QuantContext, QuantizerBank};
use super::quantizer::{QuantParams, MIN_SCALE};
use crate::error::{Error, Result};
use crate::nn::{DenoiserNet, Gradients, QuantKey};
use crate::numerics::{Rng, Tensor};

/// Noisy inputs and their timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSet {
    pub x: Tensor,
    pub ts: Vec<usize>,
}

impl CalibSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty() || self.ts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Optimization steps per block, shared across bit-widths.
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { iterations: 512, lr: 1e-2, seed: 0 }
    }
}

/// Outcome of calibrating one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub updates: BTreeMap<u8, usize>,
    pub init_loss: BTreeMap<u8, f64>,
    pub final_loss: BTreeMap<u8, f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct AdamSlot {
    m: [f64; 2],
    v: [f64; 2],
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl AdamSlot {
    /// Returns the update to subtract for gradient `g` on `(log s, z)`.
    fn step(&mut self, g: [f64; 2], lr: f64) -> [f64; 2] {
        self.t += 1;
        let mut upd = [0.0; 2];
        for i in 0..2 {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - BETA1.powi(self.t));
            let vh = self.v[i] / (1.0 - BETA2.powi(self.t));
            upd[i] = lr * mh / (vh.sqrt() + EPS);
        }
        upd
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64)
}

/// Inputs of block `j` computed by the quantized prefix at uniform bit-width
/// `b`, and the full-precision block output on those inputs.
fn block_io(net: &DenoiserNet, bank: &QuantizerBank, j: usize, calib: &CalibSet, b: u8) -> Result<(Tensor, Tensor)> {
    let policy = uniform_policy(net.slots().len(), b);
    let ctx = QuantContext::new(bank, &policy);
    let mut h = calib.x.clone();
    for k in 0..j {
        h = net.forward_block(k, &h, &calib.ts, Some(&ctx), false)?.0;
    }
    let target = net.forward_block(j, &h, &calib.ts, None, false)?.0;
    Ok((h, target))
}

fn block_loss(net: &DenoiserNet, bank: &QuantizerBank, j: usize, calib: &CalibSet, input: &Tensor, target: &Tensor, b: u8) -> Result<f64> {
    let policy = uniform_policy(net.slots().len(), b);
    let ctx = QuantContext::new(bank, &policy);
    let out = net.forward_block(j, input, &calib.ts, Some(&ctx), false)?.0;
    mse(&out, target)
}

/// Reconstruction loss of block `j` at uniform bit-width `b` on `calib`.
pub fn reconstruction_loss(net: &DenoiserNet, bank: &QuantizerBank, j: usize, calib: &CalibSet, b: u8) -> Result<f64> {
    let (input, target) = block_io(net, bank, j, calib, b)?;
    block_loss(net, bank, j, calib, &input, &target, b)
}

fn snapshot(bank: &QuantizerBank, net: &DenoiserNet, j: usize, b: u8) -> Vec<QuantParams> {
    let mut out = Vec::new();
    for slot in net.block_slots(j) {
        for q in 0..2 {
            out.push(*bank.params(slot, q, b).expect("entry checked before calibration"));
        }
    }
    out
}

fn restore(bank: &mut QuantizerBank, net: &DenoiserNet, j: usize, b: u8, snap: &[QuantParams]) {
    let mut it = snap.iter();
    for slot in net.block_slots(j) {
        for q in 0..2 {
            *bank.params_mut(slot, q, b).expect("entry checked before calibration") = *it.next().unwrap();
        }
    }
}

/// Calibrates the quantizer entries of block `j` for every candidate
/// bit-width. Entries that do not improve on their starting point are kept
/// at the best parameters seen (the starting point included).
pub fn calibrate_block(
    net: &DenoiserNet,
    j: usize,
    bank: &mut QuantizerBank,
    calib: &CalibSet,
    config: &CalibConfig,
    rng: &mut Rng,
) -> Result<BlockReport> {
    if calib.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    if j >= net.num_blocks() {
        return Err(Error::Calibration(format!("no block {j}")));
    }
    if bank.calibrated_blocks < j {
        return Err(Error::Calibration(format!(
            "block {j} requested but only {} leading blocks are calibrated",
            bank.calibrated_blocks
        )));
    }
    bank.check_matches(net)?;
    bank.note_calibration();
    let bits = bank.bits().to_vec();

    let mut io = BTreeMap::new();
    let mut best: BTreeMap<u8, (f64, Vec<QuantParams>)> = BTreeMap::new();
    let mut init_loss = BTreeMap::new();
    for &b in &bits {
        let (input, target) = block_io(net, bank, j, calib, b)?;
        let loss = block_loss(net, bank, j, calib, &input, &target, b)?;
        init_loss.insert(b, loss);
        best.insert(b, (loss, snapshot(bank, net, j, b)));
        io.insert(b, (input, target));
    }

    let slots: Vec<usize> = net.block_slots(j).collect();
    let mut adam: BTreeMap<QuantKey, AdamSlot> = BTreeMap::new();
    let mut updates: BTreeMap<u8, usize> = bits.iter().map(|&b| (b, 0)).collect();

    if !slots.is_empty() {
        for _ in 0..config.iterations {
            let b = *rng.choose(&bits);
            let (input, target) = &io[&b];
            let policy = uniform_policy(net.slots().len(), b);
            let (out, cache) = {
                let ctx = QuantContext::new(bank, &policy);
                net.forward_block(j, input, &calib.ts, Some(&ctx), true)?
            };
            let diff = out.sub(target)?;
            let n = diff.len() as f64;
            let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("block {j} reconstruction loss at {b} bits")));
            }
            let entry = best.get_mut(&b).expect("every bit-width seeded");
            if loss < entry.0 {
                *entry = (loss, snapshot(bank, net, j, b));
            }
            let adjoint = diff.scale(2.0 / n);
            let mut grads = Gradients::default();
            let cache = cache.expect("recorded forward");
            net.backward_block(j, &cache, &adjoint, &mut grads)?;
            for (key, (gs, gz)) in grads.quant {
                if key.bits != b || !slots.contains(&key.slot) {
                    continue;
                }
                let p = bank.params_mut(key.slot, key.quantizer, key.bits)?;
                let st = adam.entry(key).or_default();
                let upd = st.step([gs * p.scale, gz], config.lr);
                p.scale = (p.scale.ln() - upd[0]).exp().max(MIN_SCALE);
                p.zero_point -= upd[1];
            }
            *updates.get_mut(&b).unwrap() += 1;
        }
    }

    let mut final_loss = BTreeMap::new();
    for &b in &bits {
        let (input, target) = &io[&b];
        let last = block_loss(net, bank, j, calib, input, target, b)?;
        let (best_loss, snap) = &best[&b];
        if *best_loss < last {
            restore(bank, net, j, b, snap);
            final_loss.insert(b, *best_loss);
        } else {
            final_loss.insert(b, last);
        }
    }
    bank.calibrated_blocks = bank.calibrated_blocks.max(j + 1);
    Ok(BlockReport { block: j, updates, init_loss, final_loss })
}

/// Calibrates every block in order, once.
pub fn calibrate_all(net: &DenoiserNet, bank: &mut QuantizerBank, calib: &CalibSet, config: &CalibConfig) -> Result<Vec<BlockReport>> {
    if calib.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    let mut reports = Vec::with_capacity(net.num_blocks());
    for j in 0..net.num_blocks() {
        let mut rng = Rng::derive(config.seed, &[j as u64]);
        reports.push(calibrate_block(net, j, bank, calib, config, &mut rng)?);
    }
    bank.seed = config.seed;
    Ok(reports)
}
