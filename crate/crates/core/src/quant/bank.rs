use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::quantizer::{init_minmax, Grid, QuantParams, Rounding, TensorRange};
use crate::error::{invalid, Error, Result};
use crate::nn::{DenoiserNet, SlotKind};
use crate::numerics::Tensor;

/// Bit-widths of one slot: weight side `w`, activation side `a`. For
/// attention-operand slots both operands use `a` and `w` is carried along
/// equal to `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotBits {
    pub w: u8,
    pub a: u8,
}

impl SlotBits {
    pub fn uniform(b: u8) -> Self {
        Self { w: b, a: b }
    }
}

/// Per-slot bit-widths shared by every sampling step.
pub type Policy = Vec<SlotBits>;

pub fn uniform_policy(slots: usize, b: u8) -> Policy {
    vec![SlotBits::uniform(b); slots]
}

/// One quantizer holding a `(scale, zero_point)` pair per candidate bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiQuantizer {
    pub grid: Grid,
    pub entries: BTreeMap<u8, QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSlot {
    pub name: String,
    pub kind: SlotKind,
    /// Linear: `[weight, act]`; attention operand: `[lhs, rhs]`.
    pub quantizers: [MultiQuantizer; 2],
}

/// The multi-precision quantizer state of a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerBank {
    bits: Vec<u8>,
    slots: Vec<BankSlot>,
    /// Number of leading blocks that have been calibrated.
    pub calibrated_blocks: usize,
    pub seed: u64,
    calibration_calls: u64,
}

impl QuantizerBank {
    /// Min-max initialized bank. Activation ranges are observed by a
    /// full-precision pass over `x`/`ts`; weight ranges come from the weights.
    pub fn init_minmax(net: &DenoiserNet, bits: &[u8], x: &Tensor, ts: &[usize]) -> Result<Self> {
        let bits = normalize_bits(bits)?;
        let ranges = net.quantizer_input_ranges(x, ts)?;
        let slots = net
            .slots()
            .iter()
            .zip(ranges)
            .map(|(info, [r0, r1])| {
                let grids = match info.kind {
                    SlotKind::Linear => [Grid::Signed, Grid::Unsigned],
                    SlotKind::AttentionOperand => [Grid::Unsigned, Grid::Unsigned],
                };
                let make = |grid: Grid, range: TensorRange| MultiQuantizer {
                    grid,
                    entries: bits.iter().map(|&b| (b, init_minmax(range, b, grid))).collect(),
                };
                BankSlot {
                    name: info.name.clone(),
                    kind: info.kind,
                    quantizers: [make(grids[0], r0), make(grids[1], r1)],
                }
            })
            .collect();
        Ok(Self { bits, slots, calibrated_blocks: 0, seed: 0, calibration_calls: 0 })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn slots(&self) -> &[BankSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [BankSlot] {
        &mut self.slots
    }

    /// Number of calibration routines that have run on this bank.
    pub fn calibration_calls(&self) -> u64 {
        self.calibration_calls
    }

    pub(crate) fn note_calibration(&mut self) {
        self.calibration_calls += 1;
    }

    pub fn params(&self, slot: usize, quantizer: usize, bits: u8) -> Result<&QuantParams> {
        self.slots
            .get(slot)
            .and_then(|s| s.quantizers.get(quantizer))
            .and_then(|q| q.entries.get(&bits))
            .ok_or_else(|| Error::MissingQuantizer(format!("slot {slot} quantizer {quantizer} at {bits} bits")))
    }

    pub fn params_mut(&mut self, slot: usize, quantizer: usize, bits: u8) -> Result<&mut QuantParams> {
        self.slots
            .get_mut(slot)
            .and_then(|s| s.quantizers.get_mut(quantizer))
            .and_then(|q| q.entries.get_mut(&bits))
            .ok_or_else(|| Error::MissingQuantizer(format!("slot {slot} quantizer {quantizer} at {bits} bits")))
    }

    /// A copy restricted to a subset of the candidate bit-widths.
    pub fn without_bits(&self, drop: &[u8]) -> Result<Self> {
        let mut out = self.clone();
        out.bits.retain(|b| !drop.contains(b));
        if out.bits.is_empty() {
            return Err(invalid("bank would have no bit-widths left"));
        }
        for s in &mut out.slots {
            for q in &mut s.quantizers {
                q.entries.retain(|b, _| !drop.contains(b));
            }
        }
        Ok(out)
    }

    /// Checks that the bank was built for `net`.
    pub fn check_matches(&self, net: &DenoiserNet) -> Result<()> {
        let ok = self.slots.len() == net.slots().len()
            && self.slots.iter().zip(net.slots()).all(|(a, b)| a.name == b.name && a.kind == b.kind);
        if !ok {
            return Err(invalid("quantizer bank does not match the network architecture"));
        }
        Ok(())
    }

    pub fn to_file(&self, config_hash: Option<String>) -> BankFile {
        BankFile {
            bits: self.bits.clone(),
            seed: self.seed,
            calibrated_blocks: self.calibrated_blocks,
            config_hash,
            slot_order: self.slots.iter().map(|s| s.name.clone()).collect(),
            slots: self
                .slots
                .iter()
                .map(|s| {
                    let names = s.kind.quantizer_names();
                    let quantizers = s
                        .quantizers
                        .iter()
                        .zip(names)
                        .map(|(q, n)| {
                            let entries = q
                                .entries
                                .iter()
                                .map(|(b, p)| (*b, ScaleZero { s: p.scale, z: p.zero_point }))
                                .collect();
                            (n.to_string(), entries)
                        })
                        .collect();
                    (s.name.clone(), SlotFile { kind: s.kind, quantizers })
                })
                .collect(),
        }
    }

    pub fn from_file(file: &BankFile) -> Result<Self> {
        let bits = normalize_bits(&file.bits)?;
        let mut slots = Vec::with_capacity(file.slot_order.len());
        for name in &file.slot_order {
            let sf = file.slots.get(name).ok_or_else(|| invalid(format!("bank file lacks slot {name}")))?;
            let grids = match sf.kind {
                SlotKind::Linear => [Grid::Signed, Grid::Unsigned],
                SlotKind::AttentionOperand => [Grid::Unsigned, Grid::Unsigned],
            };
            let names = sf.kind.quantizer_names();
            let mut qs = Vec::with_capacity(2);
            for (grid, qn) in grids.into_iter().zip(names) {
                let entries = sf.quantizers.get(qn).ok_or_else(|| invalid(format!("slot {name} lacks {qn}")))?;
                let mut map = BTreeMap::new();
                for &b in &bits {
                    let e = entries
                        .get(&b)
                        .ok_or_else(|| Error::MissingQuantizer(format!("{name}.{qn} at {b} bits")))?;
                    if !(e.s > 0.0 && e.s.is_finite() && e.z.is_finite()) {
                        return Err(invalid(format!("{name}.{qn} at {b} bits has invalid parameters")));
                    }
                    map.insert(b, QuantParams { scale: e.s, zero_point: e.z, bits: b });
                }
                qs.push(MultiQuantizer { grid, entries: map });
            }
            let [q0, q1]: [MultiQuantizer; 2] = qs.try_into().expect("two quantizers");
            slots.push(BankSlot { name: name.clone(), kind: sf.kind, quantizers: [q0, q1] });
        }
        Ok(Self { bits, slots, calibrated_blocks: file.calibrated_blocks, seed: file.seed, calibration_calls: 0 })
    }
}

fn normalize_bits(bits: &[u8]) -> Result<Vec<u8>> {
    let mut b = bits.to_vec();
    b.sort_unstable();
    b.dedup();
    if b.is_empty() {
        return Err(invalid("empty bit-width candidate set"));
    }
    if b.iter().any(|&x| !(2..=16).contains(&x)) {
        return Err(invalid(format!("bit-widths must lie in [2, 16], got {b:?}")));
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleZero {
    pub s: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotFile {
    pub kind: SlotKind,
    pub quantizers: BTreeMap<String, BTreeMap<u8, ScaleZero>>,
}

/// On-disk form of a [`QuantizerBank`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub bits: Vec<u8>,
    pub seed: u64,
    pub calibrated_blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub slot_order: Vec<String>,
    pub slots: BTreeMap<String, SlotFile>,
}

/// A bank together with the active per-slot bit-widths.
#[derive(Debug, Clone, Copy)]
pub struct QuantContext<'a> {
    pub bank: &'a QuantizerBank,
    pub policy: &'a [SlotBits],
    pub rounding: Rounding,
}

impl<'a> QuantContext<'a> {
    pub fn new(bank: &'a QuantizerBank, policy: &'a [SlotBits]) -> Self {
        Self { bank, policy, rounding: Rounding::Nearest }
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    /// The policy must name every slot of `net` exactly once.
    pub fn check(&self, net: &DenoiserNet) -> Result<()> {
        if self.policy.len() != net.slots().len() {
            return Err(invalid(format!(
                "policy covers {} slots, network has {}",
                self.policy.len(),
                net.slots().len()
            )));
        }
        if self.bank.slots.len() != net.slots().len() {
            return Err(Error::MissingQuantizer(format!(
                "bank has {} slots, network has {}",
                self.bank.slots.len(),
                net.slots().len()
            )));
        }
        Ok(())
    }

    pub fn bits(&self, slot: usize) -> Result<SlotBits> {
        self.policy.get(slot).copied().ok_or_else(|| Error::MissingQuantizer(format!("no policy entry for slot {slot}")))
    }

    /// Active parameters of quantizer `q` of `slot`.
    pub fn params(&self, slot: usize, q: usize) -> Result<&'a QuantParams> {
        let bits = self.bits(slot)?;
        let kind = self.bank.slots.get(slot).map(|s| s.kind).ok_or_else(|| {
            Error::MissingQuantizer(format!("bank has no slot {slot}"))
        })?;
        let b = match (kind, q) {
            (SlotKind::Linear, 0) => bits.w,
            _ => bits.a,
        };
        self.bank.params(slot, q, b)
    }
}
