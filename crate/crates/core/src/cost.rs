//! BitOPs accounting: `#MACs × b_w × b_a` per linear slot and
//! `#MACs × b_a × b_a` per attention-operand slot, summed per step and
//! multiplied by the number of executed steps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{DenoiserNet, SlotKind};
use crate::quant::SlotBits;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSlot {
    pub name: String,
    pub kind: SlotKind,
    pub macs: u64,
}

/// Per-slot MAC counts of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    slots: Vec<CostSlot>,
}

/// An absolute Overall BitOPs limit and what it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub limit: u128,
    pub reference: String,
}

pub fn slot_bitops(macs: u64, bits: SlotBits, kind: SlotKind) -> Result<u128> {
    if bits.w == 0 || bits.a == 0 {
        return Err(invalid(format!("zero bit-width in {bits:?}")));
    }
    let (x, y) = match kind {
        SlotKind::Linear => (bits.w, bits.a),
        SlotKind::AttentionOperand => (bits.a, bits.a),
    };
    Ok(macs as u128 * x as u128 * y as u128)
}

pub fn overall_bitops(step_bitops: u128, steps: usize) -> u128 {
    step_bitops * steps as u128
}

impl CostModel {
    pub fn new(slots: Vec<CostSlot>) -> Self {
        Self { slots }
    }

    pub fn from_net(net: &DenoiserNet) -> Self {
        Self::new(
            net.slots()
                .iter()
                .map(|s| CostSlot { name: s.name.clone(), kind: s.kind, macs: s.macs })
                .collect(),
        )
    }

    pub fn slots(&self) -> &[CostSlot] {
        &self.slots
    }

    pub fn total_macs(&self) -> u128 {
        self.slots.iter().map(|s| s.macs as u128).sum()
    }

    pub fn step_bitops(&self, policy: &[SlotBits]) -> Result<u128> {
        if policy.len() != self.slots.len() {
            return Err(invalid(format!("policy covers {} slots, model has {}", policy.len(), self.slots.len())));
        }
        self.slots.iter().zip(policy).map(|(s, &b)| slot_bitops(s.macs, b, s.kind)).sum()
    }

    pub fn overall_bitops(&self, policy: &[SlotBits], steps: usize) -> Result<u128> {
        Ok(overall_bitops(self.step_bitops(policy)?, steps))
    }

    /// Budget of a uniform `W_b A_b` policy run for `steps` steps.
    pub fn uniform_budget(&self, bits: u8, steps: usize) -> Result<Budget> {
        if steps == 0 {
            return Err(invalid("budget needs at least one step"));
        }
        let limit = self.overall_bitops(&vec![SlotBits::uniform(bits); self.slots.len()], steps)?;
        if limit == 0 {
            return Err(invalid("budget of an empty model is zero"));
        }
        Ok(Budget { limit, reference: format!("uniform W{bits}A{bits} at {steps} steps") })
    }

    pub fn within_budget(&self, policy: &[SlotBits], steps: usize, budget: &Budget) -> Result<bool> {
        Ok(self.overall_bitops(policy, steps)? <= budget.limit)
    }

    pub fn report(&self, policy: &[SlotBits], steps: usize) -> Result<CostReport> {
        let step = self.step_bitops(policy)?;
        let slots = self
            .slots
            .iter()
            .zip(policy)
            .map(|(s, &b)| {
                Ok(SlotCost {
                    name: s.name.clone(),
                    kind: s.kind,
                    macs: s.macs,
                    w: b.w,
                    a: b.a,
                    bitops: slot_bitops(s.macs, b, s.kind)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CostReport { slots, step_bitops: step, steps, overall_bitops: overall_bitops(step, steps) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCost {
    pub name: String,
    pub kind: SlotKind,
    pub macs: u64,
    pub w: u8,
    pub a: u8,
    pub bitops: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub slots: Vec<SlotCost>,
    pub step_bitops: u128,
    pub steps: usize,
    pub overall_bitops: u128,
}

/// `log₁₀` of the joint space size: timestep selections plus `(M·N)^L`
/// bit-width choices.
pub fn search_space_size(log10_selections: f64, slots: usize, weight_choices: usize, act_choices: usize) -> f64 {
    log10_selections + slots as f64 * ((weight_choices * act_choices) as f64).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel {
        CostModel::new(vec![
            CostSlot { name: "a".into(), kind: SlotKind::Linear, macs: 100 },
            CostSlot { name: "b".into(), kind: SlotKind::Linear, macs: 30 },
            CostSlot { name: "c".into(), kind: SlotKind::AttentionOperand, macs: 5000 },
        ])
    }

    #[test]
    fn slot_examples() {
        assert_eq!(slot_bitops(1_000_000, SlotBits::uniform(6), SlotKind::Linear).unwrap(), 36_000_000);
        assert_eq!(slot_bitops(5000, SlotBits { w: 3, a: 8 }, SlotKind::AttentionOperand).unwrap(), 320_000);
        assert!(slot_bitops(10, SlotBits { w: 0, a: 6 }, SlotKind::Linear).is_err());
    }

    #[test]
    fn step_examples() {
        let m = model();
        let uniform = vec![SlotBits::uniform(6); 3];
        assert_eq!(m.step_bitops(&uniform).unwrap(), 36 * m.total_macs());
        assert_eq!(CostModel::new(vec![]).step_bitops(&[]).unwrap(), 0);
        assert!(m.step_bitops(&uniform[..2]).is_err());
        for i in 0..3 {
            let mut p = uniform.clone();
            p[i].a = 7;
            assert!(m.step_bitops(&p).unwrap() > m.step_bitops(&uniform).unwrap());
        }
    }

    #[test]
    fn budget_examples() {
        let m = model();
        let b = m.uniform_budget(6, 5).unwrap();
        assert!(m.within_budget(&vec![SlotBits::uniform(6); 3], 5, &b).unwrap());
        assert!(!m.within_budget(&vec![SlotBits::uniform(8); 3], 5, &b).unwrap());
        assert!(m.within_budget(&vec![SlotBits::uniform(5); 3], 5, &b).unwrap());
        assert!(m.uniform_budget(6, 0).is_err());
    }

    #[test]
    fn overall_scaling() {
        let step = 443_000_000_000u128;
        assert_eq!(overall_bitops(step, 100), 10 * overall_bitops(step, 10));
        assert_eq!(overall_bitops(step, 1), step);
        assert_eq!(overall_bitops(step, 5), 2_215_000_000_000);
    }

    #[test]
    fn space_size() {
        assert!((search_space_size(0.0, 250, 4, 1) - 150.515).abs() < 1e-3);
        assert_eq!(search_space_size(0.0, 0, 4, 4), 0.0);
    }

    #[test]
    fn report_totals() {
        let m = model();
        let p = vec![SlotBits { w: 5, a: 8 }, SlotBits::uniform(6), SlotBits::uniform(7)];
        let r = m.report(&p, 3).unwrap();
        assert_eq!(r.slots.iter().map(|s| s.bitops).sum::<u128>(), r.step_bitops);
        assert_eq!(r.overall_bitops, 3 * r.step_bitops);
        assert_eq!(r.slots[0].bitops, 4000);
    }
}
