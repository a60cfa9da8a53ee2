use super::space::{Candidate, SearchSpace};
use crate::error::{invalid, Result};
use crate::nn::SlotKind;
use crate::quant::SlotBits;
use crate::numerics::Rng;

/// Uniform crossover: every timestep gene and every slot's `(b_w, b_a)` pair
/// comes from either parent with probability 1/2.
pub fn crossover(a: &Candidate, b: &Candidate, rng: &mut Rng) -> Result<Candidate> {
    if a.timesteps.len() != b.timesteps.len() || a.policy.len() != b.policy.len() {
        return Err(invalid("crossover parents come from different search spaces"));
    }
    let timesteps = a.timesteps.iter().zip(&b.timesteps).map(|(&x, &y)| if rng.bernoulli(0.5) { x } else { y }).collect();
    let policy = a.policy.iter().zip(&b.policy).map(|(&x, &y)| if rng.bernoulli(0.5) { x } else { y }).collect();
    Ok(Candidate { timesteps, policy })
}

/// Resamples each timestep gene within its group, and each slot's weight and
/// activation bits from their candidate sets, independently with probability
/// `p`. A resample may redraw the current value.
pub fn mutate(space: &SearchSpace, a: &Candidate, p: f64, rng: &mut Rng) -> Candidate {
    let mut child = a.clone();
    for (h, t) in child.timesteps.iter_mut().enumerate() {
        if rng.bernoulli(p) {
            *t = space.random_timestep(h, rng);
        }
    }
    for (s, bits) in child.policy.iter_mut().enumerate() {
        match space.slot_kinds[s] {
            SlotKind::Linear => {
                if rng.bernoulli(p) {
                    bits.w = *rng.choose(&space.weight_bits);
                }
                if rng.bernoulli(p) {
                    bits.a = *rng.choose(&space.act_bits);
                }
            }
            SlotKind::AttentionOperand => {
                if rng.bernoulli(p) {
                    *bits = SlotBits::uniform(*rng.choose(&space.act_bits));
                }
            }
        }
    }
    child
}
