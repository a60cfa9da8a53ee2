use serde::{Deserialize, Serialize};

use crate::cost::{Budget, CostModel};
use crate::error::{invalid, Error, Result};
use crate::grouping::GroupingScheme;
use crate::nn::SlotKind;
use crate::numerics::{derive_seed, Rng};
use crate::quant::{Policy, SlotBits};

/// Rejection draws before [`random_candidate`] falls back to lowering bits.
pub const RANDOM_RETRIES: usize = 64;

/// One search point: a timestep per group and a policy shared by all steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Candidate {
    pub timesteps: Vec<usize>,
    pub policy: Policy,
}

/// Domains of every gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub grouping: GroupingScheme,
    pub slot_kinds: Vec<SlotKind>,
    pub weight_bits: Vec<u8>,
    pub act_bits: Vec<u8>,
}

/// Cost model plus the Overall BitOPs limit every evaluated candidate obeys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub cost: CostModel,
    pub budget: Budget,
}

fn clean_bits(bits: &[u8], what: &str) -> Result<Vec<u8>> {
    let mut b = bits.to_vec();
    b.sort_unstable();
    b.dedup();
    if b.is_empty() || b[0] == 0 {
        return Err(invalid(format!("{what} candidate bits must be non-empty and positive")));
    }
    Ok(b)
}

impl SearchSpace {
    pub fn new(grouping: GroupingScheme, slot_kinds: Vec<SlotKind>, weight_bits: &[u8], act_bits: &[u8]) -> Result<Self> {
        grouping.validate()?;
        Ok(Self {
            grouping,
            slot_kinds,
            weight_bits: clean_bits(weight_bits, "weight")?,
            act_bits: clean_bits(act_bits, "activation")?,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.grouping.num_groups()
    }

    pub fn num_slots(&self) -> usize {
        self.slot_kinds.len()
    }

    /// Weight-side domain of a slot. Attention operands have no weight, so
    /// their `w` mirrors `a`.
    fn w_domain(&self, slot: usize) -> Option<&[u8]> {
        match self.slot_kinds[slot] {
            SlotKind::Linear => Some(&self.weight_bits),
            SlotKind::AttentionOperand => None,
        }
    }

    pub fn random_timestep(&self, h: usize, rng: &mut Rng) -> usize {
        let r = self.grouping.range(h);
        rng.range(r.start, r.end)
    }

    pub fn random_timesteps(&self, rng: &mut Rng) -> Vec<usize> {
        (0..self.num_groups()).map(|h| self.random_timestep(h, rng)).collect()
    }

    pub fn random_slot(&self, slot: usize, rng: &mut Rng) -> SlotBits {
        let w = self.w_domain(slot).map(|d| *rng.choose(d));
        let a = *rng.choose(&self.act_bits);
        SlotBits { w: w.unwrap_or(a), a }
    }

    pub fn random_policy(&self, rng: &mut Rng) -> Policy {
        (0..self.num_slots()).map(|s| self.random_slot(s, rng)).collect()
    }

    pub fn min_policy(&self) -> Policy {
        (0..self.num_slots())
            .map(|s| {
                let a = self.act_bits[0];
                SlotBits { w: self.w_domain(s).map_or(a, |d| d[0]), a }
            })
            .collect()
    }

    pub fn max_policy(&self) -> Policy {
        (0..self.num_slots())
            .map(|s| {
                let a = *self.act_bits.last().unwrap();
                SlotBits { w: self.w_domain(s).map_or(a, |d| *d.last().unwrap()), a }
            })
            .collect()
    }

    pub fn check_policy(&self, policy: &[SlotBits]) -> Result<()> {
        if policy.len() != self.num_slots() {
            return Err(invalid(format!("policy has {} slots, space has {}", policy.len(), self.num_slots())));
        }
        for (s, b) in policy.iter().enumerate() {
            let w_ok = match self.w_domain(s) {
                Some(d) => d.contains(&b.w),
                None => b.w == b.a,
            };
            if !w_ok || !self.act_bits.contains(&b.a) {
                return Err(invalid(format!("slot {s} bits {b:?} outside the candidate sets")));
            }
        }
        Ok(())
    }

    pub fn check(&self, c: &Candidate) -> Result<()> {
        if c.timesteps.len() != self.num_groups() {
            return Err(invalid(format!("{} timesteps for {} groups", c.timesteps.len(), self.num_groups())));
        }
        for (h, &t) in c.timesteps.iter().enumerate() {
            if !self.grouping.range(h).contains(&t) {
                return Err(invalid(format!("timestep {t} outside group {h} {:?}", self.grouping.range(h))));
            }
        }
        self.check_policy(&c.policy)
    }

    /// Lowers one randomly chosen gene that is above its domain minimum to
    /// the next smaller value. Returns `false` when every gene is minimal.
    fn lower_one(&self, policy: &mut Policy, rng: &mut Rng) -> bool {
        let mut genes = Vec::new();
        for (s, b) in policy.iter().enumerate() {
            if let Some(d) = self.w_domain(s) {
                if b.w > d[0] {
                    genes.push((s, true));
                }
            }
            if b.a > self.act_bits[0] {
                genes.push((s, false));
            }
        }
        if genes.is_empty() {
            return false;
        }
        let (s, is_w) = *rng.choose(&genes);
        let step_down = |d: &[u8], v: u8| *d.iter().rev().find(|&&x| x < v).unwrap();
        if is_w {
            policy[s].w = step_down(self.w_domain(s).unwrap(), policy[s].w);
        } else {
            let a = step_down(&self.act_bits, policy[s].a);
            policy[s].a = a;
            if self.w_domain(s).is_none() {
                policy[s].w = a;
            }
        }
        true
    }
}

impl Constraint {
    pub fn overall_bitops(&self, c: &Candidate) -> Result<u128> {
        self.cost.overall_bitops(&c.policy, c.timesteps.len())
    }

    pub fn admits(&self, c: &Candidate) -> Result<bool> {
        Ok(self.overall_bitops(c)? <= self.budget.limit)
    }

    fn admits_policy(&self, policy: &[SlotBits], steps: usize) -> Result<bool> {
        self.cost.within_budget(policy, steps, &self.budget)
    }

    pub fn check_feasible(&self, space: &SearchSpace) -> Result<()> {
        if !self.admits_policy(&space.min_policy(), space.num_groups())? {
            return Err(Error::InfeasibleBudget(format!(
                "the all-minimum policy exceeds {} ({})",
                self.budget.limit, self.budget.reference
            )));
        }
        Ok(())
    }
}

fn random_policy_within(space: &SearchSpace, constraint: &Constraint, rng: &mut Rng) -> Result<Policy> {
    constraint.check_feasible(space)?;
    let steps = space.num_groups();
    let mut policy = space.random_policy(rng);
    for _ in 1..RANDOM_RETRIES {
        if constraint.admits_policy(&policy, steps)? {
            return Ok(policy);
        }
        policy = space.random_policy(rng);
    }
    while !constraint.admits_policy(&policy, steps)? {
        if !space.lower_one(&mut policy, rng) {
            return Err(Error::InfeasibleBudget("no policy fits the budget".into()));
        }
    }
    Ok(policy)
}

/// Uniform draw per group and per slot, resampled until within budget, then
/// repaired by lowering bits.
pub fn random_candidate(space: &SearchSpace, constraint: &Constraint, rng: &mut Rng) -> Result<Candidate> {
    let timesteps = space.random_timesteps(rng);
    let policy = random_policy_within(space, constraint, rng)?;
    Ok(Candidate { timesteps, policy })
}

/// Pre-sampled within-budget policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub seeds: Vec<u64>,
    pub policies: Vec<Policy>,
}

/// Each seed's worker draws its share of `count` policies; results are merged
/// in seed order and deduplicated, with further rounds on derived seeds until
/// `count` distinct policies exist (or the space runs dry). `workers` only caps
/// the thread count and never changes the result.
pub fn presample_pool(
    space: &SearchSpace,
    constraint: &Constraint,
    count: usize,
    seeds: &[u64],
    workers: usize,
) -> Result<Pool> {
    if count == 0 {
        return Err(invalid("pool size must be at least 1"));
    }
    if seeds.is_empty() {
        return Err(invalid("presampling needs at least one worker seed"));
    }
    constraint.check_feasible(space)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let per_seed = count.div_ceil(seeds.len());
    let mut seen = std::collections::BTreeSet::new();
    let mut policies = Vec::with_capacity(count);
    const MAX_ROUNDS: u64 = 64;
    for round in 0..MAX_ROUNDS {
        let batches: Vec<Result<Vec<Policy>>> = threads.install(|| {
            use rayon::prelude::*;
            seeds
                .par_iter()
                .map(|&s| {
                    let mut rng = Rng::new(if round == 0 { s } else { derive_seed(s, &[round]) });
                    (0..per_seed).map(|_| random_policy_within(space, constraint, &mut rng)).collect()
                })
                .collect()
        });
        for batch in batches {
            for p in batch? {
                if policies.len() < count && seen.insert(p.clone()) {
                    policies.push(p);
                }
            }
        }
        if policies.len() >= count {
            break;
        }
    }
    if policies.len() < count {
        log::warn!("pool holds only {} distinct policies of {count} requested", policies.len());
    }
    Ok(Pool { seeds: seeds.to_vec(), policies })
}
