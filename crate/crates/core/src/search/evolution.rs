use serde::{Deserialize, Serialize};

use super::operators::{crossover, mutate};
use super::space::{random_candidate, Candidate, Constraint, SearchSpace};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::metrics::evaluate_fitness;
use crate::nn::DenoiserNet;
use crate::numerics::{derive_seed, GaussianStats, Rng};
use crate::quant::{Policy, QuantContext, QuantizerBank};

/// Operator retries before a budget-violating offspring is replaced by a
/// fresh random draw.
pub const OFFSPRING_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population: usize,
    pub mutations: usize,
    pub crossovers: usize,
    pub p_mut: f64,
    /// Total epochs, counting the initial random epoch.
    pub epochs: usize,
    pub elite: usize,
    pub initial: usize,
    pub seed: u64,
    /// Score every candidate on the same sampling seed instead of one seed
    /// per evaluation, so fitness differences reflect the candidates only.
    pub common_eval_seed: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { population: 50, mutations: 25, crossovers: 10, p_mut: 0.25, epochs: 20, elite: 10, initial: 50, seed: 0, common_eval_seed: false }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mutations + self.crossovers > self.population {
            return Err(invalid(format!(
                "mutations ({}) + crossovers ({}) exceed the population ({})",
                self.mutations, self.crossovers, self.population
            )));
        }
        if self.population == 0 || self.elite == 0 || self.initial == 0 || self.epochs == 0 {
            return Err(invalid("population, elite, initial and epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_mut) {
            return Err(invalid(format!("mutation probability {} outside [0, 1]", self.p_mut)));
        }
        Ok(())
    }

    pub fn epoch_size(&self, epoch: usize) -> usize {
        if epoch == 0 {
            self.initial
        } else {
            self.population
        }
    }
}

/// Scores a candidate; lower is better. Implementations must be deterministic
/// in `(candidate, seed)` and must not mutate shared state.
pub trait Fitness: Sync {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> Result<f64>;
}

/// Fréchet distance of quantized DDIM samples against reference statistics.
pub struct DiffusionFitness<'a> {
    pub net: &'a DenoiserNet,
    pub sched: &'a NoiseSchedule,
    pub bank: &'a QuantizerBank,
    pub reference: &'a GaussianStats,
    pub samples: usize,
}

impl Fitness for DiffusionFitness<'_> {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> Result<f64> {
        let quant = QuantContext::new(self.bank, &candidate.policy);
        let report =
            evaluate_fitness(self.net, self.sched, Some(&quant), &candidate.timesteps, self.reference, self.samples, seed)?;
        Ok(report.frechet)
    }
}

/// One evaluation. Failed evaluations carry `fitness: None` and the error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub index: usize,
    pub epoch_size: usize,
    pub candidate: Candidate,
    pub overall_bitops: u128,
    pub fitness: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteEntry {
    pub candidate: Candidate,
    pub fitness: f64,
    pub epoch: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchState {
    /// Completed epochs.
    pub epoch: usize,
    /// Ascending by fitness, ties by evaluation order; unique candidates.
    pub elite: Vec<EliteEntry>,
    /// Elite-best fitness after each completed epoch.
    pub best_history: Vec<f64>,
    pub log: Vec<EvalRecord>,
}

impl SearchState {
    pub fn best(&self) -> Option<&EliteEntry> {
        self.elite.first()
    }

    fn merge(&mut self, records: &[EvalRecord], k: usize) {
        for r in records {
            if let Some(f) = r.fitness {
                self.elite.push(EliteEntry { candidate: r.candidate.clone(), fitness: f, epoch: r.epoch, index: r.index });
            }
        }
        self.elite.sort_by(|a, b| a.fitness.total_cmp(&b.fitness).then((a.epoch, a.index).cmp(&(b.epoch, b.index))));
        let mut seen = std::collections::BTreeSet::new();
        self.elite.retain(|e| seen.insert(e.candidate.clone()));
        self.elite.truncate(k);
        self.best_history.push(self.elite.first().map_or(f64::INFINITY, |e| e.fitness));
        self.epoch += 1;
        self.log.extend_from_slice(records);
    }
}

/// Records of the longest prefix of fully logged epochs.
pub fn complete_epochs(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut epoch = 0;
    while start < records.len() {
        let size = records[start].epoch_size;
        let end = start + size;
        if size == 0 || end > records.len() {
            break;
        }
        let chunk = &records[start..end];
        if !chunk.iter().enumerate().all(|(i, r)| r.epoch == epoch && r.index == i && r.epoch_size == size) {
            break;
        }
        out.extend_from_slice(chunk);
        start = end;
        epoch += 1;
    }
    out
}

/// Source of fresh random candidates: a pre-sampled policy pool plus fresh
/// timesteps, or direct constrained sampling.
struct Generator<'a> {
    space: &'a SearchSpace,
    constraint: &'a Constraint,
    pool: Option<&'a [Policy]>,
}

impl Generator<'_> {
    fn fresh(&self, rng: &mut Rng) -> Result<Candidate> {
        match self.pool {
            Some(pool) if !pool.is_empty() => {
                let timesteps = self.space.random_timesteps(rng);
                Ok(Candidate { timesteps, policy: rng.choose(pool).clone() })
            }
            _ => random_candidate(self.space, self.constraint, rng),
        }
    }

    fn offspring(&self, rng: &mut Rng, mut op: impl FnMut(&mut Rng) -> Result<Candidate>) -> Result<Candidate> {
        for _ in 0..OFFSPRING_RETRIES {
            let child = op(rng)?;
            if self.constraint.admits(&child)? {
                return Ok(child);
            }
        }
        self.fresh(rng)
    }
}

fn epoch_candidates(config: &SearchConfig, gen: &Generator, elite: &[EliteEntry], epoch: usize) -> Result<Vec<Candidate>> {
    let mut rng = Rng::derive(config.seed, &[epoch as u64]);
    let mut out = Vec::with_capacity(config.epoch_size(epoch));
    if epoch == 0 || elite.is_empty() {
        for _ in 0..config.epoch_size(epoch) {
            out.push(gen.fresh(&mut rng)?);
        }
        return Ok(out);
    }
    for _ in 0..config.mutations {
        let child = gen.offspring(&mut rng, |rng| {
            let parent = &rng.choose(elite).candidate;
            Ok(mutate(gen.space, parent, config.p_mut, rng))
        })?;
        out.push(child);
    }
    for _ in 0..config.crossovers {
        let child = gen.offspring(&mut rng, |rng| {
            let i = rng.below(elite.len());
            let j = if elite.len() > 1 { (i + 1 + rng.below(elite.len() - 1)) % elite.len() } else { i };
            crossover(&elite[i].candidate, &elite[j].candidate, rng)
        })?;
        out.push(child);
    }
    for _ in 0..config.population - config.mutations - config.crossovers {
        out.push(gen.fresh(&mut rng)?);
    }
    Ok(out)
}

/// Seed of the evaluation at `(epoch, index)`.
pub fn eval_seed(search_seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(search_seed, &[0xe7a1, epoch as u64, index as u64])
}

impl SearchConfig {
    /// Seed used to score the candidate at `(epoch, index)`.
    pub fn seed_for(&self, epoch: usize, index: usize) -> u64 {
        if self.common_eval_seed {
            derive_seed(self.seed, &[0xe7a1])
        } else {
            eval_seed(self.seed, epoch, index)
        }
    }
}

/// Inputs of [`run_search`] beyond the configuration.
pub struct SearchRun<'a> {
    pub space: &'a SearchSpace,
    pub constraint: &'a Constraint,
    pub pool: Option<&'a [Policy]>,
    /// Thread cap for parallel evaluation; never changes results.
    pub workers: usize,
    /// Previously logged evaluations to resume from.
    pub resume: &'a [EvalRecord],
}

/// Elitist evolutionary search. `on_epoch` receives each newly evaluated
/// epoch's records (not replayed ones) before the next epoch starts.
pub fn run_search(
    config: &SearchConfig,
    run: &SearchRun,
    fitness: &dyn Fitness,
    on_epoch: &mut dyn FnMut(&SearchState, &[EvalRecord]) -> Result<()>,
) -> Result<SearchState> {
    config.validate()?;
    run.constraint.check_feasible(run.space)?;
    let gen = Generator { space: run.space, constraint: run.constraint, pool: run.pool };
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(run.workers.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;

    let mut state = SearchState::default();
    let replay = complete_epochs(run.resume);
    let mut cursor = 0;
    while cursor < replay.len() && state.epoch < config.epochs {
        let epoch = state.epoch;
        let expected = epoch_candidates(config, &gen, &state.elite, epoch)?;
        let records = &replay[cursor..cursor + replay[cursor].epoch_size];
        let logged: Vec<&Candidate> = records.iter().map(|r| &r.candidate).collect();
        if records.len() != expected.len() || logged.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(invalid(format!("search log diverges from the configuration at epoch {epoch}")));
        }
        state.merge(records, config.elite);
        cursor += records.len();
    }

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let candidates = epoch_candidates(config, &gen, &state.elite, epoch)?;
        let size = candidates.len();
        let records: Vec<Result<EvalRecord>> = threads.install(|| {
            use rayon::prelude::*;
            candidates
                .into_par_iter()
                .enumerate()
                .map(|(index, candidate)| {
                    run.space.check(&candidate)?;
                    let overall_bitops = run.constraint.overall_bitops(&candidate)?;
                    if overall_bitops > run.constraint.budget.limit {
                        return Err(invalid("candidate exceeds the budget"));
                    }
                    let seed = config.seed_for(epoch, index);
                    let (fitness, error) = match fitness.evaluate(&candidate, seed) {
                        Ok(f) if f.is_finite() => (Some(f), None),
                        Ok(f) => (None, Some(format!("non-finite fitness {f}"))),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    if let Some(e) = &error {
                        log::warn!("epoch {epoch} candidate {index}: evaluation failed: {e}");
                    }
                    Ok(EvalRecord { epoch, index, epoch_size: size, candidate, overall_bitops, fitness, seed, error })
                })
                .collect()
        });
        let records = records.into_iter().collect::<Result<Vec<_>>>()?;
        state.merge(&records, config.elite);
        log::info!("epoch {epoch}: best {:.6}", state.best_history.last().unwrap());
        on_epoch(&state, &records)?;
    }
    Ok(state)
}
