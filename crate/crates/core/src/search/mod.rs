//! Joint timestep/bit-width search: candidate encoding, constrained random
//! generation and pre-sampling, evolutionary operators and the elitist loop.

mod evolution;
mod operators;
mod space;

pub use evolution::{
    complete_epochs, eval_seed, run_search, DiffusionFitness, EliteEntry, EvalRecord, Fitness, SearchConfig, SearchRun,
    SearchState, OFFSPRING_RETRIES,
};
pub use operators::{crossover, mutate};
pub use space::{presample_pool, random_candidate, Candidate, Constraint, Pool, SearchSpace, RANDOM_RETRIES};
