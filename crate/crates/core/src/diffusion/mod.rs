//! Noise schedule, forward process, DDIM sampling over arbitrary timestep
//! subsequences, training data and the training loop.

mod data;
mod sampler;
mod schedule;
mod training;

pub use data::{read_csv, write_csv, GaussianMixture};
pub use sampler::{sample, sample_with, SamplerConfig};
pub use schedule::{NoiseSchedule, Posterior, ScheduleConfig};
pub use training::{calibration_set, fit, training_batch, TrainConfig};
