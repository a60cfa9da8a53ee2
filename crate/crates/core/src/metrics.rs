//! Fréchet distance between Gaussian fits of two sample sets, used as the
//! search fitness on raw sample coordinates.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{shape, Result};
use crate::nn::DenoiserNet;
use crate::numerics::{gaussian_stats, trace_sqrt_product, GaussianStats, Rng};
use crate::quant::QuantContext;

/// Default number of generated samples per fitness evaluation.
pub const DEFAULT_FITNESS_SAMPLES: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub frechet: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// `‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r Σ_g)^{1/2})`, clamped at 0.
pub fn frechet_distance(r: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if r.dim() != g.dim() || r.cov.shape() != g.cov.shape() {
        return Err(shape(format!("Fréchet distance between dims {} and {}", r.dim(), g.dim())));
    }
    let mean_term: f64 = r.mean.iter().zip(&g.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    // Averaging both congruence orders makes the result exactly symmetric.
    let cross = 0.5 * (trace_sqrt_product(&r.cov, &g.cov)? + trace_sqrt_product(&g.cov, &r.cov)?);
    let d = mean_term + r.cov.trace()? + g.cov.trace()? - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Samples `n` points along `subsequence` (optionally quantized) and scores
/// them against `reference`.
pub fn evaluate_fitness(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    quant: Option<&QuantContext>,
    subsequence: &[usize],
    reference: &GaussianStats,
    n: usize,
    seed: u64,
) -> Result<FitnessReport> {
    let config = SamplerConfig::new(subsequence.to_vec());
    let x = sample(net, sched, &config, quant, n, &mut Rng::new(seed))?;
    let stats = gaussian_stats(&x)?;
    Ok(FitnessReport { frechet: frechet_distance(reference, &stats)?, n_samples: n, seed })
}
