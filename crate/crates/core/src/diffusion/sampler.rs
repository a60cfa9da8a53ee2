use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::nn::DenoiserNet;
use crate::numerics::{Rng, Tensor};
use crate::quant::QuantContext;

/// Deterministic DDIM settings over a selected timestep subsequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub eta: f64,
    pub subsequence: Vec<usize>,
}

impl SamplerConfig {
    pub fn new(subsequence: Vec<usize>) -> Self {
        Self { eta: 0.0, subsequence }
    }

    /// `steps` timesteps `⌊i·T/steps⌋` for `i = 0..steps`.
    pub fn uniform(timesteps: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > timesteps {
            return Err(invalid(format!("cannot pick {steps} uniform steps out of {timesteps}")));
        }
        Ok(Self::new((0..steps).map(|i| i * timesteps / steps).collect()))
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.eta != 0.0 {
            return Err(invalid(format!("only eta = 0 is supported, got {}", self.eta)));
        }
        if self.subsequence.is_empty() {
            return Err(invalid("empty timestep subsequence"));
        }
        if self.subsequence.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("timestep subsequence must be strictly increasing"));
        }
        let last = *self.subsequence.last().unwrap();
        if last >= sched.len() {
            return Err(invalid(format!("timestep {last} outside [0, {})", sched.len())));
        }
        Ok(())
    }
}

/// Runs DDIM from `x_init` at the largest selected timestep down the
/// subsequence, then hops to the data end. `eps` predicts noise for a batch at
/// one timestep.
pub fn sample_with<F>(sched: &NoiseSchedule, config: &SamplerConfig, x_init: Tensor, mut eps: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    config.validate(sched)?;
    let seq = &config.subsequence;
    let mut x = x_init;
    for i in (0..seq.len()).rev() {
        let t = seq[i];
        let prev = if i == 0 { None } else { Some(seq[i - 1]) };
        let e = eps(&x, t)?;
        x = sched.ddim_step(&x, &e, t, prev)?;
    }
    Ok(x)
}

/// Draws `n` samples from the network with an optional quantization context
/// shared by every step.
pub fn sample(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    quant: Option<&QuantContext>,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if let Some(q) = quant {
        q.check(net)?;
    }
    let d = net.output_dim();
    let x = Tensor::new(vec![n, d], rng.normals(n * d))?;
    if n == 0 {
        config.validate(sched)?;
        return Ok(x);
    }
    sample_with(sched, config, x, |x, t| net.forward(x, &[t], quant))
}
