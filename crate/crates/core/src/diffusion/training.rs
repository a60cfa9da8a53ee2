use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::nn::{train_step, Adam, DenoiserNet, TrainingBatch};
use crate::numerics::{Rng, Tensor};
use crate::quant::CalibSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch_size: 256, lr: 1e-3 }
    }
}

fn pick_rows(data: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let cols = data.cols();
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(data.row(i));
    }
    Tensor::new(vec![idx.len(), cols], out)
}

/// Random `(x_t, t, ε)` triples from data rows drawn with replacement and
/// timesteps uniform over `[0, T)`.
pub fn training_batch(sched: &NoiseSchedule, data: &Tensor, size: usize, rng: &mut Rng) -> Result<TrainingBatch> {
    if data.rows() == 0 || data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let idx: Vec<usize> = (0..size).map(|_| rng.below(data.rows())).collect();
    let ts: Vec<usize> = (0..size).map(|_| rng.below(sched.len())).collect();
    let x0 = pick_rows(data, &idx)?;
    let eps = Tensor::new(x0.shape().to_vec(), rng.normals(x0.len()))?;
    let x_t = sched.noise_with(&x0, &ts, &eps)?;
    Ok(TrainingBatch { x_t, ts, eps })
}

/// Trains the network on ε-prediction; returns the per-step loss history.
pub fn fit(net: &mut DenoiserNet, sched: &NoiseSchedule, data: &Tensor, config: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if data.cols() != net.input_dim() {
        return Err(invalid(format!("dataset has {} columns, network expects {}", data.cols(), net.input_dim())));
    }
    let mut opt = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = training_batch(sched, data, config.batch_size, rng)?;
        let loss = train_step(net, &batch, &mut opt)?;
        if step % 500 == 0 {
            log::debug!("train step {step}: loss {loss:.5}");
        }
        history.push(loss);
    }
    Ok(history)
}

/// `n` noisy samples at timesteps stratified over `[0, T)`: one uniform draw
/// from each of `n` equal-width strata.
pub fn calibration_set(sched: &NoiseSchedule, data: &Tensor, n: usize, rng: &mut Rng) -> Result<CalibSet> {
    if n == 0 {
        return Err(invalid("calibration set needs at least one sample"));
    }
    if data.rows() == 0 || data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let t_max = sched.len();
    let ts: Vec<usize> = (0..n)
        .map(|i| (((i as f64 + rng.uniform()) * t_max as f64 / n as f64) as usize).min(t_max - 1))
        .collect();
    let idx: Vec<usize> = (0..n).map(|_| rng.below(data.rows())).collect();
    let x0 = pick_rows(data, &idx)?;
    let eps = Tensor::new(x0.shape().to_vec(), rng.normals(x0.len()))?;
    let x = sched.noise_with(&x0, &ts, &eps)?;
    Ok(CalibSet { x, ts })
}
