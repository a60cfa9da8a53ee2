use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::net::{DenoiserNet, NetConfig, Tape};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Rng, Tensor};

/// Noisy inputs, their timesteps and the noise that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub x_t: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Mean squared error between predicted and true noise, and its adjoint.
pub fn noise_mse(pred: &Tensor, eps: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(eps)?;
    let n = diff.len().max(1) as f64;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// One Adam step on the ε-prediction loss. Returns the loss before the step.
pub fn train_step(net: &mut DenoiserNet, batch: &TrainingBatch, opt: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let pred = net.forward_recorded(&batch.x_t, &batch.ts, None, &mut tape)?;
    let (loss, adjoint) = noise_mse(&pred, &batch.eps)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss} at optimizer step {}", opt.t + 1)));
    }
    let grads = net.backward(&tape, &adjoint)?;
    let mut params = net.params();
    opt.step(&mut params, &grads.params);
    net.set_params(&params)?;
    Ok(loss)
}

/// Serialized trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub fn new(config: &NetConfig, net: &DenoiserNet, seed: u64, loss_history: Vec<f64>) -> Self {
        Self {
            net: config.clone(),
            layers: net.layer_specs(),
            params: net.params(),
            seed,
            loss_history,
            config_hash: None,
        }
    }

    pub fn restore(&self) -> Result<DenoiserNet> {
        let mut net = DenoiserNet::new(&self.net, &mut Rng::new(0))?;
        if net.layer_specs() != self.layers {
            return Err(invalid("checkpoint layer list does not match its architecture"));
        }
        net.set_params(&self.params)?;
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("checkpoint holds non-finite parameters"));
        }
        Ok(net)
    }
}
