use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Rng, Tensor};

/// β, α = 1 − β and ᾱ_t = ∏_{s≤t} α_s over `T` timesteps, 0-indexed with
/// `t = 0` at the data end.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Coefficients of the Gaussian posterior `q(x_{t-1} | x_t, x_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `start` to `end`.
    pub fn linear(timesteps: usize, start: f64, end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        let betas = (0..timesteps)
            .map(|t| if timesteps == 1 { start } else { start + (end - start) * t as f64 / (timesteps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if let Some((t, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta[{t}] = {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// ᾱ at `t`, with `None` standing for the data end (ᾱ = 1).
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(invalid(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` with fresh `ε ~ N(0, I)`; returns `(x_t, ε)`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        self.check_t(t)?;
        let eps = Tensor::new(x0.shape().to_vec(), rng.normals(x0.len()))?;
        let xt = self.noise_with(x0, &[t], &eps)?;
        Ok((xt, eps))
    }

    /// Deterministic forward marginal for given noise. `ts` holds one
    /// timestep per row or a single shared one.
    pub fn noise_with(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let rows = x0.rows();
        if ts.len() != 1 && ts.len() != rows {
            return Err(invalid(format!("{} timesteps for {rows} rows", ts.len())));
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let mut out = x0.zip_map(eps, |_, _| 0.0)?;
        let cols = x0.cols();
        for r in 0..rows {
            let t = if ts.len() == 1 { ts[0] } else { ts[r] };
            let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
            for c in 0..cols {
                out.data_mut()[r * cols + c] = a * x0.row(r)[c] + b * eps.row(r)[c];
            }
        }
        Ok(out)
    }

    /// Posterior mean coefficients and variance for `t ≥ 1`.
    pub fn posterior_params(&self, t: usize) -> Result<Posterior> {
        self.check_t(t)?;
        if t == 0 {
            return Err(invalid("posterior is defined for t >= 1"));
        }
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta[t];
        Ok(Posterior {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
            coef_xt: self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: (1.0 - ab_prev) / (1.0 - ab) * beta,
        })
    }

    /// Deterministic DDIM update (η = 0) from `t_cur` to `t_prev`, where
    /// `t_prev = None` is the data end.
    pub fn ddim_step(&self, x_t: &Tensor, eps_hat: &Tensor, t_cur: usize, t_prev: Option<usize>) -> Result<Tensor> {
        self.check_t(t_cur)?;
        if let Some(p) = t_prev {
            self.check_t(p)?;
            if p > t_cur {
                return Err(invalid(format!("DDIM step must go backwards, got {t_cur} -> {p}")));
            }
            if p == t_cur {
                return Ok(x_t.clone());
            }
        }
        let ab = self.alpha_bar[t_cur];
        let ab_prev = self.alpha_bar_at(t_prev);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x_t.zip_map(eps_hat, |x, e| {
            let x0 = (x - sn * e) / sa;
            pa * x0 + pn * e
        })
    }
}
