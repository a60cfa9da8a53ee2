//! Partitions of `[0, T)` into contiguous timestep groups, and the temporal
//! feature difference that motivates finer groups near the data end.
//!
//! The non-uniform scheme places quadratic boundaries
//! `0.8T·h²/(H−1)²` for `h = 0..H−1`, then a final group `[0.8T, T)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingKind {
    NonUniform,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingScheme {
    pub timesteps: usize,
    pub kind: GroupingKind,
    /// `H + 1` strictly increasing cuts from 0 to `T`.
    pub boundaries: Vec<usize>,
}

fn check_dims(timesteps: usize, groups: usize) -> Result<()> {
    if groups < 2 {
        return Err(invalid(format!("need at least 2 groups, got {groups}")));
    }
    if groups > timesteps {
        return Err(invalid(format!("{groups} groups cannot partition {timesteps} timesteps")));
    }
    Ok(())
}

/// `⌈0.8·T·h² / (H−1)²⌉` in exact integer arithmetic.
fn quadratic_cut(timesteps: usize, groups: usize, h: usize) -> usize {
    let num = 4 * timesteps as u128 * (h * h) as u128;
    let den = 5 * ((groups - 1) * (groups - 1)) as u128;
    num.div_ceil(den) as usize
}

/// Cuts of the non-uniform scheme before empty groups are repaired.
pub fn raw_boundaries(timesteps: usize, groups: usize) -> Result<Vec<usize>> {
    check_dims(timesteps, groups)?;
    let mut b: Vec<usize> = (0..groups).map(|h| quadratic_cut(timesteps, groups, h)).collect();
    b.push(timesteps);
    Ok(b)
}

impl GroupingScheme {
    pub fn build(timesteps: usize, groups: usize, kind: GroupingKind) -> Result<Self> {
        check_dims(timesteps, groups)?;
        let boundaries = match kind {
            GroupingKind::Uniform => (0..=groups).map(|h| h * timesteps / groups).collect(),
            GroupingKind::NonUniform => {
                let mut b = raw_boundaries(timesteps, groups)?;
                // An empty group takes one index from its right neighbor.
                for h in 1..groups {
                    b[h] = b[h].max(b[h - 1] + 1);
                }
                for h in (1..groups).rev() {
                    b[h] = b[h].min(b[h + 1] - 1);
                }
                b
            }
        };
        let scheme = Self { timesteps, kind, boundaries };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.boundaries;
        if b.len() < 3 || b[0] != 0 || *b.last().unwrap() != self.timesteps {
            return Err(invalid("group boundaries must run from 0 to T with at least two groups"));
        }
        if b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("group boundaries must be strictly increasing"));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Timesteps of group `h` (0-indexed).
    pub fn range(&self, h: usize) -> Range<usize> {
        self.boundaries[h]..self.boundaries[h + 1]
    }

    pub fn width(&self, h: usize) -> usize {
        self.boundaries[h + 1] - self.boundaries[h]
    }

    pub fn widths(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// 0-indexed group containing `t`.
    pub fn group_of(&self, t: usize) -> Result<usize> {
        if t >= self.timesteps {
            return Err(invalid(format!("timestep {t} outside [0, {})", self.timesteps)));
        }
        Ok(self.boundaries.partition_point(|&b| b <= t) - 1)
    }

    /// `log₁₀` of the number of one-per-group timestep selections.
    pub fn log10_selections(&self) -> f64 {
        self.widths().iter().map(|&w| (w as f64).log10()).sum()
    }
}

/// 1-indexed non-uniform group of `t`, in `[1, H]`.
pub fn group_index(timesteps: usize, groups: usize, t: usize) -> Result<usize> {
    let scheme = GroupingScheme::build(timesteps, groups, GroupingKind::NonUniform)?;
    Ok(scheme.group_of(t)? + 1)
}

/// `log₁₀ C(n, k)`.
pub fn log10_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).log10()).sum()
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64)
}

/// `Σ_{i=1}^{w} MSE(x_{t+i−1}, x_{t+i})` over a trajectory indexed by timestep.
pub fn temporal_difference(trajectory: &[Tensor], window: usize, t: usize) -> Result<f64> {
    if t + window >= trajectory.len() {
        return Err(invalid(format!(
            "window [{t}, {}] exceeds a trajectory of {} states",
            t + window,
            trajectory.len()
        )));
    }
    (1..=window).map(|i| mse(&trajectory[t + i - 1], &trajectory[t + i])).sum()
}
