//! Probability normalizers: temperature softmax, sparsemax, and the
//! annealed sparsemax driven by an epoch-indexed temperature schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `exp(z_i/τ) / Σ_j exp(z_j/τ)`, max-subtracted.
pub fn softmax_temperature(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if z.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sort descending (stable, ties keep index order), take the largest `k`
/// with `1 + k·z_(k) > Σ_{j≤k} z_(j)`, threshold `t = (Σ_{j≤k} z_(j) − 1)/k`,
/// output `max(z_i − t, 0)`.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "sparsemax of an empty vector");
    let t = sparsemax_threshold(z);
    z.iter().map(|v| (v - t).max(0.0)).collect()
}

fn sparsemax_threshold(z: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut support = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let k = (rank + 1) as f64;
        cumsum += z[i];
        if 1.0 + k * z[i] > cumsum {
            support = rank + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// `softmax` / `sparsemax` selector for normalizing architecture scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    Softmax,
    Sparsemax,
}

impl Normalizer {
    /// Normalizes `z / tau`.
    pub fn apply(self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        match self {
            Normalizer::Softmax => softmax_temperature(z, tau),
            Normalizer::Sparsemax => {
                if !(tau > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "temperature must be positive, got {tau}"
                    )));
                }
                let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
                Ok(sparsemax(&scaled))
            }
        }
    }

    /// Vector-Jacobian product: given `p = apply(z, tau)` and `∂L/∂p`,
    /// returns `∂L/∂z`. The temperature is a constant divisor.
    pub fn vjp(self, p: &[f64], grad_p: &[f64], tau: f64) -> Vec<f64> {
        match self {
            Normalizer::Softmax => {
                let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
                p.iter()
                    .zip(grad_p)
                    .map(|(pi, gi)| pi * (gi - dot) / tau)
                    .collect()
            }
            Normalizer::Sparsemax => {
                // J = I_S − 1_S 1_Sᵀ/|S| on the support S, zero elsewhere.
                let (count, sum) = p
                    .iter()
                    .zip(grad_p)
                    .filter(|(pi, _)| **pi > 0.0)
                    .fold((0usize, 0.0), |(c, s), (_, g)| (c + 1, s + g));
                let mean = sum / count.max(1) as f64;
                p.iter()
                    .zip(grad_p)
                    .map(|(pi, gi)| if *pi > 0.0 { (gi - mean) / tau } else { 0.0 })
                    .collect()
            }
        }
    }
}

/// Temperature annealing `τ · a^(epoch // m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.5,
            factor: 0.75,
            interval: 5,
        }
    }
}

impl AnnealSchedule {
    pub fn new(tau0: f64, factor: f64, interval: usize) -> Result<Self> {
        let s = Self {
            tau0,
            factor,
            interval,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) {
            return Err(Error::Config(format!("tau0 must be positive, got {}", self.tau0)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!(
                "annealing factor must lie in (0, 1], got {}",
                self.factor
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("annealing interval must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_temperature(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.interval) as i32;
        self.tau0 * self.factor.powi(steps)
    }
}

/// Sparsemax of `z / (τ · a^(epoch // m))`.
pub fn annealed_sparsemax(z: &[f64], schedule: &AnnealSchedule, epoch: usize) -> Vec<f64> {
    let tau = schedule.effective_temperature(epoch);
    let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
    sparsemax(&scaled)
}

/// Number of strictly positive entries.
pub fn support_size(p: &[f64]) -> usize {
    p.iter().filter(|v| **v > 0.0).count()
}
