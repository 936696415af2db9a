//! DDPM noise schedules and timestep respacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step noise schedule over `T` steps.
///
/// Steps are 1-based in the public API (`t ∈ [1, T]`), matching the usual
/// DDPM indexing where `x_0` is clean data. `sigma[t]` is the "small"
/// posterior choice `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t` with `ᾱ_0 = 1`,
/// which makes `σ_1 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Schedule families. Only the linear ramp is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

impl NoiseSchedule {
    /// Build a schedule of `kind` over `t_steps` steps with β ramping from
    /// `beta_start` to `beta_end` (a single step uses `beta_start`).
    pub fn make(kind: ScheduleKind, t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..t_steps)
                .map(|i| {
                    if t_steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                    }
                })
                .collect(),
        };
        Self::from_betas(beta)
    }

    /// Build directly from a β sequence, validating the derived quantities.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        for (i, &ab) in alpha_bar.iter().enumerate() {
            if !(ab > 0.0 && ab < 1.0) {
                return Err(Error::invalid(format!(
                    "alpha_bar[{i}] = {ab} is outside (0, 1); beta values too extreme"
                )));
            }
            if i > 0 && ab >= alpha_bar[i - 1] {
                return Err(Error::invalid(format!(
                    "alpha_bar must be strictly decreasing, violated at step {}",
                    i + 1
                )));
            }
        }
        let sigma = (0..beta.len())
            .map(|i| {
                let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                let var = (1.0 - ab_prev) / (1.0 - alpha_bar[i]) * beta[i];
                var.sqrt()
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::invalid(format!(
                "step {t} out of range [1, {}]",
                self.t_steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.check_t(t)?])
    }
}

/// A sampling-time view of a schedule: either the full training chain or a
/// strided subset with recomputed ᾱ ratios.
///
/// `step_to_train_t(i)` maps a sampling step `i ∈ [1, len]` back to the
/// training-chain step whose ᾱ it kept; denoisers are conditioned on that
/// original step.
#[derive(Debug, Clone)]
pub struct SamplingSchedule {
    chain: NoiseSchedule,
    train_t: Vec<usize>,
}

impl SamplingSchedule {
    /// Use the full training chain unchanged.
    pub fn full(train: &NoiseSchedule) -> Self {
        Self {
            chain: train.clone(),
            train_t: (1..=train.t_steps()).collect(),
        }
    }

    /// Keep `n_steps` timesteps of `train`, evenly strided across `[1, T]`
    /// with both endpoints included, and rebuild β from consecutive ᾱ ratios
    /// so the kept steps form a valid shorter chain with identical ᾱ values.
    pub fn respaced(train: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        let t = train.t_steps();
        if n_steps == 0 {
            return Err(Error::invalid("need at least one sampling step"));
        }
        if n_steps > t {
            return Err(Error::invalid(format!(
                "cannot respace {t} training steps into {n_steps} sampling steps"
            )));
        }
        if n_steps == t {
            return Ok(Self::full(train));
        }
        // Fractional stride over 0-based indices, endpoints pinned.
        let mut kept: Vec<usize> = Vec::with_capacity(n_steps);
        if n_steps == 1 {
            kept.push(t - 1);
        } else {
            let stride = (t - 1) as f64 / (n_steps - 1) as f64;
            for i in 0..n_steps {
                let idx = (i as f64 * stride).round() as usize;
                if kept.last() != Some(&idx) {
                    kept.push(idx);
                }
            }
        }
        let mut beta = Vec::with_capacity(kept.len());
        let mut prev_ab = 1.0;
        for &idx in &kept {
            let ab = train.alpha_bar[idx];
            beta.push(1.0 - ab / prev_ab);
            prev_ab = ab;
        }
        let chain = NoiseSchedule::from_betas(beta)?;
        Ok(Self {
            chain,
            train_t: kept.iter().map(|&i| i + 1).collect(),
        })
    }

    /// The (possibly shortened) chain used for sampling arithmetic.
    pub fn chain(&self) -> &NoiseSchedule {
        &self.chain
    }

    pub fn len(&self) -> usize {
        self.train_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_t.is_empty()
    }

    /// Training-chain step for sampling step `i ∈ [1, len]`.
    pub fn step_to_train_t(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.train_t.len() {
            return Err(Error::invalid(format!(
                "sampling step {i} out of range [1, {}]",
                self.train_t.len()
            )));
        }
        Ok(self.train_t[i - 1])
    }
}
