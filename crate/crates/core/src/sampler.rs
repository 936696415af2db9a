//! Ancestral sampling for the reverse diffusion chain.
//!
//! `sample_loop` walks a (possibly respaced) [`SamplingSchedule`] from pure
//! noise down to `x_0`, querying an [`EpsModel`] for noise predictions and
//! combining conditional branches according to a [`GuidanceConfig`]. Every
//! sample draws from its own counter-derived RNG stream, so results are
//! bit-identical for a given seed regardless of batch order or thread count.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode, guide_eps_cfg, guide_eps_fine};
use crate::mixture::{GaussianMixture, Scope};
use crate::rng::{domain, rng_for};
use crate::schedule::{NoiseSchedule, SamplingSchedule};
use crate::taxonomy::Taxonomy;

/// Conditioning label for a single model query or sample request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Subclass(usize),
    Superclass(usize),
    Null,
}

/// Anything that predicts the noise component of `x_t` given a label.
/// `t` is a 1-based step on the training chain.
pub trait EpsModel {
    fn dim(&self) -> usize;
    fn eps(&self, x: &[f64], t: usize, label: Label) -> Result<Vec<f64>>;
}

/// Forward noising: `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::invalid("x0 and eps must have the same length"));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse transition on the sampling chain. `step` is 1-based within
/// `steps`; noise is drawn from `rng` only for `step > 1` (the final
/// transition is deterministic).
pub fn p_step(
    x: &[f64],
    eps_hat: &[f64],
    step: usize,
    steps: &SamplingSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if x.len() != eps_hat.len() {
        return Err(Error::invalid("x and eps_hat must have the same length"));
    }
    let sched = steps.chain();
    let beta = sched.beta(step)?;
    let alpha = sched.alpha(step)?;
    let ab = sched.alpha_bar(step)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mut out: Vec<f64> = x
        .iter()
        .zip(eps_hat)
        .map(|(xi, ei)| inv_sqrt_alpha * (xi - coef * ei))
        .collect();
    if step > 1 {
        let sigma = sched.sigma(step)?;
        for o in out.iter_mut() {
            *o += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// Resolve the guided noise prediction for one query. When the combination
/// would return the conditional branch verbatim (`omega == 1` or mode
/// `None`), the base branch is never evaluated.
pub fn guided_eps<M: EpsModel + ?Sized>(
    model: &M,
    tax: &Taxonomy,
    x: &[f64],
    t: usize,
    label: Label,
    guidance: &GuidanceConfig,
) -> Result<Vec<f64>> {
    match guidance.mode {
        GuidanceMode::None => model.eps(x, t, label),
        GuidanceMode::Cfg => {
            let cond = model.eps(x, t, label)?;
            if guidance.omega == 1.0 {
                return Ok(cond);
            }
            let base = model.eps(x, t, Label::Null)?;
            guide_eps_cfg(&cond, &base, guidance.omega)
        }
        GuidanceMode::FineGrained => {
            let Label::Subclass(sub) = label else {
                return Err(Error::invalid(
                    "fine-grained guidance needs a subclass label",
                ));
            };
            let cond = model.eps(x, t, label)?;
            if guidance.omega == 1.0 {
                return Ok(cond);
            }
            let base = model.eps(x, t, Label::Superclass(tax.parent(sub)?))?;
            guide_eps_fine(&cond, &base, guidance.omega)
        }
    }
}

/// Run the full reverse chain for each requested label. Returns one `x_0`
/// per entry of `labels`, in order.
pub fn sample_loop<M: EpsModel + Sync + ?Sized>(
    model: &M,
    tax: &Taxonomy,
    steps: &SamplingSchedule,
    labels: &[Label],
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    guidance.validate()?;
    let dim = model.dim();
    let n_steps = steps.len();
    let results = crate::par::map_indexed(labels.len(), |i| -> Result<Vec<f64>> {
        let mut rng = rng_for(seed, &[domain::SAMPLER, i as u64]);
        let mut x: Vec<f64> =
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for step in (1..=n_steps).rev() {
            let t = steps.step_to_train_t(step)?;
            let eps_hat = guided_eps(model, tax, &x, t, labels[i], guidance)?;
            x = p_step(&x, &eps_hat, step, steps, &mut rng)?;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("sample {i} diverged to non-finite values")));
        }
        Ok(x)
    });
    results.into_iter().collect()
}

/// The ideal denoiser: predicts noise from the exact score of the noised
/// data mixture. `Null` queries fall back to the marginal over subclasses.
pub struct AnalyticOracle {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
    noised: HashMap<usize, GaussianMixture>,
}

impl AnalyticOracle {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule, noised: HashMap::new() }
    }

    /// Precompute noised mixtures for every step of a sampling chain so the
    /// hot loop only does score evaluations.
    pub fn precompute(&mut self, steps: &SamplingSchedule) -> Result<()> {
        for step in 1..=steps.len() {
            let t = steps.step_to_train_t(step)?;
            if !self.noised.contains_key(&t) {
                self.noised.insert(t, self.mixture.noised(&self.schedule, t)?);
            }
        }
        Ok(())
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    fn scope_for(label: Label) -> Scope {
        match label {
            Label::Subclass(s) => Scope::Subclass(s),
            Label::Superclass(s) => Scope::Superclass(s),
            Label::Null => Scope::Marginal,
        }
    }
}

impl EpsModel for AnalyticOracle {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn eps(&self, x: &[f64], t: usize, label: Label) -> Result<Vec<f64>> {
        let scope = Self::scope_for(label);
        match self.noised.get(&t) {
            Some(noised) => {
                let scale = (1.0 - self.schedule.alpha_bar(t)?).sqrt();
                let score = noised.score(scope, x)?;
                Ok(score.iter().map(|g| -scale * g).collect())
            }
            None => self.mixture.analytic_eps(scope, x, t, &self.schedule),
        }
    }
}
