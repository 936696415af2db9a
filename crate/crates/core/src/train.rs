//! Denoising-loss training with per-tensor freezing.
//!
//! Batches are pure functions of `(seed, iteration, position)`: each sample
//! draws its data row, label replacement, timestep, and noise from its own
//! counter-derived RNG stream, and per-sample gradients are folded in fixed
//! index order. Training is therefore bit-reproducible regardless of thread
//! count, and needs no RNG state in checkpoints.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::LabeledSample;
use crate::model::{
    count_trainable, load_pretrained_then_extend, trainable_mask, Denoiser, FinetuneMode,
    Gradients, ParamTag, ParameterRegistry, TrainableCount,
};
use crate::rng::{domain, rng_for};
use crate::sampler::{q_sample, Label};
use crate::schedule::NoiseSchedule;
use crate::taxonomy::Taxonomy;

/// Per-sample gradient buffers are folded in chunks of this many samples;
/// fixing the chunk size keeps accumulation order independent of threading.
pub const GRAD_CHUNK: usize = 16;

/// How conditioning labels are perturbed during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Always train on the true subclass label.
    Keep,
    /// With probability `p`, replace the label by the null label
    /// (classifier-free guidance training).
    NullDrop { p: f64 },
    /// With probability `p`, replace the label by its superclass.
    SuperReplace { p: f64 },
    /// Replace by the superclass with probability `p_super`, by the null
    /// label with probability `p_null`. Pretraining uses this so both the
    /// superclass rows and the null row see data.
    Tiered { p_super: f64, p_null: f64 },
}

impl LabelPolicy {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = match self {
            LabelPolicy::Keep => return Ok(()),
            LabelPolicy::NullDrop { p } | LabelPolicy::SuperReplace { p } => (*p, 0.0),
            LabelPolicy::Tiered { p_super, p_null } => (*p_super, *p_null),
        };
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a + b > 1.0 {
            return Err(Error::invalid(format!(
                "replacement probabilities ({a}, {b}) must be in [0, 1] and sum to at most 1"
            )));
        }
        Ok(())
    }

    /// The policy each fine-tuning mode conventionally trains with: the
    /// tiered mode learns its superclass rows by replacement, the baselines
    /// learn a null row for standard guidance.
    pub fn default_for(mode: FinetuneMode) -> Self {
        match mode {
            FinetuneMode::Finediffusion => LabelPolicy::SuperReplace { p: 0.1 },
            _ => LabelPolicy::NullDrop { p: 0.1 },
        }
    }
}

/// Draw the training label for one sample. Consumes exactly one uniform
/// from `rng` for the probabilistic policies and none for `Keep`.
pub fn replace_label(
    policy: &LabelPolicy,
    subclass: usize,
    tax: &Taxonomy,
    rng: &mut ChaCha8Rng,
) -> Result<Label> {
    if subclass >= tax.n_sub() {
        return Err(Error::invalid(format!("subclass {subclass} out of range")));
    }
    Ok(match policy {
        LabelPolicy::Keep => Label::Subclass(subclass),
        LabelPolicy::NullDrop { p } => {
            if rng.random::<f64>() < *p {
                Label::Null
            } else {
                Label::Subclass(subclass)
            }
        }
        LabelPolicy::SuperReplace { p } => {
            if rng.random::<f64>() < *p {
                Label::Superclass(tax.parent(subclass)?)
            } else {
                Label::Subclass(subclass)
            }
        }
        LabelPolicy::Tiered { p_super, p_null } => {
            let u = rng.random::<f64>();
            if u < *p_super {
                Label::Superclass(tax.parent(subclass)?)
            } else if u < *p_super + *p_null {
                Label::Null
            } else {
                Label::Subclass(subclass)
            }
        }
    })
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: FinetuneMode,
    pub n_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled decay, applied to `Weight` tensors only.
    pub weight_decay: f64,
    pub label_policy: LabelPolicy,
    pub seed: u64,
    /// Record a loss point every this many iterations (0 = only endpoints).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(mode: FinetuneMode, n_iters: usize, seed: u64) -> Self {
        Self {
            mode,
            n_iters,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.01,
            label_policy: LabelPolicy::default_for(mode),
            seed,
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::invalid("n_iters must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        self.label_policy.validate()
    }
}

/// One logged loss point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iter: usize,
    pub loss: f64,
}

/// Outcome of a training run. Deliberately free of wall-clock quantities:
/// reports are embedded in checkpoints, and rerunning a seed must reproduce
/// those files byte for byte. Timing lives in [`train_timed`]'s separate
/// return value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: FinetuneMode,
    pub n_iters: usize,
    pub batch_size: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<LossPoint>,
    pub trainable: TrainableCount,
}

/// Optimizer state plus progress, snapshotted between iterations. Feeding
/// it back through [`train_resumable`] continues the run exactly: the final
/// parameters are bit-identical to a never-interrupted run, because batch
/// draws are keyed by absolute iteration index and the Adam moments resume
/// unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// The configuration of the run that produced this state. A resumed run
    /// must match it in everything but the iteration target.
    pub config: TrainConfig,
    /// Iterations already applied to the model.
    pub completed_iters: usize,
    pub adam_step: u64,
    /// First and second moments, index-aligned with the registry; empty
    /// vectors at frozen tensors.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl TrainState {
    /// A fresh run of `cfg`: no progress, zeroed moments for trainable
    /// tensors.
    pub fn fresh(cfg: &TrainConfig, reg: &ParameterRegistry, mask: &[bool]) -> Self {
        let m: Vec<Vec<f64>> = reg
            .iter()
            .zip(mask)
            .map(|(p, &on)| if on { vec![0.0; p.len()] } else { Vec::new() })
            .collect();
        let v = m.clone();
        Self { config: cfg.clone(), completed_iters: 0, adam_step: 0, m, v }
    }

    /// Check that this state can continue under `cfg` and drive `reg`.
    /// Everything that shapes the computation must match; only `n_iters`
    /// (the target) and `log_every` may differ.
    pub fn check_resume(&self, cfg: &TrainConfig, reg: &ParameterRegistry, mask: &[bool]) -> Result<()> {
        let a = &self.config;
        if a.mode != cfg.mode
            || a.batch_size != cfg.batch_size
            || a.lr != cfg.lr
            || a.weight_decay != cfg.weight_decay
            || a.label_policy != cfg.label_policy
            || a.seed != cfg.seed
        {
            return Err(Error::invalid(
                "resume config differs from the original in more than the iteration target",
            ));
        }
        if cfg.n_iters < self.completed_iters {
            return Err(Error::invalid(format!(
                "resume target {} is below the {} iterations already done",
                cfg.n_iters, self.completed_iters
            )));
        }
        if self.m.len() != reg.len() || self.v.len() != reg.len() {
            return Err(Error::invalid("optimizer state does not align with the registry"));
        }
        for (idx, p) in reg.iter().enumerate() {
            let expect = if mask[idx] { p.len() } else { 0 };
            if self.m[idx].len() != expect || self.v[idx].len() != expect {
                return Err(Error::invalid(format!(
                    "optimizer moments for tensor {} have the wrong length",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Moment buffers exist only for trainable
/// tensors, and decay touches only `Weight` tensors.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(reg: &ParameterRegistry, mask: &[bool], lr: f64, weight_decay: f64) -> Self {
        let m = reg
            .iter()
            .zip(mask)
            .map(|(p, &on)| if on { vec![0.0; p.len()] } else { Vec::new() })
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m, v, step: 0 }
    }

    /// Rebuild an optimizer mid-run from snapshotted moments.
    fn from_state(lr: f64, weight_decay: f64, state: &TrainState) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: state.m.clone(),
            v: state.v.clone(),
            step: state.adam_step,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, reg: &mut ParameterRegistry, grads: &Gradients, mask: &[bool]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..reg.len() {
            if !mask[idx] {
                continue;
            }
            let param = reg.get_mut(idx);
            let wd = if param.tag == ParamTag::Weight { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let g = &grads.per_param[idx];
            for k in 0..param.values.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let theta = &mut param.values[k];
                *theta -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * *theta);
            }
        }
    }
}

/// Everything one training sample needs, derived from its RNG stream.
struct Drawn {
    x_t: Vec<f64>,
    eps: Vec<f64>,
    t: usize,
    label: Label,
}

fn draw_sample(
    data: &[LabeledSample],
    tax: &Taxonomy,
    sched: &NoiseSchedule,
    policy: &LabelPolicy,
    seed: u64,
    iter: u64,
    j: u64,
) -> Result<Drawn> {
    let mut rng = rng_for(seed, &[domain::TRAIN_SAMPLE, iter, j]);
    let row = &data[rng.random_range(0..data.len())];
    let label = replace_label(policy, row.subclass, tax, &mut rng)?;
    let t = rng.random_range(1..=sched.t_steps());
    let eps: Vec<f64> =
        (0..row.x0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x_t = q_sample(&row.x0, &eps, t, sched)?;
    Ok(Drawn { x_t, eps, t, label })
}

/// Mean denoising loss of one batch, without gradients. Uses exactly the
/// same draws as [`loss_batch`], so it doubles as the value function for
/// finite-difference checks of the backward pass.
pub fn eps_mse_batch(
    model: &Denoiser,
    data: &[LabeledSample],
    tax: &Taxonomy,
    sched: &NoiseSchedule,
    policy: &LabelPolicy,
    batch_size: usize,
    seed: u64,
    iter: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..batch_size {
        let d = draw_sample(data, tax, sched, policy, seed, iter, j as u64)?;
        let out = model.forward(&d.x_t, d.t, d.label)?;
        let dim = out.len() as f64;
        total +=
            out.iter().zip(&d.eps).map(|(o, e)| (o - e) * (o - e)).sum::<f64>() / dim;
    }
    Ok(total / batch_size as f64)
}

/// Mean denoising loss of one batch plus parameter gradients under `mask`.
/// Per-sample gradients are computed independently (in parallel when
/// enabled) and folded sequentially in sample order.
#[allow(clippy::too_many_arguments)]
pub fn loss_batch(
    model: &Denoiser,
    data: &[LabeledSample],
    tax: &Taxonomy,
    sched: &NoiseSchedule,
    policy: &LabelPolicy,
    mask: &[bool],
    batch_size: usize,
    seed: u64,
    iter: u64,
) -> Result<(f64, Gradients)> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let mut acc = Gradients::zeros_like(model.registry());
    let mut total = 0.0;
    let mut start = 0;
    while start < batch_size {
        let chunk = GRAD_CHUNK.min(batch_size - start);
        let parts = crate::par::map_indexed(chunk, |k| -> Result<(f64, Gradients)> {
            let j = (start + k) as u64;
            let d = draw_sample(data, tax, sched, policy, seed, iter, j)?;
            let (out, cache) = model.forward_cached(&d.x_t, d.t, d.label)?;
            let dim = out.len() as f64;
            let loss =
                out.iter().zip(&d.eps).map(|(o, e)| (o - e) * (o - e)).sum::<f64>() / dim;
            let g_out: Vec<f64> =
                out.iter().zip(&d.eps).map(|(o, e)| 2.0 * (o - e) / dim).collect();
            let mut grads = Gradients::zeros_like(model.registry());
            model.backward(&cache, &g_out, mask, &mut grads);
            Ok((loss, grads))
        });
        for part in parts {
            let (loss, grads) = part?;
            total += loss;
            acc.add_scaled(&grads, 1.0);
        }
        start += chunk;
    }
    acc.scale(1.0 / batch_size as f64);
    // Divide rather than multiply by a reciprocal so the value agrees
    // bitwise with eps_mse_batch.
    Ok((total / batch_size as f64, acc))
}

fn check_compat(model: &Denoiser, data: &[LabeledSample], tax: &Taxonomy) -> Result<()> {
    if model.config().n_sub != tax.n_sub() || model.config().n_super != tax.n_super() {
        return Err(Error::invalid(format!(
            "model embeds {}x{} classes but taxonomy has {}x{}",
            model.config().n_super,
            model.config().n_sub,
            tax.n_super(),
            tax.n_sub()
        )));
    }
    for (i, row) in data.iter().enumerate() {
        if row.x0.len() != model.config().dim_in {
            return Err(Error::invalid(format!(
                "sample {i} has dimension {}, model expects {}",
                row.x0.len(),
                model.config().dim_in
            )));
        }
        if row.subclass >= tax.n_sub() {
            return Err(Error::invalid(format!(
                "sample {i} labels subclass {} of {}",
                row.subclass,
                tax.n_sub()
            )));
        }
    }
    Ok(())
}

/// A training outcome together with the state needed to continue it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub report: TrainReport,
    pub state: TrainState,
}

/// Optimize `model` in place, starting from `prior` when given (the prior's
/// report is extended, its optimizer state continued) or from scratch
/// otherwise. Runs up to `cfg.n_iters` total iterations; a prior that has
/// already reached the target passes through unchanged. Aborts with a
/// numeric error if the loss or any gradient stops being finite; the model
/// keeps the last finite parameters.
pub fn train_resumable(
    model: &mut Denoiser,
    data: &[LabeledSample],
    tax: &Taxonomy,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    prior: Option<TrainRun>,
) -> Result<TrainRun> {
    cfg.validate()?;
    check_compat(model, data, tax)?;
    let mask = trainable_mask(model.registry(), cfg.mode);
    let trainable = count_trainable(model.registry(), &mask);

    let (mut state, mut report) = match prior {
        Some(run) => {
            run.state.check_resume(cfg, model.registry(), &mask)?;
            (run.state, run.report)
        }
        None => (
            TrainState::fresh(cfg, model.registry(), &mask),
            TrainReport {
                mode: cfg.mode,
                n_iters: 0,
                batch_size: cfg.batch_size,
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
                history: Vec::new(),
                trainable,
            },
        ),
    };

    let mut opt = AdamW::from_state(cfg.lr, cfg.weight_decay, &state);
    for iter in state.completed_iters..cfg.n_iters {
        let (loss, grads) = loss_batch(
            model,
            data,
            tax,
            sched,
            &cfg.label_policy,
            &mask,
            cfg.batch_size,
            cfg.seed,
            iter as u64,
        )?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss or gradient at iteration {iter}"
            )));
        }
        opt.step(model.registry_mut(), &grads, &mask);
        if iter == 0 {
            report.initial_loss = loss;
        }
        report.final_loss = loss;
        let record_now = iter == 0
            || iter + 1 == cfg.n_iters
            || (cfg.log_every > 0 && (iter + 1) % cfg.log_every == 0);
        if record_now {
            report.history.push(LossPoint { iter: iter + 1, loss });
        }
    }

    report.n_iters = cfg.n_iters;
    state.config = cfg.clone();
    state.completed_iters = cfg.n_iters;
    state.adam_step = opt.step_count();
    state.m = opt.m.clone();
    state.v = opt.v.clone();
    Ok(TrainRun { report, state })
}

/// Optimize `model` in place from scratch.
pub fn train(
    model: &mut Denoiser,
    data: &[LabeledSample],
    tax: &Taxonomy,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_resumable(model, data, tax, sched, cfg, None).map(|run| run.report)
}

/// [`train`], plus the measured wall-clock optimizer steps per second.
/// Timing is returned beside the report rather than inside it so that
/// serialized reports stay deterministic.
pub fn train_timed(
    model: &mut Denoiser,
    data: &[LabeledSample],
    tax: &Taxonomy,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(TrainReport, f64)> {
    let t0 = Instant::now();
    let report = train(model, data, tax, sched, cfg)?;
    let elapsed = t0.elapsed().as_secs_f64().max(1e-9);
    Ok((report, cfg.n_iters as f64 / elapsed))
}

/// Extend a pretrained model to a finer taxonomy and fine-tune it there.
/// `extend_seed` controls the fresh initialization of any embedding table
/// whose row count changed.
pub fn pretrain_finetune(
    pretrained: &Denoiser,
    tax: &Taxonomy,
    data: &[LabeledSample],
    sched: &NoiseSchedule,
    finetune: &TrainConfig,
    extend_seed: u64,
) -> Result<(Denoiser, TrainReport)> {
    let mut model = load_pretrained_then_extend(pretrained, tax, extend_seed)?;
    let report = train(&mut model, data, tax, sched, finetune)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, Param};
    use crate::schedule::ScheduleKind;

    fn tiny_setup() -> (Denoiser, Taxonomy, NoiseSchedule, Vec<LabeledSample>) {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let cfg = DenoiserConfig::for_taxonomy(2, 8, 2, 8, &tax);
        let mut model = Denoiser::init(&cfg, 3).unwrap();
        model.randomize_all(5, 0.3);
        let sched = NoiseSchedule::make(ScheduleKind::Linear, 50, 1e-3, 0.05).unwrap();
        let mix =
            crate::mixture::GaussianMixture::hierarchical(&tax, 2, 7, 5.0, 1.0, 0.5).unwrap();
        let data = mix.sample_per_class(20, 11).unwrap();
        (model, tax, sched, data)
    }

    #[test]
    fn replace_label_extremes() {
        let tax = Taxonomy::uniform(2, 3).unwrap();
        let mut rng = rng_for(1, &[domain::TRAIN_SAMPLE, 0, 0]);
        for _ in 0..50 {
            assert_eq!(
                replace_label(&LabelPolicy::Keep, 4, &tax, &mut rng).unwrap(),
                Label::Subclass(4)
            );
            assert_eq!(
                replace_label(&LabelPolicy::NullDrop { p: 0.0 }, 4, &tax, &mut rng).unwrap(),
                Label::Subclass(4)
            );
            assert_eq!(
                replace_label(&LabelPolicy::NullDrop { p: 1.0 }, 4, &tax, &mut rng).unwrap(),
                Label::Null
            );
            assert_eq!(
                replace_label(&LabelPolicy::SuperReplace { p: 1.0 }, 4, &tax, &mut rng).unwrap(),
                Label::Superclass(1)
            );
        }
        assert!(replace_label(&LabelPolicy::Keep, 6, &tax, &mut rng).is_err());
        assert!(LabelPolicy::NullDrop { p: 1.5 }.validate().is_err());
        assert!(LabelPolicy::SuperReplace { p: -0.1 }.validate().is_err());
        assert!(LabelPolicy::Tiered { p_super: 0.6, p_null: 0.6 }.validate().is_err());
        assert!(LabelPolicy::Tiered { p_super: 0.25, p_null: 0.1 }.validate().is_ok());
    }

    #[test]
    fn tiered_policy_hits_all_three_branches() {
        let tax = Taxonomy::uniform(2, 3).unwrap();
        let policy = LabelPolicy::Tiered { p_super: 0.3, p_null: 0.2 };
        let (mut sup, mut null, mut sub) = (0, 0, 0);
        let n = 20_000;
        for i in 0..n {
            let mut rng = rng_for(4, &[domain::TRAIN_SAMPLE, i, 1]);
            match replace_label(&policy, 2, &tax, &mut rng).unwrap() {
                Label::Superclass(s) => {
                    assert_eq!(s, 0);
                    sup += 1;
                }
                Label::Null => null += 1,
                Label::Subclass(c) => {
                    assert_eq!(c, 2);
                    sub += 1;
                }
            }
        }
        let f = |k: usize| k as f64 / n as f64;
        assert!((f(sup) - 0.3).abs() < 0.02, "super frequency {}", f(sup));
        assert!((f(null) - 0.2).abs() < 0.02, "null frequency {}", f(null));
        assert!((f(sub) - 0.5).abs() < 0.02, "keep frequency {}", f(sub));
    }

    #[test]
    fn replace_label_frequency_tracks_p() {
        let tax = Taxonomy::uniform(2, 3).unwrap();
        let policy = LabelPolicy::SuperReplace { p: 0.3 };
        let mut hits = 0;
        let n = 20_000;
        for i in 0..n {
            let mut rng = rng_for(9, &[domain::TRAIN_SAMPLE, i, 0]);
            if let Label::Superclass(_) = replace_label(&policy, 1, &tax, &mut rng).unwrap() {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.02, "replacement frequency {freq}");
    }

    #[test]
    fn default_policies_per_mode() {
        assert_eq!(
            LabelPolicy::default_for(FinetuneMode::Finediffusion),
            LabelPolicy::SuperReplace { p: 0.1 }
        );
        assert_eq!(
            LabelPolicy::default_for(FinetuneMode::Bitfit),
            LabelPolicy::NullDrop { p: 0.1 }
        );
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        // Single bias parameter, loss (θ − 3)²; gradient 2(θ − 3).
        let mut reg = ParameterRegistry::new();
        reg.add(Param::new("b", ParamTag::Bias, vec![1], vec![0.0]).unwrap()).unwrap();
        let mask = vec![true];
        let mut opt = AdamW::new(&reg, &mask, 0.1, 0.0);
        let mut grads = Gradients::zeros_like(&reg);
        for _ in 0..300 {
            let theta = reg.get(0).values[0];
            grads.per_param[0][0] = 2.0 * (theta - 3.0);
            opt.step(&mut reg, &grads, &mask);
        }
        let theta = reg.get(0).values[0];
        assert!((theta - 3.0).abs() < 0.05, "converged to {theta}");
        assert_eq!(opt.step_count(), 300);
    }

    #[test]
    fn weight_decay_hits_only_weight_tensors() {
        let mut reg = ParameterRegistry::new();
        reg.add(Param::new("w", ParamTag::Weight, vec![1], vec![2.0]).unwrap()).unwrap();
        reg.add(Param::new("b", ParamTag::Bias, vec![1], vec![2.0]).unwrap()).unwrap();
        let mask = vec![true, true];
        let mut opt = AdamW::new(&reg, &mask, 0.5, 0.1);
        let grads = Gradients::zeros_like(&reg);
        // zero gradients: the only update is the decoupled decay term
        opt.step(&mut reg, &grads, &mask);
        assert_eq!(reg.get(0).values[0], 2.0 - 0.5 * 0.1 * 2.0);
        assert_eq!(reg.get(1).values[0], 2.0);
    }

    #[test]
    fn loss_batch_gradient_matches_finite_difference() {
        let (mut model, tax, sched, data) = tiny_setup();
        let policy = LabelPolicy::SuperReplace { p: 0.3 };
        let mask = trainable_mask(model.registry(), FinetuneMode::Full);
        let (loss, grads) = loss_batch(
            &model, &data, &tax, &sched, &policy, &mask, 6, 21, 4,
        )
        .unwrap();
        let value = eps_mse_batch(&model, &data, &tax, &sched, &policy, 6, 21, 4).unwrap();
        assert_eq!(loss, value, "gradient and value paths must share draws");

        let h = 1e-6;
        for name in ["stem.w", "block0.mod.b", "block1.ln.scale", "embed.super", "time.w2"] {
            let idx = model.registry().index_of(name).unwrap();
            let coord = model.registry().get(idx).len() / 2;
            let orig = model.registry().get(idx).values[coord];
            model.registry_mut().get_mut(idx).values[coord] = orig + h;
            let lp = eps_mse_batch(&model, &data, &tax, &sched, &policy, 6, 21, 4).unwrap();
            model.registry_mut().get_mut(idx).values[coord] = orig - h;
            let lm = eps_mse_batch(&model, &data, &tax, &sched, &policy, 6, 21, 4).unwrap();
            model.registry_mut().get_mut(idx).values[coord] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.per_param[idx][coord];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "{name}[{coord}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn batch_loss_is_deterministic_and_seed_sensitive() {
        let (model, tax, sched, data) = tiny_setup();
        let mask = trainable_mask(model.registry(), FinetuneMode::Full);
        let policy = LabelPolicy::NullDrop { p: 0.1 };
        let a = loss_batch(&model, &data, &tax, &sched, &policy, &mask, 32, 1, 0).unwrap();
        let b = loss_batch(&model, &data, &tax, &sched, &policy, &mask, 32, 1, 0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = loss_batch(&model, &data, &tax, &sched, &policy, &mask, 32, 2, 0).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_target() {
        // All-zero data: the ideal prediction is linear in x with a
        // t-dependent gain, well inside the model family.
        let tax = Taxonomy::uniform(1, 1).unwrap();
        let cfg = DenoiserConfig::for_taxonomy(2, 16, 2, 8, &tax);
        let mut model = Denoiser::init(&cfg, 1).unwrap();
        let sched = NoiseSchedule::make(ScheduleKind::Linear, 50, 1e-3, 0.05).unwrap();
        let data = vec![LabeledSample { x0: vec![0.0, 0.0], subclass: 0 }; 8];
        let mut tc = TrainConfig::new(FinetuneMode::Full, 400, 7);
        tc.batch_size = 32;
        tc.lr = 3e-3;
        tc.label_policy = LabelPolicy::Keep;
        tc.log_every = 100;
        let report = train(&mut model, &data, &tax, &sched, &tc).unwrap();
        assert!(
            report.final_loss < 0.5 * report.initial_loss,
            "loss {} -> {}",
            report.initial_loss,
            report.final_loss
        );
        assert!(report.history.len() >= 4);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let (model0, tax, sched, data) = tiny_setup();
        for mode in [FinetuneMode::Bitfit, FinetuneMode::DifffitLike, FinetuneMode::Finediffusion]
        {
            let mut model = model0.clone();
            let before: Vec<Vec<f64>> =
                model.registry().iter().map(|p| p.values.clone()).collect();
            let mut tc = TrainConfig::new(mode, 20, 13);
            tc.batch_size = 8;
            tc.lr = 1e-2;
            train(&mut model, &data, &tax, &sched, &tc).unwrap();
            let mask = trainable_mask(model.registry(), mode);
            let mut moved_any = false;
            for idx in 0..model.registry().len() {
                let after = &model.registry().get(idx).values;
                if mask[idx] {
                    moved_any |= after != &before[idx];
                } else {
                    assert_eq!(
                        after, &before[idx],
                        "frozen {} changed under {:?}",
                        model.registry().get(idx).name, mode
                    );
                }
            }
            assert!(moved_any, "no trainable tensor moved under {mode:?}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (model0, tax, sched, data) = tiny_setup();
        let mut tc = TrainConfig::new(FinetuneMode::Full, 10, 31);
        tc.batch_size = 8;
        let mut a = model0.clone();
        let mut b = model0.clone();
        let ra = train(&mut a, &data, &tax, &sched, &tc).unwrap();
        let rb = train(&mut b, &data, &tax, &sched, &tc).unwrap();
        assert_eq!(ra.final_loss, rb.final_loss);
        for idx in 0..a.registry().len() {
            assert_eq!(a.registry().get(idx).values, b.registry().get(idx).values);
        }
    }

    #[test]
    fn incompatible_inputs_rejected() {
        let (mut model, tax, sched, mut data) = tiny_setup();
        let tc = TrainConfig::new(FinetuneMode::Full, 1, 0);
        assert!(train(&mut model, &[], &tax, &sched, &tc).is_err());
        data[0].x0 = vec![0.0; 3];
        assert!(train(&mut model, &data, &tax, &sched, &tc).is_err());
        let wrong_tax = Taxonomy::uniform(3, 2).unwrap();
        let ok_data = vec![LabeledSample { x0: vec![0.0, 0.0], subclass: 0 }];
        assert!(train(&mut model, &ok_data, &wrong_tax, &sched, &tc).is_err());
        let mut bad_cfg = tc.clone();
        bad_cfg.lr = -1.0;
        assert!(train(&mut model, &ok_data, &tax, &sched, &bad_cfg).is_err());
    }

    #[test]
    fn pretrain_finetune_pipeline_runs() {
        // Coarse stage on superclasses as their own classes, then extend to
        // the fine taxonomy and adapt only the tiered-mode tensors.
        let fine_tax = Taxonomy::uniform(2, 2).unwrap();
        let coarse_tax = fine_tax.coarse();
        let mix =
            crate::mixture::GaussianMixture::hierarchical(&fine_tax, 2, 7, 5.0, 1.0, 0.5).unwrap();
        let coarse_data = mix.coarsened().unwrap().sample_per_class(16, 3).unwrap();
        let fine_data = mix.sample_per_class(16, 4).unwrap();
        let sched = NoiseSchedule::make(ScheduleKind::Linear, 50, 1e-3, 0.05).unwrap();

        let cfg = DenoiserConfig::for_taxonomy(2, 8, 2, 8, &coarse_tax);
        let mut pre = Denoiser::init(&cfg, 5).unwrap();
        let mut pc = TrainConfig::new(FinetuneMode::Full, 15, 1);
        pc.batch_size = 8;
        train(&mut pre, &coarse_data, &coarse_tax, &sched, &pc).unwrap();

        let mut fc = TrainConfig::new(FinetuneMode::Finediffusion, 10, 2);
        fc.batch_size = 8;
        let (tuned, report) =
            pretrain_finetune(&pre, &fine_tax, &fine_data, &sched, &fc, 9).unwrap();
        assert_eq!(tuned.config().n_sub, 4);
        assert_eq!(report.mode, FinetuneMode::Finediffusion);
        // frozen weights carried over from the pretrained model verbatim
        let take = |m: &Denoiser, name: &str| {
            m.registry().get(m.registry().index_of(name).unwrap()).values.clone()
        };
        assert_eq!(take(&pre, "stem.w"), take(&tuned, "stem.w"));
        assert_eq!(take(&pre, "block0.mlp.w"), take(&tuned, "block0.mlp.w"));
    }
}
