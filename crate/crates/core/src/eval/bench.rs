//! End-to-end comparison of fine-tuning modes.
//!
//! For each seed: lay out a fresh hierarchical mixture, pretrain one model
//! on the coarse taxonomy (superclasses as their own classes), then extend
//! and fine-tune it once per mode on the fine taxonomy. Every mode is
//! evaluated by sampling with its matching guidance (the tiered mode uses
//! fine-grained guidance, the baselines standard classifier-free guidance)
//! and comparing against a held-out reference set from the true mixture.
//! The pretrained model, the extension seed, the initial sampling noise,
//! and the metric projections are shared across modes so comparisons are
//! paired within a seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::geometry::embedding_geometry;
use crate::eval::metrics::{diversity, frechet_gauss, sliced_w2};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::mixture::GaussianMixture;
use crate::model::{Denoiser, DenoiserConfig, FinetuneMode};
use crate::rng::{domain, subseed};
use crate::sampler::{sample_loop, Label};
use crate::schedule::{NoiseSchedule, SamplingSchedule, ScheduleKind};
use crate::taxonomy::Taxonomy;
use crate::train::{pretrain_finetune, train, train_timed, LabelPolicy, TrainConfig};

/// Full parameterization of the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSetup {
    pub seeds: Vec<u64>,
    pub n_super: usize,
    pub subs_per_super: usize,
    pub dim: usize,
    pub superclass_spread: f64,
    pub subclass_spread: f64,
    pub noise_scale: f64,
    pub width: usize,
    pub depth: usize,
    pub d_cond: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub omega: f64,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub reference_per_class: usize,
    pub sw2_projections: usize,
    pub modes: Vec<FinetuneMode>,
}

impl Default for BenchSetup {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            n_super: 11,
            subs_per_super: 4,
            dim: 2,
            superclass_spread: 8.0,
            subclass_spread: 1.0,
            noise_scale: 0.5,
            width: 128,
            depth: 3,
            d_cond: 32,
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 250,
            omega: 4.0,
            pretrain_iters: 4000,
            finetune_iters: 3000,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-4,
            batch_size: 128,
            train_per_class: 256,
            eval_per_class: 200,
            reference_per_class: 1000,
            sw2_projections: 64,
            modes: FinetuneMode::ALL.to_vec(),
        }
    }
}

impl BenchSetup {
    /// A drastically reduced configuration for tests: same structure,
    /// seconds instead of minutes.
    pub fn smoke() -> Self {
        Self {
            seeds: vec![1],
            n_super: 2,
            subs_per_super: 2,
            dim: 2,
            superclass_spread: 6.0,
            subclass_spread: 1.0,
            noise_scale: 0.5,
            width: 16,
            depth: 2,
            d_cond: 8,
            t_steps: 60,
            beta_start: 1e-3,
            beta_end: 0.05,
            sample_steps: 15,
            omega: 3.0,
            pretrain_iters: 40,
            finetune_iters: 30,
            pretrain_lr: 3e-3,
            finetune_lr: 1e-3,
            batch_size: 16,
            train_per_class: 32,
            eval_per_class: 20,
            reference_per_class: 40,
            sw2_projections: 16,
            modes: FinetuneMode::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("need at least one seed"));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("need at least one mode"));
        }
        for (name, v) in [
            ("eval_per_class", self.eval_per_class),
            ("reference_per_class", self.reference_per_class),
            ("train_per_class", self.train_per_class),
            ("sample_steps", self.sample_steps),
            ("sw2_projections", self.sw2_projections),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.reference_per_class < 2 || self.eval_per_class < 2 {
            return Err(Error::invalid("per-class sample counts must be >= 2"));
        }
        Ok(())
    }

    fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::uniform(self.n_super, self.subs_per_super)
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::make(ScheduleKind::Linear, self.t_steps, self.beta_start, self.beta_end)
    }

    fn guidance_for(&self, mode: FinetuneMode) -> GuidanceConfig {
        let gmode = match mode {
            FinetuneMode::Finediffusion => GuidanceMode::FineGrained,
            _ => GuidanceMode::Cfg,
        };
        GuidanceConfig { mode: gmode, omega: self.omega }
    }
}

/// One mode under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: FinetuneMode,
    pub seed: u64,
    /// Fréchet distance (squared form) between all generated samples and
    /// the pooled reference set.
    pub overall_frechet: f64,
    pub frechet_jitter: f64,
    /// Mean over subclasses of the per-class sliced W2 distance.
    pub mean_class_sw2: f64,
    pub diversity: f64,
    pub trainable_fraction: f64,
    pub final_loss: f64,
    /// Wall-clock fine-tuning speed; informational, not deterministic.
    pub train_steps_per_sec: f64,
    pub separation_ratio: f64,
    pub super_nearest_own: bool,
}

/// All rows plus the setup that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub setup: BenchSetup,
    pub rows: Vec<BenchRow>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl BenchReport {
    pub fn rows_for(&self, mode: FinetuneMode) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    /// Median over seeds of the pooled Fréchet distance.
    pub fn median_overall_frechet(&self, mode: FinetuneMode) -> Option<f64> {
        let xs: Vec<f64> = self.rows_for(mode).map(|r| r.overall_frechet).collect();
        if xs.is_empty() {
            None
        } else {
            Some(median(xs))
        }
    }

    /// Seeds where `a` beats `b` on the pooled Fréchet distance, paired by
    /// seed. Returns `(wins, comparable_seeds)`.
    pub fn seed_wins(&self, a: FinetuneMode, b: FinetuneMode) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for ra in self.rows_for(a) {
            if let Some(rb) = self.rows_for(b).find(|r| r.seed == ra.seed) {
                total += 1;
                if ra.overall_frechet < rb.overall_frechet {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }
}

/// Train and evaluate every mode on every seed.
pub fn benchmark_modes(setup: &BenchSetup) -> Result<BenchReport> {
    setup.validate()?;
    let tax = setup.taxonomy()?;
    let coarse_tax = tax.coarse();
    let sched = setup.schedule()?;
    let steps = SamplingSchedule::respaced(&sched, setup.sample_steps)?;
    let mut rows = Vec::new();

    for &seed in &setup.seeds {
        let mix = GaussianMixture::hierarchical(
            &tax,
            setup.dim,
            seed,
            setup.superclass_spread,
            setup.subclass_spread,
            setup.noise_scale,
        )?;
        let fine_data =
            mix.sample_per_class(setup.train_per_class, subseed(seed, &[domain::DATASET, 1]))?;
        let coarse_data = mix.coarsened()?.sample_per_class(
            setup.train_per_class * setup.subs_per_super,
            subseed(seed, &[domain::DATASET, 0]),
        )?;
        let reference = mix.sample_per_class(
            setup.reference_per_class,
            subseed(seed, &[domain::EVAL_REFERENCE]),
        )?;
        let reference_x: Vec<Vec<f64>> = reference.iter().map(|s| s.x0.clone()).collect();

        // one pretraining run, shared by every mode under this seed
        let cfg = DenoiserConfig::for_taxonomy(
            setup.dim,
            setup.width,
            setup.depth,
            setup.d_cond,
            &coarse_tax,
        );
        let mut pretrained = Denoiser::init(&cfg, seed)?;
        let mut pc = TrainConfig::new(FinetuneMode::Full, setup.pretrain_iters, seed);
        pc.batch_size = setup.batch_size;
        pc.lr = setup.pretrain_lr;
        pc.label_policy = LabelPolicy::Tiered { p_super: 0.25, p_null: 0.1 };
        pc.seed = subseed(seed, &[domain::TRAIN_BATCH, 0]);
        train(&mut pretrained, &coarse_data, &coarse_tax, &sched, &pc)?;

        for (mi, &mode) in setup.modes.iter().enumerate() {
            let mut fc = TrainConfig::new(mode, setup.finetune_iters, seed);
            fc.batch_size = setup.batch_size;
            fc.lr = setup.finetune_lr;
            fc.label_policy = LabelPolicy::default_for(mode);
            fc.seed = subseed(seed, &[domain::TRAIN_BATCH, 1 + mi as u64]);
            let t0 = std::time::Instant::now();
            let (model, report) =
                pretrain_finetune(&pretrained, &tax, &fine_data, &sched, &fc, seed)?;
            let fin_rate = setup.finetune_iters as f64 / t0.elapsed().as_secs_f64().max(1e-9);

            let labels: Vec<Label> = (0..tax.n_sub())
                .flat_map(|sub| std::iter::repeat_n(Label::Subclass(sub), setup.eval_per_class))
                .collect();
            let guidance = setup.guidance_for(mode);
            let samples = sample_loop(
                &model,
                &tax,
                &steps,
                &labels,
                &guidance,
                subseed(seed, &[domain::SAMPLER]),
            )?;

            let overall = frechet_gauss(&samples, &reference_x)?;
            let mut sw2_sum = 0.0;
            for sub in 0..tax.n_sub() {
                let gen = &samples[sub * setup.eval_per_class..(sub + 1) * setup.eval_per_class];
                let refc = &reference_x
                    [sub * setup.reference_per_class..(sub + 1) * setup.reference_per_class];
                sw2_sum += sliced_w2(
                    gen,
                    refc,
                    setup.sw2_projections,
                    subseed(seed, &[domain::METRIC_PROJ, sub as u64]),
                )?;
            }
            let geometry = embedding_geometry(&model.embedder(), &tax)?;
            rows.push(BenchRow {
                mode,
                seed,
                overall_frechet: overall.dist2,
                frechet_jitter: overall.jitter,
                mean_class_sw2: sw2_sum / tax.n_sub() as f64,
                diversity: diversity(&samples)?,
                trainable_fraction: report.trainable.fraction(),
                final_loss: report.final_loss,
                train_steps_per_sec: fin_rate,
                separation_ratio: geometry.separation_ratio,
                super_nearest_own: geometry.super_nearest_own,
            });
        }
    }
    Ok(BenchReport { setup: setup.clone(), rows })
}

/// Time optimizer steps per second for each mode on an identical model and
/// workload. Wall-clock based; use enough iterations to smooth scheduler
/// noise.
pub fn throughput_probe(setup: &BenchSetup, iters: usize) -> Result<Vec<(FinetuneMode, f64)>> {
    setup.validate()?;
    if iters == 0 {
        return Err(Error::invalid("need at least one iteration"));
    }
    let tax = setup.taxonomy()?;
    let sched = setup.schedule()?;
    let mix = GaussianMixture::hierarchical(
        &tax,
        setup.dim,
        1,
        setup.superclass_spread,
        setup.subclass_spread,
        setup.noise_scale,
    )?;
    let data = mix.sample_per_class(setup.train_per_class, 1)?;
    let cfg = DenoiserConfig::for_taxonomy(setup.dim, setup.width, setup.depth, setup.d_cond, &tax);
    let mut base = Denoiser::init(&cfg, 1)?;
    base.randomize_all(2, 0.1);
    let mut out = Vec::new();
    for &mode in &setup.modes {
        // warm up caches and the allocator outside the timed run
        let mut warm = base.clone();
        let mut wc = TrainConfig::new(mode, (iters / 10).max(2), 3);
        wc.batch_size = setup.batch_size;
        train(&mut warm, &data, &tax, &sched, &wc)?;

        let mut model = base.clone();
        let mut tc = TrainConfig::new(mode, iters, 3);
        tc.batch_size = setup.batch_size;
        let (_, rate) = train_timed(&mut model, &data, &tax, &sched, &tc)?;
        out.push((mode, rate));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_benchmark_produces_full_grid() {
        let setup = BenchSetup::smoke();
        let report = benchmark_modes(&setup).unwrap();
        assert_eq!(report.rows.len(), setup.modes.len() * setup.seeds.len());
        for row in &report.rows {
            assert!(row.overall_frechet.is_finite() && row.overall_frechet >= 0.0);
            assert!(row.mean_class_sw2.is_finite() && row.mean_class_sw2 >= 0.0);
            assert!(row.diversity > 0.0);
            assert!(row.trainable_fraction > 0.0 && row.trainable_fraction <= 1.0);
            assert!(row.final_loss.is_finite());
        }
        // full mode trains everything; the others are parameter-efficient
        let full = report.rows_for(FinetuneMode::Full).next().unwrap();
        assert_eq!(full.trainable_fraction, 1.0);
        let fine = report.rows_for(FinetuneMode::Finediffusion).next().unwrap();
        assert!(fine.trainable_fraction < 0.5);
        assert!(
            report.median_overall_frechet(FinetuneMode::Full).is_some()
                && report.median_overall_frechet(FinetuneMode::Bitfit).is_some()
        );
        let (_, total) = report.seed_wins(FinetuneMode::Finediffusion, FinetuneMode::Bitfit);
        assert_eq!(total, setup.seeds.len());
    }

    #[test]
    fn smoke_benchmark_metrics_are_reproducible() {
        let mut setup = BenchSetup::smoke();
        setup.modes = vec![FinetuneMode::Finediffusion];
        let a = benchmark_modes(&setup).unwrap();
        let b = benchmark_modes(&setup).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            // wall-clock speed is the one legitimately varying field
            assert_eq!(ra.overall_frechet, rb.overall_frechet);
            assert_eq!(ra.mean_class_sw2, rb.mean_class_sw2);
            assert_eq!(ra.diversity, rb.diversity);
            assert_eq!(ra.final_loss, rb.final_loss);
            assert_eq!(ra.separation_ratio, rb.separation_ratio);
        }
    }

    #[test]
    fn invalid_setups_rejected() {
        let mut s = BenchSetup::smoke();
        s.seeds.clear();
        assert!(benchmark_modes(&s).is_err());
        let mut s = BenchSetup::smoke();
        s.modes.clear();
        assert!(benchmark_modes(&s).is_err());
        let mut s = BenchSetup::smoke();
        s.eval_per_class = 1;
        assert!(benchmark_modes(&s).is_err());
        assert!(throughput_probe(&BenchSetup::smoke(), 0).is_err());
    }

    #[test]
    fn median_helper() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn throughput_probe_reports_positive_rates() {
        let mut setup = BenchSetup::smoke();
        setup.modes = vec![FinetuneMode::Full, FinetuneMode::Finediffusion];
        let rates = throughput_probe(&setup, 10).unwrap();
        assert_eq!(rates.len(), 2);
        for (_, rate) in rates {
            assert!(rate > 0.0);
        }
    }
}
