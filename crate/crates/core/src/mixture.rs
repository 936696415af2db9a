//! Hierarchical Gaussian mixtures with exact densities and scores.
//!
//! Each subclass owns a mixture of Gaussians; a superclass is the uniform
//! mixture of its children and the marginal is the uniform mixture over all
//! subclasses. The family is closed under the forward noising map
//! `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`, which pushes `N(μ, Σ)` to
//! `N(√ᾱ_t·μ, ᾱ_t·Σ + (1−ᾱ_t)·I)` — so the noised density, its score, and
//! the ideal noise prediction are all available in closed form at every step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, rng_for};
use crate::schedule::NoiseSchedule;
use crate::taxonomy::Taxonomy;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// A data point with its subclass label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x0: Vec<f64>,
    pub subclass: usize,
}

/// Which conditional distribution to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Subclass(usize),
    Superclass(usize),
    Marginal,
}

/// One Gaussian component with cached Cholesky factor and log-normalizer.
#[derive(Debug, Clone)]
pub struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::invalid("covariance shape does not match mean dimension"));
        }
        let max_asym = (&cov - cov.transpose()).abs().max();
        if max_asym > 1e-9 {
            return Err(Error::invalid(format!(
                "covariance is not symmetric (max asymmetry {max_asym:.3e})"
            )));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
        let chol_l = chol.l();
        let log_det: f64 = chol_l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (dim as f64 * LN_2PI + log_det);
        Ok(Self { weight, mean, cov, chol, chol_l, log_norm })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let w = self.chol.solve(&d);
        self.log_norm - 0.5 * d.dot(&w)
    }

    /// `Σ⁻¹ (μ − x)`, the gradient of this component's log-density.
    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = &self.mean - x;
        self.chol.solve(&d)
    }

    fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol_l * z
    }
}

/// Per-subclass Gaussian mixtures plus the taxonomy that scopes them.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    tax: Taxonomy,
    per_subclass: Vec<Vec<Component>>,
}

impl GaussianMixture {
    /// Validate and build from raw `(weight, mean, cov)` triples, one list
    /// per subclass. Weights within a subclass must sum to 1 (±1e-12) and
    /// every covariance must be symmetric positive definite.
    pub fn from_components(
        tax: Taxonomy,
        components: Vec<Vec<(f64, DVector<f64>, DMatrix<f64>)>>,
    ) -> Result<Self> {
        if components.len() != tax.n_sub() {
            return Err(Error::invalid(format!(
                "expected one component list per subclass ({}), got {}",
                tax.n_sub(),
                components.len()
            )));
        }
        let dim = components
            .first()
            .and_then(|c| c.first())
            .map(|(_, m, _)| m.len())
            .ok_or_else(|| Error::invalid("every subclass needs at least one component"))?;
        let mut per_subclass = Vec::with_capacity(components.len());
        for (sub, comps) in components.into_iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::invalid(format!("subclass {sub} has no components")));
            }
            let total: f64 = comps.iter().map(|(w, _, _)| w).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "subclass {sub} weights sum to {total}, expected 1"
                )));
            }
            let mut built = Vec::with_capacity(comps.len());
            for (w, mean, cov) in comps {
                if mean.len() != dim {
                    return Err(Error::invalid("inconsistent component dimensions"));
                }
                if !(w > 0.0) {
                    return Err(Error::invalid("component weights must be positive"));
                }
                built.push(Component::new(w, mean, cov)?);
            }
            per_subclass.push(built);
        }
        Ok(Self { dim, tax, per_subclass })
    }

    /// One isotropic Gaussian per subclass, laid out hierarchically:
    /// superclass centers sit on a circle (dim 2) or a random sphere
    /// (dim > 2) of radius `superclass_spread`, each subclass mean is its
    /// parent's center plus a random offset of norm `subclass_spread`, and
    /// every covariance is `noise_scale²·I`.
    pub fn hierarchical(
        tax: &Taxonomy,
        dim: usize,
        seed: u64,
        superclass_spread: f64,
        subclass_spread: f64,
        noise_scale: f64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("hierarchical layout needs dim >= 2"));
        }
        if !(superclass_spread > subclass_spread && subclass_spread > 0.0) {
            return Err(Error::invalid(
                "need superclass_spread > subclass_spread > 0",
            ));
        }
        if !(noise_scale > 0.0) {
            return Err(Error::invalid("noise_scale must be positive"));
        }
        let centers: Vec<DVector<f64>> = (0..tax.n_super())
            .map(|s| {
                if dim == 2 {
                    let angle = 2.0 * std::f64::consts::PI * s as f64 / tax.n_super() as f64;
                    DVector::from_vec(vec![
                        superclass_spread * angle.cos(),
                        superclass_spread * angle.sin(),
                    ])
                } else {
                    let mut rng = rng_for(seed, &[domain::MIXTURE_LAYOUT, 0, s as u64]);
                    random_unit(dim, &mut rng) * superclass_spread
                }
            })
            .collect();
        let cov = DMatrix::identity(dim, dim) * (noise_scale * noise_scale);
        let components = (0..tax.n_sub())
            .map(|sub| {
                let mut rng = rng_for(seed, &[domain::MIXTURE_LAYOUT, 1, sub as u64]);
                let offset = random_unit(dim, &mut rng) * subclass_spread;
                let mean = &centers[tax.parent(sub).expect("validated")] + offset;
                vec![(1.0, mean, cov.clone())]
            })
            .collect();
        Self::from_components(tax.clone(), components)
    }

    /// The same data seen at superclass granularity: for the coarse taxonomy
    /// each class is the uniform mixture of the original children. Used to
    /// build pretraining data.
    pub fn coarsened(&self) -> Result<GaussianMixture> {
        let coarse = self.tax.coarse();
        let components = (0..self.tax.n_super())
            .map(|s| {
                let children = self.tax.children(s).expect("validated");
                let k = children.len() as f64;
                children
                    .iter()
                    .flat_map(|&c| {
                        self.per_subclass[c]
                            .iter()
                            .map(move |comp| (comp.weight / k, comp.mean.clone(), comp.cov.clone()))
                    })
                    .collect()
            })
            .collect();
        GaussianMixture::from_components(coarse, components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.tax
    }

    pub fn components(&self, subclass: usize) -> Result<&[Component]> {
        self.per_subclass
            .get(subclass)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("subclass {subclass} out of range")))
    }

    /// Components under `scope` together with their mixture log-weights.
    fn scoped(&self, scope: Scope) -> Result<Vec<(f64, &Component)>> {
        let mut out = Vec::new();
        match scope {
            Scope::Subclass(id) => {
                for c in self.components(id)? {
                    out.push((c.weight.ln(), c));
                }
            }
            Scope::Superclass(id) => {
                let children = self.tax.children(id)?;
                let log_k = (children.len() as f64).ln();
                for sub in children {
                    for c in &self.per_subclass[sub] {
                        out.push((c.weight.ln() - log_k, c));
                    }
                }
            }
            Scope::Marginal => {
                let log_n = (self.tax.n_sub() as f64).ln();
                for comps in &self.per_subclass {
                    for c in comps {
                        out.push((c.weight.ln() - log_n, c));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact log-density of `x` under the scoped mixture.
    pub fn log_density(&self, scope: Scope, x: &[f64]) -> Result<f64> {
        let x = self.check_point(x)?;
        let comps = self.scoped(scope)?;
        let logs: Vec<f64> = comps
            .iter()
            .map(|(lw, c)| lw + c.log_density(&x))
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// Exact score `∇ log p(x)` of the scoped mixture.
    pub fn score(&self, scope: Scope, x: &[f64]) -> Result<Vec<f64>> {
        let xv = self.check_point(x)?;
        let comps = self.scoped(scope)?;
        let logs: Vec<f64> = comps
            .iter()
            .map(|(lw, c)| lw + c.log_density(&xv))
            .collect();
        let lse = log_sum_exp(&logs);
        let mut grad = DVector::zeros(self.dim);
        for ((_, c), &lg) in comps.iter().zip(&logs) {
            let r = (lg - lse).exp();
            if r > 0.0 {
                grad += c.grad_log_density(&xv) * r;
            }
        }
        Ok(grad.data.into())
    }

    /// Push the mixture through the forward noising map at step `t`:
    /// every `N(μ, Σ)` becomes `N(√ᾱ_t·μ, ᾱ_t·Σ + (1−ᾱ_t)·I)`.
    pub fn noised(&self, schedule: &NoiseSchedule, t: usize) -> Result<GaussianMixture> {
        let ab = schedule.alpha_bar(t)?;
        let sqrt_ab = ab.sqrt();
        let eye = DMatrix::identity(self.dim, self.dim);
        let components = self
            .per_subclass
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|c| {
                        (
                            c.weight,
                            &c.mean * sqrt_ab,
                            &c.cov * ab + &eye * (1.0 - ab),
                        )
                    })
                    .collect()
            })
            .collect();
        GaussianMixture::from_components(self.tax.clone(), components)
    }

    /// Ideal noise prediction `ε*(x, t) = −√(1−ᾱ_t)·∇ log p_t(x)` where
    /// `p_t` is the noised scoped mixture at step `t`.
    pub fn analytic_eps(
        &self,
        scope: Scope,
        x: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        let ab = schedule.alpha_bar(t)?;
        let rem = 1.0 - ab;
        if rem == 0.0 {
            return Err(Error::numeric(
                "noise prediction undefined at alpha_bar = 1 (zero noise)",
            ));
        }
        let noised = self.noised(schedule, t)?;
        let score = noised.score(scope, x)?;
        let scale = rem.sqrt();
        Ok(score.iter().map(|g| -scale * g).collect())
    }

    /// Draw exactly `n_per_subclass` samples from every subclass.
    /// Samples are ordered subclass-major and are a pure function of `seed`.
    pub fn sample_per_class(&self, n_per_subclass: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        if n_per_subclass == 0 {
            return Err(Error::invalid("n_per_subclass must be >= 1"));
        }
        let n_sub = self.tax.n_sub();
        let rows = crate::par::map_indexed(n_sub * n_per_subclass, |i| {
            let sub = i / n_per_subclass;
            let j = i % n_per_subclass;
            let mut rng = rng_for(seed, &[domain::DATASET, sub as u64, j as u64]);
            let comps = &self.per_subclass[sub];
            let idx = pick_component(comps, rng.random::<f64>());
            let x = comps[idx].sample(&mut rng);
            LabeledSample { x0: x.data.into(), subclass: sub }
        });
        Ok(rows)
    }

    fn check_point(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(DVector::from_column_slice(x))
    }
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn pick_component(comps: &[Component], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, c) in comps.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    comps.len() - 1
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}
