//! Per-class and pooled metric summaries for a batch of generated samples.
//!
//! The report compares generated samples against a labeled reference set,
//! subclass by subclass and pooled. When the true generating mixture is
//! known (analytic runs), the mean log-density of the generated points under
//! the matching subclass conditional is included as well; for image data or
//! external references it is omitted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{GaussianMixture, LabeledSample, Scope};
use crate::rng::{domain, subseed};
use crate::taxonomy::Taxonomy;

use super::metrics::{diversity, frechet_gauss, sliced_w2};

/// Metrics for one subclass conditional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub subclass: usize,
    /// Number of generated samples carrying this label.
    pub n: usize,
    pub frechet: f64,
    pub sliced_w2: f64,
    pub diversity: f64,
    pub mean_log_density: Option<f64>,
}

/// Metrics over the pooled sample set, all labels together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub n: usize,
    pub frechet: f64,
    /// Diagonal jitter the Fréchet computation added for stability.
    pub frechet_jitter: f64,
    pub sliced_w2: f64,
    pub diversity: f64,
    pub mean_log_density: Option<f64>,
}

/// Full evaluation of one generated batch against a reference batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
}

fn split_by_class(samples: &[LabeledSample], n_sub: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_sub];
    for s in samples {
        let group = groups.get_mut(s.subclass).ok_or_else(|| {
            Error::invalid(format!(
                "sample labeled with subclass {} but taxonomy has {n_sub}",
                s.subclass
            ))
        })?;
        group.push(s.x0.clone());
    }
    Ok(groups)
}

/// Mean log-density of `points` under the subclass conditional (or the
/// marginal, for the pooled row).
fn mean_log_density(mix: &GaussianMixture, scope: Scope, points: &[Vec<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    for p in points {
        acc += mix.log_density(scope, p)?;
    }
    Ok(acc / points.len() as f64)
}

/// Compare generated samples to a reference set, per subclass and pooled.
///
/// Projection directions for the sliced distance are derived from `seed`, with
/// a distinct stream per subclass, so two reports over the same data agree
/// exactly. Every subclass must appear at least twice in both batches; the
/// covariance-based metrics are undefined below that.
pub fn metric_report(
    generated: &[LabeledSample],
    reference: &[LabeledSample],
    tax: &Taxonomy,
    truth: Option<&GaussianMixture>,
    n_proj: usize,
    seed: u64,
) -> Result<MetricReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("metric report needs non-empty generated and reference sets"));
    }
    let n_sub = tax.n_sub();
    let gen_groups = split_by_class(generated, n_sub)?;
    let ref_groups = split_by_class(reference, n_sub)?;

    let mut per_class = Vec::with_capacity(n_sub);
    for sub in 0..n_sub {
        let g = &gen_groups[sub];
        let r = &ref_groups[sub];
        if g.len() < 2 || r.len() < 2 {
            return Err(Error::invalid(format!(
                "subclass {sub} has {} generated and {} reference samples; need at least 2 of each",
                g.len(),
                r.len()
            )));
        }
        let fr = frechet_gauss(g, r)?;
        let sw2 = sliced_w2(g, r, n_proj, subseed(seed, &[domain::METRIC_PROJ, sub as u64]))?;
        let div = diversity(g)?;
        let mld = match truth {
            Some(mix) => Some(mean_log_density(mix, Scope::Subclass(sub), g)?),
            None => None,
        };
        per_class.push(ClassMetrics {
            subclass: sub,
            n: g.len(),
            frechet: fr.dist2,
            sliced_w2: sw2,
            diversity: div,
            mean_log_density: mld,
        });
    }

    let gen_all: Vec<Vec<f64>> = generated.iter().map(|s| s.x0.clone()).collect();
    let ref_all: Vec<Vec<f64>> = reference.iter().map(|s| s.x0.clone()).collect();
    let fr = frechet_gauss(&gen_all, &ref_all)?;
    let sw2 = sliced_w2(&gen_all, &ref_all, n_proj, subseed(seed, &[domain::METRIC_PROJ]))?;
    let div = diversity(&gen_all)?;
    let mld = match truth {
        Some(mix) => Some(mean_log_density(mix, Scope::Marginal, &gen_all)?),
        None => None,
    };
    let overall = OverallMetrics {
        n: gen_all.len(),
        frechet: fr.dist2,
        frechet_jitter: fr.jitter,
        sliced_w2: sw2,
        diversity: div,
        mean_log_density: mld,
    };

    Ok(MetricReport { per_class, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Taxonomy;

    fn small_mixture(seed: u64) -> GaussianMixture {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        GaussianMixture::hierarchical(&tax, 2, seed, 6.0, 1.5, 0.4).unwrap()
    }

    #[test]
    fn self_comparison_is_near_zero() {
        let mix = small_mixture(11);
        let data = mix.sample_per_class(64, 5).unwrap();
        let report =
            metric_report(&data, &data, mix.taxonomy(), Some(&mix), 16, 7).unwrap();
        assert_eq!(report.per_class.len(), 4);
        for c in &report.per_class {
            assert_eq!(c.n, 64);
            assert!(c.frechet.abs() < 1e-6, "class frechet {}", c.frechet);
            assert!(c.sliced_w2.abs() < 1e-9, "class sw2 {}", c.sliced_w2);
            assert!(c.diversity > 0.0);
            assert!(c.mean_log_density.unwrap().is_finite());
        }
        assert!(report.overall.frechet.abs() < 1e-6);
        assert!(report.overall.sliced_w2.abs() < 1e-9);
        assert_eq!(report.overall.n, 4 * 64);
    }

    #[test]
    fn disjoint_batches_score_worse_than_matched_ones() {
        let mix = small_mixture(11);
        let reference = mix.sample_per_class(96, 1).unwrap();
        let matched = mix.sample_per_class(96, 2).unwrap();
        // Mislabel: every sample keeps its point but claims the next subclass.
        let shifted: Vec<LabeledSample> = matched
            .iter()
            .map(|s| LabeledSample { x0: s.x0.clone(), subclass: (s.subclass + 1) % 4 })
            .collect();
        let good =
            metric_report(&matched, &reference, mix.taxonomy(), Some(&mix), 32, 7).unwrap();
        let bad =
            metric_report(&shifted, &reference, mix.taxonomy(), Some(&mix), 32, 7).unwrap();
        let mean_fr = |r: &MetricReport| {
            r.per_class.iter().map(|c| c.frechet).sum::<f64>() / r.per_class.len() as f64
        };
        assert!(mean_fr(&bad) > 4.0 * mean_fr(&good));
        let mean_mld = |r: &MetricReport| {
            r.per_class.iter().map(|c| c.mean_log_density.unwrap()).sum::<f64>()
                / r.per_class.len() as f64
        };
        assert!(mean_mld(&bad) < mean_mld(&good));
        // Pooled rows agree up to stochastic noise: same points, labels ignored.
        assert!((good.overall.frechet - bad.overall.frechet).abs() < 1e-9);
    }

    #[test]
    fn report_is_reproducible() {
        let mix = small_mixture(3);
        let a = mix.sample_per_class(32, 1).unwrap();
        let b = mix.sample_per_class(32, 2).unwrap();
        let r1 = metric_report(&a, &b, mix.taxonomy(), None, 16, 9).unwrap();
        let r2 = metric_report(&a, &b, mix.taxonomy(), None, 16, 9).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.per_class[0].mean_log_density.is_none());
        assert!(r1.overall.mean_log_density.is_none());
    }

    #[test]
    fn missing_class_is_rejected() {
        let mix = small_mixture(3);
        let full = mix.sample_per_class(8, 1).unwrap();
        let partial: Vec<LabeledSample> =
            full.iter().filter(|s| s.subclass != 2).cloned().collect();
        let err = metric_report(&partial, &full, mix.taxonomy(), None, 8, 1);
        assert!(err.is_err());
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mix = small_mixture(3);
        let mut data = mix.sample_per_class(8, 1).unwrap();
        data[0].subclass = 99;
        assert!(metric_report(&data, &data, mix.taxonomy(), None, 8, 1).is_err());
    }
}
