//! Geometry of the learned label-embedding tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TieredEmbedder;
use crate::taxonomy::Taxonomy;

/// How well the embedding space mirrors the taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingGeometry {
    /// Mean distance between sibling subclass rows.
    pub mean_intra: f64,
    /// Mean distance between subclass rows with different parents.
    pub mean_inter: f64,
    /// `mean_inter / mean_intra`; 1 when both are zero (degenerate tables),
    /// infinite when siblings coincide but superclasses differ.
    pub separation_ratio: f64,
    /// Superclasses whose embedding row is strictly nearest to the centroid
    /// of its own children's rows.
    pub n_super_correct: usize,
    pub n_super: usize,
    /// True when every superclass row passes the nearest-centroid check.
    pub super_nearest_own: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Measure intra- versus inter-superclass spread of the subclass rows and
/// check each superclass row against its children's centroid.
pub fn embedding_geometry(emb: &TieredEmbedder<'_>, tax: &Taxonomy) -> Result<EmbeddingGeometry> {
    if emb.n_sub() != tax.n_sub() || emb.n_super() != tax.n_super() {
        return Err(Error::invalid(format!(
            "embedder holds {}x{} rows but taxonomy has {}x{} classes",
            emb.n_super(),
            emb.n_sub(),
            tax.n_super(),
            tax.n_sub()
        )));
    }
    let n_sub = tax.n_sub();
    let mut intra_sum = 0.0;
    let mut intra_n = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_n = 0usize;
    for a in 0..n_sub {
        for b in (a + 1)..n_sub {
            let d = dist(emb.sub_row(a)?, emb.sub_row(b)?);
            if tax.parent(a)? == tax.parent(b)? {
                intra_sum += d;
                intra_n += 1;
            } else {
                inter_sum += d;
                inter_n += 1;
            }
        }
    }
    let mean_intra = if intra_n > 0 { intra_sum / intra_n as f64 } else { 0.0 };
    let mean_inter = if inter_n > 0 { inter_sum / inter_n as f64 } else { 0.0 };
    let separation_ratio = if mean_intra == 0.0 && mean_inter == 0.0 {
        1.0
    } else if mean_intra == 0.0 {
        f64::INFINITY
    } else {
        mean_inter / mean_intra
    };

    // children centroids per superclass
    let dim = emb.dim();
    let mut centroids = vec![vec![0.0; dim]; tax.n_super()];
    for (s, centroid) in centroids.iter_mut().enumerate() {
        let children = tax.children(s)?;
        for &c in &children {
            for (acc, v) in centroid.iter_mut().zip(emb.sub_row(c)?) {
                *acc += v;
            }
        }
        let k = children.len() as f64;
        centroid.iter_mut().for_each(|v| *v /= k);
    }
    let mut n_super_correct = 0;
    for s in 0..tax.n_super() {
        let row = emb.super_row(s)?;
        let own = dist(row, &centroids[s]);
        let strictly_nearest = (0..tax.n_super())
            .filter(|&o| o != s)
            .all(|o| dist(row, &centroids[o]) > own);
        if strictly_nearest {
            n_super_correct += 1;
        }
    }
    Ok(EmbeddingGeometry {
        mean_intra,
        mean_inter,
        separation_ratio,
        n_super_correct,
        n_super: tax.n_super(),
        super_nearest_own: n_super_correct == tax.n_super(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Param, ParamTag, ParameterRegistry};
    use approx::assert_relative_eq;

    fn registry_with(sub: Vec<Vec<f64>>, sup: Vec<Vec<f64>>, d: usize) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        let n_sub = sub.len();
        let n_super = sup.len();
        reg.add(
            Param::new(
                "embed.sub",
                ParamTag::EmbeddingSub,
                vec![n_sub, d],
                sub.into_iter().flatten().collect(),
            )
            .unwrap(),
        )
        .unwrap();
        reg.add(
            Param::new(
                "embed.super",
                ParamTag::EmbeddingSuper,
                vec![n_super, d],
                sup.into_iter().flatten().collect(),
            )
            .unwrap(),
        )
        .unwrap();
        reg.add(
            Param::new("embed.null", ParamTag::EmbeddingNull, vec![1, d], vec![0.0; d]).unwrap(),
        )
        .unwrap();
        reg
    }

    #[test]
    fn well_separated_clusters_score_high() {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        // siblings 0.2 apart, clusters 10 apart; super rows on their clusters
        let reg = registry_with(
            vec![
                vec![0.0, 0.0],
                vec![0.2, 0.0],
                vec![10.0, 0.0],
                vec![10.2, 0.0],
            ],
            vec![vec![0.1, 0.0], vec![10.1, 0.0]],
            2,
        );
        let emb = TieredEmbedder::from_registry(&reg).unwrap();
        let g = embedding_geometry(&emb, &tax).unwrap();
        assert_relative_eq!(g.mean_intra, 0.2, epsilon = 1e-12);
        assert_relative_eq!(g.mean_inter, 10.0, epsilon = 1e-3);
        assert!(g.separation_ratio > 40.0);
        assert!(g.super_nearest_own);
        assert_eq!(g.n_super_correct, 2);
    }

    #[test]
    fn swapped_super_rows_fail_the_centroid_check() {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let reg = registry_with(
            vec![
                vec![0.0, 0.0],
                vec![0.2, 0.0],
                vec![10.0, 0.0],
                vec![10.2, 0.0],
            ],
            // super rows point at the wrong clusters
            vec![vec![10.1, 0.0], vec![0.1, 0.0]],
            2,
        );
        let emb = TieredEmbedder::from_registry(&reg).unwrap();
        let g = embedding_geometry(&emb, &tax).unwrap();
        assert!(!g.super_nearest_own);
        assert_eq!(g.n_super_correct, 0);
    }

    #[test]
    fn all_zero_tables_use_the_ratio_one_convention() {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let reg = registry_with(vec![vec![0.0; 2]; 4], vec![vec![0.0; 2]; 2], 2);
        let emb = TieredEmbedder::from_registry(&reg).unwrap();
        let g = embedding_geometry(&emb, &tax).unwrap();
        assert_eq!(g.separation_ratio, 1.0);
        // ties are not strict, so no superclass passes
        assert!(!g.super_nearest_own);
    }

    #[test]
    fn coincident_siblings_with_separated_clusters_is_infinite() {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let reg = registry_with(
            vec![
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![5.0, 0.0],
                vec![5.0, 0.0],
            ],
            vec![vec![0.0, 0.0], vec![5.0, 0.0]],
            2,
        );
        let emb = TieredEmbedder::from_registry(&reg).unwrap();
        let g = embedding_geometry(&emb, &tax).unwrap();
        assert!(g.separation_ratio.is_infinite());
    }

    #[test]
    fn single_child_superclasses_have_no_intra_pairs() {
        let tax = Taxonomy::uniform(3, 1).unwrap();
        let reg = registry_with(
            vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]],
            vec![vec![0.0, 0.1], vec![3.0, 0.1], vec![0.1, 3.0]],
            2,
        );
        let emb = TieredEmbedder::from_registry(&reg).unwrap();
        let g = embedding_geometry(&emb, &tax).unwrap();
        assert_eq!(g.mean_intra, 0.0);
        assert!(g.separation_ratio.is_infinite());
        assert!(g.super_nearest_own);
    }

    #[test]
    fn taxonomy_size_mismatch_rejected() {
        let tax = Taxonomy::uniform(3, 3).unwrap();
        let reg = registry_with(vec![vec![0.0; 2]; 4], vec![vec![0.0; 2]; 2], 2);
        let emb = TieredEmbedder::from_registry(&reg).unwrap();
        assert!(embedding_geometry(&emb, &tax).is_err());
    }
}
