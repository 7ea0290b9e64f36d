//! Layerwise geometry: anisotropy, self-similarity and intra-sentence
//! similarity, on the full space and with the top-k cosine-contribution
//! dimensions removed.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decomp::{anisotropy, cosine, mean_cc};
use crate::error::{Error, Result};
use crate::informativity::remove_dims;
use crate::store::{eligible_rows, sample_pairs_among, EmbeddingCorpus};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfSimilarity {
    /// Per type, in first-occurrence order.
    pub per_type: Vec<(String, f64)>,
    pub mean: f64,
}

fn group_rows<F>(corpus: &EmbeddingCorpus, include_special: bool, key: F) -> Vec<(String, Vec<usize>)>
where
    F: Fn(usize) -> String,
{
    let mut order = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for i in eligible_rows(corpus, include_special) {
        let k = key(i);
        groups
            .entry(k.clone())
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|k| {
            let rows = groups.remove(&k).unwrap();
            (k, rows)
        })
        .collect()
}

fn row_cosine(corpus: &EmbeddingCorpus, a: usize, b: usize) -> Result<f64> {
    cosine(corpus.row(a), corpus.row(b))
        .map_err(|_| Error::domain(format!("zero-norm row in pair ({a}, {b})")))
}

/// Mean pairwise cosine among occurrences of each token type.
///
/// Types with fewer than `min_occurrences` (at least 2) non-special
/// occurrences are skipped. When a type has more than `pair_budget`
/// unordered pairs, `pair_budget` pairs are drawn uniformly with
/// replacement from a generator seeded by `seed` and the type's index.
pub fn self_similarity(
    corpus: &EmbeddingCorpus,
    min_occurrences: usize,
    pair_budget: usize,
    seed: u64,
    include_special: bool,
) -> Result<SelfSimilarity> {
    let min_occurrences = min_occurrences.max(2);
    let groups = group_rows(corpus, include_special, |i| corpus.meta()[i].token_type.clone());
    let mut per_type = Vec::new();
    for (t_idx, (t, rows)) in groups.into_iter().enumerate() {
        let m = rows.len();
        if m < min_occurrences {
            continue;
        }
        let all_pairs = m * (m - 1) / 2;
        let mut sum = 0.0;
        let count;
        if pair_budget == 0 || all_pairs <= pair_budget {
            for i in 0..m {
                for j in i + 1..m {
                    sum += row_cosine(corpus, rows[i], rows[j])?;
                }
            }
            count = all_pairs;
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for _ in 0..pair_budget {
                let a = rng.random_range(0..m);
                let mut b = rng.random_range(0..m - 1);
                if b >= a {
                    b += 1;
                }
                sum += row_cosine(corpus, rows[a], rows[b])?;
            }
            count = pair_budget;
        }
        per_type.push((t, sum / count as f64));
    }
    if per_type.is_empty() {
        return Err(Error::domain(format!(
            "no token type has at least {min_occurrences} occurrences"
        )));
    }
    let mean = per_type.iter().map(|(_, v)| v).sum::<f64>() / per_type.len() as f64;
    Ok(SelfSimilarity { per_type, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntraSentence {
    pub per_sequence: Vec<(i64, f64)>,
    pub mean: f64,
}

/// Mean cosine between each token and its sequence's mean vector,
/// averaged over sequences with at least two tokens.
pub fn intra_sentence_similarity(
    corpus: &EmbeddingCorpus,
    include_special: bool,
) -> Result<IntraSentence> {
    let d = corpus.d();
    let groups = group_rows(corpus, include_special, |i| {
        corpus.meta()[i].sequence_id.to_string()
    });
    let mut per_sequence = Vec::new();
    for (_, rows) in groups {
        if rows.len() < 2 {
            continue;
        }
        let seq = corpus.meta()[rows[0]].sequence_id;
        let mut centroid = vec![0.0f64; d];
        for &i in &rows {
            for (c, &x) in centroid.iter_mut().zip(corpus.row(i)) {
                *c += x as f64;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= rows.len() as f64);
        let mut sum = 0.0;
        for &i in &rows {
            let row: Vec<f64> = corpus.row(i).iter().map(|&x| x as f64).collect();
            sum += cosine(&row, &centroid).map_err(|_| {
                Error::domain(format!(
                    "sequence {seq}: zero-norm token or mean vector (row {i})"
                ))
            })?;
        }
        per_sequence.push((seq, sum / rows.len() as f64));
    }
    if per_sequence.is_empty() {
        return Err(Error::domain("no sequence has at least 2 tokens"));
    }
    let mean = per_sequence.iter().map(|(_, v)| v).sum::<f64>() / per_sequence.len() as f64;
    Ok(IntraSentence { per_sequence, mean })
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryConfig {
    pub k: usize,
    pub pairs: usize,
    pub seed: u64,
    pub min_occurrences: usize,
    pub pair_budget: usize,
    pub include_special: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            k: 5,
            pairs: 100_000,
            seed: 0,
            min_occurrences: 2,
            pair_budget: 10_000,
            include_special: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryMetrics {
    pub anisotropy: f64,
    pub mean_self_similarity: f64,
    /// Self-similarity minus the anisotropy baseline.
    pub mean_self_similarity_adjusted: f64,
    pub mean_intra_sentence_similarity: f64,
    pub mean_intra_sentence_similarity_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGeometry {
    pub removed_dims: Vec<usize>,
    pub full: GeometryMetrics,
    pub removed: GeometryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometrySuiteResult {
    pub k: usize,
    pub removal_criterion: &'static str,
    pub per_layer: BTreeMap<u32, LayerGeometry>,
}

fn metrics(
    corpus: &EmbeddingCorpus,
    sample: &crate::store::PairSample,
    cfg: &GeometryConfig,
) -> Result<GeometryMetrics> {
    let a = anisotropy(corpus, sample)?;
    let ss = self_similarity(
        corpus,
        cfg.min_occurrences,
        cfg.pair_budget,
        cfg.seed,
        cfg.include_special,
    )?
    .mean;
    let is = intra_sentence_similarity(corpus, cfg.include_special)?.mean;
    Ok(GeometryMetrics {
        anisotropy: a,
        mean_self_similarity: ss,
        mean_self_similarity_adjusted: ss - a,
        mean_intra_sentence_similarity: is,
        mean_intra_sentence_similarity_adjusted: is - a,
    })
}

/// Geometry of one layer before and after removing its top-k dimensions
/// by mean cosine contribution.
pub fn layer_geometry(corpus: &EmbeddingCorpus, cfg: &GeometryConfig) -> Result<LayerGeometry> {
    if cfg.k >= corpus.d() {
        return Err(Error::domain(format!(
            "k = {} must be below d = {}",
            cfg.k,
            corpus.d()
        )));
    }
    let rows = eligible_rows(corpus, cfg.include_special);
    let sample = sample_pairs_among(corpus, &rows, cfg.pairs, cfg.seed)?;
    let full = metrics(corpus, &sample, cfg)?;
    let dims: Vec<usize> = if cfg.k == 0 {
        Vec::new()
    } else {
        mean_cc(corpus, &sample)?.ranking[..cfg.k].to_vec()
    };
    let reduced = remove_dims(corpus, &dims)?;
    let removed = metrics(&reduced, &sample, cfg)?;
    Ok(LayerGeometry {
        removed_dims: dims.iter().map(|&j| corpus.original_dim(j)).collect(),
        full,
        removed,
    })
}

/// Run the suite over one corpus per layer.
pub fn run_suite(layers: &[EmbeddingCorpus], cfg: &GeometryConfig) -> Result<GeometrySuiteResult> {
    let mut per_layer = BTreeMap::new();
    for c in layers {
        per_layer.insert(c.layer(), layer_geometry(c, cfg)?);
    }
    Ok(GeometrySuiteResult {
        k: cfg.k,
        removal_criterion: "cosine_contribution",
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::TokenMeta;

    #[test]
    fn identical_occurrences_self_similar() {
        let meta = vec![
            TokenMeta::new("a", 0, 0),
            TokenMeta::new("a", 1, 0),
            TokenMeta::new("a", 2, 0),
        ];
        let c = EmbeddingCorpus::new("m", 0, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], meta).unwrap();
        let s = self_similarity(&c, 2, 10_000, 0, false).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_occurrences() {
        let meta = vec![TokenMeta::new("a", 0, 0), TokenMeta::new("a", 1, 0)];
        let c = EmbeddingCorpus::new("m", 0, 2, vec![1.0, 0.0, 0.0, 1.0], meta).unwrap();
        assert_eq!(self_similarity(&c, 2, 10_000, 0, false).unwrap().mean, 0.0);
        assert!(self_similarity(&c, 3, 10_000, 0, false).is_err());
    }

    #[test]
    fn intra_sentence_cases() {
        let meta = vec![TokenMeta::new("a", 0, 0), TokenMeta::new("b", 0, 1)];
        let c = EmbeddingCorpus::new("m", 0, 2, vec![1.0, 2.0, 1.0, 2.0], meta.clone()).unwrap();
        assert!((intra_sentence_similarity(&c, false).unwrap().mean - 1.0).abs() < 1e-12);

        // (v, -v) has a zero mean vector
        let c = EmbeddingCorpus::new("m", 0, 2, vec![1.0, 2.0, -1.0, -2.0], meta).unwrap();
        assert!(matches!(intra_sentence_similarity(&c, false), Err(Error::Domain(_))));

        let meta = vec![TokenMeta::new("a", 0, 0), TokenMeta::new("b", 1, 0)];
        let c = EmbeddingCorpus::new("m", 0, 1, vec![1.0, 2.0], meta).unwrap();
        assert!(intra_sentence_similarity(&c, false).is_err());
    }

    #[test]
    fn budget_sampling_is_deterministic() {
        let n = 40;
        let meta = (0..n).map(|i| TokenMeta::new("a", i, 0)).collect();
        let data = (0..n * 3).map(|i| ((i * 7919) % 13) as f32 - 6.0 + 0.5).collect();
        let c = EmbeddingCorpus::new("m", 0, 3, data, meta).unwrap();
        let a = self_similarity(&c, 2, 50, 9, false).unwrap();
        assert_eq!(a, self_similarity(&c, 2, 50, 9, false).unwrap());
        let exact = self_similarity(&c, 2, 0, 9, false).unwrap();
        assert!((a.mean - exact.mean).abs() < 0.3);
    }
}
