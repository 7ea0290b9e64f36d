//! Cosine and Euclidean similarity, their per-dimension decomposition, and
//! anisotropy estimation.
//!
//! The cosine of `u` and `v` splits additively over dimensions as
//! `CC_i(u, v) = u_i v_i / (|u| |v|)`. Averaging each term over a sample of
//! random token pairs gives every dimension's share of the expected cosine
//! similarity (anisotropy). A handful of dimensions with large means or
//! variances can carry almost all of it.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::reduce::{self, add_into};
use crate::store::{sample_pairs_among, CorpusStats, EmbeddingCorpus, PairSample, TokenMeta};

fn check_len(u: usize, v: usize) -> Result<()> {
    if u != v {
        return Err(Error::domain(format!("dimensionality mismatch: {u} vs {v}")));
    }
    Ok(())
}

pub fn dot<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a.into() * b.into()).sum()
}

pub fn norm<T: Copy + Into<f64>>(u: &[T]) -> f64 {
    u.iter().map(|&a| a.into() * a.into()).sum::<f64>().sqrt()
}

pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    check_len(u.len(), v.len())?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine of a zero-norm vector"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Per-dimension cosine contributions; they sum to `cosine(u, v)`.
pub fn cc_vector<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<Vec<f64>> {
    check_len(u.len(), v.len())?;
    let denom = norm(u) * norm(v);
    if denom == 0.0 {
        return Err(Error::domain("cosine contribution of a zero-norm vector"));
    }
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| a.into() * b.into() / denom)
        .collect())
}

pub fn euclidean<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    Ok(euclidean_contrib(u, v)?.iter().sum::<f64>().sqrt())
}

/// Squared coordinate differences; they sum to the squared distance.
pub fn euclidean_contrib<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<Vec<f64>> {
    check_len(u.len(), v.len())?;
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let t = a.into() - b.into();
            t * t
        })
        .collect())
}

/// Row norms, failing on the first zero-norm row referenced by `sample`.
fn sampled_norms(corpus: &EmbeddingCorpus, sample: &PairSample) -> Result<Vec<f64>> {
    sample.validate(corpus)?;
    let norms: Vec<f64> = corpus.rows().map(norm).collect();
    for &(a, b) in &sample.pairs {
        for i in [a, b] {
            if norms[i] == 0.0 {
                return Err(Error::domain(format!(
                    "row {i} ({:?}) has zero norm",
                    corpus.meta()[i].token_type
                )));
            }
        }
    }
    Ok(norms)
}

/// Per-chunk cosine sums over the sample and, optionally, per-dimension
/// contribution sums. Both estimators share this loop so they see the same
/// reduction order.
fn cosine_sums(
    corpus: &EmbeddingCorpus,
    sample: &PairSample,
    per_dim: bool,
) -> Result<(f64, Vec<f64>)> {
    let norms = sampled_norms(corpus, sample)?;
    let d = corpus.d();
    let parts = reduce::map_chunks(sample.len(), reduce::CHUNK, |r| {
        let mut cos_sum = 0.0f64;
        let mut dims = if per_dim { vec![0.0f64; d] } else { Vec::new() };
        for &(a, b) in &sample.pairs[r] {
            let (u, v) = (corpus.row(a), corpus.row(b));
            let denom = norms[a] * norms[b];
            cos_sum += dot(u, v) / denom;
            if per_dim {
                for ((acc, &x), &y) in dims.iter_mut().zip(u).zip(v) {
                    *acc += x as f64 * y as f64 / denom;
                }
            }
        }
        (cos_sum, dims)
    });
    let mut total = 0.0;
    let mut dims = if per_dim { vec![0.0; d] } else { Vec::new() };
    for (c, v) in parts {
        total += c;
        if per_dim {
            add_into(&mut dims, &v);
        }
    }
    Ok((total, dims))
}

/// Mean cosine similarity over the sampled pairs.
pub fn anisotropy(corpus: &EmbeddingCorpus, sample: &PairSample) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::domain("empty pair sample"));
    }
    let (total, _) = cosine_sums(corpus, sample, false)?;
    Ok(total / sample.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionReport {
    /// Mean cosine contribution of each dimension over the sample.
    pub per_dim_cc: Vec<f64>,
    pub anisotropy: f64,
    /// `per_dim_cc / anisotropy`; absent when anisotropy is (numerically) zero.
    pub shares: Option<Vec<f64>>,
    /// Dimensions by descending mean contribution, ties to the lower index.
    pub ranking: Vec<usize>,
}

impl ContributionReport {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    pub fn share(&self, dim: usize) -> Option<f64> {
        self.shares.as_ref().map(|s| s[dim])
    }
}

pub const ZERO_ANISOTROPY: f64 = 1e-9;

/// Indices sorted by descending score, ties broken by lowest index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Per-dimension decomposition of the anisotropy estimate.
pub fn mean_cc(corpus: &EmbeddingCorpus, sample: &PairSample) -> Result<ContributionReport> {
    if sample.is_empty() {
        return Err(Error::domain("empty pair sample"));
    }
    let m = sample.len() as f64;
    let (total, sums) = cosine_sums(corpus, sample, true)?;
    let per_dim_cc: Vec<f64> = sums.iter().map(|s| s / m).collect();
    let anisotropy = total / m;
    let shares = (anisotropy.abs() > ZERO_ANISOTROPY)
        .then(|| per_dim_cc.iter().map(|c| c / anisotropy).collect());
    let ranking = rank_descending(&per_dim_cc);
    Ok(ContributionReport {
        per_dim_cc,
        anisotropy,
        shares,
        ranking,
    })
}

/// Anisotropy among rows whose metadata satisfies `pred` (special tokens
/// excluded), over `count` pairs drawn with `seed`.
pub fn conditional_anisotropy<P>(
    corpus: &EmbeddingCorpus,
    pred: P,
    count: usize,
    seed: u64,
) -> Result<f64>
where
    P: Fn(&TokenMeta) -> bool,
{
    let rows: Vec<usize> = corpus
        .meta()
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_special && pred(m))
        .map(|(i, _)| i)
        .collect();
    if rows.len() < 2 {
        return Err(Error::domain(format!(
            "conditional anisotropy needs 2 matching rows, found {}",
            rows.len()
        )));
    }
    let sample = sample_pairs_among(corpus, &rows, count, seed)?;
    anisotropy(corpus, &sample)
}

/// Argmax of the per-dimension variance; ties to the lowest index.
pub fn highest_variance_dim(stats: &CorpusStats) -> usize {
    rank_descending(&stats.variance)[0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges shared by every category.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStats {
    pub histogram: Histogram,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryDistribution {
    /// Local column index.
    pub dim: usize,
    /// Original dimension index (differs from `dim` on reduced corpora).
    pub original_dim: usize,
    pub categories: BTreeMap<String, CategoryStats>,
}

pub const DEFAULT_BINS: usize = 100;

/// Position-zero tokens, "." tokens, and everything else.
pub fn default_category(m: &TokenMeta) -> String {
    if m.position == 0 {
        "pos0".into()
    } else if m.token_type == "." {
        "period".into()
    } else {
        "other".into()
    }
}

/// Split column `dim` by category label and histogram each part over the
/// column's observed range.
pub fn category_distribution<F>(
    corpus: &EmbeddingCorpus,
    dim: usize,
    categorize: F,
    bins: usize,
) -> Result<CategoryDistribution>
where
    F: Fn(&TokenMeta) -> String,
{
    if dim >= corpus.d() {
        return Err(Error::domain(format!(
            "dimension {dim} out of range for d = {}",
            corpus.d()
        )));
    }
    let bins = bins.max(1);
    let column: Vec<f32> = corpus.rows().map(|r| r[dim]).collect();
    let (lo, hi) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x as f64), hi.max(x as f64))
        });
    let width = if column.is_empty() { 0.0 } else { (hi - lo) / bins as f64 };
    let edges: Vec<f64> = if column.is_empty() {
        Vec::new()
    } else {
        (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect()
    };

    let mut groups: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (m, &x) in corpus.meta().iter().zip(&column) {
        groups.entry(categorize(m)).or_default().push(x);
    }
    let categories = groups
        .into_iter()
        .map(|(label, values)| {
            let count = values.len();
            let mean = values.iter().map(|&x| x as f64).sum::<f64>() / count as f64;
            let var = values
                .iter()
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>()
                / count as f64;
            let mut counts = vec![0u64; bins];
            for &x in &values {
                let b = if width > 0.0 {
                    (((x as f64 - lo) / width) as usize).min(bins - 1)
                } else {
                    0
                };
                counts[b] += 1;
            }
            let stats = CategoryStats {
                histogram: Histogram {
                    edges: edges.clone(),
                    counts,
                },
                mean,
                std: var.sqrt(),
                count,
                values,
            };
            (label, stats)
        })
        .collect();
    Ok(CategoryDistribution {
        dim,
        original_dim: corpus.original_dim(dim),
        categories,
    })
}

/// One row of the per-layer contribution table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionRow {
    pub dim: usize,
    pub mean: f64,
    pub variance: f64,
    pub mean_cc: f64,
    pub share: Option<f64>,
    /// 1-based position in the contribution ranking.
    pub rank: usize,
}

pub fn contribution_rows(
    corpus: &EmbeddingCorpus,
    stats: &CorpusStats,
    report: &ContributionReport,
) -> Vec<ContributionRow> {
    let mut rank = vec![0; report.ranking.len()];
    for (r, &dim) in report.ranking.iter().enumerate() {
        rank[dim] = r + 1;
    }
    (0..corpus.d())
        .map(|j| ContributionRow {
            dim: corpus.original_dim(j),
            mean: stats.mean[j],
            variance: stats.variance[j],
            mean_cc: report.per_dim_cc[j],
            share: report.share(j),
            rank: rank[j],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::sample_pairs;

    fn corpus(rows: &[Vec<f32>]) -> EmbeddingCorpus {
        let meta = (0..rows.len())
            .map(|i| TokenMeta::new("w", 0, i as i64))
            .collect();
        EmbeddingCorpus::from_rows("t", 0, rows, meta).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[2.0, 0.0], &[5.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cc_vector_cases() {
        let cc = cc_vector(&[1.0, 1.0], &[1.0, -1.0]).unwrap();
        assert!((cc[0] - 0.5).abs() < 1e-15 && (cc[1] + 0.5).abs() < 1e-15);
        let cc = cc_vector(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert!((cc[0] - 0.36).abs() < 1e-15 && (cc[1] - 0.64).abs() < 1e-15);
        assert_eq!(cc_vector(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn euclidean_cases() {
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_contrib(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), vec![9.0, 16.0]);
        assert_eq!(euclidean(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 2.0);
        assert_eq!(euclidean_contrib(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), vec![0.0, 4.0]);
    }

    #[test]
    fn anisotropy_trivial_corpora() {
        let c = corpus(&vec![vec![0.5, 2.0, -1.0]; 6]);
        let s = sample_pairs(&c, 50, 1).unwrap();
        assert!((anisotropy(&c, &s).unwrap() - 1.0).abs() < 1e-12);

        let c = corpus(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = sample_pairs(&c, 10, 1).unwrap();
        assert_eq!(anisotropy(&c, &s).unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_row_is_identified() {
        let c = corpus(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let s = sample_pairs(&c, 4, 0).unwrap();
        let err = anisotropy(&c, &s).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn mean_cc_hand_computed() {
        let c = corpus(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let s = PairSample {
            pairs: vec![(0, 1), (2, 3)],
            seed: 0,
            source_corpus_id: c.id(),
        };
        let r = mean_cc(&c, &s).unwrap();
        assert_eq!(r.per_dim_cc, vec![0.5, 0.5]);
        assert_eq!(r.anisotropy, 1.0);
        assert_eq!(r.shares, Some(vec![0.5, 0.5]));
        assert_eq!(r.ranking, vec![0, 1]);
    }

    #[test]
    fn mean_cc_shares_absent_at_zero_anisotropy() {
        let c = corpus(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = sample_pairs(&c, 8, 2).unwrap();
        let r = mean_cc(&c, &s).unwrap();
        assert!(r.shares.is_none());
    }

    #[test]
    fn conditional_needs_two_rows() {
        let meta = vec![TokenMeta::new("a", 0, 0), TokenMeta::new("b", 0, 1)];
        let c = EmbeddingCorpus::new("m", 0, 2, vec![1.0, 2.0, 3.0, 1.0], meta).unwrap();
        assert!(conditional_anisotropy(&c, |m| m.position == 0, 10, 0).is_err());

        let meta = vec![
            TokenMeta::new("a", 0, 0),
            TokenMeta::new("b", 1, 0),
            TokenMeta::new("c", 1, 1),
        ];
        let c = EmbeddingCorpus::new("m", 0, 2, vec![1.0, 2.0, 1.0, 2.0, -5.0, 1.0], meta).unwrap();
        let a = conditional_anisotropy(&c, |m| m.position == 0, 10, 0).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn highest_variance_ties_low() {
        let stats = |v: Vec<f64>| CorpusStats {
            mean: vec![0.0; v.len()],
            std: v.iter().map(|x| x.sqrt()).collect(),
            variance: v,
            count: 1,
        };
        assert_eq!(highest_variance_dim(&stats(vec![1.0, 100.0, 3.0])), 1);
        assert_eq!(highest_variance_dim(&stats(vec![2.0, 2.0, 2.0])), 0);
    }

    #[test]
    fn category_split() {
        let meta = vec![
            TokenMeta::new("x", 0, 0),
            TokenMeta::new(".", 0, 1),
            TokenMeta::new("y", 0, 2),
            TokenMeta::new("z", 1, 0),
        ];
        let c = EmbeddingCorpus::new("m", 0, 1, vec![0.0, 7.0, 7.0, 0.0], meta).unwrap();
        let dist = category_distribution(&c, 0, default_category, DEFAULT_BINS).unwrap();
        let pos0 = &dist.categories["pos0"];
        assert_eq!((pos0.mean, pos0.std, pos0.count), (0.0, 0.0, 2));
        assert_eq!(dist.categories["period"].mean, 7.0);
        assert_eq!(dist.categories["other"].std, 0.0);
        let total: usize = dist.categories.values().map(|s| s.count).sum();
        assert_eq!(total, 4);
        assert_eq!(pos0.histogram.counts[0], 2);
        assert_eq!(dist.categories["period"].histogram.counts[DEFAULT_BINS - 1], 1);

        let all_other = category_distribution(&c, 0, |_| "other".into(), 10).unwrap();
        assert_eq!(all_other.categories.len(), 1);
        assert_eq!(all_other.categories["other"].count, 4);
        assert!(category_distribution(&c, 1, default_category, 10).is_err());
    }
}
