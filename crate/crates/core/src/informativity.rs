//! How much of a similarity measure's variability survives removing the
//! top-k dominant dimensions.
//!
//! For a fixed pair sample the measure is computed once in the full space
//! and once with `k` dimensions dropped; the squared Pearson correlation of
//! the two lists is the share of variance the remaining dimensions explain.

use serde::{Deserialize, Serialize};

use crate::decomp::{self, mean_cc, rank_descending};
use crate::error::{Error, Result};
use crate::reduce;
use crate::store::{compute_stats, EmbeddingCorpus, PairSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Rank by mean cosine contribution over the pair sample.
    CosineContribution,
    /// Rank by per-dimension variance over the corpus.
    Variance,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::CosineContribution => "cosine_contribution",
            Criterion::Variance => "variance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Cosine,
    Euclidean,
}

impl Measure {
    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Cosine => "cosine",
            Measure::Euclidean => "euclidean",
        }
    }

    /// Ranking criterion conventionally paired with this measure.
    pub fn default_criterion(self) -> Criterion {
        match self {
            Measure::Cosine => Criterion::CosineContribution,
            Measure::Euclidean => Criterion::Variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemovalSpec {
    pub k: usize,
    pub criterion: Criterion,
    /// Local column indices, in ranking order.
    pub removed_dims: Vec<usize>,
}

impl RemovalSpec {
    /// Rank all dimensions once by `criterion` and keep the top `k`.
    pub fn resolve(
        corpus: &EmbeddingCorpus,
        sample: &PairSample,
        k: usize,
        criterion: Criterion,
    ) -> Result<Self> {
        if k >= corpus.d() {
            return Err(Error::domain(format!(
                "cannot remove k = {k} of d = {} dimensions",
                corpus.d()
            )));
        }
        let ranking = match criterion {
            Criterion::CosineContribution => mean_cc(corpus, sample)?.ranking,
            Criterion::Variance => rank_descending(&compute_stats(corpus)?.variance),
        };
        Ok(Self {
            k,
            criterion,
            removed_dims: ranking[..k].to_vec(),
        })
    }

    pub fn explicit(criterion: Criterion, dims: Vec<usize>, d: usize) -> Result<Self> {
        validate_dims(&dims, d)?;
        Ok(Self {
            k: dims.len(),
            criterion,
            removed_dims: dims,
        })
    }
}

fn validate_dims(dims: &[usize], d: usize) -> Result<()> {
    let mut seen = vec![false; d];
    for &j in dims {
        if j >= d {
            return Err(Error::domain(format!("dimension {j} out of range for d = {d}")));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::domain(format!("dimension {j} listed twice")));
        }
    }
    Ok(())
}

/// Drop columns `dims`. The result records surviving original indices in
/// its dim labels.
pub fn remove_dims(corpus: &EmbeddingCorpus, dims: &[usize]) -> Result<EmbeddingCorpus> {
    let d = corpus.d();
    validate_dims(dims, d)?;
    if dims.is_empty() {
        return Ok(corpus.clone());
    }
    if dims.len() == d {
        return Err(Error::domain("removing every dimension leaves an empty representation"));
    }
    let mut keep = vec![true; d];
    for &j in dims {
        keep[j] = false;
    }
    let kept: Vec<usize> = (0..d).filter(|&j| keep[j]).collect();
    let mut data = Vec::with_capacity(corpus.n() * kept.len());
    for row in corpus.rows() {
        data.extend(kept.iter().map(|&j| row[j]));
    }
    let labels = kept.iter().map(|&j| corpus.original_dim(j)).collect();
    corpus.with_data(kept.len(), data).with_dim_labels(labels)
}

/// Product-moment correlation with two-pass double-precision sums.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "correlation of lists with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::domain("correlation needs at least 2 observations"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::domain("correlation undefined for a constant list"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// The measure evaluated on every sampled pair, in sample order.
pub fn pair_measures(
    corpus: &EmbeddingCorpus,
    sample: &PairSample,
    measure: Measure,
) -> Result<Vec<f64>> {
    sample.validate(corpus)?;
    let chunks = reduce::map_chunks(sample.len(), reduce::CHUNK, |r| {
        sample.pairs[r]
            .iter()
            .map(|&(a, b)| {
                let (u, v) = (corpus.row(a), corpus.row(b));
                match measure {
                    Measure::Cosine => decomp::cosine(u, v).map_err(|_| {
                        Error::domain(format!("zero-norm row in pair ({a}, {b})"))
                    }),
                    Measure::Euclidean => decomp::euclidean(u, v),
                }
            })
            .collect::<Result<Vec<f64>>>()
    });
    let mut out = Vec::with_capacity(sample.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InformativityResult {
    pub r_squared: f64,
    pub k: usize,
    pub criterion: Criterion,
    pub measure: Measure,
    pub n_pairs: usize,
    /// Removed dimensions as original indices.
    pub removed_dims: Vec<usize>,
}

/// Squared correlation between the measure on the full space and on the
/// space with `spec.removed_dims` dropped, over the same pairs.
pub fn r_squared_removed(
    corpus: &EmbeddingCorpus,
    sample: &PairSample,
    spec: &RemovalSpec,
    measure: Measure,
) -> Result<InformativityResult> {
    if spec.k >= corpus.d() {
        return Err(Error::domain(format!(
            "k = {} must be below d = {}",
            spec.k,
            corpus.d()
        )));
    }
    let reduced = remove_dims(corpus, &spec.removed_dims)?;
    let full = pair_measures(corpus, sample, measure)?;
    let partial = pair_measures(&reduced, sample, measure)?;
    let r = pearson(&full, &partial)?;
    Ok(InformativityResult {
        r_squared: r * r,
        k: spec.k,
        criterion: spec.criterion,
        measure,
        n_pairs: sample.len(),
        removed_dims: spec
            .removed_dims
            .iter()
            .map(|&j| corpus.original_dim(j))
            .collect(),
    })
}
