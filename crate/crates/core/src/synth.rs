//! Synthetic corpora and distribution files for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::behavior::DistributionPair;
use crate::decomp::cosine;
use crate::error::{Error, Result};
use crate::store::{aggregate_by_type, EmbeddingCorpus, TokenMeta};

/// A dimension replaced by draws from Normal(mean, std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedDim {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(default = "default_layer")]
    pub layer: u32,
    /// Tokens per sequence; positions cycle through `0..seq_len`.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Distinct token types, drawn uniformly per token.
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    /// Scale of a per-type prototype added to every occurrence.
    #[serde(default)]
    pub type_signal: f64,
    #[serde(default)]
    pub planted: Vec<PlantedDim>,
}

fn default_layer() -> u32 {
    0
}

fn default_seq_len() -> usize {
    128
}

fn default_vocab() -> usize {
    500
}

impl SynthSpec {
    /// i.i.d. standard-normal entries.
    pub fn isotropic(n: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            seed,
            layer: 0,
            seq_len: default_seq_len(),
            vocab: default_vocab(),
            type_signal: 0.0,
            planted: Vec::new(),
        }
    }

    pub fn with_planted(mut self, dim: usize, mean: f64, std: f64) -> Self {
        self.planted.push(PlantedDim { dim, mean, std });
        self
    }

    pub fn generate(&self) -> Result<EmbeddingCorpus> {
        if self.d == 0 || self.vocab == 0 || self.seq_len == 0 {
            return Err(Error::domain("synthetic corpus needs d, vocab, seq_len >= 1"));
        }
        let mut planted: Vec<Option<Normal<f64>>> = vec![None; self.d];
        for p in &self.planted {
            if p.dim >= self.d {
                return Err(Error::domain(format!("planted dim {} >= d = {}", p.dim, self.d)));
            }
            planted[p.dim] = Some(
                Normal::new(p.mean, p.std)
                    .map_err(|e| Error::domain(format!("planted dim {}: {e}", p.dim)))?,
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos: Vec<f64> = if self.type_signal != 0.0 {
            (0..self.vocab * self.d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let mut data = Vec::with_capacity(self.n * self.d);
        let mut meta = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let t = rng.random_range(0..self.vocab);
            for (j, p) in planted.iter().enumerate() {
                let mut x: f64 = match p {
                    Some(dist) => dist.sample(&mut rng),
                    None => StandardNormal.sample(&mut rng),
                };
                if p.is_none() && !protos.is_empty() {
                    x += self.type_signal * protos[t * self.d + j];
                }
                data.push(x as f32);
            }
            meta.push(TokenMeta::new(
                format!("w{t}"),
                (i / self.seq_len) as i64,
                (i % self.seq_len) as i64,
            ));
        }
        EmbeddingCorpus::new("synthetic", self.layer, self.d, data, meta)
    }
}

fn softmax(logits: &[f64]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| (x / s) as f32).collect()
}

/// Reference/ablated pairs for every dimension of one layer.
///
/// Ablating dimension `i` perturbs the logits with noise scaled by
/// `weights[i]`; a zero weight yields identical distributions.
pub fn distributions(
    layer: u32,
    weights: &[f64],
    vocab: usize,
    per_dim: usize,
    seed: u64,
) -> Result<Vec<DistributionPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(weights.len() * per_dim);
    for (dim, &w) in weights.iter().enumerate() {
        for t in 0..per_dim {
            let logits: Vec<f64> = (0..vocab)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    2.0 * z
                })
                .collect();
            let ablated: Vec<f64> = logits
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + w * z
                })
                .collect();
            out.push(DistributionPair::new(
                softmax(&logits),
                softmax(&ablated),
                layer,
                dim as u32,
                t as u64,
            )?);
        }
    }
    Ok(out)
}

/// Word-similarity pairs over the first `n_types` aggregated types of
/// `corpus`. Scores are a noisy affine map of the cosine computed without
/// the `hidden` dimensions, so a space dominated by those dimensions ranks
/// the pairs poorly.
pub fn similarity_pairs(
    corpus: &EmbeddingCorpus,
    hidden: &[usize],
    n_types: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<(String, String, f64)>> {
    let agg = aggregate_by_type(corpus, 1, usize::MAX).corpus;
    let keep: Vec<usize> = (0..agg.d()).filter(|j| !hidden.contains(j)).collect();
    let m = agg.n().min(n_types);
    let vecs: Vec<Vec<f64>> = (0..m)
        .map(|i| keep.iter().map(|&j| agg.row(i)[j] as f64).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            let score = 5.0 + 5.0 * cosine(&vecs[a], &vecs[b])? + noise * z;
            out.push((
                agg.meta()[a].token_type.clone(),
                agg.meta()[b].token_type.clone(),
                score,
            ));
        }
    }
    Ok(out)
}

/// Tab-separated `word_a word_b score` lines with a header.
pub fn dataset_tsv(pairs: &[(String, String, f64)]) -> String {
    let mut s = String::from("word1\tword2\tscore\n");
    for (a, b, x) in pairs {
        s.push_str(&format!("{a}\t{b}\t{x:.4}\n"));
    }
    s
}
