//! Word-similarity evaluation: correlate model similarities of
//! context-aggregated type vectors with human judgments.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decomp::cosine;
use crate::error::{Error, Result};
use crate::informativity::pearson;
use crate::postprocess::{apply, rank_transform, spearman_similarity, Transform, TransformKind};
use crate::store::EmbeddingCorpus;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordPair {
    pub word_a: String,
    pub word_b: String,
    pub human_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityDataset {
    pub name: String,
    pub pairs: Vec<WordPair>,
    /// Whether words (dataset and corpus side) are matched lowercased.
    pub lowercase: bool,
}

impl SimilarityDataset {
    pub fn new(name: impl Into<String>, pairs: Vec<WordPair>, lowercase: bool) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &pairs {
            if !p.human_score.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite score for ({}, {})",
                    p.word_a, p.word_b
                )));
            }
            let key = if p.word_a <= p.word_b {
                (p.word_a.clone(), p.word_b.clone())
            } else {
                (p.word_b.clone(), p.word_a.clone())
            };
            if !seen.insert(key) {
                return Err(Error::Validation(format!(
                    "duplicate pair ({}, {})",
                    p.word_a, p.word_b
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            pairs,
            lowercase,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn normalize(&self, w: &str) -> String {
        if self.lowercase {
            w.trim().to_lowercase()
        } else {
            w.trim().to_string()
        }
    }
}

/// Load a tab-separated `word_a, word_b, score` file, lowercasing words.
pub fn load_dataset(path: &Path) -> Result<SimilarityDataset> {
    load_dataset_with(path, true)
}

/// A first line whose score column is not numeric is taken as a header.
pub fn load_dataset_with(path: &Path, lowercase: bool) -> Result<SimilarityDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let is_first = std::mem::replace(&mut first, false);
        let score = match cols[2].trim().parse::<f64>() {
            Ok(s) => s,
            Err(_) if is_first => continue,
            Err(_) => return Err(err(format!("non-numeric score {:?}", cols[2]))),
        };
        let norm = |w: &str| {
            if lowercase {
                w.trim().to_lowercase()
            } else {
                w.trim().to_string()
            }
        };
        pairs.push(WordPair {
            word_a: norm(cols[0]),
            word_b: norm(cols[1]),
            human_score: score,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SimilarityDataset::new(name, pairs, lowercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Raw,
    Standardize,
    Abtt,
    MeanOnly,
    Rank,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Raw,
        Strategy::Standardize,
        Strategy::Abtt,
        Strategy::MeanOnly,
        Strategy::Rank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Raw => "raw",
            Strategy::Standardize => "standardize",
            Strategy::Abtt => "abtt",
            Strategy::MeanOnly => "mean_only",
            Strategy::Rank => "rank",
        }
    }

    pub fn needs_transform(self) -> bool {
        matches!(self, Strategy::Standardize | Strategy::Abtt | Strategy::MeanOnly)
    }

    fn accepts(self, t: &Transform) -> bool {
        matches!(
            (self, &t.kind),
            (Strategy::Standardize, TransformKind::Standardize { .. })
                | (Strategy::Abtt, TransformKind::AllButTheTop { .. })
                | (Strategy::MeanOnly, TransformKind::MeanSubtract { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub dataset: String,
    pub layer: u32,
    pub strategy: Strategy,
    pub rho: f64,
    pub n_pairs_used: usize,
    pub n_pairs_skipped: usize,
}

/// Spearman correlation: Pearson correlation of average-tied ranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "rank correlation of lists with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::domain("rank correlation needs at least 3 observations"));
    }
    pearson(&rank_transform(a), &rank_transform(b))
}

/// Spearman ρ between model similarities and human scores.
///
/// `aggregated` must hold one row per word type. For standardize, abtt and
/// mean_only a fitted transform of the matching kind is applied to the
/// type vectors first; rank uses rank similarity of the raw vectors.
/// Pairs with a word missing from the corpus are skipped and counted.
pub fn evaluate(
    aggregated: &EmbeddingCorpus,
    dataset: &SimilarityDataset,
    strategy: Strategy,
    transform: Option<&Transform>,
) -> Result<EvalResult> {
    let transformed;
    let vectors = if strategy.needs_transform() {
        let t = transform.ok_or_else(|| {
            Error::domain(format!("strategy {} needs a fitted transform", strategy.as_str()))
        })?;
        if !strategy.accepts(t) {
            return Err(Error::domain(format!(
                "strategy {} cannot use a {} transform",
                strategy.as_str(),
                t.name()
            )));
        }
        transformed = apply(t, aggregated)?;
        &transformed
    } else {
        aggregated
    };

    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, m) in vectors.meta().iter().enumerate() {
        index.entry(dataset.normalize(&m.token_type)).or_insert(i);
    }

    let mut model = Vec::new();
    let mut human = Vec::new();
    let mut skipped = 0;
    for p in &dataset.pairs {
        let (Some(&a), Some(&b)) = (
            index.get(&dataset.normalize(&p.word_a)),
            index.get(&dataset.normalize(&p.word_b)),
        ) else {
            skipped += 1;
            continue;
        };
        let (u, v) = (vectors.row(a), vectors.row(b));
        let sim = match strategy {
            Strategy::Rank => spearman_similarity(u, v),
            _ => cosine(u, v),
        }
        .map_err(|e| Error::domain(format!("pair ({}, {}): {e}", p.word_a, p.word_b)))?;
        model.push(sim);
        human.push(p.human_score);
    }
    if model.len() < 3 {
        return Err(Error::domain(format!(
            "{}: only {} usable pairs",
            dataset.name,
            model.len()
        )));
    }
    let rho = rank_correlation(&model, &human)?;
    Ok(EvalResult {
        dataset: dataset.name.clone(),
        layer: aggregated.layer(),
        strategy,
        rho,
        n_pairs_used: model.len(),
        n_pairs_skipped: skipped,
    })
}

/// Unweighted mean of per-dataset ρ.
pub fn mean_rho(results: &[EvalResult]) -> Option<f64> {
    (!results.is_empty()).then(|| results.iter().map(|r| r.rho).sum::<f64>() / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::fit_standardize;
    use crate::store::{TokenMeta, NO_SEQUENCE};

    fn types(words: &[&str], rows: &[Vec<f32>]) -> EmbeddingCorpus {
        let meta = words
            .iter()
            .map(|w| TokenMeta::new(*w, NO_SEQUENCE, NO_SEQUENCE))
            .collect();
        EmbeddingCorpus::from_rows("m", 12, rows, meta).unwrap()
    }

    fn pair(a: &str, b: &str, s: f64) -> WordPair {
        WordPair {
            word_a: a.into(),
            word_b: b.into(),
            human_score: s,
        }
    }

    #[test]
    fn rank_correlation_cases() {
        assert!((rank_correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let r = rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let r = rank_correlation(&[1.0, 1.0, 2.0], &[5.0, 5.0, 9.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(rank_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(rank_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    fn unit(angle: f32) -> Vec<f32> {
        vec![angle.cos(), angle.sin()]
    }

    #[test]
    fn constructed_order_gives_perfect_rho() {
        // cos(a, x) decreases as x's angle grows
        let c = types(&["a", "b", "c", "d"], &[unit(0.0), unit(0.2), unit(0.9), unit(1.4)]);
        let ds = SimilarityDataset::new(
            "toy",
            vec![pair("a", "b", 9.0), pair("a", "c", 5.0), pair("a", "d", 1.0), pair("a", "zzz", 3.0)],
            true,
        )
        .unwrap();
        let r = evaluate(&c, &ds, Strategy::Raw, None).unwrap();
        assert!((r.rho - 1.0).abs() < 1e-12);
        assert_eq!((r.n_pairs_used, r.n_pairs_skipped), (3, 1));

        let rev = SimilarityDataset::new(
            "rev",
            vec![pair("a", "b", 1.0), pair("a", "c", 5.0), pair("a", "d", 9.0)],
            true,
        )
        .unwrap();
        assert!((evaluate(&c, &rev, Strategy::Raw, None).unwrap().rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_required_and_matched() {
        let c = types(&["a", "b", "c"], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let ds = SimilarityDataset::new(
            "t",
            vec![pair("a", "b", 1.0), pair("a", "c", 2.0), pair("b", "c", 3.0)],
            true,
        )
        .unwrap();
        assert!(evaluate(&c, &ds, Strategy::Standardize, None).is_err());
        let t = fit_standardize(&c).unwrap();
        assert!(evaluate(&c, &ds, Strategy::Abtt, Some(&t)).is_err());
    }

    #[test]
    fn too_few_pairs() {
        let c = types(&["a", "b"], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ds = SimilarityDataset::new("t", vec![pair("a", "b", 1.0), pair("a", "q", 2.0)], true)
            .unwrap();
        assert!(matches!(evaluate(&c, &ds, Strategy::Raw, None), Err(Error::Domain(_))));
    }

    #[test]
    fn duplicate_unordered_pair_rejected() {
        let r = SimilarityDataset::new("t", vec![pair("a", "b", 1.0), pair("b", "a", 2.0)], true);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn load_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("simlex.tsv");
        fs::write(&p, "word1\tword2\tscore\nCar\tautomobile\t3.92\n\nold\tnew\t1.58\n").unwrap();
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.name, "simlex");
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.pairs[0], pair("car", "automobile", 3.92));

        fs::write(&p, "car\tautomobile\t3.92\n").unwrap();
        assert_eq!(load_dataset(&p).unwrap().len(), 1);

        fs::write(&p, "a\tb\t1\nc\td\tx\n").unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "a\tb\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "a\tb\t1\nB\tA\t2\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn mean_rho_unweighted() {
        let r = |rho| EvalResult {
            dataset: "x".into(),
            layer: 0,
            strategy: Strategy::Raw,
            rho,
            n_pairs_used: 3,
            n_pairs_skipped: 0,
        };
        assert!((mean_rho(&[r(0.2), r(0.4)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(mean_rho(&[]), None);
    }
}
