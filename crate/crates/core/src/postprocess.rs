//! Corrective transforms: standardization, mean subtraction,
//! all-but-the-top, and the within-vector rank transform.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::informativity::pearson;
use crate::reduce::{self, add_into};
use crate::store::{compute_stats, decode_emb1, encode_emb1, EmbeddingCorpus};

#[derive(Debug, Clone, PartialEq)]
pub enum TransformKind {
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    MeanSubtract { mean: Vec<f64> },
    AllButTheTop {
        mean: Vec<f64>,
        /// Row-major D×d, orthonormal rows.
        components: Vec<f64>,
        /// Covariance eigenvalues of the removed components, descending.
        eigenvalues: Vec<f64>,
    },
    Rank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub kind: TransformKind,
    pub fitted_on: String,
    pub d: usize,
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self.kind {
            TransformKind::Standardize { .. } => "standardize",
            TransformKind::MeanSubtract { .. } => "mean_subtract",
            TransformKind::AllButTheTop { .. } => "all_but_the_top",
            TransformKind::Rank => "rank",
        }
    }

    pub fn rank(d: usize) -> Self {
        Self {
            kind: TransformKind::Rank,
            fitted_on: String::new(),
            d,
        }
    }

    /// Number of removed principal components (0 for other kinds).
    pub fn n_components(&self) -> usize {
        match &self.kind {
            TransformKind::AllButTheTop { eigenvalues, .. } => eigenvalues.len(),
            _ => 0,
        }
    }

    pub fn component(&self, j: usize) -> Option<&[f64]> {
        match &self.kind {
            TransformKind::AllButTheTop { components, .. } if j < self.n_components() => {
                Some(&components[j * self.d..(j + 1) * self.d])
            }
            _ => None,
        }
    }

    /// Apply to one row.
    pub fn apply_row(&self, x: &[f32], out: &mut [f64]) {
        match &self.kind {
            TransformKind::Standardize { mean, std } => {
                for (((o, &v), m), s) in out.iter_mut().zip(x).zip(mean).zip(std) {
                    *o = if *s == 0.0 { 0.0 } else { (v as f64 - m) / s };
                }
            }
            TransformKind::MeanSubtract { mean } => {
                for ((o, &v), m) in out.iter_mut().zip(x).zip(mean) {
                    *o = v as f64 - m;
                }
            }
            TransformKind::AllButTheTop { mean, components, .. } => {
                for ((o, &v), m) in out.iter_mut().zip(x).zip(mean) {
                    *o = v as f64 - m;
                }
                let coeffs: Vec<f64> = components
                    .chunks_exact(self.d)
                    .map(|c| c.iter().zip(out.iter()).map(|(a, b)| a * b).sum())
                    .collect();
                for (c, w) in components.chunks_exact(self.d).zip(coeffs) {
                    for (o, ci) in out.iter_mut().zip(c) {
                        *o -= w * ci;
                    }
                }
            }
            TransformKind::Rank => {
                out.copy_from_slice(&rank_transform(x));
            }
        }
    }
}

fn need_rows(corpus: &EmbeddingCorpus, min: usize, what: &str) -> Result<()> {
    if corpus.n() < min {
        return Err(Error::domain(format!(
            "{what} needs at least {min} rows, corpus has {}",
            corpus.n()
        )));
    }
    Ok(())
}

/// Fit z = (x − μ)/σ with the population standard deviation.
pub fn fit_standardize(corpus: &EmbeddingCorpus) -> Result<Transform> {
    need_rows(corpus, 2, "standardization")?;
    let stats = compute_stats(corpus)?;
    Ok(Transform {
        kind: TransformKind::Standardize {
            mean: stats.mean,
            std: stats.std,
        },
        fitted_on: corpus.id(),
        d: corpus.d(),
    })
}

pub fn fit_mean(corpus: &EmbeddingCorpus) -> Result<Transform> {
    need_rows(corpus, 1, "mean subtraction")?;
    let stats = compute_stats(corpus)?;
    Ok(Transform {
        kind: TransformKind::MeanSubtract { mean: stats.mean },
        fitted_on: corpus.id(),
        d: corpus.d(),
    })
}

/// Default number of removed components: one per hundred dimensions,
/// at least one.
pub fn default_abtt_components(d: usize) -> usize {
    (d / 100).max(1)
}

/// Population covariance of the corpus around `mean`, d×d.
pub fn covariance(corpus: &EmbeddingCorpus, mean: &[f64]) -> DMatrix<f64> {
    let (n, d) = (corpus.n(), corpus.d());
    const ROWS: usize = 512;
    let mut acc = vec![0.0f64; d * d];
    for part in reduce::map_chunks(n, ROWS, |r| {
        let rows = r.len();
        let block = DMatrix::from_fn(rows, d, |i, j| corpus.row(r.start + i)[j] as f64 - mean[j]);
        let g = block.transpose() * &block;
        g.as_slice().to_vec()
    }) {
        add_into(&mut acc, &part);
    }
    DMatrix::from_vec(d, d, acc) / n as f64
}

/// Subtract the mean and project out the top `n_components` principal
/// directions of the centered corpus.
pub fn fit_abtt(corpus: &EmbeddingCorpus, n_components: usize) -> Result<Transform> {
    let (n, d) = (corpus.n(), corpus.d());
    if n_components < 1 || n_components >= n.min(d) {
        return Err(Error::domain(format!(
            "all-but-the-top needs 1 <= D < min(n, d) = {}, got D = {n_components}",
            n.min(d)
        )));
    }
    let mean = compute_stats(corpus)?.mean;
    let cov = covariance(corpus, &mean);
    let eig = SymmetricEigen::try_new(cov, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let order = crate::decomp::rank_descending(eig.eigenvalues.as_slice());
    let mut components = Vec::with_capacity(n_components * d);
    let mut eigenvalues = Vec::with_capacity(n_components);
    for &j in &order[..n_components] {
        let col = eig.eigenvectors.column(j);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // sign: largest-magnitude entry positive, first such entry on ties
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x *= sign / norm);
        components.extend(v);
        eigenvalues.push(eig.eigenvalues[j]);
    }
    Ok(Transform {
        kind: TransformKind::AllButTheTop {
            mean,
            components,
            eigenvalues,
        },
        fitted_on: corpus.id(),
        d,
    })
}

/// Within-vector ranks 1..=d, ties given the mean of their positions.
pub fn rank_transform<T: Copy + Into<f64>>(x: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = x.iter().map(|&v| v.into()).collect();
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean((i+1)..=(j+1))
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the two vectors' rank transforms.
pub fn spearman_similarity<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::domain(format!(
            "dimensionality mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(Error::domain("rank similarity needs d >= 2"));
    }
    pearson(&rank_transform(u), &rank_transform(v))
}

/// Row-wise application; metadata and dim labels are preserved.
pub fn apply(transform: &Transform, corpus: &EmbeddingCorpus) -> Result<EmbeddingCorpus> {
    let d = corpus.d();
    if transform.d != d {
        return Err(Error::domain(format!(
            "{} transform fitted for d = {} applied to d = {d}",
            transform.name(),
            transform.d
        )));
    }
    let chunks = reduce::map_chunks(corpus.n(), reduce::CHUNK, |r| {
        let mut buf = vec![0.0f64; d];
        let mut out = Vec::with_capacity(r.len() * d);
        for i in r {
            transform.apply_row(corpus.row(i), &mut buf);
            out.extend(buf.iter().map(|&x| x as f32));
        }
        out
    });
    Ok(corpus.with_data(d, chunks.concat()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformHeader {
    kind: String,
    d: usize,
    #[serde(rename = "D")]
    n_components: usize,
    fitted_on: String,
    #[serde(default)]
    eigenvalues: Vec<f64>,
    payload: String,
}

/// Payload path next to a transform header.
pub fn payload_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".emb");
    PathBuf::from(s)
}

/// JSON header at `path`; μ, σ and components as EMB1 rows at
/// `<path>.emb`.
pub fn save_transform(t: &Transform, path: &Path) -> Result<()> {
    let d = t.d;
    let rows: Vec<f64> = match &t.kind {
        TransformKind::Standardize { mean, std } => [mean.as_slice(), std].concat(),
        TransformKind::MeanSubtract { mean } => mean.clone(),
        TransformKind::AllButTheTop { mean, components, .. } => {
            [mean.as_slice(), components].concat()
        }
        TransformKind::Rank => Vec::new(),
    };
    let values: Vec<f32> = rows.iter().map(|&x| x as f32).collect();
    let ppath = payload_path(path);
    atomic_write(&ppath, &encode_emb1(values.len() / d, d, &values))?;
    let header = TransformHeader {
        kind: t.name().to_string(),
        d,
        n_components: t.n_components(),
        fitted_on: t.fitted_on.clone(),
        eigenvalues: match &t.kind {
            TransformKind::AllButTheTop { eigenvalues, .. } => eigenvalues.clone(),
            _ => Vec::new(),
        },
        payload: ppath
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    atomic_write(path, &json)
}

pub fn load_transform(path: &Path) -> Result<Transform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: TransformHeader = serde_json::from_str(&text)?;
    let ppath = path.with_file_name(&header.payload);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let (n, d, values) = decode_emb1(&ppath, &bytes)?;
    if d != header.d {
        return Err(Error::Consistency(format!(
            "transform header says d = {} but payload has d = {d}",
            header.d
        )));
    }
    let rows: Vec<Vec<f64>> = values
        .chunks_exact(d)
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    let want = |k: usize| -> Result<()> {
        if n != k {
            return Err(Error::Consistency(format!(
                "{} transform payload has {n} rows, expected {k}",
                header.kind
            )));
        }
        Ok(())
    };
    let kind = match header.kind.as_str() {
        "standardize" => {
            want(2)?;
            TransformKind::Standardize {
                mean: rows[0].clone(),
                std: rows[1].clone(),
            }
        }
        "mean_subtract" => {
            want(1)?;
            TransformKind::MeanSubtract {
                mean: rows[0].clone(),
            }
        }
        "all_but_the_top" => {
            want(1 + header.n_components)?;
            if header.eigenvalues.len() != header.n_components {
                return Err(Error::Consistency(
                    "eigenvalue count does not match D".into(),
                ));
            }
            TransformKind::AllButTheTop {
                mean: rows[0].clone(),
                components: rows[1..].concat(),
                eigenvalues: header.eigenvalues,
            }
        }
        "rank" => {
            want(0)?;
            TransformKind::Rank
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unknown transform kind {other:?}"),
            })
        }
    };
    Ok(Transform {
        kind,
        fitted_on: header.fitted_on,
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::TokenMeta;

    fn corpus(rows: &[Vec<f32>]) -> EmbeddingCorpus {
        let meta = (0..rows.len())
            .map(|i| TokenMeta::new("w", 0, i as i64))
            .collect();
        EmbeddingCorpus::from_rows("t", 0, rows, meta).unwrap()
    }

    #[test]
    fn standardize_hand_computed() {
        let c = corpus(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        let out = apply(&fit_standardize(&c).unwrap(), &c).unwrap();
        assert_eq!(out.row(0), &[-1.0, 0.0]);
        assert_eq!(out.row(1), &[1.0, 0.0]);
        assert!(fit_standardize(&corpus(&[vec![1.0]])).is_err());
    }

    #[test]
    fn standardize_single_row_target() {
        let fit = corpus(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        let t = fit_standardize(&fit).unwrap();
        let one = corpus(&[vec![4.0, 9.0]]);
        let out = apply(&t, &one).unwrap();
        assert_eq!(out.row(0), &[2.0, 0.0]);
    }

    #[test]
    fn mean_subtract_cases() {
        let c = corpus(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
        let out = apply(&fit_mean(&c).unwrap(), &c).unwrap();
        assert_eq!(out.row(0), &[-1.0, 0.0]);
        assert_eq!(out.row(1), &[1.0, 0.0]);
        let again = apply(&fit_mean(&out).unwrap(), &out).unwrap();
        for (a, b) in again.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn abtt_collinear_points_collapse() {
        let c = corpus(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]]);
        let t = fit_abtt(&c, 1).unwrap();
        assert_eq!(t.component(0).unwrap(), &[1.0, 0.0]);
        let out = apply(&t, &c).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn abtt_range_checked() {
        let c = corpus(&[vec![0.0, 1.0, 2.0], vec![2.0, 0.0, 1.0], vec![4.0, 1.0, 0.0]]);
        assert!(fit_abtt(&c, 0).is_err());
        assert!(fit_abtt(&c, 3).is_err());
        assert!(fit_abtt(&c, 2).is_ok());
    }

    #[test]
    fn default_components() {
        assert_eq!(default_abtt_components(768), 7);
        assert_eq!(default_abtt_components(300), 3);
        assert_eq!(default_abtt_components(50), 1);
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_transform(&[0.2, 3.1, -5.0]), vec![2.0, 3.0, 1.0]);
        assert_eq!(rank_transform(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(rank_transform(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rank_transform(&[7.0, 7.0, 7.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn spearman_cases() {
        let u = [0.1, -2.0, 3.5, 0.7];
        let v: Vec<f64> = u.iter().map(|x: &f64| x.exp() * 3.0).collect();
        assert!((spearman_similarity(&u, &v).unwrap() - 1.0).abs() < 1e-12);
        let w: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((spearman_similarity(&u, &w).unwrap() + 1.0).abs() < 1e-12);
        let r = spearman_similarity(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(spearman_similarity(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman_similarity(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let t = fit_mean(&corpus(&[vec![1.0, 2.0]])).unwrap();
        assert!(apply(&t, &corpus(&[vec![1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn rank_kind_replaces_rows() {
        let c = corpus(&[vec![0.2, 3.1, -5.0]]);
        let out = apply(&Transform::rank(3), &c).unwrap();
        assert_eq!(out.row(0), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(&[
            vec![0.0, 1.0, 2.0],
            vec![2.0, 0.5, 1.0],
            vec![4.0, 1.0, 0.25],
            vec![1.0, 3.0, 0.0],
        ]);
        for t in [
            fit_standardize(&c).unwrap(),
            fit_mean(&c).unwrap(),
            fit_abtt(&c, 1).unwrap(),
            Transform::rank(3),
        ] {
            let p = dir.path().join(format!("{}.json", t.name()));
            save_transform(&t, &p).unwrap();
            let back = load_transform(&p).unwrap();
            assert_eq!(back.name(), t.name());
            assert_eq!(back.d, 3);
            assert_eq!(back.n_components(), t.n_components());
            let (a, b) = (apply(&t, &c).unwrap(), apply(&back, &c).unwrap());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-5, "{}: {x} vs {y}", t.name());
            }
        }
    }
}
