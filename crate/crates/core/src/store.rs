//! Token-embedding corpora: storage, EMB1 I/O, statistics, pair sampling,
//! filtering and context aggregation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::reduce::{self, add_into};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const EMB1_HEADER_LEN: usize = 24;

/// Sentinel for `sequence_id` / `position` on rows that do not come from a
/// single sequence (aggregated type vectors).
pub const NO_SEQUENCE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub token_type: String,
    pub sequence_id: i64,
    pub position: i64,
    #[serde(default)]
    pub is_special: bool,
}

impl TokenMeta {
    pub fn new(token_type: impl Into<String>, sequence_id: i64, position: i64) -> Self {
        Self {
            token_type: token_type.into(),
            sequence_id,
            position,
            is_special: false,
        }
    }

    pub fn special(mut self) -> Self {
        self.is_special = true;
        self
    }
}

/// An n×d matrix of token representations with per-row metadata.
///
/// Values are stored row-major in single precision. All statistics are
/// accumulated in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    data: Vec<f32>,
    n: usize,
    d: usize,
    meta: Vec<TokenMeta>,
    layer: u32,
    model_id: String,
    dim_labels: Option<Vec<usize>>,
}

impl EmbeddingCorpus {
    pub fn new(
        model_id: impl Into<String>,
        layer: u32,
        d: usize,
        data: Vec<f32>,
        meta: Vec<TokenMeta>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("corpus dimensionality must be >= 1"));
        }
        if data.len() % d != 0 {
            return Err(Error::Consistency(format!(
                "{} values do not form rows of width {d}",
                data.len()
            )));
        }
        let n = data.len() / d;
        if meta.len() != n {
            return Err(Error::Consistency(format!(
                "matrix has {n} rows but metadata has {} entries",
                meta.len()
            )));
        }
        Ok(Self {
            data,
            n,
            d,
            meta,
            layer,
            model_id: model_id.into(),
            dim_labels: None,
        })
    }

    /// Build from nested rows; every row must have the same width.
    pub fn from_rows(
        model_id: impl Into<String>,
        layer: u32,
        rows: &[Vec<f32>],
        meta: Vec<TokenMeta>,
    ) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::Consistency(format!(
                "row {i} has width {} but row 0 has width {d}",
                r.len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(model_id, layer, d, data, meta)
    }

    /// Attach original-dimension labels (for corpora with removed dimensions).
    pub fn with_dim_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.d {
            return Err(Error::Consistency(format!(
                "{} dim labels for {} dimensions",
                labels.len(),
                self.d
            )));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Consistency(
                "dim labels must be strictly increasing".into(),
            ));
        }
        self.dim_labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn dim_labels(&self) -> Option<&[usize]> {
        self.dim_labels.as_deref()
    }

    /// Original dimension index of local column `j`.
    pub fn original_dim(&self, j: usize) -> usize {
        self.dim_labels.as_ref().map_or(j, |l| l[j])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.d)
    }

    /// Identifier used to tag samples and fitted transforms.
    pub fn id(&self) -> String {
        format!(
            "{}/layer{}/n{}xd{}",
            self.model_id, self.layer, self.n, self.d
        )
    }

    /// Rebuild with new data of the same shape, keeping all metadata.
    pub(crate) fn with_data(&self, d: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.n * d);
        Self {
            data,
            n: self.n,
            d,
            meta: self.meta.clone(),
            layer: self.layer,
            model_id: self.model_id.clone(),
            dim_labels: if d == self.d {
                self.dim_labels.clone()
            } else {
                None
            },
        }
    }

    /// Rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            meta.push(self.meta[i].clone());
        }
        Self {
            data,
            n: indices.len(),
            d: self.d,
            meta,
            layer: self.layer,
            model_id: self.model_id.clone(),
            dim_labels: self.dim_labels.clone(),
        }
    }

    /// Check every position against a maximum sequence length.
    /// Rows carrying the aggregation sentinel are ignored.
    pub fn check_positions(&self, max_seq_len: usize) -> Result<()> {
        for (i, m) in self.meta.iter().enumerate() {
            if m.position != NO_SEQUENCE && (m.position < 0 || m.position as usize >= max_seq_len)
            {
                return Err(Error::Consistency(format!(
                    "row {i}: position {} outside 0..{max_seq_len}",
                    m.position
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaHeader {
    model_id: String,
    layer: u32,
    dim_labels: Option<Vec<usize>>,
}

/// Sidecar metadata path for an EMB1 file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

/// Encode a bare EMB1 matrix.
pub fn encode_emb1(n: usize, d: usize, values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(values.len(), n * d);
    let mut buf = Vec::with_capacity(EMB1_HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(EMB1_MAGIC);
    buf.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decode a bare EMB1 matrix, returning `(n, d, values)`.
pub fn decode_emb1(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < EMB1_HEADER_LEN {
        return Err(fmt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != EMB1_MAGIC {
        return Err(fmt(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMB1_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if d == 0 {
        return Err(fmt("dimensionality d = 0".into()));
    }
    let payload = &bytes[EMB1_HEADER_LEN..];
    let expected = n.checked_mul(d).and_then(|x| x.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Consistency(format!(
            "{}: header declares n={n}, d={d} but payload holds {} bytes ({} floats)",
            path.display(),
            payload.len(),
            payload.len() / 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, d, values))
}

/// Write `corpus` as EMB1 plus its `.meta.jsonl` sidecar.
pub fn save_corpus(corpus: &EmbeddingCorpus, path: &Path) -> Result<()> {
    atomic_write(path, &encode_emb1(corpus.n, corpus.d, &corpus.data))?;
    let header = MetaHeader {
        model_id: corpus.model_id.clone(),
        layer: corpus.layer,
        dim_labels: corpus.dim_labels.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for m in &corpus.meta {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    atomic_write(&meta_path(path), &out)
}

pub fn load_corpus(path: &Path) -> Result<EmbeddingCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (n, d, data) = decode_emb1(path, &bytes)?;

    let mpath = meta_path(path);
    let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut header: Option<MetaHeader> = None;
    let mut meta = Vec::with_capacity(n);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&mpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: mpath.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        };
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(parse_err)?);
        } else {
            meta.push(serde_json::from_str(&line).map_err(parse_err)?);
        }
    }
    let header = header.ok_or_else(|| Error::Format {
        path: mpath.clone(),
        msg: "missing header line".into(),
    })?;
    if meta.len() != n {
        return Err(Error::Consistency(format!(
            "{}: matrix has {n} rows but metadata has {} rows",
            path.display(),
            meta.len()
        )));
    }
    let corpus = EmbeddingCorpus::new(header.model_id, header.layer, d, data, meta)?;
    match header.dim_labels {
        Some(l) => corpus.with_dim_labels(l),
        None => Ok(corpus),
    }
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

pub fn compute_stats(corpus: &EmbeddingCorpus) -> Result<CorpusStats> {
    let (n, d) = (corpus.n, corpus.d);
    if n == 0 {
        return Err(Error::domain("cannot compute statistics of an empty corpus"));
    }
    let mut mean = vec![0.0; d];
    for part in reduce::map_chunks(n, reduce::CHUNK, |r| {
        let mut acc = vec![0.0f64; d];
        for i in r {
            for (a, &x) in acc.iter_mut().zip(corpus.row(i)) {
                *a += x as f64;
            }
        }
        acc
    }) {
        add_into(&mut mean, &part);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut variance = vec![0.0; d];
    for part in reduce::map_chunks(n, reduce::CHUNK, |r| {
        let mut acc = vec![0.0f64; d];
        for i in r {
            for ((a, &x), m) in acc.iter_mut().zip(corpus.row(i)).zip(&mean) {
                let c = x as f64 - m;
                *a += c * c;
            }
        }
        acc
    }) {
        add_into(&mut variance, &part);
    }
    variance.iter_mut().for_each(|v| *v /= n as f64);
    let std = variance.iter().map(|v| v.sqrt()).collect();
    Ok(CorpusStats {
        mean,
        std,
        variance,
        count: n,
    })
}

/// A reproducible sample of ordered row-index pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub pairs: Vec<(usize, usize)>,
    pub seed: u64,
    pub source_corpus_id: String,
}

impl PairSample {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, corpus: &EmbeddingCorpus) -> Result<()> {
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            if a == b {
                return Err(Error::domain(format!("pair {k} is a self-pair ({a}, {b})")));
            }
            if a >= corpus.n || b >= corpus.n {
                return Err(Error::domain(format!(
                    "pair {k} = ({a}, {b}) out of range for n = {}",
                    corpus.n
                )));
            }
        }
        Ok(())
    }
}

/// Row indices that samplers and aggregators draw from.
pub fn eligible_rows(corpus: &EmbeddingCorpus, include_special: bool) -> Vec<usize> {
    (0..corpus.n)
        .filter(|&i| include_special || !corpus.meta[i].is_special)
        .collect()
}

/// Sample `count` ordered pairs of distinct non-special rows, i.i.d. and
/// uniform over all such pairs.
pub fn sample_pairs(corpus: &EmbeddingCorpus, count: usize, seed: u64) -> Result<PairSample> {
    sample_pairs_among(corpus, &eligible_rows(corpus, false), count, seed)
}

/// Like [`sample_pairs`], restricted to the given candidate rows.
pub fn sample_pairs_among(
    corpus: &EmbeddingCorpus,
    rows: &[usize],
    count: usize,
    seed: u64,
) -> Result<PairSample> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::domain(format!(
            "pair sampling needs at least 2 eligible rows, found {m}"
        )));
    }
    if count == 0 {
        return Err(Error::domain("pair count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..count)
        .map(|_| {
            let a = rng.random_range(0..m);
            let mut b = rng.random_range(0..m - 1);
            if b >= a {
                b += 1;
            }
            (rows[a], rows[b])
        })
        .collect();
    Ok(PairSample {
        pairs,
        seed,
        source_corpus_id: corpus.id(),
    })
}

/// Rows whose metadata satisfies `pred`, order preserved.
pub fn filter_tokens<P>(corpus: &EmbeddingCorpus, pred: P) -> EmbeddingCorpus
where
    P: Fn(&TokenMeta) -> bool,
{
    let idx: Vec<usize> = (0..corpus.n).filter(|&i| pred(&corpus.meta[i])).collect();
    corpus.select_rows(&idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub corpus: EmbeddingCorpus,
    /// Types dropped for having fewer than `min_contexts` occurrences.
    pub omitted: Vec<String>,
}

/// One mean vector per token type, over the first `max_contexts`
/// non-special occurrences. Types with fewer than `min_contexts`
/// occurrences are omitted. Output rows follow first-occurrence order.
pub fn aggregate_by_type(
    corpus: &EmbeddingCorpus,
    min_contexts: usize,
    max_contexts: usize,
) -> Aggregated {
    aggregate_by_type_with(corpus, min_contexts, max_contexts, false)
}

pub fn aggregate_by_type_with(
    corpus: &EmbeddingCorpus,
    min_contexts: usize,
    max_contexts: usize,
    include_special: bool,
) -> Aggregated {
    let d = corpus.d;
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for i in eligible_rows(corpus, include_special) {
        let t = corpus.meta[i].token_type.as_str();
        groups
            .entry(t)
            .or_insert_with(|| {
                order.push(t);
                Vec::new()
            })
            .push(i);
    }
    let mut data = Vec::new();
    let mut meta = Vec::new();
    let mut omitted = Vec::new();
    for t in order {
        let rows = &groups[t];
        if rows.len() < min_contexts.max(1) {
            omitted.push(t.to_string());
            continue;
        }
        let used = &rows[..rows.len().min(max_contexts.max(1))];
        let mut acc = vec![0.0f64; d];
        for &i in used {
            for (a, &x) in acc.iter_mut().zip(corpus.row(i)) {
                *a += x as f64;
            }
        }
        data.extend(acc.iter().map(|a| (a / used.len() as f64) as f32));
        meta.push(TokenMeta {
            token_type: t.to_string(),
            sequence_id: NO_SEQUENCE,
            position: NO_SEQUENCE,
            is_special: false,
        });
    }
    let n = meta.len();
    Aggregated {
        corpus: EmbeddingCorpus {
            data,
            n,
            d,
            meta,
            layer: corpus.layer,
            model_id: corpus.model_id.clone(),
            dim_labels: corpus.dim_labels.clone(),
        },
        omitted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rows: &[Vec<f32>]) -> EmbeddingCorpus {
        let meta = (0..rows.len())
            .map(|i| TokenMeta::new(format!("t{i}"), 0, i as i64))
            .collect();
        EmbeddingCorpus::from_rows("test", 0, rows, meta).unwrap()
    }

    #[test]
    fn stats_hand_computed() {
        let s = compute_stats(&tiny(&[vec![1.0, 5.0], vec![3.0, 5.0]])).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
        assert_eq!(s.count, 2);

        let s = compute_stats(&tiny(&[vec![-1.0], vec![1.0]])).unwrap();
        assert_eq!(s.mean, vec![0.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn stats_identical_rows_have_zero_std() {
        let rows = vec![vec![0.3, -2.0, 7.5]; 9];
        let s = compute_stats(&tiny(&rows)).unwrap();
        assert!(s.std.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stats_empty_is_domain_error() {
        let c = EmbeddingCorpus::new("e", 0, 3, vec![], vec![]).unwrap();
        assert!(matches!(compute_stats(&c), Err(Error::Domain(_))));
    }

    #[test]
    fn meta_row_mismatch_rejected() {
        let err = EmbeddingCorpus::new("x", 0, 2, vec![1.0; 4], vec![TokenMeta::new("a", 0, 0)]);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn dim_labels_must_increase() {
        let c = tiny(&[vec![1.0, 2.0]]);
        assert!(c.clone().with_dim_labels(vec![3, 1]).is_err());
        assert!(c.clone().with_dim_labels(vec![1]).is_err());
        assert_eq!(c.with_dim_labels(vec![1, 3]).unwrap().original_dim(1), 3);
    }

    #[test]
    fn pairs_deterministic_and_legal() {
        let c = tiny(&[vec![1.0], vec![2.0]]);
        let s = sample_pairs(&c, 10, 3).unwrap();
        assert_eq!(s, sample_pairs(&c, 10, 3).unwrap());
        assert!(s.pairs.iter().all(|&p| p == (0, 1) || p == (1, 0)));
        assert!(matches!(
            sample_pairs(&tiny(&[vec![1.0]]), 5, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pairs_skip_special_tokens() {
        let meta = vec![
            TokenMeta::new("[CLS]", 0, 0).special(),
            TokenMeta::new("a", 0, 1),
            TokenMeta::new("b", 0, 2),
        ];
        let c = EmbeddingCorpus::new("m", 0, 1, vec![1.0, 2.0, 3.0], meta).unwrap();
        let s = sample_pairs(&c, 200, 1).unwrap();
        assert!(s.pairs.iter().all(|&(a, b)| a != 0 && b != 0));
        let s = sample_pairs_among(&c, &eligible_rows(&c, true), 200, 1).unwrap();
        assert!(s.pairs.iter().any(|&(a, b)| a == 0 || b == 0));
    }

    #[test]
    fn aggregate_means_and_threshold() {
        let meta = vec![
            TokenMeta::new("cat", 0, 0),
            TokenMeta::new("dog", 0, 1),
            TokenMeta::new("cat", 1, 0),
        ];
        let c = EmbeddingCorpus::new("m", 3, 2, vec![1.0, 0.0, 9.0, 9.0, 0.0, 1.0], meta).unwrap();
        let agg = aggregate_by_type(&c, 1, 500);
        assert_eq!(agg.corpus.n(), 2);
        assert_eq!(agg.corpus.row(0), &[0.5, 0.5]);
        assert_eq!(agg.corpus.meta()[0].sequence_id, NO_SEQUENCE);
        assert_eq!(agg.corpus.layer(), 3);

        let agg = aggregate_by_type(&c, 2, 500);
        assert_eq!(agg.corpus.n(), 1);
        assert_eq!(agg.omitted, vec!["dog".to_string()]);

        // max_contexts keeps the first occurrences
        let agg = aggregate_by_type(&c, 1, 1);
        assert_eq!(agg.corpus.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn filter_position_zero() {
        let meta = (0..5).map(|i| TokenMeta::new(".", 0, i)).collect();
        let c = EmbeddingCorpus::new("m", 0, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0], meta).unwrap();
        let f = filter_tokens(&c, |m| m.position == 0);
        assert_eq!(f.n(), 1);
        assert_eq!(filter_tokens(&c, |m| m.token_type == ".").n(), 5);
        assert!(filter_tokens(&c, |_| false).is_empty());
    }

    #[test]
    fn positions_checked_against_max_len() {
        let meta = vec![TokenMeta::new("a", 0, 127), TokenMeta::new("b", 1, 128)];
        let c = EmbeddingCorpus::new("m", 0, 1, vec![0.0, 1.0], meta).unwrap();
        assert!(c.check_positions(129).is_ok());
        assert!(c.check_positions(128).is_err());
    }
}
