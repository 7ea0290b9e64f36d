//! Behavioral influence of single dimensions: mean KL divergence between a
//! model's reference prediction distributions and the distributions
//! produced with one dimension ablated, set against cosine contribution.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::Serialize;

use crate::decomp::ContributionReport;
use crate::error::{Error, Result};
use crate::eval::rank_correlation;
use crate::fsutil::atomic_write;

pub const DST1_MAGIC: &[u8; 4] = b"DST1";
/// Full-vocabulary records.
pub const DST1_VERSION_FULL: u32 = 1;
/// Truncated records: per-record support indices plus a tail bucket.
pub const DST1_VERSION_TRUNCATED: u32 = 2;

/// Floor applied to `q` entries that are zero where `p` is not.
pub const KL_FLOOR: f64 = 1e-12;

const SUM_TOL: f64 = 1e-4;

/// `D_KL(p || q)` in nats.
///
/// `0 ln(0/q)` is taken as 0. If some `q_i = 0` where `p_i > 0`, every
/// entry of `q` is floored at [`KL_FLOOR`] and `q` renormalized; softmax
/// outputs are strictly positive, so this only matters for truncated data.
pub fn kl_divergence<T: Copy + Into<f64>>(p: &[T], q: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::domain(format!(
            "KL divergence of distributions with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let p: Vec<f64> = p.iter().map(|&x| x.into()).collect();
    let mut q: Vec<f64> = q.iter().map(|&x| x.into()).collect();
    if let Some(x) = p.iter().chain(&q).find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::domain(format!("invalid probability entry {x}")));
    }
    if p.iter().zip(&q).any(|(&pi, &qi)| pi > 0.0 && qi == 0.0) {
        q.iter_mut().for_each(|x| *x = x.max(KL_FLOOR));
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= s);
    }
    Ok(p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// A reference distribution and the same prediction with dimension `dim`
/// of layer `layer` ablated.
///
/// With `support` set, both vectors hold the probabilities of the listed
/// vocabulary ids followed by one tail bucket with the remaining mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPair {
    pub reference: Vec<f32>,
    pub ablated: Vec<f32>,
    pub layer: u32,
    pub dim: u32,
    pub token_index: u64,
    pub support: Option<Vec<u32>>,
}

fn check_distribution(name: &str, p: &[f32]) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::domain(format!("{name} has invalid entry {x}")));
    }
    let s: f64 = p.iter().map(|&x| x as f64).sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

impl DistributionPair {
    pub fn new(
        reference: Vec<f32>,
        ablated: Vec<f32>,
        layer: u32,
        dim: u32,
        token_index: u64,
    ) -> Result<Self> {
        if reference.len() != ablated.len() {
            return Err(Error::domain("reference and ablated lengths differ"));
        }
        check_distribution("reference", &reference)?;
        check_distribution("ablated", &ablated)?;
        Ok(Self {
            reference,
            ablated,
            layer,
            dim,
            token_index,
            support: None,
        })
    }

    /// Truncated pair: `support.len() + 1` entries per vector, last is the tail.
    pub fn truncated(
        support: Vec<u32>,
        reference: Vec<f32>,
        ablated: Vec<f32>,
        layer: u32,
        dim: u32,
        token_index: u64,
    ) -> Result<Self> {
        if reference.len() != support.len() + 1 {
            return Err(Error::domain(format!(
                "truncated pair with {} support ids needs {} entries, got {}",
                support.len(),
                support.len() + 1,
                reference.len()
            )));
        }
        let mut pair = Self::new(reference, ablated, layer, dim, token_index)?;
        pair.support = Some(support);
        Ok(pair)
    }

    pub fn kl(&self) -> Result<f64> {
        kl_divergence(&self.reference, &self.ablated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceReport {
    pub layer: u32,
    /// Mean KL divergence per ablated dimension.
    pub per_dim_influence: BTreeMap<u32, f64>,
    /// Influence normalized over the dimensions present; absent when every
    /// influence is zero.
    pub per_dim_share: Option<BTreeMap<u32, f64>>,
    pub n_distributions: BTreeMap<u32, usize>,
}

/// Streaming per-(layer, dim) KL accumulator.
#[derive(Debug, Default)]
pub struct InfluenceAccumulator {
    sums: BTreeMap<(u32, u32), (f64, usize)>,
}

impl InfluenceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pair: &DistributionPair) -> Result<()> {
        let kl = pair.kl()?;
        let e = self.sums.entry((pair.layer, pair.dim)).or_insert((0.0, 0));
        e.0 += kl;
        e.1 += 1;
        Ok(())
    }

    /// One report per layer, shares normalized within the layer.
    pub fn finish(self) -> BTreeMap<u32, InfluenceReport> {
        let mut out: BTreeMap<u32, InfluenceReport> = BTreeMap::new();
        for ((layer, dim), (sum, count)) in self.sums {
            let r = out.entry(layer).or_insert_with(|| InfluenceReport {
                layer,
                per_dim_influence: BTreeMap::new(),
                per_dim_share: None,
                n_distributions: BTreeMap::new(),
            });
            r.per_dim_influence.insert(dim, sum / count as f64);
            r.n_distributions.insert(dim, count);
        }
        for r in out.values_mut() {
            let total: f64 = r.per_dim_influence.values().sum();
            if total > 0.0 {
                r.per_dim_share = Some(
                    r.per_dim_influence
                        .iter()
                        .map(|(&d, &v)| (d, v / total))
                        .collect(),
                );
            }
        }
        out
    }
}

/// Per-layer influence reports for a collection of pairs.
pub fn influence_by_layer<'a, I>(pairs: I) -> Result<BTreeMap<u32, InfluenceReport>>
where
    I: IntoIterator<Item = &'a DistributionPair>,
{
    let mut acc = InfluenceAccumulator::new();
    for p in pairs {
        acc.add(p)?;
    }
    if acc.sums.is_empty() {
        return Err(Error::domain("no distribution pairs"));
    }
    Ok(acc.finish())
}

/// Influence report for pairs that all belong to one layer.
pub fn mean_influence<'a, I>(pairs: I) -> Result<InfluenceReport>
where
    I: IntoIterator<Item = &'a DistributionPair>,
{
    let mut by_layer = influence_by_layer(pairs)?;
    if by_layer.len() > 1 {
        return Err(Error::domain(format!(
            "pairs span {} layers; use influence_by_layer",
            by_layer.len()
        )));
    }
    Ok(by_layer.pop_first().unwrap().1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MismatchRow {
    pub dim: u32,
    pub cc_share: f64,
    pub influence_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MismatchTable {
    pub layer: u32,
    pub rows: Vec<MismatchRow>,
    /// Rank correlation of the two share columns; absent when either column
    /// is constant.
    pub spearman_rho: Option<f64>,
    /// Dimension with the largest cosine share and its influence share.
    pub top_cc_dim: u32,
    pub top_cc_influence_share: f64,
}

/// Pair each dimension's cosine-contribution share with its behavioral
/// influence share. Both must cover the same dimensions `0..d`.
pub fn influence_vs_cc(report: &InfluenceReport, cc: &ContributionReport) -> Result<MismatchTable> {
    let d = cc.per_dim_cc.len();
    let dims: Vec<u32> = report.per_dim_influence.keys().copied().collect();
    if dims.len() != d || dims.iter().enumerate().any(|(i, &x)| x as usize != i) {
        return Err(Error::domain(format!(
            "influence covers {} dimensions, cosine report covers 0..{d}",
            dims.len()
        )));
    }
    let cc_shares = cc
        .shares
        .as_ref()
        .ok_or_else(|| Error::domain("cosine shares undefined at zero anisotropy"))?;
    let inf_shares = report
        .per_dim_share
        .as_ref()
        .ok_or_else(|| Error::domain("influence shares undefined: all influences are zero"))?;
    let rows: Vec<MismatchRow> = dims
        .iter()
        .map(|&dim| MismatchRow {
            dim,
            cc_share: cc_shares[dim as usize],
            influence_share: inf_shares[&dim],
        })
        .collect();
    let a: Vec<f64> = rows.iter().map(|r| r.cc_share).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.influence_share).collect();
    let spearman_rho = if d >= 3 { rank_correlation(&a, &b).ok() } else { None };
    let top = cc.ranking[0];
    Ok(MismatchTable {
        layer: report.layer,
        spearman_rho,
        top_cc_dim: top as u32,
        top_cc_influence_share: rows[top].influence_share,
        rows,
    })
}

// DST1 files

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Serialize pairs as DST1. Full and truncated pairs cannot be mixed.
pub fn encode_dst1(vocab: u64, pairs: &[DistributionPair]) -> Result<Vec<u8>> {
    let truncated = pairs.first().is_some_and(|p| p.support.is_some());
    if pairs.iter().any(|p| p.support.is_some() != truncated) {
        return Err(Error::domain("cannot mix full and truncated records"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(DST1_MAGIC);
    let version = if truncated {
        DST1_VERSION_TRUNCATED
    } else {
        DST1_VERSION_FULL
    };
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    buf.extend_from_slice(&vocab.to_le_bytes());
    for p in pairs {
        buf.extend_from_slice(&p.layer.to_le_bytes());
        buf.extend_from_slice(&p.dim.to_le_bytes());
        buf.extend_from_slice(&p.token_index.to_le_bytes());
        match &p.support {
            Some(s) => {
                if s.iter().any(|&i| i as u64 >= vocab) {
                    return Err(Error::domain("support index outside the vocabulary"));
                }
                buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
                for i in s {
                    buf.extend_from_slice(&i.to_le_bytes());
                }
            }
            None => {
                if p.reference.len() as u64 != vocab {
                    return Err(Error::domain(format!(
                        "record has {} entries, vocabulary is {vocab}",
                        p.reference.len()
                    )));
                }
            }
        }
        for x in p.reference.iter().chain(&p.ablated) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_distributions(path: &Path, vocab: u64, pairs: &[DistributionPair]) -> Result<()> {
    atomic_write(path, &encode_dst1(vocab, pairs)?)
}

/// Streaming DST1 reader.
pub struct DstReader<R> {
    inner: R,
    path: std::path::PathBuf,
    pub version: u32,
    pub count: u64,
    pub vocab: u64,
    read: u64,
}

impl DstReader<BufReader<fs::File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f), path)
    }
}

impl<R: Read> DstReader<R> {
    pub fn new(mut inner: R, path: &Path) -> Result<Self> {
        let mut head = [0u8; 24];
        inner
            .read_exact(&mut head)
            .map_err(|_| fmt_err(path, "file shorter than the DST1 header"))?;
        if &head[0..4] != DST1_MAGIC {
            return Err(fmt_err(path, format!("bad magic {:?}", &head[0..4])));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != DST1_VERSION_FULL && version != DST1_VERSION_TRUNCATED {
            return Err(fmt_err(path, format!("unsupported version {version}")));
        }
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            version,
            count: u64::from_le_bytes(head[8..16].try_into().unwrap()),
            vocab: u64::from_le_bytes(head[16..24].try_into().unwrap()),
            read: 0,
        })
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|_| {
            Error::Consistency(format!(
                "{}: header declares {} records but record {} is truncated",
                self.path.display(),
                self.count,
                self.read
            ))
        })?;
        Ok(b)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn next_record(&mut self) -> Result<DistributionPair> {
        let head = self.bytes(16)?;
        let layer = u32::from_le_bytes(head[0..4].try_into().unwrap());
        let dim = u32::from_le_bytes(head[4..8].try_into().unwrap());
        let token_index = u64::from_le_bytes(head[8..16].try_into().unwrap());
        let rec = self.read;
        let pair = if self.version == DST1_VERSION_TRUNCATED {
            let k = u64::from_le_bytes(self.bytes(8)?.try_into().unwrap());
            if k > self.vocab {
                return Err(fmt_err(&self.path, format!("record {rec}: support {k} > vocab")));
            }
            let support: Vec<u32> = self
                .bytes(k as usize * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let reference = self.floats(k as usize + 1)?;
            let ablated = self.floats(k as usize + 1)?;
            DistributionPair::truncated(support, reference, ablated, layer, dim, token_index)
        } else {
            let v = self.vocab as usize;
            let reference = self.floats(v)?;
            let ablated = self.floats(v)?;
            DistributionPair::new(reference, ablated, layer, dim, token_index)
        };
        pair.map_err(|e| Error::Consistency(format!("{}: record {rec}: {e}", self.path.display())))
    }
}

impl<R: Read> Iterator for DstReader<R> {
    type Item = Result<DistributionPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.count {
            return None;
        }
        let r = self.next_record();
        self.read += 1;
        if r.is_err() {
            self.read = self.count;
        }
        Some(r)
    }
}

pub fn read_distributions(path: &Path) -> Result<Vec<DistributionPair>> {
    DstReader::open(path)?.collect()
}
