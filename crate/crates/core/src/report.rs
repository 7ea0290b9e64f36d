//! Subcommand runners.
//!
//! Each run loads the configured layers, writes its tables into a staging
//! area under the output directory and moves them into place together with
//! `manifest.json` only once every artifact has been produced.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::json;

use crate::behavior::{influence_vs_cc, DstReader, InfluenceAccumulator};
use crate::config::{AggregationOrder, AnalysisConfig, FitOn};
use crate::decomp::{
    category_distribution, conditional_anisotropy, contribution_rows,
    default_category, highest_variance_dim, mean_cc, rank_descending, ContributionReport,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, load_dataset_with, mean_rho, EvalResult, SimilarityDataset, Strategy};
use crate::fsutil::Staging;
use crate::geometry::{run_suite, GeometryConfig};
use crate::informativity::{r_squared_removed, Criterion, Measure, RemovalSpec};
use crate::postprocess::{
    apply, default_abtt_components, fit_abtt, fit_mean, fit_standardize, payload_path,
    save_transform, Transform,
};
use crate::store::{
    aggregate_by_type_with, compute_stats, eligible_rows, filter_tokens, load_corpus, meta_path,
    sample_pairs_among, save_corpus, EmbeddingCorpus, PairSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Stats,
    Contributions,
    Informativity,
    Postprocess,
    AblationReport,
    Correlates,
    Geometry,
    Eval,
    Report,
}

impl Subcommand {
    /// Everything `report` runs, in order.
    pub const ALL: [Subcommand; 8] = [
        Subcommand::Stats,
        Subcommand::Contributions,
        Subcommand::Informativity,
        Subcommand::Postprocess,
        Subcommand::AblationReport,
        Subcommand::Correlates,
        Subcommand::Geometry,
        Subcommand::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Stats => "stats",
            Subcommand::Contributions => "contributions",
            Subcommand::Informativity => "informativity",
            Subcommand::Postprocess => "postprocess",
            Subcommand::AblationReport => "ablation-report",
            Subcommand::Correlates => "correlates",
            Subcommand::Geometry => "geometry",
            Subcommand::Eval => "eval",
            Subcommand::Report => "report",
        }
    }

    /// Why the configuration cannot support this subcommand, if it cannot.
    fn missing_input(self, cfg: &AnalysisConfig) -> Option<(&'static str, &'static str)> {
        match self {
            Subcommand::AblationReport if cfg.distributions.is_none() => {
                Some(("distributions", "required for ablation-report"))
            }
            Subcommand::Eval if cfg.datasets.is_empty() => {
                Some(("datasets", "at least one dataset is required for eval"))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub subcommand: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub subcommand: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<String>,
    pub skipped: Vec<Skipped>,
}

struct Ctx<'a> {
    cfg: &'a AnalysisConfig,
    /// Sorted by layer; special tokens already dropped unless included.
    layers: Vec<EmbeddingCorpus>,
}

impl<'a> Ctx<'a> {
    fn load(cfg: &'a AnalysisConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            let path = cfg.resolve(&l.path);
            let c = load_corpus(&path)?;
            if c.layer() != l.layer {
                return Err(Error::Consistency(format!(
                    "{}: file holds layer {} but the config lists it as layer {}",
                    path.display(),
                    c.layer(),
                    l.layer
                )));
            }
            if let Some(max) = cfg.max_seq_len {
                c.check_positions(max)?;
            }
            let c = if cfg.include_special {
                c
            } else {
                filter_tokens(&c, |m| !m.is_special)
            };
            layers.push(c);
        }
        layers.sort_by_key(|c| c.layer());
        Ok(Self { cfg, layers })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed()
    }

    /// The same seed for every layer, so equal-length layers share pairs.
    fn sample(&self, c: &EmbeddingCorpus) -> Result<PairSample> {
        let rows = eligible_rows(c, self.cfg.include_special);
        sample_pairs_among(c, &rows, self.cfg.pairs, self.seed())
    }

    fn abtt_components(&self, d: usize) -> usize {
        self.cfg.abtt_components.unwrap_or_else(|| default_abtt_components(d))
    }
}

/// Validate `cfg`, run `sub`, and commit its artifacts plus a manifest.
pub fn run(sub: Subcommand, cfg: &AnalysisConfig) -> Result<Manifest> {
    cfg.validate()?;
    if let Some((field, msg)) = sub.missing_input(cfg) {
        return Err(Error::config(field, msg));
    }
    let ctx = Ctx::load(cfg)?;
    let mut st = Staging::new(&cfg.out_dir())?;
    let mut skipped = Vec::new();
    let subs: Vec<Subcommand> = if sub == Subcommand::Report {
        Subcommand::ALL.to_vec()
    } else {
        vec![sub]
    };
    for s in subs {
        if let Some((field, msg)) = s.missing_input(cfg) {
            skipped.push(Skipped {
                subcommand: s.as_str(),
                reason: format!("{field}: {msg}"),
            });
            continue;
        }
        run_one(s, &ctx, &mut st)?;
    }
    let manifest = Manifest {
        subcommand: sub.as_str(),
        seed: cfg.seed(),
        config_hash: cfg.hash(),
        artifacts: st.artifacts(),
        skipped,
    };
    st.write("manifest.json", &json_bytes(&manifest)?)?;
    st.commit()?;
    Ok(manifest)
}

fn run_one(sub: Subcommand, ctx: &Ctx, st: &mut Staging) -> Result<()> {
    match sub {
        Subcommand::Stats => stats(ctx, st),
        Subcommand::Contributions => contributions(ctx, st),
        Subcommand::Informativity => informativity(ctx, st),
        Subcommand::Postprocess => postprocess(ctx, st),
        Subcommand::AblationReport => ablation(ctx, st),
        Subcommand::Correlates => correlates(ctx, st),
        Subcommand::Geometry => geometry(ctx, st),
        Subcommand::Eval => eval(ctx, st),
        Subcommand::Report => unreachable!("report expands to its parts"),
    }
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Csv(csv::Error::from(e.into_error())))
}

fn json_bytes<S: Serialize + ?Sized>(v: &S) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";")
}

// ---- stats ----

#[derive(Serialize)]
struct StatsRow {
    dim: usize,
    mean: f64,
    std: f64,
    variance: f64,
}

#[derive(Serialize)]
struct StatsSummaryRow<'a> {
    model: &'a str,
    layer: u32,
    n: usize,
    d: usize,
    highest_variance_dim: usize,
    max_variance: f64,
    max_abs_mean: f64,
}

fn stats(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let mut summary = Vec::new();
    for c in &ctx.layers {
        let s = compute_stats(c)?;
        let rows: Vec<StatsRow> = (0..c.d())
            .map(|j| StatsRow {
                dim: c.original_dim(j),
                mean: s.mean[j],
                std: s.std[j],
                variance: s.variance[j],
            })
            .collect();
        st.write(&format!("stats_layer{}.csv", c.layer()), &csv_bytes(&rows)?)?;
        let hv = highest_variance_dim(&s);
        summary.push(StatsSummaryRow {
            model: c.model_id(),
            layer: c.layer(),
            n: c.n(),
            d: c.d(),
            highest_variance_dim: c.original_dim(hv),
            max_variance: s.variance[hv],
            max_abs_mean: s.mean.iter().fold(0.0, |m, x| m.max(x.abs())),
        });
    }
    st.write("stats_summary.csv", &csv_bytes(&summary)?)
}

// ---- contributions ----

#[derive(Serialize)]
struct ContributionSummaryRow<'a> {
    model: &'a str,
    layer: u32,
    n_pairs: usize,
    seed: u64,
    anisotropy: f64,
    top1_dim: Option<usize>,
    top1_share: Option<f64>,
    top2_dim: Option<usize>,
    top2_share: Option<f64>,
    top3_dim: Option<usize>,
    top3_share: Option<f64>,
    /// One of the two layers with the highest anisotropy.
    highlighted: bool,
}

fn top_entry(c: &EmbeddingCorpus, r: &ContributionReport, i: usize) -> (Option<usize>, Option<f64>) {
    match r.ranking.get(i) {
        Some(&j) => (Some(c.original_dim(j)), r.share(j)),
        None => (None, None),
    }
}

fn contributions(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let mut summary = Vec::new();
    for c in &ctx.layers {
        let sample = ctx.sample(c)?;
        let report = mean_cc(c, &sample)?;
        let stats = compute_stats(c)?;
        st.write(
            &format!("contributions_layer{}.csv", c.layer()),
            &csv_bytes(&contribution_rows(c, &stats, &report))?,
        )?;
        let (t1, s1) = top_entry(c, &report, 0);
        let (t2, s2) = top_entry(c, &report, 1);
        let (t3, s3) = top_entry(c, &report, 2);
        summary.push(ContributionSummaryRow {
            model: c.model_id(),
            layer: c.layer(),
            n_pairs: sample.len(),
            seed: sample.seed,
            anisotropy: report.anisotropy,
            top1_dim: t1,
            top1_share: s1,
            top2_dim: t2,
            top2_share: s2,
            top3_dim: t3,
            top3_share: s3,
            highlighted: false,
        });
    }
    let aniso: Vec<f64> = summary.iter().map(|r| r.anisotropy).collect();
    for &i in rank_descending(&aniso).iter().take(2) {
        summary[i].highlighted = true;
    }
    st.write("contributions_summary.csv", &csv_bytes(&summary)?)
}

// ---- informativity ----

#[derive(Serialize)]
struct InformativityRow<'a> {
    model: &'a str,
    layer: u32,
    measure: &'static str,
    criterion: &'static str,
    k: usize,
    removed_dims: String,
    r_squared: f64,
    n_pairs: usize,
    seed: u64,
}

fn informativity(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let mut rows = Vec::new();
    for c in &ctx.layers {
        let sample = ctx.sample(c)?;
        let by_cc = mean_cc(c, &sample)?.ranking;
        let by_var = rank_descending(&compute_stats(c)?.variance);
        for &k in &ctx.cfg.k_values {
            if k >= c.d() {
                return Err(Error::domain(format!(
                    "k = {k} must be below d = {} (layer {})",
                    c.d(),
                    c.layer()
                )));
            }
            for measure in [Measure::Cosine, Measure::Euclidean] {
                let criterion = measure.default_criterion();
                let ranking = match criterion {
                    Criterion::CosineContribution => &by_cc,
                    Criterion::Variance => &by_var,
                };
                let spec = RemovalSpec::explicit(criterion, ranking[..k].to_vec(), c.d())?;
                let r = r_squared_removed(c, &sample, &spec, measure)?;
                rows.push(InformativityRow {
                    model: c.model_id(),
                    layer: c.layer(),
                    measure: measure.as_str(),
                    criterion: criterion.as_str(),
                    k,
                    removed_dims: join_dims(&r.removed_dims),
                    r_squared: r.r_squared,
                    n_pairs: r.n_pairs,
                    seed: sample.seed,
                });
            }
        }
    }
    st.write("informativity.csv", &csv_bytes(&rows)?)
}

// ---- postprocess ----

#[derive(Serialize)]
struct PostprocessRow {
    model: String,
    layer: u32,
    transform: &'static str,
    components: usize,
    anisotropy: f64,
    top1_dim: Option<usize>,
    top1_share: Option<f64>,
    r_squared_k1: f64,
    max_abs_mean: f64,
    max_variance: f64,
}

fn space_summary(
    c: &EmbeddingCorpus,
    sample: &PairSample,
    transform: &'static str,
    components: usize,
) -> Result<PostprocessRow> {
    let report = mean_cc(c, sample)?;
    let stats = compute_stats(c)?;
    let (t1, s1) = top_entry(c, &report, 0);
    let r2 = if c.d() > 1 {
        let spec = RemovalSpec::explicit(
            Criterion::CosineContribution,
            report.ranking[..1].to_vec(),
            c.d(),
        )?;
        r_squared_removed(c, sample, &spec, Measure::Cosine)?.r_squared
    } else {
        f64::NAN
    };
    Ok(PostprocessRow {
        model: c.model_id().to_string(),
        layer: c.layer(),
        transform,
        components,
        anisotropy: report.anisotropy,
        top1_dim: t1,
        top1_share: s1,
        r_squared_k1: r2,
        max_abs_mean: stats.mean.iter().fold(0.0, |m, x| m.max(x.abs())),
        max_variance: stats.variance.iter().cloned().fold(0.0, f64::max),
    })
}

fn fit_all(ctx: &Ctx, c: &EmbeddingCorpus) -> Result<Vec<Transform>> {
    Ok(vec![
        fit_standardize(c)?,
        fit_mean(c)?,
        fit_abtt(c, ctx.abtt_components(c.d()))?,
    ])
}

fn postprocess(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let mut rows = Vec::new();
    for c in &ctx.layers {
        let sample = ctx.sample(c)?;
        rows.push(space_summary(c, &sample, "raw", 0)?);
        for t in fit_all(ctx, c)? {
            let name = format!("transform_layer{}_{}.json", c.layer(), t.name());
            let path = st.path(&name);
            st.path(&payload_name(&name));
            save_transform(&t, &path)?;
            let out = apply(&t, c)?;
            if ctx.cfg.write_transformed {
                let emb = format!("transformed_layer{}_{}.emb", c.layer(), t.name());
                let p = st.path(&emb);
                st.path(&meta_name(&emb));
                save_corpus(&out, &p)?;
            }
            rows.push(space_summary(&out, &sample, t.name(), t.n_components())?);
        }
    }
    st.write("postprocess_summary.csv", &csv_bytes(&rows)?)
}

fn payload_name(name: &str) -> String {
    payload_path(std::path::Path::new(name))
        .to_string_lossy()
        .into_owned()
}

fn meta_name(name: &str) -> String {
    meta_path(std::path::Path::new(name))
        .to_string_lossy()
        .into_owned()
}

// ---- ablation ----

#[derive(Serialize)]
struct AblationRow {
    dim: u32,
    influence: f64,
    influence_share: Option<f64>,
    cc_share: Option<f64>,
    n_distributions: usize,
}

fn ablation(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let path = ctx.cfg.resolve(ctx.cfg.distributions.as_ref().expect("checked"));
    let mut acc = InfluenceAccumulator::new();
    let mut n = 0usize;
    for pair in DstReader::open(&path)? {
        acc.add(&pair?)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain(format!("{}: no distribution pairs", path.display())));
    }
    let mut layers = BTreeMap::new();
    for (layer, report) in acc.finish() {
        let corpus = ctx.layers.iter().find(|c| c.layer() == layer);
        let cc = match corpus {
            Some(c) => Some(mean_cc(c, &ctx.sample(c)?)?),
            None => None,
        };
        let rows: Vec<AblationRow> = report
            .per_dim_influence
            .iter()
            .map(|(&dim, &inf)| AblationRow {
                dim,
                influence: inf,
                influence_share: report.per_dim_share.as_ref().map(|s| s[&dim]),
                cc_share: cc.as_ref().and_then(|r| {
                    let j = dim as usize;
                    r.shares.as_ref().and_then(|s| s.get(j).copied())
                }),
                n_distributions: report.n_distributions[&dim],
            })
            .collect();
        st.write(&format!("ablation_layer{layer}.csv"), &csv_bytes(&rows)?)?;
        let (mismatch, note) = match &cc {
            None => (None, Some(format!("no corpus configured for layer {layer}"))),
            Some(cc) => match influence_vs_cc(&report, cc) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            },
        };
        layers.insert(
            layer.to_string(),
            json!({ "influence": report, "mismatch": mismatch, "mismatch_note": note }),
        );
    }
    st.write(
        "ablation.json",
        &json_bytes(&json!({ "units": "nats", "n_pairs": n, "layers": layers }))?,
    )
}

// ---- correlates ----

#[derive(Serialize)]
struct ConditionalRow<'a> {
    model: &'a str,
    layer: u32,
    predicate: &'a str,
    n_rows: usize,
    anisotropy: Option<f64>,
    n_pairs: usize,
    seed: u64,
}

fn distribution_json(c: &EmbeddingCorpus, dim: usize, bins: usize) -> Result<serde_json::Value> {
    let dist = category_distribution(c, dim, default_category, bins)?;
    let cats: BTreeMap<&str, serde_json::Value> = dist
        .categories
        .iter()
        .map(|(k, s)| {
            (
                k.as_str(),
                json!({
                    "count": s.count,
                    "mean": s.mean,
                    "std": s.std,
                    "edges": s.histogram.edges,
                    "counts": s.histogram.counts,
                }),
            )
        })
        .collect();
    Ok(json!({ "dim": dist.original_dim, "categories": cats }))
}

fn correlates(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let mut rows = Vec::new();
    let mut per_layer = BTreeMap::new();
    for c in &ctx.layers {
        for p in &ctx.cfg.predicates {
            let n_rows = c
                .meta()
                .iter()
                .filter(|m| !m.is_special && p.predicate.matches(m))
                .count();
            let a = if n_rows >= 2 {
                Some(conditional_anisotropy(
                    c,
                    |m| p.predicate.matches(m),
                    ctx.cfg.pairs,
                    ctx.seed(),
                )?)
            } else {
                None
            };
            rows.push(ConditionalRow {
                model: c.model_id(),
                layer: c.layer(),
                predicate: &p.name,
                n_rows,
                anisotropy: a,
                n_pairs: if a.is_some() { ctx.cfg.pairs } else { 0 },
                seed: ctx.seed(),
            });
        }
        let report = mean_cc(c, &ctx.sample(c)?)?;
        let top = report.ranking[0];
        let hv = highest_variance_dim(&compute_stats(c)?);
        let bins = ctx.cfg.histogram_bins;
        let mut dists = vec![distribution_json(c, top, bins)?];
        if hv != top {
            dists.push(distribution_json(c, hv, bins)?);
        }
        per_layer.insert(
            c.layer().to_string(),
            json!({
                "top_cc_dim": c.original_dim(top),
                "highest_variance_dim": c.original_dim(hv),
                "distributions": dists,
            }),
        );
    }
    st.write("conditional_anisotropy.csv", &csv_bytes(&rows)?)?;
    st.write(
        "correlates.json",
        &json_bytes(&json!({ "categorization": "pos0/period/other", "layers": per_layer }))?,
    )
}

// ---- geometry ----

#[derive(Serialize)]
struct GeometryRow<'a> {
    model: &'a str,
    layer: u32,
    space: &'static str,
    removed_dims: String,
    anisotropy: f64,
    self_similarity: f64,
    self_similarity_adjusted: f64,
    intra_sentence: f64,
    intra_sentence_adjusted: f64,
}

fn geometry(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let gcfg = GeometryConfig {
        k: ctx.cfg.geometry_k,
        pairs: ctx.cfg.pairs,
        seed: ctx.seed(),
        min_occurrences: ctx.cfg.min_occurrences,
        pair_budget: ctx.cfg.pair_budget,
        include_special: ctx.cfg.include_special,
    };
    let suite = run_suite(&ctx.layers, &gcfg)?;
    let mut rows = Vec::new();
    for c in &ctx.layers {
        let lg = &suite.per_layer[&c.layer()];
        for (space, m, dims) in [
            ("full", &lg.full, String::new()),
            ("removed", &lg.removed, join_dims(&lg.removed_dims)),
        ] {
            rows.push(GeometryRow {
                model: c.model_id(),
                layer: c.layer(),
                space,
                removed_dims: dims,
                anisotropy: m.anisotropy,
                self_similarity: m.mean_self_similarity,
                self_similarity_adjusted: m.mean_self_similarity_adjusted,
                intra_sentence: m.mean_intra_sentence_similarity,
                intra_sentence_adjusted: m.mean_intra_sentence_similarity_adjusted,
            });
        }
    }
    st.write("geometry.csv", &csv_bytes(&rows)?)?;
    st.write(
        "geometry.json",
        &json_bytes(&json!({ "seed": ctx.seed(), "suite": suite }))?,
    )
}

// ---- eval ----

#[derive(Serialize)]
struct EvalRow<'a> {
    dataset: &'a str,
    layer: u32,
    strategy: &'static str,
    rho: f64,
    n_used: usize,
    n_skipped: usize,
}

fn fit_for(ctx: &Ctx, s: Strategy, c: &EmbeddingCorpus) -> Result<Option<Transform>> {
    Ok(match s {
        Strategy::Standardize => Some(fit_standardize(c)?),
        Strategy::MeanOnly => Some(fit_mean(c)?),
        Strategy::Abtt => Some(fit_abtt(c, ctx.abtt_components(c.d()))?),
        Strategy::Raw | Strategy::Rank => None,
    })
}

fn eval_layer(
    ctx: &Ctx,
    c: &EmbeddingCorpus,
    datasets: &[SimilarityDataset],
) -> Result<(Vec<EvalResult>, usize)> {
    let e = &ctx.cfg.eval;
    let aggregate =
        |x: &EmbeddingCorpus| aggregate_by_type_with(x, e.min_contexts, e.max_contexts, ctx.cfg.include_special);
    let agg = aggregate(c);
    let fit_source = match e.fit_on {
        FitOn::Tokens => c,
        FitOn::Aggregated => &agg.corpus,
    };
    let mut out = Vec::new();
    for &s in &ctx.cfg.strategies {
        let t = fit_for(ctx, s, fit_source)?;
        match (e.order, &t) {
            (AggregationOrder::TransformThenAggregate, Some(t)) => {
                let moved = aggregate(&apply(t, c)?);
                for ds in datasets {
                    let mut r = evaluate(&moved.corpus, ds, Strategy::Raw, None)?;
                    r.strategy = s;
                    out.push(r);
                }
            }
            _ => {
                for ds in datasets {
                    out.push(evaluate(&agg.corpus, ds, s, t.as_ref())?);
                }
            }
        }
    }
    Ok((out, agg.omitted.len()))
}

fn eval(ctx: &Ctx, st: &mut Staging) -> Result<()> {
    let datasets: Vec<SimilarityDataset> = ctx
        .cfg
        .datasets
        .iter()
        .map(|p| load_dataset_with(&ctx.cfg.resolve(p), ctx.cfg.eval.lowercase))
        .collect::<Result<_>>()?;
    let mut results = Vec::new();
    let mut omitted = BTreeMap::new();
    for c in &ctx.layers {
        let (r, om) = eval_layer(ctx, c, &datasets)?;
        results.extend(r);
        omitted.insert(c.layer().to_string(), om);
    }
    let rows: Vec<EvalRow> = results
        .iter()
        .map(|r| EvalRow {
            dataset: &r.dataset,
            layer: r.layer,
            strategy: r.strategy.as_str(),
            rho: r.rho,
            n_used: r.n_pairs_used,
            n_skipped: r.n_pairs_skipped,
        })
        .collect();
    st.write("eval.csv", &csv_bytes(&rows)?)?;

    // strategy -> dataset -> [(layer, rho)], plus the across-dataset mean
    let mut curves: BTreeMap<&str, BTreeMap<String, Vec<(u32, f64)>>> = BTreeMap::new();
    for &s in &ctx.cfg.strategies {
        let per_s = curves.entry(s.as_str()).or_default();
        for c in &ctx.layers {
            let here: Vec<EvalResult> = results
                .iter()
                .filter(|r| r.strategy == s && r.layer == c.layer())
                .cloned()
                .collect();
            for r in &here {
                per_s.entry(r.dataset.clone()).or_default().push((r.layer, r.rho));
            }
            if let Some(m) = mean_rho(&here) {
                per_s.entry("mean".into()).or_default().push((c.layer(), m));
            }
        }
    }
    let e = &ctx.cfg.eval;
    st.write(
        "eval_curves.json",
        &json_bytes(&json!({
            "min_contexts": e.min_contexts,
            "max_contexts": e.max_contexts,
            "fit_on": e.fit_on,
            "order": e.order,
            "omitted_types": omitted,
            "curves": curves,
        }))?,
    )
}
