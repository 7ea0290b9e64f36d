use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use serde_json::json;

use rogue_dims::behavior::encode_dst1;
use rogue_dims::config::{AnalysisConfig, Overrides};
use rogue_dims::fsutil::Staging;
use rogue_dims::report::{run, Subcommand};
use rogue_dims::store::{meta_path, save_corpus};
use rogue_dims::synth::{dataset_tsv, distributions, similarity_pairs, SynthSpec};
use rogue_dims::{Error, Result};

/// Rogue-dimension diagnostics for contextual embedding spaces.
#[derive(Parser)]
#[command(name = "rogue-dims", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Analysis config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of sampled token pairs.
    #[arg(long, global = true)]
    pairs: Option<usize>,
    /// Comma-separated k values, e.g. 1,3,5.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Components removed by all-but-the-top.
    #[arg(long, global = true)]
    abtt_components: Option<usize>,
    /// Keep special tokens in samplers and aggregators.
    #[arg(long, global = true)]
    include_special: bool,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Per-dimension mean, std and variance.
    Stats,
    /// Anisotropy and per-dimension cosine contributions.
    Contributions,
    /// r² between full-space and top-k-removed similarity.
    Informativity,
    /// Fit, apply and serialize standardization, mean subtraction and all-but-the-top.
    Postprocess,
    /// Behavioral influence of each ablated dimension.
    AblationReport,
    /// Conditional anisotropy and value distributions of dominant dimensions.
    Correlates,
    /// Self-similarity and intra-sentence similarity with and without top dimensions.
    Geometry,
    /// Word-similarity evaluation per postprocessing strategy.
    Eval,
    /// Everything above.
    Report,
    /// Write synthetic corpora, distributions, a dataset and a config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 150)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    /// Mean of the planted dimension in layer 1.
    #[arg(long, default_value_t = 10.0)]
    rogue_mean: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    let sub = match cli.command {
        Command::Synth(args) => return synth(&g, &args),
        Command::Stats => Subcommand::Stats,
        Command::Contributions => Subcommand::Contributions,
        Command::Informativity => Subcommand::Informativity,
        Command::Postprocess => Subcommand::Postprocess,
        Command::AblationReport => Subcommand::AblationReport,
        Command::Correlates => Subcommand::Correlates,
        Command::Geometry => Subcommand::Geometry,
        Command::Eval => Subcommand::Eval,
        Command::Report => Subcommand::Report,
    };
    let path = g.config.as_deref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        msg: "required".into(),
    })?;
    let mut cfg = AnalysisConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: g.seed,
        pairs: g.pairs,
        k_values: g.k,
        abtt_components: g.abtt_components,
        include_special: g.include_special,
        out_dir: g.out,
    });
    let m = run(sub, &cfg)?;
    for a in &m.artifacts {
        println!("{}", cfg.out_dir().join(a).display());
    }
    for s in &m.skipped {
        eprintln!("skipped {}: {}", s.subcommand, s.reason);
    }
    Ok(())
}

fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let out = g.out.as_deref().ok_or_else(|| Error::Config {
        field: "--out".into(),
        msg: "required".into(),
    })?;
    let seed = g.seed.unwrap_or(0);
    if a.d < 8 {
        return Err(Error::Config {
            field: "--d".into(),
            msg: "must be at least 8".into(),
        });
    }
    let rogue = a.d / 2;
    let base = SynthSpec {
        seq_len: a.seq_len,
        vocab: a.vocab,
        type_signal: 0.7,
        ..SynthSpec::isotropic(a.n, a.d, seed)
    };
    let layer0 = base.generate()?;
    let layer1 = SynthSpec {
        layer: 1,
        ..base.clone().with_planted(rogue, a.rogue_mean, 1.0)
    }
    .generate()?;

    let mut st = Staging::new(out)?;
    for (name, c) in [("layer0.emb", &layer0), ("layer1.emb", &layer1)] {
        let p = st.path(name);
        st.path(&meta_name(name));
        save_corpus(c, &p)?;
    }

    // The rogue dimension barely matters to predictions; dimension 3 does.
    let mut weights = vec![0.05; a.d];
    weights[rogue] = 0.1;
    weights[3] = 1.0;
    let pairs = distributions(1, &weights, 32, 4, seed)?;
    st.write("distributions.dst", &encode_dst1(32, &pairs)?)?;

    let sim = similarity_pairs(&layer1, &[rogue], 40, 0.3, seed)?;
    st.write("synthetic_sim.tsv", dataset_tsv(&sim).as_bytes())?;

    let config = json!({
        "seed": seed,
        "layers": [
            {"layer": 0, "path": "layer0.emb"},
            {"layer": 1, "path": "layer1.emb"}
        ],
        "pairs": 20000,
        "k_values": [1, 3, 5],
        "datasets": ["synthetic_sim.tsv"],
        "distributions": "distributions.dst",
        "eval": {"min_contexts": 3}
    });
    let mut bytes = serde_json::to_vec_pretty(&config)?;
    bytes.push(b'\n');
    st.write("config.json", &bytes)?;
    let manifest = json!({
        "subcommand": "synth",
        "seed": seed,
        "rogue_dim": rogue,
        "artifacts": st.artifacts(),
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    st.write("manifest.json", &bytes)?;
    for f in st.commit()? {
        println!("{}", out.join(f).display());
    }
    Ok(())
}

fn meta_name(name: &str) -> String {
    meta_path(Path::new(name)).to_string_lossy().into_owned()
}
