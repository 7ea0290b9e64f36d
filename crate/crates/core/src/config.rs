//! Declarative analysis configuration.
//!
//! A single JSON document names the per-layer corpora and every knob the
//! analyses use. Relative paths resolve against the document's directory.
//! Errors name the offending field as a dotted path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Strategy;
use crate::store::TokenMeta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerInput {
    pub layer: u32,
    pub path: PathBuf,
}

/// Which rows a postprocessing transform is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOn {
    /// The token-level corpus of the layer.
    #[default]
    Tokens,
    /// The context-aggregated type vectors.
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationOrder {
    #[default]
    AggregateThenTransform,
    TransformThenAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_min_contexts")]
    pub min_contexts: usize,
    #[serde(default = "default_max_contexts")]
    pub max_contexts: usize,
    #[serde(default)]
    pub fit_on: FitOn,
    #[serde(default)]
    pub order: AggregationOrder,
    #[serde(default = "default_true")]
    pub lowercase: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_contexts: default_min_contexts(),
            max_contexts: default_max_contexts(),
            fit_on: FitOn::default(),
            order: AggregationOrder::default(),
            lowercase: true,
        }
    }
}

/// Token filter used for conditional anisotropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenPredicate {
    Position { equals: i64 },
    PositionNot { equals: i64 },
    TokenType { equals: String },
    TokenTypeNot { equals: String },
    All,
}

impl TokenPredicate {
    pub fn matches(&self, m: &TokenMeta) -> bool {
        match self {
            TokenPredicate::Position { equals } => m.position == *equals,
            TokenPredicate::PositionNot { equals } => m.position != *equals,
            TokenPredicate::TokenType { equals } => &m.token_type == equals,
            TokenPredicate::TokenTypeNot { equals } => &m.token_type != equals,
            TokenPredicate::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPredicate {
    pub name: String,
    #[serde(flatten)]
    pub predicate: TokenPredicate,
}

fn default_predicates() -> Vec<NamedPredicate> {
    vec![
        NamedPredicate {
            name: "position_0".into(),
            predicate: TokenPredicate::Position { equals: 0 },
        },
        NamedPredicate {
            name: "position_not_0".into(),
            predicate: TokenPredicate::PositionNot { equals: 0 },
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Required; recorded in every manifest.
    pub seed: Option<u64>,
    pub layers: Vec<LayerInput>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_geometry_k")]
    pub geometry_k: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// Components removed by all-but-the-top; `max(1, floor(d/100))` when absent.
    #[serde(default)]
    pub abtt_components: Option<usize>,
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub distributions: Option<PathBuf>,
    #[serde(default)]
    pub include_special: bool,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default = "default_pair_budget")]
    pub pair_budget: usize,
    #[serde(default = "default_min_occurrences")]
    pub min_occurrences: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_predicates")]
    pub predicates: Vec<NamedPredicate>,
    /// Also write each transformed corpus during `postprocess`.
    #[serde(default)]
    pub write_transformed: bool,
    /// Not part of the config hash.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_pairs() -> usize {
    100_000
}
fn default_k_values() -> Vec<usize> {
    vec![1, 3, 5]
}
fn default_geometry_k() -> usize {
    5
}
fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_pair_budget() -> usize {
    10_000
}
fn default_min_occurrences() -> usize {
    2
}
fn default_bins() -> usize {
    crate::decomp::DEFAULT_BINS
}
fn default_min_contexts() -> usize {
    1
}
fn default_max_contexts() -> usize {
    usize::MAX
}
fn default_true() -> bool {
    true
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub pairs: Option<usize>,
    pub k_values: Option<Vec<usize>>,
    pub abtt_components: Option<usize>,
    pub include_special: bool,
    pub out_dir: Option<PathBuf>,
}

impl AnalysisConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: AnalysisConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { "<document>".to_string() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_json(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(p) = o.pairs {
            self.pairs = p;
        }
        if let Some(k) = &o.k_values {
            self.k_values = k.clone();
        }
        if let Some(c) = o.abtt_components {
            self.abtt_components = Some(c);
        }
        if o.include_special {
            self.include_special = true;
        }
        if let Some(out) = &o.out_dir {
            // --out is relative to the working directory, not the document
            self.out_dir = Some(std::path::absolute(out).unwrap_or_else(|_| out.clone()));
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Check invariants and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::config("seed", "required"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("layers", "at least one layer is required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|o| o.layer == l.layer) {
                return Err(Error::config(
                    format!("layers[{i}].layer"),
                    format!("layer {} listed twice", l.layer),
                ));
            }
            self.check_file(&format!("layers[{i}].path"), &l.path)?;
        }
        for (i, p) in self.datasets.iter().enumerate() {
            self.check_file(&format!("datasets[{i}]"), p)?;
        }
        if let Some(p) = &self.distributions {
            self.check_file("distributions", p)?;
        }
        if self.pairs == 0 {
            return Err(Error::config("pairs", "must be positive"));
        }
        if self.k_values.is_empty() {
            return Err(Error::config("k_values", "must not be empty"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "must not be empty"));
        }
        if self.abtt_components == Some(0) {
            return Err(Error::config("abtt_components", "must be positive"));
        }
        if self.eval.max_contexts < self.eval.min_contexts {
            return Err(Error::config(
                "eval.max_contexts",
                "must be at least eval.min_contexts",
            ));
        }
        if self.min_occurrences < 2 {
            return Err(Error::config("min_occurrences", "must be at least 2"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("histogram_bins", "must be positive"));
        }
        if self.max_seq_len == Some(0) {
            return Err(Error::config("max_seq_len", "must be positive"));
        }
        if self.out_dir.is_none() {
            return Err(Error::config("out_dir", "required (or pass --out)"));
        }
        Ok(())
    }

    fn check_file(&self, field: &str, p: &Path) -> Result<()> {
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(Error::config(field, format!("{} does not exist", full.display())));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .as_deref()
            .map(|p| self.resolve(p))
            .unwrap_or_default()
    }

    /// SHA-256 of the effective configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<AnalysisConfig> {
        AnalysisConfig::from_json(s, Path::new("."))
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(r#"{"seed": 1, "layers": []}"#).unwrap();
        assert_eq!(c.k_values, vec![1, 3, 5]);
        assert_eq!(c.geometry_k, 5);
        assert_eq!(c.pairs, 100_000);
        assert_eq!(c.predicates.len(), 2);
        assert_eq!(c.eval.fit_on, FitOn::Tokens);
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse(r#"{"seed": 1, "layers": [{"layer": 0, "path": 3}]}"#).unwrap_err();
        match e {
            Error::Config { field, .. } => assert_eq!(field, "layers[0].path"),
            other => panic!("{other:?}"),
        }
        let e = parse(r#"{"seed": 1, "layers": [], "bogus": 2}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn seed_is_mandatory() {
        let mut c = parse(r#"{"layers": [{"layer": 0, "path": "x.emb"}]}"#).unwrap();
        c.out_dir = Some("out".into());
        match c.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "seed"),
            other => panic!("{other:?}"),
        }
        c.seed = Some(0);
        match c.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "layers[0].path"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_out_dir_and_tracks_overrides() {
        let mut a = parse(r#"{"seed": 1, "layers": []}"#).unwrap();
        let h = a.hash();
        a.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), h);
        a.apply(&Overrides {
            pairs: Some(7),
            ..Default::default()
        });
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn predicates_parse() {
        let c = parse(
            r#"{"seed": 1, "layers": [], "predicates": [
                {"name": "dots", "kind": "token_type", "equals": "."}]}"#,
        )
        .unwrap();
        let m = TokenMeta::new(".", 0, 3);
        assert!(c.predicates[0].predicate.matches(&m));
    }
}
