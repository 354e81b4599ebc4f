//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::BackendSpec;
use crate::confidence::TrainConfig;
use crate::error::{Error, Result};
use crate::noise::check_rate;
use crate::retrieval::{
    DemoOrder, EmbeddingProvider, HashingProvider, RemoteProvider, RemoteProviderSettings, DEFAULT_HASH_DIM,
};
use crate::strategies::Strategy;

pub const DEFAULT_N: usize = 10;
pub const DEFAULT_CLEAN_FRACTION: f64 = 0.1;
pub const DEFAULT_RATES: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderSpec {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote(RemoteProviderSettings),
}

fn default_dim() -> usize {
    DEFAULT_HASH_DIM
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Hashing { dim: DEFAULT_HASH_DIM }
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(match self {
            ProviderSpec::Hashing { dim } => Arc::new(HashingProvider::new(*dim)?),
            ProviderSpec::Remote(s) => Arc::new(RemoteProvider::new(s)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default)]
    pub provider: ProviderSpec,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub order: DemoOrder,
}

fn default_n() -> usize {
    DEFAULT_N
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            provider: ProviderSpec::default(),
            n: DEFAULT_N,
            order: DemoOrder::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Corrupt the whole retrieval set once, then retrieve.
    #[default]
    RetrievalSet,
    /// Retrieve from the clean set, then corrupt each query's demos.
    PostRetrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub mode: CorruptionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EstimatorSpec {
    /// Logistic classifier trained on the clean subset.
    Classifier {
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
    },
    /// Knows the clean label of every retrieval-set example.
    Oracle {
        #[serde(default = "default_p_correct")]
        p_correct: f64,
        #[serde(default = "default_p_wrong")]
        p_wrong: f64,
    },
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn default_p_correct() -> f64 {
    0.9
}
fn default_p_wrong() -> f64 {
    0.1
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::Classifier {
            epochs: default_epochs(),
            learning_rate: default_lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in template name (`mrpc`, `sst5`, `tweet`) or a template file.
    pub template: String,
    pub retrieval_set: PathBuf,
    pub validation_set: PathBuf,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_clean_fraction")]
    pub clean_fraction: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    pub backend: BackendSpec,
    /// Generation backend for rectification; defaults to `backend`.
    #[serde(default)]
    pub rectifier_backend: Option<BackendSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Seeds for the stability protocol.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Noise rates for sweeps.
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Query-level parallelism; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn default_clean_fraction() -> f64 {
    DEFAULT_CLEAN_FRACTION
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_rates() -> Vec<f64> {
    DEFAULT_RATES.to_vec()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl RunConfig {
    pub fn new(
        template: impl Into<String>,
        retrieval_set: impl Into<PathBuf>,
        validation_set: impl Into<PathBuf>,
        backend: BackendSpec,
    ) -> Self {
        Self {
            template: template.into(),
            retrieval_set: retrieval_set.into(),
            validation_set: validation_set.into(),
            retrieval: RetrievalConfig::default(),
            noise: NoiseConfig::default(),
            clean_fraction: DEFAULT_CLEAN_FRACTION,
            strategy: Strategy::None,
            estimator: EstimatorSpec::default(),
            backend,
            rectifier_backend: None,
            seed: 0,
            seeds: default_seeds(),
            rates: default_rates(),
            output_dir: default_output_dir(),
            workers: 0,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.retrieval_set, &mut cfg.validation_set, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let template_path = base.join(&cfg.template);
        if !is_builtin_template(&cfg.template) && template_path.is_file() {
            cfg.template = template_path.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.noise.rate)?;
        for &r in &self.rates {
            check_rate(r)?;
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction < 1.0) {
            return Err(Error::OutOfRange {
                name: "clean fraction",
                value: self.clean_fraction,
                range: "(0, 1)",
            });
        }
        self.strategy.validate()?;
        if let EstimatorSpec::Classifier { learning_rate, .. } = self.estimator {
            if !(learning_rate.is_finite() && learning_rate > 0.0) {
                return Err(Error::OutOfRange {
                    name: "learning rate",
                    value: learning_rate,
                    range: "(0, inf)",
                });
            }
        }
        Ok(())
    }

    /// Content hash of everything that affects results; output location and
    /// worker count are excluded.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("workers");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn is_builtin_template(name: &str) -> bool {
    matches!(name, "mrpc" | "sst5" | "tweet")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
template = "sst5"
retrieval_set = "train.jsonl"
validation_set = "dev.jsonl"

[backend]
kind = "hash-mock"
"#;

    #[test]
    fn defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.retrieval.n, 10);
        assert_eq!(cfg.clean_fraction, 0.1);
        assert_eq!(cfg.seeds.len(), 10);
        assert_eq!(cfg.rates, DEFAULT_RATES.to_vec());
        assert_eq!(cfg.strategy, Strategy::None);
        assert_eq!(cfg.noise.mode, CorruptionMode::RetrievalSet);
    }

    #[test]
    fn full_config() {
        let text = format!(
            "{MINIMAL}
[noise]
rate = 0.3
mode = \"post-retrieval\"

[strategy]
kind = \"selection\"
theta = 0.4

[estimator]
kind = \"oracle\"
p_correct = 0.8
p_wrong = 0.2

[retrieval]
n = 4
order = \"descending\"
provider = {{ kind = \"hashing\", dim = 64 }}
"
        );
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.noise.mode, CorruptionMode::PostRetrieval);
        assert_eq!(cfg.strategy, Strategy::Selection { theta: 0.4, backfill: false });
        assert_eq!(cfg.retrieval.provider, ProviderSpec::Hashing { dim: 64 });
        assert_eq!(cfg.retrieval.order, DemoOrder::Descending);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str(&format!("{MINIMAL}\n[noise]\nrate = 1.5\n")).is_err());
        assert!(RunConfig::from_toml_str(&format!("bogus = 1\n{MINIMAL}")).is_err());
        assert!(RunConfig::from_toml_str(&format!("{MINIMAL}\n[strategy]\nkind = \"magic\"\n")).is_err());
    }

    #[test]
    fn hash_ignores_output_and_workers() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.workers = 3;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn relative_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.retrieval_set, dir.path().join("train.jsonl"));
        assert_eq!(cfg.template, "sst5");
    }
}
