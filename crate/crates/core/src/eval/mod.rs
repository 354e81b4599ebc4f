//! Run orchestration: NLL decoding, noise-rate sweeps, the stability
//! protocol, and result persistence.

mod config;
mod report;

pub use config::*;
pub use report::*;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{hash_mock, http_backend, oracle_mock, BackendSpec, Fidelity, ModelBackend, OracleWorld};
use crate::confidence::{
    argmax, oracle_estimator, train_classifier, ClassifierEstimator, ConfidenceEstimator, LinearClassifier,
    TrainConfig,
};
use crate::corpus::{assemble_prompt, load_dataset, Dataset, Example, LabelSpace, TaskTemplate};
use crate::error::{Error, Result};
use crate::noise::{corrupt_examples, corrupt_labels, split_clean_subset};
use crate::rectifier::{rectification_accuracy, rectify};
use crate::retrieval::{build_index, DemoOrder, EmbeddingIndex, EmbeddingProvider, Retriever, TopKRetriever};
use crate::seed;
use crate::strategies::{
    annotate, apply_selection_backfill, apply_strategy, render_demo, AnnotatedDemo, Strategy, DEFAULT_TAG_FORMAT,
};

/// Candidate pool depth, as a multiple of `n`, when selection backfills.
pub const BACKFILL_POOL_FACTOR: usize = 4;

/// Scores every candidate label after `prompt` and returns the argmax
/// (lowest index on ties) with all scores.
pub fn decode_label(
    backend: &dyn ModelBackend,
    prompt: &str,
    labels: &LabelSpace,
    candidate_prefix: &str,
) -> Result<(usize, Vec<f64>)> {
    if labels.len() < 2 {
        return Err(Error::Config("decoding needs at least 2 labels".into()));
    }
    let scores = labels
        .labels()
        .iter()
        .map(|l| {
            let s = backend.score(prompt, &format!("{candidate_prefix}{l}"))?;
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::Protocol {
                    endpoint: "backend".into(),
                    reason: format!("non-finite score {s} for candidate `{l}`"),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((argmax(&scores), scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    /// Demonstrations as retrieved (prompt order), before manipulation.
    pub retrieved_ids: Vec<String>,
    /// Labels of the retrieved demonstrations as seen by the strategy.
    pub retrieved_labels: Vec<usize>,
    /// Demonstrations that reached the prompt, in prompt order.
    pub demo_ids: Vec<String>,
    pub demo_labels: Vec<usize>,
    pub demo_gold_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rectifier_fallbacks: Vec<usize>,
    pub candidate_scores: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub strategy: Strategy,
    pub rate: f64,
    pub seed: u64,
    pub mode: CorruptionMode,
    pub n: usize,
    pub config_hash: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Agreement of prompt labels with clean labels, when the strategy keeps
    /// every demonstration.
    pub rectification_accuracy: Option<f64>,
    pub records: Vec<QueryRecord>,
}

impl RunResult {
    pub fn strategy_name(&self) -> &'static str {
        self.strategy.name()
    }

    /// Recounts accuracy from the per-query records.
    pub fn verify(&self) -> Result<()> {
        let correct = self.records.iter().filter(|r| r.predicted == r.gold).count();
        let total = self.records.len();
        if correct != self.correct || total != self.total || accuracy_of(correct, total) != self.accuracy {
            return Err(Error::Assertion(format!(
                "{} at rate {}: stored accuracy {} ({}/{}) but records give {}/{}",
                self.strategy_name(),
                self.rate,
                self.accuracy,
                self.correct,
                self.total,
                correct,
                total
            )));
        }
        Ok(())
    }
}

fn accuracy_of(correct: usize, total: usize) -> f64 {
    correct as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub strategy: String,
    pub rate: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl StabilityReport {
    pub fn from_accuracies(strategy: impl Into<String>, rate: f64, seeds: Vec<u64>, accuracies: Vec<f64>) -> Result<Self> {
        let (mean, std) = mean_and_sample_std(&accuracies)?;
        Ok(Self {
            strategy: strategy.into(),
            rate,
            seeds,
            accuracies,
            mean,
            std,
        })
    }
}

/// Mean and sample (N-1) standard deviation. Values are summed in sorted
/// order so the result does not depend on input order, and the deviation is
/// exactly zero when all values are equal.
pub fn mean_and_sample_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Config(format!(
            "standard deviation needs at least 2 values, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.first() == sorted.last() {
        return Ok((sorted[0], 0.0));
    }
    let ss: f64 = sorted.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Everything a run needs, built once and shared across rates and seeds.
pub struct Experiment {
    config: RunConfig,
    template: Arc<TaskTemplate>,
    retrieval_set: Dataset,
    validation: Dataset,
    retriever: Option<Arc<dyn Retriever>>,
    estimator: Option<Arc<dyn ConfidenceEstimator>>,
    backend: Arc<dyn ModelBackend>,
    rectifier_backend: Arc<dyn ModelBackend>,
    pool: rayon::ThreadPool,
}

impl Experiment {
    /// Loads the datasets named in `config` and builds (or reuses cached)
    /// artifacts under `output_dir/artifacts`.
    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let template = Arc::new(TaskTemplate::resolve(&config.template)?);
        let retrieval = load_dataset(&config.retrieval_set, template.clone())?;
        let validation = load_dataset(&config.validation_set, template)?;
        let cache = config.output_dir.join("artifacts");
        Self::assemble(config, retrieval, validation, Some(&cache))
    }

    /// Builds from in-memory datasets without an artifact cache.
    pub fn from_datasets(config: RunConfig, retrieval: Dataset, validation: Dataset) -> Result<Self> {
        Self::assemble(config, retrieval, validation, None)
    }

    fn assemble(config: RunConfig, retrieval: Dataset, validation: Dataset, cache: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let template = retrieval.shared_template();
        if validation.template().label_space() != template.label_space()
            || validation.template().pattern() != template.pattern()
        {
            return Err(Error::Config(
                "retrieval and validation sets use different templates".into(),
            ));
        }
        if validation.is_empty() {
            return Err(Error::Config("validation set is empty".into()));
        }
        if let Some(dir) = cache {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }

        let needs_provider = config.retrieval.n > 0
            || matches!(config.estimator, EstimatorSpec::Classifier { .. }) && config.strategy.needs_estimator();
        let provider = if needs_provider {
            Some(config.retrieval.provider.build()?)
        } else {
            None
        };

        let retriever: Option<Arc<dyn Retriever>> = match (&provider, config.retrieval.n) {
            (Some(p), n) if n > 0 => {
                let index = cached_index(cache, &retrieval, p.as_ref())?;
                Some(Arc::new(TopKRetriever::new(Arc::new(index), p.clone())?))
            }
            _ => None,
        };

        let estimator: Option<Arc<dyn ConfidenceEstimator>> = if config.strategy.needs_estimator() {
            Some(match config.estimator {
                EstimatorSpec::Oracle { p_correct, p_wrong } => {
                    let truth: HashMap<String, usize> = retrieval
                        .examples()
                        .iter()
                        .map(|e| (e.id.clone(), e.label_index))
                        .collect();
                    Arc::new(oracle_estimator(
                        Arc::new(truth),
                        template.label_space().len(),
                        p_correct,
                        p_wrong,
                    )?)
                }
                EstimatorSpec::Classifier { epochs, learning_rate } => {
                    let provider = provider.clone().expect("provider built for classifier");
                    let (clean, _) = split_clean_subset(&retrieval, config.clean_fraction, config.seed)?;
                    let train = TrainConfig {
                        epochs,
                        learning_rate,
                        seed: config.seed,
                    };
                    let clf = cached_classifier(cache, &clean, provider.as_ref(), &train)?;
                    Arc::new(ClassifierEstimator::new(Arc::new(clf), template.clone(), provider)?)
                }
            })
        } else {
            None
        };

        let backend = build_backend(&config.backend, &template, &[&retrieval, &validation])?;
        let rectifier_backend = match (&config.strategy, &config.rectifier_backend) {
            (Strategy::Rectification { .. }, Some(spec)) => build_backend(spec, &template, &[&retrieval, &validation])?,
            _ => backend.clone(),
        };

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

        Ok(Self {
            config,
            template,
            retrieval_set: retrieval,
            validation,
            retriever,
            estimator,
            backend,
            rectifier_backend,
            pool,
        })
    }

    pub fn with_backend(mut self, backend: Arc<dyn ModelBackend>) -> Self {
        self.backend = backend.clone();
        self.rectifier_backend = backend;
        self
    }

    pub fn with_rectifier_backend(mut self, backend: Arc<dyn ModelBackend>) -> Self {
        self.rectifier_backend = backend;
        self
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn ConfidenceEstimator>) -> Self {
        self.estimator = Some(estimator);
        self
    }

    pub fn with_retriever(mut self, retriever: Arc<dyn Retriever>) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn template(&self) -> &TaskTemplate {
        &self.template
    }

    pub fn retrieval_set(&self) -> &Dataset {
        &self.retrieval_set
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    /// Per-query outcomes in validation order; failures do not stop other
    /// queries.
    pub fn evaluate_queries(&self, rate: f64, seed: u64) -> Result<Vec<(String, Result<QueryRecord>)>> {
        crate::noise::check_rate(rate)?;
        let source = match self.config.noise.mode {
            CorruptionMode::RetrievalSet => corrupt_labels(&self.retrieval_set, rate, seed)?.0,
            CorruptionMode::PostRetrieval => self.retrieval_set.clone(),
        };
        Ok(self.pool.install(|| {
            self.validation
                .examples()
                .par_iter()
                .map(|q| (q.id.clone(), self.query_record(q, &source, rate, seed)))
                .collect()
        }))
    }

    pub fn evaluate(&self, rate: f64, seed: u64) -> Result<RunResult> {
        let records = self
            .evaluate_queries(rate, seed)?
            .into_iter()
            .map(|(_, r)| r)
            .collect::<Result<Vec<_>>>()?;
        Ok(self.summarize(rate, seed, records))
    }

    fn summarize(&self, rate: f64, seed: u64, records: Vec<QueryRecord>) -> RunResult {
        let correct = records.iter().filter(|r| r.predicted == r.gold).count();
        let total = records.len();
        let keeps_all = !matches!(self.config.strategy, Strategy::Selection { .. });
        let tau = if keeps_all && self.config.retrieval.n > 0 {
            let gold: Vec<Vec<usize>> = records.iter().map(|r| r.demo_gold_labels.clone()).collect();
            let shown: Vec<Vec<usize>> = records.iter().map(|r| r.demo_labels.clone()).collect();
            rectification_accuracy(&gold, &shown).ok()
        } else {
            None
        };
        RunResult {
            task: self.template.task_name().to_string(),
            strategy: self.config.strategy.clone(),
            rate,
            seed,
            mode: self.config.noise.mode,
            n: self.config.retrieval.n,
            config_hash: self.config.config_hash(),
            accuracy: accuracy_of(correct, total),
            correct,
            total,
            rectification_accuracy: tau,
            records,
        }
    }

    fn query_record(&self, query: &Example, source: &Dataset, rate: f64, seed: u64) -> Result<QueryRecord> {
        let n = self.config.retrieval.n;
        let m = self.template.label_space().len();
        let backfill = matches!(self.config.strategy, Strategy::Selection { backfill: true, .. });

        let mut demos: Vec<Example> = match (&self.retriever, n) {
            (_, 0) => Vec::new(),
            (None, _) => return Err(Error::Config("retrieval requested without a retriever".into())),
            (Some(retriever), n) => {
                let depth = if backfill {
                    (n * BACKFILL_POOL_FACTOR).min(retriever.capacity())
                } else {
                    n
                };
                let query_text = self.template.render_label_free(query);
                retriever
                    .retrieve(&query_text, depth, &HashSet::new())?
                    .into_iter()
                    .map(|id| source.get(&id).cloned().ok_or(Error::UnknownId(id)))
                    .collect::<Result<_>>()?
            }
        };
        if self.config.noise.mode == CorruptionMode::PostRetrieval {
            let mut rng = seed::stream(seed, &format!("post-retrieval/{}", query.id));
            demos = corrupt_examples(&demos, m, rate, &mut rng)?.0;
        }

        let descending = self.config.retrieval.order == DemoOrder::Descending;
        let estimator = self.estimator.as_deref();
        let mut fallbacks = Vec::new();
        let (retrieved, manipulated): (Vec<Example>, Vec<AnnotatedDemo>) = match &self.config.strategy {
            Strategy::Selection { theta, backfill: true } => {
                let est = estimator.ok_or_else(|| Error::Config("selection needs an estimator".into()))?;
                let mut kept = apply_selection_backfill(annotate(demos.clone()), est, *theta, n)?;
                if descending {
                    demos.reverse();
                    kept.reverse();
                }
                (demos, kept)
            }
            Strategy::Rectification { chunk_size, strict } => {
                if descending {
                    demos.reverse();
                }
                let result = rectify(self.rectifier_backend.as_ref(), &self.template, &demos, *chunk_size, *strict)?;
                fallbacks = result.parse_fallbacks.iter().copied().collect();
                let fixed = annotate(result.apply(&demos));
                (demos, fixed)
            }
            other => {
                if descending {
                    demos.reverse();
                }
                let out = apply_strategy(other, annotate(demos.clone()), estimator)?;
                (demos, out)
            }
        };

        let tag_format = match &self.config.strategy {
            Strategy::Weighting { tag_format, .. } => tag_format.as_str(),
            _ => DEFAULT_TAG_FORMAT,
        };
        let prompt = assemble_prompt(
            &self.template,
            manipulated.iter().map(|d| render_demo(&self.template, d, tag_format)),
            query,
        );
        let (predicted, scores) = decode_label(
            self.backend.as_ref(),
            &prompt,
            self.template.label_space(),
            self.template.candidate_prefix(),
        )?;

        let gold_of = |id: &str| {
            self.retrieval_set
                .get(id)
                .map(|e| e.label_index)
                .ok_or_else(|| Error::UnknownId(id.to_string()))
        };
        Ok(QueryRecord {
            query_id: query.id.clone(),
            retrieved_ids: retrieved.iter().map(|e| e.id.clone()).collect(),
            retrieved_labels: retrieved.iter().map(|e| e.label_index).collect(),
            demo_ids: manipulated.iter().map(|d| d.example.id.clone()).collect(),
            demo_labels: manipulated.iter().map(|d| d.example.label_index).collect(),
            demo_gold_labels: manipulated
                .iter()
                .map(|d| gold_of(&d.example.id))
                .collect::<Result<_>>()?,
            rectifier_fallbacks: fallbacks,
            candidate_scores: scores,
            predicted,
            gold: query.label_index,
        })
    }

    /// One evaluation per rate at the configured seed.
    pub fn sweep(&self, rates: &[f64]) -> Result<Vec<RunResult>> {
        rates.iter().map(|&r| self.evaluate(r, self.config.seed)).collect()
    }

    /// Accuracy spread across corruption seeds under post-retrieval noise.
    pub fn stability(&self, rate: f64, seeds: &[u64]) -> Result<StabilityReport> {
        if self.config.noise.mode != CorruptionMode::PostRetrieval {
            return Err(Error::Config(
                "the stability protocol requires noise.mode = \"post-retrieval\"".into(),
            ));
        }
        if seeds.len() < 2 {
            return Err(Error::Config(format!("stability needs at least 2 seeds, got {}", seeds.len())));
        }
        let accuracies = seeds
            .iter()
            .map(|&s| self.evaluate(rate, s).map(|r| r.accuracy))
            .collect::<Result<Vec<_>>>()?;
        StabilityReport::from_accuracies(self.config.strategy.name(), rate, seeds.to_vec(), accuracies)
    }
}

/// Evaluates `config` at its own rate and seed.
pub fn evaluate(config: &RunConfig) -> Result<RunResult> {
    Experiment::prepare(config.clone())?.evaluate(config.noise.rate, config.seed)
}

pub fn build_backend(
    spec: &BackendSpec,
    template: &Arc<TaskTemplate>,
    datasets: &[&Dataset],
) -> Result<Arc<dyn ModelBackend>> {
    Ok(match spec {
        BackendSpec::HashMock => Arc::new(hash_mock()),
        BackendSpec::OracleMock {
            base,
            slope,
            rho,
            zero_shot_s,
        } => {
            let world = OracleWorld::from_datasets(template.clone(), datasets)?
                .with_fidelity(Fidelity::linear(*base, *slope)?)
                .with_rho(*rho)?
                .with_zero_shot_s(*zero_shot_s)?;
            Arc::new(oracle_mock(Arc::new(world)))
        }
        BackendSpec::Http(settings) => Arc::new(http_backend(settings)?),
    })
}

fn content_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn dataset_key(dataset: &Dataset, with_labels: bool) -> String {
    let template = dataset.template();
    let mut h = Sha256::new();
    for ex in dataset.examples() {
        let text = template.render_label_free(ex);
        for part in [ex.id.as_str(), text.as_str()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        if with_labels {
            h.update((ex.label_index as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn index_artifact_path(dir: &Path, dataset: &Dataset, provider: &dyn EmbeddingProvider) -> PathBuf {
    let key = content_key(&[&provider.tag(), &dataset_key(dataset, false)]);
    dir.join(format!("index-{key}.bin"))
}

fn cached_index(cache: Option<&Path>, dataset: &Dataset, provider: &dyn EmbeddingProvider) -> Result<EmbeddingIndex> {
    let Some(dir) = cache else {
        return build_index(dataset, provider);
    };
    let path = index_artifact_path(dir, dataset, provider);
    if path.is_file() {
        log::info!("reusing index {}", path.display());
        return EmbeddingIndex::load(&path);
    }
    let index = build_index(dataset, provider)?;
    index.save(&path)?;
    Ok(index)
}

fn cached_classifier(
    cache: Option<&Path>,
    clean: &Dataset,
    provider: &dyn EmbeddingProvider,
    train: &TrainConfig,
) -> Result<LinearClassifier> {
    let Some(dir) = cache else {
        return train_classifier(clean, provider, train);
    };
    let params = serde_json::to_string(train).map_err(|e| Error::json("train config", e))?;
    let key = content_key(&[&provider.tag(), &dataset_key(clean, true), &params]);
    let path = dir.join(format!("classifier-{key}.json"));
    if path.is_file() {
        log::info!("reusing classifier {}", path.display());
        return LinearClassifier::load(&path);
    }
    let clf = train_classifier(clean, provider, train)?;
    clf.save(&path)?;
    Ok(clf)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// `complete` or `partial`.
    pub status: String,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only log of invocations; the only place timestamps are stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn append_manifest(dir: &Path, entry: ManifestEntry) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.json");
    let mut manifest: Manifest = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
        Err(e) => return Err(Error::io(&path, e)),
    };
    manifest.entries.push(entry);
    write_json(&path, &manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn run_file_name(strategy: &str, rate: f64) -> String {
    format!("{strategy}_r{rate}.json")
}

/// Writes `runs/<strategy>_r<rate>.json` under `dir`.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<PathBuf> {
    let path = dir.join("runs").join(run_file_name(result.strategy_name(), result.rate));
    write_json(&path, result)?;
    Ok(path)
}

/// Writes `stability/<strategy>_r<rate>.json` under `dir`.
pub fn write_stability(dir: &Path, report: &StabilityReport) -> Result<PathBuf> {
    let path = dir.join("stability").join(run_file_name(&report.strategy, report.rate));
    write_json(&path, report)?;
    Ok(path)
}

fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

/// Runs `body`, recording produced files and the outcome in the manifest.
fn with_manifest<T>(
    exp: &Experiment,
    command: &str,
    body: impl FnOnce(&mut Vec<PathBuf>) -> Result<T>,
) -> Result<T> {
    let dir = exp.config.output_dir.clone();
    let started = unix_now();
    let mut files = Vec::new();
    let outcome = body(&mut files);
    let entry = ManifestEntry {
        command: command.to_string(),
        config_hash: exp.config.config_hash(),
        started_unix: started,
        finished_unix: unix_now(),
        status: if outcome.is_ok() { "complete" } else { "partial" }.to_string(),
        files: files.iter().map(|p| relative(&dir, p)).collect(),
        error: outcome.as_ref().err().map(|e| e.to_string()),
    };
    append_manifest(&dir, entry)?;
    outcome
}

/// Evaluates one rate and persists it. On failure the records that did
/// complete are written to `runs/<name>.partial.json`.
pub fn execute_run(exp: &Experiment, rate: f64, seed: u64) -> Result<RunResult> {
    with_manifest(exp, "run", |files| run_one(exp, rate, seed, files))
}

fn run_one(exp: &Experiment, rate: f64, seed: u64, files: &mut Vec<PathBuf>) -> Result<RunResult> {
    let dir = &exp.config.output_dir;
    let mut records = Vec::new();
    let mut first_error = None;
    for (id, outcome) in exp.evaluate_queries(rate, seed)? {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                log::error!("query {id} failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(err) = first_error {
        let name = run_file_name(exp.config.strategy.name(), rate).replace(".json", ".partial.json");
        let path = dir.join("runs").join(name);
        write_json(&path, &records)?;
        files.push(path);
        return Err(err);
    }
    let result = exp.summarize(rate, seed, records);
    files.push(write_run(dir, &result)?);
    Ok(result)
}

pub fn execute_sweep(exp: &Experiment, rates: &[f64]) -> Result<Vec<RunResult>> {
    with_manifest(exp, "sweep", |files| {
        rates
            .iter()
            .map(|&r| run_one(exp, r, exp.config.seed, files))
            .collect()
    })
}

pub fn execute_stability(exp: &Experiment, rates: &[f64], seeds: &[u64]) -> Result<Vec<StabilityReport>> {
    with_manifest(exp, "stability", |files| {
        rates
            .iter()
            .map(|&r| {
                let report = exp.stability(r, seeds)?;
                files.push(write_stability(&exp.config.output_dir, &report)?);
                Ok(report)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    struct Fixed(Vec<f64>);

    impl ModelBackend for Fixed {
        fn score(&self, _: &str, continuation: &str) -> Result<f64> {
            let i = if continuation.ends_with("Yes") { 1 } else { 0 };
            Ok(self.0[i])
        }
        fn generate(&self, _: &str, _: usize, _: &[String]) -> Result<String> {
            Ok(String::new())
        }
    }

    #[test]
    fn decode_examples() {
        let labels = LabelSpace::new(["No", "Yes"]).unwrap();
        assert_eq!(decode_label(&Fixed(vec![-1.2, -0.8]), "p", &labels, " ").unwrap().0, 1);
        assert_eq!(decode_label(&Fixed(vec![-2.0, -2.0]), "p", &labels, " ").unwrap().0, 0);
        assert_eq!(decode_label(&Fixed(vec![-4.9, -4.5]), "p", &labels, " ").unwrap().0, 1);
        assert!(decode_label(&Fixed(vec![f64::NAN, 0.0]), "p", &labels, " ").is_err());
    }

    #[test]
    fn std_examples() {
        let (mean, std) = mean_and_sample_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((mean, std), (2.0, 1.0));
        assert_eq!(mean_and_sample_std(&[0.7, 0.7, 0.7]).unwrap().1, 0.0);
        assert!(mean_and_sample_std(&[0.5]).is_err());
    }

    fn config(strategy: Strategy) -> RunConfig {
        let mut cfg = RunConfig::new("tweet", "unused", "unused", BackendSpec::oracle_default());
        cfg.strategy = strategy;
        cfg.estimator = EstimatorSpec::Oracle {
            p_correct: 0.9,
            p_wrong: 0.1,
        };
        cfg.workers = 2;
        cfg
    }

    fn experiment(cfg: RunConfig) -> Experiment {
        let (train, dev) = synthetic::binary_task(300, 60, 5);
        Experiment::from_datasets(cfg, train, dev).unwrap()
    }

    #[test]
    fn clean_run_is_perfect() {
        let r = experiment(config(Strategy::None)).evaluate(0.0, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.rectification_accuracy, Some(1.0));
        r.verify().unwrap();
        for rec in &r.records {
            assert_eq!(rec.demo_ids.len(), 10);
            assert_eq!(rec.candidate_scores.len(), 2);
        }
    }

    #[test]
    fn correction_with_oracle_matches_clean_run() {
        let exp = experiment(config(Strategy::Correction));
        let clean = exp.evaluate(0.0, 3).unwrap();
        for rate in [0.2, 0.5] {
            let noisy = exp.evaluate(rate, 3).unwrap();
            assert_eq!(noisy.accuracy, clean.accuracy);
            assert_eq!(noisy.rectification_accuracy, Some(1.0));
        }
    }

    #[test]
    fn zero_shot_runs() {
        let mut cfg = config(Strategy::None);
        cfg.retrieval.n = 0;
        let r = experiment(cfg).evaluate(0.3, 0).unwrap();
        assert_eq!(r.total, 60);
        assert!(r.records.iter().all(|q| q.demo_ids.is_empty()));
        assert_eq!(r.rectification_accuracy, None);
    }

    #[test]
    fn concurrency_does_not_change_records() {
        let mut one = config(Strategy::Weighting {
            threshold: 0.5,
            tag_format: DEFAULT_TAG_FORMAT.into(),
        });
        one.workers = 1;
        let mut many = one.clone();
        many.workers = 8;
        let a = experiment(one).evaluate(0.3, 1).unwrap();
        let b = experiment(many).evaluate(0.3, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_with_backfill_fills_slots() {
        let exp = experiment(config(Strategy::Selection {
            theta: 0.3,
            backfill: true,
        }));
        let r = exp.evaluate(0.4, 2).unwrap();
        for rec in &r.records {
            assert_eq!(rec.demo_ids.len(), 10);
            assert_eq!(rec.demo_labels, rec.demo_gold_labels);
        }
        assert_eq!(r.rectification_accuracy, None);
    }

    #[test]
    fn stability_requires_post_retrieval_and_two_seeds() {
        let exp = experiment(config(Strategy::None));
        assert!(exp.stability(0.3, &[0, 1]).is_err());
        let mut cfg = config(Strategy::None);
        cfg.noise.mode = CorruptionMode::PostRetrieval;
        let exp = experiment(cfg);
        assert!(exp.stability(0.3, &[0]).is_err());
        let a = exp.stability(0.3, &[0, 1, 2, 3]).unwrap();
        let b = exp.stability(0.3, &[3, 1, 0, 2]).unwrap();
        assert_eq!((a.mean, a.std), (b.mean, b.std));
        assert_eq!(exp.stability(0.3, &[5, 5, 5]).unwrap().std, 0.0);
    }

    #[test]
    fn tampered_result_fails_verification() {
        let mut r = experiment(config(Strategy::None)).evaluate(0.2, 0).unwrap();
        r.verify().unwrap();
        r.records[0].predicted = 1 - r.records[0].predicted;
        assert!(matches!(r.verify(), Err(Error::Assertion(_))));
    }

    #[test]
    fn persisted_run_and_partial_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(Strategy::None);
        cfg.output_dir = dir.path().to_path_buf();
        let exp = experiment(cfg.clone());
        let r = execute_run(&exp, 0.1, 0).unwrap();
        let stored: RunResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/none_r0.1.json")).unwrap()).unwrap();
        assert_eq!(stored, r);

        struct Broken;
        impl ModelBackend for Broken {
            fn score(&self, _: &str, _: &str) -> Result<f64> {
                Err(Error::Transport {
                    endpoint: "x".into(),
                    message: "down".into(),
                })
            }
            fn generate(&self, _: &str, _: usize, _: &[String]) -> Result<String> {
                unreachable!()
            }
        }
        let broken = experiment(cfg).with_backend(Arc::new(Broken));
        assert!(execute_run(&broken, 0.2, 0).is_err());
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert_eq!(manifest.entries[1].status, "partial");
        assert!(manifest.entries[1].error.is_some());
        assert!(dir.path().join("runs/none_r0.2.partial.json").is_file());
    }
}
