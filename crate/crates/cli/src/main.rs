use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use noisy_icl::confidence::{train_classifier_with_history, LinearClassifier, TrainConfig};
use noisy_icl::corpus::{load_dataset, Dataset, TaskTemplate};
use noisy_icl::eval::{
    emit_report, execute_run, execute_stability, execute_sweep, Experiment, ProviderSpec, RunConfig,
};
use noisy_icl::noise::{corrupt_labels, split_clean_subset};
use noisy_icl::rectifier::{build_training_corpus, write_training_corpus, DEFAULT_CORPUS_RATES};
use noisy_icl::retrieval::{build_index, EmbeddingProvider, TopKRetriever, DEFAULT_HASH_DIM};
use noisy_icl::strategies::Strategy;
use noisy_icl::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "noisy-icl", version, about = "In-context learning experiments over noisy demonstration labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL dataset against a template and write it normalized.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Flip a fraction of labels uniformly; writes the dataset and a plan sidecar.
    Corrupt {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Embed a dataset into a top-k index file.
    Index {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the confidence classifier on a clean sample of a dataset.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        provider: ProviderArgs,
        /// Fraction sampled as the clean subset; 1 trains on the whole input.
        #[arg(long, default_value_t = 0.1)]
        clean_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build `{prompt, completion}` training pairs for the rectifier.
    BuildRectCorpus {
        /// Clean labelled examples.
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CORPUS_RATES)]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate one configuration at one noise rate.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Evaluate one configuration across noise rates.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Accuracy mean and spread over corruption seeds (post-retrieval noise).
    Stability {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Summarize a results directory into report files.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Built-in template (mrpc, sst5, tweet) or a template TOML file.
    #[arg(long)]
    template: String,
    #[arg(long)]
    input: PathBuf,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<Dataset> {
        let template = Arc::new(TaskTemplate::resolve(&self.template)?);
        Ok(load_dataset(&self.input, template)?)
    }
}

#[derive(Args)]
struct ProviderArgs {
    /// Take the embedding provider from this run config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dimension of the offline hashing provider.
    #[arg(long, default_value_t = DEFAULT_HASH_DIM)]
    dim: usize,
}

impl ProviderArgs {
    fn build(&self) -> anyhow::Result<Arc<dyn EmbeddingProvider>> {
        let spec = match &self.config {
            Some(path) => RunConfig::from_file(path)?.retrieval.provider,
            None => ProviderSpec::Hashing { dim: self.dim },
        };
        Ok(spec.build()?)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Strategy name with default parameters, replacing the config's.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(s) = &self.strategy {
            cfg.strategy = Strategy::from_name(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn histogram(ds: &Dataset) -> String {
    ds.label_histogram()
        .iter()
        .zip(ds.template().label_space().labels())
        .map(|(n, l)| format!("{l}={n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_stem().unwrap_or_default().to_os_string();
    name.push(".plan.json");
    output.with_file_name(name)
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest { data, output } => {
            let ds = data.load()?;
            ds.write_jsonl(&output)?;
            println!("{} examples ({})", ds.len(), histogram(&ds));
        }
        Command::Corrupt {
            data,
            rate,
            seed,
            output,
        } => {
            let ds = data.load()?;
            let (noisy, plan) = corrupt_labels(&ds, rate, seed)?;
            noisy.write_jsonl(&output)?;
            let sidecar = sidecar_path(&output);
            plan.write_sidecar(&sidecar, ds.template().label_space())?;
            println!(
                "flipped {} of {} labels; plan written to {}",
                plan.flips.len(),
                ds.len(),
                sidecar.display()
            );
        }
        Command::Index { data, provider, output } => {
            let ds = data.load()?;
            let provider = provider.build()?;
            let index = build_index(&ds, provider.as_ref())?;
            index.save(&output)?;
            println!("indexed {} examples with {}", index.len(), index.provider_tag());
        }
        Command::TrainClassifier {
            data,
            provider,
            clean_fraction,
            seed,
            epochs,
            learning_rate,
            output,
        } => {
            let ds = data.load()?;
            let clean = if clean_fraction >= 1.0 {
                ds
            } else {
                split_clean_subset(&ds, clean_fraction, seed)?.0
            };
            let provider = provider.build()?;
            let config = TrainConfig {
                epochs,
                learning_rate,
                seed,
            };
            let (clf, losses) = train_classifier_with_history(&clean, provider.as_ref(), &config)?;
            clf.save(&output)?;
            println!(
                "trained on {} examples; loss {:.4} -> {:.4}; training accuracy {:.4}",
                clean.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN),
                training_accuracy(&clf, &clean, provider.as_ref())?
            );
        }
        Command::BuildRectCorpus {
            data,
            provider,
            n,
            rates,
            seed,
            output,
        } => {
            let clean = data.load()?;
            let provider = provider.build()?;
            let index = Arc::new(build_index(&clean, provider.as_ref())?);
            let retriever = TopKRetriever::new(index, provider)?;
            let records = build_training_corpus(&clean, &retriever, n, &rates, seed)?;
            write_training_corpus(&output, clean.template(), &records)?;
            println!("wrote {} training pairs to {}", records.len(), output.display());
        }
        Command::Run { run, rate } => {
            let cfg = run.config()?;
            let rate = rate.unwrap_or(cfg.noise.rate);
            let seed = cfg.seed;
            let exp = Experiment::prepare(cfg)?;
            let result = execute_run(&exp, rate, seed)?;
            println!(
                "{} r={}: accuracy {:.4} ({}/{}){}",
                result.strategy_name(),
                rate,
                result.accuracy,
                result.correct,
                result.total,
                result
                    .rectification_accuracy
                    .map(|t| format!(", label accuracy {t:.4}"))
                    .unwrap_or_default()
            );
        }
        Command::Sweep { run, rates } => {
            let cfg = run.config()?;
            let rates = rates.unwrap_or_else(|| cfg.rates.clone());
            let exp = Experiment::prepare(cfg)?;
            for r in execute_sweep(&exp, &rates)? {
                println!("{} r={}: accuracy {:.4}", r.strategy_name(), r.rate, r.accuracy);
            }
        }
        Command::Stability { run, rates, seeds } => {
            let cfg = run.config()?;
            let rates = rates.unwrap_or_else(|| vec![cfg.noise.rate]);
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            let exp = Experiment::prepare(cfg)?;
            for s in execute_stability(&exp, &rates, &seeds)? {
                println!("{} r={}: mean {:.4} std {:.4}", s.strategy, s.rate, s.mean, s.std);
            }
        }
        Command::Report { dir } => {
            if !dir.is_dir() {
                bail!("results directory {} does not exist", dir.display());
            }
            let report = emit_report(&dir).with_context(|| format!("building report for {}", dir.display()))?;
            println!(
                "{} runs, {} stability reports -> {}",
                report.runs.len(),
                report.stability.len(),
                dir.join("report").display()
            );
        }
    }
    Ok(())
}

fn training_accuracy(clf: &LinearClassifier, ds: &Dataset, provider: &dyn EmbeddingProvider) -> anyhow::Result<f64> {
    let mut correct = 0;
    for ex in ds.examples() {
        let est = noisy_icl::confidence::predict_confidence(clf, ds.template(), ex, provider)?;
        if est.argmax() == ex.label_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Backend) => 3,
        Some(ErrorKind::Assertion) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
